use super::TaskError;

/// Named tokens of the fixed vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tok {
    Pad,
    Bos,
    Eos,
    Digit(u8),
    Plus,
    Minus,
    Times,
    Eq,
    LParen,
    RParen,
    Comma,
    Lt,
    Gt,
    Mod,
    Max,
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Solve,
}

const NAMED: [&str; 29] = [
    "<pad>", "<bos>", "<eos>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*",
    "=", "(", ")", ",", "<", ">", "mod", "max", "<think>", "</think>", "<answer>", "</answer>",
    "Solve:",
];

/// Vocabulary size; ids past the named glyphs are reserved (`⟨NN⟩`).
pub const VOCAB_SIZE: usize = 64;

impl Tok {
    pub fn id(self) -> u32 {
        match self {
            Tok::Pad => 0,
            Tok::Bos => 1,
            Tok::Eos => 2,
            Tok::Digit(d) => {
                assert!(d < 10, "digit {d}");
                3 + d as u32
            }
            Tok::Plus => 13,
            Tok::Minus => 14,
            Tok::Times => 15,
            Tok::Eq => 16,
            Tok::LParen => 17,
            Tok::RParen => 18,
            Tok::Comma => 19,
            Tok::Lt => 20,
            Tok::Gt => 21,
            Tok::Mod => 22,
            Tok::Max => 23,
            Tok::ThinkOpen => 24,
            Tok::ThinkClose => 25,
            Tok::AnswerOpen => 26,
            Tok::AnswerClose => 27,
            Tok::Solve => 28,
        }
    }
}

/// Bijective id ↔ glyph map. Encoding is greedy longest-match and skips
/// whitespace, so both [`decode`](Self::decode) and
/// [`decode_spaced`](Self::decode_spaced) re-encode to the same ids.
#[derive(Clone, Debug)]
pub struct SymbolTable {
    glyphs: Vec<String>,
    /// glyph indices sorted by decreasing byte length
    by_len: Vec<usize>,
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut glyphs: Vec<String> = NAMED.iter().map(|s| s.to_string()).collect();
        for i in glyphs.len()..VOCAB_SIZE {
            glyphs.push(format!("⟨{i}⟩"));
        }
        let mut by_len: Vec<usize> = (0..glyphs.len()).collect();
        by_len.sort_by_key(|&i| std::cmp::Reverse(glyphs[i].len()));
        SymbolTable { glyphs, by_len }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn glyph(&self, id: u32) -> Option<&str> {
        self.glyphs.get(id as usize).map(String::as_str)
    }

    pub fn pad(&self) -> u32 {
        Tok::Pad.id()
    }

    pub fn bos(&self) -> u32 {
        Tok::Bos.id()
    }

    pub fn eos(&self) -> u32 {
        Tok::Eos.id()
    }

    /// Concatenated glyphs; unknown ids render as `�`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.glyph(i).unwrap_or("\u{fffd}")).collect()
    }

    /// Glyphs joined by single spaces, for display and export.
    pub fn decode_spaced(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.glyph(i).unwrap_or("\u{fffd}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TaskError> {
        let mut out = Vec::new();
        let mut pos = 0;
        let bytes = text.as_bytes();
        'outer: while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
                continue;
            }
            for &i in &self.by_len {
                if text[pos..].starts_with(self.glyphs[i].as_str()) {
                    out.push(i as u32);
                    pos += self.glyphs[i].len();
                    continue 'outer;
                }
            }
            return Err(TaskError::UnknownGlyph {
                pos,
                text: text.to_string(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn named_ids_line_up() {
        let t = SymbolTable::new();
        assert_eq!(t.len(), VOCAB_SIZE);
        let toks = [
            Tok::Pad,
            Tok::Bos,
            Tok::Eos,
            Tok::Plus,
            Tok::Mod,
            Tok::ThinkOpen,
            Tok::AnswerClose,
            Tok::Solve,
        ];
        for tok in toks {
            assert_eq!(t.encode(t.glyph(tok.id()).unwrap()).unwrap(), vec![tok.id()]);
        }
        assert_eq!(t.glyph(Tok::Digit(7).id()), Some("7"));
        let mut uniq = t.glyphs.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), VOCAB_SIZE);
    }

    #[test]
    fn longest_match_and_errors() {
        let t = SymbolTable::new();
        assert_eq!(
            t.encode("<answer>12</answer>").unwrap(),
            vec![26, Tok::Digit(1).id(), Tok::Digit(2).id(), 27]
        );
        assert_eq!(t.encode("< >").unwrap(), vec![20, 21]);
        assert!(t.encode("7 ? 3").is_err());
    }

    proptest! {
        #[test]
        fn encode_inverts_decode(ids in proptest::collection::vec(0u32..64, 0..40)) {
            let t = SymbolTable::new();
            prop_assert_eq!(t.encode(&t.decode(&ids)).unwrap(), ids.clone());
            prop_assert_eq!(t.encode(&t.decode_spaced(&ids)).unwrap(), ids);
        }
    }
}

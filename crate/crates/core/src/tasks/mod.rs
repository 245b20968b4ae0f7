//! Synthetic arithmetic environments with exact-match answers.

mod pretrain;
mod symbols;

pub use pretrain::{evaluate_format, pretrain_supervised, PretrainConfig, PretrainReport};
pub use symbols::{SymbolTable, Tok, VOCAB_SIZE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("difficulty {0} outside 1..=5")]
    InvalidDifficulty(u8),
    #[error("unknown task kind {0:?} (mod_arith, chain_sum, compare)")]
    UnknownKind(String),
    #[error("unknown glyph at byte {pos} of {text:?}")]
    UnknownGlyph { pos: usize, text: String },
    #[error("pretraining did not reach {target:.0}% format accuracy in {steps} steps (best {best:.1}%)")]
    NonConvergence { steps: usize, target: f64, best: f64 },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("task record does not match its generator: {0}")]
    RecordMismatch(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModArith,
    ChainSum,
    Compare,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ModArith, TaskKind::ChainSum, TaskKind::Compare];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ModArith => "mod_arith",
            TaskKind::ChainSum => "chain_sum",
            TaskKind::Compare => "compare",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mod_arith" | "modarith" => Ok(TaskKind::ModArith),
            "chain_sum" | "chainsum" => Ok(TaskKind::ChainSum),
            "compare" => Ok(TaskKind::Compare),
            _ => Err(TaskError::UnknownKind(s.to_string())),
        }
    }
}

/// One problem: prompt tokens, the exact-match target and a reference
/// completion used for supervised pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub seed: u64,
    pub kind: TaskKind,
    pub difficulty: u8,
    pub prompt: Vec<u32>,
    pub target: String,
    pub solution: Vec<u32>,
}

/// Line-delimited export form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub seed: u64,
    pub kind: TaskKind,
    pub difficulty: u8,
    pub prompt: String,
    pub target: String,
}

fn digits(n: u64) -> Vec<Tok> {
    n.to_string().bytes().map(|b| Tok::Digit(b - b'0')).collect()
}

/// Operand upper bound (exclusive) and modulus range per difficulty.
fn mod_ranges(d: u8) -> (u64, u64, u64) {
    match d {
        1 => (5, 2, 5),
        2 => (10, 2, 10),
        3 => (20, 2, 10),
        4 => (50, 2, 20),
        _ => (100, 2, 30),
    }
}

/// Oracle for every task family.
pub fn oracle(kind: TaskKind, operands: &[u64]) -> u64 {
    match kind {
        TaskKind::ModArith => (operands[0] + operands[1]) % operands[2],
        TaskKind::ChainSum => operands.iter().sum(),
        TaskKind::Compare => operands[0].max(operands[1]),
    }
}

/// Deterministic instance for `(kind, difficulty, seed)`.
pub fn generate_task(kind: TaskKind, difficulty: u8, seed: u64) -> Result<TaskInstance, TaskError> {
    if !(1..=5).contains(&difficulty) {
        return Err(TaskError::InvalidDifficulty(difficulty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompt = vec![Tok::Bos];
    let mut think = vec![Tok::ThinkOpen];
    let operands: Vec<u64> = match kind {
        TaskKind::ModArith => {
            let (hi, mlo, mhi) = mod_ranges(difficulty);
            vec![rng.gen_range(0..hi), rng.gen_range(0..hi), rng.gen_range(mlo..=mhi)]
        }
        TaskKind::ChainSum => (0..=difficulty).map(|_| rng.gen_range(0..10)).collect(),
        TaskKind::Compare => {
            let hi = 10u64.pow(difficulty.min(3) as u32);
            vec![rng.gen_range(0..hi), rng.gen_range(0..hi)]
        }
    };
    let answer = oracle(kind, &operands);
    match kind {
        TaskKind::ModArith => {
            let (a, b, m) = (operands[0], operands[1], operands[2]);
            prompt.push(Tok::LParen);
            prompt.extend(digits(a));
            prompt.push(Tok::Plus);
            prompt.extend(digits(b));
            prompt.push(Tok::RParen);
            prompt.push(Tok::Mod);
            prompt.extend(digits(m));
            think.extend(digits(a));
            think.push(Tok::Plus);
            think.extend(digits(b));
            think.push(Tok::Eq);
            think.extend(digits(a + b));
        }
        TaskKind::ChainSum => {
            let mut acc = operands[0];
            prompt.extend(digits(acc));
            for (i, &x) in operands[1..].iter().enumerate() {
                prompt.push(Tok::Plus);
                prompt.extend(digits(x));
                if i > 0 {
                    think.push(Tok::Comma);
                }
                think.extend(digits(acc));
                think.push(Tok::Plus);
                think.extend(digits(x));
                think.push(Tok::Eq);
                acc += x;
                think.extend(digits(acc));
            }
        }
        TaskKind::Compare => {
            let (a, b) = (operands[0], operands[1]);
            prompt.push(Tok::Max);
            prompt.push(Tok::LParen);
            prompt.extend(digits(a));
            prompt.push(Tok::Comma);
            prompt.extend(digits(b));
            prompt.push(Tok::RParen);
            think.extend(digits(a));
            think.push(match a.cmp(&b) {
                std::cmp::Ordering::Less => Tok::Lt,
                std::cmp::Ordering::Greater => Tok::Gt,
                std::cmp::Ordering::Equal => Tok::Eq,
            });
            think.extend(digits(b));
        }
    }
    prompt.push(Tok::Eq);
    prompt.push(Tok::Solve);
    think.push(Tok::ThinkClose);
    think.push(Tok::AnswerOpen);
    think.extend(digits(answer));
    think.push(Tok::AnswerClose);
    think.push(Tok::Eos);
    Ok(TaskInstance {
        seed,
        kind,
        difficulty,
        prompt: prompt.into_iter().map(Tok::id).collect(),
        target: answer.to_string(),
        solution: think.into_iter().map(Tok::id).collect(),
    })
}

impl TaskInstance {
    pub fn record(&self, table: &SymbolTable) -> TaskRecord {
        TaskRecord {
            seed: self.seed,
            kind: self.kind,
            difficulty: self.difficulty,
            prompt: table.decode_spaced(&self.prompt),
            target: self.target.clone(),
        }
    }

    /// Rebuilds an instance from its record, checking it against the generator.
    pub fn from_record(rec: &TaskRecord, table: &SymbolTable) -> Result<Self, TaskError> {
        let inst = generate_task(rec.kind, rec.difficulty, rec.seed)?;
        let prompt = table.encode(&rec.prompt)?;
        if prompt != inst.prompt {
            return Err(TaskError::RecordMismatch(format!("prompt of seed {}", rec.seed)));
        }
        if rec.target != inst.target {
            return Err(TaskError::RecordMismatch(format!("target of seed {}", rec.seed)));
        }
        Ok(inst)
    }

    /// Prompt followed by the reference completion.
    pub fn full_sequence(&self) -> Vec<u32> {
        self.prompt.iter().chain(&self.solution).copied().collect()
    }
}

/// Writes one JSON record per line.
pub fn export_jsonl<W: std::io::Write>(
    w: &mut W,
    tasks: &[TaskInstance],
    table: &SymbolTable,
) -> Result<(), TaskError> {
    for t in tasks {
        serde_json::to_writer(&mut *w, &t.record(table))?;
        w.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn import_jsonl(text: &str, table: &SymbolTable) -> Result<Vec<TaskInstance>, TaskError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TaskInstance::from_record(&serde_json::from_str(l)?, table))
        .collect()
}

/// First well-nested `<answer>…</answer>` span, trimmed. `None` when the
/// first opening tag is followed by another opening tag before it closes,
/// or never closes.
pub fn parse_answer(completion: &str) -> Option<String> {
    const OPEN: &str = "<answer>";
    const CLOSE: &str = "</answer>";
    let start = completion.find(OPEN)? + OPEN.len();
    let rest = &completion[start..];
    let close = rest.find(CLOSE)?;
    if rest[..close].contains(OPEN) {
        return None;
    }
    Some(rest[..close].trim().to_string())
}

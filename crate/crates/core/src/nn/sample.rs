use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::PolicyModel;
use super::NnError;

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_new: usize,
    /// Generation stops after this token is emitted (it is kept).
    pub stop_token: Option<u32>,
}

/// Sampled tokens and `log π(o_t | prefix)` of each, under the tempered
/// distribution (plain softmax when greedy).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Completion {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

/// `log_softmax(logits / temperature)`; greedy temperatures use 1.
pub fn log_softmax(logits: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let t = if temperature < GREEDY_TEMPERATURE { 1.0 } else { temperature };
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = logits.mapv(|z| (z - m) / t);
    let lse = shifted.mapv(f64::exp).sum().ln();
    shifted - lse
}

fn draw<R: Rng + ?Sized>(logp: &Array1<f64>, temperature: f64, rng: &mut R) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        let mut best = 0;
        for (i, &v) in logp.iter().enumerate() {
            if v > logp[best] {
                best = i;
            }
        }
        return best;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Per-sequence key/value rows for every layer.
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl PolicyModel {
    /// One decoding step for a set of sequences: feeds `tokens[i]` at
    /// `positions[i]` into cache `slots[i]` and returns next-token logits.
    fn decode_step(
        &self,
        tokens: &[u32],
        slots: &[usize],
        caches: &mut [KvCache],
    ) -> Array2<f64> {
        let n = tokens.len();
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = Array2::<f64>::zeros((n, d));
        for (i, (&t, &slot)) in tokens.iter().zip(slots).enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.row(t as usize));
            row += &self.pos_emb.row(caches[slot].len);
        }
        for (layer, blk) in self.blocks.iter().enumerate() {
            let a = blk.attn_norm.forward_cached(x.view()).0;
            let q = blk.wq.forward_cached(a.view()).0;
            let k = blk.wk.forward_cached(a.view()).0;
            let v = blk.wv.forward_cached(a.view()).0;
            let mut ctx = Array2::<f64>::zeros((n, d));
            for (i, &slot) in slots.iter().enumerate() {
                let cache = &mut caches[slot];
                cache.keys[layer].extend(k.row(i).iter());
                cache.values[layer].extend(v.row(i).iter());
                let t = cache.len + 1;
                let keys = &cache.keys[layer];
                let vals = &cache.values[layer];
                for h in 0..self.config.n_heads {
                    let off = h * hd;
                    let qh = q.slice(s![i, off..off + hd]);
                    let mut sc: Vec<f64> = (0..t)
                        .map(|p| {
                            let kr = &keys[p * d + off..p * d + off + hd];
                            qh.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in sc.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for j in 0..hd {
                        let mut acc = 0.0;
                        for (p, w) in sc.iter().enumerate() {
                            acc += w * vals[p * d + off + j];
                        }
                        ctx[[i, off + j]] = acc / z;
                    }
                }
            }
            x += &blk.wo.forward_cached(ctx.view()).0;
            let b = blk.ffn_norm.forward_cached(x.view()).0;
            let g = blk.w_gate.forward_cached(b.view()).0;
            let u = blk.w_up.forward_cached(b.view()).0;
            let act = g.mapv(|v| v / (1.0 + (-v).exp())) * u;
            x += &blk.w_down.forward_cached(act.view()).0;
        }
        for &slot in slots {
            caches[slot].len += 1;
        }
        let hf = self.final_norm.forward_cached(x.view()).0;
        hf.dot(&self.head.t())
    }

    /// Samples one completion per prompt, advancing all of them in lockstep.
    /// The random stream is consumed in prompt order at every step.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        prompts: &[Vec<u32>],
        params: SamplingParams,
        rng: &mut R,
    ) -> Result<Vec<Completion>, NnError> {
        if !(params.temperature >= 0.0) {
            return Err(NnError::InvalidConfig("temperature must be non-negative".into()));
        }
        let vocab = self.config.vocab as u32;
        for p in prompts {
            if p.is_empty() {
                return Err(NnError::InvalidConfig("empty prompt".into()));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= vocab) {
                return Err(NnError::TokenOutOfRange { token: t, vocab: self.config.vocab });
            }
            if p.len() > self.config.max_seq {
                return Err(NnError::SequenceTooLong { len: p.len(), max: self.config.max_seq });
            }
        }
        let layers = self.blocks.len();
        let mut caches: Vec<KvCache> = prompts
            .iter()
            .map(|_| KvCache {
                keys: vec![Vec::new(); layers],
                values: vec![Vec::new(); layers],
                len: 0,
            })
            .collect();
        let mut out = vec![Completion::default(); prompts.len()];
        let mut done = vec![false; prompts.len()];
        let mut fed = vec![0usize; prompts.len()];
        loop {
            let mut tokens = Vec::new();
            let mut slots = Vec::new();
            for i in 0..prompts.len() {
                if done[i] {
                    continue;
                }
                let tok = if fed[i] < prompts[i].len() {
                    prompts[i][fed[i]]
                } else {
                    *out[i].tokens.last().expect("sampled token")
                };
                tokens.push(tok);
                slots.push(i);
            }
            if slots.is_empty() {
                break;
            }
            let logits = self.decode_step(&tokens, &slots, &mut caches);
            for (row, &i) in slots.iter().enumerate() {
                fed[i] += 1;
                if fed[i] < prompts[i].len() {
                    continue;
                }
                let logp = log_softmax(logits.row(row), params.temperature);
                let tok = draw(&logp, params.temperature, rng);
                out[i].tokens.push(tok as u32);
                out[i].logprobs.push(logp[tok]);
                let total = prompts[i].len() + out[i].tokens.len();
                if out[i].tokens.len() >= params.max_new
                    || Some(tok as u32) == params.stop_token
                    || total >= self.config.max_seq
                {
                    done[i] = true;
                }
            }
            if params.max_new == 0 {
                break;
            }
        }
        if params.max_new == 0 {
            for c in &mut out {
                c.tokens.clear();
                c.logprobs.clear();
            }
        }
        Ok(out)
    }

    /// Single seeded completion.
    pub fn sample_completion(
        &self,
        prompt: &[u32],
        params: SamplingParams,
        seed: u64,
    ) -> Result<Completion, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sample_batch(&[prompt.to_vec()], params, &mut rng)?.remove(0))
    }
}

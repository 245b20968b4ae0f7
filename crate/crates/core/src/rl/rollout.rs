use ndarray::Array2;

use super::loss::RolloutGroup;
use crate::nn::{log_softmax, SeqBatch};

/// Groups flattened into one packed batch of `prompt ‖ completion` sequences.
#[derive(Clone, Debug)]
pub struct PackedRollouts {
    pub batch: SeqBatch,
    /// `(group, completion, prompt length)` per packed sequence.
    pub index: Vec<(usize, usize, usize)>,
}

pub fn pack(groups: &[RolloutGroup]) -> PackedRollouts {
    let mut batch = SeqBatch::new();
    let mut index = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (ci, c) in g.completions.iter().enumerate() {
            let seq: Vec<u32> = g.prompt.iter().chain(c).copied().collect();
            batch.push(&seq);
            index.push((gi, ci, g.prompt.len()));
        }
    }
    PackedRollouts { batch, index }
}

impl PackedRollouts {
    /// Rows of the logits that predict completion token `t` of sequence `s`.
    fn rows(&self, s: usize) -> std::ops::Range<usize> {
        let r = self.batch.range(s);
        let p = self.index[s].2;
        r.start + p - 1..r.end - 1
    }

    fn shape<T: Clone>(&self, groups: &[RolloutGroup], fill: T) -> Vec<Vec<Vec<T>>> {
        groups
            .iter()
            .map(|g| g.completions.iter().map(|c| vec![fill.clone(); c.len()]).collect())
            .collect()
    }

    /// Tempered log-probs of the sampled tokens and the untempered mean
    /// entropy of each completion.
    pub fn logprobs(
        &self,
        groups: &[RolloutGroup],
        logits: &Array2<f64>,
        temperature: f64,
    ) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
        let mut lp = self.shape(groups, 0.0);
        let mut ent = Vec::with_capacity(self.index.len());
        for (s, &(gi, ci, p)) in self.index.iter().enumerate() {
            let toks = &self.batch.seq(s)[p..];
            let rows = self.rows(s);
            let n = rows.len();
            let mut h = 0.0;
            for (t, row) in rows.enumerate() {
                let z = logits.row(row);
                let l = log_softmax(z, temperature);
                lp[gi][ci][t] = l[toks[t] as usize];
                let plain = if temperature == 1.0 { l } else { log_softmax(z, 1.0) };
                h -= plain.iter().map(|&v| v.exp() * v).sum::<f64>();
            }
            ent.push(if n == 0 { 0.0 } else { h / n as f64 });
        }
        (lp, ent)
    }

    /// Chains `∂loss/∂logprob` through the tempered log-softmax.
    pub fn dlogits(
        &self,
        logits: &Array2<f64>,
        grad: &[Vec<Vec<f64>>],
        temperature: f64,
    ) -> Array2<f64> {
        let t_eff = if temperature < crate::nn::GREEDY_TEMPERATURE { 1.0 } else { temperature };
        let mut d = Array2::<f64>::zeros(logits.raw_dim());
        for (s, &(gi, ci, p)) in self.index.iter().enumerate() {
            let toks = &self.batch.seq(s)[p..];
            for (t, row) in self.rows(s).enumerate() {
                let g = grad[gi][ci][t];
                if g == 0.0 {
                    continue;
                }
                let l = log_softmax(logits.row(row), temperature);
                let mut dr = d.row_mut(row);
                for (j, &lj) in l.iter().enumerate() {
                    dr[j] -= g * lj.exp() / t_eff;
                }
                dr[toks[t] as usize] += g / t_eff;
            }
        }
        d
    }
}

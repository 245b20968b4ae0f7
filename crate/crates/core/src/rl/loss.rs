use serde::{Deserialize, Serialize};

use super::RlError;

/// How the clipped surrogate is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossGranularity {
    /// GRPO: token mean per completion, then mean over completions and groups.
    SequenceMean,
    /// DAPO: sum over every token of the batch divided by the token count.
    TokenMean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_beta: f64,
    pub granularity: LossGranularity,
}

/// G completions of one prompt with their old-policy log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: Vec<u32>,
    pub target: String,
    pub completions: Vec<Vec<u32>>,
    pub old_logprobs: Vec<Vec<f64>>,
    /// Reference-policy log-probs, needed only when `kl_beta > 0`.
    pub ref_logprobs: Option<Vec<Vec<f64>>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.completions.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossDiagnostics {
    /// Fraction of tokens with ρ outside `[1 − ε_low, 1 + ε_high]`.
    pub clip_fraction: f64,
    pub ratio_mean: f64,
    /// Mean per-token k3 estimate of KL(π_θ‖π_ref); 0 when β = 0.
    pub kl: f64,
    pub tokens: usize,
    /// Groups whose advantages are all zero.
    pub degenerate_groups: usize,
}

/// Loss value, `∂loss/∂(new log-prob)` per token, and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<Vec<Vec<f64>>>,
    pub diagnostics: LossDiagnostics,
}

/// Clipped surrogate of one token and its derivative w.r.t. the new log-prob.
pub fn clipped_term(ratio: f64, adv: f64, clip_low: f64, clip_high: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip_low, 1.0 + clip_high);
    let unclipped_v = ratio * adv;
    let clipped_v = clipped * adv;
    if unclipped_v <= clipped_v {
        // dρ/d(new) = ρ
        (unclipped_v, ratio * adv)
    } else {
        (clipped_v, 0.0)
    }
}

/// Negative clipped surrogate objective (minus `β·KL` when enabled). Both trainers share
/// this; they differ only in `cfg`.
pub fn policy_loss(
    groups: &[RolloutGroup],
    new_logprobs: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
) -> Result<LossOutput, RlError> {
    if new_logprobs.len() != groups.len() {
        return Err(RlError::Misalignment(format!(
            "{} groups, {} log-prob groups",
            groups.len(),
            new_logprobs.len()
        )));
    }
    let total_tokens: usize = groups.iter().flat_map(|g| &g.old_logprobs).map(Vec::len).sum();
    let mut loss = 0.0;
    let mut diag = LossDiagnostics::default();
    let mut grad = Vec::with_capacity(groups.len());
    let n_groups = groups.len() as f64;
    for (gi, (g, new_g)) in groups.iter().zip(new_logprobs).enumerate() {
        if new_g.len() != g.size() || g.old_logprobs.len() != g.size() || g.advantages.len() != g.size() {
            return Err(RlError::Misalignment(format!("group {gi}: completion counts differ")));
        }
        if g.advantages.iter().all(|&a| a == 0.0) {
            diag.degenerate_groups += 1;
        }
        let refs = match (cfg.kl_beta > 0.0, &g.ref_logprobs) {
            (true, Some(r)) => Some(r),
            (true, None) => {
                return Err(RlError::Misalignment(format!("group {gi}: KL needs reference log-probs")))
            }
            _ => None,
        };
        let mut g_grad = Vec::with_capacity(g.size());
        for (i, (new, old)) in new_g.iter().zip(&g.old_logprobs).enumerate() {
            if new.len() != old.len() || g.completions[i].len() != old.len() {
                return Err(RlError::Misalignment(format!(
                    "group {gi} completion {i}: {} new vs {} old log-probs",
                    new.len(),
                    old.len()
                )));
            }
            let weight = match cfg.granularity {
                LossGranularity::SequenceMean => {
                    if old.is_empty() {
                        0.0
                    } else {
                        1.0 / (old.len() as f64 * g.size() as f64 * n_groups)
                    }
                }
                LossGranularity::TokenMean => 1.0 / total_tokens.max(1) as f64,
            };
            let adv = g.advantages[i];
            let mut seq_grad = Vec::with_capacity(old.len());
            for t in 0..old.len() {
                let ratio = (new[t] - old[t]).exp();
                diag.ratio_mean += ratio;
                if ratio < 1.0 - cfg.clip_low || ratio > 1.0 + cfg.clip_high {
                    diag.clip_fraction += 1.0;
                }
                let (v, dv) = clipped_term(ratio, adv, cfg.clip_low, cfg.clip_high);
                let mut l = -v;
                let mut dl = -dv;
                if let Some(r) = refs {
                    // k3: exp(ref − new) − (ref − new) − 1
                    let d = r[i][t] - new[t];
                    let kl = d.exp() - d - 1.0;
                    diag.kl += kl;
                    l += cfg.kl_beta * kl;
                    dl += cfg.kl_beta * (1.0 - d.exp());
                }
                loss += weight * l;
                seq_grad.push(weight * dl);
            }
            g_grad.push(seq_grad);
        }
        grad.push(g_grad);
    }
    if total_tokens > 0 {
        let n = total_tokens as f64;
        diag.clip_fraction /= n;
        diag.ratio_mean /= n;
        diag.kl /= n;
    }
    diag.tokens = total_tokens;
    Ok(LossOutput {
        loss,
        grad,
        diagnostics: diag,
    })
}

/// GRPO: sequence-mean granularity with the configured β.
pub fn grpo_loss(
    groups: &[RolloutGroup],
    new_logprobs: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
) -> Result<LossOutput, RlError> {
    let cfg = LossConfig {
        granularity: LossGranularity::SequenceMean,
        ..*cfg
    };
    policy_loss(groups, new_logprobs, &cfg)
}

/// DAPO: token-mean granularity, β forced to 0.
pub fn dapo_loss(
    groups: &[RolloutGroup],
    new_logprobs: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
) -> Result<LossOutput, RlError> {
    if cfg.kl_beta != 0.0 {
        log::warn!("DAPO ignores kl_beta = {} (KL term removed)", cfg.kl_beta);
    }
    let cfg = LossConfig {
        granularity: LossGranularity::TokenMean,
        kl_beta: 0.0,
        ..*cfg
    };
    policy_loss(groups, new_logprobs, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig {
            clip_low: 0.2,
            clip_high: 0.28,
            kl_beta: 0.0,
            granularity: LossGranularity::SequenceMean,
        }
    }

    fn group(lens: &[usize], adv: &[f64]) -> RolloutGroup {
        RolloutGroup {
            prompt: vec![1],
            target: "0".into(),
            completions: lens.iter().map(|&n| vec![3; n]).collect(),
            old_logprobs: lens.iter().map(|&n| vec![-1.0; n]).collect(),
            ref_logprobs: None,
            rewards: adv.to_vec(),
            advantages: adv.to_vec(),
        }
    }

    #[test]
    fn on_policy_symmetric_group_is_zero() {
        let g = group(&[3, 3, 3, 3], &[1.0, -1.0, -1.0, 1.0]);
        let out = grpo_loss(&[g.clone()], &[g.old_logprobs.clone()], &cfg()).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert_eq!(out.diagnostics.clip_fraction, 0.0);
        assert_eq!(out.diagnostics.ratio_mean, 1.0);
    }

    #[test]
    fn clip_high_hand_value() {
        let g = group(&[1], &[1.0]);
        let new = vec![vec![vec![-1.0 + 1.5f64.ln()]]];
        let out = grpo_loss(&[g], &new, &cfg()).unwrap();
        assert!((out.loss + 1.28).abs() < 1e-12);
        assert_eq!(out.grad[0][0][0], 0.0);
        assert_eq!(out.diagnostics.clip_fraction, 1.0);
    }

    #[test]
    fn granularities_differ_on_unequal_lengths() {
        let g = group(&[1, 3], &[1.0, 1.0]);
        let (a, b) = (0.5f64, 0.2f64);
        let new = vec![vec![vec![-1.0 + a.ln_1p()], vec![-1.0 + b.ln_1p(); 3]]];
        let grpo = grpo_loss(&[g.clone()], &new, &cfg()).unwrap().loss;
        let dapo = dapo_loss(&[g], &new, &cfg()).unwrap().loss;
        // per-token contributions min(ρ, 1.28)
        let ca = (1.0 + a).min(1.28);
        let cb = (1.0 + b).min(1.28);
        assert!((dapo + (ca + 3.0 * cb) / 4.0).abs() < 1e-12);
        assert!((grpo + (ca + cb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dapo_ignores_beta() {
        let mut g = group(&[2, 2], &[1.0, -1.0]);
        g.ref_logprobs = Some(vec![vec![-3.0; 2]; 2]);
        let new = vec![vec![vec![-0.5, -1.5], vec![-1.2, -0.9]]];
        let mut c = cfg();
        c.kl_beta = 0.5;
        let dapo = dapo_loss(&[g.clone()], &new, &c).unwrap();
        c.kl_beta = 0.0;
        let grpo = grpo_loss(&[g], &new, &c).unwrap();
        assert!((dapo.loss - grpo.loss).abs() < 1e-15);
        assert_eq!(dapo.diagnostics.kl, 0.0);
    }

    #[test]
    fn kl_gradient_matches_finite_difference() {
        let mut g = group(&[2], &[0.7]);
        g.ref_logprobs = Some(vec![vec![-1.3, -0.4]]);
        let mut c = cfg();
        c.kl_beta = 0.3;
        let new = vec![vec![vec![-0.9, -1.05]]];
        let out = grpo_loss(&[g.clone()], &new, &c).unwrap();
        assert!(out.diagnostics.kl > 0.0);
        for t in 0..2 {
            let h = 1e-6;
            let mut p = new.clone();
            p[0][0][t] += h;
            let mut m = new.clone();
            m[0][0][t] -= h;
            let fd = (grpo_loss(&[g.clone()], &p, &c).unwrap().loss
                - grpo_loss(&[g.clone()], &m, &c).unwrap().loss)
                / (2.0 * h);
            assert!((fd - out.grad[0][0][t]).abs() < 1e-8);
        }
    }

    #[test]
    fn misalignment() {
        let g = group(&[2, 3], &[1.0, -1.0]);
        let bad = vec![vec![vec![0.0; 2], vec![0.0; 2]]];
        assert!(matches!(grpo_loss(&[g.clone()], &bad, &cfg()), Err(RlError::Misalignment(_))));
        assert!(grpo_loss(&[g], &[], &cfg()).is_err());
    }

    #[test]
    fn surrogate_bound() {
        for &adv in &[-2.0, -0.5, 0.5, 2.0] {
            for i in 0..50 {
                let ratio = 0.2 + i as f64 * 0.05;
                let (v, _) = clipped_term(ratio, adv, 0.2, 0.28);
                assert!(v.abs() <= (adv.abs() * 1.28).max(adv.abs() * ratio) + 1e-15);
                if adv > 0.0 {
                    assert!(v <= ratio * adv);
                }
            }
        }
    }
}

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::loss::{LossConfig, LossGranularity};
use super::RlError;
use crate::aqn::{DecayKind, NoiseSchedule};
use crate::tasks::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Grpo,
    Dapo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Grpo => "grpo",
            Algo::Dapo => "dapo",
        })
    }
}

impl FromStr for Algo {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Algo::Grpo),
            "dapo" => Ok(Algo::Dapo),
            _ => Err(RlError::InvalidConfig(format!("unknown algo {s:?} (grpo, dapo)"))),
        }
    }
}

/// Everything the RL loop needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_beta: f64,
    /// Completions per prompt (G).
    pub group_size: usize,
    /// Prompts per step.
    pub batch_prompts: usize,
    /// Inner update iterations per rollout batch (μ).
    pub inner_iters: usize,
    /// Total steps (M).
    pub total_steps: usize,
    pub lr: f64,
    pub advantage_eps: f64,
    pub temperature: f64,
    pub max_new: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Total stage count including the noise-free stage 0.
    pub stages: usize,
    /// Adaptive quantization noise on/off (off keeps σ = 0 in every stage).
    pub aqn: bool,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub decay: DecayKind,
    /// Redraw noise before each prompt group's rollout instead of once per sync.
    pub noise_per_rollout: bool,
    pub task: TaskKind,
    pub difficulty: u8,
    pub seed: u64,
    /// Stop once the rolling mean reward over `early_stop_window` steps reaches this.
    pub early_stop_reward: Option<f64>,
    pub early_stop_window: usize,
    /// Record real elapsed time in `wall_ms` (otherwise 0, for byte-reproducible logs).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::Grpo,
            clip_low: 0.2,
            clip_high: 0.28,
            kl_beta: 0.0,
            group_size: 8,
            batch_prompts: 8,
            inner_iters: 1,
            total_steps: 400,
            lr: 1e-3,
            advantage_eps: 1e-6,
            temperature: 1.0,
            max_new: 32,
            grad_clip: 1.0,
            stages: 10,
            aqn: true,
            sigma_start: 1e-2,
            sigma_end: 5e-4,
            decay: DecayKind::Exponential,
            noise_per_rollout: false,
            task: TaskKind::ModArith,
            difficulty: 2,
            seed: 0,
            early_stop_reward: None,
            early_stop_window: 10,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::InvalidConfig(m));
        if !(self.clip_low > 0.0 && self.clip_low <= self.clip_high && self.clip_high < 1.0) {
            return bad(format!(
                "clip range needs 0 < clip_low <= clip_high < 1, got ({}, {})",
                self.clip_low, self.clip_high
            ));
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 || self.inner_iters == 0 || self.total_steps == 0 {
            return bad("batch_prompts, inner_iters and total_steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.max_new == 0 {
            return bad("max_new must be >= 1".into());
        }
        if !(1..=5).contains(&self.difficulty) {
            return bad(format!("difficulty must be in 1..=5, got {}", self.difficulty));
        }
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.aqn {
            self.schedule()?;
        }
        if self.early_stop_window == 0 {
            return bad("early_stop_window must be >= 1".into());
        }
        Ok(())
    }

    /// Schedule over the noisy stages `1..stages`, so stage 1 reads σ_start
    /// and the last stage reads σ_end. `None` when AQN is off.
    pub fn schedule(&self) -> Result<Option<NoiseSchedule>, RlError> {
        if !self.aqn {
            return Ok(None);
        }
        if self.stages < 3 {
            return Err(RlError::InvalidConfig(format!(
                "stages = {} leaves fewer than 2 noisy stages; use >= 3 or aqn = false",
                self.stages
            )));
        }
        NoiseSchedule::new(self.sigma_start, self.sigma_end, self.stages - 1, self.decay)
            .map(Some)
            .map_err(|e| RlError::InvalidConfig(e.to_string()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_beta: self.kl_beta,
            granularity: match self.algo {
                Algo::Grpo => LossGranularity::SequenceMean,
                Algo::Dapo => LossGranularity::TokenMean,
            },
        }
    }
}

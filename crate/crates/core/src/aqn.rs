//! Adaptive quantization noise: stage schedules and merging of channel-wise
//! Gaussian noise into the RMSNorm scales that feed the quantized projections.
//!
//! Decay curves over `t = (k − 1)/(K − 1)`, all pinned to `σ(1) = σ_start`
//! and `σ(K) = σ_end`:
//!
//! | kind          | σ(k)                                               |
//! |---------------|----------------------------------------------------|
//! | exponential   | `σ_start · (σ_end/σ_start)^t`                      |
//! | linear        | `σ_start + (σ_end − σ_start) · t`                  |
//! | cosine        | `σ_end + (σ_start − σ_end) · (1 + cos πt)/2`       |
//! | logarithmic   | `σ_start + (σ_end − σ_start) · ln(1 + 9t)/ln 10`   |
//!
//! The logarithmic curve drops sharply early and then flattens.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::nn::{NnError, NoisyRmsNorm, PolicyModel};

#[derive(Debug, thiserror::Error)]
pub enum AqnError {
    #[error("stage {k} outside 1..={stages}")]
    StageOutOfRange { k: usize, stages: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown decay kind {0:?} (exponential, linear, cosine, logarithmic)")]
    UnknownDecay(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Exponential,
    Linear,
    Cosine,
    Logarithmic,
}

impl DecayKind {
    pub const ALL: [DecayKind; 4] = [
        DecayKind::Exponential,
        DecayKind::Linear,
        DecayKind::Cosine,
        DecayKind::Logarithmic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecayKind::Exponential => "exponential",
            DecayKind::Linear => "linear",
            DecayKind::Cosine => "cosine",
            DecayKind::Logarithmic => "logarithmic",
        }
    }
}

impl fmt::Display for DecayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecayKind {
    type Err = AqnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(DecayKind::Exponential),
            "linear" => Ok(DecayKind::Linear),
            "cosine" | "cos" => Ok(DecayKind::Cosine),
            "logarithmic" | "log" => Ok(DecayKind::Logarithmic),
            _ => Err(AqnError::UnknownDecay(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Number of noisy stages `K`.
    pub stages: usize,
    pub decay: DecayKind,
}

impl NoiseSchedule {
    pub fn new(
        sigma_start: f64,
        sigma_end: f64,
        stages: usize,
        decay: DecayKind,
    ) -> Result<Self, AqnError> {
        let s = NoiseSchedule {
            sigma_start,
            sigma_end,
            stages,
            decay,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), AqnError> {
        if !(self.sigma_end > 0.0 && self.sigma_start >= self.sigma_end && self.sigma_start.is_finite()) {
            return Err(AqnError::InvalidSchedule(format!(
                "need sigma_start >= sigma_end > 0, got {} and {}",
                self.sigma_start, self.sigma_end
            )));
        }
        if self.stages < 2 {
            return Err(AqnError::InvalidSchedule(format!(
                "need at least 2 noisy stages, got {}",
                self.stages
            )));
        }
        Ok(())
    }

    /// Noise level of stage `k ∈ 1..=K`.
    pub fn sigma_at_stage(&self, k: usize) -> Result<f64, AqnError> {
        let big_k = self.stages;
        if k == 0 || k > big_k {
            return Err(AqnError::StageOutOfRange { k, stages: big_k });
        }
        let (s0, s1) = (self.sigma_start, self.sigma_end);
        if k == 1 {
            return Ok(s0);
        }
        if k == big_k {
            return Ok(s1);
        }
        let t = (k - 1) as f64 / (big_k - 1) as f64;
        let sigma = match self.decay {
            DecayKind::Exponential => s0 * (s1 / s0).powf(t),
            DecayKind::Linear => s0 + (s1 - s0) * t,
            DecayKind::Cosine => s1 + (s0 - s1) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            DecayKind::Logarithmic => s0 + (s1 - s0) * (1.0 + 9.0 * t).ln() / 10f64.ln(),
        };
        // guard the last ulp so the curve stays inside [σ_end, σ_start]
        Ok(sigma.clamp(s1, s0))
    }
}

/// Where a training run is in the stage sequence, plus the noise RNG.
#[derive(Clone, Debug)]
pub struct StageState {
    /// Total stages including the noise-free stage 0.
    pub stages: usize,
    pub steps_per_stage: usize,
    pub rng: ChaCha8Rng,
    /// Noise vectors drawn so far.
    pub vectors_drawn: u64,
}

impl StageState {
    /// `steps_per_stage = ⌊M / stages⌋` (at least 1).
    pub fn new(total_steps: usize, stages: usize, rng: ChaCha8Rng) -> Self {
        let stages = stages.max(1);
        StageState {
            stages,
            steps_per_stage: (total_steps / stages).max(1),
            rng,
            vectors_drawn: 0,
        }
    }

    /// `k = ⌊(step − 1)/steps_per_stage⌋` for 1-based steps; steps past
    /// `stages · steps_per_stage` stay in the last stage.
    pub fn stage_at(&self, step: usize) -> usize {
        (step.saturating_sub(1) / self.steps_per_stage).min(self.stages - 1)
    }
}

/// `dim` independent N(0, σ²) draws; σ = 0 gives exact zeros without consuming randomness.
pub fn sample_noise_vector<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Array1<f64> {
    if sigma == 0.0 {
        return Array1::zeros(dim);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Array1::from_shape_simple_fn(dim, || normal.sample(rng))
}

/// `w_noise = Z + w`: replaces the norm's merged noise.
pub fn merge_noise(norm: &mut NoisyRmsNorm, z: Array1<f64>) -> Result<(), AqnError> {
    norm.set_noise(z)?;
    Ok(())
}

/// Multiplicative view of the merged noise on a weight fed by `norm`.
/// `w_hat` is stored `out × in`, so input channel `j` (column `j`) is scaled
/// by `Z_j / w_j + 1`.
pub fn equivalent_weight_noise(
    norm: &NoisyRmsNorm,
    w_hat: ArrayView2<f64>,
) -> Result<Array2<f64>, AqnError> {
    if w_hat.ncols() != norm.dim() {
        return Err(NnError::DimensionMismatch {
            expected: norm.dim(),
            found: w_hat.ncols(),
        }
        .into());
    }
    let factor = &norm.noise / &norm.weight + 1.0;
    Ok(&w_hat * &factor)
}

/// Sets stage `k`'s noise on every shared norm: zero for `k = 0`, otherwise
/// one fresh draw at `σ(k)` per norm (two per block). `sched` is indexed by
/// noisy stage, so stage `k` of the run reads `σ(k)`. Returns the σ used.
pub fn apply_stage_noise(
    model: &mut PolicyModel,
    sched: Option<&NoiseSchedule>,
    k: usize,
    state: &mut StageState,
) -> Result<f64, AqnError> {
    let sigma = match (k, sched) {
        (0, _) | (_, None) => 0.0,
        (k, Some(s)) => s.sigma_at_stage(k)?,
    };
    if sigma == 0.0 {
        model.clear_noise();
        return Ok(0.0);
    }
    for norm in model.noisy_norms_mut() {
        let z = sample_noise_vector(norm.dim(), sigma, &mut state.rng);
        merge_noise(norm, z)?;
        state.vectors_drawn += 1;
    }
    Ok(sigma)
}

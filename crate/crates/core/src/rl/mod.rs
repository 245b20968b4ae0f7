//! GRPO/DAPO losses, AdamW and the staged training loop.

mod config;
mod loss;
mod optim;
mod reward;
mod rollout;
mod train;

pub use config::{Algo, TrainConfig};
pub use loss::{
    clipped_term, dapo_loss, grpo_loss, policy_loss, LossConfig, LossDiagnostics, LossGranularity,
    LossOutput, RolloutGroup,
};
pub use optim::{clip_grad_norm, AdamW};
pub use reward::{compute_reward, group_advantages, reward_from_text};
pub use rollout::{pack, PackedRollouts};
pub use train::{
    eval_entropy_trace, rollout_entropy, train, EntropyTrace, StepMetrics, TrainSummary,
    METRICS_SCHEMA,
};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("log-probs misaligned: {0}")]
    Misalignment(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, dump: String },
    #[error("{0}")]
    Observer(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Aqn(#[from] crate::aqn::AqnError),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
}

/// Loss of `groups` under `model` and its analytic adapter gradient, flattened
/// in [`crate::nn::ParamGroup::Adapters`] order.
pub fn loss_and_adapter_grad(
    model: &crate::nn::PolicyModel,
    groups: &[RolloutGroup],
    cfg: &LossConfig,
    temperature: f64,
) -> Result<(f64, Vec<f64>), RlError> {
    let packed = pack(groups);
    let (logits, cache) = model.forward_train(&packed.batch)?;
    let (lp, _) = packed.logprobs(groups, &logits, temperature);
    let out = policy_loss(groups, &lp, cfg)?;
    let dl = packed.dlogits(&logits, &out.grad, temperature);
    let grads = model.backward(&packed.batch, &cache, dl.view(), crate::nn::ParamGroup::Adapters);
    Ok((out.loss, grads.slices().concat()))
}

//! Desk-scale quantization-enhanced reinforcement learning.
//!
//! * [`quant`]: bit-exact 4-bit weight codecs and their on-disk container.
//! * [`nn`]: a small decoder-only policy with frozen quantized linears, LoRA
//!   adapters and noise-carrying RMSNorm.
//! * [`aqn`]: staged noise schedules and noise merging into RMSNorm.
//! * [`rl`]: GRPO/DAPO losses, AdamW and the staged training loop.
//! * [`tasks`]: synthetic verifiable-reward arithmetic tasks.
//! * [`cli`]: run configuration and the batch experiment commands.

pub mod aqn;
pub mod cli;
pub mod nn;
pub mod quant;
pub mod rl;
pub mod tasks;

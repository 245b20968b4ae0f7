use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::CliError;
use crate::aqn::DecayKind;
use crate::nn::ModelConfig;
use crate::quant::FormatKind;
use crate::rl::{Algo, TrainConfig};
use crate::tasks::{PretrainConfig, TaskKind, VOCAB_SIZE};

/// Base weight storage: full precision or one of the 4-bit codecs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightFormat {
    Dense,
    Quant(FormatKind),
}

impl fmt::Display for WeightFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFormat::Dense => f.write_str("dense"),
            WeightFormat::Quant(k) => k.fmt(f),
        }
    }
}

impl FromStr for WeightFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dense" | "bf16" | "f64" => Ok(WeightFormat::Dense),
            other => other.parse().map(WeightFormat::Quant).map_err(|_| {
                format!("unknown format `{s}` (dense, int4, fp4, nvfp4, mxfp4, nf4)")
            }),
        }
    }
}

impl TryFrom<String> for WeightFormat {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<WeightFormat> for String {
    fn from(w: WeightFormat) -> String {
        w.to_string()
    }
}

/// Flat run configuration. Every key is optional in the file; missing keys
/// take the defaults listed by `qerl config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub format: WeightFormat,
    pub lora_rank: usize,
    pub lora_alpha: f64,

    pub task: TaskKind,
    pub difficulty: u8,
    pub pretrain_min_steps: usize,
    pub pretrain_max_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    pub algo: Algo,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub inner_iters: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub advantage_eps: f64,
    pub temperature: f64,
    pub max_new: usize,
    pub grad_clip: f64,

    pub aqn: bool,
    pub stages: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub decay: DecayKind,
    pub noise_per_rollout: bool,

    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_reward: Option<f64>,
    pub early_stop_window: usize,
    pub checkpoint_every: usize,
    pub wall_clock: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let p = PretrainConfig::default();
        RunConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim,
            max_seq: m.max_seq,
            format: WeightFormat::Quant(FormatKind::Nvfp4),
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            task: t.task,
            difficulty: t.difficulty,
            pretrain_min_steps: 300,
            pretrain_max_steps: p.max_steps,
            pretrain_lr: p.lr,
            pretrain_batch: p.batch,
            algo: t.algo,
            clip_low: t.clip_low,
            clip_high: t.clip_high,
            kl_beta: t.kl_beta,
            group_size: t.group_size,
            batch_prompts: t.batch_prompts,
            inner_iters: t.inner_iters,
            total_steps: t.total_steps,
            lr: t.lr,
            advantage_eps: t.advantage_eps,
            temperature: t.temperature,
            max_new: t.max_new,
            grad_clip: t.grad_clip,
            aqn: t.aqn,
            stages: t.stages,
            sigma_start: t.sigma_start,
            sigma_end: t.sigma_end,
            decay: t.decay,
            noise_per_rollout: t.noise_per_rollout,
            seed: 0,
            early_stop_reward: None,
            early_stop_window: t.early_stop_window,
            checkpoint_every: 100,
            wall_clock: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// One-line description of every key, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("d_model", "model width"),
    ("n_layers", "decoder blocks"),
    ("n_heads", "attention heads; must divide d_model"),
    ("ffn_dim", "SwiGLU hidden width"),
    ("max_seq", "longest prompt + completion in tokens"),
    ("format", "base weights: dense (alias bf16), int4, fp4, nvfp4, mxfp4, nf4"),
    ("lora_rank", "adapter rank, at most min(d_model, ffn_dim)/2"),
    ("lora_alpha", "adapter scale numerator (scale = alpha / rank)"),
    ("task", "mod_arith, chain_sum or compare"),
    ("difficulty", "1..=5"),
    ("pretrain_min_steps", "supervised steps before the format check may stop pretraining"),
    ("pretrain_max_steps", "give up pretraining after this many steps"),
    ("pretrain_lr", "AdamW step size for pretraining"),
    ("pretrain_batch", "sequences per pretraining step"),
    ("algo", "grpo (sequence mean) or dapo (token mean, forces kl_beta = 0)"),
    ("clip_low", "lower ratio clip epsilon"),
    ("clip_high", "upper ratio clip epsilon"),
    ("kl_beta", "KL penalty weight against the initial adapters"),
    ("group_size", "completions per prompt"),
    ("batch_prompts", "prompts per step"),
    ("inner_iters", "optimizer updates per rollout batch"),
    ("total_steps", "RL steps"),
    ("lr", "AdamW step size for the adapters"),
    ("advantage_eps", "reward std at or below this gives zero advantages"),
    ("temperature", "sampling temperature"),
    ("max_new", "longest completion"),
    ("grad_clip", "global gradient norm clip; 0 disables"),
    ("aqn", "adaptive quantization noise on RMSNorm weights"),
    ("stages", "noise stages including the noise-free stage 0"),
    ("sigma_start", "noise std in stage 1"),
    ("sigma_end", "noise std in the last stage"),
    ("decay", "exponential, linear, cosine or logarithmic"),
    ("noise_per_rollout", "redraw noise for every prompt group instead of once per step"),
    ("seed", "drives init, pretraining, sampling and noise"),
    ("early_stop_reward", "stop once the rolling mean reward reaches this (unset: never)"),
    ("early_stop_window", "steps in the rolling reward mean"),
    ("checkpoint_every", "adapter checkpoint cadence in steps; 0 keeps only the final one"),
    ("wall_clock", "record real step time in metrics (breaks byte reproducibility)"),
    ("out_dir", "run directory"),
];

fn key_err(key: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("key `{key}`: {msg}"))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order and
    /// validates the result.
    pub fn resolve(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        for (k, v) in &table {
            if v.is_table() {
                return Err(key_err(k, "nested tables are not allowed; the config is flat"));
            }
        }
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table = toml::from_str::<toml::Table>(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq", self.max_seq),
            ("pretrain_max_steps", self.pretrain_max_steps),
            ("pretrain_batch", self.pretrain_batch),
            ("batch_prompts", self.batch_prompts),
            ("inner_iters", self.inner_iters),
            ("total_steps", self.total_steps),
            ("max_new", self.max_new),
            ("stages", self.stages),
            ("early_stop_window", self.early_stop_window),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(key_err(k, "must be >= 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(key_err("n_heads", format!("{} does not divide d_model = {}", self.n_heads, self.d_model)));
        }
        let limit = self.d_model.min(self.ffn_dim) / 2;
        if self.lora_rank == 0 || self.lora_rank > limit {
            return Err(key_err(
                "lora_rank",
                format!("{} is outside 1..={limit} (min(d_model, ffn_dim)/2)", self.lora_rank),
            ));
        }
        for (k, v) in [("lora_alpha", self.lora_alpha), ("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(key_err(k, format!("must be positive and finite, got {v}")));
            }
        }
        if !(1..=5).contains(&self.difficulty) {
            return Err(key_err("difficulty", format!("must be in 1..=5, got {}", self.difficulty)));
        }
        if self.group_size < 2 {
            return Err(key_err("group_size", format!("must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip_low > 0.0 && self.clip_low < 1.0) {
            return Err(key_err("clip_low", format!("must be in (0, 1), got {}", self.clip_low)));
        }
        if !(self.clip_high >= self.clip_low && self.clip_high < 1.0) {
            return Err(key_err("clip_high", format!("must be in [clip_low, 1), got {}", self.clip_high)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(key_err("kl_beta", format!("must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(key_err("grad_clip", format!("must be >= 0, got {}", self.grad_clip)));
        }
        if !(self.advantage_eps >= 0.0) {
            return Err(key_err("advantage_eps", format!("must be >= 0, got {}", self.advantage_eps)));
        }
        if self.aqn {
            if self.stages < 3 {
                return Err(key_err("stages", format!("{} leaves fewer than 2 noisy stages; use >= 3 or aqn = false", self.stages)));
            }
            if !(self.sigma_start > 0.0 && self.sigma_start.is_finite()) {
                return Err(key_err("sigma_start", format!("must be positive, got {}", self.sigma_start)));
            }
            if !(self.sigma_end > 0.0 && self.sigma_end <= self.sigma_start) {
                return Err(key_err("sigma_end", format!("must be in (0, sigma_start], got {}", self.sigma_end)));
            }
        }
        if let Some(r) = self.early_stop_reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(key_err("early_stop_reward", format!("must be in [0, 1], got {r}")));
            }
        }
        if self.max_seq < 48 {
            return Err(key_err("max_seq", format!("{} is too short for the task prompts; use >= 48", self.max_seq)));
        }
        // backstops: anything the checks above missed
        self.model_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: VOCAB_SIZE,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_seq: self.max_seq,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            norm_eps: ModelConfig::default().norm_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            algo: self.algo,
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_beta: self.kl_beta,
            group_size: self.group_size,
            batch_prompts: self.batch_prompts,
            inner_iters: self.inner_iters,
            total_steps: self.total_steps,
            lr: self.lr,
            advantage_eps: self.advantage_eps,
            temperature: self.temperature,
            max_new: self.max_new,
            grad_clip: self.grad_clip,
            stages: self.stages,
            aqn: self.aqn,
            sigma_start: self.sigma_start,
            sigma_end: self.sigma_end,
            decay: self.decay,
            noise_per_rollout: self.noise_per_rollout,
            task: self.task,
            difficulty: self.difficulty,
            seed: self.seed,
            early_stop_reward: self.early_stop_reward,
            early_stop_window: self.early_stop_window,
            wall_clock: self.wall_clock,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            kind: self.task,
            difficulty: self.difficulty,
            max_steps: self.pretrain_max_steps,
            min_steps: self.pretrain_min_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    /// The config as a commented key = value file that [`RunConfig::parse`]
    /// reads back to an equal value.
    pub fn to_commented_toml(&self) -> String {
        let table = toml::Table::try_from(self).expect("flat config serializes");
        let mut out = String::new();
        for (key, doc) in KEY_DOCS {
            out.push_str(&format!("# {doc}\n"));
            match table.get(*key) {
                Some(v) => out.push_str(&format!("{key} = {v}\n")),
                None => out.push_str(&format!("# {key} =\n")),
            }
        }
        out
    }
}

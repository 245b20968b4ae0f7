use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::config::{RunConfig, WeightFormat};
use super::{write_file, CliError};
use crate::aqn::DecayKind;
use crate::nn::{save_model, PolicyModel};
use crate::rl::{train, RlError, METRICS_SCHEMA};
use crate::tasks::{pretrain_supervised, PretrainReport};

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Fresh model pretrained on the configured task, full precision.
pub fn pretrain_base(cfg: &RunConfig) -> Result<(PolicyModel, PretrainReport), CliError> {
    let mut model = PolicyModel::new(cfg.model_config(), &mut rng(cfg.seed, 5))?;
    let report = pretrain_supervised(&mut model, &cfg.pretrain_config())?;
    log::info!(
        "pretrained {} steps: format {:.2}, answer {:.2}",
        report.steps,
        report.format_acc,
        report.answer_acc
    );
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics_schema: u32,
    pub format: String,
    pub lora_rank: usize,
    pub decay: DecayKind,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_format_acc: f64,
    pub pretrain_answer_acc: f64,
    pub steps_run: usize,
    pub final_reward_mean: f64,
    pub peak_reward: f64,
    pub steps_to_threshold: Option<usize>,
    pub early_stopped: bool,
}

/// Executes one run into `cfg.out_dir`: `config.resolved`, `metrics.jsonl`,
/// `checkpoints/` and `summary.json` (plus `nan_batch.json` if the loss goes
/// non-finite). `base` skips pretraining when the caller already has one.
pub fn run_training(
    cfg: &RunConfig,
    base: Option<(PolicyModel, PretrainReport)>,
) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    if dir.join("metrics.jsonl").exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pick another out_dir",
            dir.display()
        )));
    }
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    write_file(&dir.join("config.resolved"), cfg.to_commented_toml())?;

    let (mut model, report) = match base {
        Some(b) => b,
        None => pretrain_base(cfg)?,
    };
    save_model(&model, &ckpt.join("pretrained.qckpt"))?;
    if let WeightFormat::Quant(kind) = cfg.format {
        model.quantize_bases(kind)?;
    }
    model.reset_adapters(cfg.lora_rank, cfg.lora_alpha, &mut rng(cfg.seed, 6))?;

    let metrics_path = dir.join("metrics.jsonl");
    let file = std::fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    let tc = cfg.train_config();
    let result = train(&tc, &mut model, &mut |m, model| {
        let line = serde_json::to_string(m).map_err(|e| RlError::Observer(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| RlError::Observer(format!("{}: {e}", metrics_path.display())))?;
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save_model(model, &ckpt.join(format!("step_{:06}.qckpt", m.step)))?;
        }
        if m.step % 50 == 0 {
            log::info!("step {} reward {:.3} sigma {:.2e}", m.step, m.reward_mean, m.sigma);
        }
        Ok(())
    });
    metrics.flush().map_err(|e| CliError::io(dir.join("metrics.jsonl"), e))?;
    let summary = match result {
        Ok(s) => s,
        Err(RlError::NonFiniteLoss { step, dump }) => {
            write_file(&dir.join("nan_batch.json"), &dump)?;
            return Err(CliError::Train(RlError::NonFiniteLoss { step, dump: String::new() }));
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&model, &ckpt.join("final.qckpt"))?;
    let out = RunSummary {
        metrics_schema: METRICS_SCHEMA,
        format: cfg.format.to_string(),
        lora_rank: cfg.lora_rank,
        decay: cfg.decay,
        seed: cfg.seed,
        pretrain_steps: report.steps,
        pretrain_format_acc: report.format_acc,
        pretrain_answer_acc: report.answer_acc,
        steps_run: summary.steps_run,
        final_reward_mean: summary.final_reward_mean,
        peak_reward: summary.peak_reward,
        steps_to_threshold: summary.steps_to_threshold,
        early_stopped: summary.early_stopped,
    };
    let json = serde_json::to_string_pretty(&out).expect("summary serializes");
    write_file(&dir.join("summary.json"), json + "\n")?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Schedule,
    Rank,
    Format,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Schedule => "schedule",
            AblationAxis::Rank => "rank",
            AblationAxis::Format => "format",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "schedule" => Ok(AblationAxis::Schedule),
            "rank" => Ok(AblationAxis::Rank),
            "format" => Ok(AblationAxis::Format),
            _ => Err(CliError::Usage(format!("unknown axis `{s}` (schedule, rank, format)"))),
        }
    }
}

impl AblationAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Schedule => &["exponential", "linear", "cosine", "logarithmic"],
            AblationAxis::Rank => &["16", "32", "64", "128"],
            AblationAxis::Format => &["dense", "nvfp4", "mxfp4", "nf4"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    fn key(self) -> &'static str {
        match self {
            AblationAxis::Schedule => "decay",
            AblationAxis::Rank => "lora_rank",
            AblationAxis::Format => "format",
        }
    }
}

/// Expands `base` along `axis`, one validated config per value, each writing
/// to `<out_dir>/<axis>_<value>`. Fails before anything runs if any variant
/// is invalid.
pub fn ablation_variants(
    base: &RunConfig,
    axis: AblationAxis,
    values: &[String],
) -> Result<Vec<(String, RunConfig)>, CliError> {
    let mut out = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        let bad = |e: String| CliError::Config(format!("ablation variant {axis}={v}: {e}"));
        match axis {
            AblationAxis::Schedule => c.decay = v.parse::<DecayKind>().map_err(|e| bad(e.to_string()))?,
            AblationAxis::Rank => {
                c.lora_rank = v.parse().map_err(|_| bad(format!("key `{}`: `{v}` is not an integer", axis.key())))?
            }
            AblationAxis::Format => c.format = v.parse::<WeightFormat>().map_err(bad)?,
        }
        c.out_dir = base.out_dir.join(format!("{axis}_{v}"));
        c.validate().map_err(|e| bad(e.to_string()))?;
        out.push((v.clone(), c));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_reward_mean: f64,
    pub peak_reward: f64,
    pub steps_to_threshold: Option<usize>,
    pub steps_run: usize,
}

/// Runs every variant with the same seed and one shared pretrained base, then
/// writes `ablation.tsv` next to the run directories.
pub fn ablate(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>, CliError> {
    let variants = ablation_variants(base, axis, values)?;
    std::fs::create_dir_all(&base.out_dir).map_err(|e| CliError::io(&base.out_dir, e))?;
    write_file(&base.out_dir.join("config.resolved"), base.to_commented_toml())?;
    let shared = pretrain_base(base)?;
    let mut rows = Vec::new();
    for (v, c) in variants {
        log::info!("ablation {axis}={v}");
        let s = run_training(&c, Some(shared.clone()))?;
        rows.push(AblationRow {
            variant: format!("{axis}={v}"),
            final_reward_mean: s.final_reward_mean,
            peak_reward: s.peak_reward,
            steps_to_threshold: s.steps_to_threshold,
            steps_run: s.steps_run,
        });
    }
    write_file(&base.out_dir.join("ablation.tsv"), ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tfinal_reward_mean\tpeak_reward\tsteps_to_threshold\tsteps_run\n");
    for r in rows {
        let t = r.steps_to_threshold.map_or("-".to_string(), |n| n.to_string());
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\n",
            r.variant, r.final_reward_mean, r.peak_reward, t, r.steps_run
        ));
    }
    s
}

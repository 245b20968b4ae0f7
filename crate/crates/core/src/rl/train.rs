use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::config::{Algo, TrainConfig};
use super::loss::{dapo_loss, grpo_loss, LossOutput, RolloutGroup};
use super::optim::{clip_grad_norm, AdamW};
use super::reward::{compute_reward, group_advantages};
use super::rollout::pack;
use super::RlError;
use crate::aqn::{apply_stage_noise, StageState};
use crate::nn::{ParamGroup, PolicyModel, SamplingParams};
use crate::tasks::{generate_task, SymbolTable, Tok};

/// Version of the per-step metrics record layout.
pub const METRICS_SCHEMA: u32 = 1;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: usize,
    pub sigma: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub entropy: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub ratio_mean: f64,
    pub degenerate_groups: usize,
    pub wall_ms: u64,
    /// Noise vectors drawn at this step's sync.
    pub noise_vectors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    /// Mean reward over the last `early_stop_window` steps.
    pub final_reward_mean: f64,
    /// Best rolling mean reward.
    pub peak_reward: f64,
    /// First step whose rolling mean reached the early-stop threshold (or 0.8).
    pub steps_to_threshold: Option<usize>,
    pub early_stopped: bool,
    pub reward_curve: Vec<f64>,
}

/// Non-finite loss: the offending batch, for replay.
#[derive(Debug, Serialize)]
pub struct NanDump<'a> {
    pub step: usize,
    pub inner_iter: usize,
    pub groups: &'a [RolloutGroup],
}

fn rolling(curve: &[f64], window: usize) -> f64 {
    let n = curve.len().min(window);
    curve[curve.len() - n..].iter().sum::<f64>() / n as f64
}

/// Runs the staged training loop. `observer` sees every step's metrics together with the
/// current model and may fail the run (e.g. on I/O errors).
pub fn train(
    cfg: &TrainConfig,
    model: &mut PolicyModel,
    observer: &mut dyn FnMut(&StepMetrics, &PolicyModel) -> Result<(), RlError>,
) -> Result<TrainSummary, RlError> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let table = SymbolTable::new();
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let mut task_rng = stream(1);
    let mut sample_rng = stream(2);
    let mut stage = StageState::new(cfg.total_steps, cfg.stages, stream(3));
    let reference = (cfg.algo == Algo::Grpo && cfg.kl_beta > 0.0).then(|| {
        let mut r = model.clone();
        r.clear_noise();
        r
    });
    let mut opt = AdamW::new(cfg.lr);
    let loss_cfg = cfg.loss_config();
    let params = SamplingParams {
        temperature: cfg.temperature,
        max_new: cfg.max_new,
        stop_token: Some(Tok::Eos.id()),
    };
    let threshold = cfg.early_stop_reward.unwrap_or(0.8);
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut steps_to_threshold = None;
    let mut peak = f64::NEG_INFINITY;
    let mut early_stopped = false;
    for step in 1..=cfg.total_steps {
        let t0 = Instant::now();
        // sync the old policy: set this stage's noise level
        let k = stage.stage_at(step);
        let drawn_before = stage.vectors_drawn;
        let sigma = apply_stage_noise(model, sched.as_ref(), k, &mut stage)?;

        // rollout
        let tasks = (0..cfg.batch_prompts)
            .map(|_| generate_task(cfg.task, cfg.difficulty, task_rng.gen()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut groups = Vec::with_capacity(tasks.len());
        let mut sampled_lp = Vec::with_capacity(tasks.len());
        if cfg.noise_per_rollout {
            for (gi, t) in tasks.iter().enumerate() {
                if gi > 0 {
                    apply_stage_noise(model, sched.as_ref(), k, &mut stage)?;
                }
                let prompts = vec![t.prompt.clone(); cfg.group_size];
                sampled_lp.push(model.sample_batch(&prompts, params, &mut sample_rng)?);
            }
        } else {
            let prompts: Vec<Vec<u32>> = tasks
                .iter()
                .flat_map(|t| std::iter::repeat(t.prompt.clone()).take(cfg.group_size))
                .collect();
            let mut all = model.sample_batch(&prompts, params, &mut sample_rng)?;
            for _ in &tasks {
                sampled_lp.push(all.drain(..cfg.group_size).collect());
            }
        }
        for (t, comps) in tasks.iter().zip(sampled_lp) {
            let rewards: Vec<f64> =
                comps.iter().map(|c| compute_reward(&c.tokens, &t.target, &table)).collect();
            let advantages = group_advantages(&rewards, cfg.advantage_eps);
            groups.push(RolloutGroup {
                prompt: t.prompt.clone(),
                target: t.target.clone(),
                old_logprobs: comps.iter().map(|c| c.logprobs.clone()).collect(),
                completions: comps.into_iter().map(|c| c.tokens).collect(),
                ref_logprobs: None,
                rewards,
                advantages,
            });
        }
        let packed = pack(&groups);
        if let Some(r) = &reference {
            let logits = r.forward(&packed.batch)?;
            let (lp, _) = packed.logprobs(&groups, &logits, cfg.temperature);
            for (g, l) in groups.iter_mut().zip(lp) {
                g.ref_logprobs = Some(l);
            }
        }

        // μ inner updates
        let mut first: Option<LossOutput> = None;
        let mut entropy = 0.0;
        let mut clip_sum = 0.0;
        for it in 0..cfg.inner_iters {
            let (logits, cache) = model.forward_train(&packed.batch)?;
            let (new_lp, ent) = packed.logprobs(&groups, &logits, cfg.temperature);
            if it == 0 {
                entropy = ent.iter().sum::<f64>() / ent.len().max(1) as f64;
                if !cfg.noise_per_rollout {
                    // the first forward runs the synced old policy itself
                    for (g, l) in groups.iter_mut().zip(&new_lp) {
                        g.old_logprobs = l.clone();
                    }
                }
            }
            let out = match cfg.algo {
                Algo::Grpo => grpo_loss(&groups, &new_lp, &loss_cfg)?,
                Algo::Dapo => dapo_loss(&groups, &new_lp, &loss_cfg)?,
            };
            if !out.loss.is_finite() {
                let dump = serde_json::to_string(&NanDump {
                    step,
                    inner_iter: it,
                    groups: &groups,
                })
                .unwrap_or_default();
                return Err(RlError::NonFiniteLoss { step, dump });
            }
            clip_sum += out.diagnostics.clip_fraction;
            let dl = packed.dlogits(&logits, &out.grad, cfg.temperature);
            let grads = model.backward(&packed.batch, &cache, dl.view(), ParamGroup::Adapters);
            let mut g: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            clip_grad_norm(&mut g, cfg.grad_clip);
            let g_refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            opt.step(&mut model.params_mut(ParamGroup::Adapters)?, &g_refs)?;
            if first.is_none() {
                first = Some(out);
            }
        }
        let first = first.expect("at least one inner iteration");
        let all_r: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let n = all_r.len() as f64;
        let reward_mean = all_r.iter().sum::<f64>() / n;
        let reward_std = (all_r.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>() / n).sqrt();
        curve.push(reward_mean);
        let roll = rolling(&curve, cfg.early_stop_window);
        peak = peak.max(roll);
        if steps_to_threshold.is_none() && curve.len() >= cfg.early_stop_window.min(cfg.total_steps) && roll >= threshold {
            steps_to_threshold = Some(step);
        }
        let m = StepMetrics {
            step,
            stage: k,
            sigma,
            reward_mean,
            reward_std,
            entropy,
            loss: first.loss,
            clip_fraction: clip_sum / cfg.inner_iters as f64,
            ratio_mean: first.diagnostics.ratio_mean,
            degenerate_groups: first.diagnostics.degenerate_groups,
            wall_ms: if cfg.wall_clock { t0.elapsed().as_millis() as u64 } else { 0 },
            noise_vectors: stage.vectors_drawn - drawn_before,
        };
        log::debug!("step {step} stage {k} sigma {sigma:.2e} reward {reward_mean:.3}");
        observer(&m, model)?;
        if cfg.early_stop_reward.is_some() && steps_to_threshold.is_some() {
            early_stopped = step < cfg.total_steps;
            break;
        }
    }
    model.clear_noise();
    Ok(TrainSummary {
        steps_run: curve.len(),
        final_reward_mean: rolling(&curve, cfg.early_stop_window),
        peak_reward: peak,
        steps_to_threshold,
        early_stopped,
        reward_curve: curve,
    })
}

/// Entropy of sampled rollouts: mean entropy at each generated position and
/// the mean of per-sequence entropies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyTrace {
    pub per_position: Vec<f64>,
    pub mean: f64,
    pub completions: Vec<Vec<u32>>,
}

/// Samples `n_samples` completions per prompt at `temperature` and records
/// the untempered entropy of the policy along each sampled trajectory.
pub fn eval_entropy_trace(
    model: &PolicyModel,
    prompts: &[Vec<u32>],
    n_samples: usize,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<EntropyTrace, RlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SamplingParams {
        temperature,
        max_new,
        stop_token: Some(Tok::Eos.id()),
    };
    let all: Vec<Vec<u32>> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat(p.clone()).take(n_samples))
        .collect();
    let comps = model.sample_batch(&all, params, &mut rng)?;
    let completions: Vec<Vec<u32>> = comps.into_iter().map(|c| c.tokens).collect();
    let (per_position, mean) = rollout_entropy(model, &all, &completions)?;
    Ok(EntropyTrace {
        per_position,
        mean,
        completions,
    })
}

/// Offline entropy of given rollouts under `model`.
pub fn rollout_entropy(
    model: &PolicyModel,
    prompts: &[Vec<u32>],
    completions: &[Vec<u32>],
) -> Result<(Vec<f64>, f64), RlError> {
    let groups: Vec<RolloutGroup> = prompts
        .iter()
        .zip(completions)
        .map(|(p, c)| RolloutGroup {
            prompt: p.clone(),
            target: String::new(),
            completions: vec![c.clone()],
            old_logprobs: vec![vec![0.0; c.len()]],
            ref_logprobs: None,
            rewards: vec![0.0],
            advantages: vec![0.0],
        })
        .collect();
    let packed = pack(&groups);
    let logits = model.forward(&packed.batch)?;
    let (_, seq_ent) = packed.logprobs(&groups, &logits, 1.0);
    let mut sums = Vec::new();
    let mut counts = Vec::new();
    for (s, &(_, _, p)) in packed.index.iter().enumerate() {
        let r = packed.batch.range(s);
        let rows = r.start + p - 1..r.end - 1;
        let ent = crate::nn::token_entropies(logits.slice(ndarray::s![rows, ..]));
        for (t, &h) in ent.iter().enumerate() {
            if sums.len() <= t {
                sums.push(0.0);
                counts.push(0usize);
            }
            sums[t] += h;
            counts[t] += 1;
        }
    }
    let per_position = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mean = seq_ent.iter().sum::<f64>() / seq_ent.len().max(1) as f64;
    Ok((per_position, mean))
}

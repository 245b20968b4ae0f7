use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{generate_task, parse_answer, SymbolTable, TaskError, TaskInstance, TaskKind, Tok};
use crate::nn::{log_softmax, ParamGroup, PolicyModel, SamplingParams, SeqBatch};
use crate::rl::{clip_grad_norm, AdamW};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub kind: TaskKind,
    pub difficulty: u8,
    pub max_steps: usize,
    /// Keep training at least this long even once the format target is met.
    pub min_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    pub target_format_acc: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            kind: TaskKind::ModArith,
            difficulty: 2,
            max_steps: 2000,
            min_steps: 0,
            batch: 16,
            lr: 3e-3,
            eval_every: 25,
            eval_size: 64,
            target_format_acc: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub format_acc: f64,
    pub answer_acc: f64,
    /// Held-out cross-entropy (nats per completion token) at each evaluation.
    pub eval_ce: Vec<f64>,
}

/// Greedy completions on `tasks`: fraction with a parseable answer, and
/// fraction whose answer is correct.
pub fn evaluate_format(model: &PolicyModel, tasks: &[TaskInstance]) -> Result<(f64, f64), TaskError> {
    let table = SymbolTable::new();
    let prompts: Vec<Vec<u32>> = tasks.iter().map(|t| t.prompt.clone()).collect();
    let params = SamplingParams {
        temperature: 0.0,
        max_new: 48,
        stop_token: Some(Tok::Eos.id()),
    };
    let comps = model.sample_batch(&prompts, params, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut fmt = 0usize;
    let mut ok = 0usize;
    for (t, c) in tasks.iter().zip(&comps) {
        if let Some(a) = parse_answer(&table.decode(&c.tokens)) {
            fmt += 1;
            ok += (a == t.target) as usize;
        }
    }
    let n = tasks.len().max(1) as f64;
    Ok((fmt as f64 / n, ok as f64 / n))
}

/// Mean next-token cross-entropy over completion tokens, and its logit gradient.
fn completion_ce(logits: &Array2<f64>, batch: &SeqBatch, prompt_lens: &[usize]) -> (f64, Array2<f64>) {
    let mut d = Array2::zeros(logits.raw_dim());
    let total: usize = (0..batch.len()).map(|i| batch.range(i).len() - prompt_lens[i]).sum();
    let scale = 1.0 / total.max(1) as f64;
    let mut ce = 0.0;
    for (i, &p) in prompt_lens.iter().enumerate() {
        let r = batch.range(i);
        for pos in r.start + p..r.end {
            let row = pos - 1;
            let tok = batch.tokens[pos] as usize;
            let l = log_softmax(logits.row(row), 1.0);
            ce -= l[tok];
            let mut dr = d.row_mut(row);
            for (j, &lj) in l.iter().enumerate() {
                dr[j] += scale * lj.exp();
            }
            dr[tok] -= scale;
        }
    }
    (ce * scale, d)
}

fn batch_of(tasks: &[TaskInstance]) -> (SeqBatch, Vec<usize>) {
    let seqs: Vec<Vec<u32>> = tasks.iter().map(TaskInstance::full_sequence).collect();
    (SeqBatch::from_seqs(&seqs), tasks.iter().map(|t| t.prompt.len()).collect())
}

/// Supervised next-token training of the whole dense model on reference
/// completions. Stops at the first evaluation (after `min_steps`) whose greedy
/// format accuracy reaches the target.
pub fn pretrain_supervised(
    model: &mut PolicyModel,
    cfg: &PretrainConfig,
) -> Result<PretrainReport, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    held_rng.set_stream(1);
    let held: Vec<TaskInstance> = (0..cfg.eval_size)
        .map(|_| generate_task(cfg.kind, cfg.difficulty, held_rng.gen()))
        .collect::<Result<_, _>>()?;
    let (held_batch, held_lens) = batch_of(&held);
    let mut opt = AdamW::new(cfg.lr);
    let mut eval_ce = Vec::new();
    let mut best = 0.0f64;
    for step in 1..=cfg.max_steps {
        let tasks: Vec<TaskInstance> = (0..cfg.batch)
            .map(|_| generate_task(cfg.kind, cfg.difficulty, rng.gen()))
            .collect::<Result<_, _>>()?;
        let (batch, lens) = batch_of(&tasks);
        let (logits, cache) = model.forward_train(&batch)?;
        let (_, dl) = completion_ce(&logits, &batch, &lens);
        let grads = model.backward(&batch, &cache, dl.view(), ParamGroup::Base);
        let mut g: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        clip_grad_norm(&mut g, 1.0);
        let refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
        opt.step(&mut model.params_mut(ParamGroup::Base)?, &refs)
            .map_err(|e| TaskError::Optimizer(e.to_string()))?;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let logits = model.forward(&held_batch)?;
            eval_ce.push(completion_ce(&logits, &held_batch, &held_lens).0);
            let last = evaluate_format(model, &held)?;
            best = best.max(last.0);
            log::debug!("pretrain step {step}: ce {:.4} format {:.2} answer {:.2}", eval_ce.last().unwrap(), last.0, last.1);
            if step >= cfg.min_steps && last.0 >= cfg.target_format_acc {
                return Ok(PretrainReport {
                    steps: step,
                    format_acc: last.0,
                    answer_acc: last.1,
                    eval_ce,
                });
            }
        }
    }
    Err(TaskError::NonConvergence {
        steps: cfg.max_steps,
        target: cfg.target_format_acc * 100.0,
        best: best * 100.0,
    })
}

//! Acceptance checks, one PASS/FAIL line each. Run a subset by number:
//! `cargo test --test acceptance -- 1 4 11`.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qerl::aqn::{equivalent_weight_noise, merge_noise, sample_noise_vector, DecayKind, NoiseSchedule};
use qerl::nn::{ModelConfig, NoisyRmsNorm, ParamGroup, PolicyModel};
use qerl::quant::{e2m1, error_report, quantize, BlockScales, FormatKind};
use qerl::rl::{
    dapo_loss, eval_entropy_trace, grpo_loss, group_advantages, loss_and_adapter_grad, pack, train,
    LossConfig, LossGranularity, RolloutGroup, TrainConfig,
};
use qerl::tasks::{generate_task, pretrain_supervised, PretrainConfig, TaskKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
}

fn c1_codecs() -> Outcome {
    let mut bad = Vec::new();
    for code in 0u8..16 {
        if e2m1::encode(e2m1::decode(code)) != code {
            bad.push(format!("e2m1 code {code}"));
        }
    }
    let mut r = rng(1);
    let mut mx_scales = 0usize;
    for i in 0..50 {
        let w = normal_matrix(256, 256, &mut r) * r.gen_range(0.01..100.0);
        for kind in FormatKind::ALL {
            let q = quantize(w.view(), kind).unwrap();
            let again = quantize(q.dequantize().view(), kind).unwrap();
            if q.to_bytes() != again.to_bytes() {
                bad.push(format!("{kind} matrix {i} not idempotent"));
            }
            if kind == FormatKind::Mxfp4 {
                let BlockScales::E8m0(bytes) = &q.block_scales else {
                    bad.push("mxfp4 scales not E8M0".into());
                    continue;
                };
                for b in 0..bytes.len() {
                    let s = q.block_scales.value(b);
                    mx_scales += 1;
                    if !(s > 0.0 && s.log2().fract() == 0.0 && s == 2f64.powi(s.log2() as i32)) {
                        bad.push(format!("mxfp4 scale {s} not a power of two"));
                    }
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "16/16 E2M1 codes biject; 50 matrices x {} formats idempotent; {mx_scales} MXFP4 scales checked; failures: {:?}",
            FormatKind::ALL.len(),
            &bad[..bad.len().min(3)]
        ),
    )
}

fn c2_format_ordering() -> Outcome {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let w = normal_matrix(1024, 1024, &mut rng(100 + seed));
        let nv = error_report(w.view(), FormatKind::Nvfp4).unwrap().mse;
        let mx = error_report(w.view(), FormatKind::Mxfp4).unwrap().mse;
        wins += (nv < mx) as usize;
        ratios.push(nv / mx);
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    outcome(wins >= 19, format!("MSE(NVFP4) < MSE(MXFP4) in {wins}/20; worst ratio {worst:.3}"))
}

fn c3_noise_merge() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut worst_elem = 0.0f64;
    for _ in 0..100 {
        let d = r.gen_range(8..=256);
        let out = r.gen_range(1..=64);
        let mut norm = NoisyRmsNorm::new(d, 1e-6);
        norm.weight = Array1::from_shape_simple_fn(d, || r.gen_range(0.2..2.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 });
        let w = normal_matrix(out, d, &mut r);
        let w_hat = quantize(w.view(), FormatKind::Nvfp4).unwrap().dequantize();
        let x = normal_matrix(r.gen_range(1..=8), d, &mut r);
        let z = sample_noise_vector(d, r.gen_range(1e-4..1e-1), &mut r);
        let plain = norm.clone();
        merge_noise(&mut norm, z).unwrap();
        let a = norm.forward(x.view()).unwrap().dot(&w_hat.t());
        let w_eq = equivalent_weight_noise(&norm, w_hat.view()).unwrap();
        let b = plain.forward(x.view()).unwrap().dot(&w_eq.t());
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(diff / scale);
        for (p, q) in a.iter().zip(b.iter()) {
            if q.abs() > 1e-3 * scale {
                worst_elem = worst_elem.max((p - q).abs() / q.abs());
            }
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |a-b|/max|b| = {worst:.2e}; worst elementwise (|b| > 1e-3 max) {worst_elem:.2e}"),
    )
}

fn c4_schedules() -> Outcome {
    let mut worst = 0.0f64;
    let mut monotone = true;
    for decay in DecayKind::ALL {
        for k_total in [2usize, 5, 10, 100] {
            let s = NoiseSchedule::new(1e-2, 5e-4, k_total, decay).unwrap();
            worst = worst.max((s.sigma_at_stage(1).unwrap() - 1e-2).abs());
            worst = worst.max((s.sigma_at_stage(k_total).unwrap() - 5e-4).abs());
            let v: Vec<f64> = (1..=k_total).map(|k| s.sigma_at_stage(k).unwrap()).collect();
            monotone &= v.windows(2).all(|p| p[1] <= p[0]);
        }
    }
    outcome(
        worst <= 1e-15 && monotone,
        format!("4 decays x K in {{2,5,10,100}}: worst endpoint error {worst:.1e}, monotone {monotone}"),
    )
}

fn c5_advantages() -> Outcome {
    let mut r = rng(5);
    let mut worst_mean = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut zero_ok = true;
    let (mut varied, mut flat) = (0, 0);
    for _ in 0..10_000 {
        let g = r.gen_range(2..=16);
        let rewards: Vec<f64> = match r.gen_range(0..3) {
            0 => (0..g).map(|_| r.gen_range(0..2) as f64).collect(),
            1 => (0..g).map(|_| r.gen_range(-5.0..5.0)).collect(),
            _ => vec![r.gen_range(-1.0..1.0); g],
        };
        let a = group_advantages(&rewards, 1e-6);
        if rewards.iter().all(|&x| x == rewards[0]) {
            flat += 1;
            zero_ok &= a.iter().all(|&v| v == 0.0);
            continue;
        }
        varied += 1;
        let am = a.iter().sum::<f64>() / g as f64;
        let sd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / g as f64).sqrt();
        worst_mean = worst_mean.max(am.abs());
        lo = lo.min(sd);
        hi = hi.max(sd);
    }
    // the std is itself recomputed in floating point, so a one-ulp excess over 1 is measurement error
    let pass = worst_mean < 1e-12 && lo >= 1.0 - 1e-6 && hi <= 1.0 + 4.0 * f64::EPSILON && zero_ok;
    outcome(
        pass,
        format!(
            "{varied} varied groups: max |mean| {worst_mean:.1e}, std in [{lo:.17}, {hi:.17}]; {flat} flat groups all zero: {zero_ok}"
        ),
    )
}

fn tiny_model(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        vocab: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_seq: 24,
        lora_rank: 4,
        lora_alpha: 8.0,
        norm_eps: 1e-6,
    };
    let mut r = rng(seed);
    let mut m = PolicyModel::new(cfg, &mut r).unwrap();
    m.quantize_bases(FormatKind::Nvfp4).unwrap();
    for b in &mut m.blocks {
        for l in b.linears_mut() {
            l.adapter.b.mapv_inplace(|_| r.gen_range(-0.2..0.2));
        }
    }
    m
}

fn perturbed(model: &PolicyModel, r: &mut ChaCha8Rng, size: f64) -> PolicyModel {
    let mut m = model.clone();
    for b in &mut m.blocks {
        for l in b.linears_mut() {
            l.adapter.b.mapv_inplace(|v| v + r.gen_range(-size..size));
        }
    }
    m
}

/// Two groups of four with random lengths, old log-probs from a nearby policy
/// (so some ratios clip) and reference log-probs from another.
fn fd_groups(model: &PolicyModel, seed: u64) -> Vec<RolloutGroup> {
    let mut r = rng(seed);
    let old = perturbed(model, &mut r, 0.05);
    let reference = perturbed(model, &mut r, 0.05);
    let mut groups: Vec<RolloutGroup> = (0..2)
        .map(|_| {
            let prompt: Vec<u32> = (0..r.gen_range(2..5)).map(|_| r.gen_range(0..16)).collect();
            let completions: Vec<Vec<u32>> =
                (0..4).map(|_| (0..r.gen_range(1..7)).map(|_| r.gen_range(0..16)).collect()).collect();
            let mut rewards: Vec<f64> = (0..4).map(|_| r.gen_range(0..2) as f64).collect();
            rewards[0] = 1.0 - rewards[1];
            RolloutGroup {
                prompt,
                target: String::new(),
                old_logprobs: Vec::new(),
                completions,
                ref_logprobs: None,
                advantages: group_advantages(&rewards, 1e-6),
                rewards,
            }
        })
        .collect();
    let packed = pack(&groups);
    let (old_lp, _) = packed.logprobs(&groups, &old.forward(&packed.batch).unwrap(), 1.0);
    let (ref_lp, _) = packed.logprobs(&groups, &reference.forward(&packed.batch).unwrap(), 1.0);
    for ((g, o), rf) in groups.iter_mut().zip(old_lp).zip(ref_lp) {
        g.old_logprobs = o;
        g.ref_logprobs = Some(rf);
    }
    groups
}

fn shift_adapter(model: &mut PolicyModel, idx: usize, delta: f64) {
    let mut off = idx;
    for s in model.params_mut(ParamGroup::Adapters).unwrap() {
        if off < s.len() {
            s[off] += delta;
            return;
        }
        off -= s.len();
    }
}

fn c6_gradients() -> Outcome {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let cases = [
        ("grpo", LossGranularity::SequenceMean, 0.0),
        ("grpo+kl", LossGranularity::SequenceMean, 0.05),
        ("dapo", LossGranularity::TokenMean, 0.0),
    ];
    let mut where_worst = String::new();
    for seed in 0..20 {
        let mut model = tiny_model(seed);
        let groups = fd_groups(&model, 1000 + seed);
        for (name, granularity, kl_beta) in cases {
            let cfg = LossConfig { clip_low: 0.2, clip_high: 0.28, kl_beta, granularity };
            let (_, g) = loss_and_adapter_grad(&model, &groups, &cfg, 1.0).unwrap();
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut fd = vec![0.0; g.len()];
            for (idx, slot) in fd.iter_mut().enumerate().step_by(3) {
                shift_adapter(&mut model, idx, h);
                let lp = loss_and_adapter_grad(&model, &groups, &cfg, 1.0).unwrap().0;
                shift_adapter(&mut model, idx, -2.0 * h);
                let lm = loss_and_adapter_grad(&model, &groups, &cfg, 1.0).unwrap().0;
                shift_adapter(&mut model, idx, h);
                *slot = (lp - lm) / (2.0 * h);
                let rel = (*slot - g[idx]).abs() / gmax;
                checked += 1;
                if rel > worst {
                    worst = rel;
                    where_worst = format!("seed {seed} {name} param {idx}");
                }
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{checked} coordinates over 20 seeds x {{grpo, grpo+kl, dapo}}: worst |fd-g|/max|g| = {worst:.2e} ({where_worst})"),
    )
}

fn small_rl_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: 50,
        batch_prompts: 4,
        group_size: 8,
        max_new: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn c7_on_policy() -> Outcome {
    let mut m = PolicyModel::new(ModelConfig::default(), &mut rng(7)).unwrap();
    m.quantize_bases(FormatKind::Nvfp4).unwrap();
    let mut r = rng(8);
    for b in &mut m.blocks {
        for l in b.linears_mut() {
            l.adapter.b.mapv_inplace(|_| r.gen_range(-0.05..0.05));
        }
    }
    let cfg = small_rl_config(7);
    let mut max_clip = 0.0f64;
    let mut max_dev = 0.0f64;
    let mut steps = 0;
    train(&cfg, &mut m, &mut |s, _| {
        steps += 1;
        max_clip = max_clip.max(s.clip_fraction);
        max_dev = max_dev.max((s.ratio_mean - 1.0).abs());
        Ok(())
    })
    .unwrap();
    outcome(
        steps == 50 && max_clip == 0.0,
        format!("{steps} steps with inner_iters = 1: max clip_fraction {max_clip}, max |ratio_mean - 1| {max_dev:.1e}"),
    )
}

fn c8_staging() -> Outcome {
    let sps = 3;
    let stages = 10;
    let cfg = TrainConfig { total_steps: 10 * sps, stages, ..small_rl_config(8) };
    let sched = cfg.schedule().unwrap().unwrap();
    let mut m = PolicyModel::new(ModelConfig::default(), &mut rng(9)).unwrap();
    m.quantize_bases(FormatKind::Nvfp4).unwrap();
    let l = m.config.n_layers as u64;
    let mut sigmas: Vec<(usize, f64)> = Vec::new();
    let mut counts_ok = true;
    let mut fresh_ok = true;
    let mut prev: Option<Vec<Array1<f64>>> = None;
    train(&cfg, &mut m, &mut |s, model| {
        sigmas.push((s.stage, s.sigma));
        let want = if s.stage == 0 { 0 } else { 2 * l };
        counts_ok &= s.noise_vectors == want;
        let noise: Vec<Array1<f64>> =
            model.blocks.iter().flat_map(|b| [b.attn_norm.noise.clone(), b.ffn_norm.noise.clone()]).collect();
        if s.stage > 0 {
            if let Some(p) = &prev {
                fresh_ok &= noise.iter().zip(p).all(|(a, b)| a != b);
            }
            fresh_ok &= noise.iter().all(|z| z.iter().any(|&v| v != 0.0));
        } else {
            fresh_ok &= noise.iter().all(|z| z.iter().all(|&v| v == 0.0));
        }
        prev = Some(noise);
        Ok(())
    })
    .unwrap();
    let mut stage_ok = true;
    for (i, &(k, sigma)) in sigmas.iter().enumerate() {
        let want_k = i / sps;
        let want_sigma = if want_k == 0 { 0.0 } else { sched.sigma_at_stage(want_k).unwrap() };
        stage_ok &= k == want_k && sigma == want_sigma;
    }
    let mut distinct: Vec<f64> = sigmas.iter().filter(|p| p.0 > 0).map(|p| p.1).collect();
    distinct.dedup();
    let pass = stage_ok && counts_ok && fresh_ok && sigmas.len() == 10 * sps && distinct.len() == stages - 1;
    outcome(
        pass,
        format!(
            "M = {} (steps_per_stage {sps}): stage/sigma sequence exact {stage_ok}, {} distinct noisy sigmas, 2L = {} vectors per noisy sync {counts_ok}, fresh draws {fresh_ok}",
            10 * sps,
            distinct.len(),
            2 * l
        ),
    )
}

fn c9_toy_rl() -> Outcome {
    let mut reached = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let mut m = PolicyModel::new(ModelConfig::default(), &mut rng(seed)).unwrap();
        let pre = PretrainConfig { min_steps: 300, seed, ..PretrainConfig::default() };
        let rep = pretrain_supervised(&mut m, &pre).unwrap();
        m.quantize_bases(FormatKind::Nvfp4).unwrap();
        m.reset_adapters(16, 32.0, &mut rng(10_000 + seed)).unwrap();
        let cfg = TrainConfig { seed, early_stop_reward: Some(0.8), ..TrainConfig::default() };
        let s = train(&cfg, &mut m, &mut |_, _| Ok(())).unwrap();
        reached += s.steps_to_threshold.is_some() as usize;
        per_seed.push(format!(
            "seed {seed}: base answer acc {:.2}, {} (peak {:.3})",
            rep.answer_acc,
            s.steps_to_threshold.map_or("not reached".into(), |n| format!("reached at step {n}")),
            s.peak_reward
        ));
    }
    outcome(reached >= 4, format!("{reached}/5 seeds reach rolling-10 mean reward 0.8 within 400 steps [{}]", per_seed.join("; ")))
}

fn c10_entropy() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let mut dense = PolicyModel::new(ModelConfig::default(), &mut rng(seed)).unwrap();
        pretrain_supervised(&mut dense, &PretrainConfig { seed, ..PretrainConfig::default() }).unwrap();
        let mut quant = dense.clone();
        quant.quantize_bases(FormatKind::Nvfp4).unwrap();
        let mut r = rng(seed + 1000);
        let prompts: Vec<Vec<u32>> =
            (0..32).map(|_| generate_task(TaskKind::ModArith, 2, r.gen()).unwrap().prompt).collect();
        let hd = eval_entropy_trace(&dense, &prompts, 4, 1.0, 32, seed).unwrap().mean;
        let hq = eval_entropy_trace(&quant, &prompts, 4, 1.0, 32, seed).unwrap().mean;
        wins += (hq >= hd) as usize;
        rows.push(format!("{seed}: nvfp4 {hq:.4} vs dense {hd:.4}"));
    }
    outcome(wins >= 7, format!("quantized entropy >= dense in {wins}/10 seeds [{}]", rows.join("; ")))
}

fn c11_equal_length() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..100 {
        let len = r.gen_range(1..12);
        let b = r.gen_range(1..5);
        let g = r.gen_range(2..9);
        let groups: Vec<RolloutGroup> = (0..b)
            .map(|_| {
                let rewards: Vec<f64> = (0..g).map(|_| r.gen_range(0.0..1.0)).collect();
                RolloutGroup {
                    prompt: vec![1],
                    target: String::new(),
                    completions: vec![vec![3; len]; g],
                    old_logprobs: (0..g).map(|_| (0..len).map(|_| r.gen_range(-4.0..-0.01)).collect()).collect(),
                    ref_logprobs: None,
                    advantages: group_advantages(&rewards, 1e-6),
                    rewards,
                }
            })
            .collect();
        let new: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|gr| gr.old_logprobs.iter().map(|s| s.iter().map(|v| v + r.gen_range(-0.4..0.4)).collect()).collect())
            .collect();
        let clip_low = r.gen_range(0.05..0.3);
        let cfg = LossConfig { clip_low, clip_high: clip_low + r.gen_range(0.0..0.2), kl_beta: 0.0, granularity: LossGranularity::SequenceMean };
        let a = grpo_loss(&groups, &new, &cfg).unwrap();
        let d = dapo_loss(&groups, &new, &cfg).unwrap();
        worst = worst.max((a.loss - d.loss).abs());
        for (x, y) in a.grad.iter().flatten().flatten().zip(d.grad.iter().flatten().flatten()) {
            worst_grad = worst_grad.max((x - y).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("100 uniform-length batches: max |grpo - dapo| = {worst:.1e} (log-prob gradients {worst_grad:.1e})"),
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(usize, &str, Duration, Check); 11] = [
        (1, "codec correctness", Duration::from_secs(10), c1_codecs),
        (2, "format ordering", Duration::from_secs(60), c2_format_ordering),
        (3, "noise-merge equivalence", Duration::from_secs(10), c3_noise_merge),
        (4, "schedule exactness", Duration::from_secs(1), c4_schedules),
        (5, "advantage contract", Duration::from_secs(5), c5_advantages),
        (6, "gradient fidelity", Duration::from_secs(120), c6_gradients),
        (7, "on-policy identity", Duration::from_secs(120), c7_on_policy),
        (8, "noise staging", Duration::from_secs(120), c8_staging),
        (9, "toy RL learning", Duration::from_secs(20 * 60), c9_toy_rl),
        (10, "entropy direction", Duration::from_secs(5 * 60), c10_entropy),
        (11, "equal-length equivalence", Duration::from_secs(5), c11_equal_length),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, budget, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = check();
        let took = t.elapsed();
        let in_time = took <= budget;
        let pass = o.pass && in_time;
        failed += !pass as usize;
        println!(
            "{} [{n:>2}] {name}: {} ({:.1} s of {} s{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

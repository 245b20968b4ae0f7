use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use qerl::cli::RunConfig;
use qerl::nn::{write_archive, ArrayEntry};
use qerl::rl::StepMetrics;
use qerl::tasks::{import_jsonl, SymbolTable};
use rand::{Rng, SeedableRng};

const SMALL: &str = "total_steps = 20\ngroup_size = 4\nbatch_prompts = 2\npretrain_min_steps = 0\ncheckpoint_every = 10\n";

fn qerl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qerl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Exit code and the single stderr line, which must be `error[code]: …`.
fn err(o: &Output) -> (i32, String) {
    assert!(!o.status.success());
    let e = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(e.lines().count(), 1, "{e}");
    assert!(e.starts_with("error["), "{e}");
    (o.status.code().unwrap(), e)
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (d, cfg)
}

fn metrics(dir: &Path) -> Vec<StepMetrics> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_is_reproducible_and_echoes_its_config() {
    let (d, _) = workspace();
    let p = d.path();
    ok(&qerl(p, &["train", "--config", "small.toml", "--out", "a"]));
    ok(&qerl(p, &["train", "--config", "small.toml", "--out", "b"]));
    let ma = std::fs::read(p.join("a/metrics.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(p.join("b/metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 20);
    for f in ["config.resolved", "summary.json", "checkpoints/pretrained.qckpt", "checkpoints/step_000010.qckpt", "checkpoints/final.qckpt"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }
    // the echoed config re-parses to the config that ran
    let echoed = std::fs::read_to_string(p.join("a/config.resolved")).unwrap();
    let expected = RunConfig::resolve(Some(&p.join("small.toml")), &[format!("out_dir=\"a\"")]).unwrap();
    assert_eq!(RunConfig::parse(&echoed).unwrap(), expected);
    // and drives an identical rerun
    ok(&qerl(p, &["train", "--config", "a/config.resolved", "--out", "c"]));
    assert_eq!(std::fs::read(p.join("a/metrics.jsonl")).unwrap(), std::fs::read(p.join("c/metrics.jsonl")).unwrap());
    // a finished run directory is not overwritten
    let (code, e) = err(&qerl(p, &["train", "--config", "small.toml", "--out", "a"]));
    assert_eq!(code, 2);
    assert!(e.starts_with("error[usage]"), "{e}");
}

#[test]
fn sigma_hits_both_endpoints() {
    let (d, _) = workspace();
    let p = d.path();
    ok(&qerl(
        p,
        &["train", "--config", "small.toml", "--stages", "10", "--sigma-start", "1e-2", "--sigma-end", "5e-4", "--out", "s"],
    ));
    let m = metrics(&p.join("s"));
    assert!(m.iter().filter(|r| r.stage == 0).all(|r| r.sigma == 0.0));
    assert_eq!(m.iter().find(|r| r.stage == 1).unwrap().sigma, 1e-2);
    assert_eq!(m.last().unwrap().stage, 9);
    assert_eq!(m.last().unwrap().sigma, 5e-4);
}

#[test]
fn grpo_and_dapo_agree_on_equal_length_completions() {
    // max_new = 1 forces every completion to one token
    let (d, _) = workspace();
    let p = d.path();
    for algo in ["grpo", "dapo"] {
        ok(&qerl(p, &["train", "--config", "small.toml", "--algo", algo, "--set", "max_new=1", "--out", algo]));
    }
    let (g, a) = (metrics(&p.join("grpo")), metrics(&p.join("dapo")));
    assert_eq!(g.len(), a.len());
    for (x, y) in g.iter().zip(&a) {
        assert_eq!(x.reward_mean, y.reward_mean);
        assert!((x.loss - y.loss).abs() <= 1e-12, "step {}: {} vs {}", x.step, x.loss, y.loss);
    }
}

#[test]
fn config_errors_are_key_level() {
    let (d, _) = workspace();
    let p = d.path();
    std::fs::write(p.join("bad.toml"), "learning_rate = 0.1\n").unwrap();
    let (code, e) = err(&qerl(p, &["train", "--config", "bad.toml"]));
    assert_eq!(code, 2);
    assert!(e.starts_with("error[config]:") && e.contains("learning_rate"), "{e}");
    let (_, e) = err(&qerl(p, &["train", "--set", "clip_high=0.1"]));
    assert!(e.contains("key `clip_high`"), "{e}");
    let (_, e) = err(&qerl(p, &["train", "--format", "fp8"]));
    assert!(e.contains("fp8"), "{e}");
    let (code, e) = err(&qerl(p, &["train", "--config", "missing.toml"]));
    assert_eq!(code, 3);
    assert!(e.starts_with("error[io]:"), "{e}");
}

#[test]
fn config_subcommand_prints_documented_defaults() {
    let (d, _) = workspace();
    let text = ok(&qerl(d.path(), &["config"]));
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    assert!(text.contains("# adapter rank"));
    assert!(text.contains("\nlr = 0.001\n"));
}

#[test]
fn non_finite_loss_dumps_the_batch() {
    let (d, _) = workspace();
    let p = d.path();
    let (code, e) = err(&qerl(p, &["train", "--config", "small.toml", "--set", "lr=1e300", "--out", "n"]));
    assert_eq!(code, 4);
    assert!(e.starts_with("error[nan]:"), "{e}");
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("n/nan_batch.json")).unwrap()).unwrap();
    assert!(dump["groups"].as_array().is_some_and(|g| !g.is_empty()));
}

fn random_archive(path: &Path) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let w = Array2::from_shape_simple_fn((32, 48), || rng.gen_range(-1.0..1.0));
    let v = ndarray::Array1::from_shape_simple_fn(48, || rng.gen_range(-1.0..1.0));
    let mut buf = Vec::new();
    write_archive(&mut buf, &[ArrayEntry::matrix("layer.w", &w), ArrayEntry::vector("layer.g", &v)]).unwrap();
    std::fs::write(path, buf).unwrap();
}

#[test]
fn quantize_round_trip_and_reports() {
    let (d, _) = workspace();
    let p = d.path();
    random_archive(&p.join("w.qckpt"));
    let out = ok(&qerl(p, &["quantize", "w.qckpt", "--format", "nvfp4", "-o", "q.qckpt"]));
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains("layer.w\t32x48\tnvfp4\tmse="), "{out}");
    let listing = ok(&qerl(p, &["inspect", "q.qckpt"]));
    assert!(listing.contains("layer.w\tnvfp4 block 16"), "{listing}");
    assert!(listing.contains("layer.g\tf64\t[48]"), "{listing}");
    ok(&qerl(p, &["quantize", "q.qckpt", "--dequantize", "-o", "dq.qckpt"]));
    ok(&qerl(p, &["quantize", "dq.qckpt", "--format", "nvfp4", "-o", "q2.qckpt"]));
    assert_eq!(std::fs::read(p.join("q.qckpt")).unwrap(), std::fs::read(p.join("q2.qckpt")).unwrap());
    let nf4 = ok(&qerl(p, &["quantize", "w.qckpt", "--format", "nf4", "-o", "n.qckpt"]));
    for report in [&out, &nf4] {
        for line in report.lines() {
            let mse: f64 = line.split("mse=").nth(1).unwrap().split('\t').next().unwrap().parse().unwrap();
            assert!(mse.is_finite() && mse > 0.0);
        }
    }
    let (_, e) = err(&qerl(p, &["quantize", "w.qckpt", "--format", "fp8", "-o", "x"]));
    assert!(e.starts_with("error[quant]:"), "{e}");
    std::fs::write(p.join("junk"), b"QERLCKPT\x01").unwrap();
    let (_, e) = err(&qerl(p, &["inspect", "junk"]));
    assert!(e.starts_with("error[model]:"), "{e}");
}

#[test]
fn ablate_rejects_default_ranks_at_width_64() {
    let (d, _) = workspace();
    let (code, e) = err(&qerl(d.path(), &["ablate", "--axis", "rank", "--config", "small.toml"]));
    assert_eq!(code, 2);
    assert!(e.contains("rank=64") && e.contains("key `lora_rank`"), "{e}");
}

#[test]
fn ablate_schedule_runs_four_variants() {
    let (d, _) = workspace();
    let p = d.path();
    let out = ok(&qerl(p, &["ablate", "--axis", "schedule", "--config", "small.toml", "--out", "abl", "--steps", "6"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 5);
    for (row, v) in rows[1..].iter().zip(["exponential", "linear", "cosine", "logarithmic"]) {
        assert!(row.starts_with(&format!("schedule={v}\t")), "{row}");
        assert_eq!(metrics(&p.join(format!("abl/schedule_{v}"))).len(), 6);
    }
    // shared seed and base: stage-0 steps are identical across variants
    let a = metrics(&p.join("abl/schedule_exponential"));
    let b = metrics(&p.join("abl/schedule_cosine"));
    assert_eq!(a[0], b[0]);
    let joined = ok(&qerl(p, &["plotdata", "abl/schedule_exponential", "abl/schedule_linear"]));
    assert!(joined.starts_with("step\treward_mean_schedule_exponential\treward_mean_schedule_linear"));
    assert_eq!(joined.lines().count(), 7);
}

#[test]
fn plotdata_reports_unequal_lengths() {
    let (d, _) = workspace();
    let p = d.path();
    ok(&qerl(p, &["train", "--config", "small.toml", "--out", "x", "--steps", "4"]));
    ok(&qerl(p, &["train", "--config", "small.toml", "--out", "y", "--steps", "3"]));
    let single = ok(&qerl(p, &["plotdata", "x"]));
    assert_eq!(single.lines().next().unwrap(), "step\treward_mean\tentropy\tsigma");
    let (code, e) = err(&qerl(p, &["plotdata", "x", "y"]));
    assert_eq!(code, 1);
    assert!(e.starts_with("error[plot]:") && e.contains("4 steps") && e.contains("has 3"), "{e}");
}

#[test]
fn export_tasks_reimports() {
    let (d, _) = workspace();
    let p = d.path();
    ok(&qerl(p, &["export-tasks", "--kind", "chain_sum", "--difficulty", "3", "--count", "7", "-o", "t.jsonl"]));
    let text = std::fs::read_to_string(p.join("t.jsonl")).unwrap();
    let tasks = import_jsonl(&text, &SymbolTable::new()).unwrap();
    assert_eq!(tasks.len(), 7);
    assert!(tasks.iter().all(|t| t.difficulty == 3));
    let (_, e) = err(&qerl(p, &["export-tasks", "--kind", "sorting"]));
    assert!(e.starts_with("error[task]:"), "{e}");
}

#[test]
fn bench_codec_lists_formats() {
    let (d, _) = workspace();
    let out = ok(&qerl(d.path(), &["bench-codec", "--rows", "16", "--cols", "64", "--reps", "1"]));
    let names: Vec<&str> = out.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["int4", "fp4", "nvfp4", "mxfp4", "nf4"]);
}

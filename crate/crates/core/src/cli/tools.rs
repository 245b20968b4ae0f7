use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{write_file, CliError};
use crate::nn::{read_archive, write_archive, ArrayEntry, EntryData};
use crate::quant::{error_report, quantize, FormatKind, QuantizedTensor};
use crate::rl::StepMetrics;
use crate::tasks::{export_jsonl, generate_task, SymbolTable, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    Quantize(FormatKind),
    Dequantize,
}

fn read_entries(path: &Path) -> Result<Vec<ArrayEntry>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_archive(&mut bytes.as_slice())?)
}

fn matrix_of(e: &ArrayEntry) -> Option<Array2<f64>> {
    let [r, c] = e.dims.as_slice() else { return None };
    let (r, c) = (*r, *c);
    let v: Vec<f64> = match &e.data {
        EntryData::F64(v) => v.clone(),
        EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        _ => return None,
    };
    Array2::from_shape_vec((r, c), v).ok()
}

/// Quantizes every 2-D float entry of the archive at `input` (or, in
/// dequantize mode, expands every quantized entry back to f64). Returns one
/// report line per converted tensor. Vectors pass through unchanged.
pub fn quantize_archive(input: &Path, output: &Path, mode: QuantizeMode) -> Result<Vec<String>, CliError> {
    let entries = read_entries(input)?;
    let mut out = Vec::with_capacity(entries.len());
    let mut lines = Vec::new();
    for e in entries {
        match (mode, &e.data) {
            (QuantizeMode::Quantize(kind), EntryData::F64(_) | EntryData::F32(_)) => match matrix_of(&e) {
                Some(w) => {
                    let t = quantize(w.view(), kind)?;
                    let rep = error_report(w.view(), kind)?;
                    lines.push(format!(
                        "{}\t{}x{}\t{}\tmse={:.6e}\tmax_abs={:.6e}",
                        e.name, t.rows, t.cols, kind, rep.mse, rep.max_abs
                    ));
                    out.push(ArrayEntry {
                        name: e.name,
                        dims: e.dims,
                        data: EntryData::Quant(t),
                    });
                }
                None => out.push(e),
            },
            (QuantizeMode::Dequantize, EntryData::Quant(t)) => {
                lines.push(format!("{}\t{}x{}\t{}\tdequantized", e.name, t.rows, t.cols, t.spec.kind));
                out.push(ArrayEntry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    data: EntryData::F64(t.dequantize().iter().copied().collect()),
                });
            }
            _ => out.push(e),
        }
    }
    let mut buf = Vec::new();
    write_archive(&mut buf, &out)?;
    write_file(output, buf)?;
    Ok(lines)
}

/// One line per archive entry: name, storage, dims.
pub fn inspect(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_entries(path)?
        .iter()
        .map(|e| {
            let dims: Vec<String> = e.dims.iter().map(usize::to_string).collect();
            let kind = match &e.data {
                EntryData::F64(_) => "f64".to_string(),
                EntryData::F32(_) => "f32".to_string(),
                EntryData::Bytes(b) => format!("bytes({})", b.len()),
                EntryData::Quant(t) => describe(t),
            };
            format!("{}\t{}\t[{}]", e.name, kind, dims.join(", "))
        })
        .collect())
}

fn describe(t: &QuantizedTensor) -> String {
    format!("{} block {} ({} bytes)", t.spec.kind, t.spec.block_len(t.cols), t.encoded_len())
}

/// Times quantize and dequantize for every codec on a standard-normal
/// matrix. The timings are wall clock and vary between machines.
pub fn bench_codec(rows: usize, cols: usize, reps: usize, seed: u64) -> Result<String, CliError> {
    if rows == 0 || cols == 0 || reps == 0 {
        return Err(CliError::Usage("rows, cols and reps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
    let mut s = String::from("format\tquantize_ms\tdequantize_ms\tmse\tbytes\tbits_per_weight\n");
    for kind in FormatKind::ALL {
        let t0 = Instant::now();
        let mut t = quantize(w.view(), kind)?;
        for _ in 1..reps {
            t = quantize(w.view(), kind)?;
        }
        let q_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let t1 = Instant::now();
        let mut d = t.dequantize();
        for _ in 1..reps {
            d = t.dequantize();
        }
        let d_ms = t1.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let mse = (&d - &w).mapv(|x| x * x).mean().unwrap_or(0.0);
        let bytes = t.encoded_len();
        s.push_str(&format!(
            "{kind}\t{q_ms:.3}\t{d_ms:.3}\t{mse:.6e}\t{bytes}\t{:.3}\n",
            bytes as f64 * 8.0 / (rows * cols) as f64
        ));
    }
    Ok(s)
}

fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, CliError> {
    let file = if path.is_dir() { path.join("metrics.jsonl") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Plot(format!("{}:{}: {e}", file.display(), i + 1)))
        })
        .collect()
}

fn label(path: &Path, i: usize) -> String {
    let p: PathBuf = if path.file_name().is_some_and(|n| n == "metrics.jsonl") {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    };
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run{i}"))
}

/// Joins the metrics of `runs` (run directories or metrics files) on step
/// into one tab-separated table. One run gives plain column names; several
/// give `column_<run>` suffixes. Step grids must match exactly.
pub fn plotdata(runs: &[PathBuf]) -> Result<String, CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("plotdata needs at least one run".into()));
    }
    let series: Vec<Vec<StepMetrics>> = runs.iter().map(|r| read_metrics(r)).collect::<Result<_, _>>()?;
    let base: Vec<String> = runs.iter().enumerate().map(|(i, r)| label(r, i)).collect();
    let labels: Vec<String> = base
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if base.iter().filter(|b| *b == l).count() > 1 {
                format!("{l}{i}")
            } else {
                l.clone()
            }
        })
        .collect();
    for (i, s) in series.iter().enumerate().skip(1) {
        if s.len() != series[0].len() {
            return Err(CliError::Plot(format!(
                "unequal run lengths: {} has {} steps, {} has {}",
                runs[0].display(),
                series[0].len(),
                runs[i].display(),
                s.len()
            )));
        }
        if let Some(row) = s.iter().zip(&series[0]).position(|(a, b)| a.step != b.step) {
            return Err(CliError::Plot(format!(
                "step grids differ at row {row}: {} has step {}, {} has {}",
                runs[0].display(),
                series[0][row].step,
                runs[i].display(),
                s[row].step
            )));
        }
    }
    const COLS: [&str; 3] = ["reward_mean", "entropy", "sigma"];
    let mut out = String::from("step");
    for c in COLS {
        for l in &labels {
            if series.len() == 1 {
                out.push_str(&format!("\t{c}"));
            } else {
                out.push_str(&format!("\t{c}_{l}"));
            }
        }
    }
    out.push('\n');
    for row in 0..series[0].len() {
        out.push_str(&series[0][row].step.to_string());
        for c in COLS {
            for s in &series {
                let m = &s[row];
                let v = match c {
                    "reward_mean" => m.reward_mean,
                    "entropy" => m.entropy,
                    _ => m.sigma,
                };
                out.push_str(&format!("\t{v}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// `count` task records as JSON lines; instance seeds come from `seed`.
pub fn export_tasks(kind: TaskKind, difficulty: u8, count: usize, seed: u64) -> Result<String, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..count)
        .map(|_| generate_task(kind, difficulty, rng.gen()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut buf = Vec::new();
    export_jsonl(&mut buf, &tasks, &SymbolTable::new())?;
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

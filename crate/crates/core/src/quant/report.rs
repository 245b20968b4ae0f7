use ndarray::ArrayView2;
use serde::Serialize;

use super::format::FormatKind;
use super::tensor::quantize;
use super::QuantError;

/// Reconstruction-error summary of `Δε = Ŵ − W`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Max `|Δε|` of each block, row-major over (row, block).
    pub per_block_max: Vec<f64>,
}

/// Quantizes `w`, reconstructs it and summarises the error. Zero padding of
/// the trailing block is not part of the statistics.
pub fn error_report(w: ArrayView2<f64>, kind: FormatKind) -> Result<ErrorReport, QuantError> {
    let t = quantize(w, kind)?;
    let d = t.dequantize();
    let (rows, cols) = w.dim();
    let bl = t.spec.block_len(cols);
    let bpr = t.blocks_per_row();
    let mut per_block_max = vec![0.0f64; rows * bpr];
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut max_abs = 0.0f64;
    for ((r, c), &x) in w.indexed_iter() {
        let e = (d[[r, c]] - x).abs();
        sq += e * e;
        abs += e;
        max_abs = max_abs.max(e);
        let slot = &mut per_block_max[r * bpr + c / bl];
        *slot = slot.max(e);
    }
    let n = (rows * cols).max(1) as f64;
    Ok(ErrorReport {
        mse: sq / n,
        max_abs,
        mean_abs: abs / n,
        per_block_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn grid_values_report_zero() {
        let w = array![[1.0, -2.0, 0.5, 6.0], [0.0, 3.0, -1.5, 4.0]];
        let r = error_report(w.view(), FormatKind::Mxfp4).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.max_abs, 0.0);
        assert!(r.per_block_max.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_matches_recomputation() {
        let w = Array2::from_shape_fn((7, 33), |(r, c)| ((r * 33 + c) as f64 * 0.37).sin() * 2.0);
        for kind in FormatKind::ALL {
            let r = error_report(w.view(), kind).unwrap();
            let noise = super::super::quantization_noise(w.view(), kind).unwrap();
            let mse = noise.iter().map(|e| e * e).sum::<f64>() / noise.len() as f64;
            assert!((r.mse - mse).abs() <= 1e-15 * (1.0 + mse));
            assert!(r.max_abs >= r.mean_abs);
            assert_eq!(r.per_block_max.len(), 7 * FormatSpecExt::bpr(kind, 33));
        }
    }

    struct FormatSpecExt;
    impl FormatSpecExt {
        fn bpr(kind: FormatKind, cols: usize) -> usize {
            crate::quant::FormatSpec::of(kind).blocks_per_row(cols)
        }
    }
}

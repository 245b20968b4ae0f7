use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::NnError;

/// RMSNorm whose scale carries an additive noise vector:
/// `y = (w + Z) ⊙ x / sqrt(mean(x²) + δ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyRmsNorm {
    pub weight: Array1<f64>,
    pub noise: Array1<f64>,
    pub eps: f64,
}

pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub inv: Array1<f64>,
}

impl NoisyRmsNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        NoisyRmsNorm {
            weight: Array1::ones(dim),
            noise: Array1::zeros(dim),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    /// `w + Z`
    pub fn effective_weight(&self) -> Array1<f64> {
        &self.weight + &self.noise
    }

    /// Replaces the merged noise vector (replace, never accumulate).
    pub fn set_noise(&mut self, z: Array1<f64>) -> Result<(), NnError> {
        if z.len() != self.dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        self.noise = z;
        Ok(())
    }

    pub fn clear_noise(&mut self) {
        self.noise.fill(0.0);
    }

    pub fn has_noise(&self) -> bool {
        self.noise.iter().any(|&z| z != 0.0)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        Ok(self.forward_cached(x).0)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.ncols() as f64;
        let inv = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / n + self.eps).sqrt());
        let mut xhat = x.to_owned();
        Zip::from(xhat.rows_mut()).and(&inv).for_each(|mut r, &s| r *= s);
        let mut y = xhat.clone();
        if self.has_noise() {
            y *= &self.effective_weight();
        } else {
            y *= &self.weight;
        }
        (y, NormCache { xhat, inv })
    }

    /// Returns `dL/dx`; adds `dL/dw` into `dweight` when given.
    pub(crate) fn backward(
        &self,
        cache: &NormCache,
        dy: ArrayView2<f64>,
        dweight: Option<&mut Array1<f64>>,
    ) -> Array2<f64> {
        if let Some(dw) = dweight {
            *dw += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        let g = self.effective_weight();
        let h = &dy * &g;
        let n = g.len() as f64;
        let mut dx = h;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.inv)
            .for_each(|mut hr, xr, &inv| {
                let proj = hr.dot(&xr) / n;
                Zip::from(&mut hr).and(&xr).for_each(|h, &xh| *h = inv * (*h - xh * proj));
            });
        dx
    }
}

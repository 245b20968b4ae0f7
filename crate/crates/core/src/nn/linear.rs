use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::OnceLock;

use super::NnError;
use crate::quant::{quantize, FormatKind, QuantizedTensor};

/// Trainable low-rank pair: `ΔW = B·A` with `A: r×k`, `B: d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A` gets N(0, 1/k) entries, `B` starts at zero so the adapter is a no-op.
    pub fn new<R: Rng + ?Sized>(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if rank == 0 || 2 * rank > out_dim.min(in_dim) {
            return Err(NnError::InvalidRank {
                rank,
                limit: out_dim.min(in_dim) / 2,
            });
        }
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        let a = Array2::from_shape_simple_fn((rank, in_dim), || normal.sample(rng));
        Ok(LoraAdapter {
            a,
            b: Array2::zeros((out_dim, rank)),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `alpha / r`, applied at forward time.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scaling()
    }
}

/// Frozen main-branch weight, stored `out × in`.
#[derive(Clone, Debug)]
pub enum BaseWeight {
    Dense(Array2<f64>),
    Quantized {
        tensor: QuantizedTensor,
        dense: OnceLock<Array2<f64>>,
    },
}

impl BaseWeight {
    pub fn quantized(tensor: QuantizedTensor) -> Self {
        BaseWeight::Quantized {
            tensor,
            dense: OnceLock::new(),
        }
    }

    /// Dense view; for quantized bases this is `Ŵ`, decoded on first use.
    pub fn dense(&self) -> &Array2<f64> {
        match self {
            BaseWeight::Dense(w) => w,
            BaseWeight::Quantized { tensor, dense } => dense.get_or_init(|| tensor.dequantize()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(w) => w.dim(),
            BaseWeight::Quantized { tensor, .. } => tensor.shape(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, BaseWeight::Quantized { .. })
    }
}

/// Intermediates kept for the backward pass of one [`QuantLinear`].
#[derive(Clone, Debug)]
pub struct LinearCache {
    /// `x·Aᵀ`
    pub xa: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub base: Option<Array2<f64>>,
}

impl LinearGrads {
    pub fn zeros_like(layer: &QuantLinear, with_base: bool) -> Self {
        let (d, k) = layer.base.shape();
        LinearGrads {
            a: Array2::zeros(layer.adapter.a.dim()),
            b: Array2::zeros(layer.adapter.b.dim()),
            base: with_base.then(|| Array2::zeros((d, k))),
        }
    }
}

/// Frozen base plus LoRA adapter: `y = x·Ŵᵀ + (α/r)·(x·Aᵀ)·Bᵀ`.
#[derive(Clone, Debug)]
pub struct QuantLinear {
    pub base: BaseWeight,
    pub adapter: LoraAdapter,
}

impl QuantLinear {
    pub fn dense<R: Rng + ?Sized>(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng));
        Ok(QuantLinear {
            base: BaseWeight::Dense(w),
            adapter: LoraAdapter::new(out_dim, in_dim, rank, alpha, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base.shape().1
    }

    pub fn out_dim(&self) -> usize {
        self.base.shape().0
    }

    /// Replaces a dense base by its quantized form; already quantized bases
    /// are re-encoded from their dequantized values.
    pub fn quantize_base(&mut self, kind: FormatKind) -> Result<(), NnError> {
        let tensor = quantize(self.base.dense().view(), kind)?;
        self.base = BaseWeight::quantized(tensor);
        Ok(())
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.in_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check(&x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Same as [`forward`](Self::forward), but the base product is computed
    /// directly from packed codes when the base is quantized.
    pub fn forward_packed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check(&x)?;
        let mut y = match &self.base {
            BaseWeight::Dense(w) => x.dot(&w.t()),
            BaseWeight::Quantized { tensor, .. } => tensor.matmul_transposed(x)?,
        };
        let xa = x.dot(&self.adapter.a.t());
        y.scaled_add(self.adapter.scaling(), &xa.dot(&self.adapter.b.t()));
        Ok(y)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.base.dense().t());
        let xa = x.dot(&self.adapter.a.t());
        y.scaled_add(self.adapter.scaling(), &xa.dot(&self.adapter.b.t()));
        (y, LinearCache { xa })
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &LinearCache,
        dy: ArrayView2<f64>,
        grads: Option<&mut LinearGrads>,
    ) -> Array2<f64> {
        let s = self.adapter.scaling();
        let dyb = dy.dot(&self.adapter.b);
        let mut dx = dy.dot(self.base.dense());
        dx.scaled_add(s, &dyb.dot(&self.adapter.a));
        if let Some(g) = grads {
            g.b.scaled_add(s, &dy.t().dot(&cache.xa));
            g.a.scaled_add(s, &dyb.t().dot(&x));
            if let Some(gw) = g.base.as_mut() {
                *gw += &dy.t().dot(&x);
            }
        }
        dx
    }
}

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linear::{LinearCache, LinearGrads, QuantLinear};
use super::norm::{NoisyRmsNorm, NormCache};
use super::NnError;
use crate::quant::FormatKind;

/// Decoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 128,
            max_seq: 128,
            lora_rank: 16,
            lora_alpha: 32.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return bad("vocab, d_model, n_layers and max_seq must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a multiple of n_heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        let limit = self.d_model.min(self.ffn_dim) / 2;
        if self.lora_rank == 0 || self.lora_rank > limit {
            return Err(NnError::InvalidRank {
                rank: self.lora_rank,
                limit,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One pre-norm decoder block. `W_q/W_k/W_v` read `attn_norm`, `W_gate/W_up`
/// read `ffn_norm`; `W_o` and `W_down` see no norm output.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: NoisyRmsNorm,
    pub wq: QuantLinear,
    pub wk: QuantLinear,
    pub wv: QuantLinear,
    pub wo: QuantLinear,
    pub ffn_norm: NoisyRmsNorm,
    pub w_gate: QuantLinear,
    pub w_up: QuantLinear,
    pub w_down: QuantLinear,
}

pub const LINEAR_NAMES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, NnError> {
        let (d, f, r, a) = (cfg.d_model, cfg.ffn_dim, cfg.lora_rank, cfg.lora_alpha);
        Ok(Block {
            attn_norm: NoisyRmsNorm::new(d, cfg.norm_eps),
            wq: QuantLinear::dense(d, d, r, a, rng)?,
            wk: QuantLinear::dense(d, d, r, a, rng)?,
            wv: QuantLinear::dense(d, d, r, a, rng)?,
            wo: QuantLinear::dense(d, d, r, a, rng)?,
            ffn_norm: NoisyRmsNorm::new(d, cfg.norm_eps),
            w_gate: QuantLinear::dense(f, d, r, a, rng)?,
            w_up: QuantLinear::dense(f, d, r, a, rng)?,
            w_down: QuantLinear::dense(d, f, r, a, rng)?,
        })
    }

    /// The seven projections in [`LINEAR_NAMES`] order.
    pub fn linears(&self) -> [&QuantLinear; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn linears_mut(&mut self) -> [&mut QuantLinear; 7] {
        let Block { wq, wk, wv, wo, w_gate, w_up, w_down, .. } = self;
        [wq, wk, wv, wo, w_gate, w_up, w_down]
    }
}

/// Decoder-only policy: token + learned position embeddings, pre-norm blocks
/// with gated SiLU FFN, final RMSNorm and an untied dense output head.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: NoisyRmsNorm,
    pub head: Array2<f64>,
}

/// Concatenated token sequences. Sequence `i` occupies
/// `tokens[starts[i]..starts[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<u32>,
    pub starts: Vec<usize>,
}

impl SeqBatch {
    pub fn new() -> Self {
        SeqBatch {
            tokens: Vec::new(),
            starts: vec![0],
        }
    }

    pub fn from_seqs<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut b = SeqBatch::new();
        for s in seqs {
            b.push(s.as_ref());
        }
        b
    }

    pub fn push(&mut self, seq: &[u32]) {
        self.tokens.extend_from_slice(seq);
        self.starts.push(self.tokens.len());
    }

    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i + 1]
    }

    pub fn seq(&self, i: usize) -> &[u32] {
        &self.tokens[self.range(i)]
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }
}

struct BlockCache {
    attn_norm: NormCache,
    a: Array2<f64>,
    q: (Array2<f64>, LinearCache),
    k: (Array2<f64>, LinearCache),
    v: (Array2<f64>, LinearCache),
    /// softmax probabilities per (sequence, head)
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    o: LinearCache,
    ffn_norm: NormCache,
    b: Array2<f64>,
    gate: (Array2<f64>, LinearCache),
    up: (Array2<f64>, LinearCache),
    act: Array2<f64>,
    down: LinearCache,
}

/// Activations retained by [`PolicyModel::forward_train`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    hf: Array2<f64>,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// LoRA `A` and `B` of every projection.
    Adapters,
    /// Embeddings, norm scales, dense base weights and the head.
    Base,
}

#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub attn_norm: Array1<f64>,
    pub ffn_norm: Array1<f64>,
    pub linears: Vec<LinearGrads>,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub group: ParamGroup,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockGrads>,
    pub final_norm: Array1<f64>,
    pub head: Array2<f64>,
}

impl ModelGrads {
    /// Gradient slices in the same order as [`PolicyModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match self.group {
            ParamGroup::Adapters => {
                for b in &self.blocks {
                    for l in &b.linears {
                        out.push(l.a.as_slice().unwrap());
                        out.push(l.b.as_slice().unwrap());
                    }
                }
            }
            ParamGroup::Base => {
                out.push(self.tok_emb.as_slice().unwrap());
                out.push(self.pos_emb.as_slice().unwrap());
                for b in &self.blocks {
                    out.push(b.attn_norm.as_slice().unwrap());
                    out.push(b.ffn_norm.as_slice().unwrap());
                    for l in &b.linears {
                        out.push(l.base.as_ref().expect("base grads").as_slice().unwrap());
                    }
                }
                out.push(self.final_norm.as_slice().unwrap());
                out.push(self.head.as_slice().unwrap());
            }
        }
        out
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

impl PolicyModel {
    /// Random dense initialisation; LoRA `B` matrices start at zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let d = config.d_model;
        let emb = Normal::new(0.0, 0.5).expect("valid std");
        let tok_emb = Array2::from_shape_simple_fn((config.vocab, d), || emb.sample(rng));
        let pos_emb = Array2::from_shape_simple_fn((config.max_seq, d), || 0.2 * emb.sample(rng));
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(&config, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let head = Array2::from_shape_simple_fn((config.vocab, d), || head_dist.sample(rng));
        Ok(PolicyModel {
            final_norm: NoisyRmsNorm::new(d, config.norm_eps),
            config,
            tok_emb,
            pos_emb,
            blocks,
            head,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// Quantizes every projection base in place.
    pub fn quantize_bases(&mut self, kind: FormatKind) -> Result<(), NnError> {
        for b in &mut self.blocks {
            for l in b.linears_mut() {
                l.quantize_base(kind)?;
            }
        }
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.blocks.iter().any(|b| b.linears().iter().any(|l| l.base.is_quantized()))
    }

    /// Re-draws all adapters at the given rank (`B = 0`).
    pub fn reset_adapters<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let mut cfg = self.config.clone();
        cfg.lora_rank = rank;
        cfg.lora_alpha = alpha;
        cfg.validate()?;
        for b in &mut self.blocks {
            for l in b.linears_mut() {
                let (d, k) = l.base.shape();
                l.adapter = super::LoraAdapter::new(d, k, rank, alpha, rng)?;
            }
        }
        self.config = cfg;
        Ok(())
    }

    /// Every RMSNorm that can carry noise, two per block.
    pub fn noisy_norms_mut(&mut self) -> Vec<&mut NoisyRmsNorm> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.attn_norm, &mut b.ffn_norm])
            .collect()
    }

    pub fn clear_noise(&mut self) {
        for n in self.noisy_norms_mut() {
            n.clear_noise();
        }
    }

    fn check_batch(&self, batch: &SeqBatch) -> Result<(), NnError> {
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(NnError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        for i in 0..batch.len() {
            let len = batch.range(i).len();
            if len > self.config.max_seq {
                return Err(NnError::SequenceTooLong {
                    len,
                    max: self.config.max_seq,
                });
            }
        }
        Ok(())
    }

    /// Causal logits for every position of every sequence, `(total_tokens × V)`.
    pub fn forward(&self, batch: &SeqBatch) -> Result<Array2<f64>, NnError> {
        Ok(self.forward_train(batch)?.0)
    }

    /// Forward pass that also returns the activations needed by [`backward`](Self::backward).
    pub fn forward_train(&self, batch: &SeqBatch) -> Result<(Array2<f64>, ForwardCache), NnError> {
        self.check_batch(batch)?;
        let n = batch.total_tokens();
        let d = self.config.d_model;
        let mut x = Array2::<f64>::zeros((n, d));
        for i in 0..batch.len() {
            for (p, idx) in batch.range(i).enumerate() {
                let tok = batch.tokens[idx] as usize;
                let mut row = x.row_mut(idx);
                row.assign(&self.tok_emb.row(tok));
                row += &self.pos_emb.row(p);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = self.block_forward(block, x, batch);
            caches.push(c);
            x = y;
        }
        let (hf, final_norm) = self.final_norm.forward_cached(x.view());
        let logits = hf.dot(&self.head.t());
        Ok((
            logits,
            ForwardCache {
                blocks: caches,
                final_norm,
                hf,
            },
        ))
    }

    fn block_forward(&self, blk: &Block, x_in: Array2<f64>, batch: &SeqBatch) -> (Array2<f64>, BlockCache) {
        let (a, attn_norm) = blk.attn_norm.forward_cached(x_in.view());
        let q = blk.wq.forward_cached(a.view());
        let k = blk.wk.forward_cached(a.view());
        let v = blk.wv.forward_cached(a.view());
        let (ctx, probs) = self.attention(&q.0, &k.0, &v.0, batch);
        let (o, o_cache) = blk.wo.forward_cached(ctx.view());
        let h1 = &x_in + &o;
        let (b, ffn_norm) = blk.ffn_norm.forward_cached(h1.view());
        let gate = blk.w_gate.forward_cached(b.view());
        let up = blk.w_up.forward_cached(b.view());
        let mut act = gate.0.mapv(silu);
        act *= &up.0;
        let (down, down_cache) = blk.w_down.forward_cached(act.view());
        let out = &h1 + &down;
        (
            out,
            BlockCache {
                attn_norm,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                o: o_cache,
                ffn_norm,
                b,
                gate,
                up,
                act,
                down: down_cache,
            },
        )
    }

    fn attention(
        &self,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        batch: &SeqBatch,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = Array2::<f64>::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(batch.len() * self.config.n_heads);
        for i in 0..batch.len() {
            let r = batch.range(i);
            for h in 0..self.config.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let qs = q.slice(s![r.clone(), cols.clone()]);
                let ks = k.slice(s![r.clone(), cols.clone()]);
                let vs = v.slice(s![r.clone(), cols.clone()]);
                let mut sc = qs.dot(&ks.t());
                sc *= scale;
                causal_softmax(&mut sc);
                ctx.slice_mut(s![r.clone(), cols]).assign(&sc.dot(&vs));
                probs.push(sc);
            }
        }
        (ctx, probs)
    }

    /// Backpropagates `dlogits` through the network.
    pub fn backward(
        &self,
        batch: &SeqBatch,
        cache: &ForwardCache,
        dlogits: ArrayView2<f64>,
        group: ParamGroup,
    ) -> ModelGrads {
        let base = group == ParamGroup::Base;
        let adapters = group == ParamGroup::Adapters;
        let d = self.config.d_model;
        let mut grads = ModelGrads {
            group,
            tok_emb: Array2::zeros(if base { self.tok_emb.dim() } else { (0, d) }),
            pos_emb: Array2::zeros(if base { self.pos_emb.dim() } else { (0, d) }),
            blocks: Vec::with_capacity(self.blocks.len()),
            final_norm: Array1::zeros(if base { d } else { 0 }),
            head: Array2::zeros(if base { self.head.dim() } else { (0, d) }),
        };
        if base {
            grads.head = dlogits.t().dot(&cache.hf);
        }
        let dhf = dlogits.dot(&self.head);
        let mut dx = self.final_norm.backward(
            &cache.final_norm,
            dhf.view(),
            base.then_some(&mut grads.final_norm),
        );
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut bg = BlockGrads {
                attn_norm: Array1::zeros(if base { d } else { 0 }),
                ffn_norm: Array1::zeros(if base { d } else { 0 }),
                linears: blk.linears().iter().map(|l| LinearGrads::zeros_like(l, base)).collect(),
            };
            dx = self.block_backward(blk, bc, dx, batch, &mut bg, base || adapters, base);
            block_grads.push(bg);
        }
        block_grads.reverse();
        grads.blocks = block_grads;
        if base {
            for i in 0..batch.len() {
                for (p, idx) in batch.range(i).enumerate() {
                    let tok = batch.tokens[idx] as usize;
                    let row = dx.row(idx);
                    let mut t = grads.tok_emb.row_mut(tok);
                    t += &row;
                    let mut pe = grads.pos_emb.row_mut(p);
                    pe += &row;
                }
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        blk: &Block,
        c: &BlockCache,
        dout: Array2<f64>,
        batch: &SeqBatch,
        g: &mut BlockGrads,
        want_linear: bool,
        want_norm: bool,
    ) -> Array2<f64> {
        let [gq, gk, gv, go, ggate, gup, gdown] = &mut g.linears[..] else {
            unreachable!("seven projections")
        };
        let dact = blk.w_down.backward(
            c.act.view(),
            &c.down,
            dout.view(),
            want_linear.then_some(&mut *gdown),
        );
        let mut dgate = c.gate.0.mapv(silu_grad);
        Zip::from(&mut dgate).and(&dact).and(&c.up.0).for_each(|dg, &da, &u| *dg *= da * u);
        let mut dup = c.gate.0.mapv(silu);
        dup *= &dact;
        let mut db = blk.w_gate.backward(
            c.b.view(),
            &c.gate.1,
            dgate.view(),
            want_linear.then_some(&mut *ggate),
        );
        db += &blk.w_up.backward(
            c.b.view(),
            &c.up.1,
            dup.view(),
            want_linear.then_some(&mut *gup),
        );
        let mut dh1 = blk.ffn_norm.backward(&c.ffn_norm, db.view(), want_norm.then_some(&mut g.ffn_norm));
        dh1 += &dout;
        let dctx = blk.wo.backward(
            c.ctx.view(),
            &c.o,
            dh1.view(),
            want_linear.then_some(&mut *go),
        );
        let (dq, dk, dv) = self.attention_backward(c, &dctx, batch);
        let mut da = blk.wq.backward(c.a.view(), &c.q.1, dq.view(), want_linear.then_some(&mut *gq));
        da += &blk.wk.backward(c.a.view(), &c.k.1, dk.view(), want_linear.then_some(&mut *gk));
        da += &blk.wv.backward(c.a.view(), &c.v.1, dv.view(), want_linear.then_some(&mut *gv));
        let mut dx = blk.attn_norm.backward(&c.attn_norm, da.view(), want_norm.then_some(&mut g.attn_norm));
        dx += &dh1;
        dx
    }

    fn attention_backward(
        &self,
        c: &BlockCache,
        dctx: &Array2<f64>,
        batch: &SeqBatch,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::<f64>::zeros(dctx.raw_dim());
        let mut dk = Array2::<f64>::zeros(dctx.raw_dim());
        let mut dv = Array2::<f64>::zeros(dctx.raw_dim());
        let mut pi = 0;
        for i in 0..batch.len() {
            let r = batch.range(i);
            for h in 0..self.config.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &c.probs[pi];
                pi += 1;
                let qs = c.q.0.slice(s![r.clone(), cols.clone()]);
                let ks = c.k.0.slice(s![r.clone(), cols.clone()]);
                let vs = c.v.0.slice(s![r.clone(), cols.clone()]);
                let dout = dctx.slice(s![r.clone(), cols.clone()]);
                dv.slice_mut(s![r.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                let dp = dout.dot(&vs.t());
                let mut ds = &dp * p;
                let rowdot = ds.sum_axis(Axis(1));
                Zip::from(ds.rows_mut())
                    .and(p.rows())
                    .and(&rowdot)
                    .for_each(|mut dr, pr, &rd| dr.scaled_add(-rd, &pr));
                ds *= scale;
                dq.slice_mut(s![r.clone(), cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![r.clone(), cols]).assign(&ds.t().dot(&qs));
            }
        }
        (dq, dk, dv)
    }

    /// Parameter slices of a group, ordered like [`ModelGrads::slices`].
    pub fn params_mut(&mut self, group: ParamGroup) -> Result<Vec<&mut [f64]>, NnError> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match group {
            ParamGroup::Adapters => {
                for b in &mut self.blocks {
                    for l in b.linears_mut() {
                        out.push(l.adapter.a.as_slice_mut().unwrap());
                        out.push(l.adapter.b.as_slice_mut().unwrap());
                    }
                }
            }
            ParamGroup::Base => {
                if self.is_quantized() {
                    return Err(NnError::FrozenBase);
                }
                out.push(self.tok_emb.as_slice_mut().unwrap());
                out.push(self.pos_emb.as_slice_mut().unwrap());
                for b in &mut self.blocks {
                    let Block { attn_norm, ffn_norm, wq, wk, wv, wo, w_gate, w_up, w_down } = b;
                    out.push(attn_norm.weight.as_slice_mut().unwrap());
                    out.push(ffn_norm.weight.as_slice_mut().unwrap());
                    for l in [wq, wk, wv, wo, w_gate, w_up, w_down] {
                        match &mut l.base {
                            super::BaseWeight::Dense(w) => out.push(w.as_slice_mut().unwrap()),
                            super::BaseWeight::Quantized { .. } => return Err(NnError::FrozenBase),
                        }
                    }
                }
                out.push(self.final_norm.weight.as_slice_mut().unwrap());
                out.push(self.head.as_slice_mut().unwrap());
            }
        }
        Ok(out)
    }

    /// Copy with every quantized base replaced by its dense `Ŵ`.
    pub fn dense_twin(&self) -> PolicyModel {
        let mut m = self.clone();
        for b in &mut m.blocks {
            for l in b.linears_mut() {
                if l.base.is_quantized() {
                    l.base = super::BaseWeight::Dense(l.base.dense().clone());
                }
            }
        }
        m
    }
}

/// Row-wise softmax of a square score matrix with the strict upper triangle masked.
pub(crate) fn causal_softmax(sc: &mut Array2<f64>) {
    for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
        let live = row.slice(s![..=i]);
        let m = live.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / z);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            max_seq: 16,
            lora_rank: 2,
            lora_alpha: 4.0,
            norm_eps: 1e-6,
        }
    }

    fn batch() -> SeqBatch {
        SeqBatch::from_seqs(&[vec![1u32, 5, 7, 2], vec![3u32, 3, 9], vec![15u32, 0, 4, 4, 8]])
    }

    fn loss_and_dlogits(logits: &Array2<f64>, weights: &Array2<f64>) -> (f64, Array2<f64>) {
        ((logits * weights).sum(), weights.clone())
    }

    fn check_grads(model: &mut PolicyModel, group: ParamGroup) {
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (logits, cache) = model.forward_train(&b).unwrap();
        let w = Array2::from_shape_simple_fn(logits.raw_dim(), || rng.gen_range(-1.0..1.0));
        let (_, dl) = loss_and_dlogits(&logits, &w);
        let grads = model.backward(&b, &cache, dl.view(), group);
        let g: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let n_slices = g.len();
        let h = 1e-6;
        for si in 0..n_slices {
            let len = g[si].len();
            for j in (0..len).step_by(len / 5 + 1) {
                let eval = |m: &mut PolicyModel, delta: f64| {
                    m.params_mut(group).unwrap()[si][j] += delta;
                    let v = (m.forward(&b).unwrap() * &w).sum();
                    m.params_mut(group).unwrap()[si][j] -= delta;
                    v
                };
                let fd = (eval(model, h) - eval(model, -h)) / (2.0 * h);
                let an = g[si][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "slice {si} idx {j}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = PolicyModel::new(tiny_cfg(), &mut rng).unwrap();
        for b in &mut m.blocks {
            for l in b.linears_mut() {
                l.adapter.b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            }
        }
        m.blocks[0].attn_norm.noise.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        m.quantize_bases(FormatKind::Nvfp4).unwrap();
        check_grads(&mut m, ParamGroup::Adapters);
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = PolicyModel::new(tiny_cfg(), &mut rng).unwrap();
        check_grads(&mut m, ParamGroup::Base);
    }

    #[test]
    fn quantized_base_is_frozen() {
        let mut m = PolicyModel::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.quantize_bases(FormatKind::Mxfp4).unwrap();
        assert!(matches!(m.params_mut(ParamGroup::Base), Err(NnError::FrozenBase)));
    }

    #[test]
    fn deterministic_and_permutation_equivariant() {
        let m = PolicyModel::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let s1 = vec![1u32, 2, 3];
        let s2 = vec![4u32, 5, 6, 7];
        let a = m.forward(&SeqBatch::from_seqs(&[s1.clone(), s2.clone()])).unwrap();
        let b = m.forward(&SeqBatch::from_seqs(&[s2, s1.clone(), s1])).unwrap();
        assert_eq!(a.slice(s![0..3, ..]), b.slice(s![4..7, ..]));
        assert_eq!(a.slice(s![0..3, ..]), b.slice(s![7..10, ..]));
        assert_eq!(a.slice(s![3..7, ..]), b.slice(s![0..4, ..]));
    }

    #[test]
    fn adapter_contents_irrelevant_while_b_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = PolicyModel::new(tiny_cfg(), &mut rng).unwrap();
        m.quantize_bases(FormatKind::Nvfp4).unwrap();
        let b = batch();
        let before = m.forward(&b).unwrap();
        for blk in &mut m.blocks {
            for l in blk.linears_mut() {
                l.adapter.a.mapv_inplace(|_| rng.gen_range(-5.0..5.0));
            }
        }
        assert_eq!(m.forward(&b).unwrap(), before);
    }

    #[test]
    fn input_errors() {
        let m = PolicyModel::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(matches!(
            m.forward(&SeqBatch::from_seqs(&[vec![16u32]])),
            Err(NnError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward(&SeqBatch::from_seqs(&[vec![1u32; 17]])),
            Err(NnError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn quantization_perturbs_logits() {
        let dense = PolicyModel::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut q = dense.clone();
        q.quantize_bases(FormatKind::Nvfp4).unwrap();
        let b = SeqBatch::from_seqs(&[(0..20u32).collect::<Vec<_>>()]);
        let diff = (&q.forward(&b).unwrap() - &dense.forward(&b).unwrap()).mapv(f64::abs);
        let m = diff.fold(0.0f64, |a, &b| a.max(b));
        assert!(m > 0.0 && m.is_finite());
        // the dense twin of the quantized model is the same function
        assert_eq!(q.dense_twin().forward(&b).unwrap(), q.forward(&b).unwrap());
    }
}

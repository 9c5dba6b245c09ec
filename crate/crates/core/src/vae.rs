//! Block-structured invariant VAE with hand-derived gradients.
//!
//! Encoder: each feature block goes through its own affine + tanh layer, the
//! block outputs are concatenated, passed through a trunk affine + tanh, then
//! two affine heads give the posterior mean and (clamped) log-variance.
//! Decoder: `[z, c]` through a trunk affine + tanh, then one affine head per
//! block produces Bernoulli logits or Gaussian means for that block's
//! features.
//!
//! The loss is `prior + λ·marginal + (1+λ)·recon`, all means over the batch:
//! - prior: closed-form `KL(N(μ, σ²) ‖ N(0, I))`;
//! - marginal: minibatch-mixture estimate of `KL[q(z|x) ‖ q(z)]`, one sample
//!   per datum, `log q(z_b|x_b) − log (1/B) Σ_b' q(z_b|x_b')`;
//! - recon: summed per-feature negative log-likelihood (BCE from logits, or
//!   `½‖x − x̂‖²`).
//!
//! All parameters live in one flat vector so federated averaging, checkpoints
//! and byte accounting operate on a single buffer.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellRecord, ClientShard};
use crate::error::{Error, Result};
use crate::leverage::FeatureSample;
use crate::matrix::SparseBinaryMatrix;
use crate::seed;

/// Bounds applied to the log-variance head.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Feature means are kept this far from 0 and 1 before taking log-odds.
const MEAN_CLAMP: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

/// Architecture and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    /// Input indices of each block, nonempty and together covering
    /// `0..input_dim` exactly once.
    pub blocks: Vec<Vec<usize>>,
    pub block_hidden: usize,
    pub trunk_hidden: usize,
    pub latent_dim: usize,
    pub confounder_dim: usize,
    pub lambda: f64,
    pub likelihood: Likelihood,
}

impl VaeConfig {
    /// Builds blocks from a feature → block map, dropping empty blocks.
    pub fn from_assignment(
        assignment: &[usize],
        block_hidden: usize,
        trunk_hidden: usize,
        latent_dim: usize,
        confounder_dim: usize,
        lambda: f64,
        likelihood: Likelihood,
    ) -> Result<Self> {
        let n_blocks = assignment.iter().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); n_blocks];
        for (i, &b) in assignment.iter().enumerate() {
            blocks[b].push(i);
        }
        blocks.retain(|b| !b.is_empty());
        let cfg = Self {
            input_dim: assignment.len(),
            blocks,
            block_hidden,
            trunk_hidden,
            latent_dim,
            confounder_dim,
            lambda,
            likelihood,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidVaeConfig(m.into()));
        if self.input_dim == 0 || self.blocks.is_empty() {
            return bad("input_dim and block count must be positive");
        }
        if self.block_hidden == 0 || self.trunk_hidden == 0 || self.latent_dim == 0 {
            return bad("hidden and latent sizes must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative");
        }
        let mut seen = vec![false; self.input_dim];
        for b in &self.blocks {
            if b.is_empty() {
                return bad("empty block");
            }
            for &i in b {
                if i >= self.input_dim || seen[i] {
                    return bad("blocks must partition 0..input_dim");
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("blocks must cover 0..input_dim");
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Assigns each of `d` original features to one of `n_blocks` contiguous
/// ranges, then restricts to `selected` (sorted original indices). The result
/// maps positions in the selected space to block ids.
pub fn contiguous_assignment(d: usize, n_blocks: usize, selected: &[usize]) -> Vec<usize> {
    let n_blocks = n_blocks.max(1);
    selected.iter().map(|&j| j * n_blocks / d.max(1)).collect()
}

/// One affine layer inside the flat parameter vector; weights are
/// `out × in`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn n_params(&self) -> usize {
        self.input * self.output + self.output
    }

    fn forward(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &p[self.w..self.w + self.input * self.output];
        let b = &p[self.b..self.b + self.output];
        for (o, y) in out.iter_mut().enumerate() {
            *y = b[o] + dot(&w[o * self.input..(o + 1) * self.input], x);
        }
    }

    /// `Wᵀ` as an `in × out` view: row-major `W` read column-major.
    fn wt<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&p[self.w..self.w + self.input * self.output], self.input, self.output)
    }

    /// `W X + b` for a batch `X` (`in × B`).
    fn forward_batch(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let w = &p[self.w..self.w + self.input * self.output];
        assert_eq!(x.nrows(), self.input, "layer input width");
        let mut y = DMatrix::zeros(self.output, x.ncols());
        // SAFETY: `w` is `output × input` row-major, `x` is `input × B` and
        // `y` is `output × B`, both column-major; the strides below address
        // exactly those extents.
        unsafe {
            matrixmultiply::dgemm(
                self.output,
                self.input,
                x.ncols(),
                1.0,
                w.as_ptr(),
                self.input as isize,
                1,
                x.as_ptr(),
                1,
                self.input as isize,
                0.0,
                y.as_mut_ptr(),
                1,
                self.output as isize,
            );
        }
        let b = &p[self.b..self.b + self.output];
        for mut col in y.column_iter_mut() {
            for (v, bi) in col.iter_mut().zip(b) {
                *v += bi;
            }
        }
        y
    }

    /// Accumulates `dL/dW = dY Xᵀ` and `dL/db` into `g`; returns `Wᵀ dY`
    /// when `want_dx`.
    fn backward_batch(
        &self,
        p: &[f64],
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        g: &mut [f64],
        want_dx: bool,
    ) -> Option<DMatrix<f64>> {
        let (head, tail) = g.split_at_mut(self.b);
        let mut gwt = DMatrixViewMut::from_slice(
            &mut head[self.w..self.w + self.input * self.output],
            self.input,
            self.output,
        );
        gwt.gemm(1.0, x, &dy.transpose(), 1.0);
        for (gb, row) in tail[..self.output].iter_mut().zip(dy.row_iter()) {
            *gb += row.sum();
        }
        want_dx.then(|| self.wt(p) * dy)
    }

    /// `forward` for an input whose nonzero positions are `nz`.
    fn forward_sparse(&self, p: &[f64], x: &[f64], nz: &[usize], out: &mut [f64]) {
        let w = &p[self.w..self.w + self.input * self.output];
        let b = &p[self.b..self.b + self.output];
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w[o * self.input..(o + 1) * self.input];
            *y = b[o] + nz.iter().map(|&i| row[i] * x[i]).sum::<f64>();
        }
    }

    /// Parameter gradient of `backward_batch` for one sparse input column.
    fn backward_sparse(&self, x: &[f64], nz: &[usize], dy: &[f64], g: &mut [f64]) {
        for (o, &d) in dy.iter().enumerate() {
            g[self.b + o] += d;
            if d != 0.0 {
                let row = &mut g[self.w + o * self.input..self.w + (o + 1) * self.input];
                for &i in nz {
                    row[i] += d * x[i];
                }
            }
        }
    }
}

/// Named layers of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub enc_blocks: Vec<Dense>,
    pub enc_trunk: Dense,
    pub head_mu: Dense,
    pub head_log_var: Dense,
    pub dec_trunk: Dense,
    pub dec_blocks: Vec<Dense>,
    pub n_params: usize,
}

impl Layout {
    pub fn new(cfg: &VaeConfig) -> Self {
        let mut next = 0;
        let mut dense = |input: usize, output: usize| {
            let w = next;
            let b = w + input * output;
            next = b + output;
            Dense { input, output, w, b }
        };
        let enc_blocks = cfg.blocks.iter().map(|b| dense(b.len(), cfg.block_hidden)).collect();
        let enc_trunk = dense(cfg.n_blocks() * cfg.block_hidden, cfg.trunk_hidden);
        let head_mu = dense(cfg.trunk_hidden, cfg.latent_dim);
        let head_log_var = dense(cfg.trunk_hidden, cfg.latent_dim);
        let dec_trunk = dense(cfg.latent_dim + cfg.confounder_dim, cfg.trunk_hidden);
        let dec_blocks = cfg.blocks.iter().map(|b| dense(cfg.trunk_hidden, b.len())).collect();
        Self {
            enc_blocks,
            enc_trunk,
            head_mu,
            head_log_var,
            dec_trunk,
            dec_blocks,
            n_params: next,
        }
    }

    /// `(name, layer)` pairs in storage order.
    pub fn layers(&self) -> Vec<(String, Dense)> {
        let mut out: Vec<(String, Dense)> = self
            .enc_blocks
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("enc_block{i}"), *d))
            .collect();
        out.push(("enc_trunk".into(), self.enc_trunk));
        out.push(("head_mu".into(), self.head_mu));
        out.push(("head_log_var".into(), self.head_log_var));
        out.push(("dec_trunk".into(), self.dec_trunk));
        out.extend(
            self.dec_blocks
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("dec_block{i}"), *d)),
        );
        out
    }

    /// Parameters in the per-feature input and output layers.
    pub fn input_layer_params(&self) -> usize {
        self.enc_blocks
            .iter()
            .chain(&self.dec_blocks)
            .map(Dense::n_params)
            .sum()
    }
}

/// Flat parameter vector (or a gradient with the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub values: Vec<f64>,
}

impl VaeParams {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &VaeParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `z = μ + exp(logσ²/2) ⊙ noise`.
pub fn reparameterize(post: &LatentPosterior, noise: &[f64]) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Encodes confounders as `[standardized log(1+depth)] ++ one-hot(batch)`.
/// Standardization statistics are pooled from per-client moments so raw
/// depths stay with their clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderEncoder {
    pub mean: f64,
    pub std: f64,
    pub n_batches: usize,
}

/// Count, mean and sum of squared deviations of `log(1+depth)` on one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMoments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl DepthMoments {
    pub fn of(depths: impl IntoIterator<Item = u64>) -> Self {
        depths.into_iter().fold(
            DepthMoments {
                n: 0,
                mean: 0.0,
                m2: 0.0,
            },
            |acc, depth| {
                let x = (depth as f64).ln_1p();
                let n = acc.n + 1;
                let delta = x - acc.mean;
                let mean = acc.mean + delta / n as f64;
                DepthMoments {
                    n,
                    mean,
                    m2: acc.m2 + delta * (x - mean),
                }
            },
        )
    }

    /// Chan et al. parallel combination.
    pub fn merge(self, other: DepthMoments) -> DepthMoments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        DepthMoments {
            n,
            mean: self.mean + delta * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64,
        }
    }
}

impl ConfounderEncoder {
    pub fn from_moments(moments: &[DepthMoments], n_batches: usize) -> Self {
        let pooled = moments
            .iter()
            .copied()
            .fold(DepthMoments::of(std::iter::empty()), DepthMoments::merge);
        let var = if pooled.n > 0 { pooled.m2 / pooled.n as f64 } else { 0.0 };
        Self {
            mean: pooled.mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
            n_batches,
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.n_batches
    }

    pub fn encode(&self, depth: u64, batch_id: u32) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        c[0] = ((depth as f64).ln_1p() - self.mean) / self.std;
        if (batch_id as usize) < self.n_batches {
            c[1 + batch_id as usize] = 1.0;
        }
        c
    }
}

/// One datum: input, confounder vector and the standard normal noise used for
/// its latent sample.
#[derive(Debug, Clone, Copy)]
pub struct Datum<'a> {
    pub x: &'a [f64],
    pub c: &'a [f64],
    pub noise: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prior: f64,
    pub marginal: f64,
    pub recon: f64,
}

/// Weights on (prior, marginal, recon) when assembling a gradient.
#[derive(Debug, Clone, Copy)]
struct TermWeights {
    prior: f64,
    marginal: f64,
    recon: f64,
}

impl TermWeights {
    fn total(lambda: f64) -> Self {
        Self {
            prior: 1.0,
            marginal: lambda,
            recon: 1.0 + lambda,
        }
    }
}

/// Minibatch activations; every matrix has one column per datum.
struct BatchForward {
    /// Inputs gathered per block (`|block| × B`) and each column's nonzero rows.
    x_blocks: Vec<DMatrix<f64>>,
    nz: Vec<Vec<Vec<usize>>>,
    enc_h: DMatrix<f64>,
    trunk_h: DMatrix<f64>,
    mu: DMatrix<f64>,
    raw_log_var: DMatrix<f64>,
    log_var: DMatrix<f64>,
    noise: DMatrix<f64>,
    z: DMatrix<f64>,
    dec_in: DMatrix<f64>,
    dec_h: DMatrix<f64>,
    /// Decoder outputs per block (`|block| × B`).
    out: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    layout: Layout,
}

impl Vae {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    pub fn zeros(&self) -> VaeParams {
        VaeParams::zeros(self.n_params())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> VaeParams {
        let mut p = self.zeros();
        for (_, d) in self.layout.layers() {
            let bound = (6.0 / (d.input + d.output) as f64).sqrt();
            for w in &mut p.values[d.w..d.w + d.input * d.output] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Sets the decoder output biases from per-feature data means (log-odds
    /// under the Bernoulli likelihood), so the untrained decoder already
    /// fits the feature marginals.
    pub fn set_output_bias(&self, p: &mut VaeParams, means: &[f64]) -> Result<()> {
        self.check_params(p)?;
        if means.len() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "{} feature means, model has {} inputs",
                means.len(),
                self.cfg.input_dim
            )));
        }
        for (layer, block) in self.layout.dec_blocks.iter().zip(&self.cfg.blocks) {
            for (o, &pos) in block.iter().enumerate() {
                p.values[layer.b + o] = match self.cfg.likelihood {
                    Likelihood::Bernoulli => {
                        let m = means[pos].clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP);
                        (m / (1.0 - m)).ln()
                    }
                    Likelihood::Gaussian => means[pos],
                };
            }
        }
        Ok(())
    }

    fn check_params(&self, p: &VaeParams) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters, model has {}",
                p.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_datum(&self, d: &Datum) -> Result<()> {
        if d.x.len() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "x has length {}, expected {}",
                d.x.len(),
                self.cfg.input_dim
            )));
        }
        if d.c.len() != self.cfg.confounder_dim {
            return Err(Error::Shape(format!(
                "c has length {}, expected {}",
                d.c.len(),
                self.cfg.confounder_dim
            )));
        }
        if d.noise.len() != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "noise has length {}, expected {}",
                d.noise.len(),
                self.cfg.latent_dim
            )));
        }
        Ok(())
    }

    fn encode_cached(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let hb = self.cfg.block_hidden;
        let mut enc_block_h = vec![0.0; self.cfg.n_blocks() * hb];
        let mut gathered = Vec::new();
        let mut nz = Vec::new();
        for (b, (idx, layer)) in self.cfg.blocks.iter().zip(&self.layout.enc_blocks).enumerate() {
            gathered.clear();
            gathered.extend(idx.iter().map(|&i| x[i]));
            nz.clear();
            nz.extend(gathered.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i));
            let out = &mut enc_block_h[b * hb..(b + 1) * hb];
            layer.forward_sparse(p, &gathered, &nz, out);
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        let mut enc_trunk_h = vec![0.0; self.cfg.trunk_hidden];
        self.layout.enc_trunk.forward(p, &enc_block_h, &mut enc_trunk_h);
        enc_trunk_h.iter_mut().for_each(|v| *v = v.tanh());
        let mut mu = vec![0.0; self.cfg.latent_dim];
        let mut raw_log_var = vec![0.0; self.cfg.latent_dim];
        self.layout.head_mu.forward(p, &enc_trunk_h, &mut mu);
        self.layout.head_log_var.forward(p, &enc_trunk_h, &mut raw_log_var);
        (enc_block_h, enc_trunk_h, mu, raw_log_var)
    }

    pub fn encode(&self, p: &VaeParams, x: &[f64]) -> Result<LatentPosterior> {
        self.check_params(p)?;
        if x.len() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "x has length {}, expected {}",
                x.len(),
                self.cfg.input_dim
            )));
        }
        let (_, _, mu, raw) = self.encode_cached(&p.values, x);
        let log_var = raw.iter().map(|v| v.clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)).collect();
        Ok(LatentPosterior { mu, log_var })
    }

    fn decode_cached(&self, p: &[f64], z: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dec_in = Vec::with_capacity(z.len() + c.len());
        dec_in.extend_from_slice(z);
        dec_in.extend_from_slice(c);
        let mut h = vec![0.0; self.cfg.trunk_hidden];
        self.layout.dec_trunk.forward(p, &dec_in, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; self.cfg.input_dim];
        let mut block_out = Vec::new();
        for (idx, layer) in self.cfg.blocks.iter().zip(&self.layout.dec_blocks) {
            block_out.resize(idx.len(), 0.0);
            layer.forward(p, &h, &mut block_out);
            for (&i, &v) in idx.iter().zip(&block_out) {
                out[i] = v;
            }
        }
        (dec_in, h, out)
    }

    /// Per-feature logits (Bernoulli) or means (Gaussian).
    pub fn decode(&self, p: &VaeParams, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.check_params(p)?;
        if z.len() != self.cfg.latent_dim || c.len() != self.cfg.confounder_dim {
            return Err(Error::Shape("z or c has the wrong length".into()));
        }
        Ok(self.decode_cached(&p.values, z, c).2)
    }

    fn forward_batch(&self, p: &[f64], batch: &[Datum]) -> BatchForward {
        let bsz = batch.len();
        let hb = self.cfg.block_hidden;
        let zd = self.cfg.latent_dim;
        let mut enc_h = DMatrix::zeros(self.cfg.n_blocks() * hb, bsz);
        let mut x_blocks = Vec::with_capacity(self.cfg.n_blocks());
        let mut nz = Vec::with_capacity(self.cfg.n_blocks());
        let mut tmp = vec![0.0; hb];
        for (k, (idx, layer)) in self.cfg.blocks.iter().zip(&self.layout.enc_blocks).enumerate() {
            let xk = DMatrix::from_fn(idx.len(), bsz, |r, b| batch[b].x[idx[r]]);
            let nzk: Vec<Vec<usize>> = (0..bsz)
                .map(|b| {
                    column(&xk, b)
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect();
            for (b, nzb) in nzk.iter().enumerate() {
                layer.forward_sparse(p, column(&xk, b), nzb, &mut tmp);
                for (r, v) in tmp.iter().enumerate() {
                    enc_h[(k * hb + r, b)] = v.tanh();
                }
            }
            x_blocks.push(xk);
            nz.push(nzk);
        }
        let trunk_h = self.layout.enc_trunk.forward_batch(p, &enc_h).map(f64::tanh);
        let mu = self.layout.head_mu.forward_batch(p, &trunk_h);
        let raw_log_var = self.layout.head_log_var.forward_batch(p, &trunk_h);
        let log_var = raw_log_var.map(|v| v.clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1));
        let noise = DMatrix::from_fn(zd, bsz, |k, b| batch[b].noise[k]);
        let z = DMatrix::from_fn(zd, bsz, |k, b| {
            mu[(k, b)] + (0.5 * log_var[(k, b)]).exp() * noise[(k, b)]
        });
        let dec_in = DMatrix::from_fn(zd + self.cfg.confounder_dim, bsz, |r, b| {
            if r < zd {
                z[(r, b)]
            } else {
                batch[b].c[r - zd]
            }
        });
        let dec_h = self.layout.dec_trunk.forward_batch(p, &dec_in).map(f64::tanh);
        let out = self
            .layout
            .dec_blocks
            .iter()
            .map(|layer| layer.forward_batch(p, &dec_h))
            .collect();
        BatchForward {
            x_blocks,
            nz,
            enc_h,
            trunk_h,
            mu,
            raw_log_var,
            log_var,
            noise,
            z,
            dec_in,
            dec_h,
            out,
        }
    }

    fn check_batch(&self, p: &VaeParams, batch: &[Datum], lambda: f64) -> Result<()> {
        self.check_params(p)?;
        if batch.is_empty() || (lambda > 0.0 && batch.len() < 2) {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        batch.iter().try_for_each(|d| self.check_datum(d))
    }

    pub fn loss(&self, p: &VaeParams, batch: &[Datum], lambda: f64) -> Result<LossBreakdown> {
        self.check_batch(p, batch, lambda)?;
        let fwd = self.forward_batch(&p.values, batch);
        Ok(self.terms(&fwd, lambda))
    }

    fn terms(&self, f: &BatchForward, lambda: f64) -> LossBreakdown {
        let bsz = f.z.ncols();
        let zd = self.cfg.latent_dim;
        let prior = (0..bsz)
            .map(|b| kl_standard_normal(column(&f.mu, b), column(&f.log_var, b)))
            .sum::<f64>()
            / bsz as f64;
        let recon = f
            .x_blocks
            .iter()
            .zip(&f.out)
            .map(|(x, o)| match self.cfg.likelihood {
                Likelihood::Bernoulli => x
                    .iter()
                    .zip(o.iter())
                    .map(|(&xi, &l)| softplus(l) - xi * l)
                    .sum::<f64>(),
                Likelihood::Gaussian => 0.5 * x.iter().zip(o.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            })
            .sum::<f64>()
            / bsz as f64;
        let marginal = if bsz >= 2 {
            marginal_terms(&f.z, &f.mu, &f.log_var, zd).0
        } else {
            0.0
        };
        LossBreakdown {
            total: prior + lambda * marginal + (1.0 + lambda) * recon,
            prior,
            marginal,
            recon,
        }
    }

    /// Loss and exact gradient of the total under the batch's fixed noise.
    pub fn loss_and_grad(&self, p: &VaeParams, batch: &[Datum], lambda: f64) -> Result<(LossBreakdown, VaeParams)> {
        self.check_batch(p, batch, lambda)?;
        let fwd = self.forward_batch(&p.values, batch);
        let loss = self.terms(&fwd, lambda);
        let grad = self.backward(&p.values, &fwd, TermWeights::total(lambda));
        Ok((loss, grad))
    }

    /// Gradients of the prior, marginal and reconstruction terms separately.
    pub fn term_grads(&self, p: &VaeParams, batch: &[Datum]) -> Result<[VaeParams; 3]> {
        self.check_batch(p, batch, 1.0)?;
        let fwd = self.forward_batch(&p.values, batch);
        let one = |prior, marginal, recon| self.backward(&p.values, &fwd, TermWeights { prior, marginal, recon });
        Ok([one(1.0, 0.0, 0.0), one(0.0, 1.0, 0.0), one(0.0, 0.0, 1.0)])
    }

    fn backward(&self, p: &[f64], f: &BatchForward, w: TermWeights) -> VaeParams {
        let bsz = f.z.ncols();
        let bf = bsz as f64;
        let zd = self.cfg.latent_dim;
        let hb = self.cfg.block_hidden;
        let mut g = vec![0.0; self.n_params()];

        // Gradients w.r.t. μ, clamped logσ² and z from prior and marginal.
        let mut d_mu = DMatrix::zeros(zd, bsz);
        let mut d_lv = DMatrix::zeros(zd, bsz);
        let mut d_z = DMatrix::zeros(zd, bsz);
        if w.prior != 0.0 {
            d_mu += &f.mu * (w.prior / bf);
            d_lv += f.log_var.map(|lv| 0.5 * (lv.exp() - 1.0)) * (w.prior / bf);
        }
        if w.marginal != 0.0 && bsz >= 2 {
            let (_, mix) = marginal_terms(&f.z, &f.mu, &f.log_var, zd);
            let scale = w.marginal / bf;
            for b in 0..bsz {
                // d/d log N(z_b; μ_b', σ²_b') carries +1 for b' = b and
                // −(softmax weight) for every b'.
                for bp in 0..bsz {
                    let coef = scale * (f64::from(u8::from(bp == b)) - mix[b][bp]);
                    if coef == 0.0 {
                        continue;
                    }
                    for k in 0..zd {
                        let inv_var = (-f.log_var[(k, bp)]).exp();
                        let diff = f.z[(k, b)] - f.mu[(k, bp)];
                        d_z[(k, b)] -= coef * diff * inv_var;
                        d_mu[(k, bp)] += coef * diff * inv_var;
                        d_lv[(k, bp)] += coef * (-0.5 + 0.5 * diff * diff * inv_var);
                    }
                }
            }
        }
        if w.recon != 0.0 {
            let rs = w.recon / bf;
            let mut d_h = DMatrix::zeros(self.cfg.trunk_hidden, bsz);
            for ((x, o), layer) in f.x_blocks.iter().zip(&f.out).zip(&self.layout.dec_blocks) {
                let d_out = match self.cfg.likelihood {
                    Likelihood::Bernoulli => o.zip_map(x, |l, xi| rs * (sigmoid(l) - xi)),
                    Likelihood::Gaussian => o.zip_map(x, |m, xi| rs * (m - xi)),
                };
                d_h += layer
                    .backward_batch(p, &f.dec_h, &d_out, &mut g, true)
                    .expect("dx requested");
            }
            d_h.zip_apply(&f.dec_h, |d, h| *d *= 1.0 - h * h);
            let d_in = self
                .layout
                .dec_trunk
                .backward_batch(p, &f.dec_in, &d_h, &mut g, true)
                .expect("dx requested");
            d_z += d_in.rows(0, zd);
        }

        // z = μ + exp(lv/2)·ε; the clamp passes gradient only strictly inside its bounds.
        let d_mu = d_mu + &d_z;
        for b in 0..bsz {
            for k in 0..zd {
                let raw = f.raw_log_var[(k, b)];
                d_lv[(k, b)] = if raw <= LOG_VAR_CLAMP.0 || raw >= LOG_VAR_CLAMP.1 {
                    0.0
                } else {
                    d_lv[(k, b)] + d_z[(k, b)] * 0.5 * (0.5 * f.log_var[(k, b)]).exp() * f.noise[(k, b)]
                };
            }
        }
        if d_mu.iter().chain(d_lv.iter()).all(|v| *v == 0.0) {
            return VaeParams { values: g };
        }

        let mut d_t = self
            .layout
            .head_mu
            .backward_batch(p, &f.trunk_h, &d_mu, &mut g, true)
            .expect("dx requested");
        d_t += self
            .layout
            .head_log_var
            .backward_batch(p, &f.trunk_h, &d_lv, &mut g, true)
            .expect("dx requested");
        d_t.zip_apply(&f.trunk_h, |d, h| *d *= 1.0 - h * h);
        let mut d_e = self
            .layout
            .enc_trunk
            .backward_batch(p, &f.enc_h, &d_t, &mut g, true)
            .expect("dx requested");
        d_e.zip_apply(&f.enc_h, |d, h| *d *= 1.0 - h * h);
        for (k, layer) in self.layout.enc_blocks.iter().enumerate() {
            for b in 0..bsz {
                let dy = &column(&d_e, b)[k * hb..(k + 1) * hb];
                layer.backward_sparse(column(&f.x_blocks[k], b), &f.nz[k][b], dy, &mut g);
            }
        }
        VaeParams { values: g }
    }

    pub fn save_checkpoint<W: Write>(&self, p: &VaeParams, mut w: W) -> Result<()> {
        self.check_params(p)?;
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            n_params: p.len(),
            layers: self
                .layout
                .layers()
                .into_iter()
                .map(|(name, d)| LayerShape {
                    name,
                    rows: d.output,
                    cols: d.input,
                })
                .collect(),
            config: self.cfg.clone(),
        };
        let io = |e| Error::io("<checkpoint>", e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for v in &p.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub const CHECKPOINT_FORMAT: &str = "levfed-vae-params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON line preceding the little-endian `f64` payload of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub n_params: usize,
    pub layers: Vec<LayerShape>,
    pub config: VaeConfig,
}

// A header longer than this is rejected before JSON parsing.
const MAX_HEADER: usize = 64 << 20;

/// Reads a checkpoint: one JSON header line, then `n_params` little-endian
/// `f64` values and nothing else.
pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(Vae, VaeParams)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.config.input_dim > 1 << 26 || header.config.blocks.len() > 1 << 20 {
        return Err(bad("implausible model size".into()));
    }
    let vae = Vae::new(header.config.clone()).map_err(|e| bad(e.to_string()))?;
    let expected: Vec<LayerShape> = vae
        .layout
        .layers()
        .into_iter()
        .map(|(name, d)| LayerShape {
            name,
            rows: d.output,
            cols: d.input,
        })
        .collect();
    if header.layers != expected || header.n_params != vae.n_params() {
        return Err(bad("layer shapes disagree with config".into()));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.n_params * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.n_params * 8
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((vae, VaeParams { values }))
}

/// Dot product with eight independent partial sums (fixed order, so results
/// are reproducible) to let the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, ra) = (a.chunks_exact(8), a.chunks_exact(8).remainder());
    let cb = b.chunks_exact(8);
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `½ Σ (σ² + μ² − 1 − logσ²)`.
pub fn kl_standard_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

fn log_normal(z: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((z, m), lv)| -0.5 * (LN_2PI + lv + (z - m) * (z - m) * (-lv).exp()))
        .sum()
}

/// Column `b` of a column-major matrix.
fn column(m: &DMatrix<f64>, b: usize) -> &[f64] {
    let r = m.nrows();
    &m.as_slice()[b * r..(b + 1) * r]
}

/// Mean marginal-KL estimate over the batch and, per datum `b`, the softmax
/// weights of the mixture components `b'` evaluated at `z_b`.
fn marginal_terms(z: &DMatrix<f64>, mu: &DMatrix<f64>, log_var: &DMatrix<f64>, zd: usize) -> (f64, Vec<Vec<f64>>) {
    debug_assert_eq!(z.nrows(), zd);
    let bsz = z.ncols();
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let zb = column(z, b);
        let logs: Vec<f64> = (0..bsz)
            .map(|bp| log_normal(zb, column(mu, bp), column(log_var, bp)))
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        total += logs[b] - (lse - (bsz as f64).ln());
        weights.push(logs.iter().map(|l| (l - lse).exp()).collect());
    }
    (total / bsz as f64, weights)
}

/// A client shard restricted to the selected features, with confounder
/// vectors and per-cell noise keys. Rows stay sparse and are densified per
/// minibatch.
#[derive(Debug, Clone)]
pub struct TrainingShard {
    pub client_id: u32,
    matrix: SparseBinaryMatrix,
    /// Per-position input scale (`1/√(s·p_j)` rescaling) or `None` for raw
    /// binary columns.
    scale: Option<Vec<f64>>,
    confounders: Vec<Vec<f64>>,
    noise_keys: Vec<u64>,
    labels: Vec<u32>,
    cell_ids: Vec<String>,
}

impl TrainingShard {
    pub fn new(
        shard: &ClientShard,
        sample: &FeatureSample,
        rescale_inputs: bool,
        encoder: &ConfounderEncoder,
    ) -> Result<Self> {
        if shard.n_i() == 0 {
            return Err(Error::EmptyShard);
        }
        if sample.d() != shard.n_cols() {
            return Err(Error::Shape(format!(
                "sample over {} features, shard has {}",
                sample.d(),
                shard.n_cols()
            )));
        }
        Ok(Self {
            client_id: shard.client_id(),
            matrix: shard.matrix().select_columns(&sample.selected)?,
            scale: rescale_inputs.then(|| sample.scale.clone()),
            confounders: shard
                .cells()
                .iter()
                .map(|c| encoder.encode(c.depth, c.batch_id))
                .collect(),
            noise_keys: shard.cells().iter().map(CellRecord::noise_key).collect(),
            labels: shard.labels(),
            cell_ids: shard.cells().iter().map(|c| c.cell_id.clone()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.n_cols()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn confounder(&self, i: usize) -> &[f64] {
        &self.confounders[i]
    }

    /// Per-feature sums of the (possibly rescaled) inputs over all cells.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.input_dim()];
        for i in 0..self.n() {
            for &c in self.matrix.row(i) {
                sums[c as usize] += self.scale.as_ref().map_or(1.0, |s| s[c as usize]);
            }
        }
        sums
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.input_dim()];
        self.matrix.densify_row_into(i, self.scale.as_deref(), &mut x);
        x
    }

    /// Standard normal latent noise for cell `i` at local step `step`.
    pub fn noise(&self, seed: u64, step: usize, i: usize, latent_dim: usize) -> Vec<f64> {
        let mut rng = seed::rng(seed, &[seed::stream::NOISE, step as u64, self.noise_keys[i]]);
        (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Settings for one call of [`local_train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Accumulated update `W_K − W_0`.
    pub delta: VaeParams,
    /// `W_0 + delta`.
    pub params: VaeParams,
    /// Loss on the last minibatch, before its update.
    pub final_loss: LossBreakdown,
}

/// Minibatch schedule: a seeded permutation of the shard, cut into
/// consecutive batches of `batch_size` (a trailing partial batch is dropped
/// unless the shard is smaller than one batch), reshuffled with a fresh
/// permutation at every epoch boundary. When one batch covers the whole
/// shard every step is the full shard in row order.
pub fn minibatch_schedule(n: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    if batch_size >= n {
        return vec![(0..n).collect(); steps];
    }
    let bs = batch_size.max(1);
    let per_epoch = (n / bs).max(1);
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seed::rng(seed, &[seed::stream::LOCAL, epoch]));
        for b in 0..per_epoch {
            if out.len() == steps {
                break;
            }
            out.push(perm[b * bs..(b + 1) * bs].to_vec());
        }
        epoch += 1;
    }
    out
}

/// `K` plain SGD steps from `start` on one shard. The update is accumulated
/// as a delta and the iterate is evaluated at `start + delta`, so the
/// returned parameters are exactly `start + delta`.
pub fn local_train(
    vae: &Vae,
    start: &VaeParams,
    shard: &TrainingShard,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<LocalOutcome> {
    if cfg.steps == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidFedConfig(
            "local steps must be ≥ 1 and lr finite and ≥ 0".into(),
        ));
    }
    if shard.n() == 0 {
        return Err(Error::EmptyShard);
    }
    if shard.input_dim() != vae.config().input_dim {
        return Err(Error::Shape(format!(
            "shard has {} inputs, model expects {}",
            shard.input_dim(),
            vae.config().input_dim
        )));
    }
    let zd = vae.config().latent_dim;
    let mut delta = vae.zeros();
    let mut current = start.clone();
    let mut final_loss = LossBreakdown::default();
    for (step, batch) in minibatch_schedule(shard.n(), cfg.batch_size, cfg.steps, seed)
        .into_iter()
        .enumerate()
    {
        let xs: Vec<Vec<f64>> = batch.iter().map(|&i| shard.input(i)).collect();
        let noise: Vec<Vec<f64>> = batch.iter().map(|&i| shard.noise(seed, step, i, zd)).collect();
        let data: Vec<Datum> = batch
            .iter()
            .enumerate()
            .map(|(b, &i)| Datum {
                x: &xs[b],
                c: shard.confounder(i),
                noise: &noise[b],
            })
            .collect();
        let (loss, grad) = vae.loss_and_grad(&current, &data, cfg.lambda)?;
        final_loss = loss;
        for ((d, g), (c, s)) in delta
            .values
            .iter_mut()
            .zip(&grad.values)
            .zip(current.values.iter_mut().zip(&start.values))
        {
            *d -= cfg.lr * g;
            *c = s + *d;
        }
    }
    Ok(LocalOutcome {
        delta,
        params: current,
        final_loss,
    })
}

/// Posterior means for every cell of a shard.
pub fn embed(vae: &Vae, params: &VaeParams, shard: &TrainingShard) -> Result<Vec<Vec<f64>>> {
    (0..shard.n())
        .map(|i| vae.encode(params, &shard.input(i)).map(|p| p.mu))
        .collect()
}

/// Writes `cell_id,z_1..z_dim` rows.
pub fn write_embeddings<W: Write>(ids: &[String], z: &[Vec<f64>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = z.first().map_or(0, Vec::len);
    let mut header = vec!["cell_id".to_string()];
    header.extend((1..=dim).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(z) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))
}

/// Parses an embeddings CSV written by [`write_embeddings`].
pub fn read_embeddings<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    let well_formed =
        headers.get(0) == Some("cell_id") && (1..=dim).all(|k| headers.get(k) == Some(format!("z_{k}").as_str()));
    if !well_formed {
        return Err(Error::Shape("embedding header must be cell_id,z_1..z_k".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = (1..=dim)
            .map(|k| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| Error::Shape(format!("row {}: {e}", ids.len())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(likelihood: Likelihood) -> Vae {
        let cfg = VaeConfig::from_assignment(&[0, 0, 1, 1, 1, 2], 3, 4, 2, 2, 1.0, likelihood).unwrap();
        Vae::new(cfg).unwrap()
    }

    #[test]
    fn zero_network_gives_standard_posterior_and_half_probabilities() {
        let vae = tiny(Likelihood::Bernoulli);
        let p = vae.zeros();
        let post = vae.encode(&p, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(post.mu, vec![0.0, 0.0]);
        assert_eq!(post.log_var, vec![0.0, 0.0]);
        let logits = vae.decode(&p, &[0.3, -1.0], &[1.0, 0.0]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0 && sigmoid(l) == 0.5));
    }

    #[test]
    fn zero_input_with_zero_biases_encodes_to_zero() {
        let vae = tiny(Likelihood::Gaussian);
        let mut p = vae.init(&mut ChaCha8Rng::seed_from_u64(1));
        for (_, d) in vae.layout().layers() {
            p.values[d.b..d.b + d.output].iter_mut().for_each(|v| *v = 0.0);
        }
        let post = vae.encode(&p, &[0.0; 6]).unwrap();
        assert!(post.mu.iter().chain(&post.log_var).all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let vae = tiny(Likelihood::Bernoulli);
        let p = vae.zeros();
        assert!(matches!(vae.encode(&p, &[0.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(vae.decode(&p, &[0.0; 2], &[0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            vae.encode(&VaeParams::zeros(3), &[0.0; 6]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hand_computed_one_block_forward() {
        // One block of 2 inputs; h_b = 2, h_t = 2, z = 1, c = 1.
        let cfg = VaeConfig::from_assignment(&[0, 0], 2, 2, 1, 1, 0.0, Likelihood::Gaussian).unwrap();
        let vae = Vae::new(cfg).unwrap();
        let l = vae.layout().clone();
        let mut p = vae.zeros();
        let set = |p: &mut VaeParams, d: Dense, w: &[f64], b: &[f64]| {
            p.values[d.w..d.w + w.len()].copy_from_slice(w);
            p.values[d.b..d.b + b.len()].copy_from_slice(b);
        };
        set(&mut p, l.enc_blocks[0], &[0.5, -0.25, 0.1, 0.2], &[0.1, -0.1]);
        set(&mut p, l.enc_trunk, &[1.0, 0.5, -0.5, 2.0], &[0.0, 0.3]);
        set(&mut p, l.head_mu, &[0.7, -0.2], &[0.05]);
        set(&mut p, l.head_log_var, &[0.1, 0.1], &[-0.5]);
        set(&mut p, l.dec_trunk, &[1.5, -1.0, 0.25, 0.75], &[0.0, 0.1]);
        set(&mut p, l.dec_blocks[0], &[0.3, 0.6, -0.4, 0.9], &[0.2, -0.2]);

        let x = [1.0, 2.0];
        let h1 = [
            (0.5 * 1.0 - 0.25 * 2.0 + 0.1f64).tanh(),
            (0.1 * 1.0 + 0.2 * 2.0 - 0.1f64).tanh(),
        ];
        let h2 = [
            (1.0 * h1[0] + 0.5 * h1[1]).tanh(),
            (-0.5 * h1[0] + 2.0 * h1[1] + 0.3f64).tanh(),
        ];
        let mu = 0.7 * h2[0] - 0.2 * h2[1] + 0.05;
        let lv = 0.1 * h2[0] + 0.1 * h2[1] - 0.5;
        let post = vae.encode(&p, &x).unwrap();
        assert!((post.mu[0] - mu).abs() < 1e-12);
        assert!((post.log_var[0] - lv).abs() < 1e-12);

        let (z, c): (f64, f64) = (0.4, -1.2);
        let g = [(1.5 * z - 1.0 * c).tanh(), (0.25 * z + 0.75 * c + 0.1f64).tanh()];
        let out = [0.3 * g[0] + 0.6 * g[1] + 0.2, -0.4 * g[0] + 0.9 * g[1] - 0.2];
        let dec = vae.decode(&p, &[z], &[c]).unwrap();
        assert!((dec[0] - out[0]).abs() < 1e-12 && (dec[1] - out[1]).abs() < 1e-12);
    }

    #[test]
    fn decoder_depends_on_c_only_through_trunk_weights() {
        let vae = tiny(Likelihood::Bernoulli);
        let mut p = vae.init(&mut ChaCha8Rng::seed_from_u64(4));
        let z = [0.2, -0.3];
        let a = vae.decode(&p, &z, &[1.0, 0.0]).unwrap();
        let b = vae.decode(&p, &z, &[0.0, 1.0]).unwrap();
        assert_ne!(a, b);
        let dt = vae.layout().dec_trunk;
        for o in 0..dt.output {
            for i in 2..4 {
                p.values[dt.w + o * dt.input + i] = 0.0;
            }
        }
        let a = vae.decode(&p, &z, &[1.0, 0.0]).unwrap();
        let b = vae.decode(&p, &z, &[0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_cases() {
        let post = LatentPosterior {
            mu: vec![1.0, -2.0],
            log_var: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&post, &[0.0, 0.0]), post.mu);
        assert_eq!(reparameterize(&post, &[1.0, 0.0]), vec![2.0, -2.0]);
    }

    #[test]
    fn reparameterized_moments() {
        let post = LatentPosterior {
            mu: vec![0.5, -1.0],
            log_var: vec![0.8f64.ln(), 2.0f64.ln()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let e = [
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ];
            let z = reparameterize(&post, &e);
            for k in 0..2 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for (k, var) in [0.8, 2.0].into_iter().enumerate() {
            let mean = sum[k] / n as f64;
            let sample_var = sq[k] / n as f64 - mean * mean;
            assert!((mean - post.mu[k]).abs() <= 3.0 * (var / n as f64).sqrt());
            // Var of the sample variance of a normal: 2σ⁴/n.
            assert!((sample_var - var).abs() <= 3.0 * (2.0 * var * var / n as f64).sqrt());
        }
    }

    #[test]
    fn prior_zero_at_standard_normal_and_lambda_zero_collapse() {
        assert_eq!(kl_standard_normal(&[0.0; 3], &[0.0; 3]), 0.0);
        let vae = tiny(Likelihood::Bernoulli);
        let p = vae.init(&mut ChaCha8Rng::seed_from_u64(8));
        let xs = [[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 1.0, 0.0, 0.0]];
        let cs = [[0.5, 1.0], [-0.5, 0.0]];
        let es = [[0.3, -0.7], [1.1, 0.2]];
        let batch: Vec<Datum> = (0..2)
            .map(|i| Datum {
                x: &xs[i],
                c: &cs[i],
                noise: &es[i],
            })
            .collect();
        let l = vae.loss(&p, &batch, 0.0).unwrap();
        assert_eq!(l.total, l.prior + l.recon);
        assert!(l.prior >= 0.0);
        assert!(matches!(vae.loss(&p, &batch[..1], 1.0), Err(Error::BatchTooSmall(1))));
        assert!(vae.loss(&p, &batch[..1], 0.0).is_ok());
    }

    #[test]
    fn gaussian_recon_gradient_vanishes_at_zero() {
        let vae = tiny(Likelihood::Gaussian);
        let p = vae.zeros();
        let x = [0.0; 6];
        let c = [0.0; 2];
        let e = [0.4, -0.1];
        let batch = [
            Datum {
                x: &x,
                c: &c,
                noise: &e,
            },
            Datum {
                x: &x,
                c: &c,
                noise: &e,
            },
        ];
        let [_, _, recon] = vae.term_grads(&p, &batch).unwrap();
        assert!(recon.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confounder_encoding() {
        let a = DepthMoments::of([10, 20, 30]);
        let b = DepthMoments::of([40, 50]);
        let all = DepthMoments::of([10, 20, 30, 40, 50]);
        let merged = a.merge(b);
        assert_eq!(merged.n, 5);
        assert!((merged.mean - all.mean).abs() < 1e-12);
        assert!((merged.m2 - all.m2).abs() < 1e-12);
        let enc = ConfounderEncoder::from_moments(&[a, b], 3);
        let c = enc.encode(20, 2);
        assert_eq!(c.len(), 4);
        assert_eq!(&c[1..], &[0.0, 0.0, 1.0]);
        assert_eq!(c[1..].iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn contiguous_assignment_drops_empty_blocks() {
        let a = contiguous_assignment(100, 10, &[0, 5, 55, 99]);
        assert_eq!(a, vec![0, 0, 5, 9]);
        let cfg = VaeConfig::from_assignment(&a, 2, 2, 1, 1, 1.0, Likelihood::Bernoulli).unwrap();
        assert_eq!(cfg.n_blocks(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejection() {
        let vae = tiny(Likelihood::Bernoulli);
        let p = vae.init(&mut ChaCha8Rng::seed_from_u64(3));
        let mut buf = Vec::new();
        vae.save_checkpoint(&p, &mut buf).unwrap();
        let (vae2, p2) = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(vae2.config(), vae.config());
        assert_eq!(p2, p);
        buf.pop();
        assert!(matches!(load_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&b"{}\n"[..]).is_err());
        assert!(load_checkpoint(&b"no newline"[..]).is_err());
    }

    fn toy_shard(n: usize, d: usize, client: u32) -> ClientShard {
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| (0..d as u32).filter(|j| (i as u32 + j).is_multiple_of(3)).collect())
            .collect();
        let m = SparseBinaryMatrix::from_rows(d, rows).unwrap();
        let cells = (0..n)
            .map(|i| CellRecord {
                cell_id: format!("c{client}_{i}"),
                label: (i % 2) as u32,
                batch_id: client,
                depth: 10 + i as u64,
            })
            .collect();
        ClientShard::new(m, cells).unwrap()
    }

    fn toy_setup() -> (Vae, TrainingShard, VaeParams) {
        let shard = toy_shard(8, 6, 0);
        let sample = FeatureSample::exhaustive(vec![1.0; 6]).unwrap();
        let enc = ConfounderEncoder::from_moments(&[DepthMoments::of(shard.cells().iter().map(|c| c.depth))], 1);
        let ts = TrainingShard::new(&shard, &sample, false, &enc).unwrap();
        let vae = Vae::new(
            VaeConfig::from_assignment(&[0, 0, 0, 1, 1, 1], 3, 4, 2, enc.dim(), 1.0, Likelihood::Bernoulli).unwrap(),
        )
        .unwrap();
        let p = vae.init(&mut ChaCha8Rng::seed_from_u64(2));
        (vae, ts, p)
    }

    #[test]
    fn one_full_batch_step_is_gradient_descent() {
        let (vae, ts, p) = toy_setup();
        let cfg = LocalTrainConfig {
            steps: 1,
            lr: 0.05,
            batch_size: 8,
            lambda: 1.0,
        };
        let out = local_train(&vae, &p, &ts, &cfg, 17).unwrap();
        let batch = &minibatch_schedule(8, 8, 1, 17)[0];
        let xs: Vec<Vec<f64>> = batch.iter().map(|&i| ts.input(i)).collect();
        let es: Vec<Vec<f64>> = batch.iter().map(|&i| ts.noise(17, 0, i, 2)).collect();
        let data: Vec<Datum> = (0..8)
            .map(|b| Datum {
                x: &xs[b],
                c: ts.confounder(batch[b]),
                noise: &es[b],
            })
            .collect();
        let (_, g) = vae.loss_and_grad(&p, &data, 1.0).unwrap();
        for i in 0..p.len() {
            assert_eq!(out.params.values[i], p.values[i] + (0.0 - 0.05 * g.values[i]));
        }
    }

    #[test]
    fn zero_lr_and_determinism() {
        let (vae, ts, p) = toy_setup();
        let cfg = LocalTrainConfig {
            steps: 5,
            lr: 0.0,
            batch_size: 3,
            lambda: 1.0,
        };
        assert_eq!(local_train(&vae, &p, &ts, &cfg, 1).unwrap().params, p);
        let cfg = LocalTrainConfig { lr: 0.1, ..cfg };
        let a = local_train(&vae, &p, &ts, &cfg, 9).unwrap();
        let b = local_train(&vae, &p, &ts, &cfg, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, p);
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let sched = minibatch_schedule(10, 4, 5, 3);
        assert_eq!(sched.len(), 5);
        let mut first_epoch: Vec<usize> = sched[..2].concat();
        first_epoch.sort_unstable();
        first_epoch.dedup();
        assert_eq!(first_epoch.len(), 8);
        assert!(sched.iter().all(|b| b.len() == 4));
        assert_eq!(minibatch_schedule(3, 8, 2, 0), vec![vec![0, 1, 2]; 2]);
    }

    #[test]
    fn embeddings_roundtrip() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let z = vec![vec![0.5, -1.25e-7], vec![3.0, 0.1]];
        let mut buf = Vec::new();
        write_embeddings(&ids, &z, &mut buf).unwrap();
        let (ids2, z2) = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!((ids2, z2), (ids, z));
        assert!(read_embeddings(&b"id,z_1\na,1\n"[..]).is_err());
    }
}

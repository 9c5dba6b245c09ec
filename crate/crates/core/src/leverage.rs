//! Column leverage scores, federated score aggregation, weighted sampling
//! without replacement and subspace-embedding checks.
//!
//! The column leverage score of feature `j` is `a_jᵀ (A Aᵀ)† a_j`, the squared
//! norm of row `j` of the right singular vectors of `A`. Scores sum to
//! `rank(A)`. The randomized path sketches `B = ΩA` with a Gaussian `Ω` and
//! reads scores off an orthonormal basis of `col(Bᵀ)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SparseBinaryMatrix;
use crate::seed;

/// Singular values below `RANK_TOL · σ_max` count as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeverageMode {
    Exact,
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageScores {
    pub scores: Vec<f64>,
    pub mode: LeverageMode,
    pub sketch_size: Option<usize>,
    /// Numerical rank of the basis the scores were read from.
    pub rank_estimate: usize,
}

impl LeverageScores {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Orthonormal basis of `row(A)`, truncated at [`RANK_TOL`].
#[derive(Debug, Clone)]
pub struct RowSpace {
    /// `d × r`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl RowSpace {
    pub fn of(a: &DMatrix<f64>) -> Result<Self> {
        if a.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroMatrix);
        }
        let (basis, singular_values) = range_basis(a.transpose())?;
        Ok(Self { basis, singular_values })
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Squared row norms of the basis.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        self.basis.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }
}

/// Exact scores via a thin SVD. Desk scale only.
pub fn exact_column_leverage(a: &DMatrix<f64>) -> Result<LeverageScores> {
    let rs = RowSpace::of(a)?;
    Ok(LeverageScores {
        scores: rs.row_norms_sq(),
        mode: LeverageMode::Exact,
        sketch_size: None,
        rank_estimate: rs.rank(),
    })
}

/// Inputs that can be sketched from the left by a Gaussian matrix.
pub trait Sketchable {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    /// Returns `Aᵀ Ωᵀ` (`d × s_k`) given `Ωᵀ` (`n × s_k`).
    fn sketch_transpose(&self, omega_t: &DMatrix<f64>) -> DMatrix<f64>;
}

impl Sketchable for DMatrix<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_cols(&self) -> usize {
        self.ncols()
    }

    fn sketch_transpose(&self, omega_t: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(omega_t)
    }
}

impl Sketchable for SparseBinaryMatrix {
    fn n_rows(&self) -> usize {
        SparseBinaryMatrix::n_rows(self)
    }

    fn n_cols(&self) -> usize {
        SparseBinaryMatrix::n_cols(self)
    }

    fn sketch_transpose(&self, omega_t: &DMatrix<f64>) -> DMatrix<f64> {
        let s_k = omega_t.ncols();
        // Accumulate row-major, then hand nalgebra its column-major layout.
        let mut acc = vec![0.0; self.n_cols() * s_k];
        for (i, row) in self.rows().enumerate() {
            let om = omega_t.row(i);
            for &j in row {
                let dst = &mut acc[j as usize * s_k..(j as usize + 1) * s_k];
                for (d, o) in dst.iter_mut().zip(om.iter()) {
                    *d += o;
                }
            }
        }
        DMatrix::from_row_slice(self.n_cols(), s_k, &acc)
    }
}

/// Randomized scores: `B = ΩA` with standard Gaussian `Ω` (`s_k × n`), thin QR
/// `Bᵀ = QR`, score `j` = ‖row j of Q‖². Directions of `Q` that `R` shows to
/// be numerically null are dropped, so a sketch larger than `rank(A)` yields a
/// basis of `row(A)` rather than padding it with arbitrary directions.
pub fn approx_column_leverage<A: Sketchable + ?Sized>(a: &A, sketch_size: usize, seed: u64) -> Result<LeverageScores> {
    let n = a.n_rows();
    if sketch_size == 0 || sketch_size > n {
        return Err(Error::SketchSize {
            sketch: sketch_size,
            max: n,
        });
    }
    let mut rng = seed::rng(seed, &[]);
    let omega_t = DMatrix::from_fn(n, sketch_size, |_, _| rng.sample::<f64, _>(StandardNormal));
    let bt = a.sketch_transpose(&omega_t);
    let basis = orthonormal_range(bt)?;
    let scores = basis.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    Ok(LeverageScores {
        scores,
        mode: LeverageMode::Randomized,
        sketch_size: Some(sketch_size),
        rank_estimate: basis.ncols(),
    })
}

/// Orthonormal basis for the column space of `m` (`d × k`).
fn orthonormal_range(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    range_basis(m).map(|(basis, _)| basis)
}

/// Column-pivoted QR of `m`, truncated to the numerical rank, plus the
/// singular values above the cut in decreasing order. Singular vectors are
/// never formed: nalgebra's are inaccurate on rank-deficient inputs.
fn range_basis(m: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let qr = m.col_piv_qr();
    let sv = qr.r().singular_values();
    let sigma_max = sv.max();
    let kept: Vec<f64> = sv.iter().copied().filter(|&s| s > RANK_TOL * sigma_max).collect();
    let basis = qr.q().columns(0, kept.len()).into_owned();
    Ok((basis, kept))
}

/// Server-side aggregation: weighted mean of client scores with weights
/// `n_i / n`, normalized into a probability vector. Summation runs in the
/// order given.
pub fn aggregate_scores<S: AsRef<[f64]>>(per_client: &[(S, usize)]) -> Result<Vec<f64>> {
    let Some((first, _)) = per_client.first() else {
        return Err(Error::ZeroScoreMass);
    };
    let d = first.as_ref().len();
    let n: usize = per_client.iter().map(|(_, n_i)| n_i).sum();
    let mut global = vec![0.0; d];
    for (scores, n_i) in per_client {
        let scores = scores.as_ref();
        if scores.len() != d {
            return Err(Error::ScoreLength {
                expected: d,
                got: scores.len(),
            });
        }
        if *n_i == 0 {
            return Err(Error::EmptyShard);
        }
        let w = *n_i as f64 / n as f64;
        for (g, s) in global.iter_mut().zip(scores) {
            *g += w * s;
        }
    }
    normalize(global)
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidProbabilities(format!("entry {bad}")));
    }
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroScoreMass);
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

/// A selected feature set with the distribution it was drawn from and the
/// nonzeros of the rescaling matrix `T` (`T[j_m, m] = 1/√(s·p_{j_m})`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub selected: Vec<usize>,
    pub probs: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureSample {
    fn from_selection(selected: Vec<usize>, probs: Vec<f64>) -> Self {
        let s = selected.len() as f64;
        let scale = selected
            .iter()
            .map(|&j| {
                let p = probs[j];
                // A zero-probability feature can only be present through
                // exhaustive selection; its rescaled column is dropped.
                if p > 0.0 {
                    1.0 / (s * p).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Self { selected, probs, scale }
    }

    /// Every feature selected, in order.
    pub fn exhaustive(probs: Vec<f64>) -> Result<Self> {
        let probs = normalize(probs)?;
        Ok(Self::from_selection((0..probs.len()).collect(), probs))
    }

    /// Uniform probabilities over `d` features.
    pub fn uniform_probs(d: usize) -> Vec<f64> {
        vec![1.0 / d as f64; d]
    }

    pub fn s(&self) -> usize {
        self.selected.len()
    }

    pub fn d(&self) -> usize {
        self.probs.len()
    }

    /// `scale` laid out over the selected positions' new indices.
    pub fn scale_by_position(&self) -> &[f64] {
        &self.scale
    }

    /// The dense `d × s` sampling-and-rescaling matrix.
    pub fn rescaling_matrix(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.d(), self.s());
        for (m, (&j, &sc)) in self.selected.iter().zip(&self.scale).enumerate() {
            t[(j, m)] = sc;
        }
        t
    }

    /// `A T`: the selected columns of `a`, each multiplied by its scale.
    pub fn apply_rescaled(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), self.s(), |i, m| a[(i, self.selected[m])] * self.scale[m])
    }

    /// `T w̃`, lifting a reduced-space vector back to `d` dimensions.
    pub fn lift(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        for ((&j, &sc), &v) in self.selected.iter().zip(&self.scale).zip(w) {
            out[j] = sc * v;
        }
        out
    }
}

/// Draws `s` distinct indices by weighted order sampling: index `j` gets key
/// `ln(u_j)/p_j` with `u_j ~ U(0,1]` and the `s` largest keys win. This has
/// the distribution of `s` successive draws proportional to the remaining
/// weights.
pub fn sample_without_replacement(p: &[f64], s: usize, seed: u64) -> Result<FeatureSample> {
    let probs = normalize(p.to_vec())?;
    let support = probs.iter().filter(|&&x| x > 0.0).count();
    if s > support || s == 0 {
        return Err(Error::InsufficientSupport { requested: s, support });
    }
    let mut rng = seed::rng(seed, &[seed::stream::SAMPLE]);
    let mut keyed: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .filter_map(|(j, &pj)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (pj > 0.0).then(|| (u.ln() / pj, j))
        })
        .collect();
    let by_key_desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if s < keyed.len() {
        keyed.select_nth_unstable_by(s - 1, by_key_desc);
        keyed.truncate(s);
    }
    let mut selected: Vec<usize> = keyed.into_iter().map(|(_, j)| j).collect();
    selected.sort_unstable();
    Ok(FeatureSample::from_selection(selected, probs))
}

/// Measured distortion `ε̂` of `T` as a subspace embedding for `col(A)`:
/// the extreme eigenvalues of `(AAᵀ)^{†/2} ÃÃᵀ (AAᵀ)^{†/2}` on `col(A)`,
/// which equal the squared singular values of `TᵀV`. Returns `1.0` when the
/// sample loses part of the column space.
pub fn embedding_distortion(row_space: &RowSpace, sample: &FeatureSample) -> f64 {
    let v = &row_space.basis;
    let r = v.ncols();
    if sample.s() < r {
        return 1.0;
    }
    let tv = DMatrix::from_fn(sample.s(), r, |m, k| v[(sample.selected[m], k)] * sample.scale[m]);
    let sv = tv.singular_values();
    let lam_max = sv.max().powi(2);
    let lam_min = sv.min().powi(2);
    if lam_min <= RANK_TOL * lam_max.max(1.0) {
        return 1.0;
    }
    (lam_max - 1.0).abs().max((1.0 - lam_min).abs())
}

pub fn check_subspace_embedding(a: &DMatrix<f64>, sample: &FeatureSample) -> Result<f64> {
    Ok(embedding_distortion(&RowSpace::of(a)?, sample))
}

/// Sample size `⌈4·r·ln(r/δ)/ε²⌉`.
pub fn embedding_sample_size(rank: usize, epsilon: f64, delta: f64) -> usize {
    let r = rank as f64;
    (4.0 * r * (r / delta).ln() / (epsilon * epsilon)).ceil() as usize
}

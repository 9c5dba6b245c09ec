//! Numerical oracles for the sampling mathematics: subspace-embedding
//! distortion, least-squares reconstruction, gradient-norm sandwiches,
//! separability and Davies–Bouldin preservation, marker inclusion, and a
//! qualitative check of federated training error across sampling rates.
//!
//! Every verifier runs in the rescaled (`A T`) space and is deterministic
//! given its seed. Trials whose preconditions fail are recorded as not
//! applicable and never count as successes or failures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{run_federation, FedConfig, VaeSettings};
use crate::leverage::{
    embedding_distortion, embedding_sample_size, exact_column_leverage, sample_without_replacement, FeatureSample,
    RowSpace, RANK_TOL,
};
use crate::metrics::{davies_bouldin, separability, Labeling};
use crate::seed::{self, stream};
use crate::synth::{build_scenario, generate, ScenarioName, ScenarioPreset, SynthParams};

/// Class pairs with `Δ` below this are too close to test a ratio band.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Relative tolerance of the least-squares residual equality.
pub const LSQ_TOL: f64 = 1e-8;

/// Relative rounding allowance on the sandwich and band inequalities.
pub const ROUNDING_SLACK: f64 = 1e-10;

/// Declared band for the per-feature final reconstruction loss at a sampled
/// rate relative to the unsampled run.
pub const DECOMPOSITION_BAND: (f64, f64) = (0.5, 2.0);

/// Outcome of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Pass,
    /// Failed by the given nonnegative margin.
    Fail(f64),
    NotApplicable,
}

/// Tally of a property over seeded trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub successes: usize,
    pub failures: usize,
    pub not_applicable: usize,
    /// Largest failure margin seen; 0 when nothing failed.
    pub worst_violation: f64,
    /// Seed of every trial, in trial order.
    pub seeds: Vec<u64>,
}

impl PropertyResult {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            successes: 0,
            failures: 0,
            not_applicable: 0,
            worst_violation: 0.0,
            seeds: Vec::new(),
        }
    }

    pub fn record(&mut self, seed: u64, outcome: TrialOutcome) {
        self.trials += 1;
        self.seeds.push(seed);
        match outcome {
            TrialOutcome::Pass => self.successes += 1,
            TrialOutcome::Fail(v) => {
                self.failures += 1;
                self.worst_violation = self.worst_violation.max(v);
            }
            TrialOutcome::NotApplicable => self.not_applicable += 1,
        }
    }

    /// Appends another tally of the same property.
    pub fn merge(&mut self, other: &PropertyResult) {
        self.trials += other.trials;
        self.successes += other.successes;
        self.failures += other.failures;
        self.not_applicable += other.not_applicable;
        self.worst_violation = self.worst_violation.max(other.worst_violation);
        self.seeds.extend_from_slice(&other.seeds);
    }

    /// `successes + failures + not_applicable == trials`, one seed per trial.
    pub fn is_consistent(&self) -> bool {
        self.successes + self.failures + self.not_applicable == self.trials && self.seeds.len() == self.trials
    }

    pub fn applicable(&self) -> usize {
        self.trials - self.not_applicable
    }
}

/// Which distribution features are sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingProbs {
    /// Exact column leverage scores over their sum.
    Leverage,
    Uniform,
}

impl SamplingProbs {
    fn of(self, row_space: &RowSpace, d: usize) -> Vec<f64> {
        match self {
            SamplingProbs::Leverage => {
                let r = row_space.rank() as f64;
                row_space.row_norms_sq().into_iter().map(|l| l / r).collect()
            }
            SamplingProbs::Uniform => FeatureSample::uniform_probs(d),
        }
    }
}

/// `s` features from `probs` with the rescaling `1/√(s·p_j)`; every feature
/// when `s ≥ d`.
pub fn draw_sample(probs: &[f64], s: usize, seed: u64) -> Result<FeatureSample> {
    if s >= probs.len() {
        FeatureSample::exhaustive(probs.to_vec())
    } else {
        sample_without_replacement(probs, s, seed)
    }
}

fn trial_seed(seed: u64, t: usize) -> u64 {
    seed::derive(seed, &[stream::VERIFY, t as u64])
}

fn pinv_solve(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    // With V an orthonormal basis of row(A), A = (AV)Vᵀ and AV has full column
    // rank, so A†y = V·argmin‖AVz − y‖.
    let v = RowSpace::of(a)?.basis;
    let qr = (a * &v).qr();
    let z = qr
        .r()
        .solve_upper_triangular(&qr.q().tr_mul(y))
        .ok_or_else(|| Error::Shape("rank-deficient compressed system".into()))?;
    Ok(v * z)
}

fn sq_norm(v: &DVector<f64>) -> f64 {
    v.norm_squared()
}

fn rows_of(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Whether `Tᵀ V` keeps full column rank `r`.
fn sample_keeps_rank(row_space: &RowSpace, sample: &FeatureSample) -> bool {
    let r = row_space.rank();
    if sample.s() < r {
        return false;
    }
    let v = &row_space.basis;
    let tv = DMatrix::from_fn(sample.s(), r, |m, k| v[(sample.selected[m], k)] * sample.scale[m]);
    let sv = tv.singular_values();
    sv.min() > RANK_TOL * sv.max()
}

/// Least-squares reconstruction: `w* = A†y`, `w̃* = (AT)†y`, `w = Tw̃*`; the
/// trial passes iff `|‖Aw − y‖² − ‖Aw* − y‖²| ≤ 1e-8·(1 + ‖Aw* − y‖²)`. Not
/// applicable when `TᵀV` loses rank.
pub fn verify_lsq_reconstruction(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sample: &FeatureSample,
    seed: u64,
) -> Result<PropertyResult> {
    let mut result = PropertyResult::new("lsq_reconstruction");
    result.record(seed, lsq_outcome(a, y, sample)?);
    Ok(result)
}

fn lsq_outcome(a: &DMatrix<f64>, y: &DVector<f64>, sample: &FeatureSample) -> Result<TrialOutcome> {
    check_dims(a, y, sample)?;
    let rs = RowSpace::of(a)?;
    if !sample_keeps_rank(&rs, sample) {
        return Ok(TrialOutcome::NotApplicable);
    }
    let w_star = pinv_solve(a, y)?;
    let at = sample.apply_rescaled(a);
    let w_tilde = pinv_solve(&at, y)?;
    let w_recon = DVector::from_vec(sample.lift(w_tilde.as_slice()));
    let best = sq_norm(&(a * &w_star - y));
    let recon = sq_norm(&(a * &w_recon - y));
    let gap = (recon - best).abs();
    let bound = LSQ_TOL * (1.0 + best);
    Ok(if gap <= bound {
        TrialOutcome::Pass
    } else {
        TrialOutcome::Fail((gap - bound) / (1.0 + best))
    })
}

fn check_dims(a: &DMatrix<f64>, y: &DVector<f64>, sample: &FeatureSample) -> Result<()> {
    if y.len() != a.nrows() || sample.d() != a.ncols() {
        return Err(Error::Shape(format!(
            "A is {}×{}, y has {} entries, sample covers {} features",
            a.nrows(),
            a.ncols(),
            y.len(),
            sample.d()
        )));
    }
    Ok(())
}

/// Checks `(1−ε̂)‖∇f(Tw̃)‖² ≤ ‖∇f̃(w̃)‖² ≤ (1+ε̂)‖∇f(Tw̃)‖²` at one probe, with
/// `f(w) = ‖Aw − y‖²` and `f̃(w̃) = ‖ATw̃ − y‖²`.
pub fn sandwich_outcome(
    a: &DMatrix<f64>,
    at: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    eps: f64,
) -> TrialOutcome {
    let e = at * w - y;
    let full = 4.0 * sq_norm(&a.tr_mul(&e));
    let sampled = 4.0 * sq_norm(&at.tr_mul(&e));
    let slack = ROUNDING_SLACK * full;
    let lo = (1.0 - eps) * full - slack;
    let hi = (1.0 + eps) * full + slack;
    if (lo..=hi).contains(&sampled) {
        TrialOutcome::Pass
    } else {
        let miss = (lo - sampled).max(sampled - hi);
        TrialOutcome::Fail(miss / full.max(f64::MIN_POSITIVE))
    }
}

/// Gradient sandwich at `probes` standard normal points `w̃`, using the
/// distortion `ε̂` measured on this very sample. Not applicable when `ε̂ ≥ 1`.
pub fn verify_gradient_sandwich(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sample: &FeatureSample,
    probes: usize,
    seed: u64,
) -> Result<PropertyResult> {
    check_dims(a, y, sample)?;
    let mut result = PropertyResult::new("gradient_sandwich");
    let eps = embedding_distortion(&RowSpace::of(a)?, sample);
    let at = sample.apply_rescaled(a);
    for k in 0..probes {
        let probe_seed = seed::derive(seed, &[stream::VERIFY, k as u64]);
        if eps >= 1.0 {
            result.record(probe_seed, TrialOutcome::NotApplicable);
            continue;
        }
        let mut rng = seed::rng(probe_seed, &[]);
        let w = DVector::from_fn(sample.s(), |_, _| rng.sample::<f64, _>(StandardNormal));
        result.record(probe_seed, sandwich_outcome(a, &at, y, &w, eps));
    }
    Ok(result)
}

fn class_pairs(labels: &[u32]) -> Vec<(u32, u32)> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut pairs = Vec::new();
    for (k, &i) in classes.iter().enumerate() {
        for &j in &classes[k + 1..] {
            pairs.push((i, j));
        }
    }
    pairs
}

fn band_outcome(original: f64, sampled: f64, eps: f64) -> TrialOutcome {
    let slack = ROUNDING_SLACK * original;
    let lo = (1.0 - 2.0 * eps) * original - slack;
    let hi = (1.0 + 2.0 * eps) * original + slack;
    if (lo..=hi).contains(&sampled) {
        TrialOutcome::Pass
    } else {
        TrialOutcome::Fail((lo - sampled).max(sampled - hi) / original)
    }
}

fn worst(outcomes: impl IntoIterator<Item = TrialOutcome>) -> TrialOutcome {
    let mut out = TrialOutcome::Pass;
    for o in outcomes {
        out = match (out, o) {
            (TrialOutcome::NotApplicable, _) | (_, TrialOutcome::NotApplicable) => TrialOutcome::NotApplicable,
            (TrialOutcome::Fail(a), TrialOutcome::Fail(b)) => TrialOutcome::Fail(a.max(b)),
            (TrialOutcome::Fail(a), TrialOutcome::Pass) | (TrialOutcome::Pass, TrialOutcome::Fail(a)) => {
                TrialOutcome::Fail(a)
            }
            (TrialOutcome::Pass, TrialOutcome::Pass) => TrialOutcome::Pass,
        };
    }
    out
}

/// Shared driver for the structure-preservation checks: per trial, draw a
/// rescaled sample of `s` features, measure `ε̂`, and score the sampled rows.
fn structure_trials(
    name: &str,
    a: &DMatrix<f64>,
    probs: SamplingProbs,
    s: usize,
    trials: usize,
    seed: u64,
    score: impl Fn(&DMatrix<f64>, f64) -> TrialOutcome + Sync,
) -> Result<PropertyResult> {
    let rs = RowSpace::of(a)?;
    let p = probs.of(&rs, a.ncols());
    let outcomes: Vec<(u64, TrialOutcome)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let ts = trial_seed(seed, t);
            let sample = draw_sample(&p, s, ts)?;
            let eps = embedding_distortion(&rs, &sample);
            if eps >= 1.0 {
                return Ok((ts, TrialOutcome::NotApplicable));
            }
            Ok((ts, score(&sample.apply_rescaled(a), eps)))
        })
        .collect::<Result<_>>()?;
    let mut result = PropertyResult::new(name);
    for (ts, o) in outcomes {
        result.record(ts, o);
    }
    Ok(result)
}

/// Separability band: for every class pair, `Δ̃ ∈ [(1−2ε̂)Δ, (1+2ε̂)Δ]`.
/// A trial passes when all pairs pass; pairs with `Δ < DELTA_FLOOR` or
/// degenerate statistics make it not applicable.
pub fn verify_separability_preservation(
    a: &DMatrix<f64>,
    labels: &[u32],
    probs: SamplingProbs,
    s: usize,
    trials: usize,
    seed: u64,
) -> Result<PropertyResult> {
    if labels.len() != a.nrows() {
        return Err(Error::LabelLength(labels.len(), a.nrows()));
    }
    let pairs = class_pairs(labels);
    let points = rows_of(a);
    let original: Vec<Option<f64>> = pairs
        .iter()
        .map(|&(i, j)| separability(&points, labels, i, j).ok().filter(|&d| d >= DELTA_FLOOR))
        .collect();
    let applicable = !pairs.is_empty() && original.iter().all(Option::is_some);
    structure_trials("separability_preservation", a, probs, s, trials, seed, |at, eps| {
        if !applicable {
            return TrialOutcome::NotApplicable;
        }
        let sampled = rows_of(at);
        worst(
            pairs
                .iter()
                .zip(&original)
                .map(|(&(i, j), orig)| match separability(&sampled, labels, i, j) {
                    Ok(d) => band_outcome(orig.expect("checked"), d, eps),
                    Err(_) => TrialOutcome::NotApplicable,
                }),
        )
    })
}

/// Davies–Bouldin band on the true labels: `|DB̃ − DB| ≤ 2ε̂·DB`.
pub fn verify_db_preservation(
    a: &DMatrix<f64>,
    labels: &[u32],
    probs: SamplingProbs,
    s: usize,
    trials: usize,
    seed: u64,
) -> Result<PropertyResult> {
    if labels.len() != a.nrows() {
        return Err(Error::LabelLength(labels.len(), a.nrows()));
    }
    let labeling = Labeling::new(labels);
    let original = davies_bouldin(&rows_of(a), &labeling).ok();
    structure_trials("db_preservation", a, probs, s, trials, seed, |at, eps| {
        let Some(db) = original else {
            return TrialOutcome::NotApplicable;
        };
        match davies_bouldin(&rows_of(at), &labeling) {
            Ok(sampled) => band_outcome(db, sampled, eps),
            Err(_) => TrialOutcome::NotApplicable,
        }
    })
}

/// Monte Carlo inclusion frequency of one feature against its lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerInclusion {
    pub feature: usize,
    /// Class mean minus rest-of-cells mean at this feature.
    pub discriminative: f64,
    pub leverage: f64,
    /// Empirical inclusion frequency `π̂`.
    pub pi_hat: f64,
    /// Binomial standard error of `π̂`.
    pub sigma_hat: f64,
    /// `1 − exp(−(s/r)·d_j²/Σ d_ℓ²)`.
    pub floor: f64,
    /// `1 − exp(−(s/r)·ℓ_j)`, the intermediate bound the floor relaxes.
    pub leverage_floor: f64,
    pub trials: usize,
    /// `π̂ ≥ floor − 3σ̂`.
    pub success: bool,
}

/// Inclusion frequency of each of `features` over `trials` samples of size
/// `s` drawn from exact-leverage probabilities, with the one-vs-rest marker
/// floor for `class`.
pub fn estimate_marker_inclusion(
    a: &DMatrix<f64>,
    labels: &[u32],
    class: u32,
    features: &[usize],
    s: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<MarkerInclusion>> {
    if labels.len() != a.nrows() {
        return Err(Error::LabelLength(labels.len(), a.nrows()));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("marker inclusion needs at least one trial".into()));
    }
    if let Some(&bad) = features.iter().find(|&&j| j >= a.ncols()) {
        return Err(Error::Shape(format!("feature {bad} outside 0..{}", a.ncols())));
    }
    let inside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    let outside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != class).collect();
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "class {class} must be a proper nonempty subset of cells"
        )));
    }
    let col_mean = |rows: &[usize], j: usize| rows.iter().map(|&i| a[(i, j)]).sum::<f64>() / rows.len() as f64;
    let disc: Vec<f64> = (0..a.ncols())
        .map(|j| col_mean(&inside, j) - col_mean(&outside, j))
        .collect();
    let mass: f64 = disc.iter().map(|d| d * d).sum();
    if mass <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "class {class} has zero discriminative mass"
        )));
    }
    let lev = exact_column_leverage(a)?;
    let r = lev.rank_estimate as f64;
    let probs: Vec<f64> = lev.scores.iter().map(|l| l / r).collect();
    let counts: Vec<Vec<bool>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let sample = draw_sample(&probs, s, trial_seed(seed, t))?;
            Ok(features
                .iter()
                .map(|j| sample.selected.binary_search(j).is_ok())
                .collect())
        })
        .collect::<Result<_>>()?;
    let sf = s as f64;
    Ok(features
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let hits = counts.iter().filter(|c| c[k]).count();
            let pi_hat = hits as f64 / trials as f64;
            let sigma_hat = (pi_hat * (1.0 - pi_hat) / trials as f64).sqrt();
            let floor = 1.0 - (-(sf / r) * disc[j] * disc[j] / mass).exp();
            MarkerInclusion {
                feature: j,
                discriminative: disc[j],
                leverage: lev.scores[j],
                pi_hat,
                sigma_hat,
                floor,
                leverage_floor: 1.0 - (-(sf / r) * lev.scores[j]).exp(),
                trials,
                success: pi_hat >= floor - 3.0 * sigma_hat,
            }
        })
        .collect())
}

/// One federated run inside [`verify_error_decomposition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRun {
    pub rho: f64,
    pub seed: u64,
    /// Probe total loss after every round.
    pub losses: Vec<f64>,
    /// Final probe reconstruction loss per selected feature.
    pub recon_per_feature: Option<f64>,
    /// Error text when the run failed (for example on divergence).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub runs: Vec<DecompositionRun>,
    /// Per rate, whether the seed-median loss curve only rises by at most 5%
    /// from one round to the next after round 3.
    pub monotone: Vec<(f64, bool)>,
    /// Per sampled rate, the ratio of its median per-feature final
    /// reconstruction loss to the `ρ = 1` median, and whether it lies in
    /// [`DECOMPOSITION_BAND`].
    pub band: Vec<(f64, f64, bool)>,
    /// Seeds whose final loss is below their round-1 loss, per rate.
    pub improved: Vec<(f64, usize)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains the homogeneous scenario at every rate in `rhos` (plus `ρ = 1`)
/// for every seed and summarizes the qualitative shape of the error: loss
/// decreasing over rounds, and sampled rates staying near the unsampled
/// loss. No convergence constants are estimated.
pub fn verify_error_decomposition(
    base: &SynthParams,
    scale: f64,
    cfg: &FedConfig,
    arch: &VaeSettings,
    rhos: &[f64],
    seeds: &[u64],
) -> Result<DecompositionReport> {
    let mut grid: Vec<f64> = rhos.to_vec();
    if !grid.contains(&1.0) {
        grid.push(1.0);
    }
    let mut runs = Vec::new();
    for &rho in &grid {
        for &seed in seeds {
            let params = SynthParams { seed, ..base.clone() };
            let preset = ScenarioPreset::full(ScenarioName::Homogeneous, &params);
            let (_, shards) = build_scenario(&preset, scale, &params)?;
            let run_cfg = FedConfig {
                rho,
                seed,
                ..cfg.clone()
            };
            runs.push(match run_federation(&shards, &run_cfg, arch) {
                Ok(out) => DecompositionRun {
                    rho,
                    seed,
                    losses: out.history.iter().map(|h| h.probe.total).collect(),
                    recon_per_feature: out.history.last().map(|h| h.probe.recon / out.phase1.sample.s() as f64),
                    error: None,
                },
                Err(e) => DecompositionRun {
                    rho,
                    seed,
                    losses: Vec::new(),
                    recon_per_feature: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let of_rate = |rho: f64| runs.iter().filter(move |r| r.rho == rho && r.error.is_none());
    let mut monotone = Vec::new();
    let mut improved = Vec::new();
    for &rho in &grid {
        let rounds = of_rate(rho).map(|r| r.losses.len()).min().unwrap_or(0);
        let curve: Vec<f64> = (0..rounds)
            .map(|t| median(of_rate(rho).map(|r| r.losses[t]).collect()))
            .collect();
        let ok = rounds > 0 && curve.windows(2).skip(2).all(|w| w[1] <= 1.05 * w[0]);
        monotone.push((rho, ok));
        let better = of_rate(rho).filter(|r| r.losses.last() < r.losses.first()).count();
        improved.push((rho, better));
    }
    let reference = median(of_rate(1.0).filter_map(|r| r.recon_per_feature).collect());
    let band = grid
        .iter()
        .filter(|&&rho| rho != 1.0)
        .map(|&rho| {
            let ratio = median(of_rate(rho).filter_map(|r| r.recon_per_feature).collect()) / reference;
            (
                rho,
                ratio,
                (DECOMPOSITION_BAND.0..=DECOMPOSITION_BAND.1).contains(&ratio),
            )
        })
        .collect();
    Ok(DecompositionReport {
        runs,
        monotone,
        band,
        improved,
    })
}

/// A dense `n × d` matrix of rank `min(r, n, d)` with standard normal factors.
pub fn random_low_rank(n: usize, d: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed, &[stream::VERIFY]);
    let l = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = DMatrix::from_fn(r, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    l * f
}

/// Planted classes: row `i` is its class prototype plus a shared
/// `noise_rank`-dimensional perturbation scaled by `noise`. Rank is at most
/// `classes + noise_rank`.
pub fn planted_classes(
    per_class: &[usize],
    d: usize,
    noise_rank: usize,
    noise: f64,
    seed: u64,
) -> (DMatrix<f64>, Vec<u32>) {
    let mut rng = seed::rng(seed, &[stream::VERIFY, 1]);
    let k = per_class.len();
    let protos = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let factors = DMatrix::from_fn(noise_rank, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<u32> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u32, n))
        .collect();
    let n = labels.len();
    let loads = DMatrix::from_fn(n, noise_rank, |_, _| noise * rng.sample::<f64, _>(StandardNormal));
    let mut a = &loads * &factors;
    for (i, &c) in labels.iter().enumerate() {
        let mut row = a.row_mut(i);
        row += protos.row(c as usize);
    }
    (a, labels)
}

/// Verification suites exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Embedding,
    Lsq,
    GradSandwich,
    Separability,
    Db,
    Marker,
    Decomposition,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Embedding,
        Suite::Lsq,
        Suite::GradSandwich,
        Suite::Separability,
        Suite::Db,
        Suite::Marker,
        Suite::Decomposition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Embedding => "embedding",
            Suite::Lsq => "lsq",
            Suite::GradSandwich => "gradsandwich",
            Suite::Separability => "separability",
            Suite::Db => "db",
            Suite::Marker => "marker",
            Suite::Decomposition => "decomposition",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite `{s}`")))
    }
}

/// Output of [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    /// The generated instances, in words.
    pub instance: String,
    pub properties: Vec<PropertyResult>,
    pub markers: Vec<MarkerInclusion>,
    pub decomposition: Option<DecompositionReport>,
}

/// Share of applicable trials a statistical suite must pass.
pub const STATISTICAL_PASS_RATE: f64 = 0.95;

impl SuiteReport {
    /// Whether the suite meets its pass rule: deterministic properties
    /// (reconstruction, sandwich) must hold on every applicable trial,
    /// statistical ones on [`STATISTICAL_PASS_RATE`] of them; every marker
    /// must clear its floor; the decomposition curves must be monotone and
    /// inside the band.
    pub fn passed(&self) -> bool {
        let properties_ok = self.properties.iter().all(|p| {
            let needed = match self.suite {
                Suite::Lsq | Suite::GradSandwich => p.applicable(),
                _ => (STATISTICAL_PASS_RATE * p.applicable() as f64).ceil() as usize,
            };
            p.applicable() > 0 && p.successes >= needed
        });
        let markers_ok = self.markers.iter().all(|m| m.success);
        let decomposition_ok = self.decomposition.as_ref().is_none_or(|d| {
            d.runs.iter().all(|r| r.error.is_none()) && d.monotone.iter().all(|m| m.1) && d.band.iter().all(|b| b.2)
        });
        properties_ok && markers_ok && decomposition_ok
    }
}

/// Distortion target and failure probability of the embedding suite.
pub const EMBEDDING_EPS: f64 = 0.5;
pub const EMBEDDING_DELTA: f64 = 0.05;

/// Runs a suite on its standard generated instances. `trials` is the number
/// of instances (Monte Carlo draws for the marker suite, seeds for the
/// decomposition suite).
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite,
        seed,
        instance: String::new(),
        properties: Vec::new(),
        markers: Vec::new(),
        decomposition: None,
    };
    match suite {
        Suite::Embedding => {
            let (n, d, r) = (200, 2_000, 10);
            let s = embedding_sample_size(r, EMBEDDING_EPS, EMBEDDING_DELTA);
            report.instance = format!("rank-{r} {n}×{d} Gaussian products, s = {s} leverage-sampled features");
            let outcomes: Vec<(u64, TrialOutcome)> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let ts = trial_seed(seed, t);
                    let a = random_low_rank(n, d, r, ts);
                    let rs = RowSpace::of(&a)?;
                    let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, d), s, ts)?;
                    let eps = embedding_distortion(&rs, &sample);
                    Ok((
                        ts,
                        if eps <= EMBEDDING_EPS {
                            TrialOutcome::Pass
                        } else {
                            TrialOutcome::Fail(eps - EMBEDDING_EPS)
                        },
                    ))
                })
                .collect::<Result<_>>()?;
            let mut result = PropertyResult::new("subspace_embedding");
            outcomes.into_iter().for_each(|(ts, o)| result.record(ts, o));
            report.properties.push(result);
        }
        Suite::Lsq => {
            let (n, d, r, s) = (50, 500, 5, 60);
            report.instance = format!("rank-{r} {n}×{d} Gaussian products, random y, s = {s}");
            let mut result = PropertyResult::new("lsq_reconstruction");
            for t in 0..trials {
                let ts = trial_seed(seed, t);
                let a = random_low_rank(n, d, r, ts);
                let mut rng = seed::rng(ts, &[1]);
                let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let rs = RowSpace::of(&a)?;
                let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, d), s, ts)?;
                result.merge(&verify_lsq_reconstruction(&a, &y, &sample, ts)?);
            }
            report.properties.push(result);
        }
        Suite::GradSandwich => {
            let (n, d, probes) = (50, 1_000, 50);
            report.instance = format!("rank 5–10 {n}×{d} Gaussian products, s = 20·rank, {probes} probes each");
            let mut result = PropertyResult::new("gradient_sandwich");
            for t in 0..trials {
                let ts = trial_seed(seed, t);
                let r = 5 + t % 6;
                let a = random_low_rank(n, d, r, ts);
                let mut rng = seed::rng(ts, &[1]);
                let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let rs = RowSpace::of(&a)?;
                let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, d), 20 * r, ts)?;
                result.merge(&verify_gradient_sandwich(&a, &y, &sample, probes, ts)?);
            }
            report.properties.push(result);
        }
        Suite::Separability | Suite::Db => {
            let (per_class, d, noise_rank) = ([40, 30, 30], 2_000, 3);
            let r = per_class.len() + noise_rank;
            let s = embedding_sample_size(r, EMBEDDING_EPS, EMBEDDING_DELTA);
            report.instance = format!(
                "fresh planted 3-class 100×{d} instance per trial, rank {r}, s = {s} leverage-sampled features"
            );
            let name = if suite == Suite::Separability {
                "separability_preservation"
            } else {
                "db_preservation"
            };
            let results: Vec<PropertyResult> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let ts = trial_seed(seed, t);
                    let (a, labels) = planted_classes(&per_class, d, noise_rank, 0.5, ts);
                    if suite == Suite::Separability {
                        verify_separability_preservation(&a, &labels, SamplingProbs::Leverage, s, 1, ts)
                    } else {
                        verify_db_preservation(&a, &labels, SamplingProbs::Leverage, s, 1, ts)
                    }
                })
                .collect::<Result<_>>()?;
            let mut result = PropertyResult::new(name);
            results.iter().for_each(|r| result.merge(r));
            report.properties.push(result);
        }
        Suite::Marker => {
            let params = marker_instance(seed);
            let data = generate(&params)?;
            let a = data.matrix.to_dense();
            let labels: Vec<u32> = data.cells.iter().map(|c| c.label).collect();
            let s = params.d / 5;
            let marker = params.markers(0).start;
            let background = params.background().start;
            report.instance = format!(
                "synthetic {}×{} (snr {}), class 0 marker {marker} vs background {background}, s = {s}",
                a.nrows(),
                a.ncols(),
                params.snr
            );
            report.markers = estimate_marker_inclusion(&a, &labels, 0, &[marker, background], s, trials, seed)?;
        }
        Suite::Decomposition => {
            let base = SynthParams {
                d: 2_000,
                peaks_per_type: 40,
                shared_peaks: 100,
                depth_mean: 600.0,
                snr: 0.8,
                ..SynthParams::default()
            };
            let cfg = FedConfig {
                rounds: 10,
                ..FedConfig::default()
            };
            let seeds: Vec<u64> = (0..trials as u64).map(|t| seed.wrapping_add(t)).collect();
            report.instance = "homogeneous, d = 2000, 5 clients × 200 cells, 10 rounds".into();
            report.decomposition = Some(verify_error_decomposition(
                &base,
                0.1,
                &cfg,
                &VaeSettings::default(),
                &[0.2, 0.5],
                &seeds,
            )?);
        }
    }
    Ok(report)
}

/// The small planted dataset of the marker suite.
pub fn marker_instance(seed: u64) -> SynthParams {
    SynthParams {
        n_types: 3,
        d: 500,
        peaks_per_type: 20,
        shared_peaks: 30,
        snr: 0.8,
        depth_mean: 100.0,
        type_counts: vec![40, 40, 40],
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn property_result_bookkeeping() {
        let mut r = PropertyResult::new("x");
        r.record(1, TrialOutcome::Pass);
        r.record(2, TrialOutcome::Fail(0.25));
        r.record(3, TrialOutcome::NotApplicable);
        r.record(4, TrialOutcome::Fail(0.1));
        assert_eq!((r.trials, r.successes, r.failures, r.not_applicable), (4, 1, 2, 1));
        assert_eq!(r.worst_violation, 0.25);
        assert_eq!(r.applicable(), 3);
        assert!(r.is_consistent());
        let mut m = PropertyResult::new("x");
        m.merge(&r);
        m.merge(&r);
        assert_eq!(m.trials, 8);
        assert!(m.is_consistent());
    }

    #[test]
    fn consistent_system_has_zero_residuals() {
        let a = random_low_rank(20, 100, 3, 5);
        let x = DVector::from_fn(100, |i, _| (i as f64).sin());
        let y = &a * x;
        let rs = RowSpace::of(&a).unwrap();
        let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, 100), 30, 2).unwrap();
        let r = verify_lsq_reconstruction(&a, &y, &sample, 2).unwrap();
        assert_eq!(r.successes, 1);
    }

    #[test]
    fn too_few_features_is_not_applicable() {
        let a = random_low_rank(30, 200, 5, 8);
        let y = DVector::from_element(30, 1.0);
        let rs = RowSpace::of(&a).unwrap();
        let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, 200), 3, 1).unwrap();
        let r = verify_lsq_reconstruction(&a, &y, &sample, 1).unwrap();
        assert_eq!(r.not_applicable, 1);
        assert_eq!(r.successes + r.failures, 0);
    }

    #[test]
    fn sandwich_at_sampled_optimum() {
        let a = random_low_rank(30, 300, 4, 3);
        let mut rng = seed::rng(3, &[]);
        let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rs = RowSpace::of(&a).unwrap();
        let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, 300), 80, 4).unwrap();
        let eps = embedding_distortion(&rs, &sample);
        assert!(eps < 1.0);
        let at = sample.apply_rescaled(&a);
        let w = pinv_solve(&at, &y).unwrap();
        assert_eq!(sandwich_outcome(&a, &at, &y, &w, eps), TrialOutcome::Pass);
    }

    #[test]
    fn lost_rank_skips_every_probe() {
        let a = random_low_rank(30, 300, 6, 3);
        let y = DVector::from_element(30, 1.0);
        let rs = RowSpace::of(&a).unwrap();
        let sample = draw_sample(&SamplingProbs::Leverage.of(&rs, 300), 4, 4).unwrap();
        let r = verify_gradient_sandwich(&a, &y, &sample, 10, 0).unwrap();
        assert_eq!(r.not_applicable, 10);
    }

    #[test]
    fn full_uniform_sampling_preserves_structure_exactly() {
        let (a, labels) = planted_classes(&[10, 12, 8], 50, 2, 0.3, 4);
        let sep = verify_separability_preservation(&a, &labels, SamplingProbs::Uniform, 50, 3, 0).unwrap();
        assert_eq!(sep.successes, 3);
        let db = verify_db_preservation(&a, &labels, SamplingProbs::Uniform, 50, 3, 0).unwrap();
        assert_eq!(db.successes, 3);
        // Uniform full selection rescales every column by 1: Δ̃ = Δ.
        let sample = draw_sample(&FeatureSample::uniform_probs(50), 50, 0).unwrap();
        let at = sample.apply_rescaled(&a);
        let (p, q) = (rows_of(&a), rows_of(&at));
        let d0 = davies_bouldin(&p, &Labeling::new(&labels)).unwrap();
        let d1 = davies_bouldin(&q, &Labeling::new(&labels)).unwrap();
        assert!((d0 - d1).abs() <= 1e-9 * d0);
    }

    #[test]
    fn shuffled_or_single_class_is_not_applicable() {
        let (a, _) = planted_classes(&[10, 10], 40, 2, 0.3, 1);
        let one = vec![0u32; 20];
        let db = verify_db_preservation(&a, &one, SamplingProbs::Leverage, 20, 2, 0).unwrap();
        assert_eq!(db.not_applicable, 2);
        let sep = verify_separability_preservation(&a, &one, SamplingProbs::Leverage, 20, 2, 0).unwrap();
        assert_eq!(sep.not_applicable, 2);
    }

    #[test]
    fn exhaustive_marker_draws_always_include() {
        let params = marker_instance(2);
        let data = generate(&params).unwrap();
        let a = data.matrix.to_dense();
        let labels: Vec<u32> = data.cells.iter().map(|c| c.label).collect();
        let m = estimate_marker_inclusion(&a, &labels, 0, &[0, 1, 499], 500, 5, 1).unwrap();
        assert!(m.iter().all(|x| x.pi_hat == 1.0 && x.success && x.floor <= 1.0));
    }

    #[test]
    fn marker_errors() {
        let a = DMatrix::from_element(4, 3, 1.0);
        assert!(estimate_marker_inclusion(&a, &[0, 0, 1, 1], 0, &[0], 2, 10, 0).is_err());
        assert!(estimate_marker_inclusion(&a, &[0, 0, 0, 0], 0, &[0], 2, 10, 0).is_err());
    }

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}

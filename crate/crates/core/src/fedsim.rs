//! Two-phase federated simulation: leverage-score feature selection, then
//! FedAvg of a VAE over the selected features, with byte-level
//! communication accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_federation, ClientShard};
use crate::error::{Error, Result};
use crate::leverage::{aggregate_scores, approx_column_leverage, sample_without_replacement, FeatureSample};
use crate::seed::{self, stream};
use crate::vae::{
    contiguous_assignment, local_train, ConfounderEncoder, Datum, DepthMoments, Likelihood, LocalTrainConfig,
    LossBreakdown, TrainingShard, Vae, VaeConfig, VaeParams,
};

/// Bytes per value on the wire (parameters, scores and indices).
pub const WIRE_BYTES: u64 = 4;

/// Cells in the fixed probe set used for round-by-round loss tracking.
pub const PROBE_CELLS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub rho: f64,
    pub sketch_size: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub rescale_inputs: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_steps: 10,
            lr_local: 0.005,
            lr_global: 1.0,
            rho: 0.2,
            sketch_size: 256,
            batch_size: 64,
            lambda: 1.0,
            seed: 0,
            rescale_inputs: false,
        }
    }
}

impl FedConfig {
    /// Number of features kept out of `d`.
    pub fn sample_size(&self, d: usize) -> usize {
        (self.rho * d as f64).floor() as usize
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidFedConfig(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if self.sample_size(d) == 0 {
            return bad(format!("rho·d must be at least 1 (rho {}, d {d})", self.rho));
        }
        if self.rounds == 0 || self.local_steps == 0 {
            return bad("rounds and local steps must be at least 1".into());
        }
        if self.sketch_size == 0 || self.batch_size == 0 {
            return bad("sketch size and batch size must be positive".into());
        }
        if !(self.lr_local >= 0.0 && self.lr_local.is_finite() && self.lr_global.is_finite()) {
            return bad("learning rates must be finite, local rate nonnegative".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative".into());
        }
        Ok(())
    }

    fn local(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            steps: self.local_steps,
            lr: self.lr_local,
            batch_size: self.batch_size,
            lambda: self.lambda,
        }
    }
}

/// Architecture settings that do not depend on the selected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSettings {
    pub n_blocks: usize,
    pub block_hidden: usize,
    pub trunk_hidden: usize,
    pub latent_dim: usize,
    pub likelihood: Likelihood,
}

impl Default for VaeSettings {
    fn default() -> Self {
        Self {
            n_blocks: 20,
            block_hidden: 32,
            trunk_hidden: 64,
            latent_dim: 10,
            likelihood: Likelihood::Bernoulli,
        }
    }
}

impl VaeSettings {
    /// Model over the features in `selected` (sorted indices into `0..d`),
    /// blocked by contiguous ranges of the original feature axis.
    pub fn build(&self, d: usize, selected: &[usize], confounder_dim: usize, lambda: f64) -> Result<Vae> {
        let assignment = contiguous_assignment(d, self.n_blocks, selected);
        Vae::new(VaeConfig::from_assignment(
            &assignment,
            self.block_hidden,
            self.trunk_hidden,
            self.latent_dim,
            confounder_dim,
            lambda,
            self.likelihood,
        )?)
    }
}

/// Per-round byte counts, indexed like the client list (ascending client id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub uplink: Vec<u64>,
    pub downlink: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub client_ids: Vec<u32>,
    pub params_count: usize,
    pub phase1_uplink: Vec<u64>,
    pub phase1_downlink: Vec<u64>,
    pub rounds: Vec<RoundBytes>,
    pub phase1_total: u64,
    pub phase2_total: u64,
    pub total: u64,
}

impl CommLedger {
    fn new(client_ids: Vec<u32>) -> Self {
        let n = client_ids.len();
        Self {
            client_ids,
            params_count: 0,
            phase1_uplink: vec![0; n],
            phase1_downlink: vec![0; n],
            rounds: Vec::new(),
            phase1_total: 0,
            phase2_total: 0,
            total: 0,
        }
    }

    fn charge_round(&mut self) {
        let per_msg = self.params_count as u64 * WIRE_BYTES;
        let n = self.client_ids.len();
        self.rounds.push(RoundBytes {
            uplink: vec![per_msg; n],
            downlink: vec![per_msg; n],
        });
        self.recompute_totals();
    }

    fn recompute_totals(&mut self) {
        self.phase1_total = self.phase1_uplink.iter().chain(&self.phase1_downlink).sum();
        self.phase2_total = self
            .rounds
            .iter()
            .flat_map(|r| r.uplink.iter().chain(&r.downlink))
            .sum();
        self.total = self.phase1_total + self.phase2_total;
    }

    /// True when the stored totals equal the sums of their parts.
    pub fn is_conserved(&self) -> bool {
        let mut copy = self.clone();
        copy.recompute_totals();
        copy.total == self.total && copy.phase1_total == self.phase1_total && copy.phase2_total == self.phase2_total
    }
}

/// Global probe-set loss and each client's last local minibatch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub round: usize,
    pub probe: LossBreakdown,
    pub client_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Result {
    /// Selected features; `sample.probs` holds the aggregated distribution.
    pub sample: FeatureSample,
    /// Sketch rank per client, in ascending client-id order.
    pub client_rank_estimates: Vec<usize>,
}

/// Sorts shards by client id; rejects duplicate ids.
fn client_order<T>(items: &[T], id: impl Fn(&T) -> u32) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| id(&items[i]));
    if order.windows(2).any(|w| id(&items[w[0]]) == id(&items[w[1]])) {
        return Err(Error::InvalidShard("duplicate client id".into()));
    }
    Ok(order)
}

/// Phase 1: each client scores its features with a sketch of size
/// `min(s_k, n_i)`, the server aggregates with weights `n_i/n`, samples
/// `⌊ρd⌋` features without replacement and broadcasts the index set.
pub fn phase1_select(shards: &[ClientShard], cfg: &FedConfig, ledger: Option<&mut CommLedger>) -> Result<Phase1Result> {
    let d = check_federation(shards)?;
    cfg.validate(d)?;
    let order = client_order(shards, ClientShard::client_id)?;
    let scored: Vec<(Vec<f64>, usize, usize)> = order
        .par_iter()
        .map(|&i| {
            let shard = &shards[i];
            let sk = cfg.sketch_size.min(shard.n_i());
            let lev = approx_column_leverage(
                shard.matrix(),
                sk,
                seed::derive(cfg.seed, &[stream::PHASE1, u64::from(shard.client_id())]),
            )?;
            Ok((lev.scores, shard.n_i(), lev.rank_estimate))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&[f64], usize)> = scored.iter().map(|(s, n, _)| (s.as_slice(), *n)).collect();
    let probs = aggregate_scores(&pairs)?;
    let s = cfg.sample_size(d);
    let sample = if s >= d {
        FeatureSample::exhaustive(probs)?
    } else {
        sample_without_replacement(&probs, s, seed::derive(cfg.seed, &[stream::SAMPLE]))?
    };
    if let Some(ledger) = ledger {
        for k in 0..order.len() {
            ledger.phase1_uplink[k] += d as u64 * WIRE_BYTES;
            ledger.phase1_downlink[k] += sample.s() as u64 * WIRE_BYTES;
        }
        ledger.recompute_totals();
    }
    Ok(Phase1Result {
        sample,
        client_rank_estimates: scored.iter().map(|(_, _, r)| *r).collect(),
    })
}

/// Fixed probe minibatch drawn from the union of shards.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    xs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

impl ProbeSet {
    /// Up to [`PROBE_CELLS`] cells chosen by a seeded shuffle of all
    /// `(client id, row)` pairs, independent of client order.
    pub fn draw(shards: &[TrainingShard], latent_dim: usize, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        let order = client_order(shards, |s| s.client_id)?;
        let mut all: Vec<(usize, usize)> = order
            .iter()
            .flat_map(|&c| (0..shards[c].n()).map(move |i| (c, i)))
            .collect();
        all.shuffle(&mut seed::rng(seed, &[stream::PROBE]));
        all.truncate(PROBE_CELLS);
        let probe_seed = seed::derive(seed, &[stream::PROBE, 1]);
        Ok(Self {
            xs: all.iter().map(|&(c, i)| shards[c].input(i)).collect(),
            cs: all.iter().map(|&(c, i)| shards[c].confounder(i).to_vec()).collect(),
            noise: all
                .iter()
                .map(|&(c, i)| shards[c].noise(probe_seed, 0, i, latent_dim))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn loss(&self, vae: &Vae, params: &VaeParams, lambda: f64) -> Result<LossBreakdown> {
        let data: Vec<Datum> = (0..self.len())
            .map(|i| Datum {
                x: &self.xs[i],
                c: &self.cs[i],
                noise: &self.noise[i],
            })
            .collect();
        // The marginal term needs two cells; a one-cell federation reports it as 0.
        vae.loss(params, &data, if data.len() < 2 { 0.0 } else { lambda })
    }
}

/// Seed for client `client_id`'s local training in round `round`.
pub fn local_seed(master: u64, round: usize, client_id: u32) -> u64 {
    seed::derive(master, &[stream::LOCAL, round as u64, u64::from(client_id)])
}

/// Server update: `U + η_g · Σ_i (n_i/n) ΔW_i`, with the sum taken in
/// ascending client-id order starting from zero.
pub fn aggregate(global: &VaeParams, deltas: &[(u32, usize, &VaeParams)], lr_global: f64) -> VaeParams {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by_key(|&i| deltas[i].0);
    let n: usize = deltas.iter().map(|d| d.1).sum();
    let mut acc = vec![0.0; global.len()];
    for &i in &order {
        let (_, n_i, delta) = deltas[i];
        let w = n_i as f64 / n as f64;
        for (a, d) in acc.iter_mut().zip(&delta.values) {
            *a += w * d;
        }
    }
    VaeParams {
        values: global.values.iter().zip(&acc).map(|(u, a)| u + lr_global * a).collect(),
    }
}

/// Output of [`phase2_train`].
#[derive(Debug, Clone)]
pub struct Phase2Result {
    pub params: VaeParams,
    pub history: Vec<RoundHistory>,
}

/// Phase 2: `R` rounds of broadcast, `K` local SGD steps per client and
/// weighted delta averaging. Clients run in parallel; results are reduced
/// in client-id order.
pub fn phase2_train(
    vae: &Vae,
    init: VaeParams,
    shards: &[TrainingShard],
    cfg: &FedConfig,
    probe: Option<&ProbeSet>,
    mut ledger: Option<&mut CommLedger>,
) -> Result<Phase2Result> {
    if shards.is_empty() {
        return Err(Error::InvalidShard("federation has no clients".into()));
    }
    if vae.config().input_dim == 0 {
        return Err(Error::InvalidFedConfig("empty feature set".into()));
    }
    if cfg.rounds == 0 || cfg.local_steps == 0 {
        return Err(Error::InvalidFedConfig(
            "rounds and local steps must be at least 1".into(),
        ));
    }
    let order = client_order(shards, |s| s.client_id)?;
    if let Some(l) = ledger.as_deref_mut() {
        l.params_count = vae.n_params();
    }
    let local_cfg = cfg.local();
    let mut global = init;
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let outcomes = order
            .par_iter()
            .map(|&c| {
                let shard = &shards[c];
                local_train(
                    vae,
                    &global,
                    shard,
                    &local_cfg,
                    local_seed(cfg.seed, round, shard.client_id),
                )
            })
            .collect::<Vec<_>>();
        let mut deltas = Vec::with_capacity(order.len());
        let mut client_losses = Vec::with_capacity(order.len());
        let mut owned = Vec::with_capacity(order.len());
        for (&c, out) in order.iter().zip(outcomes) {
            let id = shards[c].client_id;
            owned.push(out.map_err(|e| Error::Stage {
                stage: "local_train",
                seed: local_seed(cfg.seed, round, id),
                source: Box::new(e),
            })?);
        }
        for (&c, out) in order.iter().zip(&owned) {
            let id = shards[c].client_id;
            if !out.delta.is_finite() {
                return Err(Error::NonFinite { round, client: id });
            }
            deltas.push((id, shards[c].n(), &out.delta));
            client_losses.push(out.final_loss.total);
        }
        global = aggregate(&global, &deltas, cfg.lr_global);
        if !global.is_finite() {
            return Err(Error::NonFinite {
                round,
                client: u32::MAX,
            });
        }
        if let Some(l) = ledger.as_deref_mut() {
            l.charge_round();
        }
        let probe_loss = match probe {
            Some(p) => p.loss(vae, &global, cfg.lambda)?,
            None => LossBreakdown::default(),
        };
        history.push(RoundHistory {
            round: round + 1,
            probe: probe_loss,
            client_losses,
        });
    }
    Ok(Phase2Result {
        params: global,
        history,
    })
}

/// Pooled confounder standardization from per-client depth moments; one-hot
/// width covers the largest batch id.
/// Moments are merged in client-id order.
pub fn confounder_encoder(shards: &[ClientShard]) -> ConfounderEncoder {
    let mut sorted: Vec<&ClientShard> = shards.iter().collect();
    sorted.sort_by_key(|s| s.client_id());
    let moments: Vec<DepthMoments> = sorted
        .iter()
        .map(|s| DepthMoments::of(s.cells().iter().map(|c| c.depth)))
        .collect();
    let n_batches = shards
        .iter()
        .flat_map(|s| s.cells().iter().map(|c| c.batch_id as usize + 1))
        .max()
        .unwrap_or(1);
    ConfounderEncoder::from_moments(&moments, n_batches)
}

/// Everything produced by a full two-phase run.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub phase1: Phase1Result,
    pub vae: Vae,
    pub params: VaeParams,
    pub history: Vec<RoundHistory>,
    pub ledger: CommLedger,
    /// Training views in ascending client-id order.
    pub shards: Vec<TrainingShard>,
}

/// Runs both phases end to end.
pub fn run_federation(shards: &[ClientShard], cfg: &FedConfig, arch: &VaeSettings) -> Result<FederationOutcome> {
    let d = check_federation(shards)?;
    cfg.validate(d)?;
    let order = client_order(shards, ClientShard::client_id)?;
    let mut ledger = CommLedger::new(order.iter().map(|&i| shards[i].client_id()).collect());
    let phase1 = phase1_select(shards, cfg, Some(&mut ledger))?;
    let encoder = confounder_encoder(shards);
    let vae = arch.build(d, &phase1.sample.selected, encoder.dim(), cfg.lambda)?;
    let training: Vec<TrainingShard> = order
        .iter()
        .map(|&i| TrainingShard::new(&shards[i], &phase1.sample, cfg.rescale_inputs, &encoder))
        .collect::<Result<_>>()?;
    let probe = ProbeSet::draw(&training, arch.latent_dim, cfg.seed)?;
    let mut init = vae.init(&mut seed::rng(cfg.seed, &[stream::INIT]));
    vae.set_output_bias(&mut init, &pooled_feature_means(&training, Some(&mut ledger))?)?;
    let phase2 = phase2_train(&vae, init, &training, cfg, Some(&probe), Some(&mut ledger))?;
    Ok(FederationOutcome {
        phase1,
        vae,
        params: phase2.params,
        history: phase2.history,
        ledger,
        shards: training,
    })
}

/// Federation-wide mean of every selected feature. Each client uplinks its
/// `s` column sums once (charged to phase 1); the server adds them in
/// client-id order and divides by the total cell count.
pub fn pooled_feature_means(shards: &[TrainingShard], ledger: Option<&mut CommLedger>) -> Result<Vec<f64>> {
    let order = client_order(shards, |s| s.client_id)?;
    let s = shards
        .first()
        .ok_or_else(|| Error::InvalidShard("federation has no clients".into()))?
        .input_dim();
    let mut total = vec![0.0; s];
    let mut n = 0usize;
    for &i in &order {
        let sums = shards[i].column_sums();
        if sums.len() != s {
            return Err(Error::Shape(format!(
                "client {} has {} features, expected {s}",
                shards[i].client_id,
                sums.len()
            )));
        }
        total.iter_mut().zip(&sums).for_each(|(t, v)| *t += v);
        n += shards[i].n();
    }
    if let Some(ledger) = ledger {
        for k in 0..order.len() {
            ledger.phase1_uplink[k] += s as u64 * WIRE_BYTES;
        }
        ledger.recompute_totals();
    }
    Ok(total.into_iter().map(|t| t / n as f64).collect())
}

/// Communication summary for one sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub rho: f64,
    pub d: usize,
    pub s: usize,
    pub params: usize,
    pub baseline_params: usize,
    /// One parameter message, in MiB.
    pub mib_per_round: f64,
    /// `rounds` messages, in GiB.
    pub total_gib: f64,
    /// `1 − params / baseline_params`.
    pub reduction: f64,
}

/// Parameter count of the model built on the first `s` of `d` features.
pub fn params_at(arch: &VaeSettings, d: usize, s: usize, confounder_dim: usize) -> Result<usize> {
    let selected: Vec<usize> = (0..s).map(|m| m * d / s.max(1)).collect();
    Ok(arch.build(d, &selected, confounder_dim, 1.0)?.n_params())
}

/// Message sizes at `⌊ρd⌋` features against the `ρ = 1` baseline. Block
/// counts use evenly spread features so no block empties out.
pub fn comm_report(cfg: &FedConfig, d: usize, arch: &VaeSettings, confounder_dim: usize) -> Result<CommSummary> {
    cfg.validate(d)?;
    let s = cfg.sample_size(d);
    let params = params_at(arch, d, s, confounder_dim)?;
    let baseline_params = params_at(arch, d, d, confounder_dim)?;
    Ok(summary_from_counts(cfg.rho, d, s, params, baseline_params, cfg.rounds))
}

pub fn summary_from_counts(
    rho: f64,
    d: usize,
    s: usize,
    params: usize,
    baseline_params: usize,
    rounds: usize,
) -> CommSummary {
    let mib = params as f64 * WIRE_BYTES as f64 / f64::from(1u32 << 20);
    CommSummary {
        rho,
        d,
        s,
        params,
        baseline_params,
        mib_per_round: mib,
        total_gib: mib * rounds as f64 / 1024.0,
        reduction: 1.0 - params as f64 / baseline_params as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_arithmetic_from_parameter_counts() {
        // 16.55M parameters per message, 100 rounds.
        let base = summary_from_counts(1.0, 127_219, 127_219, 16_550_000, 16_550_000, 100);
        assert!((base.mib_per_round - 63.13).abs() < 0.01);
        assert!((base.total_gib - 6.16).abs() < 0.01);
        assert_eq!(base.reduction, 0.0);
        let sampled = summary_from_counts(0.2, 127_219, 25_443, 3_420_000, 16_550_000, 100);
        assert!((sampled.mib_per_round - 13.05).abs() < 0.01);
        assert!((sampled.reduction - 0.793).abs() < 0.002);
    }

    #[test]
    fn desk_scale_reduction_band() {
        let arch = VaeSettings::default();
        let cfg = FedConfig::default();
        let summary = comm_report(&cfg, 10_000, &arch, 6).unwrap();
        assert_eq!(summary.s, 2000);
        assert!((0.75..=0.81).contains(&summary.reduction), "{}", summary.reduction);
        let full = comm_report(&FedConfig { rho: 1.0, ..cfg }, 10_000, &arch, 6).unwrap();
        assert_eq!(full.reduction, 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = FedConfig::default();
        assert!(cfg.validate(100).is_ok());
        assert!(FedConfig {
            rho: 0.0,
            ..cfg.clone()
        }
        .validate(100)
        .is_err());
        assert!(FedConfig {
            rho: 0.005,
            ..cfg.clone()
        }
        .validate(100)
        .is_err());
        assert!(FedConfig {
            rounds: 0,
            ..cfg.clone()
        }
        .validate(100)
        .is_err());
        assert!(FedConfig { rho: 1.5, ..cfg }.validate(100).is_err());
    }

    #[test]
    fn zero_deltas_leave_params_unchanged() {
        let g = VaeParams {
            values: vec![1.0, -2.0, 0.5],
        };
        let z = VaeParams::zeros(3);
        assert_eq!(aggregate(&g, &[(0, 5, &z), (1, 7, &z)], 1.0), g);
    }

    #[test]
    fn identical_deltas_average_to_themselves() {
        let g = VaeParams::zeros(2);
        let d = VaeParams {
            values: vec![0.25, -0.5],
        };
        assert_eq!(aggregate(&g, &[(3, 10, &d), (1, 10, &d)], 1.0), d);
    }
}

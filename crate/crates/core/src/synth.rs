//! Planted-structure synthetic scATAC-like data.
//!
//! Features are laid out as `K` contiguous type-specific blocks of
//! `peaks_per_type`, followed by `shared_peaks` common signal features, then
//! background. A cell of type `k` draws `Poisson(depth_mean)` fragments; each
//! fragment lands uniformly in the type's signal set (own block plus shared)
//! with probability `snr`, otherwise uniformly in the background. Repeated hits
//! binarize to one.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_cells, CellRecord, ClientShard, DatasetManifest, ManifestClient};
use crate::error::{Error, Result};
use crate::matrix::{save_matrix, SparseBinaryMatrix};
use crate::seed;

/// Cell-type names used by the five-type presets, in label-code order.
pub const TYPE_NAMES: [&str; 5] = ["MONO", "NEU", "CMP", "MEGA", "ERY"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_types: usize,
    pub d: usize,
    pub peaks_per_type: usize,
    pub shared_peaks: usize,
    pub snr: f64,
    pub depth_mean: f64,
    pub type_counts: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_types: 5,
            d: 10_000,
            peaks_per_type: 200,
            shared_peaks: 500,
            snr: 0.9,
            depth_mean: 3_000.0,
            type_counts: vec![1_000; 5],
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthParams(m));
        if self.n_types == 0 || self.d == 0 || self.peaks_per_type == 0 {
            return bad("n_types, d and peaks_per_type must be positive".into());
        }
        if self.type_counts.len() != self.n_types {
            return bad(format!(
                "{} type counts for {} types",
                self.type_counts.len(),
                self.n_types
            ));
        }
        if self.type_counts.contains(&0) {
            return bad("every type count must be positive".into());
        }
        if self.peaks_per_type * self.n_types + self.shared_peaks > self.d {
            return bad("signal features exceed d".into());
        }
        if !(self.snr > 0.0 && self.snr <= 1.0) {
            return bad(format!("snr {} outside (0, 1]", self.snr));
        }
        if self.snr < 1.0 && self.background().is_empty() {
            return bad("snr < 1 needs at least one background feature".into());
        }
        if !(self.depth_mean.is_finite() && self.depth_mean > 0.0) {
            return bad(format!("depth_mean {} must be positive", self.depth_mean));
        }
        Ok(())
    }

    /// The type-specific marker block of type `k`.
    pub fn markers(&self, k: usize) -> Range<usize> {
        k * self.peaks_per_type..(k + 1) * self.peaks_per_type
    }

    pub fn shared(&self) -> Range<usize> {
        let start = self.n_types * self.peaks_per_type;
        start..start + self.shared_peaks
    }

    pub fn background(&self) -> Range<usize> {
        self.shared().end..self.d
    }

    pub fn n_cells(&self) -> usize {
        self.type_counts.iter().sum()
    }

    fn signal_feature(&self, k: usize, u: usize) -> usize {
        if u < self.peaks_per_type {
            self.markers(k).start + u
        } else {
            self.shared().start + (u - self.peaks_per_type)
        }
    }
}

/// A generated dataset plus the pre-binarization fragment count of each cell.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub matrix: SparseBinaryMatrix,
    pub cells: Vec<CellRecord>,
    pub fragments: Vec<u64>,
}

pub fn generate(params: &SynthParams) -> Result<SynthData> {
    generate_client(params, 0, "cell")
}

/// Generates one client's cells. Cell ids are `{prefix}{index:06}` and every
/// batch id is `client`.
pub fn generate_client(params: &SynthParams, client: u32, prefix: &str) -> Result<SynthData> {
    params.validate()?;
    let labels: Vec<usize> = params
        .type_counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let depth = Poisson::new(params.depth_mean).map_err(|e| Error::InvalidSynthParams(e.to_string()))?;
    let signal_size = params.peaks_per_type + params.shared_peaks;
    let bg = params.background();

    let rows: Vec<(Vec<u32>, u64)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut rng = seed::rng(params.seed, &[seed::stream::SYNTH, u64::from(client), i as u64]);
            let n_frag = depth.sample(&mut rng) as u64;
            let n_signal = if params.snr >= 1.0 {
                n_frag
            } else {
                Binomial::new(n_frag, params.snr)
                    .expect("snr validated")
                    .sample(&mut rng)
            };
            let mut row = Vec::with_capacity(n_frag as usize);
            for _ in 0..n_signal {
                row.push(params.signal_feature(k, rng.random_range(0..signal_size)) as u32);
            }
            for _ in n_signal..n_frag {
                row.push(rng.random_range(bg.clone()) as u32);
            }
            row.sort_unstable();
            row.dedup();
            (row, n_frag)
        })
        .collect();

    let matrix = SparseBinaryMatrix::from_rows(params.d, rows.iter().map(|(r, _)| r))?;
    let cells = labels
        .iter()
        .zip(&rows)
        .enumerate()
        .map(|(i, (&k, (row, _)))| CellRecord {
            cell_id: format!("{prefix}{i:06}"),
            label: k as u32,
            batch_id: client,
            depth: row.len() as u64,
        })
        .collect();
    let fragments = rows.iter().map(|&(_, f)| f).collect();
    Ok(SynthData {
        matrix,
        cells,
        fragments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Homogeneous,
    VaryingDepth,
    ConfoundedHetero,
    Imbalance,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::Homogeneous,
        ScenarioName::VaryingDepth,
        ScenarioName::ConfoundedHetero,
        ScenarioName::Imbalance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Homogeneous => "homogeneous",
            ScenarioName::VaryingDepth => "varying_depth",
            ScenarioName::ConfoundedHetero => "confounded_hetero",
            ScenarioName::Imbalance => "imbalance",
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{s}`")))
    }
}

/// Per-client generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub snr: f64,
    pub depth_mean: f64,
    pub type_counts: Vec<usize>,
}

/// A named scenario at full scale: one [`ClientSpec`] per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub name: ScenarioName,
    pub clients: Vec<ClientSpec>,
}

const CONFOUNDED_TABLE: [[usize; 5]; 5] = [
    [5_000, 4_000, 3_000, 2_000, 1_000],
    [4_000, 3_000, 2_000, 1_000, 5_000],
    [3_000, 2_000, 1_000, 5_000, 4_000],
    [2_000, 1_000, 5_000, 4_000, 3_000],
    [1_000, 5_000, 4_000, 3_000, 2_000],
];
const CONFOUNDED_SNR: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];
const IMBALANCE_TOTALS: [usize; 5] = [8_000, 5_000, 500, 5_000, 5_000];
const VARYING_DEPTHS: [f64; 5] = [3_000.0, 4_000.0, 5_000.0, 6_000.0, 7_000.0];
const HOMOGENEOUS_PER_CLIENT: usize = 2_000;
const N_CLIENTS: usize = 5;

impl ScenarioPreset {
    /// The full-scale preset. Settings the preset does not pin (SNR for the
    /// homogeneous, depth and imbalance scenarios; depth elsewhere) come from
    /// `base`.
    pub fn full(name: ScenarioName, base: &SynthParams) -> Self {
        let spec = |snr, depth_mean, type_counts: Vec<usize>| ClientSpec {
            snr,
            depth_mean,
            type_counts,
        };
        let clients = match name {
            ScenarioName::Homogeneous => (0..N_CLIENTS)
                .map(|_| spec(base.snr, base.depth_mean, vec![HOMOGENEOUS_PER_CLIENT; 5]))
                .collect(),
            ScenarioName::VaryingDepth => VARYING_DEPTHS
                .iter()
                .map(|&depth| spec(base.snr, depth, vec![HOMOGENEOUS_PER_CLIENT; 5]))
                .collect(),
            ScenarioName::ConfoundedHetero => CONFOUNDED_TABLE
                .iter()
                .zip(CONFOUNDED_SNR)
                .map(|(row, snr)| spec(snr, base.depth_mean, row.to_vec()))
                .collect(),
            ScenarioName::Imbalance => (0..N_CLIENTS)
                .map(|_| {
                    spec(
                        base.snr,
                        base.depth_mean,
                        IMBALANCE_TOTALS.iter().map(|t| t / N_CLIENTS).collect(),
                    )
                })
                .collect(),
        };
        Self { name, clients }
    }

    /// Scales every cell count by `scale`, rounding to nearest.
    pub fn scaled(&self, scale: f64) -> Result<Vec<ClientSpec>> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::InvalidSynthParams(format!("scale {scale} outside (0, 1]")));
        }
        self.clients
            .iter()
            .enumerate()
            .map(|(client, c)| {
                let type_counts = c
                    .type_counts
                    .iter()
                    .enumerate()
                    .map(|(label, &n)| {
                        let count = (n as f64 * scale).round() as usize;
                        if count < 10 {
                            Err(Error::ScaleTooSmall {
                                scale,
                                client,
                                label,
                                count,
                            })
                        } else {
                            Ok(count)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClientSpec {
                    type_counts,
                    ..c.clone()
                })
            })
            .collect()
    }
}

/// What was generated for a scenario, without the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: ScenarioName,
    pub scale: f64,
    pub d: usize,
    pub seed: u64,
    pub clients: Vec<ClientSpec>,
}

/// Generates every client of a preset at `scale`. Clients share the feature
/// layout of `base`; each has its own seed substream.
pub fn build_scenario(
    preset: &ScenarioPreset,
    scale: f64,
    base: &SynthParams,
) -> Result<(ScenarioInfo, Vec<ClientShard>)> {
    let specs = preset.scaled(scale)?;
    let shards = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let params = SynthParams {
                n_types: spec.type_counts.len(),
                snr: spec.snr,
                depth_mean: spec.depth_mean,
                type_counts: spec.type_counts.clone(),
                ..base.clone()
            };
            let data = generate_client(&params, i as u32, &format!("c{i}_"))?;
            ClientShard::new(data.matrix, data.cells)
        })
        .collect::<Result<Vec<_>>>()?;
    let info = ScenarioInfo {
        name: preset.name,
        scale,
        d: base.d,
        seed: base.seed,
        clients: specs,
    };
    Ok((info, shards))
}

/// Writes `client{i}.mtx`, `client{i}.cells.csv` and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, info: &ScenarioInfo, shards: &[ClientShard]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clients = Vec::with_capacity(shards.len());
    for (i, s) in shards.iter().enumerate() {
        let matrix = format!("client{i}.mtx");
        let cells = format!("client{i}.cells.csv");
        save_matrix(s.matrix(), dir.join(&matrix))?;
        save_cells(s.cells(), dir.join(&cells))?;
        clients.push(ManifestClient {
            matrix: matrix.into(),
            cells: cells.into(),
        });
    }
    let manifest = DatasetManifest {
        clients,
        d: info.d,
        scenario: info.name.as_str().to_string(),
        seed: info.seed,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            n_types: 3,
            d: 400,
            peaks_per_type: 20,
            shared_peaks: 10,
            snr: 0.8,
            depth_mean: 200.0,
            type_counts: vec![30, 20, 10],
            seed: 42,
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = small();
        p.snr = 0.0;
        assert!(p.validate().is_err());
        p = small();
        p.peaks_per_type = 200;
        assert!(p.validate().is_err());
        p = small();
        p.type_counts = vec![1, 2];
        assert!(p.validate().is_err());
        p = small();
        p.type_counts[1] = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn snr_one_with_heavy_depth_fills_signal_set_exactly() {
        let p = SynthParams {
            snr: 1.0,
            depth_mean: 2_000.0,
            ..small()
        };
        let data = generate(&p).unwrap();
        for (i, c) in data.cells.iter().enumerate() {
            let k = c.label as usize;
            let expected: Vec<u32> = p.markers(k).chain(p.shared()).map(|j| j as u32).collect();
            assert_eq!(data.matrix.row(i), expected.as_slice(), "cell {i}");
        }
    }

    #[test]
    fn labels_depths_and_determinism() {
        let p = small();
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.cells.iter().filter(|c| c.label == 2).count(), 10);
        for (i, c) in a.cells.iter().enumerate() {
            assert_eq!(c.depth as usize, a.matrix.row(i).len());
            assert!(c.depth <= a.fragments[i]);
        }
        let c = generate(&SynthParams { seed: 43, ..p }).unwrap();
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn default_density_is_sparse() {
        let p = SynthParams {
            type_counts: vec![200; 5],
            ..SynthParams::default()
        };
        let data = generate(&p).unwrap();
        assert!(data.matrix.density() <= 0.1, "density {}", data.matrix.density());
    }

    #[test]
    fn confounded_preset_matches_table() {
        let base = SynthParams::default();
        let preset = ScenarioPreset::full(ScenarioName::ConfoundedHetero, &base);
        let c = preset.scaled(1.0).unwrap();
        assert_eq!(c[0].snr, 0.4);
        assert_eq!(c[0].type_counts, vec![5_000, 4_000, 3_000, 2_000, 1_000]);
        assert_eq!(c[1].snr, 0.5);
        assert_eq!(c[1].type_counts[4], 5_000);
        assert_eq!(c[4].snr, 0.8);
        assert_eq!(c[4].type_counts, vec![1_000, 5_000, 4_000, 3_000, 2_000]);
    }

    #[test]
    fn varying_depth_preset() {
        let preset = ScenarioPreset::full(ScenarioName::VaryingDepth, &SynthParams::default());
        let depths: Vec<f64> = preset.clients.iter().map(|c| c.depth_mean).collect();
        assert_eq!(depths, vec![3_000.0, 4_000.0, 5_000.0, 6_000.0, 7_000.0]);
    }

    #[test]
    fn imbalance_preset_totals() {
        let preset = ScenarioPreset::full(ScenarioName::Imbalance, &SynthParams::default());
        let totals: Vec<usize> = (0..5)
            .map(|k| preset.clients.iter().map(|c| c.type_counts[k]).sum())
            .collect();
        let by_name: Vec<(&str, usize)> = TYPE_NAMES.iter().copied().zip(totals.iter().copied()).collect();
        assert!(by_name.contains(&("MONO", 8_000)));
        assert!(by_name.contains(&("NEU", 5_000)));
        assert!(by_name.contains(&("MEGA", 5_000)));
        assert!(by_name.contains(&("ERY", 5_000)));
        assert!(by_name.contains(&("CMP", 500)));
        let total: usize = totals.iter().sum();
        assert_eq!(total, 23_500);
        let cmp_share = 500.0 / total as f64;
        assert!((cmp_share - 0.021).abs() < 0.0005);
        assert_eq!(totals.iter().max().unwrap() / totals.iter().min().unwrap(), 16);
    }

    #[test]
    fn scale_too_small_is_rejected() {
        let preset = ScenarioPreset::full(ScenarioName::Imbalance, &SynthParams::default());
        assert!(matches!(preset.scaled(0.05), Err(Error::ScaleTooSmall { .. })));
        assert!(preset.scaled(0.0).is_err());
        assert!(preset.scaled(0.1).is_ok());
    }

    #[test]
    fn homogeneous_scenario_shards() {
        let base = SynthParams {
            d: 1_000,
            peaks_per_type: 50,
            shared_peaks: 50,
            depth_mean: 300.0,
            ..SynthParams::default()
        };
        let preset = ScenarioPreset::full(ScenarioName::Homogeneous, &base);
        let (info, shards) = build_scenario(&preset, 0.1, &base).unwrap();
        assert_eq!(shards.len(), 5);
        assert!(shards.iter().all(|s| s.n_i() == 1_000));
        assert!(info.clients.iter().all(|c| c.snr == base.snr));
        let per_type: Vec<usize> = (0..5)
            .map(|k| shards.iter().flat_map(|s| s.cells()).filter(|c| c.label == k).count())
            .collect();
        assert_eq!(per_type, vec![1_000; 5]);
        for (i, s) in shards.iter().enumerate() {
            assert_eq!(s.client_id(), i as u32);
        }
    }
}

//! End-to-end experiment orchestration: configuration, the full pipeline
//! from data to metrics, on-disk artifacts, and cross-run comparison tables.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ClientShard, DatasetManifest};
use crate::error::{Error, Result};
use crate::fedsim::{
    confounder_encoder, params_at, run_federation, summary_from_counts, CommLedger, CommSummary, FedConfig,
    RoundHistory, VaeSettings,
};
use crate::metrics::{evaluate, MetricReport};
use crate::seed::{self, stream};
use crate::synth::{build_scenario, ScenarioName, ScenarioPreset, SynthParams};
use crate::vae::{embed, write_embeddings};

/// JSON schema of [`ExperimentConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("experiment_schema.json");

/// Version of the report layout.
pub const REPORT_FORMAT: u32 = 1;

/// Selected features listed in a report.
pub const TOP_FEATURES: usize = 20;

/// Where the cells come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    Preset(PresetChoice),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetChoice {
    pub name: ScenarioName,
    #[serde(default = "full_scale")]
    pub scale: f64,
}

fn full_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Cluster count; the number of distinct true labels when absent.
    pub k: Option<usize>,
    pub restarts: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { k: None, restarts: 10 }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    #[serde(default)]
    pub synth: SynthParams,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub vae: VaeSettings,
    #[serde(default)]
    pub metrics: MetricOptions,
    pub output_dir: PathBuf,
    /// Master seed; copied into `synth.seed` and `fed.seed` on resolution.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty-printed JSON, as written beside run outputs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// The config with the master seed propagated into every sub-config.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.fed.seed = self.seed;
        self
    }

    /// Checks every setting that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let d = match &self.scenario {
            ScenarioSource::Preset(p) => {
                if !(p.scale > 0.0 && p.scale <= 1.0) {
                    return Err(Error::InvalidConfig(format!("scale {} outside (0, 1]", p.scale)));
                }
                self.synth.validate()?;
                ScenarioPreset::full(p.name, &self.synth).scaled(p.scale)?;
                self.synth.d
            }
            ScenarioSource::Manifest(path) => DatasetManifest::load(path)?.d,
        };
        self.fed.validate(d)?;
        if self.metrics.restarts == 0 || self.metrics.k == Some(0) {
            return Err(Error::InvalidConfig("metrics need k >= 1 and restarts >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every numerics-relevant field (all
    /// but `output_dir`).
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self.clone().resolved()).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("output_dir");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    fn scenario_name(&self) -> Result<String> {
        Ok(match &self.scenario {
            ScenarioSource::Preset(p) => p.name.as_str().to_string(),
            ScenarioSource::Manifest(path) => DatasetManifest::load(path)?.scenario,
        })
    }
}

/// The selected feature set in brief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub d: usize,
    pub s: usize,
    /// Highest-probability selected features as `(index, probability)`.
    pub top_features: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub levfed: String,
    pub report_format: u32,
}

/// Everything a run produces apart from the model and embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub scenario: String,
    pub n_cells: usize,
    pub n_clients: usize,
    pub sample: SampleSummary,
    pub history: Vec<RoundHistory>,
    pub ledger: CommLedger,
    /// Message sizes against the `ρ = 1` model.
    pub comm: CommSummary,
    pub metrics: MetricReport,
    pub versions: Versions,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// File names inside the output directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const REPORT: &str = "report.json";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const HISTORY: &str = "history.csv";
    pub const LEDGER: &str = "ledger.json";
    pub const TIMESTAMPS: &str = "timestamps.json";
}

fn stage<T>(name: &'static str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        seed,
        source: Box::new(e),
    })
}

/// Loads or generates the federation described by `cfg`.
pub fn load_scenario(cfg: &ExperimentConfig) -> Result<Vec<ClientShard>> {
    match &cfg.scenario {
        ScenarioSource::Preset(p) => {
            let preset = ScenarioPreset::full(p.name, &cfg.synth);
            Ok(build_scenario(&preset, p.scale, &cfg.synth)?.1)
        }
        ScenarioSource::Manifest(path) => {
            let manifest = DatasetManifest::load(path)?;
            manifest.load_shards(path.parent().unwrap_or(Path::new(".")))
        }
    }
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Files written so far; removed again unless the run completes.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
            done: false,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

fn history_csv(history: &[RoundHistory]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "prior", "marginal", "recon", "total"])?;
    for h in history {
        w.write_record([
            h.round.to_string(),
            format!("{:e}", h.probe.prior),
            format!("{:e}", h.probe.marginal),
            format!("{:e}", h.probe.recon),
            format!("{:e}", h.probe.total),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("<history>", e.into_error()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Runs the pipeline without touching the filesystem (beyond reading a
/// manifest): data, both training phases, embedding and clustering.
pub fn compute_run(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<u8>, Vec<u8>)> {
    let cfg = cfg.clone().resolved();
    let seed = cfg.seed;
    stage("validate", seed, cfg.validate())?;
    let shards = stage("load", seed, load_scenario(&cfg))?;
    let out = stage("train", seed, run_federation(&shards, &cfg.fed, &cfg.vae))?;

    let (mut ids, mut z, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for s in &out.shards {
        z.extend(stage("embed", seed, embed(&out.vae, &out.params, s))?);
        ids.extend_from_slice(s.cell_ids());
        labels.extend_from_slice(s.labels());
    }
    let k = cfg.metrics.k.unwrap_or_else(|| {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    });
    let metric_seed = seed::derive(seed, &[stream::KMEANS]);
    let metrics = stage(
        "metrics",
        seed,
        evaluate(&z, &labels, k, cfg.metrics.restarts, metric_seed),
    )?;

    let sample = &out.phase1.sample;
    let d = sample.d();
    let baseline = stage(
        "comm",
        seed,
        params_at(&cfg.vae, d, d, confounder_encoder(&shards).dim()),
    )?;
    let comm = summary_from_counts(cfg.fed.rho, d, sample.s(), out.vae.n_params(), baseline, cfg.fed.rounds);
    let mut top: Vec<(usize, f64)> = sample.selected.iter().map(|&j| (j, sample.probs[j])).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(TOP_FEATURES);

    let mut checkpoint = Vec::new();
    stage(
        "checkpoint",
        seed,
        out.vae.save_checkpoint(&out.params, &mut checkpoint),
    )?;
    let mut embeddings = Vec::new();
    stage("embed", seed, write_embeddings(&ids, &z, &mut embeddings))?;

    let report = RunReport {
        config_hash: cfg.hash(),
        scenario: stage("load", seed, cfg.scenario_name())?,
        config: cfg,
        n_cells: z.len(),
        n_clients: shards.len(),
        sample: SampleSummary {
            d,
            s: sample.s(),
            top_features: top,
        },
        history: out.history,
        ledger: out.ledger,
        comm,
        metrics,
        versions: Versions {
            levfed: env!("CARGO_PKG_VERSION").to_string(),
            report_format: REPORT_FORMAT,
        },
    };
    Ok((report, checkpoint, embeddings))
}

/// Runs the pipeline and writes every artifact into `cfg.output_dir`. On
/// failure, files written by this call are removed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = unix_seconds();
    let cfg = cfg.clone().resolved();
    let (report, checkpoint, embeddings) = compute_run(&cfg)?;
    let seed = cfg.seed;
    let mut outputs = stage("write", seed, Outputs::new(&cfg.output_dir))?;
    let timestamps = serde_json::json!({ "started_unix": started, "finished_unix": unix_seconds() });
    let writes: [(&str, Vec<u8>); 7] = [
        (files::CONFIG, cfg.to_json().into_bytes()),
        (files::CHECKPOINT, checkpoint),
        (files::EMBEDDINGS, embeddings),
        (files::HISTORY, history_csv(&report.history)?),
        (files::LEDGER, json_bytes(&report.ledger)?),
        (files::REPORT, json_bytes(&report)?),
        (files::TIMESTAMPS, json_bytes(&timestamps)?),
    ];
    for (name, bytes) in &writes {
        stage("write", seed, outputs.write(name, bytes))?;
    }
    outputs.done = true;
    Ok(report)
}

/// One row per run: `config_hash,rho,ari,silhouette,mib_per_round,total_gib,reduction_pct`.
/// Runs must share a scenario and feature count.
pub fn compare_runs(reports: &[RunReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::Compare(format!(
            "need at least 2 reports, got {}",
            reports.len()
        )));
    }
    let first = &reports[0];
    if let Some(bad) = reports
        .iter()
        .find(|r| r.scenario != first.scenario || r.sample.d != first.sample.d)
    {
        return Err(Error::Compare(format!(
            "scenario `{}` (d = {}) does not match `{}` (d = {})",
            bad.scenario, bad.sample.d, first.scenario, first.sample.d
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash",
        "rho",
        "ari",
        "silhouette",
        "mib_per_round",
        "total_gib",
        "reduction_pct",
    ])?;
    for r in reports {
        w.write_record([
            r.config_hash[..12].to_string(),
            r.comm.rho.to_string(),
            format!("{:.4}", r.metrics.ari),
            r.metrics.silhouette.map_or(String::new(), |s| format!("{s:.4}")),
            format!("{:.4}", r.comm.mib_per_round),
            format!("{:.6}", r.ledger.total as f64 / f64::from(1u32 << 30)),
            format!("{:.2}", 100.0 * r.comm.reduction),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<compare>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::VaeSettings;

    pub(crate) fn tiny_config(dir: &Path, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioSource::Preset(PresetChoice {
                name: ScenarioName::Homogeneous,
                scale: 0.01,
            }),
            synth: SynthParams {
                d: 300,
                peaks_per_type: 20,
                shared_peaks: 20,
                depth_mean: 60.0,
                ..SynthParams::default()
            },
            fed: FedConfig {
                rounds: 2,
                local_steps: 2,
                sketch_size: 16,
                batch_size: 16,
                ..FedConfig::default()
            },
            vae: VaeSettings {
                n_blocks: 4,
                block_hidden: 4,
                trunk_hidden: 8,
                latent_dim: 3,
                ..VaeSettings::default()
            },
            metrics: MetricOptions::default(),
            output_dir: dir.to_path_buf(),
            seed,
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"scenario": {"preset": {"name": "homogeneous"}}, "output_dir": "x", "bogus": 1}"#;
        assert!(ExperimentConfig::from_json(text).is_err());
        let nested = r#"{"scenario": {"preset": {"name": "homogeneous"}}, "output_dir": "x", "fed": {"rhoo": 0.2}}"#;
        assert!(ExperimentConfig::from_json(nested).is_err());
    }

    #[test]
    fn minimal_config_takes_defaults_and_propagates_seed() {
        let text = r#"{"scenario": {"preset": {"name": "imbalance", "scale": 0.1}}, "output_dir": "o", "seed": 9}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.fed.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.fed.rho, FedConfig::default().rho);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_rate_fails_validation() {
        let mut cfg = tiny_config(Path::new("o"), 1);
        cfg.fed.rho = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidFedConfig(_))));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = tiny_config(Path::new("a"), 1);
        let b = tiny_config(Path::new("b"), 1);
        assert_eq!(a.hash(), b.hash());
        let c = tiny_config(Path::new("a"), 2);
        assert_ne!(a.hash(), c.hash());
        let mut e = a.clone();
        e.fed.lr_local *= 2.0;
        assert_ne!(a.hash(), e.hash());
    }

    #[test]
    fn schema_lists_every_config_key() {
        let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let cfg = serde_json::to_value(tiny_config(Path::new("o"), 0)).unwrap();
        let props = &schema["properties"];
        for (key, value) in cfg.as_object().unwrap() {
            assert!(props.get(key).is_some(), "schema lacks `{key}`");
            if let (Some(inner), Some(sub)) = (value.as_object(), props[key].get("properties")) {
                for k in inner.keys() {
                    assert!(sub.get(k).is_some(), "schema lacks `{key}.{k}`");
                }
            }
        }
    }

    #[test]
    fn compare_needs_two_matching_reports() {
        let dir = tempfile::tempdir().unwrap();
        let (report, _, _) = compute_run(&tiny_config(dir.path(), 3)).unwrap();
        assert!(compare_runs(std::slice::from_ref(&report)).is_err());
        let mut other = report.clone();
        other.scenario = "imbalance".into();
        assert!(compare_runs(&[report.clone(), other]).is_err());
        let table = compare_runs(&[report.clone(), report]).unwrap();
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn failed_run_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = tiny_config(&out, 3);
        cfg.fed.lr_local = 1e300;
        assert!(matches!(run_experiment(&cfg), Err(Error::Stage { stage: "train", .. })));
        assert!(!out.exists());
    }
}

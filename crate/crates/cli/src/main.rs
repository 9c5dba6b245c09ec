//! `levfed`: generate federations, score and select features, train the
//! federated model, run verification suites and assemble reports.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use levfed::dataset::load_cells;
use levfed::experiment::{compare_runs, files, run_experiment, ExperimentConfig, RunReport, CONFIG_SCHEMA};
use levfed::leverage::{approx_column_leverage, exact_column_leverage};
use levfed::matrix::load_matrix;
use levfed::metrics::evaluate;
use levfed::seed::{derive, stream};
use levfed::synth::{build_scenario, write_dataset, ScenarioName, ScenarioPreset, SynthParams};
use levfed::vae::read_embeddings;
use levfed::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "levfed", version, about)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario preset and write it as a dataset directory.
    Synth(SynthArgs),
    /// Column leverage scores of one matrix.
    Leverage(LeverageArgs),
    /// Run an experiment from a JSON config.
    Train(TrainArgs),
    /// Run a numerical verification suite.
    Verify(VerifyArgs),
    /// Cluster embeddings and score them against cell labels.
    Report(ReportArgs),
    /// Tabulate several runs of one scenario as CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Master seed.
    #[arg(long, env = "LEVFED_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    scenario: ScenarioName,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Feature count.
    #[arg(long)]
    d: Option<usize>,
    /// Signal fraction for presets that do not pin it.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    depth: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LeverageModeArg {
    Exact,
    Randomized,
}

#[derive(Args)]
struct LeverageArgs {
    /// Matrix Market pattern file.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, value_enum, default_value = "randomized")]
    mode: LeverageModeArg,
    /// Sketch size for the randomized mode.
    #[arg(long, default_value_t = 256)]
    sketch: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// CSV of `feature_index,score`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long, required_unless_present = "print_schema")]
    config: Option<PathBuf>,
    /// Print the config schema and exit.
    #[arg(long)]
    print_schema: bool,
    /// Overrides the config's master seed.
    #[arg(long, env = "LEVFED_SEED")]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    suite: Suite,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Embeddings CSV (`cell_id,z_1..z_k`).
    #[arg(long)]
    embeddings: PathBuf,
    /// Cell metadata CSV; repeat for several clients.
    #[arg(long, required = true)]
    cells: Vec<PathBuf>,
    /// Cluster count; the number of distinct labels when absent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// MetricReport JSON path.
    #[arg(long)]
    out: PathBuf,
    /// One-row CSV `n,k,ari,silhouette,davies_bouldin`.
    #[arg(long)]
    row: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// `report.json` files or run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn synth(a: SynthArgs) -> Result<()> {
    let defaults = SynthParams::default();
    let base = SynthParams {
        d: a.d.unwrap_or(defaults.d),
        snr: a.snr.unwrap_or(defaults.snr),
        depth_mean: a.depth.unwrap_or(defaults.depth_mean),
        seed: a.seed.seed,
        ..defaults
    };
    base.validate()?;
    let preset = ScenarioPreset::full(a.scenario, &base);
    let (info, shards) = build_scenario(&preset, a.scale, &base)?;
    write_dataset(&a.out, &info, &shards)?;
    let cells: usize = shards.iter().map(|s| s.n_i()).sum();
    println!(
        "wrote {} clients, {cells} cells, d = {} to {}",
        shards.len(),
        info.d,
        a.out.display()
    );
    Ok(())
}

fn leverage(a: LeverageArgs) -> Result<()> {
    let matrix = load_matrix(&a.matrix)?;
    let scores = match a.mode {
        LeverageModeArg::Exact => exact_column_leverage(&matrix.to_dense())?,
        LeverageModeArg::Randomized => approx_column_leverage(&matrix, a.sketch, a.seed.seed)?,
    };
    let mut w = csv::Writer::from_path(&a.out).with_context(|| a.out.display().to_string())?;
    w.write_record(["feature_index", "score"])?;
    for (j, l) in scores.scores.iter().enumerate() {
        w.write_record([j.to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    println!(
        "{} scores, sum {:.6}, rank estimate {}",
        scores.scores.len(),
        scores.total(),
        scores.rank_estimate
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    if a.print_schema {
        print!("{CONFIG_SCHEMA}");
        return Ok(());
    }
    let path = a.config.expect("clap enforces --config");
    let mut cfg = ExperimentConfig::load(&path).with_context(|| path.display().to_string())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let report = run_experiment(&cfg.resolved())?;
    println!(
        "ARI {:.4}, s = {}/{}, {} rounds, {} bytes total; outputs in {}",
        report.metrics.ari,
        report.sample.s,
        report.sample.d,
        report.history.len(),
        report.ledger.total,
        report.config.output_dir.display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let report = run_suite(a.suite, a.trials, a.seed.seed)?;
    for p in &report.properties {
        println!(
            "{}: {}/{} passed, {} not applicable, worst violation {:.3e}",
            p.name,
            p.successes,
            p.applicable(),
            p.not_applicable,
            p.worst_violation
        );
    }
    for m in &report.markers {
        println!(
            "feature {}: inclusion {:.4} ± {:.4}, floor {:.4}, {}",
            m.feature,
            m.pi_hat,
            m.sigma_hat,
            m.floor,
            if m.success { "ok" } else { "below floor" }
        );
    }
    if let Some(d) = &report.decomposition {
        for (rho, ok) in &d.monotone {
            println!(
                "rho {rho}: loss curve {}",
                if *ok { "decreasing" } else { "not decreasing" }
            );
        }
        for (rho, ratio, ok) in &d.band {
            println!(
                "rho {rho}: recon ratio to rho 1 {ratio:.3} {}",
                if *ok { "in band" } else { "outside band" }
            );
        }
    }
    let passed = report.passed();
    if let Some(out) = a.out {
        let mut f = File::create(&out).with_context(|| out.display().to_string())?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f)?;
    }
    println!("suite {}: {}", a.suite.as_str(), if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn load_report(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() {
        path.join(files::REPORT)
    } else {
        path.to_path_buf()
    };
    RunReport::load(&file).with_context(|| file.display().to_string())
}

fn report(a: ReportArgs) -> Result<()> {
    let (ids, z) = read_embeddings(File::open(&a.embeddings).with_context(|| a.embeddings.display().to_string())?)?;
    let mut label_of = HashMap::new();
    for path in &a.cells {
        for c in load_cells(path).with_context(|| path.display().to_string())? {
            if label_of.insert(c.cell_id.clone(), c.label).is_some() {
                bail!("cell `{}` appears in more than one metadata row", c.cell_id);
            }
        }
    }
    let labels = ids
        .iter()
        .map(|id| {
            label_of
                .get(id)
                .copied()
                .with_context(|| format!("no metadata for cell `{id}`"))
        })
        .collect::<Result<Vec<u32>>>()?;
    let k = a.k.unwrap_or_else(|| labels.iter().collect::<HashSet<_>>().len());
    let metrics = evaluate(&z, &labels, k, a.restarts, derive(a.seed.seed, &[stream::KMEANS]))?;
    let mut f = File::create(&a.out).with_context(|| a.out.display().to_string())?;
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    writeln!(f)?;
    if let Some(row) = a.row {
        let mut w = csv::Writer::from_path(&row).with_context(|| row.display().to_string())?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        w.write_record(["n", "k", "ari", "silhouette", "davies_bouldin"])?;
        w.write_record([
            metrics.n.to_string(),
            metrics.k.to_string(),
            format!("{:.6}", metrics.ari),
            opt(metrics.silhouette),
            opt(metrics.davies_bouldin),
        ])?;
        w.flush()?;
    }
    println!("ARI {:.4} over {} cells, k = {}", metrics.ari, metrics.n, metrics.k);
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a.runs.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let table = compare_runs(&reports)?;
    match a.out {
        Some(out) => std::fs::write(&out, table).with_context(|| out.display().to_string())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.workers == 0 {
        bail!("--workers must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()?;
    match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Leverage(a) => leverage(a)?,
        Command::Train(a) => train(a)?,
        Command::Verify(a) => return verify(a),
        Command::Report(a) => report(a)?,
        Command::Compare(a) => compare(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

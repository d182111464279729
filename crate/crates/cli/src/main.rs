use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crosstrace::correlate::{correlate, CorrelatorConfig, ThresholdMode};
use crosstrace::eval::{report, run_experiment, Algorithm, ExperimentSpec, ReportFormat};
use crosstrace::ids::RandomIds;
use crosstrace::model::{
    assignment_lines, read_events, read_records, read_spans, results_from_lines, write_events, write_records,
    write_spans, AssignmentLine, GroundTruth, Topology,
};
use crosstrace::reconstruct::{inter_links_from_spans, reconstruct, trace_accuracy};
use crosstrace::sim::{emit_events, generate, measure_concurrency, presets, retime, WorkloadSpec};
use crosstrace::spans::{build_spans, propagate_span_ids, ServiceMap};

#[derive(Parser)]
#[command(name = "crosstrace", version, about = "Delay-based span correlation and trace reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload with ground truth.
    Simulate(SimulateArgs),
    /// Pair syscall events into spans.
    BuildSpans(BuildSpansArgs),
    /// Correlate ingress and egress spans inside each service.
    Correlate(CorrelateArgs),
    /// Assemble traces from spans and correlation lines.
    Reconstruct(ReconstructArgs),
    /// Run the accuracy and runtime grid.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct Shared {
    /// Seed for simulation, retiming, ids and mixture fitting.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fewest high-certainty spans needed to fit delay models.
    #[arg(long, default_value_t = 30)]
    min_fit_samples: usize,
    /// KS p-value a parametric family needs to be accepted.
    #[arg(long, default_value_t = 0.05)]
    ks_alpha: f64,
    /// Largest mixture tried when no parametric family fits.
    #[arg(long, default_value_t = 20)]
    gmm_max_components: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in workload: hotel, hotel-bimodal, chain or leaf.
    #[arg(long, default_value = "hotel", conflicts_with = "spec")]
    preset: String,
    /// Workload spec in TOML instead of a preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    requests: usize,
    /// Target concurrency; 1 leaves requests back to back.
    #[arg(long, default_value_t = 1)]
    concurrency: u32,
    /// Output directory for spans.jsonl, events.jsonl, truth.json and topology.toml.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct BuildSpansArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write pendings that never closed.
    #[arg(long)]
    unclosed: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    spans: PathBuf,
    /// Topology TOML carrying each service's call graph.
    #[arg(long)]
    call_graph: PathBuf,
    /// Only correlate this service.
    #[arg(long)]
    service: Option<String>,
    #[arg(long, default_value_t = 4.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.2)]
    diff_threshold: f64,
    #[arg(long)]
    multi_candidate: bool,
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    multi_candidate_margin: f64,
    /// `adaptive` or `fixed:<µs>`.
    #[arg(long, default_value = "adaptive")]
    threshold: String,
    #[arg(long)]
    out: PathBuf,
    /// Write fitted delay models as JSON here.
    #[arg(long)]
    models_out: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    spans: PathBuf,
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground truth to score against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Print the tree of the first N traces.
    #[arg(long, default_value_t = 0)]
    tree: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "hotel")]
    preset: String,
    #[arg(long, value_delimiter = ',', default_value = "250,500,750,1000,1250,1500")]
    levels: Vec<u32>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "crosstrace,nearest_neighbor")]
    algorithms: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    requests: usize,
    /// `adaptive` or `fixed:<µs>`.
    #[arg(long, default_value = "adaptive")]
    threshold: String,
    /// Grid cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// csv, json or markdown; by default taken from the --out extension.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

fn parse_threshold(s: &str) -> Result<ThresholdMode> {
    if s == "adaptive" {
        return Ok(ThresholdMode::Adaptive);
    }
    match s.strip_prefix("fixed:") {
        Some(v) => Ok(ThresholdMode::Fixed {
            us: v.parse().with_context(|| format!("bad fixed threshold {v}"))?,
        }),
        None => bail!("threshold must be `adaptive` or `fixed:<µs>`, got {s}"),
    }
}

fn correlator_config(shared: &Shared) -> CorrelatorConfig {
    CorrelatorConfig {
        min_fit_samples: shared.min_fit_samples,
        ks_alpha: shared.ks_alpha,
        gmm_max_components: shared.gmm_max_components,
        gmm_seed: shared.seed,
        ..CorrelatorConfig::default()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("create {}", path.display()))?))
}

fn read_topology(path: &Path) -> Result<Topology> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    Ok(Topology::from_toml(&text)?)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let mut s = WorkloadSpec::from_toml(&fs::read_to_string(p)?)?;
            s.request_count = a.requests;
            s.seed = a.shared.seed;
            s
        }
        None => presets::by_name(&a.preset, a.requests, a.shared.seed)
            .with_context(|| format!("unknown preset {}", a.preset))?,
    };
    let dataset = retime(&generate(&spec)?, a.concurrency, a.shared.seed)?;
    fs::create_dir_all(&a.out)?;
    write_spans(&dataset.spans, create(&a.out.join("spans.jsonl"))?)?;
    write_events(&emit_events(&dataset), create(&a.out.join("events.jsonl"))?)?;
    fs::write(a.out.join("truth.json"), dataset.ground_truth.to_json())?;
    fs::write(a.out.join("topology.toml"), dataset.topology.to_toml())?;
    fs::write(a.out.join("workload.toml"), spec.to_toml())?;
    eprintln!(
        "{} requests, {} spans, measured concurrency {:.1}",
        dataset.requests.len(),
        dataset.spans.len(),
        measure_concurrency(&dataset)
    );
    Ok(())
}

fn build(a: BuildSpansArgs) -> Result<()> {
    let events = read_events(open(&a.events)?)?;
    let topo = read_topology(&a.topology)?;
    let prop = propagate_span_ids(&events);
    for d in &prop.dangling {
        eprintln!("warning: event {} carries token {} that no receiver picked up", d.index, d.token);
    }
    let mut ids = RandomIds::new(a.seed);
    let out = build_spans(&prop.events, &ServiceMap::from_topology(&topo), &mut ids)?;
    write_spans(&out.spans, create(&a.out)?)?;
    if let Some(p) = &a.unclosed {
        write_records(&out.unclosed, create(p)?)?;
    }
    eprintln!("{} spans, {} unclosed", out.spans.len(), out.unclosed.len());
    Ok(())
}

fn run_correlate(a: CorrelateArgs) -> Result<()> {
    let spans = read_spans(open(&a.spans)?)?;
    let topo = read_topology(&a.call_graph)?;
    let mut cfg = correlator_config(&a.shared);
    cfg.delta = a.delta;
    cfg.diff_threshold = a.diff_threshold;
    cfg.multi_candidate = a.multi_candidate;
    cfg.multi_candidate_margin = a.multi_candidate_margin;
    cfg.threshold = parse_threshold(&a.threshold)?;
    let graphs: Vec<_> = match &a.service {
        Some(s) => vec![topo.call_graph(s).with_context(|| format!("unknown service {s}"))?],
        None => topo.call_graphs().into_iter().filter(|g| !g.is_leaf()).collect(),
    };
    let mut lines: Vec<AssignmentLine> = Vec::new();
    let mut models = serde_json::Map::new();
    for cg in &graphs {
        let c = correlate(&spans, cg, &cfg)?;
        for w in &c.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!(
            "{}: {} ingress, {} assigned, {} high-certainty, find {:.1} ms, correlate {:.1} ms (fit {:.1}, assign {:.1})",
            cg.service,
            c.spans.ingress.len(),
            c.result.assignments.len(),
            c.high_certainty_count(),
            c.timings.candidate_find.as_secs_f64() * 1e3,
            c.timings.correlate.as_secs_f64() * 1e3,
            c.timings.fit.as_secs_f64() * 1e3,
            c.timings.assign.as_secs_f64() * 1e3
        );
        for m in &c.models {
            eprintln!("  d{}: {:?} {:?} ks_p={:.3}", m.position, m.stage, m.family, m.diagnostics.ks_pvalue);
        }
        lines.extend(assignment_lines(&c.result));
        models.insert(cg.service.clone(), serde_json::to_value(&c.models)?);
    }
    write_records(&lines, create(&a.out)?)?;
    if let Some(p) = &a.models_out {
        fs::write(p, serde_json::to_string_pretty(&models)?)?;
    }
    Ok(())
}

fn run_reconstruct(a: ReconstructArgs) -> Result<()> {
    let spans = read_spans(open(&a.spans)?)?;
    let lines: Vec<AssignmentLine> = read_records(open(&a.assignments)?)?;
    let results = results_from_lines(lines);
    let graph = reconstruct(&spans, &results, &inter_links_from_spans(&spans))?;
    write_spans(&graph.nodes, create(&a.out)?)?;
    let traces = graph.traces();
    eprintln!("{} traces, {} duplicated spans", traces.len(), graph.duplicates);
    let mut stdout = std::io::stdout().lock();
    for t in traces.keys().take(a.tree) {
        writeln!(stdout, "trace {t}")?;
        write!(stdout, "{}", graph.render(t))?;
    }
    if let Some(p) = &a.truth {
        let truth = GroundTruth::from_json(&fs::read_to_string(p)?)?;
        let acc = trace_accuracy(&graph, &results, &truth)?;
        writeln!(stdout, "{}", serde_json::to_string(&acc)?)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut spec = ExperimentSpec::new(&a.preset);
    spec.request_count = a.requests;
    spec.levels = a.levels;
    spec.seeds = (a.shared.seed..a.shared.seed + a.seeds).collect();
    spec.algorithms = a
        .algorithms
        .iter()
        .map(|s| s.parse::<Algorithm>())
        .collect::<Result<_, _>>()?;
    spec.threshold = parse_threshold(&a.threshold)?;
    spec.correlator = correlator_config(&a.shared);
    spec.jobs = a.jobs;
    let out = run_experiment(&spec)?;
    for s in &out.skipped {
        eprintln!("skipped {} at {} seed {}: {}", s.algorithm, s.concurrency, s.seed, s.reason);
    }
    let path = a.out.to_string_lossy().to_string();
    let format = match &a.format {
        Some(f) => f.parse::<ReportFormat>()?,
        None => ReportFormat::from_path(&path),
    };
    fs::write(&a.out, report(&out.rows, format)?)?;
    eprintln!("{} rows written to {path}", out.rows.len());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::BuildSpans(a) => build(a),
        Command::Correlate(a) => run_correlate(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Bench(a) => bench(a),
    }
}

//! Command implementations behind the `gtsynth` binary.
//!
//! Every command writes machine-readable output (JSON or CSV) and a short
//! human summary on standard error. Outputs depend only on the flags, so two
//! runs with the same seed produce identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gtsynth::codebook::{manifest, CodebookConfig};
use gtsynth::covariance::{log_det_pd, read_matrix_csv, CorrelationReport};
use gtsynth::info::{RateRecord, DEFAULT_MC_SAMPLES};
use gtsynth::transforms::TransformKind;
use gtsynth::validation::{HistogramSpec, SignInvarianceReport};
use gtsynth::{
    all_rate_bounds, assign_layers, build_all_codebooks, convergence_sweep, hyper_chain_violations,
    normalize_for_synthesis, observable_covariance, sign_invariance_suite, synthesize_batch,
    uniform_sign_optimality_check, validate_correlation_matrix, validate_correlation_space, GaussianTree,
    LayerDecomposition, RateTuple, SignAssignment, SignDistribution, SweepConfig, SynthesisPlan, TransformLog,
    VirtualCodebooks,
};

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gtsynth::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for bad input, 3 for resource caps, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        use gtsynth::Error as E;
        match self {
            CliError::Usage(_) | CliError::File { .. } => 2,
            CliError::Core(e) if e.is_resource_cap() => 3,
            CliError::Core(
                E::Malformed(_)
                | E::DuplicateNode(_)
                | E::UnknownNode(_)
                | E::SelfLoop(_)
                | E::DuplicateEdge(..)
                | E::NotATree(_)
                | E::GammaOutOfRange { .. }
                | E::NoObservables
                | E::InvalidInput(_)
                | E::TooFewSamples { .. }
                | E::Io(_)
                | E::Json(_)
                | E::Csv(_),
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gtsynth", version, about = "Layered synthesis of latent Gaussian trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a tree (triplet conditions, minimality, sign invariance, layer
    /// form) or screen a correlation matrix for tree representability.
    Validate(ValidateArgs),
    /// Per-layer rate lower bounds.
    Rates(RatesArgs),
    /// Build codebooks and synthesize output blocks.
    Synth(SynthArgs),
    /// Covariance and histogram errors over a rate/block-length grid.
    Sweep(SweepArgs),
    /// Grid search of the sign-mixture information over sign probabilities.
    Signopt(SignoptArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Tree specification (JSON).
    #[arg(long, required_unless_present = "covariance")]
    pub tree: Option<PathBuf>,
    /// Correlation matrix (CSV with an id header row) to screen instead.
    #[arg(long, conflicts_with = "tree")]
    pub covariance: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Probability of a positive sign, shared by every latent.
    #[arg(long, default_value_t = 0.5)]
    pub pi: f64,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    /// Report bits instead of nats.
    #[arg(long)]
    pub bits: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Block length N.
    #[arg(long)]
    pub n: usize,
    /// Codebook rates as a multiple of the layer bounds.
    #[arg(long, default_value_t = 1.2)]
    pub rate_mult: f64,
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pi: f64,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    /// Also store the codebooks (only for small N x R).
    #[arg(long)]
    pub save_codebooks: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Block lengths, strictly increasing.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    pub n: Vec<usize>,
    /// Rate multipliers; a zero-rate arm is added if none is at most 0.25.
    #[arg(long, value_delimiter = ',', default_value = "1.2")]
    pub rate_mult: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pi: f64,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SignoptArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Grid points per latent axis.
    #[arg(long, default_value_t = 9)]
    pub grid: usize,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Rates(a) => cmd_rates(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Signopt(a) => cmd_signopt(&a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

pub fn load_tree(path: &Path) -> CliResult<GaussianTree> {
    Ok(GaussianTree::from_json(&read_text(path)?)?)
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value).map_err(gtsynth::Error::from)?;
    w.write_all(text.as_bytes()).and_then(|_| w.write_all(b"\n")).and_then(|_| w.flush()).map_err(|source| {
        CliError::File { path: path.to_path_buf(), source }
    })
}

/// Print `value` on stdout and, with an output directory, store it there.
fn emit<T: Serialize>(value: &T, out: Option<&Path>, name: &str) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(gtsynth::Error::from)?;
    println!("{text}");
    if let Some(dir) = out {
        prepare_out(dir)?;
        write_json(&dir.join(name), value)?;
    }
    Ok(())
}

fn flush(path: &Path, mut w: BufWriter<fs::File>) -> CliResult<()> {
    w.flush().map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn check_pi(pi: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&pi) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--pi must lie in [0, 1], got {pi}")))
    }
}

/// Layered, normalized form of `tree` with its synthesis plan.
pub struct Prepared {
    pub tree: GaussianTree,
    pub layers: LayerDecomposition,
    pub log: TransformLog,
    pub plan: SynthesisPlan,
}

pub fn prepare(tree: &GaussianTree) -> CliResult<Prepared> {
    let (t, layers, log) = normalize_for_synthesis(tree, &assign_layers(tree))?;
    let plan = SynthesisPlan::new(&t, &layers)?;
    Ok(Prepared { tree: t, layers, log, plan })
}

#[derive(Serialize)]
struct TreeSummary {
    nodes: usize,
    observables: usize,
    latents: usize,
    top_layer: usize,
}

#[derive(Serialize)]
struct TreeValidation {
    tree: TreeSummary,
    non_minimal: bool,
    minimality_issues: Vec<String>,
    correlation: CorrelationReport,
    sign_invariance: Option<SignInvarianceReport>,
    hyper_chain_violations: Vec<String>,
    normalization: NormalizationSummary,
    pass: bool,
}

#[derive(Serialize)]
struct NormalizationSummary {
    pseudo_nodes: usize,
    layer_moves: usize,
    violations_after: Vec<String>,
}

#[derive(Serialize)]
struct MatrixValidation {
    ids: Vec<gtsynth::NodeId>,
    positive_definite: bool,
    correlation: CorrelationReport,
    pass: bool,
}

pub fn cmd_validate(a: &ValidateArgs) -> CliResult<Outcome> {
    if let Some(path) = &a.covariance {
        let (ids, m) = read_matrix_csv(read_text(path)?.as_bytes())?;
        let correlation = validate_correlation_matrix(&ids, &m);
        let positive_definite = log_det_pd(&m).is_some();
        let pass = correlation.valid && positive_definite;
        for v in &correlation.violations {
            let [i, j, k] = v.triplet;
            eprintln!("triplet ({i}, {j}, {k}) fails the {:?} condition: {}", v.condition, v.detail);
        }
        if !positive_definite {
            eprintln!("matrix is not positive definite");
        }
        emit(&MatrixValidation { ids, positive_definite, correlation, pass }, a.out.as_deref(), "validate.json")?;
        return Ok(if pass { Outcome::Pass } else { Outcome::Fail });
    }
    let path = a.tree.as_ref().ok_or_else(|| CliError::Usage("--tree or --covariance is required".into()))?;
    let tree = load_tree(path)?;
    let layers = assign_layers(&tree);
    let sigma = observable_covariance(&tree, &SignAssignment::all_plus(&tree))?;
    let correlation = validate_correlation_space(&sigma);
    let sign_invariance = match sign_invariance_suite(&tree) {
        Ok(r) => Some(r),
        Err(e) if e.is_resource_cap() => {
            eprintln!("sign invariance skipped: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let minimality_issues = tree.minimality_issues();
    for issue in &minimality_issues {
        eprintln!("warning: {issue}");
    }
    let (t2, l2, log) = normalize_for_synthesis(&tree, &layers)?;
    let normalization = NormalizationSummary {
        pseudo_nodes: log.count(TransformKind::PseudoNode),
        layer_moves: log.count(TransformKind::LayerMove),
        violations_after: hyper_chain_violations(&t2, &l2),
    };
    let pass = correlation.valid && sign_invariance.as_ref().is_none_or(|r| r.pass);
    let report = TreeValidation {
        tree: TreeSummary {
            nodes: tree.len(),
            observables: tree.observables().len(),
            latents: tree.latents().len(),
            top_layer: layers.top(),
        },
        non_minimal: !minimality_issues.is_empty(),
        minimality_issues,
        correlation,
        sign_invariance,
        hyper_chain_violations: hyper_chain_violations(&tree, &layers),
        normalization,
        pass,
    };
    eprintln!("validate: {}", if pass { "pass" } else { "FAIL" });
    emit(&report, a.out.as_deref(), "validate.json")?;
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

#[derive(Serialize)]
struct RateLine {
    layer: usize,
    unit: &'static str,
    sum_bound: f64,
    y_bound: f64,
    b_bound: f64,
    stderr: f64,
    samples: usize,
    seed: u64,
}

pub fn cmd_rates(a: &RatesArgs) -> CliResult<Outcome> {
    check_pi(a.pi)?;
    let p = prepare(&load_tree(&a.tree)?)?;
    let pi = SignDistribution::uniform(&p.tree, a.pi)?;
    let bounds = all_rate_bounds(&p.tree, &p.layers, &pi, a.mc_samples, a.seed)?;
    let (unit, scale) = if a.bits { ("bits", std::f64::consts::LN_2) } else { ("nats", 1.0) };
    let lines: Vec<RateLine> = bounds
        .iter()
        .map(RateRecord::from)
        .map(|r| RateLine {
            layer: r.layer,
            unit,
            sum_bound: r.sum_bound_nats / scale,
            y_bound: r.y_bound_nats / scale,
            b_bound: (r.sum_bound_nats - r.y_bound_nats).max(0.0) / scale,
            stderr: r.stderr / scale,
            samples: r.samples,
            seed: r.seed,
        })
        .collect();
    for l in &lines {
        eprintln!("layer {}: R_Y + R_B >= {:.6} {unit}, R_Y >= {:.6} {unit}", l.layer, l.sum_bound, l.y_bound);
    }
    emit(&lines, a.out.as_deref(), "rates.json")?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct SynthConfig<'a> {
    tree: String,
    seed: u64,
    n: usize,
    rate_mult: f64,
    draws: usize,
    pi: f64,
    mc_samples: usize,
    rate_bounds: Vec<RateRecord>,
    codebooks: Vec<gtsynth::codebook::ManifestEntry>,
    observables: &'a [gtsynth::NodeId],
}

fn display_path(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<Outcome> {
    check_pi(a.pi)?;
    if a.n == 0 || a.draws == 0 {
        return Err(CliError::Usage("--n and --draws must be positive".into()));
    }
    if !(a.rate_mult.is_finite() && a.rate_mult >= 0.0) {
        return Err(CliError::Usage("--rate-mult must be finite and nonnegative".into()));
    }
    let p = prepare(&load_tree(&a.tree)?)?;
    let pi = SignDistribution::uniform(&p.tree, a.pi)?;
    let bounds = all_rate_bounds(&p.tree, &p.layers, &pi, a.mc_samples, a.seed)?;
    let rates = RateTuple::from_bounds(&bounds, a.rate_mult)?;
    let config = CodebookConfig { block_len: a.n, rates: rates.clone(), seed: a.seed };
    let entries = manifest(&p.plan, &config)?;
    prepare_out(&a.out)?;
    let batch = if a.save_codebooks {
        let set = build_all_codebooks(&p.plan, a.n, &rates, &pi, a.seed)?;
        let path = a.out.join("codebooks.bin");
        let mut w = create(&path)?;
        set.write_container(&mut w)?;
        flush(&path, w)?;
        synthesize_batch(&set, a.draws, a.seed)?
    } else {
        let source = VirtualCodebooks::new(p.plan.clone(), a.n, rates, pi, a.seed)?;
        synthesize_batch(&source, a.draws, a.seed)?
    };

    let path = a.out.join("samples.csv");
    let mut w = create(&path)?;
    batch.write_csv(&mut w)?;
    flush(&path, w)?;
    let path = a.out.join("chain.jsonl");
    let mut w = create(&path)?;
    batch.write_chain_log(&mut w)?;
    flush(&path, w)?;
    let path = a.out.join("transforms.jsonl");
    let mut w = create(&path)?;
    p.log.write_jsonl(&mut w)?;
    flush(&path, w)?;
    fs::write(a.out.join("tree.json"), p.tree.to_json() + "\n")
        .map_err(|source| CliError::File { path: a.out.join("tree.json"), source })?;
    write_json(&a.out.join("layers.json"), &p.layers)?;
    write_json(
        &a.out.join("config.json"),
        &SynthConfig {
            tree: display_path(&a.tree),
            seed: a.seed,
            n: a.n,
            rate_mult: a.rate_mult,
            draws: a.draws,
            pi: a.pi,
            mc_samples: a.mc_samples,
            rate_bounds: bounds.iter().map(RateRecord::from).collect(),
            codebooks: entries,
            observables: &batch.observables,
        },
    )?;
    eprintln!(
        "synth: {} rows x {} observables, {} transform records, output in {}",
        batch.pooled.nrows(),
        batch.observables.len(),
        p.log.len(),
        a.out.display()
    );
    Ok(Outcome::Pass)
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<Outcome> {
    check_pi(a.pi)?;
    let tree = load_tree(&a.tree)?;
    let config = SweepConfig {
        rate_multipliers: a.rate_mult.clone(),
        block_lens: a.n.clone(),
        draws: a.draws,
        seed: a.seed,
        mc_samples: a.mc_samples,
        histogram: HistogramSpec { bins: a.bins, ..HistogramSpec::default() },
        pi: a.pi,
    };
    let report = convergence_sweep(&tree, &config)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("convergence.json"), &report)?;
    let path = a.out.join("convergence.csv");
    let mut w = create(&path)?;
    report.write_csv(&mut w)?;
    flush(&path, w)?;
    for pt in &report.points {
        eprintln!(
            "rate x{:<5} N={:<6} frobenius {:.4}  max-abs {:.4}",
            pt.rate_mult, pt.block_len, pt.frobenius_error, pt.max_abs_error
        );
    }
    Ok(Outcome::Pass)
}

pub fn cmd_signopt(a: &SignoptArgs) -> CliResult<Outcome> {
    let tree = load_tree(&a.tree)?;
    let report = uniform_sign_optimality_check(&tree, a.grid, a.mc_samples, a.seed)?;
    eprintln!(
        "signopt: uniform {:.6} vs grid minimum {:.6} at {:?} (gap {:.2e}, stderr {:.2e})",
        report.uniform.value, report.argmin.value, report.argmin.pi, report.gap, report.gap_stderr
    );
    emit(&report, a.out.as_deref(), "signopt.json")?;
    Ok(if report.uniform_within_two_stderr { Outcome::Pass } else { Outcome::Fail })
}

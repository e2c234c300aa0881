//! Command-line front end. Exit codes: 0 success, 1 contract violation
//! (gradient check or equivalence failure), 2 usage or input error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::{attention_forward, kernel_curves_csv, AttentionSpec, ScoreKind};
use crate::error::{Error, Result};
use crate::grad::{gradcheck, DEFAULT_FD_STEP};
use crate::ops::{energy_estimate, full_layer_op_counts, reduction_report, score_op_counts, EnergyModel, OpTally, ReductionReport};
use crate::sparse::{linformer_l1_forward, longformer_l1_forward, ProjectionSpec, WindowSpec};
use crate::tensor::{rand_matrix, Matrix, Rng};
use crate::train::{lambda_grid_search_with, summary_csv, train_with, TaskKind, TrainConfig};

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Maximum deviation accepted by `equiv`.
pub const EQUIV_TOLERANCE: f64 = 1e-10;
pub const SEED_ENV: &str = "ECOATTN_SEED";

#[derive(Debug, Parser)]
#[command(name = "ecoattn", version, about = "Distance-based attention kernels, gradient checks and energy accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Kernel-curve CSV: Gaussian vs Laplacian weight as a function of |d|.
    Curves(CurvesArgs),
    /// Score-matrix operation counts and energy reduction report.
    Opcount(OpcountArgs),
    /// Analytic vs central finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Run attention on fixture matrices and print the output matrix.
    Attn(AttnArgs),
    /// Train the toy classifier; JSON lines per epoch plus a summary CSV.
    Train(TrainArgs),
    /// Squared-L2 (λ = 1/2) vs dot-product attention on normalised inputs.
    Equiv(EquivArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Dense,
    Longformer,
    Linformer,
}

#[derive(Debug, Args)]
struct CurvesArgs {
    #[arg(long)]
    dk: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 6.0)]
    dmax: f64,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OpcountArgs {
    /// Sequence length(s), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Key dimension(s), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dk: Vec<usize>,
    /// Also count projections, scaling, softmax and the value product.
    #[arg(long)]
    full_layer: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    pj_mult: Option<f64>,
    #[arg(long)]
    pj_add: Option<f64>,
    #[arg(long)]
    pj_abs_diff: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    kind: ScoreKind,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dk: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[arg(long)]
    kind: ScoreKind,
    #[arg(long, value_enum, default_value_t = Variant::Dense)]
    variant: Variant,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Sliding-window width (longformer variant).
    #[arg(long)]
    window: Option<usize>,
    /// Global token indices, comma separated (longformer variant).
    #[arg(long, value_delimiter = ',')]
    global: Vec<usize>,
    /// Projection dimension (linformer variant); projections are drawn from --seed.
    #[arg(long)]
    proj_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    kind: ScoreKind,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Run one arm per λ and sort by eval accuracy.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Summary CSV destination; written to stderr when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dk: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl clap::builder::ValueParserFactory for ScoreKind {
    type Parser = fn(&str) -> std::result::Result<ScoreKind, String>;

    fn value_parser() -> Self::Parser {
        |s| s.parse().map_err(|e: Error| e.to_string())
    }
}

impl clap::builder::ValueParserFactory for TaskKind {
    type Parser = fn(&str) -> std::result::Result<TaskKind, String>;

    fn value_parser() -> Self::Parser {
        |s| s.parse().map_err(|e: Error| e.to_string())
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("serialisable report");
    s.push('\n');
    s
}

/// Output of one subcommand: primary text, optional side artifact, exit code.
struct Outcome {
    stdout: String,
    stderr: String,
    code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            stdout,
            stderr: String::new(),
            code: 0,
        }
    }
}

fn emit(out: &Option<PathBuf>, text: String) -> Result<String> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::Parameter(format!("writing {}: {e}", path.display())))?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn read_matrix(path: &PathBuf) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parameter(format!("reading {}: {e}", path.display())))?;
    Matrix::from_text(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FullLayerReport {
    scope: &'static str,
    d_model: usize,
    dot_tally: OpTally,
    l1_tally: OpTally,
    dot_pj: f64,
    l1_pj: f64,
    reduction_fraction: f64,
}

#[derive(Serialize)]
struct OpcountReport {
    scope: &'static str,
    dot_tally: OpTally,
    l1_tally: OpTally,
    #[serde(flatten)]
    report: ReductionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    full_layer: Option<FullLayerReport>,
}

fn opcount(a: &OpcountArgs) -> Result<Outcome> {
    let defaults = EnergyModel::default();
    let model = EnergyModel {
        pj_mult: a.pj_mult.unwrap_or(defaults.pj_mult),
        pj_add: a.pj_add.unwrap_or(defaults.pj_add),
        pj_abs_diff: a.pj_abs_diff.unwrap_or(defaults.pj_abs_diff),
        ..defaults
    };
    if a.n.iter().chain(&a.dk).any(|&x| x == 0) {
        return Err(Error::Parameter("--n and --dk must be >= 1".into()));
    }
    let mut reports = Vec::new();
    for &n in &a.n {
        for &dk in &a.dk {
            let full_layer = if a.full_layer {
                let dot_tally = full_layer_op_counts(ScoreKind::DotProduct, n, dk, dk);
                let l1_tally = full_layer_op_counts(ScoreKind::L1, n, dk, dk);
                let (dot_pj, l1_pj) = (energy_estimate(&dot_tally, &model), energy_estimate(&l1_tally, &model));
                Some(FullLayerReport {
                    scope: "full_layer: projections, scores, scaling, softmax, value product, output projection",
                    d_model: dk,
                    dot_tally,
                    l1_tally,
                    dot_pj,
                    l1_pj,
                    reduction_fraction: 1.0 - l1_pj / dot_pj,
                })
            } else {
                None
            };
            reports.push(OpcountReport {
                scope: "score_matrix",
                dot_tally: score_op_counts(ScoreKind::DotProduct, n, n, dk),
                l1_tally: score_op_counts(ScoreKind::L1, n, n, dk),
                report: reduction_report(n, dk, &model)?,
                full_layer,
            });
        }
    }
    let text = match a.format {
        Format::Json if reports.len() == 1 => json_line(&reports[0]),
        Format::Json => json_line(&reports),
        Format::Csv => {
            let mut s = String::from("n,d_k,dot_pj,l1_pj,reduction_fraction,mult_add_ratio");
            if a.full_layer {
                s.push_str(",full_layer_dot_pj,full_layer_l1_pj,full_layer_reduction_fraction");
            }
            s.push('\n');
            for r in &reports {
                let rr = &r.report;
                s.push_str(&format!(
                    "{},{},{},{},{},{}",
                    rr.n, rr.d_k, rr.dot_pj, rr.l1_pj, rr.reduction_fraction, rr.mult_add_ratio
                ));
                if let Some(f) = &r.full_layer {
                    s.push_str(&format!(",{},{},{}", f.dot_pj, f.l1_pj, f.reduction_fraction));
                }
                s.push('\n');
            }
            s
        }
    };
    Ok(Outcome::ok(emit(&a.out, text)?))
}

#[derive(Serialize)]
struct EquivReport {
    n: usize,
    d_k: usize,
    seed: u64,
    max_abs_deviation: f64,
    tolerance: f64,
    pass: bool,
}

/// Random `n × dk` Q, K, V drawn in that order from `seed`.
pub fn equiv_instance(n: usize, dk: usize, seed: u64) -> Result<(Matrix, Matrix, Matrix)> {
    let mut rng = Rng::new(seed);
    Ok((
        rand_matrix(&mut rng, n, dk, 1.0)?,
        rand_matrix(&mut rng, n, dk, 1.0)?,
        rand_matrix(&mut rng, n, dk, 1.0)?,
    ))
}

fn equiv(a: &EquivArgs) -> Result<Outcome> {
    if a.n == 0 || a.dk == 0 {
        return Err(Error::Parameter("--n and --dk must be >= 1".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let (q, k, v) = equiv_instance(a.n, a.dk, seed)?;
    let dev = crate::attention::dot_equivalence_check(&q, &k, &v)?;
    let pass = dev < EQUIV_TOLERANCE;
    let text = json_line(&EquivReport {
        n: a.n,
        d_k: a.dk,
        seed,
        max_abs_deviation: dev,
        tolerance: EQUIV_TOLERANCE,
        pass,
    });
    Ok(Outcome {
        stdout: emit(&a.out, text)?,
        stderr: String::new(),
        code: if pass { 0 } else { 1 },
    })
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let report = gradcheck(a.kind, a.lambda, a.n, a.dk, seed, a.step)?;
    let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
    Ok(Outcome {
        stdout: emit(&a.out, json_line(&report))?,
        stderr: String::new(),
        code: if pass { 0 } else { 1 },
    })
}

fn attn(a: &AttnArgs) -> Result<Outcome> {
    let (q, k, v) = (read_matrix(&a.q)?, read_matrix(&a.k)?, read_matrix(&a.v)?);
    let spec = AttentionSpec::new(a.kind, a.lambda, q.cols())?;
    let o = match a.variant {
        Variant::Dense => attention_forward(&spec, &q, &k, &v)?.o,
        Variant::Longformer => {
            let window = a
                .window
                .ok_or_else(|| Error::Parameter("--variant longformer requires --window".into()))?;
            longformer_l1_forward(&spec, &WindowSpec::new(window, a.global.clone())?, &q, &k, &v)?
        }
        Variant::Linformer => {
            let k_dim = a
                .proj_k
                .ok_or_else(|| Error::Parameter("--variant linformer requires --proj-k".into()))?;
            let proj = ProjectionSpec::random(&mut Rng::new(resolve_seed(a.seed)?), k_dim, k.rows())?;
            linformer_l1_forward(&spec, &proj, &q, &k, &v)?
        }
    };
    Ok(Outcome::ok(emit(&a.out, o.to_text())?))
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'a str,
    lambda: f64,
    epoch: usize,
    loss: f64,
    train_acc: f64,
    eval_acc: f64,
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let mut cfg = TrainConfig::needle_baseline(a.kind, a.lambda);
    if a.seed.is_some() || std::env::var_os(SEED_ENV).is_some() {
        cfg.seed = resolve_seed(a.seed)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.samples {
        cfg.samples = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let task = cfg.task(a.task);
    let kind = a.kind.to_string();
    let mut lines = String::new();
    let mut on_epoch = |lambda: f64, r: &crate::train::EpochRecord| {
        lines.push_str(&json_line(&EpochLine {
            kind: &kind,
            lambda,
            epoch: r.epoch,
            loss: r.loss,
            train_acc: r.train_acc,
            eval_acc: r.eval_acc,
        }));
    };
    let results = if a.lambda_grid.is_empty() {
        vec![train_with(&cfg, &task, |r| on_epoch(a.lambda, r))?]
    } else {
        cfg.lambda_grid = a.lambda_grid.clone();
        lambda_grid_search_with(&cfg, &task, &mut on_epoch)?
    };
    let summary = summary_csv(&results);
    let stderr = match &a.out {
        Some(path) => {
            fs::write(path, &summary).map_err(|e| Error::Parameter(format!("writing {}: {e}", path.display())))?;
            String::new()
        }
        None => summary,
    };
    Ok(Outcome {
        stdout: lines,
        stderr,
        code: 0,
    })
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Curves(a) => {
            let csv = kernel_curves_csv(a.dk, &a.lambda, a.dmax, a.steps)?;
            Ok(Outcome::ok(emit(&a.out, csv)?))
        }
        Command::Opcount(a) => opcount(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Attn(a) => attn(a),
        Command::Train(a) => train_cmd(a),
        Command::Equiv(a) => equiv(a),
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(o) => {
            let _ = out.write_all(o.stdout.as_bytes());
            let _ = err.write_all(o.stderr.as_bytes());
            o.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

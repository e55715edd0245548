//! Command-line front end. Every subcommand is a thin wrapper over a library
//! operation and writes a run manifest next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, ErrorKind, Result};
use crate::influence::{self, AdamState, InfluenceObjects, Order, TargetGradient};
use crate::landmark::{self, Kernel};
use crate::matstore::{self, Dtype, GradientMatrix, IndexList, Role, ZeroPolicy};
use crate::qpsolve::{self, QpProblem, SelectMode};
use crate::sketch::{SketchMethod, SketchSpec};
use crate::toylab::{self, LinearToy, LinearToyConfig, ToyMlp, ToyModel, WeightVariant};
use crate::verify::{self, BoundExperiment, InnerProductConfig, XDist};

#[derive(Debug, Parser)]
#[command(name = "infdist", version, about = "Influence-based training data selection")]
pub struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path (defaults next to the main output, or stderr).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select exactly k source samples.
    Select(SelectArgs),
    /// Compute p (and Q) from gradients.
    Influence(InfluenceArgs),
    /// Solve for weights at a fixed lambda.
    Solve(SolveArgs),
    /// Find lambda giving exactly k nonzero weights.
    TuneLambda(TuneArgs),
    /// Randomly project matrix rows.
    Project(ProjectArgs),
    /// Landmark picking and coefficient fitting.
    #[command(subcommand)]
    Landmark(LandmarkCommand),
    /// Toy experiments and gradient producers.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Monte-Carlo verification reports.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Average,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    First,
    Second,
}

impl From<OrderArg> for Order {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::First => Order::First,
            OrderArg::Second => Order::Second,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    RbfKrr,
    LinearLstsq,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::RbfKrr => Kernel::RbfKrr,
            KernelArg::LinearLstsq => Kernel::LinearLstsq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Hadamard,
    Rademacher,
}

impl From<MethodArg> for SketchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Hadamard => SketchMethod::Hadamard,
            MethodArg::Rademacher => SketchMethod::Rademacher,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct AdamArgs {
    /// Adam first moment (1 x d matrix file).
    #[arg(long, requires = "adam_v")]
    pub adam_m: Option<PathBuf>,
    /// Adam second moment (1 x d matrix file).
    #[arg(long, requires = "adam_m")]
    pub adam_v: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Warm-up steps the moments were accumulated over.
    #[arg(long, default_value_t = 1)]
    pub steps: u32,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Source gradients.
    #[arg(long, conflicts_with_all = ["embeddings", "landmark_grads", "landmark_idx"])]
    pub grads: Option<PathBuf>,
    /// Source embeddings (landmark path).
    #[arg(long, requires_all = ["landmark_grads", "landmark_idx"])]
    pub embeddings: Option<PathBuf>,
    /// Gradients of the landmark samples, in landmark-index order.
    #[arg(long, requires = "embeddings")]
    pub landmark_grads: Option<PathBuf>,
    /// Landmark indices into the source set.
    #[arg(long, requires = "embeddings")]
    pub landmark_idx: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KernelArg::RbfKrr)]
    pub kernel: KernelArg,
    /// RBF bandwidth (median heuristic when absent).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = landmark::DEFAULT_DELTA)]
    pub delta: f64,
    /// Target gradients, one row per target sample.
    #[arg(long)]
    pub target_grads: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Average)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = OrderArg::First)]
    pub order: OrderArg,
    #[arg(long, default_value_t = 1e-3)]
    pub eta: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
    /// Project gradients to this dimension before scoring.
    #[arg(long)]
    pub project_dim: Option<u64>,
    #[arg(long, value_enum, default_value_t = MethodArg::Hadamard)]
    pub project_method: MethodArg,
    #[arg(long)]
    pub project_premask: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub tol_iters: usize,
    #[command(flatten)]
    pub adam: AdamArgs,
    /// Directory for selected.json, weights.json and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfluenceArgs {
    #[arg(long)]
    pub grads: PathBuf,
    #[arg(long)]
    pub target_grads: PathBuf,
    /// Dense target Hessian (d x d), needed for second order.
    #[arg(long)]
    pub target_hessian: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OrderArg::First)]
    pub order: OrderArg,
    #[arg(long, default_value_t = 1e-3)]
    pub eta: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
    #[command(flatten)]
    pub adam: AdamArgs,
    /// Output for p (1 x n).
    #[arg(long)]
    pub out: PathBuf,
    /// Output for Q (n x n).
    #[arg(long)]
    pub q_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Scores p (1 x n).
    #[arg(long)]
    pub p: PathBuf,
    /// Q (n x n); switches to the active-set solver.
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub eta: f64,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub p: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub tol_iters: usize,
    #[arg(long, value_enum, default_value_t = OrderArg::First)]
    pub order: OrderArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Hadamard)]
    pub method: MethodArg,
    #[arg(long)]
    pub dim: u64,
    #[arg(long)]
    pub premask: Option<u64>,
    /// Where to write the sketch spec JSON.
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Subcommand)]
pub enum LandmarkCommand {
    /// Pick landmark indices uniformly at random.
    Pick {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        ell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit landmark coefficients on embeddings.
    Fit {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        landmark_idx: PathBuf,
        #[arg(long, value_enum, default_value_t = KernelArg::RbfKrr)]
        kernel: KernelArg,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = landmark::DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        normalize: bool,
        /// Coefficient matrix output.
        #[arg(long)]
        out: PathBuf,
        /// Sidecar JSON (defaults to the output path with a .json extension).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Uniform,
    Unconstrained,
    Robust,
    /// Worst-case perturbation objective minimized by projected gradient.
    RobustEps,
}

#[derive(Debug, Args)]
pub struct ToyConfigArgs {
    #[arg(long, default_value_t = LinearToyConfig::default().d)]
    pub d: usize,
    #[arg(long, default_value_t = LinearToyConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = LinearToyConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = LinearToyConfig::default().separation)]
    pub separation: f64,
    #[arg(long, default_value_t = LinearToyConfig::default().feature_scale)]
    pub feature_scale: f64,
}

impl ToyConfigArgs {
    fn config(&self, seed: u64) -> LinearToyConfig {
        LinearToyConfig {
            d: self.d,
            lr: self.lr,
            steps: self.steps,
            separation: self.separation,
            feature_scale: self.feature_scale,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Train the linear toy with one weighting variant and write its loss curve.
    RunLinear {
        #[arg(long, value_enum, default_value_t = VariantArg::Uniform)]
        variant: VariantArg,
        #[arg(long, default_value_t = 0.02)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 10_000)]
        pgd_iters: usize,
        #[command(flatten)]
        toy: ToyConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write JVP embeddings of inputs under a seeded tanh MLP.
    Jvp {
        /// Input rows; random Gaussian inputs when absent.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Number of random inputs when --inputs is absent.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Layer widths, input first.
        #[arg(long, value_delimiter = ',', default_value = "8,16,4")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        ell: usize,
        #[arg(long, default_value_t = 4)]
        num_v: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-sample gradients of the linear toy at its initial parameters.
    LinearGrads {
        #[command(flatten)]
        toy: ToyConfigArgs,
        /// Writes source.idm, target.idm and target_hessian.idm.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Basis,
    Isotropic,
    Anisotropic,
}

impl From<DistArg> for XDist {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Basis => XDist::Basis,
            DistArg::Isotropic => XDist::Isotropic,
            DistArg::Anisotropic => XDist::Anisotropic,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Weight-recovery bound under isotropic gradient noise.
    Bound {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random sign-and-permute maps make any distribution isotropic.
    Isotropy {
        #[arg(long, value_enum, default_value_t = DistArg::Anisotropic)]
        dist: DistArg,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noisy inner products are unbiased with the predicted variance.
    InnerProduct {
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long)]
        orthogonal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Second- vs first-order term ratio over step sizes.
    OrderRatio {
        /// p (1 x n); the linear toy is used when absent.
        #[arg(long, requires = "q")]
        p: Option<PathBuf>,
        #[arg(long, requires = "p")]
        q: Option<PathBuf>,
        /// Weights (1 x n matrix file); uniform when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01,0.1")]
        etas: Vec<f64>,
        #[command(flatten)]
        toy: ToyConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 64-bit content digest: the first eight bytes of SHA-256, as hex.
pub fn digest(bytes: &[u8]) -> String {
    let h = Sha256::digest(bytes);
    h[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub config: Value,
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub duration_secs: f64,
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub digest: String,
}

/// Records inputs and outputs while a command runs.
struct Run {
    inputs: BTreeMap<String, InputRecord>,
    outputs: BTreeMap<String, String>,
    config: Value,
}

impl Run {
    fn new() -> Self {
        Self {
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: Value::Null,
        }
    }

    fn read_bytes(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(
            name.to_string(),
            InputRecord {
                path: path.display().to_string(),
                digest: digest(&bytes),
            },
        );
        Ok(bytes)
    }

    fn matrix(&mut self, name: &str, path: &Path, role: Role) -> Result<GradientMatrix> {
        let bytes = self.read_bytes(name, path)?;
        matstore::decode_matrix(&bytes, role, Default::default())
    }

    fn indices(&mut self, name: &str, path: &Path) -> Result<IndexList> {
        let bytes = self.read_bytes(name, path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::invalid(format!("{} is not UTF-8", path.display())))?;
        IndexList::parse(&text)
    }

    fn vector(&mut self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let m = self.matrix(name, path, Role::Moment)?;
        if m.rows() != 1 {
            return Err(Error::dims("row-vector file rows", 1, m.rows()));
        }
        Ok(m.into_data())
    }

    fn write(&mut self, name: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.outputs.insert(name.to_string(), path.display().to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, path: &Path, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, path, text.as_bytes())
    }

    fn write_matrix(&mut self, name: &str, path: &Path, m: &GradientMatrix, dtype: Dtype) -> Result<()> {
        let bytes = matstore::encode_matrix(m, dtype)?;
        self.write(name, path, &bytes)
    }
}

/// Where the manifest goes when `--manifest` is absent.
enum ManifestSink {
    Path(PathBuf),
    Stderr,
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn adam_state(run: &mut Run, a: &AdamArgs) -> Result<Option<AdamState>> {
    match (&a.adam_m, &a.adam_v) {
        (Some(m), Some(v)) => Ok(Some(AdamState {
            m: run.vector("adam_m", m)?,
            v: run.vector("adam_v", v)?,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            steps: a.steps,
        })),
        (None, None) => Ok(None),
        _ => Err(Error::invalid("--adam-m and --adam-v must be given together")),
    }
}

/// Parses arguments (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> std::result::Result<(), CliFailure>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return Err(CliFailure::Usage(e)),
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let go = || execute(&cli, command);
    let result = match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliFailure::Error(Error::invalid(format!("thread pool: {e}"))))?;
            pool.install(go)
        }
        None => go(),
    };
    result.map_err(CliFailure::Error)
}

#[derive(Debug)]
pub enum CliFailure {
    Usage(clap::Error),
    Error(Error),
}

impl CliFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliFailure::Usage(e) => {
                if e.use_stderr() {
                    2
                } else {
                    0
                }
            }
            CliFailure::Error(e) => exit_code(e),
        }
    }

    /// Prints the failure: clap's own rendering for usage, JSON otherwise.
    pub fn report(&self) {
        match self {
            CliFailure::Usage(e) => {
                let _ = e.print();
            }
            CliFailure::Error(e) => eprintln!("{}", error_json(e)),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Numerical => 3,
        ErrorKind::Validation | ErrorKind::Io => 2,
    }
}

pub fn error_json(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Validation => "validation",
        ErrorKind::Numerical => "numerical",
        ErrorKind::Io => "io",
    };
    json!({ "error": kind, "message": e.to_string() }).to_string()
}

fn execute(cli: &Cli, command: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let mut run = Run::new();
    let sink = match &cli.command {
        Command::Select(a) => cmd_select(&mut run, a, cli.seed)?,
        Command::Influence(a) => cmd_influence(&mut run, a)?,
        Command::Solve(a) => cmd_solve(&mut run, a)?,
        Command::TuneLambda(a) => cmd_tune_lambda(&mut run, a)?,
        Command::Project(a) => cmd_project(&mut run, a, cli.seed)?,
        Command::Landmark(c) => cmd_landmark(&mut run, c, cli.seed)?,
        Command::Toy(c) => cmd_toy(&mut run, c, cli.seed)?,
        Command::Verify(c) => cmd_verify(&mut run, c, cli.seed)?,
    };
    let manifest = RunManifest {
        tool: "infdist",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: run.config.clone(),
        inputs: std::mem::take(&mut run.inputs),
        outputs: std::mem::take(&mut run.outputs),
        seed: cli.seed,
        threads: cli.threads,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    match (cli.manifest.clone(), sink) {
        (Some(p), _) | (None, ManifestSink::Path(p)) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e)),
        (None, ManifestSink::Stderr) => {
            eprint!("{text}");
            Ok(())
        }
    }
}

/// Source gradients for selection: read directly, or approximated from
/// landmarks. Rows come back unit-normalized when `normalize` is set (the
/// landmark approximation is left unnormalized).
fn source_gradients(run: &mut Run, a: &SelectArgs) -> Result<GradientMatrix> {
    let norm = |m: GradientMatrix| -> Result<GradientMatrix> {
        if a.normalize {
            matstore::normalize_rows(&m, ZeroPolicy::Keep)
        } else {
            Ok(m)
        }
    };
    if let Some(g) = &a.grads {
        return norm(run.matrix("grads", g, Role::Source)?);
    }
    let (Some(e), Some(gl), Some(li)) = (&a.embeddings, &a.landmark_grads, &a.landmark_idx) else {
        return Err(Error::invalid(
            "need --grads or --embeddings with --landmark-grads and --landmark-idx",
        ));
    };
    let emb = norm(run.matrix("embeddings", e, Role::Embedding)?)?;
    let g_l = norm(run.matrix("landmark_grads", gl, Role::Landmark)?)?;
    let idx = run.indices("landmark_idx", li)?;
    idx.validate(emb.rows())?;
    if g_l.rows() != idx.len() {
        return Err(Error::dims(
            "landmark gradient rows vs landmark indices",
            idx.len(),
            g_l.rows(),
        ));
    }
    let model = landmark::fit_landmarks(&emb, &idx, a.kernel.into(), a.gamma, a.delta)?;
    landmark::approx_gradients(&model, &g_l)
}

fn cmd_select(run: &mut Run, a: &SelectArgs, seed: u64) -> Result<ManifestSink> {
    if a.order == OrderArg::Second {
        return Err(Error::invalid(
            "selection tunes lambda on first-order scores; second order is not supported",
        ));
    }
    let mut g_s = source_gradients(run, a)?;
    let mut g_t = run.matrix("target_grads", &a.target_grads, Role::Target)?;
    if a.normalize {
        g_t = matstore::normalize_rows(&g_t, ZeroPolicy::Keep)?;
    }
    let adam = adam_state(run, &a.adam)?;
    if let Some(dim) = a.project_dim {
        if adam.is_some() {
            return Err(Error::invalid("projection and adam moments cannot be combined"));
        }
        let mut spec = SketchSpec::new(a.project_method.into(), g_s.cols() as u64, dim, seed);
        spec.premask_size = a.project_premask;
        let sk = spec.prepare()?;
        g_s = sk.project_rows(&g_s)?;
        g_t = sk.project_rows(&g_t)?;
    }
    let n = g_s.rows();
    let out_selected = a.out_dir.join("selected.json");
    let out_weights = a.out_dir.join("weights.json");
    let mode = match a.mode {
        ModeArg::Average => SelectMode::Average,
        ModeArg::RoundRobin => SelectMode::RoundRobin,
    };
    let mut resolved = json!({
        "k": a.k,
        "mode": mode,
        "normalize": a.normalize,
        "eta": a.eta,
        "tol_iters": a.tol_iters,
        "landmarks": a.grads.is_none(),
        "project_dim": a.project_dim,
        "adam": adam.is_some(),
    });
    match mode {
        SelectMode::Average => {
            let target = TargetGradient::from_rows(&g_t, a.normalize)?;
            let obj = match &adam {
                Some(st) => influence::compute_adam_objects(&g_s, &target, st, a.eta, n, Order::First)?,
                None => InfluenceObjects::first_order(influence::compute_p(&g_s, &target, false)?),
            };
            let (indices, tuned) = qpsolve::select_average(&obj.p, a.k, a.tol_iters)?;
            resolved["exact_support"] = json!(tuned.exact);
            run.write_json("selected", &out_selected, &indices)?;
            run.write_json("weights", &out_weights, &tuned.solution)?;
        }
        SelectMode::RoundRobin => {
            if adam.is_some() {
                return Err(Error::invalid("round-robin selection does not take adam moments"));
            }
            let scores = influence::per_target_scores(&g_s, &g_t, false)?;
            let sel = qpsolve::select(&scores, a.k, mode, a.tol_iters)?;
            let weight = n as f64 / a.k as f64;
            run.write_json("selected", &out_selected, &sel.indices)?;
            run.write_json(
                "weights",
                &out_weights,
                &json!({ "mode": "round-robin", "selected_weight": weight, "support": sel.indices }),
            )?;
        }
    }
    run.config = resolved;
    Ok(ManifestSink::Path(a.out_dir.join("manifest.json")))
}

fn influence_objects_for(run: &mut Run, a: &InfluenceArgs) -> Result<InfluenceObjects> {
    let mut g_s = run.matrix("grads", &a.grads, Role::Source)?;
    if a.normalize {
        g_s = matstore::normalize_rows(&g_s, ZeroPolicy::Keep)?;
    }
    let g_t = run.matrix("target_grads", &a.target_grads, Role::Target)?;
    let mut target = TargetGradient::from_rows(&g_t, a.normalize)?;
    if let Some(h) = &a.target_hessian {
        let h = run.matrix("target_hessian", h, Role::Target)?;
        target = target.with_hessian(h.to_dmatrix())?;
    }
    let order: Order = a.order.into();
    match adam_state(run, &a.adam)? {
        Some(st) => influence::compute_adam_objects(&g_s, &target, &st, a.eta, g_s.rows(), order),
        None => influence::influence_objects(&g_s, &target, false, a.eta, order),
    }
}

fn cmd_influence(run: &mut Run, a: &InfluenceArgs) -> Result<ManifestSink> {
    let obj = influence_objects_for(run, a)?;
    let p = GradientMatrix::row_vector(obj.p.clone(), Role::Source)?;
    run.write_matrix("p", &a.out, &p, a.dtype.into())?;
    match (&obj.q, &a.q_out) {
        (Some(q), Some(path)) => {
            let q = GradientMatrix::from_dmatrix(q, Role::Source)?;
            run.write_matrix("q", path, &q, a.dtype.into())?;
        }
        (None, Some(_)) => return Err(Error::invalid("--q-out needs --order second")),
        _ => {}
    }
    run.config = json!({ "order": obj.order, "eta": a.eta, "normalize": a.normalize, "n": obj.p.len() });
    Ok(ManifestSink::Path(sidecar_path(&a.out)))
}

fn cmd_solve(run: &mut Run, a: &SolveArgs) -> Result<ManifestSink> {
    let p = run.vector("p", &a.p)?;
    let sol = match &a.q {
        Some(q) => {
            let q = run.matrix("q", q, Role::Source)?.to_dmatrix();
            let obj = InfluenceObjects::second_order(p, q, a.eta)?;
            qpsolve::solve_active_set(&QpProblem::from_objects(&obj, a.lambda))?
        }
        None => qpsolve::solve_first_order(&p, a.lambda)?,
    };
    run.write_json("weights", &a.out, &sol)?;
    run.config = json!({ "lambda": a.lambda, "eta": a.eta, "second_order": a.q.is_some() });
    Ok(ManifestSink::Path(sidecar_path(&a.out)))
}

fn cmd_tune_lambda(run: &mut Run, a: &TuneArgs) -> Result<ManifestSink> {
    if a.order == OrderArg::Second {
        return Err(Error::invalid("lambda tuning is defined on first-order scores only"));
    }
    let p = run.vector("p", &a.p)?;
    let tuned = qpsolve::tune_lambda(&p, a.k, a.tol_iters)?;
    run.write_json("weights", &a.out, &tuned.solution)?;
    run.config = json!({ "k": a.k, "tol_iters": a.tol_iters, "exact_support": tuned.exact });
    Ok(ManifestSink::Path(sidecar_path(&a.out)))
}

fn cmd_project(run: &mut Run, a: &ProjectArgs, seed: u64) -> Result<ManifestSink> {
    let g = run.matrix("in", &a.input, Role::Source)?;
    let mut spec = SketchSpec::new(a.method.into(), g.cols() as u64, a.dim, seed);
    spec.premask_size = a.premask;
    let out = spec.prepare()?.project_rows(&g)?;
    run.write_matrix("out", &a.out, &out, a.dtype.into())?;
    if let Some(p) = &a.spec_out {
        run.write_json("spec", p, &spec)?;
    }
    run.config = serde_json::to_value(&spec)?;
    Ok(ManifestSink::Path(sidecar_path(&a.out)))
}

fn cmd_landmark(run: &mut Run, c: &LandmarkCommand, seed: u64) -> Result<ManifestSink> {
    match c {
        LandmarkCommand::Pick { n, ell, out } => {
            let idx = landmark::pick_landmarks(*n, *ell, seed)?;
            run.write_json("indices", out, &idx)?;
            run.config = json!({ "n": n, "ell": ell });
            Ok(ManifestSink::Path(sidecar_path(out)))
        }
        LandmarkCommand::Fit {
            embeddings,
            landmark_idx,
            kernel,
            gamma,
            delta,
            normalize,
            out,
            sidecar,
        } => {
            let mut e = run.matrix("embeddings", embeddings, Role::Embedding)?;
            if *normalize {
                e = matstore::normalize_rows(&e, ZeroPolicy::Keep)?;
            }
            let idx = run.indices("landmark_idx", landmark_idx)?;
            idx.validate(e.rows())?;
            let model = landmark::fit_landmarks(&e, &idx, (*kernel).into(), *gamma, *delta)?;
            let side = sidecar.clone().unwrap_or_else(|| out.with_extension("json"));
            model.save(out, &side)?;
            run.outputs.insert("coefficients".into(), out.display().to_string());
            run.outputs.insert("sidecar".into(), side.display().to_string());
            run.config =
                json!({ "kernel": model.kernel, "gamma": model.gamma, "delta": model.delta, "ell": model.ell() });
            Ok(ManifestSink::Path(sidecar_path(out)))
        }
    }
}

fn cmd_toy(run: &mut Run, c: &ToyCommand, seed: u64) -> Result<ManifestSink> {
    match c {
        ToyCommand::RunLinear {
            variant,
            lambda,
            epsilon,
            pgd_iters,
            toy,
            out,
        } => {
            let cfg = toy.config(seed);
            let lin = LinearToy::generate(&cfg)?;
            let mut extra = json!({});
            let w = match variant {
                VariantArg::Uniform => lin.weights(WeightVariant::Uniform)?,
                VariantArg::Unconstrained => lin.weights(WeightVariant::Unconstrained)?,
                VariantArg::Robust => lin.weights(WeightVariant::Robust(*lambda))?,
                VariantArg::RobustEps => {
                    let res = toylab::minimize_robust(&lin, *epsilon, *pgd_iters)?;
                    extra = json!({ "objective": res.objective, "stationarity": res.stationarity });
                    res.weights
                }
            };
            let curve = lin.train(&w, cfg.steps)?;
            run.write("curve", out, curve.to_csv().as_bytes())?;
            run.config = json!({
                "toy": cfg,
                "variant": format!("{variant:?}").to_lowercase(),
                "lambda": lambda,
                "epsilon": epsilon,
                "pgd": extra,
            });
            Ok(ManifestSink::Path(sidecar_path(out)))
        }
        ToyCommand::Jvp {
            inputs,
            n,
            widths,
            ell,
            num_v,
            out,
        } => {
            let mlp = ToyMlp::new(widths.clone(), seed)?;
            let xs = match inputs {
                Some(p) => run.matrix("inputs", p, Role::Source)?,
                None => {
                    use rand::Rng;
                    let mut r = crate::rng::stream(seed, crate::rng::Stream::ToyData);
                    let data = (0..n * widths[0])
                        .map(|_| r.sample(rand_distr::StandardNormal))
                        .collect();
                    GradientMatrix::new(*n, widths[0], data, Role::Source)?
                }
            };
            let emb = toylab::jvp_embed_rows(&ToyModel::Mlp(mlp), &xs, *ell, *num_v, seed)?;
            run.write_matrix("embeddings", out, &emb, Dtype::F64)?;
            run.config = json!({ "widths": widths, "ell": ell, "num_v": num_v, "n": xs.rows() });
            Ok(ManifestSink::Path(sidecar_path(out)))
        }
        ToyCommand::LinearGrads { toy, out_dir } => {
            let cfg = toy.config(seed);
            let lin = LinearToy::generate(&cfg)?;
            let g_s = lin.source.grads(&lin.theta0, Role::Source)?;
            let g_t = lin.target.grads(&lin.theta0, Role::Target)?;
            let h = GradientMatrix::from_dmatrix(&lin.target.hessian(), Role::Target)?;
            run.write_matrix("source", &out_dir.join("source.idm"), &g_s, Dtype::F64)?;
            run.write_matrix("target", &out_dir.join("target.idm"), &g_t, Dtype::F64)?;
            run.write_matrix("target_hessian", &out_dir.join("target_hessian.idm"), &h, Dtype::F64)?;
            run.config = json!({ "toy": cfg });
            Ok(ManifestSink::Path(out_dir.join("manifest.json")))
        }
    }
}

fn report<T: Serialize>(run: &mut Run, out: &Option<PathBuf>, value: &T) -> Result<ManifestSink> {
    match out {
        Some(p) => {
            run.write_json("report", p, value)?;
            Ok(ManifestSink::Path(sidecar_path(p)))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(ManifestSink::Stderr)
        }
    }
}

fn cmd_verify(run: &mut Run, c: &VerifyCommand, seed: u64) -> Result<ManifestSink> {
    match c {
        VerifyCommand::Bound {
            n,
            d,
            sigma,
            lambda,
            trials,
            out,
        } => {
            let cfg = BoundExperiment {
                n: *n,
                d: *d,
                sigma: *sigma,
                lambda: *lambda,
                trials: *trials,
                seed,
            };
            let rep = verify::run_bound_check(&cfg)?;
            run.config = serde_json::to_value(&cfg)?;
            report(run, out, &rep)
        }
        VerifyCommand::Isotropy { dist, d, trials, out } => {
            let rep = verify::check_isotropy_lemma((*dist).into(), *d, *trials, seed)?;
            run.config = json!({ "dist": XDist::from(*dist), "d": d, "trials": trials });
            report(run, out, &rep)
        }
        VerifyCommand::InnerProduct {
            d,
            sigma,
            trials,
            orthogonal,
            out,
        } => {
            let cfg = InnerProductConfig {
                d: *d,
                sigma: *sigma,
                trials: *trials,
                seed,
                orthogonal: *orthogonal,
            };
            let rep = verify::check_inner_product_lemma(&cfg)?;
            run.config = serde_json::to_value(&cfg)?;
            report(run, out, &rep)
        }
        VerifyCommand::OrderRatio {
            p,
            q,
            weights,
            etas,
            toy,
            out,
        } => {
            let obj = match (p, q) {
                (Some(p), Some(q)) => {
                    let p = run.vector("p", p)?;
                    let q = run.matrix("q", q, Role::Source)?.to_dmatrix();
                    InfluenceObjects::second_order(p, q, 0.0)?
                }
                _ => {
                    let cfg = toy.config(seed);
                    let lin = LinearToy::generate(&cfg)?;
                    run.config = json!({ "toy": cfg });
                    lin.influence(&lin.theta0)?
                }
            };
            let w = match weights {
                Some(path) => run.vector("weights", path)?,
                None => vec![1.0; obj.p.len()],
            };
            let rows = verify::order_ratio(&obj, &w, etas)?;
            run.write("table", out, verify::ratio_csv(&rows).as_bytes())?;
            if run.config.is_null() {
                run.config = json!({ "etas": etas });
            } else {
                run.config["etas"] = json!(etas);
            }
            Ok(ManifestSink::Path(sidecar_path(out)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(digest(b"abc"), "ba7816bf8f01cfea");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::Singular("x".into())), 3);
    }
}

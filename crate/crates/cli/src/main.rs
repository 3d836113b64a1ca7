use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use nformer::bench::{bench_scaling, records_to_csv, GridPoint, DEFAULT_MAX_BYTES};
use nformer::flops::flop_model;
use nformer::io::{read_features, read_weights, write_features, write_labels, LabelRecord};
use nformer::laa::AffinityScale;
use nformer::retrieval::{eval_pipeline, synth_generate, SynthParams};
use nformer::rns::SoftmaxSign;
use nformer::spectral::{
    all_selections, audit_nested_selections, bound_check, build_attention, cosine_spectral, cross_check,
    random_selections, random_unit_columns, NStarReading, SelectionDiag, EXHAUSTIVE_LIMIT,
};
use nformer::stack::{nformer_forward, AffinityMode, LandmarkPolicy, LayerWeights, NFormerConfig};

#[derive(Parser)]
#[command(name = "nformer", version, about = "Neighbor-attention aggregation toolkit")]
struct Cli {
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the NFormer stack over a feature file.
    Aggregate(AggregateArgs),
    /// Synthetic retrieval before and after aggregation.
    Eval(EvalArgs),
    /// Spectral cross-checks of the landmark selection cosine.
    Verify(VerifyArgs),
    /// Time the attention kernels over a size grid (CSV).
    Bench(BenchArgs),
    /// Analytic cost model (JSON).
    Flops(FlopsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityArg {
    Laa,
    Dense,
}

impl From<AffinityArg> for AffinityMode {
    fn from(a: AffinityArg) -> Self {
        match a {
            AffinityArg::Laa => AffinityMode::Laa,
            AffinityArg::Dense => AffinityMode::Dense,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Off,
    SqrtDim,
    SqrtLandmarks,
}

impl From<ScaleArg> for AffinityScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Off => AffinityScale::Off,
            ScaleArg::SqrtDim => AffinityScale::SqrtDim,
            ScaleArg::SqrtLandmarks => AffinityScale::SqrtLandmarks,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Positive,
    Negative,
}

impl From<SignArg> for SoftmaxSign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Positive => SoftmaxSign::Positive,
            SignArg::Negative => SoftmaxSign::Negative,
        }
    }
}

/// Stack settings shared by `aggregate` and `eval`.
#[derive(Args)]
struct StackArgs {
    /// Number of layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Landmark count.
    #[arg(long)]
    l: Option<usize>,
    /// Neighbor count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    affinity: Option<AffinityArg>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long, value_enum)]
    sign: Option<SignArg>,
    /// Draw fresh landmarks for every layer.
    #[arg(long)]
    per_layer_landmarks: bool,
    #[arg(long)]
    no_residual: bool,
    /// Seed for landmarks and synthetic data.
    #[arg(long, env = "NFORMER_SEED", default_value_t = 0)]
    seed: u64,
}

impl StackArgs {
    fn apply(&self, cfg: &mut NFormerConfig) {
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.affinity {
            cfg.affinity = v.into();
        }
        if let Some(v) = self.scale {
            cfg.scale = v.into();
        }
        if let Some(v) = self.sign {
            cfg.sign = v.into();
        }
        if self.per_layer_landmarks {
            cfg.landmark_policy = LandmarkPolicy::PerLayer;
        }
        if self.no_residual {
            cfg.residual = false;
        }
        cfg.seed = self.seed;
    }
}

#[derive(Args)]
struct AggregateArgs {
    /// Feature file (NFMT, or headerless CSV by `.csv` extension).
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// NFWT weight file; identity projections and no feed-forward otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// JSON file with a full stack configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    stack: StackArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 32)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    per_identity: usize,
    #[arg(long)]
    queries_per_identity: Option<usize>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.35)]
    sigma: f64,
    #[arg(long, default_value_t = 0.15)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    outlier_scale: f64,
    /// Enable the feed-forward block (identity weights make it a no-op).
    #[arg(long)]
    feed_forward: bool,
    /// Longest CMC rank reported.
    #[arg(long, default_value_t = 10)]
    cmc_k: usize,
    /// Write the synthetic features here.
    #[arg(long)]
    export_features: Option<PathBuf>,
    /// Write the label sidecar CSV here.
    #[arg(long)]
    export_labels: Option<PathBuf>,
    #[command(flatten)]
    stack: StackArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Sample count of the random instance.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Feature dimension of the random instance.
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, env = "NFORMER_SEED", default_value_t = 0)]
    seed: u64,
    /// Check every selection and every nested chain.
    #[arg(long)]
    exhaustive: bool,
    /// Random selections (and chains) when not exhaustive.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Feature file whose rows are the samples; replaces the random instance.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Reading of n* for the lower bound: `rank`, `distinct` or a number.
    #[arg(long)]
    n_star: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [256])]
    d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [5])]
    l: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [20])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, env = "NFORMER_SEED", default_value_t = 0)]
    seed: u64,
    /// Skip grid points whose working set exceeds this many bytes.
    #[arg(long, default_value_t = DEFAULT_MAX_BYTES)]
    max_bytes: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 2048)]
    n: u64,
    #[arg(long, default_value_t = 256)]
    d: u64,
    #[arg(long, default_value_t = 5)]
    l: u64,
    #[arg(long, default_value_t = 20)]
    k: u64,
    #[arg(long, default_value_t = 4)]
    layers: u64,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<nformer::Error> for Failure {
    fn from(e: nformer::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn emit_json(v: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| Failure::Data(e.to_string()))
}

fn aggregate(args: AggregateArgs) -> CliResult<()> {
    let z = read_features(&args.input)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        }
        None => NFormerConfig::default(),
    };
    args.stack.apply(&mut cfg);
    cfg.d = z.cols();
    let weights = match &args.weights {
        Some(path) => read_weights(path)?,
        None => {
            cfg.feed_forward = false;
            vec![LayerWeights::identity(cfg.d); cfg.layers]
        }
    };
    if weights.len() != cfg.layers {
        log::info!("using {} layers from the weight file", weights.len());
        cfg.layers = weights.len();
    }
    let out = nformer_forward(&z, &weights, &cfg)?;
    write_features(&args.output, &out)?;
    emit_json(&json!({
        "n": out.rows(),
        "d": out.cols(),
        "output": args.output.display().to_string(),
        "config": to_value(&cfg)?,
    }))
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let params = SynthParams {
        identities: args.identities,
        per_identity: args.per_identity,
        dim: args.dim,
        sigma: args.sigma,
        outlier_fraction: args.outlier_fraction,
        outlier_scale: args.outlier_scale,
        queries_per_identity: args.queries_per_identity,
        seed: args.stack.seed,
    };
    let ds = synth_generate(&params)?;
    let mut cfg = NFormerConfig {
        d: args.dim,
        affinity: AffinityMode::Dense,
        feed_forward: args.feed_forward,
        ..NFormerConfig::default()
    };
    args.stack.apply(&mut cfg);
    let weights = vec![LayerWeights::identity(cfg.d); cfg.layers];
    let outcome = eval_pipeline(&ds, &cfg, &weights, args.cmc_k)?;

    if let Some(path) = &args.export_features {
        write_features(path, &ds.features)?;
    }
    if let Some(path) = &args.export_labels {
        let records: Vec<LabelRecord> = (0..ds.len())
            .map(|i| LabelRecord { index: i, label: ds.labels[i], role: ds.roles[i], outlier: ds.outliers[i] })
            .collect();
        let file = fs::File::create(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        write_labels(std::io::BufWriter::new(file), &records)?;
    }
    emit_json(&json!({
        "dataset": to_value(&params)?,
        "config": to_value(&cfg)?,
        "before": to_value(&outcome.before)?,
        "after": to_value(&outcome.after)?,
        "delta_map": outcome.delta_map(),
    }))
}

fn parse_n_star(s: &str) -> CliResult<NStarReading> {
    match s {
        "rank" => Ok(NStarReading::Rank),
        "distinct" => Ok(NStarReading::DistinctEigenvalues),
        other => other.parse::<f64>().ok().filter(|v| *v > 0.0).map(NStarReading::Explicit).ok_or_else(|| {
            Failure::Usage(format!("--n-star expects rank, distinct or a positive number, got {other:?}"))
        }),
    }
}

fn verify(args: VerifyArgs) -> CliResult<()> {
    let n_star = args.n_star.as_deref().map(parse_n_star).transpose()?;
    let x = match &args.input {
        Some(path) => read_features(path)?.transpose(),
        None => {
            if args.n == 0 || args.d == 0 {
                return Err(Failure::Usage("--n and --d must be positive".into()));
            }
            random_unit_columns(args.d, args.n, args.seed)?
        }
    };
    let n = x.cols();
    if args.exhaustive && n > EXHAUSTIVE_LIMIT {
        return Err(Failure::Usage(format!("--exhaustive supports n <= {EXHAUSTIVE_LIMIT}, got {n}")));
    }
    let a = build_attention(&x)?;
    let selections = if args.exhaustive { all_selections(n)? } else { random_selections(n, args.samples, args.seed) };
    let check = cross_check(&a, &selections)?;
    let full = cosine_spectral(&a, &SelectionDiag::all(n))?;
    let mut audit = audit_nested_selections(&a, args.samples, args.seed)?;
    audit.subset_cosines.clear();
    let bounds = bound_check(&a, n_star)?;
    emit_json(&json!({
        "n": n,
        "d": x.rows(),
        "seed": args.seed,
        "exhaustive": args.exhaustive,
        "cross_formulation_disagreements": check.disagreements(),
        "cross_check": to_value(&check)?,
        "full_selection": to_value(&full)?,
        "monotonicity": to_value(&audit)?,
        "bounds": to_value(&bounds)?,
    }))
}

fn bench(args: BenchArgs) -> CliResult<()> {
    let mut grid = Vec::new();
    for &n in &args.n {
        for &d in &args.d {
            for &l in &args.l {
                for &k in &args.k {
                    grid.push(GridPoint { n, d, l, k });
                }
            }
        }
    }
    let records = bench_scaling(&grid, args.reps, args.seed, args.max_bytes)?;
    print!("{}", records_to_csv(&records)?);
    Ok(())
}

fn flops(args: FlopsArgs) -> CliResult<()> {
    let report = flop_model(args.n, args.d, args.l, args.k, args.layers)?;
    emit_json(&to_value(&report)?)
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Data(e.to_string()))?;
    match cli.command {
        Command::Aggregate(a) => aggregate(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Flops(a) => flops(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

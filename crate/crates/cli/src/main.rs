//! `linrestrict` command-line tool.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags, unparsable point
//! lists, degenerate queries), 2 on computation and file errors. Every failure
//! prints one line `error[<code>]: <message>` to stderr.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use linrestrict::io::{self, Format};
use linrestrict::{
    canonicalize, decision_segments, exact_ig, exactline_network, fgsm_direction, find_m_tilde,
    gradient_deviation, partition_density, random_direction, riemann_ig, samples_to_tolerance, ClassSegment,
    DensityReport, Error, LineQuery, Network, Scheme, SearchParams, Tensor,
};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "linrestrict", version, about = "Exact linear restrictions of piecewise-linear networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a line segment into affine pieces of the network.
    Exactline(ExactlineArgs),
    /// Integrated-gradients attributions along baseline -> input.
    Ig(IgArgs),
    /// Sample counts a Riemann scheme needs to reach a tolerance.
    IgSamples(IgSamplesArgs),
    /// Partition density (and gradient deviation) along a line.
    Density(DensityArgs),
    /// Class segments for every line listed in a file.
    Sweep(SweepArgs),
    /// Partition density along an FGSM step, optionally against a random step.
    Fgsm(FgsmArgs),
}

#[derive(Args)]
struct NetworkArg {
    /// Network document (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Compose consecutive affine layers after loading.
    #[arg(long)]
    fold: bool,
}

#[derive(Args)]
struct Output {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; defaults to structured for `.json` files.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Structured,
    Tabular,
}

#[derive(Args)]
struct LineArgs {
    /// Line start as comma-separated values.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "from_file", conflicts_with = "from_file")]
    from: Option<String>,
    /// File holding the line start (comma or whitespace separated).
    #[arg(long)]
    from_file: Option<PathBuf>,
    /// Line end as comma-separated values.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "to_file", conflicts_with = "to_file")]
    to: Option<String>,
    /// File holding the line end.
    #[arg(long)]
    to_file: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    /// Baseline point x'.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "baseline_file", conflicts_with = "baseline_file")]
    baseline: Option<String>,
    #[arg(long)]
    baseline_file: Option<PathBuf>,
    /// Input point x.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "input_file", conflicts_with = "input_file")]
    input: Option<String>,
    #[arg(long)]
    input_file: Option<PathBuf>,
    /// Output component to attribute.
    #[arg(long)]
    output_index: usize,
}

#[derive(Args)]
struct ExactlineArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[command(flatten)]
    line: LineArgs,
    /// Drop endpoints where the network does not actually change piece.
    #[arg(long)]
    canonical: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Exact,
    Left,
    Right,
    Trapezoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Left,
    Right,
    Trapezoid,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Left => Scheme::Left,
            SchemeArg::Right => Scheme::Right,
            SchemeArg::Trapezoid => Scheme::Trapezoid,
        }
    }
}

#[derive(Args)]
struct IgArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_enum, default_value = "exact")]
    method: MethodArg,
    /// Sample count for the Riemann methods.
    #[arg(long, required_if_eq_any = [("method", "left"), ("method", "right"), ("method", "trapezoid")])]
    samples: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct IgSamplesArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_enum, default_value = "left")]
    method: SchemeArg,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = 5)]
    stability: usize,
    #[arg(long, default_value_t = 1000)]
    cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[command(flatten)]
    line: LineArgs,
    /// Also report the gradient deviation of this output.
    #[arg(long)]
    output_index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// One query per line: `start values ; end values`. Blank lines and `#` comments are skipped.
    #[arg(long)]
    lines: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct FgsmArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// Point to perturb.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "input_file", conflicts_with = "input_file")]
    input: Option<String>,
    #[arg(long)]
    input_file: Option<PathBuf>,
    #[arg(long)]
    epsilon: f64,
    /// Output whose gradient sign drives the step.
    #[arg(long)]
    label: usize,
    /// Seed for the random comparison direction.
    #[arg(long, required_if_eq("compare_random", "true"))]
    seed: Option<u64>,
    /// Also measure a random sign step of the same size.
    #[arg(long)]
    compare_random: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    status: u8,
    code: String,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { status: 1, code: "usage-error".into(), message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if matches!(e, Error::Query(_)) { 1 } else { 2 };
        Failure { status, code: e.code().into(), message: e.to_string() }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn parse_values(text: &str, what: &str) -> CliResult<Vec<f64>> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace() || c == '[' || c == ']')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Failure::usage(format!("{what}: `{t}` is not a number"))))
        .collect::<CliResult<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Failure::usage(format!("{what}: no values")));
    }
    Ok(values)
}

fn read_point(net: &Network, inline: &Option<String>, file: &Option<PathBuf>, what: &str) -> CliResult<Tensor> {
    let values = match (inline, file) {
        (Some(text), _) => parse_values(text, what)?,
        (None, Some(path)) => parse_values(&fs::read_to_string(path).map_err(Error::from)?, what)?,
        (None, None) => return Err(Failure::usage(format!("{what}: missing point"))),
    };
    point_for(net, values, what)
}

fn point_for(net: &Network, values: Vec<f64>, what: &str) -> CliResult<Tensor> {
    if values.len() != net.input_len() {
        return Err(Failure::usage(format!(
            "{what}: expected {} values, got {}",
            net.input_len(),
            values.len()
        )));
    }
    Ok(Tensor::new(net.input_shape().to_vec(), values)?)
}

fn load(arg: &NetworkArg) -> CliResult<Network> {
    Ok(io::load_network(&arg.network, arg.fold)?)
}

fn line_query(net: &Network, line: &LineArgs) -> CliResult<LineQuery> {
    let start = read_point(net, &line.from, &line.from_file, "--from")?;
    let end = read_point(net, &line.to, &line.to_file, "--to")?;
    Ok(LineQuery::new(start, end)?)
}

fn resolve_format(output: &Output, default: Format) -> Format {
    match (output.format, &output.out) {
        (Some(FormatArg::Structured), _) => Format::Structured,
        (Some(FormatArg::Tabular), _) => Format::Tabular,
        (None, Some(path)) => Format::from_path(path),
        (None, None) => default,
    }
}

fn emit(out: &Option<PathBuf>, mut text: String) -> CliResult {
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::from(e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn cmd_exactline(args: ExactlineArgs) -> CliResult {
    let net = load(&args.network)?;
    let query = line_query(&net, &args.line)?;
    let mut line = exactline_network(&net, &query)?;
    if args.canonical {
        line = canonicalize(&line);
    }
    let format = resolve_format(&args.output, Format::Tabular);
    emit(&args.output.out, io::partitions_to_string(&line, format))
}

fn cmd_ig(args: IgArgs) -> CliResult {
    let net = load(&args.network)?;
    let baseline = read_point(&net, &args.pair.baseline, &args.pair.baseline_file, "--baseline")?;
    let input = read_point(&net, &args.pair.input, &args.pair.input_file, "--input")?;
    let k = args.pair.output_index;
    let report = match args.method {
        MethodArg::Exact => exact_ig(&net, &baseline, &input, k)?,
        m => {
            let scheme = match m {
                MethodArg::Left => Scheme::Left,
                MethodArg::Right => Scheme::Right,
                _ => Scheme::Trapezoid,
            };
            let samples = args.samples.ok_or_else(|| Failure::usage("--samples is required"))?;
            riemann_ig(&net, &baseline, &input, k, samples, scheme)?
        }
    };
    let format = resolve_format(&args.output, Format::Structured);
    emit(&args.output.out, io::attribution_to_string(&report, format))
}

fn cmd_ig_samples(args: IgSamplesArgs) -> CliResult {
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        return Err(Failure::usage("--tolerance must be positive"));
    }
    let net = load(&args.network)?;
    let baseline = read_point(&net, &args.pair.baseline, &args.pair.baseline_file, "--baseline")?;
    let input = read_point(&net, &args.pair.input, &args.pair.input_file, "--input")?;
    let k = args.pair.output_index;
    let params = SearchParams { tolerance: args.tolerance, stability: args.stability, cap: args.cap };
    let scheme: Scheme = args.method.into();
    let result = samples_to_tolerance(&net, &baseline, &input, k, scheme, params)?;
    let m_tilde = match find_m_tilde(&net, &baseline, &input, k, params) {
        Ok(r) => r.m,
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let doc = json!({
        "method": scheme,
        "samples_to_tolerance": result,
        "m_tilde": m_tilde,
    });
    emit(&args.out, to_json(&doc))
}

fn cmd_density(args: DensityArgs) -> CliResult {
    let net = load(&args.network)?;
    let query = line_query(&net, &args.line)?;
    let mut report = partition_density(&net, &query)?;
    if let Some(k) = args.output_index {
        report.gradient_deviation = Some(gradient_deviation(&net, &query, k)?);
    }
    emit(&args.out, to_json(&json!(report)))
}

fn parse_sweep_line(net: &Network, text: &str, number: usize) -> CliResult<LineQuery> {
    let what = format!("{}:{number}", "--lines");
    let (a, b) = text
        .split_once(';')
        .ok_or_else(|| Failure::usage(format!("{what}: expected `start ; end`")))?;
    let start = point_for(net, parse_values(a, &what)?, &what)?;
    let end = point_for(net, parse_values(b, &what)?, &what)?;
    LineQuery::new(start, end).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{what}: {}", f.message);
        f
    })
}

fn thread_count() -> CliResult<usize> {
    match std::env::var("LINRESTRICT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::usage(format!("LINRESTRICT_THREADS: `{v}` is not a positive integer"))),
        },
    }
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let net = load(&args.network)?;
    let text = fs::read_to_string(&args.lines).map_err(Error::from)?;
    let queries = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| parse_sweep_line(&net, l, n))
        .collect::<CliResult<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Failure { status: 2, code: "io-error".into(), message: e.to_string() })?;
    let results: Vec<linrestrict::Result<Vec<ClassSegment>>> =
        pool.install(|| queries.par_iter().map(|q| decision_segments(&net, q)).collect());
    let segments = results.into_iter().collect::<linrestrict::Result<Vec<_>>>()?;
    let format = resolve_format(&args.output, Format::Tabular);
    emit(&args.output.out, io::sweep_to_string(&segments, format))
}

fn density_along(net: &Network, x: &Tensor, target: Tensor, label: usize) -> CliResult<serde_json::Value> {
    let query = LineQuery::new(x.clone(), target.clone())?;
    let mut report: DensityReport = partition_density(net, &query)?;
    report.gradient_deviation = match gradient_deviation(net, &query, label) {
        Ok(d) => Some(d),
        Err(Error::Undefined(_)) | Err(Error::UnsupportedLayer { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(json!({ "point": target.data(), "density": report }))
}

fn cmd_fgsm(args: FgsmArgs) -> CliResult {
    if !(args.epsilon > 0.0 && args.epsilon.is_finite()) {
        return Err(Failure::usage("--epsilon must be positive"));
    }
    let net = load(&args.network)?;
    let x = read_point(&net, &args.input, &args.input_file, "--input")?;
    net.check_output_index(args.label)?;
    let adv = fgsm_direction(&net, &x, args.epsilon, args.label)?;
    let mut doc = json!({
        "epsilon": args.epsilon,
        "label": args.label,
        "fgsm": density_along(&net, &x, adv, args.label)?,
    });
    if args.compare_random {
        let seed = args.seed.ok_or_else(|| Failure::usage("--compare-random requires --seed"))?;
        let rnd = random_direction(&x, args.epsilon, seed);
        doc["seed"] = json!(seed);
        doc["random"] = density_along(&net, &x, rnd, args.label)?;
    }
    emit(&args.out, to_json(&doc))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Exactline(a) => cmd_exactline(a),
        Command::Ig(a) => cmd_ig(a),
        Command::IgSamples(a) => cmd_ig_samples(a),
        Command::Density(a) => cmd_density(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Fgsm(a) => cmd_fgsm(a),
    }
}

fn report(f: Failure) -> ExitCode {
    let message = f.message.lines().next().unwrap_or("").trim();
    eprintln!("error[{}]: {message}", f.code);
    ExitCode::from(f.status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report(Failure::usage(first.trim_start_matches("error: ")));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

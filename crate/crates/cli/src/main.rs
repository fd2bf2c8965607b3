use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use lhs_zest::anova::{
    remainder_covariance, remainder_covariance_on, DecompositionReport, DecompositionSettings,
    FnField, StratifiedAux, VectorField,
};
use lhs_zest::design::{generate, DesignMatrix, Method};
use lhs_zest::glm::generate_dataset;
use lhs_zest::harness::{
    asymptotic_oracle, qq_data, qq_from_estimates, run_sweep, table_summary_json, ExperimentConfig,
    Model, Standardization,
};
use lhs_zest::io::{json_f64, json_matrix, json_vec};
use lhs_zest::rngperm::{uniform_stream, Purpose, StreamKey};
use lhs_zest::zsolve::{sandwich_lhs, solve, FitReport, PsiField, SolverOptions};
use lhs_zest::Error;

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "lhs-zest",
    version,
    about = "Latin hypercube sampling for Z-estimation"
)]
struct Cli {
    /// Worker threads (default: LHS_ZEST_THREADS, then available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an LHS or i.i.d. design of the unit cube as CSV.
    Sample(SampleArgs),
    /// Estimate the main-effect decomposition of a builtin field.
    Decompose(DecomposeArgs),
    /// Fit a builtin model to one synthetic dataset.
    Fit(FitArgs),
    /// Replicated LHS vs i.i.d. sweep with oracle variances and Q-Q tables.
    Experiment(ExperimentArgs),
    /// Q-Q table of replicate estimates at one sample size.
    Qq(QqArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Lhs,
    Iid,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lhs => Method::Lhs,
            MethodArg::Iid => Method::Iid,
        }
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// product-d2, additive-d2, identity-d1, noisy-identity-d1, or score:<model>.
    #[arg(long)]
    field: String,
    #[arg(long, default_value_t = 100_000)]
    outer: usize,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 2048)]
    inner: usize,
    #[arg(long)]
    seed: u64,
    /// Parameter at which a score field is evaluated (default: the model truth).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Use the rows of this CSV design as outer points instead of fresh ones.
    #[arg(long)]
    design_file: Option<PathBuf>,
    /// Treat the auxiliary uniform as one more stratified input coordinate.
    #[arg(long)]
    stratify_aux: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    model: String,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// True parameter used to generate the responses.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Option<Vec<f64>>,
    /// Newton starting point (default: centre of the parameter box).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta_init: Option<Vec<f64>>,
    /// Also estimate the LHS sandwich, with R evaluated at the estimate.
    #[arg(long)]
    lhs_sandwich: bool,
    #[arg(long, default_value_t = 100_000)]
    outer: usize,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 2048)]
    inner: usize,
    /// Also write the generated dataset as `dataset.csv` next to the report.
    #[arg(long)]
    save_data: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    model: String,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "lhs,iid")]
    methods: Vec<MethodArg>,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, value_parser = parse_sizes)]
    sizes: Sizes,
    #[arg(long)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    oracle_n: usize,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 2048)]
    inner: usize,
    /// Skip the asymptotic oracle; Q-Q tables then use the replicate sd.
    #[arg(long)]
    skip_oracle: bool,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StandardizationArg {
    Oracle,
    Empirical,
}

#[derive(Args, Debug)]
struct QqArgs {
    #[arg(long)]
    model: String,
    #[arg(long, value_enum, default_value = "lhs")]
    method: MethodArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "oracle")]
    standardization: StandardizationArg,
    /// Read oracle variances from an `oracle.json` instead of recomputing.
    #[arg(long)]
    oracle_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    oracle_n: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.into())
        } else {
            Failure::Validation(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Validation(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.into())
    }
}

type CmdResult = Result<Vec<PathBuf>, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let t = match flag {
        Some(t) => Some(t),
        None => match std::env::var("LHS_ZEST_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Failure::Validation(anyhow!("LHS_ZEST_THREADS: not a count: `{v}`"))
            })?),
            Err(_) => None,
        },
    };
    if t == Some(0) {
        return Err(Failure::Validation(anyhow!(
            "--threads: must be at least 1"
        )));
    }
    Ok(t)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(t) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Validation(anyhow!("thread pool: {e}")))?;
    }
    let started = chrono::Utc::now();
    let (name, seed, dir, outputs) = match &cli.command {
        Command::Sample(a) => ("sample", a.seed, parent_dir(&a.out), cmd_sample(a)?),
        Command::Decompose(a) => ("decompose", a.seed, parent_dir(&a.out), cmd_decompose(a)?),
        Command::Fit(a) => ("fit", a.seed, parent_dir(&a.out), cmd_fit(a)?),
        Command::Experiment(a) => ("experiment", a.seed, a.outdir.clone(), cmd_experiment(a)?),
        Command::Qq(a) => ("qq", a.seed, parent_dir(&a.out), cmd_qq(a)?),
    };
    write_manifest(&dir, name, seed, started, &outputs)?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    started: chrono::DateTime<chrono::Utc>,
    outputs: &[PathBuf],
) -> Result<(), Failure> {
    let mut digests = serde_json::Map::new();
    for p in outputs {
        let bytes = fs::read(p).with_context(|| format!("re-reading {}", p.display()))?;
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        digests.insert(name, Value::String(hex::encode(Sha256::digest(&bytes))));
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    let manifest = json!({
        "command": command,
        "args": args,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "started": started.to_rfc3339(),
        "finished": chrono::Utc::now().to_rfc3339(),
        "outputs": digests,
    });
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::Validation(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), Failure> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn positive(name: &str, v: usize) -> Result<(), Failure> {
    if v == 0 {
        Err(Failure::Validation(anyhow!("--{name}: must be positive")))
    } else {
        Ok(())
    }
}

fn cmd_sample(a: &SampleArgs) -> CmdResult {
    positive("n", a.n)?;
    positive("d", a.d)?;
    let design = generate(
        a.method.into(),
        a.n,
        a.d,
        &StreamKey::new(a.seed, Purpose::Permutation),
    )?;
    write_with(&a.out, |w| design.write_csv(w))?;
    Ok(vec![a.out.clone()])
}

/// Builtin test fields, or the score of a builtin model at `theta`.
fn decompose_field(
    name: &str,
    theta: Option<&[f64]>,
    seed: &StreamKey,
    settings: &DecompositionSettings,
    design: Option<&DesignMatrix>,
    stratify: bool,
) -> Result<DecompositionReport, Failure> {
    fn go<F: VectorField + ?Sized>(
        f: &F,
        settings: &DecompositionSettings,
        seed: &StreamKey,
        design: Option<&DesignMatrix>,
    ) -> lhs_zest::Result<DecompositionReport> {
        match design {
            Some(d) => remainder_covariance_on(f, d, settings, seed),
            None => remainder_covariance(f, settings, seed),
        }
    }
    fn dispatch<F: VectorField + ?Sized>(
        f: &F,
        stratify: bool,
        settings: &DecompositionSettings,
        seed: &StreamKey,
        design: Option<&DesignMatrix>,
    ) -> lhs_zest::Result<DecompositionReport> {
        if stratify && f.uses_auxiliary() {
            go(&StratifiedAux(f), settings, seed, design)
        } else {
            go(f, settings, seed, design)
        }
    }
    if let Some(model) = name.strip_prefix("score:") {
        let m = Model::builtin(model)?;
        let theta = theta
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| m.truth.clone());
        if theta.len() != m.dim() {
            return Err(Failure::Validation(anyhow!(
                "--theta: expected {} values, got {}",
                m.dim(),
                theta.len()
            )));
        }
        let field = PsiField {
            problem: m.problem(),
            theta,
        };
        return Ok(dispatch(&field, stratify, settings, seed, design)?);
    }
    if theta.is_some() {
        return Err(Failure::Validation(anyhow!(
            "--theta: only score fields take a parameter"
        )));
    }
    let field = match name {
        "product-d2" => FnField::scalar(2, |x| x[0] * x[1]),
        "additive-d2" => FnField::scalar(2, |x| x[0] + x[1]),
        "identity-d1" => FnField::scalar(1, |x| x[0]),
        "noisy-identity-d1" => FnField::new(1, 1, true, |x, u, out| out[0] = x[0] + u - 0.5),
        other => {
            return Err(Failure::Validation(anyhow!(
                "--field: unknown field `{other}` (expected product-d2, additive-d2, identity-d1, noisy-identity-d1 or score:<model>)"
            )))
        }
    };
    Ok(dispatch(&field, stratify, settings, seed, design)?)
}

fn cmd_decompose(a: &DecomposeArgs) -> CmdResult {
    let settings = DecompositionSettings {
        outer: a.outer,
        bins: a.bins,
        inner: a.inner,
    };
    let design = match &a.design_file {
        Some(p) => {
            let f =
                File::open(p).with_context(|| format!("--design-file: opening {}", p.display()))?;
            Some(DesignMatrix::read_csv(BufReader::new(f), Method::Iid)?)
        }
        None => None,
    };
    let key = StreamKey::new(a.seed, Purpose::Oracle);
    let report = decompose_field(
        &a.field,
        a.theta.as_deref(),
        &key,
        &settings,
        design.as_ref(),
        a.stratify_aux,
    )?;
    let g = &report.grand_mean;
    let v = json!({
        "field": a.field,
        "seed": a.seed,
        "G": json_vec(&g.mean),
        "G_std_error": json_vec(&g.std_error),
        "R": json_matrix(&report.remainder),
        "full_cov": json_matrix(&report.full_cov),
        "residual": json_matrix(&report.residual),
        "standard_errors": json_matrix(&report.standard_errors),
        "residual_standard_errors": json_matrix(&report.residual_standard_errors),
        "main_effect_moments": report.main_effect_moments.iter().map(json_matrix).collect::<Vec<_>>(),
        "min_eigenvalue": json_f64(report.min_eigenvalue),
        "psd_tolerance": json_f64(report.psd_tolerance),
        "settings": {
            "outer": design.as_ref().map_or(a.outer, DesignMatrix::n),
            "bins": a.bins,
            "inner": a.inner,
            "design_file": a.design_file.as_ref().map(|p| p.display().to_string()),
            "stratify_aux": a.stratify_aux,
        },
    });
    write_json(&a.out, &v)?;
    Ok(vec![a.out.clone()])
}

fn fit_json(fit: &FitReport, model: &Model, seed: u64) -> Value {
    json!({
        "model": model.name,
        "seed": seed,
        "theta0": json_vec(&model.truth),
        "theta_hat": json_vec(&fit.theta_hat),
        "iterations": fit.iterations,
        "residual_norm": json_f64(fit.residual_norm),
        "trace": json_vec(&fit.trace),
        "converged": fit.converged,
        "design_method": fit.design_method.as_str(),
        "n": fit.n,
        "a_hat": json_matrix(&fit.a_hat),
        "b_iid": json_matrix(&fit.b_iid),
        "sandwich_iid": json_matrix(&fit.sandwich_iid),
        "sandwich_lhs": fit.sandwich_lhs.as_ref().map(json_matrix),
    })
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    positive("n", a.n)?;
    let model = Model::with_truth(&a.model, a.theta0.clone())?;
    if let Some(t) = &a.theta_init {
        if t.len() != model.dim() {
            return Err(Failure::Validation(anyhow!(
                "--theta-init: expected {} values, got {}",
                model.dim(),
                t.len()
            )));
        }
    }
    let key = StreamKey::new(a.seed, Purpose::Permutation);
    let method: Method = a.method.into();
    let design = generate(method, a.n, model.dim(), &key)?;
    let aux = uniform_stream(&key.with_purpose(Purpose::Response), a.n);
    let mut fit = solve(
        model.problem(),
        &design,
        &aux,
        a.theta_init.as_deref(),
        &SolverOptions::default(),
    )?;
    if a.lhs_sandwich {
        let settings = DecompositionSettings {
            outer: a.outer,
            bins: a.bins,
            inner: a.inner,
        };
        let field = PsiField {
            problem: model.problem(),
            theta: fit.theta_hat.clone(),
        };
        let report = remainder_covariance(&field, &settings, &key.with_purpose(Purpose::Oracle))?;
        fit.sandwich_lhs = Some(sandwich_lhs(
            &fit.a_hat,
            &report.remainder,
            a.n,
            report.psd_tolerance,
        )?);
    }
    let mut outputs = vec![a.out.clone()];
    write_json(&a.out, &fit_json(&fit, &model, a.seed))?;
    if a.save_data {
        let path = parent_dir(&a.out).join("dataset.csv");
        let data = match model.glm() {
            Some(p) => generate_dataset(p.family(), p.truth(), &design, &key)?,
            None => {
                return Err(Failure::Validation(anyhow!(
                    "--save-data: model `{}` has no response",
                    model.name
                )))
            }
        };
        write_with(&path, |w| data.write_csv(w))?;
        outputs.push(path);
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq)]
struct Sizes(Vec<usize>);

fn parse_sizes(s: &str) -> anyhow::Result<Sizes> {
    expand_sizes(s).map(Sizes)
}

/// Parse `start:stop:step` (stop included when aligned) or a comma list.
fn expand_sizes(s: &str) -> anyhow::Result<Vec<usize>> {
    let s = s.trim();
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(anyhow!("expected start:stop:step, got `{s}`"));
        }
        let p = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("`{t}` is not a size"))
        };
        let (start, stop, step) = (p(parts[0])?, p(parts[1])?, p(parts[2])?);
        if step == 0 || start == 0 || start > stop {
            return Err(anyhow!("need 0 < start <= stop and step > 0, got `{s}`"));
        }
        Ok((start..=stop).step_by(step).collect())
    } else {
        let v = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| anyhow!("`{t}` is not a size"))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        if v.is_empty() {
            return Err(anyhow!("empty list"));
        }
        Ok(v)
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> CmdResult {
    let sizes = a.sizes.0.clone();
    let model = Model::builtin(&a.model)?;
    let mut methods: Vec<Method> = Vec::new();
    for m in &a.methods {
        let m: Method = (*m).into();
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let mut config =
        ExperimentConfig::new(&a.model, methods.clone(), sizes.clone(), a.reps, a.seed);
    config.oracle_n = a.oracle_n;
    config.decomposition.bins = a.bins;
    config.decomposition.inner = a.inner;
    if a.skip_oracle {
        config.oracle_n = config.oracle_n.max(*sizes.iter().max().unwrap_or(&0));
    }
    config.validate()?;

    let mut outputs = Vec::new();
    let oracle = if a.skip_oracle {
        None
    } else {
        let o = asymptotic_oracle(
            &model,
            config.oracle_n,
            &config.decomposition,
            &StreamKey::new(a.seed, Purpose::Oracle),
        )?;
        let path = a.outdir.join("oracle.json");
        write_json(&path, &o.to_json(&model, a.seed))?;
        outputs.push(path);
        Some(o)
    };

    let table = run_sweep(&model, &config)?;
    let path = a.outdir.join("sweep.csv");
    write_with(&path, |w| table.write_csv(w))?;
    outputs.push(path);
    let path = a.outdir.join("sweep.json");
    write_json(&path, &table_summary_json(&table))?;
    outputs.push(path);

    let qq_method = if methods.contains(&Method::Lhs) {
        Method::Lhs
    } else {
        methods[0]
    };
    let standardization = match &oracle {
        Some(o) if qq_method == Method::Lhs => {
            Standardization::Oracle(o.normalized_variances.clone())
        }
        Some(o) => Standardization::Oracle(o.iid_normalized_variances()),
        None => Standardization::Empirical,
    };
    for cell in table.cells.iter().filter(|c| c.method == qq_method) {
        let qq = qq_from_estimates(&cell.estimates, &model.truth, cell.n, &standardization)?;
        let path = a.outdir.join(format!("qq_{}.csv", cell.n));
        write_with(&path, |w| qq.write_csv(w))?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn read_oracle_variances(path: &Path, key: &str) -> anyhow::Result<Vec<f64>> {
    let f =
        File::open(path).with_context(|| format!("--oracle-file: opening {}", path.display()))?;
    let v: Value = serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("--oracle-file: parsing {}", path.display()))?;
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| anyhow!("--oracle-file: missing `{key}`"))?
        .iter()
        .map(|x| {
            x.to_string()
                .parse::<f64>()
                .map_err(|_| anyhow!("--oracle-file: `{key}` holds a non-number"))
        })
        .collect()
}

fn cmd_qq(a: &QqArgs) -> CmdResult {
    positive("n", a.n)?;
    let model = Model::builtin(&a.model)?;
    let method: Method = a.method.into();
    let key = match method {
        Method::Lhs => "normalized_variances",
        Method::Iid => "iid_normalized_variances",
    };
    let standardization = match a.standardization {
        StandardizationArg::Empirical => Standardization::Empirical,
        StandardizationArg::Oracle => match &a.oracle_file {
            Some(p) => Standardization::Oracle(read_oracle_variances(p, key)?),
            None => {
                let o = asymptotic_oracle(
                    &model,
                    a.oracle_n,
                    &DecompositionSettings::default(),
                    &StreamKey::new(a.seed, Purpose::Oracle),
                )?;
                Standardization::Oracle(match method {
                    Method::Lhs => o.normalized_variances,
                    Method::Iid => o.iid_normalized_variances(),
                })
            }
        },
    };
    let qq = qq_data(
        &model,
        method,
        a.n,
        a.reps,
        a.seed,
        &standardization,
        &SolverOptions::default(),
    )?;
    write_with(&a.out, |w| qq.write_csv(w))?;
    Ok(vec![a.out.clone()])
}

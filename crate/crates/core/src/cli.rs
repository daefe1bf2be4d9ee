//! `orthoconv` command-line interface.
//!
//! Data goes to files or stdout as JSON; diagnostics go to stderr. Exit code
//! 0 on success, 1 on a domain or numerical failure, 2 on a usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::conv::{swap_kernel_axes, ConvGeometry};
use crate::dbt::{DbtMatrix, DenseMatrix};
use crate::error::Error;
use crate::gradcheck::{central_diff, max_rel_err};
use crate::io::{self, Cell, NpyDtype};
use crate::orthreg::{self, conv_orth_loss, kernel_orth_loss, lemma_gap, OrthMode};
use crate::spectrum::{self, SpectrumReport};
use crate::tensor::{KernelTensor, Rng, Tensor};
use crate::trainer::{self, RegMode, TrainConfig};
use crate::{conv, oracle};

#[derive(Debug, Parser)]
#[command(name = "orthoconv", version, about = "Orthogonal convolution regularization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// Worker threads for the row-parallel sparse kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Human-readable summary on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Conv- and kernel-orthogonality losses of a kernel file.
    Check(CheckArgs),
    /// Singular values of a layer's DBT matrix.
    Spectrum(SpectrumArgs),
    /// Row/column Gram loss identity on a random or DBT matrix.
    Lemma(LemmaArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Compare self-convolution and convolution against the explicit DBT matrix.
    Oracle(OracleArgs),
    /// Train the toy CNN and write per-epoch metrics.
    Train(TrainArgs),
    /// Spectrum before and after minimizing the orthogonality loss alone.
    DemoSpectrum(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 1x4x4 input, 1x1x2x2 kernel, stride 1 (9x16 DBT).
    Fig3,
    /// 4x12x12 input, 4x4x3x3 kernel, stride 1 (400x576 DBT).
    Fig2bDesk,
    /// 64x16x16 input, 128x64x3x3 kernel, stride 1; power iteration only.
    Sec48Sigma,
}

impl Preset {
    /// `(M, C, k, H, W, stride)`.
    fn layout(self) -> (usize, usize, usize, usize, usize, usize) {
        match self {
            Preset::Fig3 => (1, 1, 2, 4, 4, 1),
            Preset::Fig2bDesk => (4, 4, 3, 12, 12, 1),
            Preset::Sec48Sigma => (128, 64, 3, 16, 16, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Row,
    Col,
    KernelRow,
    KernelCol,
}

impl From<ModeArg> for OrthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Row => OrthMode::ConvRow,
            ModeArg::Col => OrthMode::ConvCol,
            ModeArg::KernelRow => OrthMode::KernelRow,
            ModeArg::KernelCol => OrthMode::KernelCol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    None,
    Kernel,
    Conv,
}

impl From<RegArg> for RegMode {
    fn from(r: RegArg) -> Self {
        match r {
            RegArg::None => RegMode::None,
            RegArg::Kernel => RegMode::Kernel,
            RegArg::Conv => RegMode::Conv,
        }
    }
}

/// Where the kernel comes from: a file, or a seeded He-normal draw shaped by
/// a preset or `--kernel-shape`.
#[derive(Debug, Args)]
pub struct KernelSource {
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// M,C,k for a random kernel.
    #[arg(long, value_parser = parse_triple)]
    pub kernel_shape: Option<[usize; 3]>,
    /// C,H,W of the layer input.
    #[arg(long, value_parser = parse_triple)]
    pub input_shape: Option<[usize; 3]>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Layer zero padding.
    #[arg(long, default_value_t = 0)]
    pub padding: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Row)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub source: KernelSource,
    /// CSV of (index, sigma, nonzero); `nonzero` is 0 for values below 1e-10 * sigma_max.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest rows * cols the dense SVD may allocate; bigger layers fall back to power iteration.
    #[arg(long, default_value_t = crate::dbt::DEFAULT_DENSE_CAP)]
    pub dense_cap: usize,
    /// CSV of (bin_lo, bin_hi, count).
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.01)]
    pub unit_eps: f64,
    /// Skip the dense SVD and estimate only sigma_max.
    #[arg(long)]
    pub power: bool,
    /// Power-iteration budget; the sec48-sigma layer costs roughly 80 ms per iteration on one thread.
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Relative change in the sigma estimate that stops the iteration.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Use the DBT matrix of a preset layer instead of a random matrix.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Regularizer used for the full-model check.
    #[arg(long, value_enum, default_value_t = RegArg::Conv)]
    pub reg: RegArg,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub source: KernelSource,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub reg: Option<RegArg>,
    #[arg(long, default_value_t = 50)]
    pub n_per_class: usize,
    /// Metrics CSV (epoch, task_loss, orth_loss, accuracy); epoch 0 is the initial state.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer CSV (epoch, layer, orth_loss).
    #[arg(long)]
    pub layers_out: Option<PathBuf>,
    /// Directory for the final conv1.npy / conv2.npy kernels.
    #[arg(long)]
    pub kernels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_enum, default_value_t = Preset::Fig2bDesk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// CSV of (index, sigma_before, sigma_after).
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of (bin_lo, bin_hi, count_before, count_after).
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated integers, got `{s}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|e| format!("`{p}`: {e}"))?;
    }
    Ok(out)
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(Error::Io(e))
    }
}

type CmdResult = Result<Value, Failure>;

/// Messages collected while a command runs on the worker pool.
struct Ctx {
    verbose: bool,
    lines: Vec<String>,
}

impl Ctx {
    fn note(&mut self, msg: impl Into<String>) {
        if self.verbose {
            self.lines.push(msg.into());
        }
    }

    fn warn(&mut self, msg: impl Into<String>) {
        self.lines.push(msg.into());
    }
}

/// Runs the CLI with process stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI writing JSON to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    2
                }
            };
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(err, "error: --threads must be at least 1");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return 1;
        }
    };
    let mut ctx = Ctx {
        verbose: cli.verbose,
        lines: Vec::new(),
    };
    let result = pool.install(|| dispatch(&cli.command, &mut ctx));
    for line in &ctx.lines {
        let _ = writeln!(err, "{line}");
    }
    match result {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("JSON values serialize");
            if writeln!(out, "{text}").is_err() {
                return 1;
            }
            if value.get("ok") == Some(&Value::Bool(false)) {
                1
            } else {
                0
            }
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "usage error: {msg}");
            2
        }
        Err(Failure::Domain(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: &CliCommand, ctx: &mut Ctx) -> CmdResult {
    match cmd {
        CliCommand::Check(a) => cmd_check(a, ctx),
        CliCommand::Spectrum(a) => cmd_spectrum(a, ctx),
        CliCommand::Lemma(a) => cmd_lemma(a, ctx),
        CliCommand::Gradcheck(a) => cmd_gradcheck(a, ctx),
        CliCommand::Oracle(a) => cmd_oracle(a, ctx),
        CliCommand::Train(a) => cmd_train(a, ctx),
        CliCommand::DemoSpectrum(a) => cmd_demo(a, ctx),
    }
}

fn load_kernel(path: &Path) -> Result<KernelTensor, Failure> {
    Ok(KernelTensor::new(io::read_npy(path)?)?)
}

/// Resolves the kernel and layer geometry from the source flags.
fn resolve_layer(src: &KernelSource) -> Result<(KernelTensor, ConvGeometry), Failure> {
    let preset = src.preset.map(Preset::layout);
    let kernel = match (&src.kernel, preset, src.kernel_shape) {
        (Some(path), _, _) => load_kernel(path)?,
        (None, _, Some([m, c, k])) | (None, Some((m, c, k, _, _, _)), None) => {
            KernelTensor::he_normal(m, c, k, &mut Rng::new(src.seed))?
        }
        (None, None, None) => {
            return Err(Failure::Usage("give --kernel, --kernel-shape or --preset".into()));
        }
    };
    let (h, w) = match (src.input_shape, preset) {
        (Some([c, h, w]), _) => {
            if c != kernel.c_in() {
                return Err(Error::Shape(format!(
                    "input has {c} channels, kernel expects {}",
                    kernel.c_in()
                ))
                .into());
            }
            (h, w)
        }
        (None, Some((_, _, _, h, w, _))) => (h, w),
        (None, None) => return Err(Failure::Usage("give --input-shape or --preset".into())),
    };
    let stride = src.stride.or(preset.map(|p| p.5)).unwrap_or(1);
    let geom = ConvGeometry::for_kernel(&kernel, h, w, stride, src.padding)?;
    Ok((kernel, geom))
}

fn geometry_json(g: &ConvGeometry) -> Value {
    serde_json::to_value(spectrum::GeometryEcho::from(g)).expect("plain struct")
}

fn cmd_check(a: &CheckArgs, ctx: &mut Ctx) -> CmdResult {
    let kernel = load_kernel(&a.kernel)?;
    let mode = OrthMode::from(a.mode);
    let orientation = mode.orientation();
    let report = orthreg::orth_loss(&kernel, a.stride, mode)?;
    let conv = conv_orth_loss(&kernel, a.stride, orientation)?;
    let kern = kernel_orth_loss(&kernel, orientation)?;
    ctx.note(format!(
        "{mode} loss {:.6e} (unsquared {:.6e}); conv-orth {:.6e}, kernel-orth {:.6e}",
        report.loss,
        report.unsquared(),
        conv.loss,
        kern.loss
    ));
    Ok(json!({
        "kernel_shape": [kernel.m_out(), kernel.c_in(), kernel.k(), kernel.k()],
        "stride": a.stride,
        "mode": mode.to_string(),
        "loss": report.loss,
        "loss_unsquared": report.unsquared(),
        "weighted_loss": a.lambda * report.loss,
        "lambda": a.lambda,
        "conv_orth_loss": conv.loss,
        "conv_orth_unsquared": conv.unsquared(),
        "kernel_orth_loss": kern.loss,
        "kernel_orth_unsquared": kern.unsquared(),
        "padding": orthreg::padding_for(kernel.k(), a.stride),
    }))
}

fn spectrum_rows(report: &SpectrumReport) -> Vec<Vec<Cell>> {
    let nonzero = report.singular_values.len() - report.zero_count;
    report
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| vec![Cell::from(i), Cell::from(s), Cell::from(usize::from(i < nonzero))])
        .collect()
}

fn cmd_spectrum(a: &SpectrumArgs, ctx: &mut Ctx) -> CmdResult {
    let (kernel, geom) = resolve_layer(&a.source)?;
    let dbt = DbtMatrix::build(&kernel, &geom)?;
    let dense_ok = geom.output_len().saturating_mul(geom.input_len()) <= a.dense_cap;
    let power_only = a.power || a.source.preset == Some(Preset::Sec48Sigma) || !dense_ok;
    if power_only {
        if a.out.is_some() || a.hist_out.is_some() {
            ctx.note("power iteration gives sigma_max only; no CSV written");
        }
        let est = spectrum::sigma_max(&dbt, a.iters, a.tol)?;
        ctx.note(format!(
            "sigma_max ~ {:.9} after {} iterations (converged: {})",
            est.sigma, est.iterations, est.converged
        ));
        return Ok(json!({
            "method": "power",
            "geometry": geometry_json(&geom),
            "sigma_max": est.sigma,
            "converged": est.converged,
            "iterations": est.iterations,
        }));
    }
    let values = spectrum::svd_values(&dbt.to_dense_capped(a.dense_cap)?)?;
    let report = SpectrumReport::from_values(values, a.unit_eps, Some((&geom).into()));
    if let Some(path) = &a.out {
        io::write_csv(path, &["index", "sigma", "nonzero"], &spectrum_rows(&report))?;
    }
    if let Some(path) = &a.hist_out {
        let hist = spectrum::histogram(&report.singular_values, a.bins, 0.0, report.sigma_max.max(1e-300))?;
        let rows: Vec<Vec<Cell>> = hist
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| vec![hist.edges[i].into(), hist.edges[i + 1].into(), c.into()])
            .collect();
        io::write_csv(path, &["bin_lo", "bin_hi", "count"], &rows)?;
    }
    ctx.note(format!(
        "{} singular values, sigma in [{:.6}, {:.6}], {} zero",
        report.singular_values.len(),
        report.sigma_min_nonzero,
        report.sigma_max,
        report.zero_count
    ));
    Ok(json!({
        "method": "dense",
        "geometry": geometry_json(&geom),
        "count": report.singular_values.len(),
        "sigma_max": report.sigma_max,
        "sigma_min_nonzero": report.sigma_min_nonzero,
        "zero_count": report.zero_count,
        "nonzero_count": report.singular_values.len() - report.zero_count,
        "condition": report.condition(),
        "count_unit": report.count_unit,
        "unit_eps": report.unit_eps,
    }))
}

fn cmd_lemma(a: &LemmaArgs, ctx: &mut Ctx) -> CmdResult {
    let matrix = match (a.preset, a.rows, a.cols) {
        (Some(p), None, None) => {
            let (m, c, k, h, w, s) = p.layout();
            let kernel = KernelTensor::he_normal(m, c, k, &mut Rng::new(a.seed))?;
            let geom = ConvGeometry::for_kernel(&kernel, h, w, s, 0)?;
            DbtMatrix::build(&kernel, &geom)?.to_dense()?
        }
        (None, Some(rows), Some(cols)) => {
            if rows == 0 || cols == 0 {
                return Err(Failure::Usage("--rows and --cols must be positive".into()));
            }
            let t = Tensor::randn(&[rows, cols], &mut Rng::new(a.seed))?;
            DenseMatrix::from_vec(rows, cols, t.into_data())?
        }
        _ => return Err(Failure::Usage("give either --rows and --cols, or --preset".into())),
    };
    let g = lemma_gap(&matrix);
    let expected = matrix.rows() as f64 - matrix.cols() as f64;
    let tol = 1e-8 * matrix.rows().max(matrix.cols()) as f64;
    let ok = (g.gap - expected).abs() <= tol;
    ctx.note(format!("l_r - l_c = {:.12} (expected {expected})", g.gap));
    if !ok {
        ctx.warn(format!("lemma identity violated: gap {} vs {expected}", g.gap));
    }
    Ok(json!({
        "rows": matrix.rows(),
        "cols": matrix.cols(),
        "l_r": g.l_r,
        "l_c": g.l_c,
        "gap": g.gap,
        "expected_gap": expected,
        "ok": ok,
    }))
}

/// Kernel configurations `(M, C, k, S)` covered by the regularizer checks.
pub const GRADCHECK_CONFIGS: [(usize, usize, usize, usize); 5] =
    [(1, 1, 1, 1), (2, 1, 2, 1), (3, 2, 3, 1), (4, 4, 3, 2), (2, 3, 4, 2)];

fn cmd_gradcheck(a: &GradcheckArgs, ctx: &mut Ctx) -> CmdResult {
    let floor = 1e-7;
    let mut worst = 0.0f64;
    let mut regs = Vec::new();
    for (n, &(m, c, k, s)) in GRADCHECK_CONFIGS.iter().enumerate() {
        let kernel = KernelTensor::randn(m, c, k, &mut Rng::new(a.seed + n as u64))?;
        for mode in [OrthMode::ConvRow, OrthMode::ConvCol, OrthMode::KernelRow, OrthMode::KernelCol] {
            if mode == OrthMode::ConvCol && s != 1 {
                continue;
            }
            let report = orthreg::orth_loss(&kernel, s, mode)?;
            let numeric = central_diff(
                |p| Ok(orthreg::orth_loss(&KernelTensor::from_vec(m, c, k, p.to_vec())?, s, mode)?.loss),
                kernel.data(),
                a.eps,
            )?;
            let err = max_rel_err(report.grad.data(), &numeric, floor);
            worst = worst.max(err);
            regs.push(json!({"config": [m, c, k, s], "mode": mode.to_string(), "max_rel_err": err}));
        }
    }

    // both conv adjoints on a padded, strided layer
    let mut rng = Rng::new(a.seed);
    let kernel = KernelTensor::randn(3, 2, 3, &mut rng)?;
    let geom = ConvGeometry::for_kernel(&kernel, 6, 5, 2, 1)?;
    let x = Tensor::randn(&geom.input_shape(), &mut rng)?;
    let d_out = Tensor::randn(&geom.output_shape(), &mut rng)?;
    let objective = |x: &Tensor, kk: &KernelTensor| -> crate::Result<f64> {
        let y = conv::conv2d(x, kk, geom.stride(), geom.pad())?;
        Ok(y.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum())
    };
    let gk = conv::conv2d_grad_kernel(&x, &d_out, &geom)?;
    let nk = central_diff(
        |p| objective(&x, &KernelTensor::from_vec(3, 2, 3, p.to_vec())?),
        kernel.data(),
        a.eps,
    )?;
    let gx = conv::conv2d_grad_input(&kernel, &d_out, &geom)?;
    let nx = central_diff(
        |p| objective(&Tensor::from_vec(&geom.input_shape(), p.to_vec())?, &kernel),
        x.data(),
        a.eps,
    )?;
    let conv_kernel_err = max_rel_err(gk.data(), &nk, floor);
    let conv_input_err = max_rel_err(gx.data(), &nx, floor);
    worst = worst.max(conv_kernel_err).max(conv_input_err);

    let base = TrainConfig {
        seed: a.seed,
        mode: a.reg.into(),
        ..TrainConfig::default()
    };
    let plain = trainer::grad_check_model(&TrainConfig { lambda: 0.0, ..base.clone() }, a.eps)?;
    let regularized = trainer::grad_check_model(&TrainConfig { lambda: a.lambda, ..base }, a.eps)?;
    worst = worst.max(plain).max(regularized);
    let ok = worst <= a.tolerance;
    ctx.note(format!("worst relative error {worst:.3e} (tolerance {:.1e})", a.tolerance));
    Ok(json!({
        "eps": a.eps,
        "tolerance": a.tolerance,
        "regularizers": regs,
        "conv_grad_kernel": conv_kernel_err,
        "conv_grad_input": conv_input_err,
        "model_lambda_0": plain,
        "model_lambda": {"lambda": a.lambda, "max_rel_err": regularized},
        "max_rel_err": worst,
        "ok": ok,
    }))
}

fn cmd_oracle(a: &OracleArgs, ctx: &mut Ctx) -> CmdResult {
    let (kernel, geom) = resolve_layer(&a.source)?;
    let mut rng = Rng::new(a.source.seed ^ 0xa5a5);
    let matvec = oracle::conv_vs_matvec(&kernel, &geom, a.trials, &mut rng)?;
    let row = oracle::row_condition(&kernel, geom.stride())?;
    let (col, col_swap_only) = if geom.stride() == 1 {
        let c = oracle::col_condition(&kernel)?;
        // the same comparison with the axis swap alone, for reference
        let swapped = crate::conv::self_conv(&swap_kernel_axes(&kernel), kernel.k() - 1, 1)?;
        let flipped = crate::conv::self_conv(&crate::conv::transpose_kernel(&kernel), kernel.k() - 1, 1)?;
        let unflipped = swapped.max_abs_diff(&flipped)?;
        (Some(c), Some(c.max(unflipped)))
    } else {
        (None, None)
    };
    let dense = DbtMatrix::build(&kernel, &geom)?.to_dense()?;
    let gap = lemma_gap(&dense);
    let expected = dense.rows() as f64 - dense.cols() as f64;
    let tol = 1e-10;
    let ok = matvec <= tol && row <= tol && col.is_none_or(|c| c <= tol)
        && (gap.gap - expected).abs() <= 1e-8 * dense.rows().max(dense.cols()) as f64;
    ctx.note(format!("conv vs DBT {matvec:.2e}, row condition {row:.2e}, column condition {col:?}"));
    Ok(json!({
        "geometry": geometry_json(&geom),
        "trials": a.trials,
        "conv_vs_dbt_max_abs": matvec,
        "row_selfconv_vs_gram_max_abs": row,
        "col_selfconv_vs_gram_max_abs": col,
        "col_axis_swap_only_max_abs": col_swap_only,
        "lemma_gap": gap.gap,
        "lemma_expected": expected,
        "ok": ok,
    }))
}

fn metrics_rows(m: &trainer::TrainMetrics) -> Vec<Vec<Cell>> {
    std::iter::once(&m.initial)
        .chain(&m.epochs)
        .map(|e| {
            vec![
                e.epoch.into(),
                e.task_loss.into(),
                e.orth_loss.iter().sum::<f64>().into(),
                e.accuracy.into(),
            ]
        })
        .collect()
}

fn cmd_train(a: &TrainArgs, ctx: &mut Ctx) -> CmdResult {
    let mut cfg = match &a.config {
        Some(path) => io::read_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(r) = a.reg {
        cfg.mode = r.into();
    }
    cfg.validate()?;
    let data = trainer::gen_dataset(cfg.seed, a.n_per_class)?;
    let metrics = trainer::train(&cfg, &data)?;
    io::write_csv(&a.out, &["epoch", "task_loss", "orth_loss", "accuracy"], &metrics_rows(&metrics))?;
    if let Some(path) = &a.layers_out {
        let rows: Vec<Vec<Cell>> = std::iter::once(&metrics.initial)
            .chain(&metrics.epochs)
            .flat_map(|e| {
                e.orth_loss
                    .iter()
                    .enumerate()
                    .map(move |(l, &v)| vec![e.epoch.into(), l.into(), v.into()])
            })
            .collect();
        io::write_csv(path, &["epoch", "layer", "orth_loss"], &rows)?;
    }
    if let Some(dir) = &a.kernels_out {
        std::fs::create_dir_all(dir)?;
        for (i, k) in metrics.final_kernels.iter().enumerate() {
            io::write_npy(dir.join(format!("conv{}.npy", i + 1)), k.tensor(), NpyDtype::F8)?;
        }
    }
    let last = metrics.epochs.last().expect("at least one epoch");
    ctx.note(format!(
        "epoch {}: task loss {:.4}, accuracy {:.3}, orth {:?} (initial {:?})",
        last.epoch, last.task_loss, last.accuracy, last.orth_loss, metrics.initial.orth_loss
    ));
    Ok(json!({
        "config": cfg,
        "samples": data.len(),
        "initial": metrics.initial,
        "final": last,
        "orth_decreased": last.orth_loss.iter().zip(&metrics.initial.orth_loss).all(|(f, i)| f < i),
    }))
}

fn cmd_demo(a: &DemoArgs, ctx: &mut Ctx) -> CmdResult {
    if a.preset == Preset::Sec48Sigma {
        return Err(Failure::Usage("sec48-sigma is too large for a dense spectrum; use `spectrum --preset sec48-sigma`".into()));
    }
    let (m, c, k, h, w, s) = a.preset.layout();
    let kernel = KernelTensor::he_normal(m, c, k, &mut Rng::new(a.seed))?;
    let geom = ConvGeometry::for_kernel(&kernel, h, w, s, 0)?;
    let before = spectrum::layer_spectrum(&kernel, &geom, 0.01)?;
    let descent = trainer::minimize_orth_only(&kernel, s, a.steps, a.lr)?;
    let after = spectrum::layer_spectrum(&descent.kernel, &geom, 0.01)?;
    let loss_before = descent.trajectory[0];
    let loss_after = *descent.trajectory.last().expect("non-empty");

    let rows: Vec<Vec<Cell>> = before
        .singular_values
        .iter()
        .zip(&after.singular_values)
        .enumerate()
        .map(|(i, (&b, &f))| vec![i.into(), b.into(), f.into()])
        .collect();
    io::write_csv(&a.out, &["index", "sigma_before", "sigma_after"], &rows)?;
    if let Some(path) = &a.hist_out {
        let hi = before.sigma_max.max(after.sigma_max);
        let hb = spectrum::histogram(&before.singular_values, a.bins, 0.0, hi)?;
        let ha = spectrum::histogram(&after.singular_values, a.bins, 0.0, hi)?;
        let rows: Vec<Vec<Cell>> = (0..a.bins)
            .map(|i| vec![hb.edges[i].into(), hb.edges[i + 1].into(), hb.counts[i].into(), ha.counts[i].into()])
            .collect();
        io::write_csv(path, &["bin_lo", "bin_hi", "count_before", "count_after"], &rows)?;
    }

    let dbt = DbtMatrix::build(&descent.kernel, &geom)?;
    let gram_dev = dbt.row_gram()?.dist_to_identity_sq().sqrt();
    let bound = ((geom.h_out() * geom.w_out()) as f64 * loss_after).sqrt();
    ctx.note(format!(
        "orth loss {loss_before:.4e} -> {loss_after:.4e}; condition {:.4} -> {:.4}",
        before.condition(),
        after.condition()
    ));
    Ok(json!({
        "preset": a.preset.to_possible_value().map(|v| v.get_name().to_string()),
        "geometry": geometry_json(&geom),
        "steps": a.steps,
        "lr": a.lr,
        "final_lr": descent.final_lr,
        "loss_before": loss_before,
        "loss_after": loss_after,
        "reduction": loss_before / loss_after,
        "before": {"sigma_max": before.sigma_max, "sigma_min_nonzero": before.sigma_min_nonzero, "condition": before.condition(), "count_unit": before.count_unit},
        "after": {"sigma_max": after.sigma_max, "sigma_min_nonzero": after.sigma_min_nonzero, "condition": after.condition(), "count_unit": after.count_unit},
        "gram_deviation": gram_dev,
        "gram_bound": bound,
        "bound_holds": gram_dev <= bound,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("orthoconv").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run_capture(&["lemma", "--bogus"]);
        assert_eq!(code, 2);
        assert!(err.contains("bogus"));
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        assert_eq!(run_capture(&[]).0, 2);
        assert_eq!(run_capture(&["lemma"]).0, 2);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("demo-spectrum"));
    }

    #[test]
    fn triple_parser() {
        assert_eq!(parse_triple("4, 12,12").unwrap(), [4, 12, 12]);
        assert!(parse_triple("4,12").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn lemma_on_random_matrix() {
        let (code, out, _) = run_capture(&["lemma", "--rows", "9", "--cols", "16", "--seed", "3"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["expected_gap"], -7.0);
        assert!((v["gap"].as_f64().unwrap() + 7.0).abs() < 1e-9);
    }

    #[test]
    fn domain_error_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.npy");
        let k = KernelTensor::randn(2, 2, 3, &mut Rng::new(1)).unwrap();
        io::write_npy(&path, k.tensor(), NpyDtype::F8).unwrap();
        let p = path.to_str().unwrap();
        let (code, _, err) = run_capture(&["check", "--kernel", p, "--stride", "2", "--mode", "col"]);
        assert_eq!(code, 1);
        assert!(err.contains("stride 1"));
        let (code, _, _) = run_capture(&["check", "--kernel", "/nonexistent.npy"]);
        assert_eq!(code, 1);
    }
}

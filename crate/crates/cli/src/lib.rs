//! Command-line front end: edge extraction, intensity heatmaps, losses,
//! metric evaluation over directories and the toy forward pass.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for data errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use sodkit_core::grid::sigmoid;
use sodkit_core::loss::{self, binarize, pixel_intensity, BINARIZE_THRESHOLD, DEFAULT_KERNELS, DEFAULT_LAMBDA};
use sodkit_core::metrics::{evaluate, MetricReport};
use sodkit_core::nettoy::{build_toy, ramp_input, ToyConfig};
use sodkit_core::pgm::{read_pgm, write_pgm};
use sodkit_core::spectral::{edge_magnitude, DEFAULT_RADIUS};
use sodkit_core::Grid2D;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<sodkit_core::Error> for CliError {
    fn from(e: sodkit_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sodkit", version, about = "Salient object detection kernels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// High-pass edge magnitude of a greyscale image.
    Edge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pixel intensity heatmap of a mask, rescaled to the full grey range.
    Intensity {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KERNELS)]
        kernels: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Adaptive pixel intensity loss of a prediction against a mask.
    Loss {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KERNELS)]
        kernels: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Emit a JSON report instead of text.
        #[arg(long)]
        json: bool,
    },
    /// MaxF, MeanF, MAE and S-measure for every same-named file pair.
    Eval {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        /// Write per-file rows and the means to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build the seeded toy network and run it on a ramp image.
    DemoForward {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write the four supervision maps as PGM files here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Edge { input, radius, output } => cmd_edge(input, *radius, output, out),
        Command::Intensity { gt, kernels, lambda, output } => cmd_intensity(gt, kernels, *lambda, output, out),
        Command::Loss { gt, pred, kernels, lambda, json } => cmd_loss(gt, pred, kernels, *lambda, *json, out),
        Command::Eval { gt_dir, pred_dir, csv } => cmd_eval(gt_dir, pred_dir, csv.as_deref(), out, err),
        Command::DemoForward { seed, size, output_dir } => cmd_demo_forward(*seed, *size, output_dir.as_deref(), out),
    }
}

fn check_loss_flags(kernels: &[usize], lambda: f64) -> CliResult<()> {
    if kernels.is_empty() || kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(CliError::Usage(format!("--kernels must be odd positive sizes, got {kernels:?}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CliError::Usage(format!("--lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

fn read(path: &Path) -> CliResult<Grid2D> {
    read_pgm(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Divides by the maximum so the brightest pixel maps to 1. Returns the
/// scale used (0 for an all-zero map, which is left unchanged).
fn normalize_by_max(g: &Grid2D) -> (Grid2D, f64) {
    let m = g.max();
    if m > 0.0 {
        (g.map(|v| v / m), m)
    } else {
        (g.clone(), 0.0)
    }
}

pub fn cmd_edge(input: &Path, radius: f64, output: &Path, out: &mut dyn Write) -> CliResult<i32> {
    if !radius.is_finite() || radius < 0.0 {
        return Err(CliError::Usage(format!("--radius must be finite and >= 0, got {radius}")));
    }
    let img = read(input)?;
    let (scaled, scale) = normalize_by_max(&edge_magnitude(&img, radius)?);
    write_pgm(output, &scaled)?;
    writeln!(out, "edge magnitude max {scale:.6} mapped to 255")?;
    Ok(0)
}

pub fn cmd_intensity(
    gt: &Path,
    kernels: &[usize],
    lambda: f64,
    output: &Path,
    out: &mut dyn Write,
) -> CliResult<i32> {
    check_loss_flags(kernels, lambda)?;
    let mask = binarize(&read(gt)?, BINARIZE_THRESHOLD);
    let omega = pixel_intensity(&mask, kernels, lambda)?;
    let (scaled, scale) = normalize_by_max(&omega.omega);
    write_pgm(output, &scaled)?;
    writeln!(out, "omega max {scale:.6} mapped to 255")?;
    Ok(0)
}

/// JSON body of `loss --json`.
#[derive(Debug, Serialize)]
pub struct LossJson {
    pub schema: u32,
    pub abce: f64,
    pub aiou: f64,
    pub al1: f64,
    pub total: f64,
}

pub fn cmd_loss(
    gt: &Path,
    pred: &Path,
    kernels: &[usize],
    lambda: f64,
    json: bool,
    out: &mut dyn Write,
) -> CliResult<i32> {
    check_loss_flags(kernels, lambda)?;
    let y = binarize(&read(gt)?, BINARIZE_THRESHOLD);
    let yhat = read(pred)?;
    let r = loss::api_loss(&y, &yhat, kernels, lambda)?;
    if json {
        let body = LossJson { schema: 1, abce: r.abce, aiou: r.aiou, al1: r.al1, total: r.total };
        writeln!(out, "{}", serde_json::to_string(&body).expect("plain struct serialises"))?;
    } else {
        writeln!(out, "abce  {:.6}\naiou  {:.6}\nal1   {:.6}\ntotal {:.6}", r.abce, r.aiou, r.al1, r.total)?;
    }
    Ok(0)
}

/// One evaluated image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub filename: String,
    pub max_f: f64,
    pub mean_f: f64,
    pub mae: f64,
    pub s_measure: f64,
}

fn pgm_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

fn eval_pair(name: &str, gt_dir: &Path, pred_dir: &Path) -> CliResult<EvalRow> {
    let gt = binarize(&read(&gt_dir.join(name))?, BINARIZE_THRESHOLD);
    let pred = read(&pred_dir.join(name))?;
    let MetricReport { max_f, mean_f, mae, s_measure, .. } =
        evaluate(&gt, &pred).map_err(|e| CliError::Data(format!("{name}: {e}")))?;
    Ok(EvalRow { filename: name.to_string(), max_f, mean_f, mae, s_measure })
}

/// Evaluates every file present in both directories, in sorted name order.
/// Returns the rows and the names found in only one directory.
pub fn eval_dirs(gt_dir: &Path, pred_dir: &Path) -> CliResult<(Vec<EvalRow>, Vec<String>)> {
    let gt = pgm_names(gt_dir)?;
    let pred = pgm_names(pred_dir)?;
    let matched: Vec<&String> = gt.intersection(&pred).collect();
    let unmatched: Vec<String> = gt.symmetric_difference(&pred).cloned().collect();
    let rows = matched
        .par_iter()
        .map(|name| eval_pair(name, gt_dir, pred_dir))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((rows, unmatched))
}

fn means(rows: &[EvalRow]) -> [f64; 4] {
    let n = rows.len().max(1) as f64;
    let mut m = [0.0; 4];
    for r in rows {
        for (acc, v) in m.iter_mut().zip([r.max_f, r.mean_f, r.mae, r.s_measure]) {
            *acc += v;
        }
    }
    m.map(|v| v / n)
}

/// CSV with a header, one row per pair and a final `mean` row; six decimals.
pub fn render_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("filename,max_f,mean_f,mae,s_measure\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.filename, r.max_f, r.mean_f, r.mae, r.s_measure).unwrap();
    }
    let [a, b, c, d] = means(rows);
    writeln!(s, "mean,{a:.6},{b:.6},{c:.6},{d:.6}").unwrap();
    s
}

pub fn render_table(rows: &[EvalRow]) -> String {
    let width = rows.iter().map(|r| r.filename.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "filename", "maxF", "meanF", "MAE", "S_m");
    for r in rows {
        writeln!(s, "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}", r.filename, r.max_f, r.mean_f, r.mae, r.s_measure)
            .unwrap();
    }
    let [a, b, c, d] = means(rows);
    writeln!(s, "{:<width$}  {a:>6.3}  {b:>6.3}  {c:>6.3}  {d:>6.3}", "mean").unwrap();
    s
}

pub fn cmd_eval(
    gt_dir: &Path,
    pred_dir: &Path,
    csv: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<i32> {
    let (rows, unmatched) = eval_dirs(gt_dir, pred_dir)?;
    for name in &unmatched {
        writeln!(err, "unmatched: {name}")?;
    }
    if let Some(path) = csv {
        std::fs::write(path, render_csv(&rows)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    out.write_all(render_table(&rows).as_bytes())?;
    Ok(if unmatched.is_empty() && !rows.is_empty() { 0 } else { 2 })
}

/// Order-sensitive digest of the exact bits of a set of maps. Stable for a
/// given build; not meant for comparison across toolchains.
pub fn digest(maps: &[&Grid2D]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for g in maps {
        g.dims().hash(&mut h);
        for v in g.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

pub fn cmd_demo_forward(seed: u64, size: usize, output_dir: Option<&Path>, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = ToyConfig { seed, ..ToyConfig::with_size(size) };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let net = build_toy(&cfg)?;
    let image = ramp_input(cfg.in_channels, cfg.height, cfg.width);
    let (result, trace) = net.forward_traced(&image)?;

    writeln!(out, "seed {seed}, input {}x{}x{}, {} parameters", cfg.in_channels, size, size, net.num_params())?;
    for (k, (c, h, w)) in trace.encoder_shapes.iter().enumerate() {
        writeln!(out, "E{}   {c}x{h}x{w}", k + 1)?;
    }
    let (c, h, w) = trace.aggregated_shape;
    writeln!(out, "X    {c}x{h}x{w}, {} of {c} channels kept", trace.kept_channels)?;
    writeln!(out, "softmax max row error {:.3e}", trace.softmax_row_error)?;
    let names = ["DS_0", "DS_1", "DS_2", "DS_e", "edge"];
    let maps: Vec<&Grid2D> = result.ds.iter().chain([&result.edge]).collect();
    for (name, g) in names.iter().zip(&maps) {
        writeln!(
            out,
            "{name:<5}{}x{}  min {:.6}  max {:.6}  mean {:.6}",
            g.height(),
            g.width(),
            g.min(),
            g.max(),
            g.mean()
        )?;
    }
    writeln!(out, "digest {:016x}", digest(&maps))?;
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)?;
        for (name, g) in names.iter().zip(&result.ds) {
            write_pgm(dir.join(format!("{}.pgm", name.to_lowercase())), g)?;
        }
        write_pgm(dir.join("edge.pgm"), &result.edge.map(sigmoid))?;
    }
    Ok(0)
}

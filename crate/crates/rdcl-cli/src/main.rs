//! rdcl: variable-rate learned image codec CLI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdcl::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use rdcl::codec::{self, CodecError};
use rdcl::context::ContextKind;
use rdcl::entropy::EntropyError;
use rdcl::eval::{self, RDCurve};
use rdcl::image_io;
use rdcl::model::{CodecModel, ModelConfig};
use rdcl::training::{self, ImageDataset, PhaseSchedule};
use rdcl::transforms::TransformRegistry;

#[derive(Parser)]
#[command(name = "rdcl", version, about = "Variable-rate learned image compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for all stochastic behavior.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Compress one image into an .rdcl bitstream.
    Compress(CompressArgs),
    /// Decompress an .rdcl bitstream to a PNG.
    Decompress(DecompressArgs),
    /// Sweep the gain grid over a directory and emit an RD curve report.
    EvalRd(EvalRdArgs),
    /// Bjontegaard delta rate between two RD-curve JSON files.
    BdRate(BdRateArgs),
    /// Latent correlation diagnostic on one image.
    Correlation(CorrelationArgs),
    /// Bit-allocation heatmap for one image.
    BitsMap(BitsMapArgs),
    /// Parameter count and MACs/pixel of a checkpoint.
    Complexity(ComplexityArgs),
    /// Encode/decode latency benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    images: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Transform registry name.
    #[arg(long, default_value = "baseline_conv")]
    transform: String,
    /// Context model kind: hyperprior | checkerboard | charm | scctx.
    #[arg(long, default_value = "hyperprior")]
    context: String,
    /// Schedule preset: default | desk.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Optional JSON schedule file overriding the preset.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Internal conv width.
    #[arg(long)]
    width: Option<usize>,
    /// Latent channels M.
    #[arg(long)]
    latent_channels: Option<usize>,
    /// Hyper channels N.
    #[arg(long)]
    hyper_channels: Option<usize>,
    /// Context net width.
    #[arg(long)]
    ctx_width: Option<usize>,
    /// Write per-epoch logs as JSON lines here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Input image (PNG or PPM).
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Scalar gain; trained grid values lie on sqrt(lambda/0.0018).
    #[arg(long, conflicts_with = "lambda")]
    gain: Option<f32>,
    /// Pick the gain from lambda via the trained table (geometric
    /// interpolation between grid points).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    /// Input .rdcl bitstream.
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRdArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// "11pt" for the trained grid, or a comma-separated gain list.
    #[arg(long, default_value = "11pt")]
    gains: String,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct BdRateArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct CorrelationArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    gain: f32,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BitsMapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    gain: f32,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 768)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1.0)]
    gain: f32,
}

/// Error with the documented exit code: 2 usage, 3 data, 4 model mismatch.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        CliError { code: 2, message: m.into() }
    }
    fn data(m: impl Into<String>) -> Self {
        CliError { code: 3, message: m.into() }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<EntropyError> for CliError {
    fn from(e: EntropyError) -> Self {
        let code = if matches!(e, EntropyError::ModelIdMismatch { .. }) { 4 } else { 3 };
        CliError { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // RDCL_THREADS caps the worker pool
    if let Ok(n) = std::env::var("RDCL_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_model(path: &PathBuf) -> Result<CodecModel, CliError> {
    let (model, _) = load_checkpoint(path)?;
    Ok(model)
}

fn load_images_dir(dir: &PathBuf) -> Result<Vec<rdcl::ndarray::Array3<f32>>, CliError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in &paths {
        match image_io::load_image(p) {
            Ok(img) => images.push(img),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(CliError::data(format!("no decodable images in {}", dir.display())));
    }
    Ok(images)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => train(args, cli.seed),
        Command::Compress(args) => compress(args),
        Command::Decompress(args) => decompress(args),
        Command::EvalRd(args) => eval_rd(args),
        Command::BdRate(args) => bd_rate_cmd(args),
        Command::Correlation(args) => correlation(args),
        Command::BitsMap(args) => bits_map(args),
        Command::Complexity(args) => complexity(args),
        Command::Bench(args) => bench(args),
    }
}

fn train(args: TrainArgs, seed: u64) -> Result<(), CliError> {
    // validate the run configuration against the registry before any work
    let registry = TransformRegistry::with_defaults();
    if !registry.names().contains(&args.transform) {
        return Err(CliError::usage(format!(
            "unknown transform '{}'; registered: {}",
            args.transform,
            registry.names().join(", ")
        )));
    }
    let context = ContextKind::parse(&args.context).map_err(|e| CliError::usage(e.to_string()))?;
    let mut config = ModelConfig::desk(&args.transform, context, seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(w) = args.width {
        config.transform_config.width = w;
    }
    if let Some(m) = args.latent_channels {
        config.transform_config.latent_channels = m;
        config.transform_config.feature_channels =
            if context == ContextKind::Hyperprior { 2 * m } else { config.transform_config.feature_channels };
    }
    if let Some(n) = args.hyper_channels {
        config.transform_config.hyper_channels = n;
    }
    if let Some(w) = args.ctx_width {
        config.context_width = w;
    }
    let schedule: PhaseSchedule = if let Some(path) = &args.schedule {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read schedule {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("bad schedule json: {e}")))?
    } else {
        match args.preset.as_str() {
            "default" => training::default_schedule(),
            "desk" => training::desk_schedule(),
            other => return Err(CliError::usage(format!("unknown preset '{other}'"))),
        }
    };
    let mut model =
        CodecModel::new(config).map_err(|e| CliError::usage(e.to_string()))?;
    eprintln!(
        "training {} + {} ({} params) on {}",
        args.transform,
        args.context,
        model.total_params(),
        args.images.display()
    );
    let dataset = ImageDataset::load_dir(&args.images, schedule.crop)
        .map_err(|e| CliError::data(e.to_string()))?;
    for s in &dataset.skipped {
        eprintln!("warning: skipped {s}");
    }
    let report = training::train_full(&mut model, &schedule, &dataset, seed)
        .map_err(|e| CliError::data(e.to_string()))?;
    if let Some(log) = &args.log {
        std::fs::write(log, training::logs_to_jsonl(&report.logs))
            .map_err(|e| CliError::data(format!("cannot write log: {e}")))?;
    }
    if report.diverged {
        eprintln!("warning: training diverged; checkpoint holds the last stable parameters");
    }
    save_checkpoint(&model, None, &args.out)?;
    println!(
        "trained {} epochs, final validation loss {:.5}, checkpoint {}",
        report.logs.len(),
        report.final_val_loss,
        args.out.display()
    );
    Ok(())
}

fn resolve_gain(model: &CodecModel, gain: Option<f32>, lambda: Option<f64>) -> Result<f32, CliError> {
    match (gain, lambda) {
        (Some(g), None) => Ok(g),
        (None, Some(l)) => {
            let table = model.gain_table();
            Ok(table.gain_for_lambda(l).map_err(|e| CliError::usage(e.to_string()))? as f32)
        }
        (None, None) => Ok(1.0),
        (Some(_), Some(_)) => Err(CliError::usage("--gain and --lambda are exclusive")),
    }
}

fn compress(args: CompressArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let gain = resolve_gain(&model, args.gain, args.lambda)?;
    let report = codec::compress_file(&model, &args.input, gain, &args.out)?;
    println!(
        "{} -> {} ({}x{}, gain {:.4}, payload {} bytes, {:.4} bpp)",
        args.input.display(),
        args.out.display(),
        report.width,
        report.height,
        gain,
        report.payload_bytes,
        report.bpp
    );
    Ok(())
}

fn decompress(args: DecompressArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    codec::decompress_file(&model, &args.input, &args.out)?;
    println!("{} -> {}", args.input.display(), args.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    curve: RDCurve,
    gains: Vec<f64>,
    per_image_bpp: Vec<Vec<f64>>,
    per_image_psnr: Vec<Vec<f64>>,
}

fn eval_rd(args: EvalRdArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let gains: Vec<f64> = if args.gains == "11pt" {
        model.gain_table().gains.clone()
    } else {
        args.gains
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::usage(format!("bad gain '{s}'")))
            })
            .collect::<Result<_, _>>()?
    };
    let images = load_images_dir(&args.images)?;
    use rayon::prelude::*;
    let mut per_gain: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for g in &gains {
        let rows: Result<Vec<(f64, f64)>, CliError> = images
            .par_iter()
            .map(|img| {
                let r = codec::compress_to_stream(&model, img, *g as f32)?;
                let out = codec::decompress_from_stream(&model, &r.stream)?;
                let b = eval::bpp(
                    r.stream.payload_bytes(),
                    r.stream.header.width,
                    r.stream.header.height,
                );
                let p = eval::psnr(img, &out).map_err(|e| CliError::data(e.to_string()))?;
                Ok((b, p))
            })
            .collect();
        per_gain.push((*g, rows?));
    }
    let curve = RDCurve::new(
        per_gain
            .iter()
            .map(|(_, rows)| {
                let n = rows.len() as f64;
                eval::RDPoint {
                    bpp: rows.iter().map(|r| r.0).sum::<f64>() / n,
                    psnr: rows.iter().map(|r| r.1).sum::<f64>() / n,
                }
            })
            .collect(),
    );
    for (g, p) in gains.iter().zip(curve.points.iter()) {
        println!("gain {g:8.4}  bpp {:.4}  psnr {:.2} dB", p.bpp, p.psnr);
    }
    if curve.monotone_violations() > 0 {
        eprintln!(
            "warning: PSNR not monotone in bpp at {} point(s)",
            curve.monotone_violations()
        );
    }
    let report = EvalReport {
        gains,
        per_image_bpp: per_gain.iter().map(|(_, r)| r.iter().map(|x| x.0).collect()).collect(),
        per_image_psnr: per_gain.iter().map(|(_, r)| r.iter().map(|x| x.1).collect()).collect(),
        curve,
    };
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| CliError::data(format!("cannot write json: {e}")))?;
    }
    if let Some(path) = &args.svg {
        let svg = eval::rd_curve_svg(&[("rdcl".to_string(), report.curve.clone())]);
        std::fs::write(path, svg).map_err(|e| CliError::data(format!("cannot write svg: {e}")))?;
    }
    Ok(())
}

fn read_curve(path: &PathBuf) -> Result<RDCurve, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    // accept a bare curve, a point list, or an eval-rd report
    if let Ok(c) = serde_json::from_str::<RDCurve>(&text) {
        return Ok(c);
    }
    if let Ok(points) = serde_json::from_str::<Vec<eval::RDPoint>>(&text) {
        return Ok(RDCurve::new(points));
    }
    #[derive(serde::Deserialize)]
    struct ReportCurve {
        curve: RDCurve,
    }
    serde_json::from_str::<ReportCurve>(&text)
        .map(|r| r.curve)
        .map_err(|e| CliError::data(format!("{} is not an RD curve: {e}", path.display())))
}

fn bd_rate_cmd(args: BdRateArgs) -> Result<(), CliError> {
    let anchor = read_curve(&args.anchor)?;
    let test = read_curve(&args.test)?;
    let bd = eval::bd_rate(&anchor, &test).map_err(|e| CliError::data(e.to_string()))?;
    println!("BD-Rate: {bd:+.4}%");
    Ok(())
}

fn analyze_image(
    model: &CodecModel,
    path: &PathBuf,
    gain: f32,
) -> Result<(rdcl::ndarray::Array3<f32>, rdcl::entropy::EntropyParams), CliError> {
    let img = image_io::load_image(path).map_err(|e| CliError::data(e.to_string()))?;
    let res = codec::compress_to_stream(model, &img, gain)?;
    Ok((res.y_hat_scaled, res.params))
}

fn correlation(args: CorrelationArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let (y_hat, params) = analyze_image(&model, &args.image, args.gain)?;
    let map = rdcl::analysis::latent_correlation(&y_hat, &params, args.k)
        .map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "rho {}x{} over {} windows: center {:.4}, avg |off-center| {:.4}",
        args.k,
        args.k,
        map.n_windows,
        map.center(),
        rdcl::analysis::avg_rho(&map)
    );
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&map).unwrap())
            .map_err(|e| CliError::data(format!("cannot write json: {e}")))?;
    }
    Ok(())
}

fn bits_map(args: BitsMapArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let (y_hat, params) = analyze_image(&model, &args.image, args.gain)?;
    let map = rdcl::analysis::bits_allocation_map(&y_hat, &params)
        .map_err(|e| CliError::data(e.to_string()))?;
    rdcl::analysis::export_heatmap(&map, &args.out)
        .map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "bits map {}x{} -> {} (total {:.1} bits for y)",
        map.shape.0,
        map.shape.1,
        args.out.display(),
        map.total_bits
    );
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&map).unwrap())
            .map_err(|e| CliError::data(format!("cannot write json: {e}")))?;
    }
    Ok(())
}

fn complexity(args: ComplexityArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    if args.width % 64 != 0 || args.height % 64 != 0 {
        return Err(CliError::usage("complexity dims must be multiples of 64"));
    }
    let params = eval::count_params(&model);
    let macs = eval::macs_per_pixel(&model, args.height, args.width);
    println!("params: {params}");
    println!("macs/pixel at {}x{}: {macs}", args.width, args.height);
    if let Some(path) = &args.json {
        let report = serde_json::json!({ "params_total": params, "macs_per_pixel": macs });
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| CliError::data(format!("cannot write json: {e}")))?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let images = load_images_dir(&args.images)?;
    let (enc, dec) = eval::latency_benchmark(&model, &images, args.gain as f64, args.repeats)
        .map_err(|e| CliError::data(e.to_string()))?;
    println!("enc: {enc:.4} s/image   dec: {dec:.4} s/image   ({} images x {} repeats)", images.len(), args.repeats);
    Ok(())
}

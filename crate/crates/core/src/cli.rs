//! Command-line front end: detection, evaluation, toy training, gradient
//! checking, architecture info and crop sampling.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::boxes::{decode, nms, GridSpec, DEFAULT_NMS_THRESHOLD};
use crate::eval::{match_detections, metrics, pr_csv, pr_curve, Detection, GroundTruth, MatchCounts, DEFAULT_MATCH_IOU};
use crate::io::{
    read_annotations, read_ppm, resize_nearest, write_annotations, write_ppm, Annotation, AnnotationError,
};
use crate::loss::{LsrConfig, DEFAULT_EPSILON};
use crate::mining::{generate_crops, CropQuota, SampleThresholds};
use crate::mining::SampleCategory;
use crate::network::{
    iyolo_spec, load_weights_any, save_weights, tiny_spec, LayerKind, Network, NetworkSpec, DEFAULT_NUM_CLASSES,
};
use crate::tensor::Tensor;
use crate::trainer::{
    grad_check_composite, grad_check_linear, synth_dataset, train, BackwardMode, LossHistory, TrainConfig,
    COMPOSITE_TOLERANCE, LINEAR_TOLERANCE,
};

pub const DEFAULT_CONFIDENCE: f64 = 0.25;
/// Number of synthetic images `train-toy` trains on.
pub const TOY_IMAGES: usize = 8;
/// Smoothing window for reported loss levels.
pub const LOSS_WINDOW: usize = 20;
const THREADS_ENV: &str = "IYOLO_THREADS";

/// Border colors per class: yellow, cyan, magenta.
const RENDER_COLORS: [[f32; 3]; DEFAULT_NUM_CLASSES] = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];

#[derive(Debug, Parser)]
#[command(name = "iyolo", version, about = "Grid object detector for cars, people and drivers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect objects in a PPM image and write them as annotations.
    Detect(DetectArgs),
    /// Score detections against labels; writes metrics.csv and pr.csv.
    Eval(EvalArgs),
    /// Train the tiny network on synthetic rectangles.
    TrainToy(TrainToyArgs),
    /// Compare analytic and finite-difference gradients on probe networks.
    Gradcheck(GradcheckArgs),
    /// Print the layer table and parameter count.
    Info(InfoArgs),
    /// Sample positive, part and negative crops around labeled objects.
    Crops(CropsArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Clone, Copy, Args)]
pub struct Thresholds {
    /// Minimum confidence (objectness times class probability) to keep a box.
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE, value_parser = unit_interval)]
    pub conf: f64,
    /// IoU above which a lower-ranked box of the same class is suppressed.
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD, value_parser = unit_interval)]
    pub nms: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            conf: DEFAULT_CONFIDENCE,
            nms: DEFAULT_NMS_THRESHOLD,
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Annotation output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a copy of the image with the detections drawn on it.
    #[arg(long)]
    pub render: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run this network over `--images`.
    #[arg(long, requires = "images", required_unless_present = "detections", conflicts_with = "detections")]
    pub weights: Option<PathBuf>,
    /// Directory of `.ppm` images.
    #[arg(long, requires = "weights")]
    pub images: Option<PathBuf>,
    /// Directory of precomputed detection annotations, used instead of a network.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Directory of ground-truth annotations named after the image stems.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory for metrics.csv and pr.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum IoU for a detection to match a ground truth.
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU, value_parser = unit_interval)]
    pub iou: f64,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    /// Output directory for weights, loss history and the training data.
    #[arg(long)]
    pub out: PathBuf,
    /// Also train without hard example mining and write its loss history.
    #[arg(long)]
    pub compare_ohem: bool,
    /// Label smoothing strength.
    #[arg(long, default_value_t = DEFAULT_EPSILON, value_parser = unit_interval)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// Describe the network stored in this weight file instead of the full-size default.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CropsArgs {
    /// Ground-truth annotation file of one image.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output annotation file, one crop per line.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub positive: usize,
    #[arg(long, default_value_t = 18)]
    pub negative: usize,
    #[arg(long, default_value_t = 55)]
    pub part: usize,
}

/// Misuse detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| UsageError(format!("{THREADS_ENV}={v:?} must be a positive integer")))?;
    // A pool configured earlier in this process wins; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::TrainToy(a) => cmd_train_toy(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Info(a) => cmd_info(&a),
        Command::Crops(a) => cmd_crops(&a),
    }
}

/// Resizes `image` to the network input by nearest neighbor, then decodes,
/// filters by confidence and suppresses duplicates. Boxes are normalized to
/// the image, so they apply to the original resolution.
pub fn detect_image(net: &Network<f32>, image: &Tensor<f32>, th: &Thresholds) -> anyhow::Result<Vec<Detection>> {
    let (c, h, w) = net.spec().input_shape;
    let input = if image.shape() == (c, h, w) {
        image.clone()
    } else {
        resize_nearest(image, h, w)
    };
    let raw = net.forward(&input)?;
    let decoded = decode(&raw, &net.spec().anchors, GridSpec::new(net.grid_size()))?;
    let kept: Vec<_> = decoded.into_iter().filter(|d| d.confidence >= th.conf).collect();
    Ok(nms(&kept, th.nms).iter().map(Detection::from).collect())
}

/// Draws a two-pixel border per detection in its class color.
pub fn render_detections(image: &Tensor<f32>, dets: &[Detection]) -> Tensor<f32> {
    let mut out = image.clone();
    let (h, w) = (image.height(), image.width());
    for d in dets {
        let color = RENDER_COLORS[d.class_id % RENDER_COLORS.len()];
        let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n - 1);
        let (x1, x2) = (px(d.bbox.x1, w), px(d.bbox.x2, w));
        let (y1, y2) = (px(d.bbox.y1, h), px(d.bbox.y2, h));
        for y in y1..=y2 {
            for x in x1..=x2 {
                let border = x < x1 + 2 || x + 2 > x2 || y < y1 + 2 || y + 2 > y2;
                if border {
                    for (ch, &v) in color.iter().enumerate() {
                        out.set(ch, y, x, v);
                    }
                }
            }
        }
    }
    out
}

fn cmd_detect(a: &DetectArgs) -> anyhow::Result<()> {
    let net = load_weights_any(&a.weights)?;
    let image = read_ppm(&a.image)?;
    let dets = detect_image(&net, &image, &a.thresholds)?;
    let anns: Vec<Annotation> = dets.iter().map(Annotation::from_detection).collect();
    match &a.out {
        Some(p) => write_annotations(p, &anns)?,
        None => print!("{}", crate::io::format_annotations(&anns)),
    }
    if let Some(p) = &a.render {
        write_ppm(&render_detections(&image, &dets), p)?;
    }
    log::info!("{} detections", dets.len());
    Ok(())
}

fn files_with_extension(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

type ImagePair = (Vec<Detection>, Vec<GroundTruth>);

/// Per-image `(detections, ground truths)` plus how many images were skipped
/// for lack of a label file.
fn collect_eval_pairs(a: &EvalArgs) -> anyhow::Result<(Vec<ImagePair>, usize)> {
    let (stems, dets): (Vec<String>, Vec<anyhow::Result<Vec<Detection>>>) = if let Some(dir) = &a.detections {
        let files = files_with_extension(dir, "txt")?;
        let dets = files
            .iter()
            .map(|f| Ok(read_annotations(f)?.iter().map(Annotation::to_detection).collect()))
            .collect();
        (files.iter().map(|f| stem(f)).collect(), dets)
    } else {
        let weights = a.weights.as_ref().ok_or_else(|| UsageError("--weights or --detections is required".into()))?;
        let images = a.images.as_ref().ok_or_else(|| UsageError("--images is required with --weights".into()))?;
        let net = load_weights_any(weights)?;
        let files = files_with_extension(images, "ppm")?;
        let dets = files
            .par_iter()
            .map(|f| detect_image(&net, &read_ppm(f)?, &a.thresholds))
            .collect();
        (files.iter().map(|f| stem(f)).collect(), dets)
    };
    let mut pairs = Vec::with_capacity(stems.len());
    let mut skipped = 0;
    for (s, d) in stems.iter().zip(dets) {
        let label = a.labels.join(format!("{s}.txt"));
        let gts = match read_annotations(&label) {
            Ok(v) => v.iter().map(Annotation::to_ground_truth).collect(),
            Err(AnnotationError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                log::warn!("no label file {}; skipping {s}", label.display());
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        pairs.push((d.with_context(|| format!("image {s}"))?, gts));
    }
    Ok((pairs, skipped))
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let (pairs, skipped) = collect_eval_pairs(a)?;
    let mut counts = MatchCounts::default();
    for (dets, gts) in &pairs {
        counts.add(&match_detections(dets, gts, a.iou).counts());
    }
    let report = metrics(&counts)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let metrics_path = a.out.join("metrics.csv");
    let pr_path = a.out.join("pr.csv");
    std::fs::write(&metrics_path, report.to_csv()).with_context(|| format!("writing {}", metrics_path.display()))?;
    std::fs::write(&pr_path, pr_csv(&pr_curve(&pairs, a.iou))).with_context(|| format!("writing {}", pr_path.display()))?;
    println!(
        "images {} skipped {skipped} tp {} fp {} fn {}",
        pairs.len(),
        counts.tp,
        counts.fp,
        counts.fn_
    );
    println!(
        "detection_rate {:.4} error_detection_rate {:.4} classification_rate {:.4} error_classification_rate {:.4}",
        report.detection_rate, report.error_detection_rate, report.classification_rate, report.error_classification_rate
    );
    Ok(())
}

fn write_dataset(dir: &Path, data: &[crate::trainer::Sample]) -> anyhow::Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&labels)?;
    for (i, s) in data.iter().enumerate() {
        write_ppm(&s.image, &images.join(format!("{i:03}.ppm")))?;
        let anns: Vec<Annotation> = s.gts.iter().map(Annotation::from_ground_truth).collect();
        write_annotations(&labels.join(format!("{i:03}.txt")), &anns)?;
    }
    Ok(())
}

fn train_once(cfg: &TrainConfig, data: &[crate::trainer::Sample]) -> anyhow::Result<(Network<f32>, LossHistory)> {
    let net = Network::build(tiny_spec(DEFAULT_NUM_CLASSES), cfg.seed)?;
    Ok(train(net, cfg, data)?)
}

fn cmd_train_toy(a: &TrainToyArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::toy(a.seed);
    cfg.iterations = a.iters as usize;
    cfg.lsr = LsrConfig::new(a.epsilon, DEFAULT_NUM_CLASSES).map_err(|e| UsageError(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let data = synth_dataset(a.seed, TOY_IMAGES);
    write_dataset(&a.out.join("data"), &data)?;

    let mut runs = vec![("", true)];
    if a.compare_ohem {
        runs.push(("_no_ohem", false));
    }
    for (suffix, ohem) in runs {
        cfg.ohem_enabled = ohem;
        let (net, history) = train_once(&cfg, &data)?;
        save_weights(&net, a.out.join(format!("weights{suffix}.iyw")))?;
        let csv = a.out.join(format!("loss{suffix}.csv"));
        history.write_csv(&csv).with_context(|| format!("writing {}", csv.display()))?;
        println!(
            "{}: loss {:.4} -> {:.4} (mean of first/last {LOSS_WINDOW} iterations)",
            if ohem { "hard mining" } else { "no mining" },
            history.head_mean(LOSS_WINDOW),
            history.tail_mean(LOSS_WINDOW)
        );
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let linear = grad_check_linear(a.seed);
    let composite = grad_check_composite(a.seed, BackwardMode::Correct);
    let control = grad_check_composite(a.seed, BackwardMode::SignFlipped);
    println!(
        "linear     max relative error {:.3e} over {} parameters (tolerance {LINEAR_TOLERANCE:e})",
        linear.max_relative_error, linear.checked
    );
    println!(
        "composite  max relative error {:.3e} over {} of {} parameters, {} skipped at kinks (tolerance {COMPOSITE_TOLERANCE:e})",
        composite.max_relative_error, composite.checked, composite.param_count, composite.skipped
    );
    println!(
        "sign-flip  max relative error {:.3e} (must exceed 0.5)",
        control.max_relative_error
    );
    let mut failures = Vec::new();
    if !linear.passes(LINEAR_TOLERANCE) {
        failures.push("linear probe");
    }
    if !composite.passes(COMPOSITE_TOLERANCE) {
        failures.push("composite probe");
    }
    if control.max_relative_error <= 0.5 {
        failures.push("sign-flip control went undetected");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        bail!("gradient check failed: {}", failures.join(", "))
    }
}

fn cmd_info(a: &InfoArgs) -> anyhow::Result<()> {
    let (spec, params) = match &a.weights {
        Some(p) => {
            let net = load_weights_any(p)?;
            (net.spec().clone(), net.param_count())
        }
        None => {
            let spec = iyolo_spec();
            let n = spec_param_count(&spec)?;
            (spec, n)
        }
    };
    let mut out = spec.summary_table()?;
    let _ = writeln!(out, "total parameters: {params}");
    print!("{out}");
    Ok(())
}

/// Parameter count implied by a layout, without allocating weights.
fn spec_param_count(spec: &NetworkSpec) -> anyhow::Result<usize> {
    let shapes = spec.validate()?;
    let mut total = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerKind::Convolutional {
            filters,
            kernel,
            batch_norm,
        } = &layer.kind
        {
            let cin = spec.layer_input_shape(&shapes, i).0;
            total += filters * cin * kernel * kernel + if *batch_norm { 4 * filters } else { *filters };
        }
    }
    Ok(total)
}

fn cmd_crops(a: &CropsArgs) -> anyhow::Result<()> {
    let gts: Vec<GroundTruth> = read_annotations(&a.labels)?
        .iter()
        .map(Annotation::to_ground_truth)
        .collect();
    let quota = CropQuota {
        positive: a.positive,
        negative: a.negative,
        part: a.part,
    };
    let crops = generate_crops(&gts, quota, &SampleThresholds::default(), a.seed);
    let mut text = String::from("# class cx cy w h  (category, IoU with best ground truth)\n");
    for c in &crops {
        let ann = Annotation::from_ground_truth(&GroundTruth {
            class_id: c.class_id.unwrap_or(0),
            bbox: c.bbox,
        });
        let _ = writeln!(
            text,
            "{} # {} iou={:.4}",
            crate::io::format_annotation(&ann),
            c.category.name(),
            c.iou
        );
    }
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    let n = |cat| crops.iter().filter(|c| c.category == cat).count();
    println!(
        "positive {} part {} negative {}",
        n(SampleCategory::Positive),
        n(SampleCategory::PartFace),
        n(SampleCategory::Negative)
    );
    if crops.len() < a.positive + a.negative + a.part {
        log::warn!("quotas not fully met after the attempt budget");
    }
    Ok(())
}

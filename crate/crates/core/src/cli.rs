use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rayon::prelude::*;

use wagner_det::anchors::{avg_iou, kmeans_anchors, shapes_from_dataset, AnchorSet, KMeansConfig};
use wagner_det::augment::{augment_sample, sample_resolution, AugmentConfig, ResolutionSet, Sample};
use wagner_det::decode::{
    decode_full, detections_to_jsonl, parse_detections_jsonl, read_head_set, write_head_set,
    DecodeConfig, Detection,
};
use wagner_det::eval::{ablation_report, cross_val_aggregate, evaluate, ApMode, EvalConfig, EvalReport};
use wagner_det::geometry::write_ppm;
use wagner_det::harness::{
    bench_counts_csv, bench_timings_text, degrade_to_detections, gen_synthetic_annotations,
    gen_synthetic_dataset, random_heads, time_decode, write_dataset, BenchConfig, DegradeSpec,
    SyntheticConfig,
};
use wagner_det::rng;
use wagner_det::trainmath::{schedule_csv, ScheduleKind, ScheduleSpec};
use wagner_det::voc::{
    dataset_stats, kfold_split, load_dataset, write_manifest, write_voc_xml, CategoryTable, Dataset,
    FoldSplit, ManifestEntry,
};
use wagner_det::{Error, Result};

/// Detection dataset tooling: statistics, splits, anchors, augmentation,
/// schedules, head decoding, evaluation and benchmarks.
///
/// Every output file lands in the output directory and is byte-identical
/// across runs with the same flags and seed. Timings are the one exception
/// and are only printed or written where `--timings` points.
#[derive(Debug, Parser)]
#[command(name = "wagner-det", version)]
pub struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for output files.
    #[arg(long, global = true, env = "WAGNER_DET_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Category names, one per line [default: grade0 .. grade5].
    #[arg(long, global = true)]
    categories: Option<PathBuf>,
    /// Worker threads for per-image work [default: all cores].
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-category label statistics (writes stats.csv).
    Stats(StatsArgs),
    /// Five-fold 70/10/20 split (writes fold0.json .. fold4.json).
    Split(ManifestArg),
    /// IoU k-means anchor priors (writes anchors.csv).
    Anchors(AnchorsArgs),
    /// Augmented copies of the training images (writes aug/).
    Augment(AugmentArgs),
    /// Learning-rate schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Decode head tensors into detections (writes detections.jsonl).
    Decode(DecodeArgs),
    /// VOC mAP of detections against ground truth (writes eval_report.*).
    Eval(EvalArgs),
    /// Ablation table of named eval reports (writes ablation.csv/.txt).
    Ablate(AblateArgs),
    /// Synthetic dataset, degraded detections and oracle APs.
    Synth(SynthArgs),
    /// Decode + NMS latency on random head tensors (writes bench_counts.csv).
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct ManifestArg {
    /// Manifest of `id<TAB>xml[<TAB>ppm]` lines.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    input: ManifestArg,
}

#[derive(Debug, Args)]
struct AnchorsArgs {
    #[command(flatten)]
    input: ManifestArg,
    /// Cluster only the training ids of this fold file.
    #[arg(long)]
    fold: Option<PathBuf>,
    /// Side of the square network input that boxes are rescaled to.
    #[arg(long, default_value_t = 640)]
    input_res: u32,
    /// Maximum Lloyd iterations.
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[command(flatten)]
    input: ManifestArg,
    /// Augment only the training ids of this fold file.
    #[arg(long)]
    fold: Option<PathBuf>,
    /// Number of augmented copies per image, one per epoch.
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    crop_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    translate_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    jitter_prob: f64,
    /// Probability of mixing with a random partner image.
    #[arg(long, default_value_t = 0.5)]
    mixup_prob: f64,
    /// Mixup ratio is drawn from Beta(alpha, alpha).
    #[arg(long, default_value_t = 1.5)]
    mixup_alpha: f64,
    /// Boxes keeping less than this share of their area are dropped.
    #[arg(long, default_value_t = 0.3)]
    min_keep: f64,
    /// Per-epoch training resolutions, listed in resolutions.csv.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "320,352,384,416,448,480,512,544,576,608"
    )]
    resolutions: Vec<u32>,
}

#[derive(Debug, Subcommand)]
enum ScheduleAction {
    /// Write `epoch,lr` rows to schedule.csv.
    Dump(ScheduleArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Step,
    Cosine,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, value_enum, default_value = "step")]
    kind: KindArg,
    #[arg(long, default_value_t = 200)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    base_lr: f64,
    #[arg(long, default_value_t = 0)]
    warmup: u32,
    /// Step: epochs at which the rate is multiplied by gamma.
    #[arg(long, value_delimiter = ',', default_value = "160,180")]
    milestones: Vec<u32>,
    /// Step: decay factor.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Cosine: floor of each cycle.
    #[arg(long, default_value_t = 0.0)]
    eta_min: f64,
    /// Cosine: first cycle length [default: --epochs].
    #[arg(long)]
    t0: Option<f64>,
    /// Cosine: cycle length growth factor.
    #[arg(long, default_value_t = 1.0)]
    t_mult: f64,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Lines of `id<TAB>heads.bin<TAB>orig_width<TAB>orig_height`.
    #[arg(long)]
    batch: PathBuf,
    /// Anchor CSV as written by `anchors` [default: built-in priors].
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Candidates scoring at or below this are discarded.
    #[arg(long, default_value = "1e-8")]
    score_thresh: f64,
    /// NMS overlap above which the lower-scored box is dropped.
    #[arg(long, default_value_t = 0.6)]
    iou_thresh: f64,
    /// Detections kept per image, best first.
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ApModeArg {
    Continuous,
    Elevenpoint,
}

impl From<ApModeArg> for ApMode {
    fn from(m: ApModeArg) -> Self {
        match m {
            ApModeArg::Continuous => ApMode::Continuous,
            ApModeArg::Elevenpoint => ApMode::ElevenPoint,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Detections as JSON lines.
    #[arg(long)]
    dets: PathBuf,
    #[arg(long, value_enum, default_value = "continuous")]
    ap_mode: ApModeArg,
    /// Minimum IoU for a detection to count as a match.
    #[arg(long, default_value_t = 0.5)]
    iou_thresh: f64,
    /// Fold files: evaluate each fold's test ids and average the folds.
    #[arg(long, value_delimiter = ',')]
    folds: Vec<PathBuf>,
    /// Model size to record in the report.
    #[arg(long)]
    model_size_bytes: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Baseline eval report; run names are file stems.
    #[arg(long)]
    baseline: PathBuf,
    /// Further eval reports, in table order.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    n_images: usize,
    #[arg(long, default_value_t = 96)]
    width: u32,
    #[arg(long, default_value_t = 96)]
    height: u32,
    /// Exact total box count, 1 to 3 per image [default: 1 to 3 at random].
    #[arg(long)]
    total_boxes: Option<usize>,
    /// Relative category frequencies [default: uniform].
    #[arg(long, value_delimiter = ',')]
    category_weights: Vec<f64>,
    /// Skip rendering pixmaps.
    #[arg(long)]
    no_pixels: bool,
    #[arg(long, default_value_t = 0.1)]
    miss_rate: f64,
    /// Expected false positives per image.
    #[arg(long, default_value_t = 0.5)]
    fp_rate: f64,
    /// Corner noise standard deviation in pixels.
    #[arg(long, default_value_t = 2.0)]
    loc_noise: f64,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0.5,1.0")]
    tp_band: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0.05,0.6")]
    fp_band: Vec<f64>,
    /// Also write random head tensors at this resolution and a decode batch.
    #[arg(long)]
    heads_res: Option<u32>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "320,352,384,416,448,480,512,544,576,608"
    )]
    resolutions: Vec<u32>,
    /// Timed runs per resolution.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value = "1e-8")]
    score_thresh: f64,
    #[arg(long, default_value_t = 0.6)]
    iou_thresh: f64,
    /// Also write the timing table here (not reproducible).
    #[arg(long)]
    timings: Option<PathBuf>,
}

/// Files and directories this invocation created, removed again on failure.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut first_missing = None;
        for a in dir.ancestors() {
            if a.as_os_str().is_empty() || a.exists() {
                break;
            }
            first_missing = Some(a.to_path_buf());
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            source: e,
        })?;
        self.dirs.extend(first_missing);
        Ok(())
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        self.files.push(path.clone());
        std::fs::write(&path, bytes).map_err(|e| Error::File { path, source: e })
    }

    fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn remove_all(&mut self) {
        for f in self.files.drain(..).rev() {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.drain(..).rev() {
            let _ = std::fs::remove_dir_all(d);
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_fold(path: &Path) -> Result<FoldSplit> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_json(&read_text(path)?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn run_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Parses `argv`, runs the command and returns the process exit status.
/// Errors print one line on stderr; a panic counts as an internal error.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 1;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::panic::set_hook(Box::new(|info| {
        eprintln!("internal error: {}", info.to_string().replace('\n', " "));
    }));
    let mut outputs = Outputs::default();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&cli, &mut outputs)));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            outputs.remove_all();
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            1
        }
        Err(_) => {
            outputs.remove_all();
            2
        }
    }
}

fn run(cli: &Cli, out: &mut Outputs) -> Result<()> {
    let g = &cli.global;
    let categories = match &g.categories {
        Some(p) => CategoryTable::from_lines(&read_text(p)?)?,
        None => CategoryTable::default(),
    };
    let dir = &g.out_dir;
    match &cli.command {
        Command::Stats(a) => {
            let ds = load_dataset(&a.input.manifest, &categories)?;
            let report = dataset_stats(&ds);
            out.write(dir.join("stats.csv"), report.to_csv())?;
            print!("{}", report.to_table());
        }
        Command::Split(a) => {
            let ds = load_dataset(&a.manifest, &categories)?;
            for f in kfold_split(&ds, g.seed)? {
                let json = serde_json::to_string_pretty(&f)? + "\n";
                out.write(dir.join(format!("fold{}.json", f.fold)), json)?;
                println!(
                    "fold {}: train {} val {} test {}",
                    f.fold,
                    f.train.len(),
                    f.val.len(),
                    f.test.len()
                );
            }
        }
        Command::Anchors(a) => {
            let ds = load_dataset(&a.input.manifest, &categories)?;
            let fold = a.fold.as_deref().map(read_fold).transpose()?;
            let shapes = shapes_from_dataset(&ds, fold.as_ref().map(|f| &f.train[..]), a.input_res)?;
            let config = KMeansConfig {
                seed: g.seed,
                max_iter: a.max_iter,
                ..KMeansConfig::default()
            };
            let anchors = kmeans_anchors(&shapes, &config)?;
            let score = avg_iou(&shapes, anchors.as_slice())?;
            let text = format!("{}avg_iou,{score:.6}\n", anchors.to_csv());
            out.write(dir.join("anchors.csv"), &text)?;
            print!("{text}");
        }
        Command::Augment(a) => augment_cmd(a, g.seed, &categories, dir, out)?,
        Command::Schedule {
            action: ScheduleAction::Dump(a),
        } => {
            let kind = match a.kind {
                KindArg::Step => ScheduleKind::Step {
                    milestones: a.milestones.clone(),
                    gamma: a.gamma,
                },
                KindArg::Cosine => ScheduleKind::Cosine {
                    eta_min: a.eta_min,
                    t0: a.t0.unwrap_or(f64::from(a.epochs)),
                    t_mult: a.t_mult,
                },
            };
            let spec = ScheduleSpec {
                base_lr: a.base_lr,
                total_epochs: a.epochs,
                warmup_epochs: a.warmup,
                kind,
            };
            out.write(dir.join("schedule.csv"), schedule_csv(&spec)?)?;
            println!("wrote {} epochs to {}", a.epochs, dir.join("schedule.csv").display());
        }
        Command::Decode(a) => decode_cmd(a, dir, out)?,
        Command::Eval(a) => eval_cmd(a, &categories, dir, out)?,
        Command::Ablate(a) => {
            let mut runs = vec![(run_name(&a.baseline), read_report(&a.baseline)?)];
            for p in &a.runs {
                runs.push((run_name(p), read_report(p)?));
            }
            let baseline = runs[0].0.clone();
            let table = ablation_report(&runs, &baseline)?;
            out.write(dir.join("ablation.csv"), table.to_csv())?;
            out.write(dir.join("ablation.txt"), table.to_text())?;
            print!("{}", table.to_text());
        }
        Command::Synth(a) => synth_cmd(a, g.seed, &categories, dir, out)?,
        Command::Bench(a) => {
            let cfg = BenchConfig {
                resolutions: a.resolutions.clone(),
                trials: a.trials,
                seed: g.seed,
                num_classes: categories.len(),
                anchors: AnchorSet::default(),
                decode: DecodeConfig {
                    score_thresh: a.score_thresh,
                    iou_thresh: a.iou_thresh,
                    ..DecodeConfig::default()
                },
            };
            let rows = time_decode(&cfg)?;
            out.write(dir.join("bench_counts.csv"), bench_counts_csv(&rows))?;
            let text = bench_timings_text(&rows);
            if let Some(p) = &a.timings {
                out.write(p.clone(), &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn training_ids(ds: &Dataset, fold: Option<&Path>) -> Result<Vec<String>> {
    match fold {
        Some(p) => Ok(read_fold(p)?.train),
        None => Ok(ds.ids().map(String::from).collect()),
    }
}

fn augment_cmd(
    a: &AugmentArgs,
    seed: u64,
    categories: &CategoryTable,
    dir: &Path,
    out: &mut Outputs,
) -> Result<()> {
    let ds = load_dataset(&a.input.manifest, categories)?;
    let ids = training_ids(&ds, a.fold.as_deref())?;
    let ds = ds.subset(&ids)?;
    let resolutions = ResolutionSet::new(a.resolutions.clone())?;
    let config = AugmentConfig {
        flip_prob: a.flip_prob,
        crop_prob: a.crop_prob,
        translate_prob: a.translate_prob,
        jitter_prob: a.jitter_prob,
        mixup_prob: a.mixup_prob,
        mixup_alpha: a.mixup_alpha,
        min_keep_frac: a.min_keep,
        ..AugmentConfig::default()
    };
    for (name, p) in [
        ("flip", config.flip_prob),
        ("crop", config.crop_prob),
        ("translate", config.translate_prob),
        ("jitter", config.jitter_prob),
        ("mixup", config.mixup_prob),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("{name} probability {p} outside [0, 1]")));
        }
    }
    let samples: Vec<Sample> = ds
        .annotations()
        .par_iter()
        .map(|ann| Sample::new(ds.load_image(&ann.image_id)?, ann.clone()))
        .collect::<Result<_>>()?;

    let n = samples.len() as u64;
    let aug_dir = dir.join("aug");
    out.dir(&aug_dir)?;
    let mut entries = Vec::new();
    let mut res_csv = String::from("epoch,resolution\n");
    for epoch in 0..a.epochs {
        res_csv.push_str(&format!("{epoch},{}\n", sample_resolution(epoch, seed, &resolutions)));
        let results: Vec<Result<Sample>> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::indexed_stream(seed, "augment", epoch * n + i as u64);
                let partner = (n > 1).then(|| {
                    let j = r.random_range(0..n - 1) as usize;
                    &samples[if j >= i { j + 1 } else { j }]
                });
                let mut aug = augment_sample(s, partner, &config, &mut r)?;
                aug.annotation.image_id = format!("{}_e{epoch}", s.annotation.image_id);
                Ok(aug)
            })
            .collect();
        for r in results {
            let s = r?;
            let id = s.annotation.image_id.clone();
            let xml = PathBuf::from(format!("{id}.xml"));
            let ppm = PathBuf::from(format!("{id}.ppm"));
            out.write(aug_dir.join(&xml), write_voc_xml(&s.annotation, categories))?;
            out.track(aug_dir.join(&ppm));
            write_ppm(aug_dir.join(&ppm), &s.image)?;
            entries.push(ManifestEntry {
                image_id: id,
                xml,
                pixmap: Some(ppm),
            });
        }
    }
    out.write(aug_dir.join("manifest.tsv"), write_manifest(&entries))?;
    out.write(aug_dir.join("resolutions.csv"), res_csv)?;
    println!("wrote {} augmented samples to {}", entries.len(), aug_dir.display());
    Ok(())
}

struct BatchLine {
    id: String,
    heads: PathBuf,
    dims: (u32, u32),
}

fn read_batch(path: &Path) -> Result<Vec<BatchLine>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            Error::InvalidInput(format!(
                "{}:{}: expected `id<TAB>heads<TAB>width<TAB>height`",
                path.display(),
                i + 1
            ))
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let w: u32 = f[2].trim().parse().map_err(|_| bad())?;
        let h: u32 = f[3].trim().parse().map_err(|_| bad())?;
        out.push(BatchLine {
            id: f[0].to_string(),
            heads: base.join(f[1]),
            dims: (w, h),
        });
    }
    Ok(out)
}

fn decode_cmd(a: &DecodeArgs, dir: &Path, out: &mut Outputs) -> Result<()> {
    let anchors = match &a.anchors {
        Some(p) => AnchorSet::from_csv(&read_text(p)?)?,
        None => AnchorSet::default(),
    };
    let config = DecodeConfig {
        score_thresh: a.score_thresh,
        iou_thresh: a.iou_thresh,
        max_dets: a.max_dets,
    };
    let batch = read_batch(&a.batch)?;
    let per_image: Vec<Result<Vec<Detection>>> = batch
        .par_iter()
        .map(|b| {
            let heads = read_head_set(&b.heads)?;
            let res = heads
                .iter()
                .find(|t| t.stride() == 8)
                .map(|t| t.input_resolution())
                .ok_or_else(|| {
                    Error::InvalidInput(format!("{}: no stride-8 tensor", b.heads.display()))
                })?;
            decode_full(&b.id, &heads, &anchors, res, b.dims, &config)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", b.id)))
        })
        .collect();
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    out.write(dir.join("detections.jsonl"), detections_to_jsonl(&all))?;
    println!("{} detections from {} images", all.len(), batch.len());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, categories: &CategoryTable, dir: &Path, out: &mut Outputs) -> Result<()> {
    let gt = load_dataset(&a.gt, categories)?;
    let dets = parse_detections_jsonl(&read_text(&a.dets)?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", a.dets.display())))?;
    let config = EvalConfig {
        iou_thresh: a.iou_thresh,
        mode: a.ap_mode.into(),
    };
    let mut report = if a.folds.is_empty() {
        evaluate(&gt, &dets, &config)?
    } else {
        let mut fold_reports = Vec::new();
        for (i, p) in a.folds.iter().enumerate() {
            let fold = read_fold(p)?;
            let test = gt.subset(&fold.test)?;
            let ids: std::collections::HashSet<&str> = fold.test.iter().map(String::as_str).collect();
            let mine: Vec<Detection> =
                dets.iter().filter(|d| ids.contains(d.image_id.as_str())).cloned().collect();
            let r = evaluate(&test, &mine, &config)?;
            out.write(dir.join(format!("fold{i}_report.json")), r.to_json())?;
            fold_reports.push(r);
        }
        cross_val_aggregate(&fold_reports)?
    };
    report.model_size_bytes = a.model_size_bytes;
    out.write(dir.join("eval_report.json"), report.to_json())?;
    out.write(dir.join("eval_report.csv"), report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn synth_cmd(
    a: &SynthArgs,
    seed: u64,
    categories: &CategoryTable,
    dir: &Path,
    out: &mut Outputs,
) -> Result<()> {
    let cfg = SyntheticConfig {
        seed,
        n_images: a.n_images,
        width: a.width,
        height: a.height,
        category_weights: a.category_weights.clone(),
        total_boxes: a.total_boxes,
    };
    let spec = DegradeSpec {
        miss_rate: a.miss_rate,
        fp_rate: a.fp_rate,
        loc_noise: a.loc_noise,
        tp_scores: (a.tp_band[0], a.tp_band[1]),
        fp_scores: (a.fp_band[0], a.fp_band[1]),
        seed,
    };
    spec.validate()?;
    let (ds, images) = if a.no_pixels {
        (gen_synthetic_annotations(&cfg, categories)?, None)
    } else {
        let (d, i) = gen_synthetic_dataset(&cfg, categories)?;
        (d, Some(i))
    };

    // write_dataset creates these; record them first so a failure cleans up.
    out.dir(dir)?;
    for a in ds.annotations() {
        out.track(dir.join("ann").join(format!("{}.xml", a.image_id)));
        if images.is_some() {
            out.track(dir.join("img").join(format!("{}.ppm", a.image_id)));
        }
    }
    out.track(dir.join("manifest.tsv"));
    let manifest = write_dataset(dir, &ds, images.as_deref())?;

    let degraded = degrade_to_detections(&ds, &spec)?;
    out.write(dir.join("detections.jsonl"), detections_to_jsonl(&degraded.detections))?;
    let sidecar = serde_json::json!({
        "spec": spec,
        "iou_thresh": degraded.oracle.iou_thresh,
        "categories": categories.names(),
        "continuous": degraded.oracle.continuous,
        "elevenpoint": degraded.oracle.elevenpoint,
        "map_continuous": degraded.oracle.map(ApMode::Continuous),
        "map_elevenpoint": degraded.oracle.map(ApMode::ElevenPoint),
    });
    out.write(dir.join("oracle.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;

    if let Some(res) = a.heads_res {
        let mut batch = String::new();
        for (i, ann) in ds.annotations().iter().enumerate() {
            let heads = random_heads(res, categories.len(), seed.wrapping_add(i as u64))?;
            let rel = PathBuf::from("heads").join(format!("{}.bin", ann.image_id));
            out.dir(&dir.join("heads"))?;
            out.track(dir.join(&rel));
            write_head_set(dir.join(&rel), &heads)?;
            batch.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                ann.image_id,
                rel.display(),
                ann.width,
                ann.height
            ));
        }
        out.write(dir.join("decode_batch.tsv"), batch)?;
    }
    println!(
        "{} images, {} boxes, {} detections; manifest {}",
        ds.len(),
        ds.annotations().iter().map(|a| a.objects.len()).sum::<usize>(),
        degraded.detections.len(),
        manifest.display()
    );
    Ok(())
}

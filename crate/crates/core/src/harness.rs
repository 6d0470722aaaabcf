//! Synthetic data, an independent AP oracle, and decode latency timing.
//!
//! Nothing here needs real images. [`gen_synthetic_dataset`] draws labelled
//! rectangles on noise, [`degrade_to_detections`] turns ground truth into a
//! plausible detector output with a known exact AP, and [`time_decode`]
//! measures the decode and NMS path on random head tensors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, Scale};
use crate::decode::{decode_full, grid_cells, DecodeConfig, Detection, HeadTensor, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};
use crate::eval::{ApMode, LatencyStats};
use crate::geometry::{write_ppm, BBox, Image};
use crate::rng;
use crate::voc::{write_manifest, write_voc_xml, CategoryTable, Dataset, GroundTruthObject, ImageAnnotation, ManifestEntry};

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    /// Relative frequency of each category; uniform when empty.
    pub category_weights: Vec<f64>,
    /// Exact number of boxes over the whole dataset. Each image still gets
    /// between one and three. When unset each image draws 1..=3 uniformly.
    pub total_boxes: Option<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_images: 20,
            width: 96,
            height: 96,
            category_weights: Vec::new(),
            total_boxes: None,
        }
    }
}

const MAX_BOXES_PER_IMAGE: usize = 3;

fn box_counts(cfg: &SyntheticConfig) -> Result<Vec<usize>> {
    let n = cfg.n_images;
    let mut rng = rng::stream(cfg.seed, "synth-counts");
    match cfg.total_boxes {
        None => Ok((0..n).map(|_| rng.random_range(1..=MAX_BOXES_PER_IMAGE)).collect()),
        Some(total) => {
            if total < n || total > MAX_BOXES_PER_IMAGE * n {
                return Err(Error::invalid(format!(
                    "{total} boxes cannot be spread over {n} images at 1 to {MAX_BOXES_PER_IMAGE} each"
                )));
            }
            let mut counts = vec![1; n];
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let extra = total - n;
            for i in order.iter().cycle().take(extra) {
                counts[*i] += 1;
            }
            Ok(counts)
        }
    }
}

/// Annotations only: no pixels are rendered. Ids are `syn00000`, `syn00001`
/// and so on; boxes have integer corners, at least 1/8 and at most 1/2 of
/// each image side.
pub fn gen_synthetic_annotations(cfg: &SyntheticConfig, categories: &CategoryTable) -> Result<Dataset> {
    if cfg.n_images == 0 {
        return Err(Error::invalid("a synthetic dataset needs at least one image"));
    }
    if cfg.width < 8 || cfg.height < 8 {
        return Err(Error::invalid("synthetic images must be at least 8x8"));
    }
    let k = categories.len();
    let weights = if cfg.category_weights.is_empty() {
        vec![1.0; k]
    } else if cfg.category_weights.len() == k {
        cfg.category_weights.clone()
    } else {
        return Err(Error::invalid(format!(
            "{} category weights for {k} categories",
            cfg.category_weights.len()
        )));
    };
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("category weights: {e}")))?;
    let counts = box_counts(cfg)?;
    let (w, h) = (cfg.width, cfg.height);
    let annotations = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut rng = rng::indexed_stream(cfg.seed, "synth-boxes", i as u64);
            let objects = (0..n)
                .map(|_| {
                    let bw = rng.random_range(w / 8..=w / 2);
                    let bh = rng.random_range(h / 8..=h / 2);
                    let x = rng.random_range(0..=w - bw);
                    let y = rng.random_range(0..=h - bh);
                    let bbox = BBox {
                        xmin: f64::from(x),
                        ymin: f64::from(y),
                        xmax: f64::from(x + bw),
                        ymax: f64::from(y + bh),
                    };
                    GroundTruthObject::new(pick.sample(&mut rng), bbox)
                })
                .collect();
            ImageAnnotation {
                image_id: format!("syn{i:05}"),
                width: w,
                height: h,
                objects,
            }
        })
        .collect();
    Dataset::new(categories.clone(), annotations)
}

/// Fill color of a category, spread around the hue circle.
fn category_color(c: usize, k: usize) -> [f32; 3] {
    let hue = c as f32 / k.max(1) as f32;
    let channel = |offset: f32| {
        let t = (hue + offset).fract();
        let v = (1.0 - (6.0 * t - 3.0).abs()).clamp(0.0, 1.0) * 0.6;
        0.4 + v
    };
    [channel(0.0), channel(2.0 / 3.0), channel(1.0 / 3.0)]
}

/// Renders `ann`: dark uniform noise with each box filled in its category
/// color (later boxes on top), plus mild noise on the fill. Values sit on the
/// 8-bit grid so that a pixmap round trip is lossless.
pub fn render_synthetic(ann: &ImageAnnotation, num_categories: usize, seed: u64, index: u64) -> Image {
    let mut rng = rng::indexed_stream(seed, "synth-pixels", index);
    let (w, h) = (ann.width as usize, ann.height as usize);
    let mut bytes: Vec<u8> = (0..w * h * 3).map(|_| rng.random_range(0..77)).collect();
    for o in &ann.objects {
        let color = category_color(o.category, num_categories).map(|c| (c * 255.0).round() as i32);
        let b = &o.bbox;
        for y in b.ymin as usize..b.ymax as usize {
            for x in b.xmin as usize..b.xmax as usize {
                for (c, base) in color.iter().enumerate() {
                    let v = base + rng.random_range(-12..=12);
                    bytes[(y * w + x) * 3 + c] = v.clamp(0, 255) as u8;
                }
            }
        }
    }
    let data = bytes.into_iter().map(|b| f32::from(b) / 255.0).collect();
    Image::new(w, h, data).expect("synthetic pixels are in range")
}

/// Annotations plus rendered images, in dataset order.
pub fn gen_synthetic_dataset(cfg: &SyntheticConfig, categories: &CategoryTable) -> Result<(Dataset, Vec<Image>)> {
    let ds = gen_synthetic_annotations(cfg, categories)?;
    let images = ds
        .annotations()
        .par_iter()
        .enumerate()
        .map(|(i, a)| render_synthetic(a, categories.len(), cfg.seed, i as u64))
        .collect();
    Ok((ds, images))
}

/// Writes `ann/<id>.xml`, `img/<id>.ppm` (when images are given) and
/// `manifest.tsv` under `dir`, returning the manifest path.
pub fn write_dataset(dir: &Path, ds: &Dataset, images: Option<&[Image]>) -> Result<PathBuf> {
    let ann_dir = dir.join("ann");
    std::fs::create_dir_all(&ann_dir).map_err(|e| Error::file(&ann_dir, e))?;
    if images.is_some() {
        let img_dir = dir.join("img");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
    }
    let mut entries = Vec::with_capacity(ds.len());
    for (i, a) in ds.annotations().iter().enumerate() {
        let xml = PathBuf::from("ann").join(format!("{}.xml", a.image_id));
        std::fs::write(dir.join(&xml), write_voc_xml(a, &ds.categories))
            .map_err(|e| Error::file(dir.join(&xml), e))?;
        let pixmap = match images {
            Some(imgs) => {
                let p = PathBuf::from("img").join(format!("{}.ppm", a.image_id));
                write_ppm(dir.join(&p), &imgs[i])?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image_id: a.image_id.clone(),
            xml,
            pixmap,
        });
    }
    let manifest = dir.join("manifest.tsv");
    std::fs::write(&manifest, write_manifest(&entries)).map_err(|e| Error::file(&manifest, e))?;
    Ok(manifest)
}

/// How ground truth is turned into fake detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Probability that a ground truth gets no detection.
    pub miss_rate: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    /// Standard deviation, in pixels, of the noise added to each corner.
    pub loc_noise: f64,
    /// Score band of detections derived from ground truth.
    pub tp_scores: (f64, f64),
    /// Score band of injected false positives.
    pub fp_scores: (f64, f64),
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            miss_rate: 0.1,
            fp_rate: 0.5,
            loc_noise: 2.0,
            tp_scores: (0.5, 1.0),
            fp_scores: (0.05, 0.6),
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        let band_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::invalid(format!("miss rate {} outside [0, 1]", self.miss_rate)));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return Err(Error::invalid(format!("fp rate {} must be >= 0", self.fp_rate)));
        }
        if !(self.loc_noise >= 0.0 && self.loc_noise.is_finite()) {
            return Err(Error::invalid(format!("localization noise {} must be >= 0", self.loc_noise)));
        }
        if !band_ok(self.tp_scores) || !band_ok(self.fp_scores) {
            return Err(Error::invalid("score bands must satisfy 0 < low <= high <= 1"));
        }
        Ok(())
    }
}

/// Exact APs (fractions) of a detection set, one entry per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAps {
    pub iou_thresh: f64,
    pub continuous: Vec<Option<f64>>,
    pub elevenpoint: Vec<Option<f64>>,
}

impl OracleAps {
    pub fn for_mode(&self, mode: ApMode) -> &[Option<f64>] {
        match mode {
            ApMode::Continuous => &self.continuous,
            ApMode::ElevenPoint => &self.elevenpoint,
        }
    }

    /// Mean of the defined APs as a fraction.
    pub fn map(&self, mode: ApMode) -> Option<f64> {
        let d: Vec<f64> = self.for_mode(mode).iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub detections: Vec<Detection>,
    pub oracle: OracleAps,
}

/// Scores are drawn on a grid of this step so that ties actually happen.
const SCORE_STEP: f64 = 1e-3;

fn draw_score(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let s = rng.random_range(lo..=hi);
    ((s / SCORE_STEP).round() * SCORE_STEP).clamp(SCORE_STEP, 1.0)
}

/// Simulated detector output for `ds` together with its oracle APs at IoU
/// 0.5. Each kept ground truth yields one jittered, clipped box in its own
/// category; false positives are uniform boxes in uniform categories.
pub fn degrade_to_detections(ds: &Dataset, spec: &DegradeSpec) -> Result<Degraded> {
    spec.validate()?;
    let k = ds.categories.len();
    let noise = Normal::new(0.0, spec.loc_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut detections = Vec::new();
    for (i, a) in ds.annotations().iter().enumerate() {
        let mut rng = rng::indexed_stream(spec.seed, "degrade", i as u64);
        let (w, h) = (f64::from(a.width), f64::from(a.height));
        for o in &a.objects {
            if rng.random::<f64>() < spec.miss_rate {
                continue;
            }
            let mut b = o.bbox;
            if spec.loc_noise > 0.0 {
                b.xmin += noise.sample(&mut rng);
                b.ymin += noise.sample(&mut rng);
                b.xmax += noise.sample(&mut rng);
                b.ymax += noise.sample(&mut rng);
            }
            let b = BBox {
                xmin: b.xmin.clamp(0.0, w - 1.0),
                ymin: b.ymin.clamp(0.0, h - 1.0),
                xmax: b.xmax.clamp(0.0, w),
                ymax: b.ymax.clamp(0.0, h),
            };
            let b = BBox {
                xmax: b.xmax.max(b.xmin + 1.0),
                ymax: b.ymax.max(b.ymin + 1.0),
                ..b
            };
            detections.push(Detection {
                image_id: a.image_id.clone(),
                category: o.category,
                score: draw_score(&mut rng, spec.tp_scores),
                bbox: b,
            });
        }
        let whole = spec.fp_rate.floor() as usize;
        let n_fp = whole + usize::from(rng.random::<f64>() < spec.fp_rate.fract());
        for _ in 0..n_fp {
            let bw = rng.random_range(1.0..=w / 2.0);
            let bh = rng.random_range(1.0..=h / 2.0);
            let x = rng.random_range(0.0..=w - bw);
            let y = rng.random_range(0.0..=h - bh);
            detections.push(Detection {
                image_id: a.image_id.clone(),
                category: rng.random_range(0..k),
                score: draw_score(&mut rng, spec.fp_scores),
                bbox: BBox {
                    xmin: x,
                    ymin: y,
                    xmax: x + bw,
                    ymax: y + bh,
                },
            });
        }
    }
    let oracle = oracle_aps(ds, &detections, 0.5);
    Ok(Degraded { detections, oracle })
}

/// Brute-force APs, written from the VOC definitions without any code from
/// the `eval` module. Quadratic in the number of detections per category.
pub fn oracle_aps(ds: &Dataset, dets: &[Detection], iou_thresh: f64) -> OracleAps {
    fn overlap(a: &BBox, b: &BBox) -> f64 {
        let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
        let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let ua = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
        (inter / ua).clamp(0.0, 1.0)
    }

    let k = ds.categories.len();
    let mut continuous = Vec::with_capacity(k);
    let mut elevenpoint = Vec::with_capacity(k);
    for c in 0..k {
        let n_gt: usize = ds
            .annotations()
            .iter()
            .map(|a| a.objects.iter().filter(|o| o.category == c).count())
            .sum();
        if n_gt == 0 {
            continuous.push(None);
            elevenpoint.push(None);
            continue;
        }
        let mine: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == c).collect();
        // Position of each detection in the ranking, by counting the ones
        // ahead of it.
        let mut ranked = vec![0usize; mine.len()];
        for (a, &i) in mine.iter().enumerate() {
            let ahead = mine
                .iter()
                .filter(|&&j| dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i))
                .count();
            ranked[ahead] = a;
        }
        let mut taken: Vec<(String, usize)> = Vec::new();
        let mut hit = vec![false; mine.len()];
        for r in 0..mine.len() {
            let d = &dets[mine[ranked[r]]];
            let ann = ds.annotations().iter().find(|a| a.image_id == d.image_id);
            let mut best: Option<(usize, f64)> = None;
            if let Some(ann) = ann {
                for (g, o) in ann.objects.iter().enumerate() {
                    if o.category != c || taken.contains(&(d.image_id.clone(), g)) {
                        continue;
                    }
                    let v = overlap(&d.bbox, &o.bbox);
                    let better = match best {
                        None => true,
                        Some((_, bv)) => v > bv,
                    };
                    if v >= iou_thresh && better {
                        best = Some((g, v));
                    }
                }
            }
            if let Some((g, _)) = best {
                taken.push((d.image_id.clone(), g));
                hit[r] = true;
            }
        }
        let tp_upto = |r: usize| hit[..=r].iter().filter(|h| **h).count();
        let prec = |r: usize| tp_upto(r) as f64 / (r + 1) as f64;
        let best_prec_from = |r: usize| (r..hit.len()).map(prec).fold(0.0, f64::max);

        let area: f64 = (0..hit.len()).filter(|&r| hit[r]).map(best_prec_from).sum();
        continuous.push(Some(area / n_gt as f64));

        let mut eleven = 0.0;
        for t in 0..=10 {
            let target = t as f64 / 10.0;
            let best = (0..hit.len())
                .filter(|&r| tp_upto(r) as f64 / n_gt as f64 >= target)
                .map(prec)
                .fold(0.0, f64::max);
            eleven += best;
        }
        elevenpoint.push(Some(eleven / 11.0));
    }
    OracleAps {
        iou_thresh,
        continuous,
        elevenpoint,
    }
}

/// What [`time_decode`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub resolutions: Vec<u32>,
    pub trials: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub anchors: AnchorSet,
    pub decode: DecodeConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            resolutions: vec![608],
            trials: 100,
            seed: 0,
            num_classes: 6,
            anchors: AnchorSet::default(),
            decode: DecodeConfig::default(),
        }
    }
}

/// Deterministic facts about one benchmarked resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCounts {
    pub resolution: u32,
    pub grid_cells: u64,
    pub anchor_slots: u64,
    pub candidates: u64,
    pub detections: usize,
    /// FNV-1a of the serialized tensors, to show the inputs are reproducible.
    pub tensor_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub counts: BenchCounts,
    pub latency: LatencyStats,
}

/// Scope note attached to every timing.
pub const LATENCY_SCOPE: &str =
    "decode + NMS only; backbone inference is excluded, so these times are not end-to-end model latency";

/// Random head tensors for one image at `res`: offsets and sizes near zero,
/// objectness mostly low, category logits spread out.
pub fn random_heads(res: u32, num_classes: usize, seed: u64) -> Result<Vec<HeadTensor>> {
    if res == 0 || !res.is_multiple_of(32) {
        return Err(Error::invalid(format!("resolution {res} must be a positive multiple of 32")));
    }
    let mut rng = rng::indexed_stream(seed, "bench-tensors", u64::from(res));
    let coord = Normal::new(0.0f32, 1.0).unwrap();
    let obj = Normal::new(-4.0f32, 2.0).unwrap();
    let cls = Normal::new(-2.0f32, 2.0).unwrap();
    let channels = 5 + num_classes;
    Scale::ALL
        .iter()
        .map(|s| {
            let g = (res / s.stride()) as usize;
            let data = (0..g * g * ANCHORS_PER_SCALE * channels)
                .map(|i| match i % channels {
                    0..=3 => coord.sample(&mut rng),
                    4 => obj.sample(&mut rng),
                    _ => cls.sample(&mut rng),
                })
                .collect();
            HeadTensor::new(g, s.stride(), num_classes, data)
        })
        .collect()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `decode_full` on random tensors at each resolution, on the calling
/// thread. Counts are reproducible from the seed; times are not.
pub fn time_decode(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let mut rows = Vec::with_capacity(cfg.resolutions.len());
    for &res in &cfg.resolutions {
        let heads = random_heads(res, cfg.num_classes, cfg.seed)?;
        let bytes: Vec<u8> = heads.iter().flat_map(HeadTensor::to_bytes).collect();
        let candidates = heads
            .iter()
            .map(|t| {
                t.data()
                    .chunks_exact(5 + cfg.num_classes)
                    .map(|s| {
                        let obj = 1.0 / (1.0 + (-f64::from(s[4])).exp());
                        s[5..]
                            .iter()
                            .filter(|&&c| obj / (1.0 + (-f64::from(c)).exp()) > cfg.decode.score_thresh)
                            .count() as u64
                    })
                    .sum::<u64>()
            })
            .sum();

        let mut times = Vec::with_capacity(cfg.trials);
        let mut detections = 0;
        for _ in 0..cfg.trials {
            let start = Instant::now();
            let out = decode_full("bench", &heads, &cfg.anchors, res, (res, res), &cfg.decode)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            detections = std::hint::black_box(out).len();
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        let cells = grid_cells(res);
        rows.push(BenchRow {
            counts: BenchCounts {
                resolution: res,
                grid_cells: cells,
                anchor_slots: cells * ANCHORS_PER_SCALE as u64,
                candidates,
                detections,
                tensor_checksum: rng::fnv1a(&bytes),
            },
            latency: LatencyStats {
                trials: cfg.trials,
                mean_ms: mean,
                median_ms: percentile(&times, 0.5),
                p95_ms: percentile(&times, 0.95),
                scope: LATENCY_SCOPE.to_string(),
            },
        });
    }
    Ok(rows)
}

/// `resolution,grid_cells,anchor_slots,candidates,detections,tensor_checksum`.
pub fn bench_counts_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("resolution,grid_cells,anchor_slots,candidates,detections,tensor_checksum\n");
    for r in rows {
        let c = &r.counts;
        out.push_str(&format!(
            "{},{},{},{},{},{:016x}\n",
            c.resolution, c.grid_cells, c.anchor_slots, c.candidates, c.detections, c.tensor_checksum
        ));
    }
    out
}

/// Timing table with the scope note as its last line.
pub fn bench_timings_text(rows: &[BenchRow]) -> String {
    let mut out = String::from("resolution  trials   mean_ms  median_ms    p95_ms\n");
    for r in rows {
        let l = &r.latency;
        out.push_str(&format!(
            "{:>10}  {:>6}  {:>8.3}  {:>9.3}  {:>8.3}\n",
            r.counts.resolution, l.trials, l.mean_ms, l.median_ms, l.p95_ms
        ));
    }
    out.push_str("note: ");
    out.push_str(LATENCY_SCOPE);
    out.push('\n');
    out
}

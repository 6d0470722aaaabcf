//! VOC-style matching, average precision and report building.
//!
//! APs are fractions in `[0, 1]` at the function level and percentages in
//! [`EvalReport`], which is what the tables print. Ground-truth weights and
//! the `difficult` flag play no part here: every ground truth counts.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::voc::{Dataset, GroundTruthObject};

/// How the precision/recall curve is turned into a single number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Area under the monotone precision envelope (VOC 2010 onward).
    #[default]
    Continuous,
    /// Mean of the best precision at recall 0, 0.1, ..., 1 (VOC 2007).
    ElevenPoint,
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMode::Continuous => "continuous",
            ApMode::ElevenPoint => "elevenpoint",
        })
    }
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ApMode::Continuous),
            "elevenpoint" => Ok(ApMode::ElevenPoint),
            _ => Err(Error::invalid(format!(
                "unknown AP mode `{s}` (expected continuous or elevenpoint)"
            ))),
        }
    }
}

/// Outcome of matching one image's detections of one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the ground truth each detection claimed.
    pub matched: Vec<Option<usize>>,
    /// Ground truths no detection claimed.
    pub unmatched_gt: usize,
}

/// Greedy matching for one image and category. Detections are visited by
/// descending score, ties in input order. Each takes the unclaimed ground
/// truth it overlaps most, provided that IoU reaches `iou_thresh`; ties go to
/// the lower ground-truth index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    match_boxes(&scores, &boxes, &gt_boxes, iou_thresh)
}

fn match_boxes(scores: &[f64], boxes: &[BBox], gts: &[BBox], iou_thresh: f64) -> MatchResult {
    let mut claimed = vec![false; gts.len()];
    let mut tp = vec![false; boxes.len()];
    let mut matched = vec![None; boxes.len()];
    for i in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let o = iou_unchecked(&boxes[i], gt);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            tp[i] = true;
            matched[i] = Some(g);
        }
    }
    MatchResult {
        tp,
        matched,
        unmatched_gt: claimed.iter().filter(|c| !**c).count(),
    }
}

/// Indices by descending score; equal scores keep input order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// AP together with the ranked precision/recall points it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub ap: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Average precision of ranked detections with `n_gt` ground truths.
/// `None` when `n_gt` is zero, since recall is then undefined.
pub fn average_precision(tp: &[bool], scores: &[f64], n_gt: usize, mode: ApMode) -> Option<ApCurve> {
    assert_eq!(tp.len(), scores.len(), "one score per flag");
    if n_gt == 0 {
        return None;
    }
    let order = score_order(scores);
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut hit_counts = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        hits += usize::from(tp[i]);
        hit_counts.push(hits);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (rank + 1) as f64);
    }

    // envelope[r] = best precision at rank r or later.
    let mut envelope = precision.clone();
    for r in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[r] = envelope[r].max(envelope[r + 1]);
    }

    let ap = match mode {
        ApMode::Continuous => {
            // Recall rises by 1/n_gt at every true positive.
            let area: f64 = order
                .iter()
                .zip(&envelope)
                .filter(|(&i, _)| tp[i])
                .map(|(_, &p)| p)
                .sum();
            area / n_gt as f64
        }
        ApMode::ElevenPoint => {
            let mut total = 0.0;
            for t in 0..=10usize {
                // First rank whose recall reaches t/10, compared exactly.
                let reached = hit_counts.iter().position(|&h| h * 10 >= t * n_gt);
                total += reached.map_or(0.0, |r| envelope[r]);
            }
            total / 11.0
        }
    };
    Some(ApCurve {
        ap,
        recall,
        precision,
    })
}

/// Matching threshold and AP mode for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            mode: ApMode::Continuous,
        }
    }
}

/// Per-image timing summary in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// What the timing covers.
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub name: String,
    /// Percent; `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_dets: usize,
    pub num_tp: usize,
    #[serde(default)]
    pub recall: Vec<f64>,
    #[serde(default)]
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ApMode,
    pub iou_thresh: f64,
    pub categories: Vec<CategoryResult>,
    /// Mean of the defined category APs, in percent.
    pub map: Option<f64>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size_bytes: Option<u64>,
}

fn mean_defined(aps: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = aps.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl EvalReport {
    /// Report carrying only per-category APs (percent), e.g. a published
    /// table row. Counts are zero and curves empty.
    pub fn from_category_aps<S: AsRef<str>>(names: &[S], aps: &[Option<f64>]) -> Result<Self> {
        if names.len() != aps.len() {
            return Err(Error::invalid(format!(
                "{} category names but {} APs",
                names.len(),
                aps.len()
            )));
        }
        if let Some(bad) = aps.iter().flatten().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(Error::invalid(format!("AP {bad} outside [0, 100]")));
        }
        let categories = names
            .iter()
            .zip(aps)
            .map(|(n, &ap)| CategoryResult {
                name: n.as_ref().to_string(),
                ap,
                num_gt: 0,
                num_dets: 0,
                num_tp: 0,
                recall: Vec::new(),
                precision: Vec::new(),
            })
            .collect();
        Ok(EvalReport {
            mode: ApMode::Continuous,
            iou_thresh: 0.5,
            categories,
            map: mean_defined(aps.iter().copied()),
            num_images: 0,
            num_detections: 0,
            num_ground_truths: 0,
            latency: None,
            model_size_bytes: None,
        })
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    /// Names of categories left out of the mAP.
    pub fn excluded(&self) -> Vec<&str> {
        self.categories
            .iter()
            .filter(|c| c.ap.is_none())
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `category,ap,num_gt,num_dets,num_tp` rows followed by a `mAP` row.
    /// Undefined APs are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("category,ap,num_gt,num_dets,num_tp\n");
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.name,
                fmt(c.ap),
                c.num_gt,
                c.num_dets,
                c.num_tp
            );
        }
        let tp: usize = self.categories.iter().map(|c| c.num_tp).sum();
        let _ = writeln!(
            out,
            "mAP,{},{},{},{tp}",
            fmt(self.map),
            self.num_ground_truths,
            self.num_detections
        );
        out
    }

    /// Human-readable summary.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "AP mode {} at IoU {}, {} images, {} detections, {} ground truths\n",
            self.mode, self.iou_thresh, self.num_images, self.num_detections, self.num_ground_truths
        );
        for c in &self.categories {
            let ap = c.ap.map_or_else(|| "excluded (no ground truth)".into(), |a| format!("{a:6.2}"));
            let _ = writeln!(out, "  {:<10} {ap}", c.name);
        }
        let map = self.map.map_or_else(|| "undefined".into(), |m| format!("{m:.2}"));
        let _ = writeln!(out, "  {:<10} {map}", "mAP");
        if let Some(l) = &self.latency {
            let _ = writeln!(
                out,
                "latency over {} trials: mean {:.3} ms, median {:.3} ms, p95 {:.3} ms ({})",
                l.trials, l.mean_ms, l.median_ms, l.p95_ms, l.scope
            );
        }
        if let Some(bytes) = self.model_size_bytes {
            let _ = writeln!(out, "model size: {bytes} bytes");
        }
        out
    }
}

/// Scores `dets` against the ground truth of `gt`.
///
/// Matching runs per (image, category) and may run in parallel; the per
/// category ranking afterwards uses input position to break score ties, so
/// the result does not depend on thread count.
pub fn evaluate(gt: &Dataset, dets: &[Detection], config: &EvalConfig) -> Result<EvalReport> {
    if !(config.iou_thresh > 0.0 && config.iou_thresh <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {} outside (0, 1]",
            config.iou_thresh
        )));
    }
    let k = gt.categories.len();
    let images = gt.annotations();
    let index: HashMap<&str, usize> =
        images.iter().enumerate().map(|(i, a)| (a.image_id.as_str(), i)).collect();

    let unknown: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .filter(|id| !index.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        let shown: Vec<&str> = unknown.iter().take(10).copied().collect();
        let more = unknown.len().saturating_sub(shown.len());
        let tail = if more > 0 { format!(" (and {more} more)") } else { String::new() };
        return Err(Error::invalid(format!(
            "detections reference unknown image ids: {}{tail}",
            shown.join(", ")
        )));
    }
    if let Some(d) = dets.iter().find(|d| d.category >= k) {
        return Err(Error::invalid(format!(
            "detection on `{}` has category {} but only {k} categories exist",
            d.image_id, d.category
        )));
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); images.len() * k];
    for (i, d) in dets.iter().enumerate() {
        groups[index[d.image_id.as_str()] * k + d.category].push(i);
    }
    let matched: Vec<(Vec<usize>, Vec<bool>)> = groups
        .into_par_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(g, idx)| {
            let (image, cat) = (g / k, g % k);
            let gts: Vec<BBox> = images[image]
                .objects
                .iter()
                .filter(|o| o.category == cat)
                .map(|o| o.bbox)
                .collect();
            let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
            let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
            let m = match_boxes(&scores, &boxes, &gts, config.iou_thresh);
            (idx, m.tp)
        })
        .collect();
    let mut tp = vec![false; dets.len()];
    for (idx, flags) in matched {
        for (i, f) in idx.into_iter().zip(flags) {
            tp[i] = f;
        }
    }

    let mut n_gt = vec![0usize; k];
    for o in images.iter().flat_map(|a| &a.objects) {
        n_gt[o.category] += 1;
    }
    let categories: Vec<CategoryResult> = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == c).collect();
            let flags: Vec<bool> = idx.iter().map(|&i| tp[i]).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
            let curve = average_precision(&flags, &scores, n_gt[c], config.mode);
            let (ap, recall, precision) = match curve {
                Some(cv) => (Some(100.0 * cv.ap), cv.recall, cv.precision),
                None => (None, Vec::new(), Vec::new()),
            };
            CategoryResult {
                name: gt.categories.names()[c].clone(),
                ap,
                num_gt: n_gt[c],
                num_dets: idx.len(),
                num_tp: flags.iter().filter(|f| **f).count(),
                recall,
                precision,
            }
        })
        .collect();

    Ok(EvalReport {
        mode: config.mode,
        iou_thresh: config.iou_thresh,
        map: mean_defined(categories.iter().map(|c| c.ap)),
        categories,
        num_images: images.len(),
        num_detections: dets.len(),
        num_ground_truths: n_gt.iter().sum(),
        latency: None,
        model_size_bytes: None,
    })
}

/// Averages fold reports: each category's AP is the mean over the folds in
/// which it is defined, the mAP is recomputed from those means, and counts are
/// summed. Curves are dropped since folds do not share a ranking.
pub fn cross_val_aggregate(folds: &[EvalReport]) -> Result<EvalReport> {
    let first = folds
        .first()
        .ok_or_else(|| Error::invalid("no fold reports to aggregate"))?;
    let names = first.category_names();
    for (i, f) in folds.iter().enumerate() {
        if f.category_names() != names {
            return Err(Error::invalid(format!(
                "fold report {i} has categories {:?}, expected {names:?}",
                f.category_names()
            )));
        }
        if f.mode != first.mode {
            return Err(Error::invalid(format!(
                "fold report {i} uses AP mode {}, expected {}",
                f.mode, first.mode
            )));
        }
    }
    let categories: Vec<CategoryResult> = (0..names.len())
        .map(|c| {
            let per_fold = folds.iter().map(|f| &f.categories[c]);
            CategoryResult {
                name: names[c].to_string(),
                ap: mean_defined(per_fold.clone().map(|r| r.ap)),
                num_gt: per_fold.clone().map(|r| r.num_gt).sum(),
                num_dets: per_fold.clone().map(|r| r.num_dets).sum(),
                num_tp: per_fold.map(|r| r.num_tp).sum(),
                recall: Vec::new(),
                precision: Vec::new(),
            }
        })
        .collect();
    let size = first.model_size_bytes;
    Ok(EvalReport {
        mode: first.mode,
        iou_thresh: first.iou_thresh,
        map: mean_defined(categories.iter().map(|c| c.ap)),
        categories,
        num_images: folds.iter().map(|f| f.num_images).sum(),
        num_detections: folds.iter().map(|f| f.num_detections).sum(),
        num_ground_truths: folds.iter().map(|f| f.num_ground_truths).sum(),
        latency: None,
        model_size_bytes: folds.iter().all(|f| f.model_size_bytes == size).then_some(size).flatten(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub map: f64,
    /// `map - baseline map`, rounded to two decimals.
    pub delta: f64,
    pub category_aps: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub categories: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Compares named runs with the run called `baseline`. Rows keep the given
/// order and each run's own mAP is used as reported.
pub fn ablation_report(runs: &[(String, EvalReport)], baseline: &str) -> Result<AblationTable> {
    let base = runs
        .iter()
        .find(|(n, _)| n == baseline)
        .ok_or_else(|| Error::invalid(format!("baseline run `{baseline}` not among the runs")))?;
    let names: Vec<String> = base.1.category_names().iter().map(|s| s.to_string()).collect();
    let map_of = |name: &str, r: &EvalReport| {
        r.map
            .ok_or_else(|| Error::invalid(format!("run `{name}` has no defined mAP")))
    };
    let base_map = map_of(baseline, &base.1)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (name, r) in runs {
        if r.category_names() != names {
            return Err(Error::invalid(format!(
                "run `{name}` has categories {:?}, baseline has {names:?}",
                r.category_names()
            )));
        }
        let map = map_of(name, r)?;
        rows.push(AblationRow {
            run: name.clone(),
            map,
            delta: round2(map - base_map),
            category_aps: r.categories.iter().map(|c| c.ap).collect(),
        });
    }
    Ok(AblationTable {
        categories: names,
        rows,
    })
}

impl AblationTable {
    fn cells(&self) -> Vec<Vec<String>> {
        let mut header = vec!["run".to_string(), "mAP".into(), "Delta".into()];
        header.extend(self.categories.iter().cloned());
        let mut out = vec![header];
        for r in &self.rows {
            let mut line = vec![r.run.clone(), format!("{:.2}", r.map), format!("{:.2}", r.delta)];
            line.extend(
                r.category_aps
                    .iter()
                    .map(|a| a.map(|a| format!("{a:.2}")).unwrap_or_else(|| "-".into())),
            );
            out.push(line);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in self.cells() {
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Space-aligned columns; the run names are left-aligned, numbers right.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let ncol = cells[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &cells {
            let mut row = format!("{:<w$}", line[0], w = widths[0]);
            for (c, cell) in line.iter().enumerate().skip(1) {
                let _ = write!(row, "  {:>w$}", cell, w = widths[c]);
            }
            out.push_str(row.trim_end());
            out.push('\n');
        }
        out
    }
}

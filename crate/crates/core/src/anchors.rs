//! Anchor priors from k-means over ground-truth box shapes.
//!
//! Distance between a shape and a centroid is `1 - iou_wh`, where `iou_wh`
//! places both boxes at a common corner. Centroids are updated to the
//! per-cluster median width and height. A median that would raise its
//! cluster's total distance is rejected for that iteration, which keeps the
//! objective non-increasing.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::voc::Dataset;

/// Width and height of a box, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub w: f64,
    pub h: f64,
}

impl BoxShape {
    pub const fn new(w: f64, h: f64) -> Self {
        BoxShape { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()
    }
}

/// Detection scale served by a group of three anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Small,
    Medium,
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Medium, Scale::Large];

    /// Output stride of the head that detects this scale.
    pub fn stride(self) -> u32 {
        match self {
            Scale::Small => 8,
            Scale::Medium => 16,
            Scale::Large => 32,
        }
    }

    pub fn from_stride(stride: u32) -> Option<Scale> {
        Scale::ALL.into_iter().find(|s| s.stride() == stride)
    }
}

/// Nine priors sorted by area: 0..3 small, 3..6 medium, 6..9 large.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: [BoxShape; 9],
}

/// Priors reported for the 640x640 Wagner-grade dataset.
pub const DEFAULT_PRIORS: [BoxShape; 9] = [
    BoxShape::new(12.0, 10.0),
    BoxShape::new(16.0, 28.0),
    BoxShape::new(30.0, 26.0),
    BoxShape::new(32.0, 43.0),
    BoxShape::new(51.0, 68.0),
    BoxShape::new(79.0, 126.0),
    BoxShape::new(141.0, 86.0),
    BoxShape::new(233.0, 192.0),
    BoxShape::new(284.0, 346.0),
];

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            anchors: DEFAULT_PRIORS,
        }
    }
}

impl AnchorSet {
    /// Sorts `shapes` by area and groups them 3/3/3.
    pub fn new(shapes: &[BoxShape]) -> Result<Self> {
        let mut anchors: [BoxShape; 9] = shapes.try_into().map_err(|_| {
            Error::invalid(format!("an anchor set needs exactly 9 shapes, got {}", shapes.len()))
        })?;
        if let Some(bad) = anchors.iter().find(|a| !a.is_valid()) {
            return Err(Error::invalid(format!("anchor {bad:?} must have positive dims")));
        }
        anchors.sort_by(|a, b| a.area().total_cmp(&b.area()));
        Ok(AnchorSet { anchors })
    }

    pub fn as_slice(&self) -> &[BoxShape] {
        &self.anchors
    }

    /// The three priors for one detection scale.
    pub fn group(&self, scale: Scale) -> [BoxShape; 3] {
        let start = match scale {
            Scale::Small => 0,
            Scale::Medium => 3,
            Scale::Large => 6,
        };
        [self.anchors[start], self.anchors[start + 1], self.anchors[start + 2]]
    }

    /// `w,h` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w,h\n");
        for a in &self.anchors {
            let _ = writeln!(out, "{},{}", a.w, a.h);
        }
        out
    }

    /// Reads the output of [`AnchorSet::to_csv`]; other `key,value` rows
    /// (such as `avg_iou`) are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut shapes = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((w, h)) = line.split_once(',') else {
                return Err(Error::invalid(format!("bad anchor line `{line}`")));
            };
            if let (Ok(w), Ok(h)) = (w.trim().parse::<f64>(), h.trim().parse::<f64>()) {
                shapes.push(BoxShape::new(w, h));
            }
        }
        AnchorSet::new(&shapes)
    }
}

/// IoU of two shapes aligned at a common corner.
pub fn iou_wh(a: BoxShape, b: BoxShape) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid(format!("shapes {a:?}, {b:?} must have positive dims")));
    }
    Ok(iou_wh_unchecked(a, b))
}

#[inline]
fn iou_wh_unchecked(a: BoxShape, b: BoxShape) -> f64 {
    let overlap = a.w.min(b.w) * a.h.min(b.h);
    overlap / (a.area() + b.area() - overlap)
}

/// Mean over `shapes` of the best IoU against any anchor.
pub fn avg_iou(shapes: &[BoxShape], anchors: &[BoxShape]) -> Result<f64> {
    if shapes.is_empty() || anchors.is_empty() {
        return Err(Error::invalid("avg_iou needs at least one shape and one anchor"));
    }
    let mut total = 0.0;
    for &s in shapes {
        let mut best = 0.0f64;
        for &a in anchors {
            best = best.max(iou_wh(s, a)?);
        }
        total += best;
    }
    Ok(total / shapes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 9,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Result of a clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Centroids sorted by area.
    pub centroids: Vec<BoxShape>,
    /// Mean distance to the assigned centroid, recorded after each
    /// assignment step (entry 0 is for the initial centroids).
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd iterations under `1 - iou_wh` with k-means++ seeding.
pub fn kmeans(shapes: &[BoxShape], config: &KMeansConfig) -> Result<Clustering> {
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes to cluster"));
    }
    if let Some(bad) = shapes.iter().find(|s| !s.is_valid()) {
        return Err(Error::invalid(format!("shape {bad:?} must have positive dims")));
    }
    if config.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }

    // canonical order makes the result independent of input order
    let mut points = shapes.to_vec();
    points.sort_by(|a, b| a.w.total_cmp(&b.w).then(a.h.total_cmp(&b.h)));
    let distinct = 1 + points.windows(2).filter(|w| w[0] != w[1]).count();
    if config.k > distinct {
        return Err(Error::invalid(format!(
            "k = {} exceeds the {distinct} distinct shapes",
            config.k
        )));
    }

    let mut rng = rng::stream(config.seed, "kmeans");
    let mut centroids = seed_plus_plus(&points, config.k, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let objective = assign(&points, &centroids, &mut assignment);
        history.push(objective);
        if iterations >= config.max_iter {
            break;
        }
        iterations += 1;

        let mut movement = 0.0f64;
        let mut members: Vec<Vec<BoxShape>> = vec![Vec::new(); centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            members[a].push(*p);
        }
        for (j, cluster) in members.iter().enumerate() {
            let old = centroids[j];
            let new = if cluster.is_empty() {
                farthest_point(&points, &centroids, &assignment)
            } else {
                let candidate = BoxShape::new(
                    median(cluster.iter().map(|s| s.w)),
                    median(cluster.iter().map(|s| s.h)),
                );
                if cluster_cost(cluster, candidate) <= cluster_cost(cluster, old) {
                    candidate
                } else {
                    old
                }
            };
            movement = movement.max((new.w - old.w).abs()).max((new.h - old.h).abs());
            centroids[j] = new;
        }
        if movement < config.tol {
            history.push(assign(&points, &centroids, &mut assignment));
            break;
        }
    }

    centroids.sort_by(|a, b| a.area().total_cmp(&b.area()));
    Ok(Clustering {
        centroids,
        objective_history: history,
        iterations,
    })
}

/// Nine-prior clustering grouped into an [`AnchorSet`].
pub fn kmeans_anchors(shapes: &[BoxShape], config: &KMeansConfig) -> Result<AnchorSet> {
    if config.k != 9 {
        return Err(Error::invalid(format!("an anchor set has 9 priors, k = {}", config.k)));
    }
    AnchorSet::new(&kmeans(shapes, config)?.centroids)
}

/// Box shapes of the dataset, rescaled to a square `input_res` input.
/// `ids` restricts the shapes to those images (e.g. a training split).
pub fn shapes_from_dataset(
    ds: &Dataset,
    ids: Option<&[String]>,
    input_res: u32,
) -> Result<Vec<BoxShape>> {
    let res = f64::from(input_res);
    let selected: Vec<_> = match ids {
        Some(ids) => ids
            .iter()
            .map(|id| {
                ds.get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown image id `{id}`")))
            })
            .collect::<Result<_>>()?,
        None => ds.annotations().iter().collect(),
    };
    Ok(selected
        .into_iter()
        .flat_map(|ann| {
            let sx = res / f64::from(ann.width);
            let sy = res / f64::from(ann.height);
            ann.objects
                .iter()
                .map(move |o| BoxShape::new(o.bbox.width() * sx, o.bbox.height() * sy))
        })
        .collect())
}

fn seed_plus_plus(points: &[BoxShape], k: usize, rng: &mut impl Rng) -> Vec<BoxShape> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|&p| 1.0 - iou_wh_unchecked(p, centroids[0]))
        .collect();
    while centroids.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            // all remaining points coincide with a centroid
            (0..points.len())
                .find(|&i| !centroids.contains(&points[i]))
                .unwrap_or(0)
        };
        let c = points[next];
        centroids.push(c);
        for (d, &p) in nearest.iter_mut().zip(points) {
            *d = d.min(1.0 - iou_wh_unchecked(p, c));
        }
    }
    centroids
}

// Stable argmin: the lowest centroid index wins ties.
fn assign(points: &[BoxShape], centroids: &[BoxShape], assignment: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, slot) in points.iter().zip(assignment.iter_mut()) {
        let mut best = (0, f64::INFINITY);
        for (j, &c) in centroids.iter().enumerate() {
            let d = 1.0 - iou_wh_unchecked(*p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        *slot = best.0;
        total += best.1;
    }
    total / points.len() as f64
}

fn farthest_point(points: &[BoxShape], centroids: &[BoxShape], assignment: &[usize]) -> BoxShape {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (p, &a)) in points.iter().zip(assignment).enumerate() {
        let d = 1.0 - iou_wh_unchecked(*p, centroids[a]);
        if d > best.1 {
            best = (i, d);
        }
    }
    points[best.0]
}

fn cluster_cost(cluster: &[BoxShape], c: BoxShape) -> f64 {
    cluster.iter().map(|&p| 1.0 - iou_wh_unchecked(p, c)).sum()
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

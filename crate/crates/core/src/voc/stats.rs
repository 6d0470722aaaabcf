use std::fmt::Write as _;

use serde::Serialize;

use super::Dataset;

/// Per-category label statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub category: String,
    /// Mean number of boxes of this category per image, over all images.
    pub mean_boxes: f64,
    /// Mean number of distinct categories in the images containing this one.
    pub mean_categories: f64,
    /// Mean, over images containing this category, of the fraction of the
    /// image covered by its boxes (summed areas, capped at 1).
    pub area_fraction: f64,
    pub images_with: usize,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub categories: Vec<CategoryStats>,
    pub image_count: usize,
    pub ground_truth_count: usize,
    pub degenerate_count: usize,
}

pub fn dataset_stats(ds: &Dataset) -> StatsReport {
    let k = ds.categories.len();
    let n = ds.len();
    let mut boxes = vec![0usize; k];
    let mut images_with = vec![0usize; k];
    let mut categories_sum = vec![0usize; k];
    let mut area_sum = vec![0f64; k];

    for ann in ds.annotations() {
        let image_area = f64::from(ann.width) * f64::from(ann.height);
        let mut per_cat_area = vec![0f64; k];
        let mut present = vec![false; k];
        for o in &ann.objects {
            boxes[o.category] += 1;
            present[o.category] = true;
            per_cat_area[o.category] += o.bbox.area();
        }
        let distinct = present.iter().filter(|&&p| p).count();
        for c in (0..k).filter(|&c| present[c]) {
            images_with[c] += 1;
            categories_sum[c] += distinct;
            area_sum[c] += (per_cat_area[c] / image_area).min(1.0);
        }
    }

    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    let categories = (0..k)
        .map(|c| CategoryStats {
            category: ds.categories.names()[c].clone(),
            mean_boxes: ratio(boxes[c] as f64, n),
            mean_categories: ratio(categories_sum[c] as f64, images_with[c]),
            area_fraction: ratio(area_sum[c], images_with[c]),
            images_with: images_with[c],
            boxes: boxes[c],
        })
        .collect();

    StatsReport {
        categories,
        image_count: n,
        ground_truth_count: boxes.iter().sum(),
        degenerate_count: ds.annotations().iter().filter(|a| a.is_degenerate()).count(),
    }
}

impl StatsReport {
    /// `category,mean_boxes,mean_categories,area_fraction`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,mean_boxes,mean_categories,area_fraction\n");
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                c.category, c.mean_boxes, c.mean_categories, c.area_fraction
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>10} {:>11} {:>8}",
            "category", "boxes", "categories", "area_frac", "images"
        );
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>10.4} {:>11.4} {:>8}",
                c.category, c.mean_boxes, c.mean_categories, c.area_fraction, c.images_with
            );
        }
        let _ = writeln!(
            out,
            "images: {}  ground truths: {}  degenerate: {}",
            self.image_count, self.ground_truth_count, self.degenerate_count
        );
        out
    }
}

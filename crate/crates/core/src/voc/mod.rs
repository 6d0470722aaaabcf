//! Ground-truth model: VOC XML annotations, datasets, statistics and
//! cross-validation splits.

mod manifest;
mod split;
mod stats;
mod xml;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{read_ppm, BBox, Image};

pub use manifest::{load_dataset, write_manifest, ManifestEntry};
pub use split::{kfold_split, kfold_split_ids, FoldSplit, NUM_FOLDS};
pub use stats::{dataset_stats, CategoryStats, StatsReport};
pub use xml::{parse_voc_xml, write_voc_xml};

/// Ordered category names; a category is referred to by its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    names: Vec<String>,
}

impl Default for CategoryTable {
    /// The six Wagner grades, `grade0` through `grade5`.
    fn default() -> Self {
        CategoryTable {
            names: (0..6).map(|g| format!("grade{g}")).collect(),
        }
    }
}

impl CategoryTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("category table is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("empty or duplicate category name `{n}`")));
            }
        }
        Ok(CategoryTable { names })
    }

    /// One name per non-empty line.
    pub fn from_lines(text: &str) -> Result<Self> {
        CategoryTable::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One labeled box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub category: usize,
    pub bbox: BBox,
    /// Label weight in `(0, 1]`; below 1 only for mixup-merged labels.
    pub weight: f64,
    /// VOC `difficult` flag. Carried through I/O, ignored by evaluation.
    #[serde(default)]
    pub difficult: bool,
    /// VOC `truncated` flag. Carried through I/O only.
    #[serde(default)]
    pub truncated: bool,
}

impl GroundTruthObject {
    pub fn new(category: usize, bbox: BBox) -> Self {
        GroundTruthObject {
            category,
            bbox,
            weight: 1.0,
            difficult: false,
            truncated: false,
        }
    }
}

/// All labels for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<GroundTruthObject>,
}

impl ImageAnnotation {
    /// An annotation without objects; kept but flagged.
    pub fn is_degenerate(&self) -> bool {
        self.objects.is_empty()
    }

    /// Checks dimensions, box validity and bounds, weights and categories.
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Annotation(format!(
                "{}: image dims must be positive",
                self.image_id
            )));
        }
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        for o in &self.objects {
            if o.category >= num_categories {
                return Err(Error::Annotation(format!(
                    "{}: category index {} out of range",
                    self.image_id, o.category
                )));
            }
            let b = &o.bbox;
            if !b.is_valid() || b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > w || b.ymax > h {
                return Err(Error::Annotation(format!(
                    "{}: box {:?} invalid or outside {w}x{h}",
                    self.image_id, b
                )));
            }
            if !(o.weight > 0.0 && o.weight <= 1.0) {
                return Err(Error::Annotation(format!(
                    "{}: weight {} outside (0, 1]",
                    self.image_id, o.weight
                )));
            }
        }
        Ok(())
    }
}

/// Immutable collection of annotations with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub categories: CategoryTable,
    annotations: Vec<ImageAnnotation>,
    pixmaps: BTreeMap<String, PathBuf>,
}

impl Dataset {
    pub fn new(categories: CategoryTable, annotations: Vec<ImageAnnotation>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for a in &annotations {
            if !seen.insert(a.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id `{}`", a.image_id)));
            }
            a.validate(categories.len())?;
        }
        Ok(Dataset {
            categories,
            annotations,
            pixmaps: BTreeMap::new(),
        })
    }

    pub(crate) fn with_pixmaps(mut self, pixmaps: BTreeMap<String, PathBuf>) -> Self {
        self.pixmaps = pixmaps;
        self
    }

    pub fn annotations(&self) -> &[ImageAnnotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.annotations.iter().map(|a| a.image_id.as_str())
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotation> {
        self.annotations.iter().find(|a| a.image_id == image_id)
    }

    pub fn pixmap_path(&self, image_id: &str) -> Option<&PathBuf> {
        self.pixmaps.get(image_id)
    }

    /// Loads the pixels for `image_id` from its pixmap path.
    pub fn load_image(&self, image_id: &str) -> Result<Image> {
        let path = self
            .pixmaps
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("no pixmap recorded for `{image_id}`")))?;
        read_ppm(path)
    }

    /// Sub-dataset restricted to `ids`, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Dataset> {
        let index: BTreeMap<&str, &ImageAnnotation> =
            self.annotations.iter().map(|a| (a.image_id.as_str(), a)).collect();
        let mut anns = Vec::with_capacity(ids.len());
        let mut pix = BTreeMap::new();
        let mut missing = Vec::new();
        for id in ids {
            let id = id.as_ref();
            match index.get(id) {
                Some(a) => {
                    anns.push((*a).clone());
                    if let Some(p) = self.pixmaps.get(id) {
                        pix.insert(id.to_string(), p.clone());
                    }
                }
                None => missing.push(id.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::invalid(format!("unknown image ids: {}", missing.join(", "))));
        }
        Ok(Dataset::new(self.categories.clone(), anns)?.with_pixmaps(pix))
    }
}

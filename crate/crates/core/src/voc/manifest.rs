use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{parse_voc_xml, CategoryTable, Dataset, ImageAnnotation};
use crate::error::{Error, Result};

/// One manifest line: `image_id<TAB>xml_path[<TAB>ppm_path]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub xml: PathBuf,
    pub pixmap: Option<PathBuf>,
}

/// Loads every annotation listed in a manifest. Relative paths resolve
/// against the manifest's directory. All failures are collected and reported
/// together.
pub fn load_dataset(manifest: impl AsRef<Path>, categories: &CategoryTable) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::file(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    let mut failures = Vec::new();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
            failures.push(format!(
                "{}:{}: expected `id<TAB>xml[<TAB>ppm]`",
                manifest.display(),
                lineno + 1
            ));
            continue;
        }
        if !seen.insert(fields[0].to_string()) {
            failures.push(format!("duplicate image id `{}`", fields[0]));
            continue;
        }
        entries.push(ManifestEntry {
            image_id: fields[0].to_string(),
            xml: base.join(fields[1]),
            pixmap: fields.get(2).map(|p| base.join(p)),
        });
    }

    let parsed: Vec<std::result::Result<ImageAnnotation, String>> = entries
        .par_iter()
        .map(|entry| {
            let bytes = std::fs::read(&entry.xml)
                .map_err(|e| format!("{}: {e}", entry.xml.display()))?;
            let mut ann = parse_voc_xml(&bytes, categories)
                .map_err(|e| format!("{}: {e}", entry.xml.display()))?;
            ann.image_id = entry.image_id.clone();
            if let Some(p) = &entry.pixmap {
                if !p.is_file() {
                    return Err(format!("{}: pixmap not found", p.display()));
                }
            }
            Ok(ann)
        })
        .collect();

    let mut annotations = Vec::with_capacity(parsed.len());
    for r in parsed {
        match r {
            Ok(a) => annotations.push(a),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Load(failures));
    }

    let pixmaps: BTreeMap<String, PathBuf> = entries
        .into_iter()
        .filter_map(|e| e.pixmap.map(|p| (e.image_id, p)))
        .collect();
    Ok(Dataset::new(categories.clone(), annotations)?.with_pixmaps(pixmaps))
}

/// Renders manifest text; paths are written as given.
pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.image_id);
        out.push('\t');
        out.push_str(&e.xml.to_string_lossy());
        if let Some(p) = &e.pixmap {
            out.push('\t');
            out.push_str(&p.to_string_lossy());
        }
        out.push('\n');
    }
    out
}

//! VOC (labelImg) XML reading and writing.
//!
//! VOC stores 1-based inclusive integer corners. On read, `xmin` and `ymin`
//! are shifted by -1 so that `xmax - xmin` is the pixel extent; the writer
//! applies the inverse and rounds to the nearest integer.

use std::fmt::Write as _;

use roxmltree::{Document, Node};

use super::{CategoryTable, GroundTruthObject, ImageAnnotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Parses one VOC annotation document.
pub fn parse_voc_xml(bytes: &[u8], categories: &CategoryTable) -> Result<ImageAnnotation> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Xml {
        offset: e.valid_up_to(),
        message: "document is not valid UTF-8".into(),
    })?;
    let doc = Document::parse(text).map_err(|e| {
        let pos = e.pos();
        Error::Xml {
            offset: byte_offset(text, pos.row, pos.col),
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Annotation(format!(
            "root element is `{}`, expected `annotation`",
            root.tag_name().name()
        )));
    }

    let image_id = child(root, "filename")
        .and_then(|n| n.text())
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let size = child(root, "size").ok_or_else(|| missing(root, "size"))?;
    let width = dimension(size, "width")?;
    let height = dimension(size, "height")?;

    let mut objects = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        objects.push(parse_object(obj, categories, f64::from(width), f64::from(height))?);
    }

    Ok(ImageAnnotation {
        image_id,
        width,
        height,
        objects,
    })
}

fn parse_object(
    obj: Node,
    categories: &CategoryTable,
    width: f64,
    height: f64,
) -> Result<GroundTruthObject> {
    let name = child(obj, "name")
        .and_then(|n| n.text())
        .map(str::trim)
        .ok_or_else(|| missing(obj, "name"))?;
    let category = categories
        .index_of(name)
        .ok_or_else(|| Error::UnknownCategory(name.to_string()))?;

    let bndbox = child(obj, "bndbox").ok_or_else(|| missing(obj, "bndbox"))?;
    let xmin = number(bndbox, "xmin")? - 1.0;
    let ymin = number(bndbox, "ymin")? - 1.0;
    let xmax = number(bndbox, "xmax")?;
    let ymax = number(bndbox, "ymax")?;
    if !(xmax > xmin && ymax > ymin) {
        return Err(Error::Annotation(format!(
            "object `{name}` at byte {} has non-positive extent ({xmin}, {ymin}, {xmax}, {ymax})",
            obj.range().start
        )));
    }
    let raw = BBox {
        xmin,
        ymin,
        xmax,
        ymax,
    };
    let bbox = crate::geometry::clip_unchecked(&raw, width, height).ok_or_else(|| {
        Error::Annotation(format!(
            "object `{name}` at byte {} lies outside the {width}x{height} image",
            obj.range().start
        ))
    })?;

    let weight = match child(obj, "weight") {
        Some(_) => number(obj, "weight")?,
        None => 1.0,
    };
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::Annotation(format!("object `{name}` has weight {weight} outside (0, 1]")));
    }

    Ok(GroundTruthObject {
        category,
        bbox,
        weight,
        difficult: flag(obj, "difficult")?,
        truncated: flag(obj, "truncated")?,
    })
}

/// Serializes an annotation as VOC XML.
pub fn write_voc_xml(ann: &ImageAnnotation, categories: &CategoryTable) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(&ann.image_id));
    s.push_str("\t<size>\n");
    let _ = writeln!(s, "\t\t<width>{}</width>", ann.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", ann.height);
    s.push_str("\t\t<depth>3</depth>\n");
    s.push_str("\t</size>\n");
    for o in &ann.objects {
        let name = categories
            .name(o.category)
            .map(String::from)
            .unwrap_or_else(|| format!("category{}", o.category));
        s.push_str("\t<object>\n");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(&name));
        let _ = writeln!(s, "\t\t<truncated>{}</truncated>", u8::from(o.truncated));
        let _ = writeln!(s, "\t\t<difficult>{}</difficult>", u8::from(o.difficult));
        if o.weight != 1.0 {
            let _ = writeln!(s, "\t\t<weight>{}</weight>", o.weight);
        }
        s.push_str("\t\t<bndbox>\n");
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", (o.bbox.xmin + 1.0).round() as i64);
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", (o.bbox.ymin + 1.0).round() as i64);
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", o.bbox.xmax.round() as i64);
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", o.bbox.ymax.round() as i64);
        s.push_str("\t\t</bndbox>\n");
        s.push_str("\t</object>\n");
    }
    s.push_str("</annotation>\n");
    s.into_bytes()
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn missing(node: Node, name: &str) -> Error {
    Error::Annotation(format!(
        "`{}` element at byte {} has no `{name}` child",
        node.tag_name().name(),
        node.range().start
    ))
}

fn number(node: Node, name: &str) -> Result<f64> {
    let el = child(node, name).ok_or_else(|| missing(node, name))?;
    let text = el.text().unwrap_or("").trim();
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::Annotation(format!(
                "`{name}` at byte {} is not a number: `{text}`",
                el.range().start
            ))
        })
}

fn dimension(node: Node, name: &str) -> Result<u32> {
    let v = number(node, name)?;
    if v < 1.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
        return Err(Error::Annotation(format!("image {name} must be a positive integer, got {v}")));
    }
    Ok(v as u32)
}

fn flag(node: Node, name: &str) -> Result<bool> {
    match child(node, name) {
        None => Ok(false),
        Some(_) => Ok(number(node, name)? != 0.0),
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

// roxmltree reports 1-based (row, column-in-chars).
fn byte_offset(text: &str, row: u32, col: u32) -> usize {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == row as usize {
            return offset
                + line
                    .char_indices()
                    .nth(col.saturating_sub(1) as usize)
                    .map_or(line.len(), |(b, _)| b);
        }
        offset += line.len();
    }
    text.len()
}

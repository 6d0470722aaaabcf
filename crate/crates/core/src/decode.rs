//! Three-scale head decoding and non-maximum suppression.
//!
//! A head tensor holds, for every grid cell and each of its three anchor
//! slots, the raw values `(t_x, t_y, t_w, t_h, t_obj, t_c1..t_cK)`. A slot
//! at cell `(cx, cy)` with prior `(p_w, p_h)` decodes to
//!
//! ```text
//! center = ((σ(t_x) + cx) · stride, (σ(t_y) + cy) · stride)
//! size   = (p_w · exp(min(t_w, 10)), p_h · exp(min(t_h, 10)))
//! score  = σ(t_obj) · σ(t_c)        for each category c
//! ```
//!
//! Category scores are independent sigmoids rather than a softmax. The
//! in-cell offset and the half sizes are snapped to a 2^-24 pixel grid, which
//! makes decoding exactly equivariant to whole-cell shifts.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, BoxShape, Scale};
use crate::error::{Error, Result};
use crate::geometry::{clip_unchecked, iou_unchecked, scale_box, BBox};

/// Number of anchor slots per grid cell.
pub const ANCHORS_PER_SCALE: usize = 3;
/// First header word of a head-tensor record, the bytes `YHT1`.
pub const TENSOR_MAGIC: u32 = u32::from_le_bytes(*b"YHT1");
const HEADER_WORDS: usize = 8;
const MAX_LOG_SCALE: f64 = 10.0;

/// Raw output of one detection scale, laid out row-major as
/// `(y, x, anchor, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    grid: usize,
    stride: u32,
    num_classes: usize,
    data: Vec<f32>,
}

impl HeadTensor {
    pub fn new(grid: usize, stride: u32, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        if grid == 0 || num_classes == 0 {
            return Err(Error::invalid("head tensor needs a non-empty grid and at least one category"));
        }
        if Scale::from_stride(stride).is_none() {
            return Err(Error::invalid(format!("stride must be 8, 16 or 32, got {stride}")));
        }
        let expected = grid * grid * ANCHORS_PER_SCALE * (5 + num_classes);
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "head tensor {grid}x{grid}x{ANCHORS_PER_SCALE}x{} needs {expected} values, got {}",
                5 + num_classes,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("head tensor value {i} is not finite")));
        }
        Ok(HeadTensor {
            grid,
            stride,
            num_classes,
            data,
        })
    }

    /// All-zero tensor.
    pub fn zeros(grid: usize, stride: u32, num_classes: usize) -> Result<Self> {
        let len = grid * grid * ANCHORS_PER_SCALE * (5 + num_classes);
        HeadTensor::new(grid, stride, num_classes, vec![0.0; len])
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Network input resolution this tensor belongs to.
    pub fn input_resolution(&self) -> u32 {
        self.grid as u32 * self.stride
    }

    fn channels(&self) -> usize {
        5 + self.num_classes
    }

    fn slot_offset(&self, x: usize, y: usize, anchor: usize) -> usize {
        ((y * self.grid + x) * ANCHORS_PER_SCALE + anchor) * self.channels()
    }

    /// The `5 + K` raw values of one anchor slot.
    pub fn slot(&self, x: usize, y: usize, anchor: usize) -> &[f32] {
        let o = self.slot_offset(x, y, anchor);
        &self.data[o..o + self.channels()]
    }

    /// Mutable access to one slot. Values written here are not re-validated,
    /// so keep them finite.
    pub fn slot_mut(&mut self, x: usize, y: usize, anchor: usize) -> &mut [f32] {
        let o = self.slot_offset(x, y, anchor);
        let c = self.channels();
        &mut self.data[o..o + c]
    }

    /// Header plus little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header: [u32; HEADER_WORDS] = [
            TENSOR_MAGIC,
            self.grid as u32,
            self.stride,
            self.num_classes as u32,
            ANCHORS_PER_SCALE as u32,
            0,
            0,
            0,
        ];
        let mut out = Vec::with_capacity(4 * (HEADER_WORDS + self.data.len()));
        for w in header {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one record from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(HeadTensor, usize)> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Format("truncated head tensor header".into()))
        };
        if word(0)? != TENSOR_MAGIC {
            return Err(Error::Format("not a head tensor (bad magic)".into()));
        }
        let (grid, stride, k, anchors) = (word(1)? as usize, word(2)?, word(3)? as usize, word(4)?);
        if anchors as usize != ANCHORS_PER_SCALE {
            return Err(Error::Format(format!(
                "expected {ANCHORS_PER_SCALE} anchors per cell, header says {anchors}"
            )));
        }
        let n = grid
            .checked_mul(grid)
            .and_then(|v| v.checked_mul(ANCHORS_PER_SCALE * (5 + k)))
            .ok_or_else(|| Error::Format("head tensor header overflows".into()))?;
        let start = 4 * HEADER_WORDS;
        let end = start + 4 * n;
        let payload = bytes.get(start..end).ok_or_else(|| {
            Error::Format(format!(
                "head tensor payload truncated: need {} bytes, have {}",
                4 * n,
                bytes.len().saturating_sub(start)
            ))
        })?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = HeadTensor::new(grid, stride, k, data).map_err(|e| Error::Format(e.to_string()))?;
        Ok((t, end))
    }
}

/// Reads every tensor record stored back to back in `path`.
pub fn read_head_set(path: impl AsRef<Path>) -> Result<Vec<HeadTensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut rest = &bytes[..];
    let mut out = Vec::new();
    while !rest.is_empty() {
        let (t, used) = HeadTensor::from_bytes(rest)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.push(t);
        rest = &rest[used..];
    }
    Ok(out)
}

pub fn write_head_set(path: impl AsRef<Path>, tensors: &[HeadTensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = tensors.iter().flat_map(HeadTensor::to_bytes).collect();
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// One scored box. Serialized as
/// `{"image_id":..,"category":..,"score":..,"bbox":[x1,y1,x2,y2]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DetectionRecord", try_from = "DetectionRecord")]
pub struct Detection {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    category: usize,
    score: f64,
    bbox: [f64; 4],
}

impl From<Detection> for DetectionRecord {
    fn from(d: Detection) -> Self {
        DetectionRecord {
            image_id: d.image_id,
            category: d.category,
            score: d.score,
            bbox: d.bbox.to_array(),
        }
    }
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = String;

    fn try_from(r: DetectionRecord) -> Result<Self, String> {
        let [x1, y1, x2, y2] = r.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        if !(r.score > 0.0 && r.score <= 1.0) {
            return Err(format!("score {} outside (0, 1]", r.score));
        }
        Ok(Detection {
            image_id: r.image_id,
            category: r.category,
            score: r.score,
            bbox,
        })
    }
}

/// One JSON object per line.
pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detections always serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines, skipping blank ones. Errors name the 1-based line.
pub fn parse_detections_jsonl(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid(format!("detection line {}: {e}", i + 1)))
        })
        .collect()
}

#[inline]
fn sigmoid(v: f32) -> f64 {
    1.0 / (1.0 + (-f64::from(v)).exp())
}

/// Sub-pixel offsets and half sizes are snapped to multiples of this, so
/// that adding a cell origin is exact and a box decoded one cell over is
/// shifted by exactly one stride.
const OFFSET_QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

#[inline]
fn snap(v: f64) -> f64 {
    (v / OFFSET_QUANTUM).round() * OFFSET_QUANTUM
}

/// Box predicted by the anchor slot at cell `(x, y)` with its `prior`, in
/// network-input pixels. `None` when the predicted size underflows to zero.
pub fn slot_box(t: &HeadTensor, prior: BoxShape, x: usize, y: usize, anchor: usize) -> Option<BBox> {
    let v = t.slot(x, y, anchor);
    let stride = f64::from(t.stride);
    let cx = (x as f64) * stride + snap(sigmoid(v[0]) * stride);
    let cy = (y as f64) * stride + snap(sigmoid(v[1]) * stride);
    let hw = snap(prior.w * f64::from(v[2]).min(MAX_LOG_SCALE).exp() / 2.0);
    let hh = snap(prior.h * f64::from(v[3]).min(MAX_LOG_SCALE).exp() / 2.0);
    let b = BBox {
        xmin: cx - hw,
        ymin: cy - hh,
        xmax: cx + hw,
        ymax: cy + hh,
    };
    b.is_valid().then_some(b)
}

fn check_score_thresh(score_thresh: f64) -> Result<()> {
    if (0.0..=1.0).contains(&score_thresh) {
        Ok(())
    } else {
        Err(Error::invalid(format!("score threshold {score_thresh} outside [0, 1]")))
    }
}

/// Every `(cell, anchor, category)` candidate of one scale scoring above
/// `score_thresh`, in network-input coordinates with an empty `image_id`.
/// Candidates come out in tensor order: row, column, anchor, category.
pub fn decode_scale(
    t: &HeadTensor,
    anchors3: &[BoxShape; 3],
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    check_score_thresh(score_thresh)?;
    let mut out = Vec::new();
    for y in 0..t.grid {
        for x in 0..t.grid {
            for (a, prior) in anchors3.iter().enumerate() {
                let v = t.slot(x, y, a);
                let obj = sigmoid(v[4]);
                let mut bbox = None;
                for (c, &tc) in v[5..].iter().enumerate() {
                    let score = obj * sigmoid(tc);
                    if score <= score_thresh {
                        continue;
                    }
                    let b = match bbox {
                        Some(b) => b,
                        None => match slot_box(t, *prior, x, y, a) {
                            Some(b) => *bbox.insert(b),
                            None => break,
                        },
                    };
                    out.push(Detection {
                        image_id: String::new(),
                        category: c,
                        score,
                        bbox: b,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Score order used throughout: higher score first, then lower input index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy per-category NMS. Within each category candidates are visited by
/// descending score (ties by input position) and dropped when their IoU with
/// an already kept box of the same category exceeds `iou_thresh`. The result
/// is ordered by descending score, ties again by input position.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<Vec<BBox>> = Vec::new();
    let mut out = Vec::new();
    for i in rank(&scores) {
        let d = &dets[i];
        if kept.len() <= d.category {
            kept.resize_with(d.category + 1, Vec::new);
        }
        let same = &mut kept[d.category];
        if same.iter().any(|k| iou_unchecked(k, &d.bbox) > iou_thresh) {
            continue;
        }
        same.push(d.bbox);
        out.push(d.clone());
    }
    out
}

/// Thresholds for [`decode_full`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 1e-8,
            iou_thresh: 0.6,
            max_dets: 100,
        }
    }
}

/// Candidate reference ordered for a max-heap by the [`rank`] order.
#[derive(Clone, Copy)]
struct Ranked {
    score: f64,
    index: u32,
    category: u32,
    scale: u8,
    slot: u32,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.index.cmp(&self.index))
    }
}

/// Puts the three tensors in stride order 8, 16, 32 after checking that they
/// agree with each other and with `input_res`.
fn order_scales(tensors: &[HeadTensor], input_res: u32) -> Result<[&HeadTensor; 3]> {
    if tensors.len() != 3 {
        return Err(Error::invalid(format!(
            "expected one head tensor per stride 8/16/32, got {}",
            tensors.len()
        )));
    }
    let k = tensors[0].num_classes;
    let mut out = Vec::with_capacity(3);
    for scale in Scale::ALL {
        let t = tensors
            .iter()
            .find(|t| t.stride == scale.stride())
            .ok_or_else(|| Error::invalid(format!("missing head tensor for stride {}", scale.stride())))?;
        if t.input_resolution() != input_res {
            return Err(Error::invalid(format!(
                "stride {} tensor has grid {} but input resolution {input_res} needs {}",
                t.stride,
                t.grid,
                input_res / t.stride
            )));
        }
        if t.num_classes != k {
            return Err(Error::invalid("head tensors disagree on the category count"));
        }
        out.push(t);
    }
    Ok([out[0], out[1], out[2]])
}

/// Full per-image decode: all three scales, per-category NMS in network
/// coordinates, rescaling from `input_res` to `orig_dims`, clipping, and
/// truncation to `max_dets` by score.
///
/// Suppression runs on the unclipped boxes; a kept box that clips to nothing
/// still suppresses but is not emitted. The candidate order behind score ties
/// is stride 8, 16, 32, then row, column, anchor and category, which matches
/// concatenating [`decode_scale`] outputs and calling [`nms`].
pub fn decode_full(
    image_id: &str,
    tensors: &[HeadTensor],
    anchors: &AnchorSet,
    input_res: u32,
    orig_dims: (u32, u32),
    config: &DecodeConfig,
) -> Result<Vec<Detection>> {
    check_score_thresh(config.score_thresh)?;
    if orig_dims.0 == 0 || orig_dims.1 == 0 {
        return Err(Error::invalid("original image dims must be positive"));
    }
    let scales = order_scales(tensors, input_res)?;
    let k = scales[0].num_classes;

    let mut cands = Vec::new();
    for (si, t) in scales.iter().enumerate() {
        let slots = t.grid * t.grid * ANCHORS_PER_SCALE;
        for slot in 0..slots {
            let v = &t.data[slot * (5 + k)..(slot + 1) * (5 + k)];
            let obj = sigmoid(v[4]);
            for (c, &tc) in v[5..].iter().enumerate() {
                let score = obj * sigmoid(tc);
                if score > config.score_thresh {
                    cands.push(Ranked {
                        score,
                        index: cands.len() as u32,
                        category: c as u32,
                        scale: si as u8,
                        slot: slot as u32,
                    });
                }
            }
        }
    }

    // Everything is visited in global score order, which is also each
    // category's own order, so the greedy result is the same as running NMS
    // category by category. Once `max_dets` boxes are out, nothing later can
    // survive truncation and the loop stops.
    let (sx, sy) = (
        f64::from(orig_dims.0) / f64::from(input_res),
        f64::from(orig_dims.1) / f64::from(input_res),
    );
    let (ow, oh) = (f64::from(orig_dims.0), f64::from(orig_dims.1));
    let mut heap = BinaryHeap::from(cands);
    let mut kept: Vec<Vec<BBox>> = vec![Vec::new(); k];
    let mut out = Vec::new();
    while out.len() < config.max_dets {
        let Some(r) = heap.pop() else { break };
        let t = scales[r.scale as usize];
        let slot = r.slot as usize;
        let anchor = slot % ANCHORS_PER_SCALE;
        let cell = slot / ANCHORS_PER_SCALE;
        let prior = anchors.group(Scale::ALL[r.scale as usize])[anchor];
        let Some(b) = slot_box(t, prior, cell % t.grid, cell / t.grid, anchor) else {
            continue;
        };
        let same = &mut kept[r.category as usize];
        if same.iter().any(|kb| iou_unchecked(kb, &b) > config.iou_thresh) {
            continue;
        }
        same.push(b);
        if let Some(bbox) = clip_unchecked(&scale_box(&b, sx, sy), ow, oh) {
            out.push(Detection {
                image_id: image_id.to_string(),
                category: r.category as usize,
                score: r.score,
                bbox,
            });
        }
    }
    Ok(out)
}

/// Number of grid cells across the three scales at resolution `res`.
pub fn grid_cells(res: u32) -> u64 {
    Scale::ALL
        .iter()
        .map(|s| u64::from(res / s.stride()).pow(2))
        .sum()
}

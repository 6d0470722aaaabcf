//! Training-time augmentation: geometry-preserving mixup, flips, crops,
//! translations, color jitter and per-epoch resolution sampling.
//!
//! Every random operation has a deterministic counterpart taking explicit
//! parameters (`crop_window`, `translate_by`, `adjust_color`), and the random
//! version only draws those parameters.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_unchecked, BBox, Image};
use crate::rng;
use crate::voc::{GroundTruthObject, ImageAnnotation};

/// An image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotation: ImageAnnotation,
}

impl Sample {
    pub fn new(image: Image, annotation: ImageAnnotation) -> Result<Self> {
        if image.width() != annotation.width as usize || image.height() != annotation.height as usize
        {
            return Err(Error::invalid(format!(
                "image is {}x{} but annotation `{}` says {}x{}",
                image.width(),
                image.height(),
                annotation.image_id,
                annotation.width,
                annotation.height
            )));
        }
        Ok(Sample { image, annotation })
    }

    fn with_image(&self, image: Image, objects: Vec<GroundTruthObject>) -> Sample {
        Sample {
            annotation: ImageAnnotation {
                image_id: self.annotation.image_id.clone(),
                width: image.width() as u32,
                height: image.height() as u32,
                objects,
            },
            image,
        }
    }
}

/// Result of [`mixup`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub sample: Sample,
    pub lambda: f64,
    pub parents: (String, String),
}

/// Beta(alpha, alpha) draw used as the mixup ratio.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// Blends `a` and `b` as `lambda * a + (1 - lambda) * b` on a canvas of the
/// larger width and height. Both images sit at the origin at native scale and
/// uncovered cells count as 0. Labels from `a` are weighted by `lambda`, those
/// from `b` by `1 - lambda`; zero-weight labels are dropped.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<MixedSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let width = a.image.width().max(b.image.width());
    let height = a.image.height().max(b.image.height());
    let (ia, ib) = (&a.image, &b.image);
    let image = Image::from_fn(width, height, |x, y, c| {
        mix_pixel(ia.get_padded(x, y, c), ib.get_padded(x, y, c), lambda)
    })?;

    let weighted = |objs: &[GroundTruthObject], factor: f64| -> Vec<GroundTruthObject> {
        objs.iter()
            .filter_map(|o| {
                let weight = o.weight * factor;
                (weight > 0.0).then(|| GroundTruthObject { weight, ..o.clone() })
            })
            .collect()
    };
    let mut objects = weighted(&a.annotation.objects, lambda);
    objects.extend(weighted(&b.annotation.objects, 1.0 - lambda));

    let parents = (a.annotation.image_id.clone(), b.annotation.image_id.clone());
    Ok(MixedSample {
        sample: Sample {
            annotation: ImageAnnotation {
                image_id: format!("{}+{}", parents.0, parents.1),
                width: width as u32,
                height: height as u32,
                objects,
            },
            image,
        },
        lambda,
        parents,
    })
}

/// One mixed channel value; the blend is evaluated in `f64` and rounded once.
#[inline]
pub fn mix_pixel(a: f32, b: f32, lambda: f64) -> f32 {
    (lambda * f64::from(a) + (1.0 - lambda) * f64::from(b)) as f32
}

/// Mirrors pixels and boxes about the vertical center line.
pub fn horizontal_flip(s: &Sample) -> Sample {
    let img = &s.image;
    let w = img.width();
    let image = Image::from_fn(w, img.height(), |x, y, c| img.get(w - 1 - x, y, c))
        .expect("same dims as a valid image");
    let fw = w as f64;
    let objects = s
        .annotation
        .objects
        .iter()
        .map(|o| GroundTruthObject {
            bbox: BBox {
                xmin: fw - o.bbox.xmax,
                ymin: o.bbox.ymin,
                xmax: fw - o.bbox.xmin,
                ymax: o.bbox.ymax,
            },
            ..o.clone()
        })
        .collect();
    s.with_image(image, objects)
}

/// Keeps the `cw x ch` window at `(x0, y0)`. Boxes are clipped to the window
/// and re-origined; a box survives only if it keeps at least `min_keep_frac`
/// of its area. Returns `None` when the sample had objects and none survive.
pub fn crop_window(
    s: &Sample,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
    min_keep_frac: f64,
) -> Result<Option<Sample>> {
    let img = &s.image;
    if cw == 0 || ch == 0 || x0 + cw > img.width() || y0 + ch > img.height() {
        return Err(Error::invalid(format!(
            "crop window {cw}x{ch}+{x0}+{y0} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let image = Image::from_fn(cw, ch, |x, y, c| img.get(x0 + x, y0 + y, c))?;
    let objects = keep_shifted(
        &s.annotation.objects,
        -(x0 as f64),
        -(y0 as f64),
        cw as f64,
        ch as f64,
        min_keep_frac,
    );
    if objects.is_empty() && !s.annotation.objects.is_empty() {
        return Ok(None);
    }
    Ok(Some(s.with_image(image, objects)))
}

/// Random crop of scale `U[min_scale, 1]` (both axes) at a uniform position.
/// Up to 50 windows are tried; if every one drops all objects the input is
/// returned unchanged.
pub fn random_crop(
    s: &Sample,
    rng: &mut impl Rng,
    min_keep_frac: f64,
    min_scale: f64,
) -> Result<Sample> {
    if !(min_scale > 0.0 && min_scale <= 1.0) {
        return Err(Error::invalid(format!("min_scale {min_scale} outside (0, 1]")));
    }
    let (w, h) = (s.image.width(), s.image.height());
    for _ in 0..MAX_ATTEMPTS {
        let scale = rng.random_range(min_scale..=1.0);
        let cw = ((scale * w as f64).round() as usize).clamp(1, w);
        let ch = ((scale * h as f64).round() as usize).clamp(1, h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        if let Some(out) = crop_window(s, x0, y0, cw, ch, min_keep_frac)? {
            return Ok(out);
        }
    }
    Ok(s.clone())
}

const MAX_ATTEMPTS: usize = 50;

/// Shifts content by `(dx, dy)` pixels on a same-size canvas; vacated cells
/// are 0 and boxes follow the crop keep rule.
pub fn translate_by(s: &Sample, dx: i64, dy: i64, min_keep_frac: f64) -> Option<Sample> {
    let img = &s.image;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let image = Image::from_fn(img.width(), img.height(), |x, y, c| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if (0..w).contains(&sx) && (0..h).contains(&sy) {
            img.get(sx as usize, sy as usize, c)
        } else {
            0.0
        }
    })
    .expect("same dims as a valid image");
    let objects = keep_shifted(
        &s.annotation.objects,
        dx as f64,
        dy as f64,
        w as f64,
        h as f64,
        min_keep_frac,
    );
    if objects.is_empty() && !s.annotation.objects.is_empty() {
        return None;
    }
    Some(s.with_image(image, objects))
}

/// Shift drawn uniformly within `±max_frac` of each dimension. Falls back to
/// the input after 50 shifts that would each drop every object.
pub fn random_translate(
    s: &Sample,
    rng: &mut impl Rng,
    max_frac: f64,
    min_keep_frac: f64,
) -> Result<Sample> {
    if !(0.0..=1.0).contains(&max_frac) {
        return Err(Error::invalid(format!("max_frac {max_frac} outside [0, 1]")));
    }
    let mx = (max_frac * s.image.width() as f64).floor() as i64;
    let my = (max_frac * s.image.height() as f64).floor() as i64;
    for _ in 0..MAX_ATTEMPTS {
        let dx = rng.random_range(-mx..=mx);
        let dy = rng.random_range(-my..=my);
        if let Some(out) = translate_by(s, dx, dy, min_keep_frac) {
            return Ok(out);
        }
    }
    Ok(s.clone())
}

fn keep_shifted(
    objects: &[GroundTruthObject],
    dx: f64,
    dy: f64,
    w: f64,
    h: f64,
    min_keep_frac: f64,
) -> Vec<GroundTruthObject> {
    objects
        .iter()
        .filter_map(|o| {
            let moved = o.bbox.translate(dx, dy);
            let kept = clip_unchecked(&moved, w, h)?;
            (kept.area() >= min_keep_frac * o.bbox.area()).then(|| GroundTruthObject {
                bbox: kept,
                ..o.clone()
            })
        })
        .collect()
}

/// `out = clamp((x - mean) * (1 + contrast) + mean + brightness)` with the
/// mean taken over the whole image.
pub fn adjust_color(s: &Sample, brightness: f64, contrast: f64) -> Sample {
    let mean = s.image.mean();
    let img = &s.image;
    let image = Image::from_fn(img.width(), img.height(), |x, y, c| {
        ((f64::from(img.get(x, y, c)) - mean) * (1.0 + contrast) + mean + brightness) as f32
    })
    .expect("same dims as a valid image");
    s.with_image(image, s.annotation.objects.clone())
}

/// Brightness offset and contrast change each uniform in `±max_delta`.
pub fn color_jitter(s: &Sample, rng: &mut impl Rng, max_delta: f64) -> Result<Sample> {
    if !(0.0..1.0).contains(&max_delta) {
        return Err(Error::invalid(format!("max_delta {max_delta} outside [0, 1)")));
    }
    let brightness = rng.random_range(-max_delta..=max_delta);
    let contrast = rng.random_range(-max_delta..=max_delta);
    Ok(adjust_color(s, brightness, contrast))
}

/// Square training resolutions, each a multiple of 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSet(Vec<u32>);

impl Default for ResolutionSet {
    /// 320, 352, ..., 608.
    fn default() -> Self {
        ResolutionSet((10..=19).map(|i| i * 32).collect())
    }
}

impl ResolutionSet {
    pub fn new(resolutions: Vec<u32>) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::invalid("resolution set is empty"));
        }
        if let Some(r) = resolutions.iter().find(|&&r| r == 0 || r % 32 != 0) {
            return Err(Error::invalid(format!("resolution {r} is not a positive multiple of 32")));
        }
        Ok(ResolutionSet(resolutions))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// The resolution used for every batch of `epoch`.
pub fn sample_resolution(epoch: u64, seed: u64, set: &ResolutionSet) -> u32 {
    let mut rng = rng::indexed_stream(seed, "resolution", epoch);
    set.0[rng.random_range(0..set.0.len())]
}

/// Probabilities and parameters of the training augmentation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    pub translate_prob: f64,
    pub jitter_prob: f64,
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    pub min_keep_frac: f64,
    pub min_crop_scale: f64,
    pub max_translate_frac: f64,
    pub max_color_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_prob: 0.5,
            translate_prob: 0.5,
            jitter_prob: 0.5,
            mixup_prob: 0.5,
            mixup_alpha: 1.5,
            min_keep_frac: 0.3,
            min_crop_scale: 0.5,
            max_translate_frac: 0.2,
            max_color_delta: 0.2,
        }
    }
}

/// Applies flip, crop, translate, jitter and then mixup with `partner`, each
/// with its configured probability, in that fixed order.
pub fn augment_sample(
    s: &Sample,
    partner: Option<&Sample>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let mut out = s.clone();
    if rng.random_bool(config.flip_prob) {
        out = horizontal_flip(&out);
    }
    if rng.random_bool(config.crop_prob) {
        out = random_crop(&out, rng, config.min_keep_frac, config.min_crop_scale)?;
    }
    if rng.random_bool(config.translate_prob) {
        out = random_translate(&out, rng, config.max_translate_frac, config.min_keep_frac)?;
    }
    if rng.random_bool(config.jitter_prob) {
        out = color_jitter(&out, rng, config.max_color_delta)?;
    }
    if let Some(p) = partner {
        if rng.random_bool(config.mixup_prob) {
            let lambda = sample_mixup_lambda(config.mixup_alpha, rng)?;
            let mixed = mixup(&out, p, lambda)?;
            out = mixed.sample;
            out.annotation.image_id = s.annotation.image_id.clone();
        }
    }
    Ok(out)
}

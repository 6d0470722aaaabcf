//! Axis-aligned boxes, IoU, bilinear resizing and binary pixmap I/O.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner,
//! `x` to the right and `y` downward. A box covers `[xmin, xmax) x [ymin, ymax)`
//! so its area is simply `(xmax - xmin) * (ymax - ymin)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or empty extents.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.xmin.is_finite()
            && self.ymin.is_finite()
            && self.xmax.is_finite()
            && self.ymax.is_finite()
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap area with `other`; zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; callers guarantee both boxes are valid.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Multiplies every x coordinate by `sx` and every y coordinate by `sy`.
pub fn scale_boxes(boxes: &[BBox], sx: f64, sy: f64) -> Result<Vec<BBox>> {
    if !(sx > 0.0 && sx.is_finite() && sy > 0.0 && sy.is_finite()) {
        return Err(Error::invalid(format!(
            "scale factors must be positive, got ({sx}, {sy})"
        )));
    }
    Ok(boxes.iter().map(|b| scale_box(b, sx, sy)).collect())
}

pub(crate) fn scale_box(b: &BBox, sx: f64, sy: f64) -> BBox {
    BBox {
        xmin: b.xmin * sx,
        ymin: b.ymin * sy,
        xmax: b.xmax * sx,
        ymax: b.ymax * sy,
    }
}

/// Intersection of `b` with `[0, w] x [0, h]`, or `None` when nothing of
/// positive area remains.
pub fn clip_box(b: &BBox, w: f64, h: f64) -> Result<Option<BBox>> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::invalid(format!("clip bounds must be positive, got {w}x{h}")));
    }
    b.validate()?;
    Ok(clip_unchecked(b, w, h))
}

pub(crate) fn clip_unchecked(b: &BBox, w: f64, h: f64) -> Option<BBox> {
    let clipped = BBox {
        xmin: b.xmin.max(0.0),
        ymin: b.ymin.max(0.0),
        xmax: b.xmax.min(w),
        ymax: b.ymax.min(h),
    };
    clipped.is_valid().then_some(clipped)
}

/// RGB image with channel values in `[0, 1]`, stored row-major as
/// `height x width x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dims must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "buffer length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Constant image.
    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Image::new(width, height, vec![value; width * height * 3])
    }

    /// Image from a closure evaluated at every `(x, y, channel)`. Values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dims must be positive, got {width}x{height}")));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Value at `(x, y, c)`, or 0 outside the image (zero padding).
    #[inline]
    pub fn get_padded(&self, x: usize, y: usize, c: usize) -> f32 {
        if x < self.width && y < self.height {
            self.get(x, y, c)
        } else {
            0.0
        }
    }

    /// Mean over every channel value.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_image(img: &Image, tw: usize, th: usize) -> Result<Image> {
    if tw == 0 || th == 0 {
        return Err(Error::invalid(format!("target dims must be positive, got {tw}x{th}")));
    }
    if tw == img.width && th == img.height {
        return Ok(img.clone());
    }
    let xs = sample_positions(img.width, tw);
    let ys = sample_positions(img.height, th);
    let mut data = Vec::with_capacity(tw * th * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = lerp(img.get(x0, y0, c).into(), img.get(x1, y0, c).into(), fx);
                let bottom = lerp(img.get(x0, y1, c).into(), img.get(x1, y1, c).into(), fx);
                data.push(lerp(top, bottom, fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Image {
        width: tw,
        height: th,
        data,
    })
}

// (lower index, upper index, weight of upper) for each destination pixel.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Decodes a binary portable pixmap (`P6`, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("expected P6 magic, found `{}`", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad pixmap {what} `{s}`")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("pixmap raster shorter than {n} bytes")))?;
    let data = raster.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(width, height, data).map_err(|e| Error::Format(e.to_string()))
}

/// Encodes an image as `P6`, rounding each value to the nearest byte.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> BBox {
        BBox::new(xmin, ymin, xmax, ymax).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        // inter 50, union 150
        assert!((iou(&a, &bb(5.0, 0.0, 15.0, 10.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_invalid_boxes() {
        let bad = BBox {
            xmin: 5.0,
            ymin: 0.0,
            xmax: 5.0,
            ymax: 1.0,
        };
        assert!(iou(&bad, &bb(0.0, 0.0, 1.0, 1.0)).is_err());
        let nan = BBox {
            xmin: f64::NAN,
            ..bb(0.0, 0.0, 1.0, 1.0)
        };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Image::filled(4, 4, 0.5).unwrap();
        let up = resize_image(&img, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.5));

        let noisy = Image::from_fn(5, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0).unwrap();
        assert_eq!(resize_image(&noisy, 5, 3).unwrap(), noisy);
        assert!(resize_image(&noisy, 0, 3).is_err());
    }

    #[test]
    fn resize_two_pixel_row() {
        // sample positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        let img = Image::from_fn(2, 1, |x, _, _| x as f32).unwrap();
        let row = resize_image(&img, 4, 1).unwrap();
        let red: Vec<f32> = (0..4).map(|x| row.get(x, 0, 0)).collect();
        assert_eq!(red, vec![0.0, 0.25, 0.75, 1.0]);
        assert!(red.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn scale_examples() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(scale_boxes(&[b], 1.0, 1.0).unwrap(), vec![b]);
        assert_eq!(scale_boxes(&[b], 2.0, 0.5).unwrap(), vec![bb(0.0, 0.0, 20.0, 5.0)]);
        assert!(scale_boxes(&[b], 0.0, 1.0).is_err());
        assert!(scale_boxes(&[b], 1.0, -2.0).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_box(&bb(-2.0, -1.0, 10.0, 9.0), 8.0, 8.0).unwrap(),
            Some(bb(0.0, 0.0, 8.0, 8.0))
        );
        let inside = bb(1.0, 2.0, 3.0, 4.0);
        assert_eq!(clip_box(&inside, 8.0, 8.0).unwrap(), Some(inside));
        assert_eq!(clip_box(&bb(20.0, 20.0, 30.0, 30.0), 8.0, 8.0).unwrap(), None);
        assert!(clip_box(&inside, 0.0, 8.0).is_err());
    }

    #[test]
    fn ppm_round_trip_and_header_comments() {
        let img = Image::from_fn(3, 2, |x, y, c| ((x + 2 * y + c) * 40) as f32 / 255.0).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);

        let mut commented = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        commented.extend([255, 0, 51]);
        let one = decode_ppm(&commented).unwrap();
        assert_eq!(one.get(0, 0, 0), 1.0);
        assert_eq!(one.get(0, 0, 2), 0.2);

        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn iou_invariant_under_translation_and_scale(
            a in arb_box(), b in arb_box(),
            dx in -50.0..50.0f64, dy in -50.0..50.0f64, s in 0.1..10.0f64,
        ) {
            let base = iou(&a, &b).unwrap();
            let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy)).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            let scaled = scale_boxes(&[a, b], s, s).unwrap();
            prop_assert!((base - iou(&scaled[0], &scaled[1]).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn scale_inverse_is_identity(a in arb_box(), sx in 0.01..100.0f64, sy in 0.01..100.0f64) {
            let there = scale_boxes(&[a], sx, sy).unwrap();
            let back = scale_boxes(&there, 1.0 / sx, 1.0 / sy).unwrap()[0];
            for (p, q) in back.to_array().iter().zip(a.to_array()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn resize_stays_in_unit_range(
            w in 1usize..6, h in 1usize..6, tw in 1usize..12, th in 1usize..12, seed in any::<u64>(),
        ) {
            let img = Image::from_fn(w, h, |x, y, c| {
                let v = seed.wrapping_mul((x * 31 + y * 17 + c + 1) as u64) >> 40;
                (v % 256) as f32 / 255.0
            }).unwrap();
            let out = resize_image(&img, tw, th).unwrap();
            prop_assert_eq!((out.width(), out.height()), (tw, th));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn resize_of_constant_is_constant(v in 0.0f32..=1.0, tw in 1usize..20, th in 1usize..20) {
            let img = Image::filled(3, 5, v).unwrap();
            let out = resize_image(&img, tw, th).unwrap();
            prop_assert!(out.data().iter().all(|&p| (p - v).abs() < 1e-6));
        }
    }
}

//! Binary masks, corner-form boxes, IoU algebra and column-major run-length
//! encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major boolean raster. Serializes as its run-length encoding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "RleMask", try_from = "RleMask")]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Self::from_vec(height, width, vec![false; height * width])
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::from_vec(height, width, data)
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_vec(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b))
    }

    /// Number of 4-connected components of set pixels.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = (i / self.width, i % self.width);
                let mut visit = |j: usize| {
                    if self.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(i - self.width);
                }
                if r + 1 < self.height {
                    visit(i + self.width);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < self.width {
                    visit(i + 1);
                }
            }
        }
        count
    }

    /// Nearest-neighbour resample to a new grid.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::from_fn(height, width, |r, c| {
            let sr = (r * self.height) / height;
            let sc = (c * self.width) / width;
            self.get(sr.min(self.height - 1), sc.min(self.width - 1))
        })
    }
}

/// Axis-aligned box in corner form. Units are whatever the caller uses
/// (pixels for masks, `[0, 1]` for decoder output).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::InvalidBox("non-finite coordinate".into()));
        }
        if x0 > x1 || y0 > y1 {
            return Err(Error::InvalidBox(format!(
                "corners out of order: ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Sentinel returned for empty masks: zero area at the origin.
    pub const EMPTY: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 0.0,
        y1: 0.0,
    };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x0: self.x0 * sx,
            y0: self.y0 * sy,
            x1: self.x1 * sx,
            y1: self.y1 * sy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> BBox {
        BBox {
            x0: a[0],
            y0: a[1],
            x1: a[2],
            y1: a[3],
        }
    }

    /// Pixel-space raster of the box on an `height x width` grid. A pixel is
    /// inside when its unit cell overlaps the box interior.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::from_fn(height, width, |r, c| {
            (c as f64) < self.x1 && (c as f64 + 1.0) > self.x0 && (r as f64) < self.y1 && (r as f64 + 1.0) > self.y0
        })
    }
}

/// Intersection over union; zero for disjoint or zero-area boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.union_area(b)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tightest pixel box around the set pixels, or [`BBox::EMPTY`].
pub fn mask_to_box(m: &BinaryMask) -> BBox {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return BBox::EMPTY;
    }
    BBox {
        x0: c0 as f64,
        y0: r0 as f64,
        x1: (c1 + 1) as f64,
        y1: (r1 + 1) as f64,
    }
}

/// Column-major run lengths, alternating zeros and ones, starting with zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
}

impl From<BinaryMask> for RleMask {
    fn from(m: BinaryMask) -> Self {
        rle_encode(&m)
    }
}

impl TryFrom<RleMask> for BinaryMask {
    type Error = Error;

    fn try_from(r: RleMask) -> Result<Self> {
        rle_decode(&r)
    }
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..m.width() {
        for r in 0..m.height() {
            let v = m.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        height: m.height(),
        width: m.width(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let total: u64 = rle.counts.iter().sum();
    let expected = (rle.height * rle.width) as u64;
    if total != expected {
        return Err(Error::Rle(format!(
            "run lengths sum to {total}, expected {expected}"
        )));
    }
    let mut mask = BinaryMask::new(rle.height, rle.width)?;
    let mut idx = 0usize;
    let mut value = false;
    for &run in &rle.counts {
        for _ in 0..run {
            let (c, r) = (idx / rle.height, idx % rle.height);
            mask.set(r, c, value);
            idx += 1;
        }
        value = !value;
    }
    Ok(mask)
}

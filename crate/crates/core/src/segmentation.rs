//! HSV tissue masks and their morphological refinement.
//!
//! A pixel is tissue when `S > tau_s && V > tau_v` on 8-bit HSV. The raw mask
//! is refined with `erode(dilate(dilate(erode(m))))` using a square
//! structuring element. Pixels outside the image count as background for
//! both erosion and dilation.

use std::fs;
use std::io;
use std::path::Path;

use crate::pyramid::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationParams {
    pub tau_s: u8,
    pub tau_v: u8,
    /// Side of the square structuring element; must be odd.
    pub kernel: u32,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { tau_s: 20, tau_v: 30, kernel: 5 }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(format!("structuring element side must be odd and >= 1, got {}", self.kernel));
        }
        Ok(())
    }
}

/// Row-major binary mask holding 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![0; width as usize * height as usize] }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![1; width as usize * height as usize] }
    }

    /// Builds a mask from 0/1 values; any nonzero byte is stored as 1.
    pub fn from_bits(width: u32, height: u32, bits: Vec<u8>) -> Option<Self> {
        if bits.len() != width as usize * height as usize {
            return None;
        }
        Some(Self { width, height, bits: bits.into_iter().map(|b| u8::from(b != 0)).collect() })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize] == 1
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = u8::from(value);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.bits.len() as f64
        }
    }

    /// Sub-mask at `(x, y)`; returns `None` if it leaves the mask.
    pub fn region(&self, x: u32, y: u32, w: u32, h: u32) -> Option<BinaryMask> {
        if x.checked_add(w)? > self.width || y.checked_add(h)? > self.height {
            return None;
        }
        let mut bits = Vec::with_capacity(w as usize * h as usize);
        for row in y..y + h {
            let start = row as usize * self.width as usize + x as usize;
            bits.extend_from_slice(&self.bits[start..start + w as usize]);
        }
        Some(BinaryMask { width: w, height: h, bits })
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| 1 - b).collect() }
    }

    /// Binary PGM (P5): 0 -> 0, 1 -> 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| b * 255));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_pgm())
    }
}

/// 8-bit HSV. Hue is in `[0, 180)` (degrees halved); saturation and value in `[0, 255]`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (u8, u8, u8) {
    let (ri, gi, bi) = (u32::from(r), u32::from(g), u32::from(b));
    let v = ri.max(gi).max(bi);
    let min = ri.min(gi).min(bi);
    let delta = v - min;
    let s = if v == 0 { 0 } else { (510 * delta + v) / (2 * v) };
    let h = if delta == 0 {
        0
    } else {
        let (rf, gf, bf, d) = (ri as f64, gi as f64, bi as f64, delta as f64);
        let deg = if v == ri {
            (60.0 * (gf - bf) / d).rem_euclid(360.0)
        } else if v == gi {
            60.0 * ((bf - rf) / d + 2.0)
        } else {
            60.0 * ((rf - gf) / d + 4.0)
        };
        ((deg / 2.0 + 0.5).floor() as u32) % 180
    };
    (h as u8, s as u8, v as u8)
}

/// Saturation and value only; hue is never consumed downstream.
#[inline]
pub fn saturation_value(r: u8, g: u8, b: u8) -> (u8, u8) {
    let v = r.max(g).max(b) as u32;
    let delta = v - r.min(g).min(b) as u32;
    let s = if v == 0 { 0 } else { (510 * delta + v) / (2 * v) };
    (s as u8, v as u8)
}

pub fn tissue_mask(img: &RgbImage, p: &SegmentationParams) -> BinaryMask {
    let bits = img
        .iter_rgb()
        .map(|[r, g, b]| {
            let (s, v) = saturation_value(r, g, b);
            u8::from(s > p.tau_s && v > p.tau_v)
        })
        .collect();
    BinaryMask { width: img.width(), height: img.height(), bits }
}

/// One-dimensional pass over rows (`horizontal`) or columns. For erosion the
/// output is 1 only when the whole window lies inside the image and is all
/// ones; for dilation when any in-image window pixel is 1.
fn pass(m: &BinaryMask, kernel: u32, horizontal: bool, erode: bool) -> BinaryMask {
    let (w, h) = (m.width as usize, m.height as usize);
    let r = (kernel / 2) as usize;
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let idx = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut out = vec![0u8; w * h];
    let mut prefix = vec![0u32; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + u32::from(m.bits[idx(line, i)]);
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            let ones = prefix[hi] - prefix[lo];
            let hit = if erode {
                i >= r && i + r < len && ones as usize == 2 * r + 1
            } else {
                ones > 0
            };
            out[idx(line, i)] = u8::from(hit);
        }
    }
    BinaryMask { width: m.width, height: m.height, bits: out }
}

/// Binary erosion with a `kernel x kernel` square element.
pub fn erode(m: &BinaryMask, kernel: u32) -> BinaryMask {
    debug_assert!(kernel % 2 == 1, "kernel must be odd");
    pass(&pass(m, kernel, true, true), kernel, false, true)
}

/// Binary dilation with a `kernel x kernel` square element.
pub fn dilate(m: &BinaryMask, kernel: u32) -> BinaryMask {
    debug_assert!(kernel % 2 == 1, "kernel must be odd");
    pass(&pass(m, kernel, true, false), kernel, false, false)
}

/// Opening followed by closing: `erode(dilate(dilate(erode(m))))`.
pub fn refine_mask(m: &BinaryMask, p: &SegmentationParams) -> BinaryMask {
    let k = p.kernel;
    erode(&dilate(&dilate(&erode(m, k), k), k), k)
}

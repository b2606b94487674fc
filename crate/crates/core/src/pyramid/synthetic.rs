//! Procedural test slides.
//!
//! Content is painted at base resolution, region by region in list order
//! (later regions overwrite earlier ones), then halved repeatedly with a
//! 2x2 box mean (`(a + b + c + d + 2) / 4` per channel) so every level is
//! derived from the one above it.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{level_dims, level_image_name, PyramidError, PyramidSource, RgbImage};
use crate::hash::{splitmix64, unit_f64};

const BACKGROUND: [u8; 3] = [255, 255, 255];
const TISSUE_DARK: [f64; 3] = [90.0, 30.0, 110.0];
const TISSUE_LIGHT: [f64; 3] = [235.0, 140.0, 200.0];
const DARK_ARTIFACT: [u8; 3] = [12, 10, 14];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Stained tissue with blocky random texture of side `grain` base pixels.
    Tissue,
    /// Stained tissue with no texture (a gentle horizontal gradient).
    Blurred,
    /// Near-black contamination.
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RegionShape {
    /// Disc centered at `(cx, cy)`, in base pixels.
    Disc { cx: f64, cy: f64, radius: f64 },
    /// Half-open rectangle `[x0, x1) x [y0, y1)`, in base pixels.
    Rect { x0: u32, y0: u32, x1: u32, y1: u32 },
}

impl RegionShape {
    fn contains(&self, x: u32, y: u32) -> bool {
        match *self {
            RegionShape::Disc { cx, cy, radius } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= radius * radius
            }
            RegionShape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegion {
    pub kind: RegionKind,
    #[serde(flatten)]
    pub shape: RegionShape,
}

/// Description of a procedural slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlide {
    pub base_width: u32,
    pub base_height: u32,
    pub levels: Vec<u32>,
    pub seed: u64,
    /// Texture cell side in base pixels.
    pub grain: u32,
    pub regions: Vec<SyntheticRegion>,
}

impl SyntheticSlide {
    /// A blank (all-white) slide.
    pub fn blank(base_width: u32, base_height: u32, levels: Vec<u32>) -> Self {
        Self { base_width, base_height, levels, seed: 0, grain: 16, regions: Vec::new() }
    }

    /// The bundled demo slide: a square `size x size` base split into four
    /// quadrants holding textured tissue, untextured tissue, tissue with a
    /// dark artifact, and empty glass.
    pub fn demo(size: u32, levels: Vec<u32>, seed: u64) -> Self {
        let s = size as f64;
        let half = size / 2;
        let q = |fx: f64, fy: f64| (fx * s, fy * s);
        let (c0x, c0y) = q(0.25, 0.25);
        let (c2x, c2y) = q(0.25, 0.75);
        let regions = vec![
            SyntheticRegion {
                kind: RegionKind::Tissue,
                shape: RegionShape::Disc { cx: c0x, cy: c0y, radius: 0.24 * s },
            },
            SyntheticRegion {
                kind: RegionKind::Blurred,
                shape: RegionShape::Rect { x0: half, y0: 0, x1: size, y1: half },
            },
            SyntheticRegion {
                kind: RegionKind::Tissue,
                shape: RegionShape::Disc { cx: c2x, cy: c2y, radius: 0.24 * s },
            },
            SyntheticRegion {
                kind: RegionKind::Dark,
                shape: RegionShape::Rect { x0: 0, y0: half + size / 8, x1: half, y1: half + size / 4 },
            },
        ];
        Self { base_width: size, base_height: size, levels, seed, grain: 16, regions }
    }

    fn texture(&self, x: u32, y: u32) -> f64 {
        let grain = self.grain.max(1);
        let cell = (u64::from(x / grain) << 32) | u64::from(y / grain);
        unit_f64(splitmix64(self.seed ^ splitmix64(cell)))
    }

    /// Color of base pixel `(x, y)`.
    pub fn base_pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let Some(region) = self.regions.iter().rev().find(|r| r.shape.contains(x, y)) else {
            return BACKGROUND;
        };
        match region.kind {
            RegionKind::Tissue => mix(self.texture(x, y)),
            RegionKind::Blurred => mix(0.35 + 0.3 * (x as f64 / self.base_width as f64)),
            RegionKind::Dark => DARK_ARTIFACT,
        }
    }

    fn render_base(&self) -> RgbImage {
        let w = self.base_width as usize;
        let mut pixels = vec![0u8; w * self.base_height as usize * 3];
        pixels.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
            for (x, px) in row.chunks_exact_mut(3).enumerate() {
                px.copy_from_slice(&self.base_pixel(x as u32, y as u32));
            }
        });
        RgbImage::new(self.base_width, self.base_height, pixels).expect("sized buffer")
    }

    /// Renders every requested level in memory.
    pub fn render(&self) -> Result<PyramidSource, PyramidError> {
        let mut levels = self.levels.clone();
        levels.sort_unstable();
        levels.dedup();
        let Some(&deepest) = levels.last() else {
            return Err(PyramidError::InvalidManifest("no levels requested".into()));
        };
        level_dims(self.base_width, self.base_height, deepest)?;

        let mut out = Vec::with_capacity(levels.len());
        let mut current = self.render_base();
        let mut current_level = 0;
        for &level in &levels {
            while current_level < level {
                current = halve(&current);
                current_level += 1;
            }
            out.push((level, current.clone()));
        }
        PyramidSource::from_images(self.base_width, self.base_height, out, Default::default())
    }
}

fn mix(t: f64) -> [u8; 3] {
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (TISSUE_DARK[c] + t * (TISSUE_LIGHT[c] - TISSUE_DARK[c])).round() as u8;
    }
    px
}

/// 2x2 box-mean downsampling with round-half-up; odd trailing rows/columns are dropped.
pub(crate) fn halve(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let src_w = img.width() as usize;
    let src = img.pixels();
    let mut pixels = vec![0u8; w as usize * h as usize * 3];
    pixels.par_chunks_mut(w as usize * 3).enumerate().for_each(|(y, row)| {
        let r0 = 2 * y * src_w * 3;
        let r1 = r0 + src_w * 3;
        for x in 0..w as usize {
            for c in 0..3 {
                let i = 2 * x * 3 + c;
                let sum = u16::from(src[r0 + i])
                    + u16::from(src[r0 + i + 3])
                    + u16::from(src[r1 + i])
                    + u16::from(src[r1 + i + 3]);
                row[x * 3 + c] = ((sum + 2) / 4) as u8;
            }
        }
    });
    RgbImage::new(w, h, pixels).expect("sized buffer")
}

/// Renders `spec` and writes the manifest plus one PNG per level into `out`.
pub fn write_synthetic_pyramid(spec: &SyntheticSlide, out: &Path) -> Result<PyramidSource, PyramidError> {
    let rendered = spec.render()?;
    rendered.write(out)?;
    debug_assert!(rendered.levels().iter().all(|e| e.image == level_image_name(e.level)));
    PyramidSource::load_manifest(&out.join(super::MANIFEST_NAME))
}

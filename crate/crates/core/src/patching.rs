//! Candidate generation, quality filtering and budgeted sampling of patches.
//!
//! Filters run in a fixed order (tissue, focus, exposure, dark pixels) and
//! the verdict names the first failing one. Every measurement is recorded
//! even after a failure so the patch report is complete.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::pyramid::{PyramidError, PyramidSource, RegionSource, RgbImage};
use crate::segmentation::{refine_mask, saturation_value, tissue_mask, BinaryMask, SegmentationParams};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("expected a {expected}x{expected} input, got {width}x{height}")]
    Dimension { expected: u32, width: u32, height: u32 },
    #[error("image too small for a 3x3 laplacian: {width}x{height}")]
    TooSmall { width: u32, height: u32 },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("patch report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid quality parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityParams {
    pub patch_size: u32,
    pub stride: u32,
    /// Minimum tissue fraction; a patch needs strictly more.
    pub min_tissue: f64,
    /// Patches with laplacian variance strictly below this are out of focus.
    pub focus_min: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub s_min: f64,
    /// Gray levels strictly below this count as dark.
    pub dark_intensity: u8,
    /// Patches with a dark fraction strictly above this are rejected.
    pub dark_frac_max: f64,
    pub max_patches: usize,
    pub levels: Vec<u32>,
    pub seed: u64,
}

impl Default for QualityParams {
    fn default() -> Self {
        Self {
            patch_size: 256,
            stride: 256,
            min_tissue: 0.1,
            focus_min: 40.0,
            v_min: 40.0,
            v_max: 245.0,
            s_min: 12.0,
            dark_intensity: 30,
            dark_frac_max: 0.2,
            max_patches: 2500,
            levels: vec![6, 5, 4, 3],
            seed: 0,
        }
    }
}

impl QualityParams {
    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |m: &str| Err(PatchError::Params(m.to_string()));
        if self.patch_size < 3 {
            return bad("patch_size must be at least 3");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_tissue) || !(0.0..=1.0).contains(&self.dark_frac_max) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(0.0..=255.0).contains(&self.v_min) || !(0.0..=255.0).contains(&self.v_max) || self.v_min > self.v_max {
            return bad("value range must satisfy 0 <= v_min <= v_max <= 255");
        }
        if !(0.0..=255.0).contains(&self.s_min) {
            return bad("s_min must lie in [0, 255]");
        }
        if self.focus_min < 0.0 || !self.focus_min.is_finite() {
            return bad("focus_min must be a nonnegative number");
        }
        if self.levels.is_empty() {
            return bad("at least one level is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Tissue,
    Focus,
    Underexposed,
    Overexposed,
    LowSaturation,
    Dark,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Tissue => "tissue",
            RejectReason::Focus => "focus",
            RejectReason::Underexposed => "underexposed",
            RejectReason::Overexposed => "overexposed",
            RejectReason::LowSaturation => "low_saturation",
            RejectReason::Dark => "dark",
        }
    }
}

impl FromStr for RejectReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tissue" => RejectReason::Tissue,
            "focus" => RejectReason::Focus,
            "underexposed" => RejectReason::Underexposed,
            "overexposed" => RejectReason::Overexposed,
            "low_saturation" => RejectReason::LowSaturation,
            "dark" => RejectReason::Dark,
            other => return Err(format!("unknown reject reason {other:?}")),
        })
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub level: u32,
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
    pub focus: f64,
    pub mean_v: f64,
    pub mean_s: f64,
    pub dark_fraction: f64,
    pub verdict: Verdict,
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "gray buffer size");
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Top-left corners of every full patch on the stride grid, row-major.
pub fn grid_candidates(level_w: u32, level_h: u32, p: &QualityParams) -> Vec<(u32, u32)> {
    let along = |len: u32| -> Vec<u32> {
        if len < p.patch_size {
            return Vec::new();
        }
        (0..=(len - p.patch_size)).step_by(p.stride as usize).collect()
    };
    let xs = along(level_w);
    along(level_h).into_iter().flat_map(|y| xs.iter().map(move |&x| (x, y))).collect()
}

/// Fraction of tissue pixels in a patch-sized mask region.
pub fn tissue_fraction(mask_region: &BinaryMask, patch_size: u32) -> Result<f64, PatchError> {
    if mask_region.width() != patch_size || mask_region.height() != patch_size {
        return Err(PatchError::Dimension {
            expected: patch_size,
            width: mask_region.width(),
            height: mask_region.height(),
        });
    }
    Ok(mask_region.count_ones() as f64 / (patch_size as f64 * patch_size as f64))
}

/// Luma `round(0.299 R + 0.587 G + 0.114 B)`, computed exactly in integers.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b) + 500) / 1000) as u8
}

pub fn grayscale(patch: &RgbImage) -> GrayImage {
    let data = patch.iter_rgb().map(|[r, g, b]| luma(r, g, b)).collect();
    GrayImage::new(patch.width(), patch.height(), data)
}

/// Population variance of the 4-neighbour laplacian over interior pixels.
pub fn laplacian_variance(gray: &GrayImage) -> Result<f64, PatchError> {
    let (w, h) = (gray.width as usize, gray.height as usize);
    if w < 3 || h < 3 {
        return Err(PatchError::TooSmall { width: gray.width, height: gray.height });
    }
    let d = &gray.data;
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = y * w + x;
            let r = i32::from(d[c - w]) + i32::from(d[c - 1]) + i32::from(d[c + 1]) + i32::from(d[c + w])
                - 4 * i32::from(d[c]);
            responses.push(r);
        }
    }
    let n = responses.len() as f64;
    let sum: i64 = responses.iter().map(|&r| i64::from(r)).sum();
    let mean = sum as f64 / n;
    let var = responses.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var)
}

/// Mean HSV value and saturation over the patch.
pub fn exposure_stats(patch: &RgbImage) -> (f64, f64) {
    let (mut sv, mut ss) = (0u64, 0u64);
    for [r, g, b] in patch.iter_rgb() {
        let (s, v) = saturation_value(r, g, b);
        ss += u64::from(s);
        sv += u64::from(v);
    }
    let n = (patch.width() as u64 * patch.height() as u64).max(1) as f64;
    (sv as f64 / n, ss as f64 / n)
}

fn exposure_verdict(mean_v: f64, mean_s: f64, p: &QualityParams) -> Result<(), RejectReason> {
    if mean_v < p.v_min {
        Err(RejectReason::Underexposed)
    } else if mean_v > p.v_max {
        Err(RejectReason::Overexposed)
    } else if mean_s < p.s_min {
        Err(RejectReason::LowSaturation)
    } else {
        Ok(())
    }
}

/// Passes when the mean value lies in `[v_min, v_max]` and the mean saturation is at least `s_min`.
pub fn exposure_check(patch: &RgbImage, p: &QualityParams) -> Result<(), RejectReason> {
    let (mean_v, mean_s) = exposure_stats(patch);
    exposure_verdict(mean_v, mean_s, p)
}

pub fn dark_fraction(gray: &GrayImage, p: &QualityParams) -> f64 {
    if gray.data.is_empty() {
        return 0.0;
    }
    let dark = gray.data.iter().filter(|&&g| g < p.dark_intensity).count();
    dark as f64 / gray.data.len() as f64
}

/// Measures a patch and classifies it. `level`, `x`, `y` only label the record.
pub fn evaluate_patch(
    patch: &RgbImage,
    mask_region: &BinaryMask,
    p: &QualityParams,
    (level, x, y): (u32, u32, u32),
) -> Result<PatchRecord, PatchError> {
    if patch.width() != p.patch_size || patch.height() != p.patch_size {
        return Err(PatchError::Dimension { expected: p.patch_size, width: patch.width(), height: patch.height() });
    }
    let tissue = tissue_fraction(mask_region, p.patch_size)?;
    let gray = grayscale(patch);
    let focus = laplacian_variance(&gray)?;
    let (mean_v, mean_s) = exposure_stats(patch);
    let dark = dark_fraction(&gray, p);

    let verdict = if tissue <= p.min_tissue {
        Verdict::Rejected(RejectReason::Tissue)
    } else if focus < p.focus_min {
        Verdict::Rejected(RejectReason::Focus)
    } else if let Err(reason) = exposure_verdict(mean_v, mean_s, p) {
        Verdict::Rejected(reason)
    } else if dark > p.dark_frac_max {
        Verdict::Rejected(RejectReason::Dark)
    } else {
        Verdict::Accepted
    };
    Ok(PatchRecord { level, x, y, tissue_fraction: tissue, focus, mean_v, mean_s, dark_fraction: dark, verdict })
}

/// Refined tissue mask of one level.
pub fn level_mask(src: &PyramidSource, level: u32, seg: &SegmentationParams) -> Result<BinaryMask, PatchError> {
    let thumb = src.thumbnail(level)?;
    Ok(refine_mask(&tissue_mask(&thumb, seg), seg))
}

/// Evaluates every grid candidate on every configured level. Records come
/// back sorted by `(level, y, x)` regardless of worker scheduling.
pub fn scan_slide(
    src: &PyramidSource,
    seg: &SegmentationParams,
    p: &QualityParams,
) -> Result<Vec<PatchRecord>, PatchError> {
    p.validate()?;
    let mut levels = p.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let mut records = Vec::new();
    for level in levels {
        let mask = level_mask(src, level, seg)?;
        let (w, h) = src.level_size(level)?;
        let candidates = grid_candidates(w, h, p);
        let evaluated: Result<Vec<_>, PatchError> = candidates
            .par_iter()
            .map(|&(x, y)| {
                let patch = src.read_region(level, x, y, p.patch_size, p.patch_size)?;
                let region = mask.region(x, y, p.patch_size, p.patch_size).expect("candidate inside level");
                evaluate_patch(&patch, &region, p, (level, x, y))
            })
            .collect();
        records.extend(evaluated?);
    }
    Ok(records)
}

/// Groups accepted records by level.
pub fn accepted_by_level(records: &[PatchRecord]) -> BTreeMap<u32, Vec<PatchRecord>> {
    let mut out: BTreeMap<u32, Vec<PatchRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.verdict.is_accepted()) {
        out.entry(r.level).or_default().push(r.clone());
    }
    out
}

/// Per-level sample sizes: everything when the total fits the budget, else
/// `min(n_l, floor(max * n_l / total))`. The floor remainder is not redistributed.
pub fn sample_counts(valid: &BTreeMap<u32, usize>, max_patches: usize) -> BTreeMap<u32, usize> {
    let total: u128 = valid.values().map(|&n| n as u128).sum();
    valid
        .iter()
        .map(|(&level, &n)| {
            let k = if total <= max_patches as u128 {
                n
            } else {
                n.min((max_patches as u128 * n as u128 / total) as usize)
            };
            (level, k)
        })
        .collect()
}

/// Stratified sampling without replacement. Selected records keep their
/// input order within each level; one seeded generator is consumed level by
/// level in ascending order.
pub fn stratified_sample(
    valid: &BTreeMap<u32, Vec<PatchRecord>>,
    p: &QualityParams,
) -> BTreeMap<u32, Vec<PatchRecord>> {
    let counts: BTreeMap<u32, usize> = valid.iter().map(|(&l, v)| (l, v.len())).collect();
    let targets = sample_counts(&counts, p.max_patches);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    valid
        .iter()
        .map(|(&level, records)| {
            let k = targets[&level];
            if k == records.len() {
                return (level, records.clone());
            }
            let mut picked = index::sample(&mut rng, records.len(), k).into_vec();
            picked.sort_unstable();
            (level, picked.into_iter().map(|i| records[i].clone()).collect())
        })
        .collect()
}

pub const REPORT_HEADER: &str = "level,x,y,tissue_fraction,focus,mean_v,mean_s,dark_fraction,verdict,reason";

/// CSV patch report. Floats use the shortest representation that parses back exactly.
pub fn write_report<'a>(records: impl IntoIterator<Item = &'a PatchRecord>) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let (verdict, reason) = match r.verdict {
            Verdict::Accepted => ("accepted", ""),
            Verdict::Rejected(reason) => ("rejected", reason.as_str()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.level, r.x, r.y, r.tissue_fraction, r.focus, r.mean_v, r.mean_s, r.dark_fraction, verdict, reason
        ));
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<PatchRecord>, PatchError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == REPORT_HEADER => {}
        _ => return Err(PatchError::Parse { line: 1, message: "missing or wrong header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let err = |message: String| PatchError::Parse { line: line_no, message };
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 10 {
            return Err(err(format!("expected 10 columns, found {}", cols.len())));
        }
        let int = |s: &str| s.parse::<u32>().map_err(|e| err(format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let verdict = match (cols[8], cols[9]) {
            ("accepted", "") => Verdict::Accepted,
            ("rejected", reason) => Verdict::Rejected(reason.parse().map_err(err)?),
            (v, r) => return Err(err(format!("bad verdict {v:?}/{r:?}"))),
        };
        out.push(PatchRecord {
            level: int(cols[0])?,
            x: int(cols[1])?,
            y: int(cols[2])?,
            tissue_fraction: real(cols[3])?,
            focus: real(cols[4])?,
            mean_v: real(cols[5])?,
            mean_s: real(cols[6])?,
            dark_fraction: real(cols[7])?,
            verdict,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> QualityParams {
        QualityParams::default()
    }

    #[test]
    fn grid_examples() {
        let p = params();
        assert_eq!(grid_candidates(512, 512, &p), vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
        assert_eq!(grid_candidates(300, 300, &p), vec![(0, 0)]);
        assert!(grid_candidates(255, 512, &p).is_empty());
    }

    #[test]
    fn tissue_fraction_boundary() {
        let mk = |ones: usize| {
            let mut bits = vec![0u8; 65536];
            bits[..ones].fill(1);
            BinaryMask::from_bits(256, 256, bits).unwrap()
        };
        assert_eq!(tissue_fraction(&BinaryMask::ones(256, 256), 256).unwrap(), 1.0);
        assert_eq!(tissue_fraction(&mk(0), 256).unwrap(), 0.0);
        assert!(tissue_fraction(&mk(6554), 256).unwrap() > 0.1);
        assert!(tissue_fraction(&mk(6553), 256).unwrap() <= 0.1);
        assert!(matches!(tissue_fraction(&BinaryMask::ones(10, 10), 256), Err(PatchError::Dimension { .. })));
    }

    #[test]
    fn luma_examples() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
        assert_eq!(luma(255, 0, 0), 76);
        for g in 0..=255u8 {
            assert_eq!(luma(g, g, g), g);
        }
    }

    #[test]
    fn constant_image_has_zero_focus() {
        let g = GrayImage::new(16, 16, vec![77; 256]);
        assert_eq!(laplacian_variance(&g).unwrap(), 0.0);
        assert!(matches!(laplacian_variance(&GrayImage::new(2, 5, vec![0; 10])), Err(PatchError::TooSmall { .. })));
    }

    #[test]
    fn exposure_examples() {
        let p = params();
        assert_eq!(exposure_check(&RgbImage::filled(8, 8, [255, 255, 255]), &p), Err(RejectReason::Overexposed));
        assert_eq!(exposure_check(&RgbImage::filled(8, 8, [0, 0, 0]), &p), Err(RejectReason::Underexposed));
        assert_eq!(exposure_check(&RgbImage::filled(8, 8, [255, 0, 0]), &p), Err(RejectReason::Overexposed));
        let half = RgbImage::from_fn(8, 8, |x, _| if x < 4 { [255, 0, 0] } else { [128, 128, 128] });
        assert_eq!(exposure_stats(&half), (191.5, 127.5));
        assert_eq!(exposure_check(&half, &p), Ok(()));
    }

    #[test]
    fn dark_fraction_examples() {
        let p = params();
        assert_eq!(dark_fraction(&GrayImage::new(4, 4, vec![0; 16]), &p), 1.0);
        assert_eq!(dark_fraction(&GrayImage::new(4, 4, vec![30; 16]), &p), 0.0);
        let mut d = vec![200u8; 65536];
        d[..16384].fill(0);
        assert_eq!(dark_fraction(&GrayImage::new(256, 256, d.clone()), &p), 0.25);
        d[13107..16384].fill(200);
        assert!(dark_fraction(&GrayImage::new(256, 256, d), &p) <= 0.2);
    }

    #[test]
    fn sample_counts_examples() {
        let counts = |v: &[(u32, usize)]| v.iter().copied().collect::<BTreeMap<_, _>>();
        assert_eq!(
            sample_counts(&counts(&[(6, 500), (5, 500), (4, 500), (3, 500)]), 2500),
            counts(&[(6, 500), (5, 500), (4, 500), (3, 500)])
        );
        assert_eq!(
            sample_counts(&counts(&[(6, 3000), (5, 1000), (4, 500), (3, 500)]), 2500),
            counts(&[(6, 1500), (5, 500), (4, 250), (3, 250)])
        );
        assert_eq!(sample_counts(&counts(&[(6, 2501)]), 2500), counts(&[(6, 2500)]));
        assert!(sample_counts(&BTreeMap::new(), 2500).is_empty());
    }

    fn record(level: u32, i: u32) -> PatchRecord {
        PatchRecord {
            level,
            x: i * 256,
            y: 0,
            tissue_fraction: 0.5,
            focus: 100.0,
            mean_v: 150.0,
            mean_s: 60.0,
            dark_fraction: 0.0,
            verdict: Verdict::Accepted,
        }
    }

    #[test]
    fn stratified_sample_is_deterministic_subset() {
        let mut valid = BTreeMap::new();
        valid.insert(3, (0..30).map(|i| record(3, i)).collect::<Vec<_>>());
        valid.insert(4, (0..10).map(|i| record(4, i)).collect::<Vec<_>>());
        let p = QualityParams { max_patches: 20, seed: 9, ..params() };
        let a = stratified_sample(&valid, &p);
        let b = stratified_sample(&valid, &p);
        assert_eq!(a, b);
        assert_eq!(a[&3].len(), 15);
        assert_eq!(a[&4].len(), 5);
        for (level, picked) in &a {
            let xs: Vec<u32> = picked.iter().map(|r| r.x).collect();
            assert!(xs.windows(2).all(|w| w[0] < w[1]), "ordered, no duplicates");
            assert!(picked.iter().all(|r| valid[level].contains(r)));
        }
    }

    #[test]
    fn report_roundtrip() {
        let mut recs = vec![record(3, 0), record(4, 1)];
        recs[1].verdict = Verdict::Rejected(RejectReason::LowSaturation);
        recs[1].focus = 0.1 + 0.2;
        let text = write_report(&recs);
        assert_eq!(parse_report(&text).unwrap(), recs);
        assert!(parse_report("nope\n").is_err());
    }
}

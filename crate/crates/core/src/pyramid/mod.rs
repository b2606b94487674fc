//! Multi-resolution slide access.
//!
//! A slide is a directory holding `pyramid.json` plus one 8-bit RGB PNG per
//! listed level. Level `l` has dimensions `floor(W0 / 2^l) x floor(H0 / 2^l)`.
//! All level images are decoded and validated at load time; a loaded
//! [`PyramidSource`] is immutable and can be shared across worker threads.

mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{write_synthetic_pyramid, RegionKind, RegionShape, SyntheticRegion, SyntheticSlide};

/// File name of the manifest inside a slide directory.
pub const MANIFEST_NAME: &str = "pyramid.json";

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch at level {level}: {message}")]
    DimensionMismatch { level: u32, message: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("level {level} too deep for a {base_w}x{base_h} slide")]
    LevelTooDeep { base_w: u32, base_h: u32, level: u32 },
    #[error("level {0} not present in slide")]
    MissingLevel(u32),
    #[error("region ({x},{y}) {w}x{h} outside level {level} bounds {level_w}x{level_h}")]
    OutOfBounds {
        level: u32,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        level_w: u32,
        level_h: u32,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },
}

impl PyramidError {
    /// True for failures caused by missing or unreadable inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, PyramidError::Io { .. } | PyramidError::MissingFile(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PyramidError + '_ {
    move |source| PyramidError::Io { path: path.to_path_buf(), source }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, PyramidError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(PyramidError::InvalidImage(format!(
                "{width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, pixels }
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Iterates pixels in row-major order.
    pub fn iter_rgb(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copies the `w x h` sub-image at `(x, y)`. The caller guarantees bounds.
    fn crop_unchecked(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        let row_bytes = w as usize * 3;
        let mut pixels = Vec::with_capacity(row_bytes * h as usize);
        for row in y..y + h {
            let start = (row as usize * self.width as usize + x as usize) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + row_bytes]);
        }
        RgbImage { width: w, height: h, pixels }
    }

    /// Crops with bounds checking; `level` is only used for error reporting.
    pub fn crop(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, PyramidError> {
        let fits = |o: u32, len: u32, bound: u32| o.checked_add(len).is_some_and(|e| e <= bound);
        if !fits(x, w, self.width) || !fits(y, h, self.height) {
            return Err(PyramidError::OutOfBounds {
                level,
                x,
                y,
                w,
                h,
                level_w: self.width,
                level_h: self.height,
            });
        }
        Ok(self.crop_unchecked(x, y, w, h))
    }

    pub fn load_png(path: &Path) -> Result<RgbImage, PyramidError> {
        if !path.exists() {
            return Err(PyramidError::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| PyramidError::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RgbImage::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PyramidError> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| PyramidError::Codec { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Dimensions of `level` for a slide with base size `base_w x base_h`.
pub fn level_dims(base_w: u32, base_h: u32, level: u32) -> Result<(u32, u32), PyramidError> {
    let too_deep = PyramidError::LevelTooDeep { base_w, base_h, level };
    if level >= 32 {
        return Err(too_deep);
    }
    let (w, h) = (base_w >> level, base_h >> level);
    if w == 0 || h == 0 {
        return Err(too_deep);
    }
    Ok((w, h))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    /// Path of the level image relative to the slide root.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    base_width: u32,
    base_height: u32,
    levels: Vec<LevelEntry>,
}

/// Anything that can serve pixel regions by pyramid level.
pub trait RegionSource: Sync {
    fn read_region(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, PyramidError>;
}

/// A loaded, validated slide.
#[derive(Debug, Clone)]
pub struct PyramidSource {
    base_width: u32,
    base_height: u32,
    levels: Vec<LevelEntry>,
    images: Vec<RgbImage>,
    root: PathBuf,
}

impl PyramidSource {
    /// Loads `path`, which may be either the manifest itself or the slide
    /// directory containing `pyramid.json`.
    pub fn load_manifest(path: &Path) -> Result<Self, PyramidError> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        if !manifest_path.exists() {
            return Err(PyramidError::MissingFile(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PyramidError::Parse {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        validate_manifest(&manifest)?;

        let mut images = Vec::with_capacity(manifest.levels.len());
        for entry in &manifest.levels {
            let img = RgbImage::load_png(&root.join(&entry.image))?;
            if (img.width(), img.height()) != (entry.width, entry.height) {
                return Err(PyramidError::DimensionMismatch {
                    level: entry.level,
                    message: format!(
                        "image {} is {}x{}, manifest declares {}x{}",
                        entry.image,
                        img.width(),
                        img.height(),
                        entry.width,
                        entry.height
                    ),
                });
            }
            images.push(img);
        }
        Ok(Self {
            base_width: manifest.base_width,
            base_height: manifest.base_height,
            levels: manifest.levels,
            images,
            root,
        })
    }

    /// Builds an in-memory source. Images are checked against the level geometry.
    pub fn from_images(
        base_width: u32,
        base_height: u32,
        levels: Vec<(u32, RgbImage)>,
        root: PathBuf,
    ) -> Result<Self, PyramidError> {
        let mut entries = Vec::with_capacity(levels.len());
        let mut images = Vec::with_capacity(levels.len());
        for (level, img) in levels {
            entries.push(LevelEntry {
                level,
                width: img.width(),
                height: img.height(),
                image: level_image_name(level),
            });
            images.push(img);
        }
        let manifest = Manifest { base_width, base_height, levels: entries };
        validate_manifest(&manifest)?;
        Ok(Self { base_width, base_height, levels: manifest.levels, images, root })
    }

    /// Writes `pyramid.json` and every level PNG under `root`.
    pub fn write(&self, root: &Path) -> Result<(), PyramidError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        for (entry, img) in self.levels.iter().zip(&self.images) {
            img.save_png(&root.join(&entry.image))?;
        }
        self.write_manifest(&root.join(MANIFEST_NAME))
    }

    /// Writes only the manifest JSON.
    pub fn write_manifest(&self, path: &Path) -> Result<(), PyramidError> {
        let manifest = Manifest {
            base_width: self.base_width,
            base_height: self.base_height,
            levels: self.levels.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn base_width(&self) -> u32 {
        self.base_width
    }

    pub fn base_height(&self) -> u32 {
        self.base_height
    }

    pub fn levels(&self) -> &[LevelEntry] {
        &self.levels
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn has_level(&self, level: u32) -> bool {
        self.index_of(level).is_some()
    }

    fn index_of(&self, level: u32) -> Option<usize> {
        self.levels.binary_search_by_key(&level, |e| e.level).ok()
    }

    fn level_image(&self, level: u32) -> Result<&RgbImage, PyramidError> {
        self.index_of(level).map(|i| &self.images[i]).ok_or(PyramidError::MissingLevel(level))
    }

    pub fn level_size(&self, level: u32) -> Result<(u32, u32), PyramidError> {
        let img = self.level_image(level)?;
        Ok((img.width(), img.height()))
    }

    /// The whole level image.
    pub fn thumbnail(&self, level: u32) -> Result<RgbImage, PyramidError> {
        self.level_image(level).cloned()
    }
}

impl RegionSource for PyramidSource {
    fn read_region(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, PyramidError> {
        self.level_image(level)?.crop(level, x, y, w, h)
    }
}

pub(crate) fn level_image_name(level: u32) -> String {
    format!("level_{level}.png")
}

fn validate_manifest(m: &Manifest) -> Result<(), PyramidError> {
    if m.base_width == 0 || m.base_height == 0 {
        return Err(PyramidError::InvalidManifest("base dimensions must be positive".into()));
    }
    if m.levels.is_empty() {
        return Err(PyramidError::InvalidManifest("no levels listed".into()));
    }
    for pair in m.levels.windows(2) {
        if pair[0].level >= pair[1].level {
            return Err(PyramidError::InvalidManifest(format!(
                "levels must be unique and ascending, found {} then {}",
                pair[0].level, pair[1].level
            )));
        }
    }
    for entry in &m.levels {
        let expected = level_dims(m.base_width, m.base_height, entry.level)?;
        if (entry.width, entry.height) != expected {
            return Err(PyramidError::DimensionMismatch {
                level: entry.level,
                message: format!(
                    "declared {}x{}, expected {}x{} from base {}x{}",
                    entry.width, entry.height, expected.0, expected.1, m.base_width, m.base_height
                ),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_dims_examples() {
        assert_eq!(level_dims(1024, 1024, 3).unwrap(), (128, 128));
        assert_eq!(level_dims(100_000, 80_000, 0).unwrap(), (100_000, 80_000));
        assert_eq!(level_dims(1000, 1000, 3).unwrap(), (125, 125));
        assert_eq!(level_dims(1001, 1001, 3).unwrap(), (125, 125));
        assert!(matches!(level_dims(7, 1024, 3), Err(PyramidError::LevelTooDeep { .. })));
        assert!(level_dims(u32::MAX, u32::MAX, 40).is_err());
    }

    fn white_source(levels: &[u32]) -> PyramidSource {
        let imgs = levels
            .iter()
            .map(|&l| {
                let (w, h) = level_dims(2048, 2048, l).unwrap();
                (l, RgbImage::filled(w, h, [255, 255, 255]))
            })
            .collect();
        PyramidSource::from_images(2048, 2048, imgs, PathBuf::new()).unwrap()
    }

    #[test]
    fn read_region_and_thumbnail() {
        let src = white_source(&[3, 6]);
        let t = src.thumbnail(6).unwrap();
        assert_eq!((t.width(), t.height()), (32, 32));
        assert_eq!(t, src.read_region(6, 0, 0, 32, 32).unwrap());
        assert_eq!(src.read_region(3, 0, 0, 1, 1).unwrap().pixels(), &[255, 255, 255]);
        assert!(matches!(src.read_region(6, 20, 0, 13, 4), Err(PyramidError::OutOfBounds { .. })));
        assert!(matches!(src.thumbnail(2), Err(PyramidError::MissingLevel(2))));
        assert!(matches!(src.read_region(2, 0, 0, 1, 1), Err(PyramidError::MissingLevel(2))));
    }

    #[test]
    fn crop_copies_exact_subimage() {
        let img = RgbImage::from_fn(5, 4, |x, y| [x as u8, y as u8, (x * y) as u8]);
        let c = img.crop(0, 1, 2, 3, 2).unwrap();
        assert_eq!((c.width(), c.height()), (3, 2));
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(c.get(x, y), img.get(x + 1, y + 2));
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = PyramidSource::from_images(
            2048,
            2048,
            vec![(3, RgbImage::filled(255, 256, [0, 0, 0]))],
            PathBuf::new(),
        );
        assert!(matches!(bad, Err(PyramidError::DimensionMismatch { level: 3, .. })));
        let unsorted = PyramidSource::from_images(
            64,
            64,
            vec![(1, RgbImage::filled(32, 32, [0; 3])), (0, RgbImage::filled(64, 64, [0; 3]))],
            PathBuf::new(),
        );
        assert!(matches!(unsorted, Err(PyramidError::InvalidManifest(_))));
    }
}

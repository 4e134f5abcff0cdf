//! 8-bit PGM/PPM/PNG images and JSON dataset manifests.
//!
//! DRIVE ships its images as TIFF and its masks as GIF. Convert them once to
//! PNG (or PGM) before writing a manifest; for the manual annotations use the
//! first observer (`1st_manual`) as the ground truth.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::elastic::Field2D;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<PathBuf>,
}

/// Entry paths are relative to `root`; a relative `root` is relative to the
/// manifest file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("invalid manifest: {e}")))?;
        if manifest.root.is_relative() {
            let dir = path.parent().unwrap_or(Path::new("."));
            manifest.root = dir.join(&manifest.root);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Input(format!(
            "{}: unsupported image extension (use .png, .pgm or .ppm)",
            path.display()
        ))),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, img: DynamicImage) -> Result<()> {
    let fmt = format_for(path)?;
    img.save_with_format(path, fmt)
        .map_err(|e| Error::load(path, format!("cannot write image: {e}")))
}

/// Saves a `(1, C, H, W)` image with `C ∈ {1, 3}` as 8-bit. `.pgm` requires one channel.
pub fn save_image(path: &Path, image: &Tensor4) -> Result<()> {
    let [n, c, h, w] = image.dims();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::Input(format!("cannot save image of dims {:?}", image.dims())));
    }
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if c == 3 && is_pgm {
        return Err(Error::Input(format!("{}: PGM holds one channel", path.display())));
    }
    let dynimg = if c == 1 {
        let bytes = image.plane_of(0, 0).iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from dims"))
    } else {
        let mut bytes = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    bytes.push(quantize(image.get(0, ch, y, x)));
                }
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from dims"))
    };
    write(path, dynimg)
}

/// Saves a binary mask as 0/255.
pub fn save_mask(path: &Path, mask: &Field2D) -> Result<()> {
    let bytes = mask.data().iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("buffer sized from dims");
    write(path, DynamicImage::ImageLuma8(img))
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::load(path, "file not found"));
    }
    let fmt = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, fmt).map_err(|e| Error::load(path, format!("cannot decode: {e}")))
}

/// Loads an image as `(1, 3, H, W)` in `[0, 1]`; grayscale is replicated to three channels.
pub fn load_image(path: &Path) -> Result<Tensor4> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Loads a two-level mask and binarizes it at the midpoint of its levels.
pub fn load_mask(path: &Path) -> Result<Field2D> {
    let gray = open(path)?.to_luma8();
    let mut levels: Vec<u8> = gray.as_raw().iter().copied().collect::<HashSet<_>>().into_iter().collect();
    levels.sort_unstable();
    if levels.len() > 2 {
        return Err(Error::load(
            path,
            format!("mask has {} distinct values; expected at most 2", levels.len()),
        ));
    }
    let threshold = match levels.as_slice() {
        [lo, hi] => (*lo as f64 + *hi as f64) / 2.0,
        _ => 127.5,
    };
    Field2D::from_vec(
        gray.height() as usize,
        gray.width() as usize,
        gray.as_raw().iter().map(|&v| if v as f64 > threshold { 1.0 } else { 0.0 }).collect(),
    )
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Input(format!("duplicate sample id '{}' in manifest", entry.id)));
        }
        let image_path = manifest.resolve(&entry.image);
        let mask_path = manifest.resolve(&entry.mask);
        let image = load_image(&image_path)?;
        let mask = load_mask(&mask_path)?;
        let (h, w) = (image.height(), image.width());
        if mask.dims() != (h, w) {
            return Err(Error::load(
                &mask_path,
                format!("mask is {:?} but image {} is {h}x{w}", mask.dims(), image_path.display()),
            ));
        }
        let fov = match &entry.fov {
            Some(p) => {
                let fov_path = manifest.resolve(p);
                let f = load_mask(&fov_path)?;
                if f.dims() != (h, w) {
                    return Err(Error::load(&fov_path, format!("fov is {:?} but image is {h}x{w}", f.dims())));
                }
                Some(f)
            }
            None => None,
        };
        samples.push(Sample::new(entry.id.clone(), image, mask, fov)?);
    }
    Ok(samples)
}

/// Writes samples as `<id>_image.png`, `<id>_mask.pgm` (and `<id>_fov.pgm`)
/// plus `manifest.json` in `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample], split: Split) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from(format!("{}_image.png", s.id));
        let mask = PathBuf::from(format!("{}_mask.pgm", s.id));
        save_image(&dir.join(&image), &s.image)?;
        save_mask(&dir.join(&mask), &s.mask)?;
        let fov = match &s.fov {
            Some(f) => {
                let p = PathBuf::from(format!("{}_fov.pgm", s.id));
                save_mask(&dir.join(&p), f)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            fov,
        });
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        split,
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        ..manifest
    })
}

//! Image corpora: the synthetic generator and the on-disk raster format
//! (binary PPM images, optional PGM foreground masks, `labels.txt` index).

mod synth;

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

pub use synth::{generate, synth_image, SynthSpec};

use crate::error::{Error, Result};
use crate::patching::ImageTensor;

pub const INDEX_FILE: &str = "labels.txt";
pub const MASK_DIR: &str = "masks";

/// Labelled images with optional per-pixel foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub masks: Option<Vec<ImageTensor>>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, masks: Option<Vec<ImageTensor>>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::config(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(m) = &masks {
            if m.len() != images.len() {
                return Err(Error::config(format!("{} images but {} masks", images.len(), m.len())));
            }
        }
        Ok(Dataset { images, labels, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: self.masks.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
        }
    }

    /// Deterministic train/test split: every fifth block of `classes`
    /// consecutive images is held out, which keeps both halves balanced for
    /// the round-robin labelling of the synthetic corpus.
    pub fn split(&self) -> (Dataset, Dataset) {
        let block = self.num_classes().max(1);
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|i| (i / block) % 5 == 4);
        (self.subset(&train), self.subset(&test))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if self.masks.is_some() {
            let md = dir.join(MASK_DIR);
            fs::create_dir_all(&md).map_err(|e| Error::io(&md, e))?;
        }
        let mut index = String::new();
        for (i, (img, label)) in self.images.iter().zip(&self.labels).enumerate() {
            let stem = format!("img_{i:05}");
            let name = format!("{stem}.ppm");
            write_raster(img, &dir.join(&name))?;
            if let Some(masks) = &self.masks {
                write_raster(&masks[i], &dir.join(MASK_DIR).join(format!("{stem}.pgm")))?;
            }
            index.push_str(&format!("{name} {label}\n"));
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    /// Loads `labels.txt` (`<file> <label>` per line, `#` comments) and the
    /// referenced images. Masks are picked up when every image has one.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Image {
                path: path.clone(),
                reason: format!("line {}: expected `<file> <label>`", lineno + 1),
            };
            let (name, label) = line.rsplit_once(char::is_whitespace).ok_or_else(bad)?;
            let label: usize = label.parse().map_err(|_| bad())?;
            let name = name.trim();
            images.push(read_raster(&dir.join(name), 3)?);
            labels.push(label);
            let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mp = dir.join(MASK_DIR).join(format!("{stem}.pgm"));
            if mp.exists() {
                masks.push(read_raster(&mp, 1)?);
            }
        }
        let masks = (masks.len() == images.len() && !images.is_empty()).then_some(masks);
        Dataset::new(images, labels, masks)
    }
}

fn to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes a 1-channel image as binary PGM and a 3-channel image as binary PPM.
pub fn write_raster(img: &ImageTensor, path: &Path) -> Result<()> {
    let (subtype, colour) = match img.channels() {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        c => {
            return Err(Error::Image {
                path: path.into(),
                reason: format!("cannot store {c} channels"),
            })
        }
    };
    let s = img.side() as u32;
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(&to_bytes(img), s, s, colour)
        .map_err(|e| Error::Image {
            path: path.into(),
            reason: e.to_string(),
        })?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a PPM/PGM file as a square image with `channels` channels.
pub fn read_raster(path: &Path, channels: usize) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if img.width() != img.height() {
        return Err(Error::Image {
            path: path.into(),
            reason: format!("image is {}x{}, only square images are supported", img.width(), img.height()),
        });
    }
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    let values = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::new(img.width() as usize, channels, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_balanced() {
        let ds = generate(&SynthSpec {
            classes: 10,
            count: 200,
            side: 16,
            seed: 1,
        })
        .unwrap();
        let (train, test) = ds.split();
        assert_eq!((train.len(), test.len()), (160, 40));
        for c in 0..10 {
            assert_eq!(test.labels.iter().filter(|&&l| l == c).count(), 4);
        }
    }

    #[test]
    fn disk_round_trip() {
        let ds = generate(&SynthSpec {
            classes: 3,
            count: 6,
            side: 16,
            seed: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}

//! Dataset directories of 8-bit binary PGM files.
//!
//! Layout of an exported dataset:
//!
//! ```text
//! <dir>/manifest.toml            domain specs and file lists
//! <dir>/<name>/image_000.pgm     intensities scaled to 0..=255
//! <dir>/<name>/mask_000.pgm      labels stored as label * MASK_SCALE
//! ```

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Image, Mask};
use crate::sim::data::{DomainSpec, SegSample};

/// Mask labels are multiplied by this before writing so files are viewable.
pub const MASK_SCALE: u8 = 127;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("{path}: {reason}")]
    Content { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .expect("in-memory PGM encoding");
    buf
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DatasetError> {
    let bytes = encode_pgm(width, height, pixels);
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
        .decode()
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn image_to_bytes(image: &Image) -> Vec<u8> {
    image
        .plane(0)
        .iter()
        .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn mask_to_bytes(mask: &Mask) -> Vec<u8> {
    mask.labels().iter().map(|l| l * MASK_SCALE).collect()
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), DatasetError> {
    write_pgm(path, mask.width(), mask.height(), &mask_to_bytes(mask))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: Vec<ManifestDomain>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub spec: DomainSpec,
    pub images: Vec<String>,
    pub masks: Vec<String>,
}

/// Writes every domain under `dir` and a `manifest.toml` describing them.
pub fn export_dataset(dir: &Path, domains: &[(DomainSpec, Vec<SegSample>)]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest { domains: Vec::new() };
    for (spec, samples) in domains {
        let sub = dir.join(&spec.name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut entry = ManifestDomain {
            spec: spec.clone(),
            images: Vec::new(),
            masks: Vec::new(),
        };
        for (i, s) in samples.iter().enumerate() {
            let img_name = format!("{}/image_{i:03}.pgm", spec.name);
            let mask_name = format!("{}/mask_{i:03}.pgm", spec.name);
            write_pgm(
                &dir.join(&img_name),
                s.image.width(),
                s.image.height(),
                &image_to_bytes(&s.image),
            )?;
            write_mask(&dir.join(&mask_name), &s.mask)?;
            entry.images.push(img_name);
            entry.masks.push(mask_name);
        }
        manifest.domains.push(entry);
    }
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads a directory written by [`export_dataset`]. Intensities come back
/// quantised to multiples of 1/255.
pub fn import_dataset(dir: &Path) -> Result<Vec<(DomainSpec, Vec<SegSample>)>, DatasetError> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let mut out = Vec::new();
    for entry in manifest.domains {
        if entry.images.len() != entry.masks.len() {
            return Err(DatasetError::Manifest(format!(
                "domain `{}` lists {} images but {} masks",
                entry.spec.name,
                entry.images.len(),
                entry.masks.len()
            )));
        }
        let mut samples = Vec::new();
        for (img_name, mask_name) in entry.images.iter().zip(&entry.masks) {
            let img_path = dir.join(img_name);
            let (w, h, pixels) = read_pgm(&img_path)?;
            let mask_path = dir.join(mask_name);
            let (mw, mh, labels) = read_pgm(&mask_path)?;
            if (mw, mh) != (w, h) {
                return Err(DatasetError::Content {
                    path: mask_path,
                    reason: "mask and image sizes differ".into(),
                });
            }
            let labels: Vec<u8> = labels
                .into_iter()
                .map(|v| ((v as f64) / MASK_SCALE as f64).round() as u8)
                .collect();
            if labels.iter().any(|&l| l > 2) {
                return Err(DatasetError::Content {
                    path: mask_path,
                    reason: "label outside 0..=2".into(),
                });
            }
            samples.push(SegSample {
                image: Image::gray(h, w, pixels.iter().map(|&p| p as f64 / 255.0).collect()),
                mask: Mask::new(h, w, labels),
            });
        }
        out.push((entry.spec, samples));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::data::{default_domains, generate_domain};

    #[test]
    fn pgm_header_is_p5() {
        let bytes = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 255]);
        assert!(bytes.starts_with(b"P5"));
        assert!(bytes.ends_with(&[0, 1, 2, 3, 4, 255]));
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = default_domains().remove(1);
        spec.n_samples = 3;
        spec.size = 10;
        let samples = generate_domain(&spec);
        export_dataset(dir.path(), &[(spec.clone(), samples.clone())]).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, spec);
        for (a, b) in samples.iter().zip(&back[0].1) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}

//! On-disk dataset layout: `<root>/images/*.png` (8-bit grayscale) and an
//! optional `<root>/masks/*.png` (0 or 255), matched by filename stem.
//! Pseudo-labels live in `<root>/pseudo_masks/` next to `pseudo_manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DomainTag, Image, Mask, Sample};
use crate::pseudo_label::{ClusterStat, FrameFailure, PseudoLabel};

pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";
pub const PSEUDO_MASKS: &str = "pseudo_masks";
pub const PSEUDO_MANIFEST: &str = "pseudo_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    pub errors: Vec<FileError>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_gray(path: &Path) -> Result<Grid8> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Grid8::from_vec(h as usize, w as usize, img.into_raw())
}

type Grid8 = crate::grid::Grid<u8>;

pub fn write_gray(path: &Path, grid: &Grid8) -> Result<()> {
    let img = GrayImage::from_raw(grid.width() as u32, grid.height() as u32, grid.data().to_vec())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Round and clamp to `u8`.
pub fn quantize(img: &Image) -> Grid8 {
    img.map(|&v| v.round().clamp(0.0, 255.0) as u8)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_gray(path, &quantize(img))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_gray(path, &mask.map(|&v| if v != 0 { 255 } else { 0 }))
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(read_gray(path)?.map(|&v| v as f32))
}

/// Reads a 0/255 mask as {0, 1}; any other value is an error.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = read_gray(path)?;
    if let Some(v) = g.data().iter().find(|&&v| v != 0 && v != 255) {
        return Err(image_err(path, format!("mask value {v} is neither 0 nor 255")));
    }
    Ok(g.map(|&v| u8::from(v == 255)))
}

/// PNG files in `dir` keyed by stem, sorted.
fn pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Load every image under `<root>/images`, pairing masks by stem. Unreadable
/// files and shape mismatches are reported per file; the rest still load.
pub fn ingest_dataset(root: &Path, domain: DomainTag) -> Result<Ingested> {
    let img_dir = root.join(IMAGES);
    if !img_dir.is_dir() {
        return Err(Error::EmptyDataset(format!("{} has no images/ directory", root.display())));
    }
    let images = pngs(&img_dir)?;
    let mask_dir = root.join(MASKS);
    let masks = if mask_dir.is_dir() { pngs(&mask_dir)? } else { BTreeMap::new() };
    let loaded = crate::par::map(&images.into_iter().collect::<Vec<_>>(), |(stem, path)| -> std::result::Result<Sample, FileError> {
        let fail = |p: &Path, e: Error| FileError {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        let image = read_image(path).map_err(|e| fail(path, e))?;
        let mask = match masks.get(stem) {
            Some(mp) => Some(read_mask(mp).map_err(|e| fail(mp, e))?),
            None => None,
        };
        Sample::new(stem.clone(), image, mask, domain).map_err(|e| fail(path, e))
    });
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for r in loaded {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(e),
        }
    }
    Ok(Ingested { samples, errors })
}

/// Write images (and masks when present) in the dataset layout.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root.join(IMAGES))?;
    if samples.iter().any(|s| s.mask.is_some()) {
        fs::create_dir_all(root.join(MASKS))?;
    }
    for r in crate::par::map(samples, |s| -> Result<()> {
        write_image(&root.join(IMAGES).join(format!("{}.png", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            write_mask(&root.join(MASKS).join(format!("{}.png", s.id)), m)?;
        }
        Ok(())
    }) {
        r?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub frame: String,
    pub low_confidence: bool,
    pub cluster_stats: Vec<ClusterStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoManifest {
    pub frames: Vec<PseudoEntry>,
    pub failures: Vec<FrameFailure>,
}

pub fn write_pseudo_labels(root: &Path, labels: &[PseudoLabel], failures: &[FrameFailure]) -> Result<()> {
    let dir = root.join(PSEUDO_MASKS);
    fs::create_dir_all(&dir)?;
    for l in labels {
        write_mask(&dir.join(format!("{}.png", l.source_frame)), &l.mask)?;
    }
    let manifest = PseudoManifest {
        frames: labels
            .iter()
            .map(|l| PseudoEntry {
                frame: l.source_frame.clone(),
                low_confidence: l.low_confidence,
                cluster_stats: l.cluster_stats.clone(),
            })
            .collect(),
        failures: failures.to_vec(),
    };
    fs::write(root.join(PSEUDO_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_pseudo_labels(root: &Path) -> Result<(Vec<PseudoLabel>, Vec<FrameFailure>)> {
    let text = fs::read_to_string(root.join(PSEUDO_MANIFEST))?;
    let manifest: PseudoManifest = serde_json::from_str(&text)?;
    let labels = manifest
        .frames
        .into_iter()
        .map(|e| {
            let mask = read_mask(&root.join(PSEUDO_MASKS).join(format!("{}.png", e.frame)))?;
            Ok(PseudoLabel {
                source_frame: e.frame,
                mask,
                cluster_stats: e.cluster_stats,
                low_confidence: e.low_confidence,
            })
        })
        .collect::<Result<_>>()?;
    Ok((labels, manifest.failures))
}

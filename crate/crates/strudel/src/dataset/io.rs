//! Dataset serialization: one directory per domain holding 16-bit grayscale
//! PNGs plus a key-value manifest, one record per sample.
//!
//! Images are quantized per image with their (min, max) recorded in the
//! manifest for dequantization; masks map {0, 1} to {0, 65535}.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// A sample plus the experiment split it was frozen into at generation time.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub sample: ImageSample,
    pub split: String,
}

const MANIFEST: &str = "manifest.txt";

pub fn save_domain_dir(dir: &Path, entries: &[DatasetEntry]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for e in entries {
        e.sample.validate()?;
        let img_rel = format!("images/{}.png", e.sample.id);
        let (vmin, vmax) = write_image_png(&dir.join(&img_rel), &e.sample.image)?;
        let mask_rel = match &e.sample.mask {
            Some(mask) => {
                let rel = format!("masks/{}.png", e.sample.id);
                write_mask_png(&dir.join(&rel), mask)?;
                rel
            }
            None => "-".to_string(),
        };
        manifest.push_str(&format!(
            "id={} image={} mask={} domain={} split={} vmin={} vmax={}\n",
            e.sample.id, img_rel, mask_rel, e.sample.domain, e.split, vmin, vmax
        ));
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn load_domain_dir(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let kv: BTreeMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .collect();
        let get = |key: &str| -> Result<&str> {
            kv.get(key).copied().ok_or_else(|| {
                Error::Format(format!("manifest line {}: missing '{key}'", lineno + 1))
            })
        };
        let id = get("id")?.to_string();
        let vmin: f64 = parse_num(get("vmin")?, lineno)?;
        let vmax: f64 = parse_num(get("vmax")?, lineno)?;
        let image = read_image_png(&dir.join(get("image")?), vmin, vmax)?;
        let mask_rel = get("mask")?;
        let mask = if mask_rel == "-" {
            None
        } else {
            Some(read_mask_png(&dir.join(mask_rel))?)
        };
        let domain: Domain = get("domain")?.parse()?;
        entries.push(DatasetEntry {
            sample: ImageSample {
                id,
                image,
                mask,
                domain,
            },
            split: get("split")?.to_string(),
        });
    }
    Ok(entries)
}

fn parse_num(s: &str, lineno: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("manifest line {}: bad number '{s}'", lineno + 1)))
}

fn write_image_png(path: &Path, img: &Grid) -> Result<(f64, f64)> {
    let (h, w) = img.dim();
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.iter() {
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    if !vmin.is_finite() || !vmax.is_finite() {
        return Err(Error::Format(format!("non-finite image values in {path:?}")));
    }
    let range = if vmax > vmin { vmax - vmin } else { 1.0 };
    let data: Vec<u16> = img
        .iter()
        .map(|&v| (((v - vmin) / range) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(w as u32, h as u32, data)
        .expect("buffer matches dims");
    buf.save(path)?;
    Ok((vmin, vmax))
}

fn read_image_png(path: &Path, vmin: f64, vmax: f64) -> Result<Grid> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let range = if vmax > vmin { vmax - vmin } else { 1.0 };
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        vmin + img.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0 * range
    }))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u16> = mask.iter().map(|&v| if v > 0 { 65535 } else { 0 }).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(w as u32, h as u32, data)
        .expect("buffer matches dims");
    buf.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        (img.get_pixel(j as u32, i as u32).0[0] >= 32768) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, DomainConfig};

    #[test]
    fn dataset_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_domain(
            &DomainConfig {
                image_size: 32,
                ..DomainConfig::default()
            },
            3,
        )
        .unwrap();
        let entries: Vec<DatasetEntry> = samples
            .iter()
            .map(|s| DatasetEntry {
                sample: s.clone(),
                split: "train".to_string(),
            })
            .collect();
        save_domain_dir(dir.path(), &entries).unwrap();
        let loaded = load_domain_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in entries.iter().zip(loaded.iter()) {
            assert_eq!(orig.sample.id, back.sample.id);
            assert_eq!(orig.split, back.split);
            assert_eq!(orig.sample.mask, back.sample.mask);
            // images survive 16-bit quantization to ~1e-4 of their range
            let diff = (&orig.sample.image - &back.sample.image)
                .iter()
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            assert!(diff < 1e-4, "max quantization error {diff}");
        }
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_domain(
            &DomainConfig {
                image_size: 16,
                ..DomainConfig::default()
            },
            2,
        )
        .unwrap();
        let entries: Vec<DatasetEntry> = samples
            .into_iter()
            .map(|sample| DatasetEntry {
                sample,
                split: "pool".to_string(),
            })
            .collect();
        save_domain_dir(dir.path(), &entries).unwrap();
        let a = load_domain_dir(dir.path()).unwrap();
        let b = load_domain_dir(dir.path()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.sample.image, y.sample.image);
        }
    }
}

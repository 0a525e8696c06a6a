//! Image and CSV writers for localization maps and seed maps.
//!
//! Localization maps become 8-bit grayscale PGM files (score x 255) and CSV.
//! Seed maps become index PGM files (0 background, `c + 1` class `c`, 255
//! ignore) and colour PPM previews using the usual VOC palette, with ignore
//! drawn in the VOC boundary colour (224, 224, 192).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::cam::{LocalizationMap, SeedLabel, SeedMap};
use crate::error::Result;
use crate::synthetic::write_index_pgm;

pub const IGNORE_COLOR: [u8; 3] = [224, 224, 192];

/// VOC colour for label index `i` (bit-interleaved palette).
pub fn palette(i: u8) -> [u8; 3] {
    if i == SeedLabel::IGNORE_BYTE {
        return IGNORE_COLOR;
    }
    let mut rgb = [0u8; 3];
    let mut c = i;
    for shift in (0..8).rev() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

pub fn map_to_gray(map: &LocalizationMap) -> GrayImage {
    let (h, w) = (map.height(), map.width());
    let scale = if map.normalized { 1.0 } else { 1.0 / map.scores.max().max(f64::MIN_POSITIVE) };
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.scores.data()[y as usize * w + x as usize] * scale;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn write_map_pgm(path: &Path, map: &LocalizationMap) -> Result<()> {
    map_to_gray(map).save(path)?;
    Ok(())
}

pub fn write_map_csv(path: &Path, map: &LocalizationMap) -> Result<()> {
    map.scores.write_csv(BufWriter::new(File::create(path)?))
}

pub fn write_seed_pgm(path: &Path, seeds: &SeedMap) -> Result<()> {
    write_index_pgm(path, seeds.width(), seeds.height(), &seeds.to_bytes())
}

pub fn write_seed_ppm(path: &Path, seeds: &SeedMap) -> Result<()> {
    let w = seeds.width();
    let bytes = seeds.to_bytes();
    RgbImage::from_fn(w as u32, seeds.height() as u32, |x, y| {
        Rgb(palette(bytes[y as usize * w + x as usize]))
    })
    .save(path)?;
    Ok(())
}

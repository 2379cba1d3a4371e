//! File formats: 8-bit PNG at the boundary, plus the `CDRLMAP1` error-map
//! container.
//!
//! Error-map layout: 8-byte magic `CDRLMAP1`, u32-le height, u32-le width,
//! then height×width float32-le row-major values. Round-trips are bit-exact.

use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, ValueSpace};
use image::DynamicImage;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAP_MAGIC: &[u8; 8] = b"CDRLMAP1";

/// Loads an 8-bit PNG into the requested value space.
///
/// Grayscale inputs are replicated to 3 channels so every image entering the
/// models has one channel count. Unit mapping is v/255; model is 2·(v/255)−1.
pub fn load_image(path: &Path, target_space: ValueSpace) -> Result<ImageGrid> {
    if target_space == ValueSpace::Nonneg {
        return Err(CdrlError::Param(
            "images load into unit or model space".into(),
        ));
    }
    if !path.exists() {
        return Err(CdrlError::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h, raw) = match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let px = buf.into_raw();
            let mut planar = Vec::with_capacity(w * h * 3);
            for _ in 0..3 {
                planar.extend(px.iter().copied());
            }
            (w, h, planar)
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let px = buf.into_raw();
            let mut planar = vec![0u8; w * h * 3];
            for i in 0..w * h {
                for c in 0..3 {
                    planar[c * w * h + i] = px[i * 3 + c];
                }
            }
            (w, h, planar)
        }
        other => {
            return Err(CdrlError::Format(format!(
                "unsupported PNG pixel type {:?} in {} (need 8-bit gray or RGB)",
                other.color(),
                path.display()
            )));
        }
    };
    let data: Vec<f32> = match target_space {
        ValueSpace::Unit => raw.iter().map(|&v| v as f32 / 255.0).collect(),
        ValueSpace::Model => raw.iter().map(|&v| 2.0 * (v as f32 / 255.0) - 1.0).collect(),
        ValueSpace::Nonneg => unreachable!(),
    };
    ImageGrid::new(h, w, 3, target_space, data)
}

/// Loads a single-channel mask PNG with values {0, 255} mapped to {0, 1}.
pub fn load_mask(path: &Path) -> Result<ImageGrid> {
    if !path.exists() {
        return Err(CdrlError::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let buf = match img {
        DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(CdrlError::Format(format!(
                "mask must be 8-bit grayscale, got {:?} in {}",
                other.color(),
                path.display()
            )));
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &v in buf.as_raw() {
        match v {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(CdrlError::Format(format!(
                    "mask value {other} is not in {{0, 255}} in {}",
                    path.display()
                )));
            }
        }
    }
    ImageGrid::new(h, w, 1, ValueSpace::Unit, data)
}

/// Saves a unit-space grid as an 8-bit PNG (rounded v·255).
pub fn save_image(grid: &ImageGrid, path: &Path) -> Result<()> {
    if grid.space() != ValueSpace::Unit {
        return Err(CdrlError::Shape("save_image expects unit space".into()));
    }
    let (h, w) = (grid.height(), grid.width());
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match grid.channels() {
        1 => {
            let raw: Vec<u8> = grid.data().iter().map(|&v| quant(v)).collect();
            let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| CdrlError::Format("buffer size mismatch".into()))?;
            buf.save(path)?;
        }
        3 => {
            let mut raw = vec![0u8; w * h * 3];
            for i in 0..w * h {
                for c in 0..3 {
                    raw[i * 3 + c] = quant(grid.data()[c * w * h + i]);
                }
            }
            let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| CdrlError::Format("buffer size mismatch".into()))?;
            buf.save(path)?;
        }
        _ => return Err(CdrlError::Shape("PNG output needs 1 or 3 channels".into())),
    }
    Ok(())
}

/// Saves a binary mask as a {0, 255} grayscale PNG.
pub fn save_mask(mask: &ImageGrid, path: &Path) -> Result<()> {
    if mask.channels() != 1 || !mask.is_binary() {
        return Err(CdrlError::Format("mask must be single-channel binary".into()));
    }
    let raw: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 255 } else { 0 })
        .collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| CdrlError::Format("buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Writes a nonneg single-channel grid in the `CDRLMAP1` format.
pub fn write_error_map(map: &ImageGrid, path: &Path) -> Result<()> {
    if map.channels() != 1 || map.space() != ValueSpace::Nonneg {
        return Err(CdrlError::Format(
            "error map must be single-channel nonneg".into(),
        ));
    }
    if map.height() == 0 || map.width() == 0 {
        return Err(CdrlError::Format("degenerate 0-extent map".into()));
    }
    let mut out = Vec::with_capacity(16 + map.data().len() * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_error_map(path: &Path) -> Result<ImageGrid> {
    if !path.exists() {
        return Err(CdrlError::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
        return Err(CdrlError::Format(format!(
            "bad or missing CDRLMAP1 magic in {}",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + h * w * 4;
    if bytes.len() != need {
        return Err(CdrlError::Format(format!(
            "truncated payload: {} bytes, expected {need}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let off = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    ImageGrid::new(h, w, 1, ValueSpace::Nonneg, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_round_trip_and_affine_endpoints() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let buf = image::GrayImage::from_fn(2, 2, |x, y| image::Luma([[0u8, 255, 128, 7][(y * 2 + x) as usize]]));
        buf.save(&path).unwrap();

        let unit = load_image(&path, ValueSpace::Unit).unwrap();
        assert_eq!(unit.channels(), 3);
        assert_eq!(unit.get(0, 0, 0), 0.0);
        assert_eq!(unit.get(0, 0, 1), 1.0);
        // 128 → 128/255 in unit, 2·(128/255)−1 in model.
        assert!((unit.get(0, 1, 0) - 128.0 / 255.0).abs() < 1e-7);
        // Gray replicated across channels.
        assert_eq!(unit.get(1, 1, 0), unit.get(0, 1, 0));

        let model = load_image(&path, ValueSpace::Model).unwrap();
        assert_eq!(model.get(0, 0, 0), -1.0);
        assert_eq!(model.get(0, 0, 1), 1.0);
        assert!((model.get(0, 1, 0) - (2.0 * (128.0 / 255.0) - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_image(Path::new("/nonexistent/x.png"), ValueSpace::Unit).unwrap_err();
        assert!(matches!(err, CdrlError::NotFound(_)));
    }

    #[test]
    fn mask_round_trip_and_strictness() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = ImageGrid::new(1, 2, 1, ValueSpace::Unit, vec![0.0, 1.0]).unwrap();
        save_mask(&mask, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.data(), mask.data());

        let bad = dir.path().join("bad.png");
        image::GrayImage::from_pixel(1, 1, image::Luma([17])).save(&bad).unwrap();
        assert!(matches!(load_mask(&bad), Err(CdrlError::Format(_))));
    }

    #[test]
    fn error_map_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cdm");
        let map = ImageGrid::splat(4, 4, 1, ValueSpace::Nonneg, 0.25);
        write_error_map(&map, &path).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let back = read_error_map(&path).unwrap();
        assert_eq!(back.data(), map.data());
        write_error_map(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn error_map_file_length_matches_definition() {
        // 1×1 map: 8 magic + 4 + 4 header + 4 payload bytes.
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.cdm");
        let map = ImageGrid::splat(1, 1, 1, ValueSpace::Nonneg, 3.5);
        write_error_map(&map, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 20);
        assert_eq!(read_error_map(&path).unwrap().get(0, 0, 0), 3.5);
    }

    #[test]
    fn error_map_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cdm");
        let map = ImageGrid::splat(2, 2, 1, ValueSpace::Nonneg, 1.0);
        write_error_map(&map, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_error_map(&path), Err(CdrlError::Format(_))));

        write_error_map(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_error_map(&path), Err(CdrlError::Format(_))));
    }
}

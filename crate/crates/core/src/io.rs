//! File I/O: PNG (8-bit gray/RGB), binary PGM/PPM (8/16-bit), and the
//! `CQCDFLD1` displacement-field format.
//!
//! Intensities are scaled to [0, 1] on load and quantized on save. The field
//! format is little-endian: magic `CQCDFLD1`, u32 height, u32 width, then a
//! row-major f32 dx plane followed by the f32 dy plane.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;
use crate::imaging::Image;

const FIELD_MAGIC: &[u8; 8] = b"CQCDFLD1";

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| CqcdError::UnsupportedFormat(format!("{} has no extension", path.display())))
}

/// Loads a PNG/PGM/PPM image, scaling samples to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match extension(path)?.as_str() {
        "png" => load_png(path),
        "pgm" | "ppm" => load_pnm(path),
        other => Err(CqcdError::UnsupportedFormat(format!(
            "unsupported image extension .{other}"
        ))),
    }
}

/// Saves 8-bit output chosen by extension: `.png` (gray or RGB), `.pgm`
/// (grayscale), `.ppm` (RGB). Values are clamped then quantized.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path)?.as_str() {
        "png" => save_png(img, path),
        "pgm" | "ppm" => save_pnm(img, path, 255),
        other => Err(CqcdError::UnsupportedFormat(format!(
            "unsupported image extension .{other}"
        ))),
    }
}

/// Saves 16-bit binary PGM/PPM.
pub fn save_image_16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path)?.as_str() {
        "pgm" | "ppm" => save_pnm(img, path, 65535),
        other => Err(CqcdError::UnsupportedFormat(format!(
            "16-bit output requires .pgm or .ppm, got .{other}"
        ))),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    use image::DynamicImage::*;
    let data = match dynamic {
        ImageLuma8(buf) => {
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf[(x as u32, y as u32)][0] as f64 / 255.0)
        }
        ImageLuma16(buf) => Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            buf[(x as u32, y as u32)][0] as f64 / 65535.0
        }),
        other => {
            let rgb = other.into_rgb8();
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb[(x as u32, y as u32)][c] as f64 / 255.0)
        }
    };
    Image::new(data)
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.dim();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quant(img.get(x as usize, y as usize, 0))])
            });
            buf.save(path)?;
        }
        _ => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    quant(img.get(x as usize, y as usize, 0)),
                    quant(img.get(x as usize, y as usize, 1)),
                    quant(img.get(x as usize, y as usize, 2)),
                ])
            });
            buf.save(path)?;
        }
    }
    Ok(())
}

fn save_pnm(img: &Image, path: &Path, maxval: u32) -> Result<()> {
    let (h, w, c) = img.dim();
    let ext = extension(path)?;
    let (magic, want_channels) = match ext.as_str() {
        "pgm" => ("P5", 1),
        _ => ("P6", 3),
    };
    if c != want_channels {
        return Err(CqcdError::InvalidArgument(format!(
            ".{ext} expects {want_channels} channel(s), image has {c}"
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{w} {h}\n{maxval}\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.get(x, y, ch).clamp(0.0, 1.0) * maxval as f64;
                if maxval > 255 {
                    // Netpbm stores 16-bit samples most significant byte first.
                    out.write_all(&(v.round() as u16).to_be_bytes())?;
                } else {
                    out.write_all(&[v.round() as u8])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn load_pnm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |reason: &str| CqcdError::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(CqcdError::UnsupportedFormat(format!("PNM magic {magic}"))),
    };
    let w: usize = next_token(&bytes)?.parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = next_token(&bytes)?.parse().map_err(|_| corrupt("bad height"))?;
    let maxval: u32 = next_token(&bytes)?.parse().map_err(|_| corrupt("bad maxval"))?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt("bad header values"));
    }
    pos += 1; // single whitespace byte separates header and raster
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = h * w * channels * bytes_per_sample;
    if bytes.len() < pos + expected {
        return Err(corrupt("truncated raster"));
    }
    let raster = &bytes[pos..pos + expected];
    let scale = maxval as f64;
    let data = Array3::from_shape_fn((h, w, channels), |(y, x, c)| {
        let i = (y * w + x) * channels + c;
        if bytes_per_sample == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64 / scale
        } else {
            raster[i] as f64 / scale
        }
    });
    Image::new(data)
}

/// Writes a displacement field in the `CQCDFLD1` binary layout.
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(FIELD_MAGIC)?;
    let (h, w) = field.dim();
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    for plane in [&field.dx, &field.dy] {
        for &v in plane.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a `CQCDFLD1` displacement field.
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let corrupt = |reason: &str| CqcdError::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| corrupt("short file"))?;
    if &magic != FIELD_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let h = input.read_u32::<LittleEndian>()? as usize;
    let w = input.read_u32::<LittleEndian>()? as usize;
    if h == 0 || w == 0 || h * w > (1 << 30) {
        return Err(corrupt("implausible extents"));
    }
    let mut read_plane = || -> Result<Array2<f64>> {
        let mut plane = Array2::zeros((h, w));
        for v in plane.iter_mut() {
            *v = input.read_f32::<LittleEndian>().map_err(|_| corrupt("truncated plane"))? as f64;
        }
        Ok(plane)
    };
    let dx = read_plane()?;
    let dy = read_plane()?;
    DisplacementField::new(dx, dy)
}

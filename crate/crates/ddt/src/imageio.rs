//! Image decoding to normalized tensors and PNG output with embedded
//! artifact metadata.

use std::io::Cursor;
use std::path::Path;

use ddt_core::image::ImageTensor;
use image::imageops::FilterType;

use crate::config::ArtifactMeta;
use crate::error::{DdtError, Result};
use crate::fsutil::{read_bytes, write_atomic};

pub const HASH_KEY: &str = "ddt-config-hash";
pub const SEED_KEY: &str = "ddt-seed";

/// Decodes `path`, center-crops it to a square, resizes to
/// `resolution × resolution` and maps bytes to [−1, 1].
pub fn load_image(path: &Path, resolution: usize, channels: usize) -> Result<ImageTensor> {
    let bad = |reason: String| DdtError::Image { path: path.into(), reason };
    let bytes = read_bytes(path)?;
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| bad(e.to_string()))?
        .decode()
        .map_err(|e| bad(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    if side == 0 {
        return Err(bad("image is empty".into()));
    }
    let mut img = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let res = u32::try_from(resolution).map_err(|_| DdtError::config("tokenizer.resolution", "too large"))?;
    if side != res {
        img = img.resize_exact(res, res, FilterType::Triangle);
    }
    let raw = match channels {
        3 => img.to_rgb8().into_raw(),
        1 => img.to_luma8().into_raw(),
        c => return Err(DdtError::config("tokenizer.channels", format!("{c} channels cannot be read from image files"))),
    };
    Ok(ImageTensor::from_interleaved_u8(channels, resolution, resolution, &raw)?)
}

/// Writes an 8-bit PNG carrying the config hash, seed and `extra` text
/// entries.
pub fn save_png(image: &ImageTensor, path: &Path, meta: &ArtifactMeta, extra: &[(&str, String)]) -> Result<()> {
    let (c, h, w) = image.shape();
    let color = match c {
        3 => png::ColorType::Rgb,
        1 => png::ColorType::Grayscale,
        _ => return Err(DdtError::config("tokenizer.channels", format!("{c} channels cannot be written as PNG"))),
    };
    let encode_err = |e: png::EncodingError| DdtError::Image { path: path.into(), reason: e.to_string() };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(HASH_KEY.into(), meta.config_hash.clone()).map_err(encode_err)?;
        enc.add_text_chunk(SEED_KEY.into(), meta.seed.to_string()).map_err(encode_err)?;
        for (k, v) in extra {
            enc.add_text_chunk((*k).into(), v.clone()).map_err(encode_err)?;
        }
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(&image.to_interleaved_u8()).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
    }
    write_atomic(path, &buf)
}

/// Text entries of a PNG file.
pub fn png_text(path: &Path) -> Result<Vec<(String, String)>> {
    let bytes = read_bytes(path)?;
    let reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| DdtError::Image { path: path.into(), reason: e.to_string() })?;
    Ok(reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect())
}

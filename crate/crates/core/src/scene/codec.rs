//! On-disk codecs: 8-bit RGB PNG for images and FMAP for float maps.
//!
//! FMAP layout: magic `FMAP`, `u32` height, `u32` width (little-endian),
//! then `height·width` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use super::DatasetError;
use crate::tensor::Tensor;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";

pub fn encode_fmap(map: &Tensor) -> Vec<u8> {
    let s = map.shape();
    assert_eq!(s.len(), 2, "FMAP holds 2-D maps");
    let mut out = Vec::with_capacity(12 + 4 * map.len());
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&(s[0] as u32).to_le_bytes());
    out.extend_from_slice(&(s[1] as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8], path: &Path) -> Result<Tensor, DatasetError> {
    let corrupt = |reason: &str| DatasetError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 12 || &bytes[..4] != FMAP_MAGIC {
        return Err(corrupt("missing FMAP header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(corrupt(&format!("expected {} payload bytes for {h}x{w}", 4 * h * w)));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new([h, w], data).expect("size checked"))
}

pub fn write_fmap(path: &Path, map: &Tensor) -> Result<Vec<u8>, DatasetError> {
    let bytes = encode_fmap(map);
    fs::write(path, &bytes).map_err(|e| DatasetError::io(path, e))?;
    Ok(bytes)
}

pub fn read_fmap(path: &Path) -> Result<Tensor, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_fmap(&bytes, path)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image (or `[1, H, W]`, replicated) as PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>, DatasetError> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(d[ch.min(c - 1) * h * w + y as usize * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    });
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DatasetError::Image { path: Default::default(), reason: e.to_string() })?;
    Ok(bytes)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor, DatasetError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = p[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("rgb shape"))
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<Vec<u8>, DatasetError> {
    let bytes = encode_png(image).map_err(|e| e.at(path))?;
    fs::write(path, &bytes).map_err(|e| DatasetError::io(path, e))?;
    Ok(bytes)
}

pub fn read_png(path: &Path) -> Result<Tensor, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_png(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn fmap_is_bit_exact_for_f32_values() {
        let m = Tensor::from_fn([3, 5], |i| (i as f32 * 1.37 + 2.0) as f64);
        let back = decode_fmap(&encode_fmap(&m), &PathBuf::from("x")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fmap_header_layout() {
        let bytes = encode_fmap(&Tensor::zeros([2, 7]));
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 7);
        assert_eq!(bytes.len(), 12 + 4 * 14);
    }

    #[test]
    fn truncated_fmap_is_corrupt() {
        let mut bytes = encode_fmap(&Tensor::zeros([2, 2]));
        bytes.pop();
        assert!(matches!(decode_fmap(&bytes, &PathBuf::from("d.fmap")), Err(DatasetError::Corrupt { .. })));
    }

    #[test]
    fn png_quantizes_to_eight_bits() {
        let img = Tensor::from_fn([3, 4, 5], |i| (i as f64 * 0.013) % 1.0);
        let back = decode_png(&encode_png(&img).unwrap(), &PathBuf::from("x.png")).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }
}

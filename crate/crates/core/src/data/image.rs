//! PPM (P6) codec, bilinear resizing and per-channel normalization.
//! Images are (1, 3, H, W) tensors with values in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Decodes a binary P6 image with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::format(format!("not a binary PPM (magic '{}')", magic)));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::format(format!("invalid PPM {} '{}'", what, t)))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PPM maxval {}", maxval)));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("PPM with zero extent"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err(Error::format(format!(
            "truncated PPM payload: need {} bytes, have {}",
            need,
            bytes.len().saturating_sub(start)
        )));
    }
    let raster = &bytes[start..start + need];
    let mut data = vec![0f32; need];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Encodes a (1, 3, H, W) image, clamping to [0, 1] and rounding.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4("encode_ppm")?;
    if n != 1 || c != 3 {
        return Err(Error::shape("encode_ppm", "(1,3,h,w)", format!("{:?}", img.shape())));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::invalid(format!("{}: {}", path.display(), e)))?;
    decode_ppm(&bytes).map_err(|e| Error::format(format!("{}: {}", path.display(), e)))
}

pub fn save_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Source coordinate and weights for one output index (half-pixel centers).
fn taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Bilinear resize of an (n, c, H, W) tensor, align-corners false.
pub fn resize_bilinear(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|q| taps(q, w, out_w)).collect();
    let d = x.data();
    let mut out = vec![0f32; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (q, &(x0, x1, lx)) in cols.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[y * out_w + q] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

/// (x − mean[c]) / std[c] per channel of an (n, 3, H, W) tensor.
pub fn normalize(x: &Tensor<f32>, mean: &[f32; 3], std: &[f32; 3]) -> Result<Tensor<f32>> {
    let (_, c, h, w) = x.dims4("normalize")?;
    if c != 3 {
        return Err(Error::shape("normalize", "3 channels", format!("{}", c)));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / (h * w)) % 3;
        *v = (*v - mean[ch]) / std[ch];
    }
    Ok(out)
}

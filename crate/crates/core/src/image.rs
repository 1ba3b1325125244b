//! 8-bit PNG / binary PPM images, mask PNGs and raw field dumps.
//!
//! Every writer goes through [`write_atomic`]: a temp file next to the
//! target, renamed into place once complete.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| image_err(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// `v/255` for each 8-bit sample of an interleaved `H×W×3` buffer.
fn from_rgb8(rgb: &[u8], h: usize, w: usize) -> Tensor {
    let hw = h * w;
    Tensor::from_fn([3, h, w], |i| rgb[(i % hw) * 3 + i / hw] as f32 / 255.0)
}

/// Round-half-up quantization of `[0, 1]` values.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

fn to_rgb8(t: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("image tensors have 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut out = vec![0u8; hw * 3];
    for ch in 0..3 {
        for (p, &v) in t.plane(ch).iter().enumerate() {
            out[p * 3 + ch] = quantize(v);
        }
    }
    Ok((out, h, w))
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Load an 8-bit RGB PNG (RGBA drops alpha, gray is replicated) or a P6 PPM
/// as `3×H×W` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        let (rgb, h, w) = decode_ppm(&bytes).map_err(|m| image_err(path, m))?;
        return Ok(from_rgb8(&rgb, h, w));
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let (rgb, h, w) = decode_png(&bytes).map_err(|m| image_err(path, m))?;
        return Ok(from_rgb8(&rgb, h, w));
    }
    Err(image_err(path, "unsupported image format (expected PNG or binary PPM)"))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), String> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette image".into()),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * channels].chunks(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok((rgb, h, w))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PPM header")?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PPM header".into());
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(format!("truncated PPM data: {} of {need} bytes", bytes.len() - pos));
    }
    Ok((bytes[pos..pos + need].to_vec(), h, w))
}

pub fn encode_png(pixels: &[u8], h: usize, w: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::arg(e.to_string()))?;
        wr.write_image_data(pixels).map_err(|e| Error::arg(e.to_string()))?;
    }
    Ok(out)
}

/// Save a `3×H×W` tensor; `.ppm` paths get P6, everything else PNG.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (rgb, h, w) = to_rgb8(t)?;
    let bytes = if is_ppm(path) {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(&rgb);
        b
    } else {
        encode_png(&rgb, h, w, png::ColorType::Rgb)?
    };
    write_atomic(path, &bytes)
}

/// Save an `H×W` mask as an 8-bit grayscale PNG (values scaled by 255).
pub fn save_mask_png(mask: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.hw()?;
    let px: Vec<u8> = mask.data().iter().map(|&v| quantize(v)).collect();
    write_atomic(path.as_ref(), &encode_png(&px, h, w, png::ColorType::Grayscale)?)
}

#[derive(Serialize)]
struct FieldHeader<'a> {
    dims: &'a [usize],
    dtype: &'static str,
    layout: &'a str,
}

/// Dump a tensor as raw little-endian f32 plus a `<path>.json` sidecar
/// describing dims and layout.
pub fn export_field(t: &Tensor, layout: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &raw)?;
    let header = FieldHeader { dims: t.dims(), dtype: "f32le", layout };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    write_atomic(Path::new(&side), &json)
}

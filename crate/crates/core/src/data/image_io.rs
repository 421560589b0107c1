use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// Decode a PNG into `[C, H, W]` with values in `[0, 1]`. Gray images give one
/// channel, colour images three; alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let decode_err = |m: String| Error::Decode {
        path: path.to_path_buf(),
        message: m,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_ch, out_ch) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(decode_err(format!("unsupported colour type {other:?}"))),
    };
    let mut data = vec![0.0f32; out_ch * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..out_ch {
                data[(c * h + y) * w + x] = row[x * src_ch + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![out_ch, h, w], data)
}

/// Encode a `[1 | 3, H, W]` image as an 8-bit PNG; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || !matches!(s[0], 1 | 3) {
        return Err(Error::Shape(format!("write_png needs [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut bytes = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + y) * w + x];
                bytes[(y * w + x) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

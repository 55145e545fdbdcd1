//! Raster helpers on `[C, H, W]` tensors: cropping, bilinear resampling and
//! PGM/PNG export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use tensorcore::{Float, Tensor};

use crate::error::{contract, Error, Result};

pub fn dims<T: Float>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(contract(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Rectangular window `[top, top+height) × [left, left+width)` of every channel.
pub fn crop<T: Float>(img: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img)?;
    if top + height > h || left + width > w || height == 0 || width == 0 {
        return Err(contract(format!("crop {height}x{width} at ({top}, {left}) outside {h}x{w}")));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&img.data()[row + left..row + left + width]);
        }
    }
    Ok(Tensor::new(vec![c, height, width], out)?)
}

/// Source coordinate and interpolation weights along one axis, half-pixel
/// centres, clamped at the borders.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `height × width`. Equal sizes return the input.
pub fn resize_bilinear<T: Float>(img: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img)?;
    if height == 0 || width == 0 {
        return Err(contract("resize target must be non-empty"));
    }
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let ty = taps(height, h);
    let tx = taps(width, w);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::lit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(Tensor::new(vec![c, height, width], out)?)
}

fn to_bytes<T: Float>(img: &Tensor<T>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (c, h, w) = dims(img)?;
    if c != 1 && c != 3 {
        return Err(contract(format!("only 1- or 3-channel images can be exported, got {c}")));
    }
    let mut bytes = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let v = img.data()[ch * h * w + i].as_f64().clamp(0.0, 1.0);
            bytes[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    Ok((c, h, w, bytes))
}

/// Binary PGM (one channel) or PPM (three channels), values clamped to [0, 1].
pub fn write_pnm<T: Float>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let (c, h, w, bytes) = to_bytes(img)?;
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" })?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_png<T: Float>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let (c, h, w, bytes) = to_bytes(img)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Read an 8- or 16-bit grayscale/RGB PNG into `[C, H, W]` values in [0, 1].
/// Alpha channels are dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Format("indexed PNGs are not supported".into())),
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f32 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32 / 65535.0
        } else {
            buf[i] as f32 / 255.0
        }
    };
    if !wide && info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let mut data = vec![0f32; keep * h * w];
    for p in 0..h * w {
        for ch in 0..keep {
            data[ch * h * w + p] = sample(p * stored + ch);
        }
    }
    Ok(Tensor::new(vec![keep, h, w], data)?)
}

/// Tile equally sized images into a grid with `cols` columns and a one
/// pixel gap.
pub fn montage<T: Float>(images: &[Tensor<T>], cols: usize) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| contract("montage of no images"))?;
    let (c, h, w) = dims(first)?;
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (oh, ow) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for (k, img) in images.iter().enumerate() {
        if dims(img)? != (c, h, w) {
            return Err(contract("montage images differ in shape"));
        }
        let (r0, c0) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * oh + r0 + y) * ow + c0 + x] = img.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

//! PNG reading and writing for frames (RGB) and label masks (indexed).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask palette: background, first vessel class, second vessel class.
pub const PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [0, 200, 0], [0, 80, 255]];

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Interleaved 8-bit RGB of any image the `image` crate decodes.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

/// `[3, H, W]` in `[0, 1]` from interleaved RGB bytes.
pub fn rgb_to_tensor(height: usize, width: usize, rgb: &[u8]) -> Tensor {
    let n = height * width;
    Tensor::from_fn(&[3, height, width], |i| rgb[(i % n) * 3 + i / n] as f64 / 255.0)
}

/// RGB frame as `[3, H, W]` in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let (h, w, raw) = read_rgb(path)?;
    Ok(rgb_to_tensor(h, w, &raw))
}

/// Quantize a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB bytes.
pub fn frame_bytes(frame: &Tensor) -> (usize, usize, Vec<u8>) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut out = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            out[p * 3 + c] = (frame.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    (h, w, out)
}

pub fn write_rgb(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w, bytes) = frame_bytes(frame);
    write_rgb(path, h, w, &bytes)
}

/// 8-bit indexed mask with [`PALETTE`].
pub fn write_mask(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(labels).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// 8-bit grayscale image.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(values).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Raw values of an 8-bit indexed or grayscale image.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err(path, "mask too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let ok = matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale) && info.bit_depth == png::BitDepth::Eight;
    if !ok {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("mask must be 8-bit indexed or grayscale, found {:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((h, w, buf))
}

/// Nearest-neighbour label resize.
pub fn resize_labels(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    (0..out_h * out_w)
        .map(|i| {
            let (y, x) = (i / out_w, i % out_w);
            let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64) as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64) as usize;
            labels[sy.min(h - 1) * w + sx.min(w - 1)]
        })
        .collect()
}

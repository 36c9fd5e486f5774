//! 8-bit RGB PNG <-> `[3, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp to `[0, 1]`, scale to 255 and round half away from zero.
pub fn quantize_u8<T: Scalar>(v: T) -> u8 {
    let x = v.as_f64();
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * 255.0).round() as u8
}

pub fn dequantize_u8<T: Scalar>(v: u8) -> T {
    T::lit(v as f64 / 255.0)
}

/// Snaps every value onto the 8-bit grid, as a save/load round trip would.
pub fn quantize_image<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| dequantize_u8(quantize_u8(v)))
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(format!("not a readable PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(format!("PNG frame: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        bail!(Decode, "expected 8-bit PNG, got {:?}", info.bit_depth);
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!(Decode, "expected RGB PNG, got {:?}", other),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        let row = &pixels[y * info.line_size..y * info.line_size + w * channels];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = dequantize_u8(row[x * channels + c]);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [c, h, w] = img.dims3()?;
    if c != 3 {
        bail!(Dimension, "PNG export needs 3 channels, got {c}");
    }
    let mut rgb = vec![0u8; 3 * h * w];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                rgb[(y * w + x) * 3 + ch] = quantize_u8(img.data()[(ch * h + y) * w + x]);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(File::open(path)?), &mut bytes)?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_image<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize_u8(0.5f32), 128);
        assert_eq!(quantize_u8(0.5f64), 128);
        assert_eq!(quantize_u8(-0.2f32), 0);
        assert_eq!(quantize_u8(1.7f32), 255);
        assert_eq!(quantize_u8(f32::NAN), 0);
    }

    #[test]
    fn exact_round_trip() {
        let img = Tensor::<f32>::from_fn(&[3, 5, 7], |i| dequantize_u8((i * 37 % 256) as u8));
        let back: Tensor<f32> = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn garbage_is_a_decode_error() {
        assert!(matches!(decode_png::<f32>(b"not a png"), Err(Error::Decode(_))));
    }

    #[test]
    fn grayscale_is_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 1, 2, 3]).unwrap();
        }
        assert!(matches!(decode_png::<f32>(&out), Err(Error::Decode(_))));
    }
}

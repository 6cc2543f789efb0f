use super::{MelSpectrogram, SPEC_SIZE};
use crate::error::{Error, Result};

/// 8-bit grayscale PNG with the lowest mel band on the bottom row.
pub fn render_png(spec: &MelSpectrogram) -> Vec<u8> {
    let mut pixels = Vec::with_capacity(SPEC_SIZE * SPEC_SIZE);
    for y in 0..SPEC_SIZE {
        let row = SPEC_SIZE - 1 - y;
        for c in 0..SPEC_SIZE {
            let v = f64::from(spec.get(row, c)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, SPEC_SIZE as u32, SPEC_SIZE as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&pixels).expect("in-memory png data");
    }
    out
}

/// Decodes an 8-bit grayscale PNG into `(width, height, pixels)`, top row first.
pub fn decode_png_gray(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "png is {:?}/{:?}, expected 8-bit grayscale",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}

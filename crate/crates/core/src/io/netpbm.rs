//! Binary netpbm images: P6 colour with maxval 255 and P5 grayscale label
//! maps. Label maps store the class id directly as the gray level.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        let what = ["width", "height", "maxval"][k];
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(&b) if is_space(b) => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse(pos, format!("header ends before {what}"))),
            }
        }
        if !saw_space {
            return Err(Error::parse(
                pos,
                format!("expected whitespace before {what}"),
            ));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, format!("expected a decimal {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} `{text}` is out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(pos, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(Error::parse(
            pos,
            format!("unsupported maxval {maxval}, expected 255"),
        ));
    }
    match bytes.get(pos) {
        Some(&b) if is_space(b) => Ok(Header {
            width,
            height,
            data_start: pos + 1,
        }),
        _ => Err(Error::parse(
            pos,
            "expected a single whitespace byte after maxval",
        )),
    }
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::parse(h.data_start, "image dimensions overflow"))?;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("payload has {have} bytes, expected {need}"),
        ));
    }
    if have > need {
        return Err(Error::parse(
            h.data_start + need,
            format!("{} trailing bytes", have - need),
        ));
    }
    Ok(&bytes[h.data_start..])
}

/// P6 to a `3×H×W` tensor scaled into `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut out = vec![0.0; 3 * plane];
    for (p, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h.height, h.width], out)
}

/// `3×H×W` tensor to P6; values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let pixels = payload(bytes, &h, 1)?.to_vec();
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        pixels,
    })
}

fn check_labels(labels: &[u32], width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || labels.len() != width * height {
        return Err(Error::shape(format!(
            "{} labels for a {width}x{height} map",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::invalid(format!(
            "class id {bad} does not fit a gray level"
        )));
    }
    Ok(())
}

/// Label map to P5, gray level = class id.
pub fn encode_label_pgm(labels: &[u32], width: usize, height: usize) -> Result<Vec<u8>> {
    check_labels(labels, width, height)?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

/// Colour of `class` in the bit-interleaved palette: bits of the class id
/// are spread over the top bits of R, G and B in turn.
pub fn palette_color(class: u32) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut id = class;
    for shift in (0..8).rev() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v |= (((id >> c) & 1) as u8) << shift;
        }
        id >>= 3;
    }
    rgb
}

pub fn encode_palette_ppm(labels: &[u32], width: usize, height: usize) -> Result<Vec<u8>> {
    check_labels(labels, width, height)?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&palette_color(l));
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_label_pgm(
    labels: &[u32],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    Ok(std::fs::write(
        path,
        encode_label_pgm(labels, width, height)?,
    )?)
}

pub fn write_palette_ppm(
    labels: &[u32],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    Ok(std::fs::write(
        path,
        encode_palette_ppm(labels, width, height)?,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(e: Error) -> usize {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6 1 1 255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fixture_with_comments() {
        let bytes = b"P6\n# made by hand\n2 # width\n1\n255\n\x00\x33\xff\x80\x00\x01";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        let want = [0.0, 128.0, 51.0, 0.0, 255.0, 1.0].map(|v| v / 255.0);
        assert_eq!(t.data(), &want);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert_eq!(offset(decode_ppm(b"P5 1 1 255\n\x00").unwrap_err()), 0);
        assert_eq!(offset(decode_ppm(b"P6 1 1 255\n\x00\x00").unwrap_err()), 13);
        assert_eq!(
            offset(decode_ppm(b"P6 1 1 255\n\x00\x00\x00\x07").unwrap_err()),
            14
        );
        assert_eq!(offset(decode_ppm(b"P6 1 x 255\n").unwrap_err()), 5);
        assert!(matches!(
            decode_ppm(b"P6 1 1 65535\n\x00\x00\x00"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6 0 1 255\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6 1 1 255"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P61 1 255\n\x00\x00\x00"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn label_round_trip() {
        let labels: Vec<u32> = (0..35).map(|i| (i * 37 % 151) as u32).collect();
        let img = decode_pgm(&encode_label_pgm(&labels, 7, 5).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (7, 5));
        assert_eq!(
            img.pixels.iter().map(|&p| u32::from(p)).collect::<Vec<_>>(),
            labels
        );
        assert!(encode_label_pgm(&[256], 1, 1).is_err());
        assert!(encode_label_pgm(&[0, 1], 1, 1).is_err());
    }

    #[test]
    fn image_round_trip_is_exact_on_byte_grid() {
        let data: Vec<f64> = (0..3 * 4 * 3)
            .map(|i| ((i * 29) % 256) as f64 / 255.0)
            .collect();
        let t = Tensor::from_vec(&[3, 4, 3], data).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn palette_is_distinct_and_fixed() {
        assert_eq!(palette_color(0), [0, 0, 0]);
        assert_eq!(palette_color(1), [128, 0, 0]);
        assert_eq!(palette_color(2), [0, 128, 0]);
        assert_eq!(palette_color(3), [128, 128, 0]);
        let colors: std::collections::HashSet<_> = (0..256).map(palette_color).collect();
        assert_eq!(colors.len(), 256);
        let ppm = encode_palette_ppm(&[1, 2], 2, 1).unwrap();
        assert_eq!(&ppm[ppm.len() - 6..], &[128, 0, 0, 0, 128, 0]);
    }
}

//! Binary PPM (P6, maxval 255) reading and writing.
//!
//! Files written here are canonical: `P6\n<w> <h>\n255\n` followed by the raw
//! RGB payload, so save -> load -> save reproduces the same bytes.

use crate::error::{Error, Result};
use crate::image::{quantize_sample, ImageTensor, CHANNELS};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::PpmParse { offset: self.pos, message: message.into() }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn header_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PpmParse { offset: start, message: format!("{what} out of range") })
    }
}

pub fn load_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(cur.err("unsupported magic"));
    }
    cur.pos = 2;
    let width = cur.header_uint("width")?;
    let height = cur.header_uint("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.header_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::PpmParse { offset: maxval_at, message: format!("unsupported maxval {maxval}") });
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected whitespace after maxval")),
    }
    let need =
        width.checked_mul(height).and_then(|n| n.checked_mul(CHANNELS)).ok_or_else(|| cur.err("image too large"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!("truncated payload: expected {need} bytes, found {}", payload.len())));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::new(height, width, data)
}

pub fn save_ppm(img: &ImageTensor) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.data().iter().map(|&v| quantize_sample(v)));
    out
}

pub fn read_ppm_file(path: &std::path::Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_ppm(&bytes)
}

pub fn write_ppm_file(path: &std::path::Path, img: &ImageTensor) -> Result<()> {
    std::fs::write(path, save_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn single_red_pixel() {
        let img = load_ppm(&ppm(1, 1, &[255, 0, 0])).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_scaling() {
        let img = load_ppm(&ppm(2, 1, &[0, 0, 0, 128, 128, 128])).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 1);
        assert_eq!(&img.data()[..3], &[0.0, 0.0, 0.0]);
        for v in &img.data()[3..] {
            assert_eq!(*v, 128.0 / 255.0);
        }
    }

    #[test]
    fn p5_rejected() {
        let err = load_ppm(b"P5\n1 1\n255\n\x00").unwrap_err();
        assert!(err.to_string().contains("unsupported magic"), "{err}");
        assert!(err.to_string().contains("byte 0"), "{err}");
    }

    #[test]
    fn non_255_maxval_rejected() {
        let err = load_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn truncated_payload_names_offset() {
        let err = load_ppm(&ppm(2, 2, &[1, 2, 3])).unwrap_err();
        match err {
            Error::PpmParse { offset, message } => {
                assert!(message.contains("truncated"));
                assert_eq!(offset, "P6\n2 2\n255\n".len() + 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_comments_and_whitespace() {
        let bytes = b"P6 # a comment\n  2\t# w\n1 255\n\x00\x00\x00\xff\xff\xff";
        let img = load_ppm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(&img.data()[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn save_red_pixel() {
        let img = ImageTensor::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let bytes = save_ppm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[0xFF, 0x00, 0x00]);
        assert_eq!(bytes, ppm(1, 1, &[255, 0, 0]));
    }

    #[test]
    fn half_rounds_up() {
        let img = ImageTensor::filled(1, 1, 0.5);
        assert_eq!(save_ppm(&img).last(), Some(&128));
    }

    #[test]
    fn every_byte_value_round_trips() {
        // Exhaustive oracle: all 256 levels survive load -> save unchanged.
        let px: Vec<u8> = (0..=255u8).flat_map(|b| [b, b, b]).collect();
        let bytes = ppm(256, 1, &px);
        let img = load_ppm(&bytes).unwrap();
        assert_eq!(save_ppm(&img), bytes);
        for (i, &b) in px.iter().enumerate() {
            assert_eq!(quantize_sample(b as f64 / 255.0), b, "level {i}");
        }
    }

    #[test]
    fn load_save_matches_quantize() {
        let img = ImageTensor::new(1, 2, vec![0.1, 0.2, 0.333, 0.5, 0.77, 0.999]).unwrap();
        let back = load_ppm(&save_ppm(&img)).unwrap();
        assert_eq!(back, img.quantized());
    }
}

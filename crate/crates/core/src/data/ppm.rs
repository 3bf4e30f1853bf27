//! Binary PPM (P6, maxval 255).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode `image[3, H, W]` with values in `[0, 1]`, rounding half up.
pub fn save_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Ppm(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Ppm(format!("pixel value {v} outside [0, 1]")));
            }
            out.push((v as f64 * 255.0 + 0.5).floor() as u8);
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ppm(format!("malformed header: bad {what}")))
    }
}

pub fn load_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Ppm("malformed header: missing P6 magic".into()));
    }
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Ppm(format!("unsupported maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Ppm(format!("empty image {w}x{h}")));
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Ppm("malformed header: no separator before pixel data".into()));
    }
    let payload = &bytes[hd.pos + 1..];
    let need = 3 * w * h;
    if payload.len() < need {
        return Err(Error::Ppm(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    let d = img.data_mut();
    for i in 0..h * w {
        for c in 0..3 {
            d[c * h * w + i] = payload[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn header_is_exact() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| i as f32 / 5.0);
        let bytes = save_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }

    #[test]
    fn round_trip_within_half_step() {
        let mut rng = Rng::new(4);
        let img = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let back = load_ppm(&save_ppm(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn round_half_up() {
        let img = Tensor::full(&[3, 1, 1], 0.5f32 / 255.0);
        assert_eq!(save_ppm(&img).unwrap()[11], 1);
    }

    #[test]
    fn white_pixel() {
        let img = load_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(load_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(load_ppm(b"P6\n1 x\n255\n\0\0\0").is_err());
        let err = load_ppm(b"P6\n2 2\n255\n\0\0\0").unwrap_err();
        assert!(err.to_string().contains("truncated"));
        assert!(load_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }
}

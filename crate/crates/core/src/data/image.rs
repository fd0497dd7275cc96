//! RGB images in `[0, 1]` and binary PPM / PNG I/O.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// `height × width × 3` image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    /// Error unless every value lies in `[0, 1]`.
    pub fn check_range(&self) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(&value) => Err(Error::PixelRange { value }),
            None => Ok(()),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, 3] => Image::new(h, w, t.data().to_vec()),
            _ => Err(Error::Dimension(format!("expected [H, W, 3], got {:?}", t.shape()))),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Image {
            height,
            width,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Binary P6 encoding, 8 bits per channel.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}, expected P6", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if max != 255 {
            return Err(format!("only 8-bit PPM supported, maxval {max}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need || w == 0 || h == 0 {
            return Err("truncated PPM raster".into());
        }
        Ok(Self::from_bytes(h, w, &bytes[pos..pos + need]))
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    /// Save as PNG or PPM depending on the extension (PPM when absent).
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => self.save_png(path),
            _ => self.save_ppm(path),
        }
    }

    /// Load a PPM (P6, 8-bit) or PNG file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.starts_with(b"P6") {
            return Self::decode_ppm(&bytes).map_err(fail);
        }
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| fail(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_bytes(h as usize, w as usize, img.as_raw()))
    }
}

/// Stack equally sized images into a `[B, H, W, 3]` tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
    let mut data = Vec::with_capacity(first.data.len() * images.len());
    for img in images {
        if img.height != first.height || img.width != first.width {
            return Err(Error::Dimension(format!(
                "batch mixes {}x{} and {}x{} images",
                first.height, first.width, img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), first.height, first.width, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let img = sample();
        let bytes = img.encode_ppm();
        let back = Image::decode_ppm(&bytes).unwrap();
        assert_eq!(back.encode_ppm(), bytes);
        assert_eq!((back.height, back.width), (2, 3));
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0));
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = Image::decode_ppm(&bytes).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_bad_ppm() {
        assert!(Image::decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Image::decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(Image::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = sample();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.encode_ppm(), img.encode_ppm());
    }

    #[test]
    fn unreadable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not an image").unwrap();
        match Image::load(&path) {
            Err(Error::Image { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn range_check() {
        let mut img = sample();
        assert!(img.check_range().is_ok());
        img.data[4] = 1.5;
        assert!(matches!(img.check_range(), Err(Error::PixelRange { .. })));
    }
}

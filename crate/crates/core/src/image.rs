//! 8-bit raster images and binary PNM (`P6` colour, `P5` grey) I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!("bad image geometry {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Image::new(width, height, channels, vec![value; width * height * channels]).expect("valid geometry")
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sub-image `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Image::new(w, h, c, data)
    }

    /// Mirror-extend to `width x height` (edge pixel not repeated).
    pub fn reflect_pad(&self, width: usize, height: usize) -> Result<Image> {
        if width < self.width || height < self.height {
            return Err(Error::invalid(format!(
                "cannot pad {}x{} down to {width}x{height}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let sy = reflect(y, self.height);
            for x in 0..width {
                let sx = reflect(x, self.width);
                let at = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[at..at + c]);
            }
        }
        Image::new(width, height, c, data)
    }

    /// Grey images get their channel replicated three times.
    pub fn into_rgb(self) -> Image {
        if self.channels == 3 {
            return self;
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            channels: 3,
            data,
            ..self
        }
    }

    /// Pad so both extents are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Result<Image> {
        self.reflect_pad(self.width.div_ceil(m) * m, self.height.div_ceil(m) * m)
    }

    /// `[1, C, H, W]` with values in `[0, 1]`.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            S::of(self.data[p * c + ch] as f64 / 255.0)
        })
    }

    /// Inverse of [`Image::to_tensor`] for batch item `index`: clamp to
    /// `[0, 1]`, scale, round to nearest.
    pub fn from_tensor<S: Real>(t: &Tensor<S>, index: usize) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(Error::invalid(format!("batch index {index} of {n}")));
        }
        let base = index * c * h * w;
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[base + ch * h * w + p].f64();
                data[p * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Image::new(w, h, c, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        decode_pnm(&std::fs::read(path).map_err(Error::at_path(path))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_pnm()).map_err(Error::at_path(path))
    }

    /// `P6` for colour, `P5` for grey.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

fn pnm_error(pos: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "pnm",
        pos,
        msg: msg.into(),
    }
}

/// Parse a binary PNM. Header fields may be separated by any whitespace and
/// `#` comments; exactly one whitespace byte precedes the raster.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(pnm_error(0, "missing magic"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(pnm_error(0, "expected P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start = pos;
        // separator: at least one whitespace byte or comment
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start {
            return Err(pnm_error(pos, "expected whitespace"));
        }
        let digits = bytes[pos..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 {
            return Err(pnm_error(pos, format!("expected {}", ["width", "height", "maxval"][i])));
        }
        let text = std::str::from_utf8(&bytes[pos..pos + digits]).expect("ascii digits");
        *field = text.parse().map_err(|_| pnm_error(pos, "number out of range"))?;
        pos += digits;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(pnm_error(pos, "zero image extent"));
    }
    if maxval != 255 {
        return Err(pnm_error(pos, format!("maxval {maxval} unsupported, only 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(pnm_error(pos, "expected single whitespace before raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| pnm_error(pos, "image too large"))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(pnm_error(bytes.len(), format!("raster truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(pnm_error(pos + need, format!("{} trailing bytes", have - need)));
    }
    Image::new(width, height, channels, bytes[pos..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments_and_odd_whitespace() {
        let mut bytes = b"P6 # made by hand\n\t2\r\n # more\n 1  255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_with_position() {
        let err = decode_pnm(b"P6\n2 1\n65535\n").unwrap_err();
        assert!(matches!(err, Error::Format { pos: 12, .. }), "{err}");
        let err = decode_pnm(b"P6\n2 1\n255\n\x01\x02").unwrap_err();
        assert!(matches!(err, Error::Format { pos: 13, .. }), "{err}");
        let err = decode_pnm(b"P6\n2 x\n255\n").unwrap_err();
        assert!(matches!(err, Error::Format { pos: 5, .. }), "{err}");
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n255").is_err());
    }

    #[test]
    fn reflect_padding() {
        let img = Image::new(3, 1, 1, vec![10, 20, 30]).unwrap();
        let p = img.reflect_pad(8, 2).unwrap();
        assert_eq!(&p.data[..8], &[10, 20, 30, 20, 10, 20, 30, 20]);
        assert_eq!(&p.data[..8], &p.data[8..]);
        let one = Image::filled(1, 1, 3, 7).pad_to_multiple(64).unwrap();
        assert_eq!((one.width, one.height), (64, 64));
        assert!(one.data.iter().all(|&v| v == 7));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::new(2, 2, 3, (0..12).map(|i| (i * 20) as u8).collect()).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
        assert_eq!(img.crop(1, 0, 1, 2).unwrap().data, vec![60, 80, 100, 180, 200, 220]);
    }
}

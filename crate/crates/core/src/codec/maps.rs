//! Spatial bit allocation: model bits spread over the pixels they describe.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{HYPER_STRIDE, LATENT_STRIDE};
use crate::tensor::Tensor;

/// Bits per pixel position of the original image. Sums to the total model
/// rate of the latent and hyper latent.
#[derive(Clone, Debug, PartialEq)]
pub struct BitMap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<f64>,
}

impl BitMap {
    /// Each latent position covers a 16x16 footprint, each hyper position
    /// 64x64. Footprints are clipped to the original extent; one lying
    /// wholly in the padding collapses onto the nearest edge pixel so no
    /// bits are lost.
    pub fn from_latent_bits(y_bits: &Tensor<f64>, z_bits: &Tensor<f64>, width: usize, height: usize) -> BitMap {
        let mut map = BitMap {
            width,
            height,
            bits: vec![0.0; width * height],
        };
        map.spread(y_bits, LATENT_STRIDE);
        map.spread(z_bits, HYPER_STRIDE);
        map
    }

    fn spread(&mut self, grid: &Tensor<f64>, stride: usize) {
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        for i in 0..gh {
            let rows = clip(i * stride, stride, self.height);
            for j in 0..gw {
                let cols = clip(j * stride, stride, self.width);
                let share = grid.data()[i * gw + j] / (rows.len() * cols.len()) as f64;
                for r in rows.clone() {
                    for c in cols.clone() {
                        self.bits[r * self.width + c] += share;
                    }
                }
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.bits.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.bits.len() as f64
    }

    /// Grey rendering, white at `max` (the map maximum when `None`).
    pub fn to_image(&self, max: Option<f64>) -> Image {
        let top = max.unwrap_or_else(|| self.bits.iter().copied().fold(0.0, f64::max));
        let data = self
            .bits
            .iter()
            .map(|&b| if top > 0.0 { (b / top).clamp(0.0, 1.0) * 255.0 } else { 0.0 }.round() as u8)
            .collect();
        Image::new(self.width, self.height, 1, data).expect("map geometry")
    }
}

fn clip(start: usize, len: usize, extent: usize) -> std::ops::Range<usize> {
    if start >= extent {
        extent - 1..extent
    } else {
        start..(start + len).min(extent)
    }
}

/// Signed per-pixel difference `a - b` of two allocation maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub fn allocation_diff(a: &BitMap, b: &BitMap) -> Result<DiffMap> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "allocation_diff",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(DiffMap {
        width: a.width,
        height: a.height,
        values: a.bits.iter().zip(&b.bits).map(|(x, y)| x - y).collect(),
    })
}

impl DiffMap {
    /// 99th percentile of `|value|`, the saturation point of [`Self::render`].
    pub fn scale(&self) -> f64 {
        let mut mags: Vec<f64> = self.values.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let k = ((mags.len() as f64 * 0.99).ceil() as usize).clamp(1, mags.len()) - 1;
        mags[k]
    }

    /// White at zero, red where `a` spends more, blue where `b` does.
    pub fn render(&self) -> Image {
        let s = self.scale();
        let mut data = Vec::with_capacity(self.values.len() * 3);
        for &v in &self.values {
            let t = if s > 0.0 { (v / s).clamp(-1.0, 1.0) } else { 0.0 };
            let fade = (255.0 * (1.0 - t.abs())).round() as u8;
            data.extend_from_slice(&if t >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] });
        }
        Image::new(self.width, self.height, 3, data).expect("map geometry")
    }
}

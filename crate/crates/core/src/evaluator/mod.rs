//! Quality metrics, rate-distortion sweeps and attention-mode comparisons.

mod bd;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::codec::{allocation_diff, BitMap, Codec, DiffMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::Gabic;

pub use bd::{avg_log_rate_diff, bd_rate, RdCurve, RdPoint, BD_METHOD};

/// PSNR in dB over all samples; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape(
            "psnr",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.width, a.height, a.channels, b.width, b.height, b.channels
            ),
        ));
    }
    let se: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64)
        .sum();
    Ok(psnr_from_mse(se as f64 / a.data.len() as f64))
}

/// `10 log10(255^2 / mse)` for `mse` on the 8-bit scale.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// One model at one rate point.
#[derive(Clone, Debug)]
pub struct RatePoint {
    pub lambda: f64,
    pub model: Gabic<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub image: String,
    pub lambda: f64,
    /// From the actual stream length.
    pub bpp: f64,
    pub psnr: f64,
    pub enc_ms: f64,
    pub dec_ms: f64,
    /// Model estimate, for comparison with `bpp`.
    pub bpp_est: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "image,lambda,bpp,psnr,enc_ms,dec_ms,bpp_est";

    pub fn csv_row(&self) -> String {
        let name = if self.image.contains([',', '"', '\n']) {
            format!("\"{}\"", self.image.replace('"', "\"\""))
        } else {
            self.image.clone()
        };
        format!(
            "{name},{},{:.6},{:.4},{:.3},{:.3},{:.6}",
            self.lambda, self.bpp, self.psnr, self.enc_ms, self.dec_ms, self.bpp_est
        )
    }
}

#[derive(Clone, Debug)]
pub struct Sweep {
    /// Sorted by image name, then lambda.
    pub rows: Vec<SweepRow>,
    /// Allocation map of each row.
    pub maps: Vec<BitMap>,
    pub label: String,
    /// Per lambda, in rate-point order: mean bpp and mean PSNR over the images.
    pub points: Vec<RdPoint>,
}

impl Sweep {
    /// The mean points as a curve for BD-rate; fails when they do not form
    /// one (e.g. two models with the same rate).
    pub fn curve(&self) -> Result<RdCurve> {
        RdCurve::new(&self.label, self.points.clone())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", SweepRow::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Encode and decode every image with every model. Grey images are
/// compared in RGB.
pub fn rd_sweep(label: &str, points: &[RatePoint], images: &[(String, Image)]) -> Result<Sweep> {
    if points.is_empty() || images.is_empty() {
        return Err(Error::invalid("rd_sweep needs at least one model and one image"));
    }
    if points.iter().enumerate().any(|(i, p)| points[..i].iter().any(|q| q.lambda == p.lambda)) {
        return Err(Error::invalid("rd_sweep rate points need distinct lambdas"));
    }
    let codecs = points
        .iter()
        .map(|p| Ok((p.lambda, Codec::new(p.model.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..codecs.len()).map(move |j| (i, j)))
        .collect();
    let mut out = jobs
        .par_iter()
        .map(|&(i, j)| {
            let (name, img) = &images[i];
            let img = img.clone().into_rgb();
            let (lambda, codec) = &codecs[j];
            let t0 = Instant::now();
            let enc = codec.encode(&img, u8::try_from(j).ok())?;
            let enc_ms = t0.elapsed().as_secs_f64() * 1e3;
            let bytes = enc.bytes();
            let t1 = Instant::now();
            let rec = codec.decode_bytes(&bytes)?;
            let dec_ms = t1.elapsed().as_secs_f64() * 1e3;
            if rec != enc.reconstruction {
                return Err(Error::Corrupt(format!("{name}: decoder output differs from encoder reconstruction")));
            }
            let row = SweepRow {
                image: name.clone(),
                lambda: *lambda,
                bpp: enc.bpp(),
                psnr: psnr(&img, &rec)?,
                enc_ms,
                dec_ms,
                bpp_est: enc.estimated_bpp(),
            };
            Ok((row, enc.allocation_map()))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.image.cmp(&b.0.image).then(a.0.lambda.total_cmp(&b.0.lambda)));
    let (rows, maps): (Vec<_>, Vec<_>) = out.into_iter().unzip();

    let mut means = Vec::with_capacity(points.len());
    for p in points {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == p.lambda).collect();
        let n = sel.len() as f64;
        means.push(RdPoint {
            bpp: sel.iter().map(|r| r.bpp).sum::<f64>() / n,
            psnr: sel.iter().map(|r| r.psnr.min(100.0)).sum::<f64>() / n,
        });
    }
    Ok(Sweep {
        rows,
        maps,
        label: label.to_string(),
        points: means,
    })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub a: Sweep,
    pub b: Sweep,
    /// Rate change of `a` against `b`; `None` with fewer than 4 rate points.
    pub bd_rate: Option<f64>,
    /// `a - b` allocation per (image, lambda index), in sweep row order.
    pub diffs: Vec<(String, usize, DiffMap)>,
}

/// Sweep two model families (e.g. k-NN against dense attention) over the
/// same images and compare them point by point.
pub fn compare_modes(a: &[RatePoint], b: &[RatePoint], images: &[(String, Image)]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} rate points", a.len(), b.len())));
    }
    let sa = rd_sweep("a", a, images)?;
    let sb = rd_sweep("b", b, images)?;
    let bd_rate = if a.len() >= 4 { Some(bd_rate(&sb.curve()?, &sa.curve()?)?) } else { None };
    let per_image = a.len();
    let diffs = sa
        .maps
        .iter()
        .zip(&sb.maps)
        .enumerate()
        .map(|(k, (ma, mb))| Ok((sa.rows[k].image.clone(), k % per_image, allocation_diff(ma, mb)?)))
        .collect::<Result<_>>()?;
    Ok(Comparison {
        a: sa,
        b: sb,
        bd_rate,
        diffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, 3, 0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Image::filled(4, 4, 3, 255)).unwrap().abs() < 1e-12);
        let b = Image::filled(4, 4, 3, 1);
        assert!((psnr(&a, &b).unwrap() - 48.130803608679).abs() < 1e-9);
    }
}

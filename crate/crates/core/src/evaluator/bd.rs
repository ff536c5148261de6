//! Bjontegaard delta rate with cubic fits of log10(bpp) over PSNR.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Labelled rate-distortion curve, points in increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        for p in &points {
            if !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite()) {
                return Err(Error::invalid(format!("bad RD point {p:?}")));
            }
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::invalid("RD curve has repeated bpp values"));
        }
        Ok(RdCurve {
            label: label.into(),
            points,
        })
    }
}

pub const BD_METHOD: &str = "bjontegaard-cubic-fit";

/// Percent rate change of `test` against `anchor` at equal PSNR; negative
/// means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    Ok(100.0 * (10f64.powf(avg_log_rate_diff(anchor, test)?) - 1.0))
}

/// Mean of `log10 R_test - log10 R_anchor` over the shared PSNR interval.
pub fn avg_log_rate_diff(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::invalid(format!(
                "curve '{}' has {} points, BD-rate needs at least 4",
                c.label,
                c.points.len()
            )));
        }
    }
    let range = |c: &RdCurve| {
        c.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr), hi.max(p.psnr)))
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(Error::invalid(format!(
            "PSNR ranges [{a_lo:.3}, {a_hi:.3}] and [{t_lo:.3}, {t_hi:.3}] do not overlap"
        )));
    }
    // Centre and scale PSNR to keep the normal equations well conditioned.
    let (c, s) = ((lo + hi) / 2.0, ((hi - lo) / 2.0).max(1e-9));
    let fa = Cubic::fit(anchor, c, s)?;
    let ft = Cubic::fit(test, c, s)?;
    Ok((ft.integral(-1.0, 1.0) - fa.integral(-1.0, 1.0)) / 2.0)
}

/// `a0 + a1 u + a2 u^2 + a3 u^3` in `u = (psnr - c) / s`.
struct Cubic([f64; 4]);

impl Cubic {
    fn fit(curve: &RdCurve, c: f64, s: f64) -> Result<Cubic> {
        let mut ata = [[0.0; 4]; 4];
        let mut atb = [0.0; 4];
        for p in &curve.points {
            let u = (p.psnr - c) / s;
            let row = [1.0, u, u * u, u * u * u];
            let r = p.bpp.log10();
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * r;
            }
        }
        solve4(ata, atb)
            .map(Cubic)
            .ok_or_else(|| Error::invalid(format!("curve '{}' has too few distinct PSNR values", curve.label)))
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |u: f64| {
            let [c0, c1, c2, c3] = self.0;
            u * (c0 + u * (c1 / 2.0 + u * (c2 / 3.0 + u * c3 / 4.0)))
        };
        prim(b) - prim(a)
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve4(mut m: [[f64; 4]; 4], mut v: [f64; 4]) -> Option<[f64; 4]> {
    let scale = m.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for r in col + 1..4 {
            let f = m[r][col] / m[col][col];
            for k in col..4 {
                m[r][k] -= f * m[col][k];
            }
            v[r] -= f * v[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let tail: f64 = (r + 1..4).map(|k| m[r][k] * x[k]).sum();
        x[r] = (v[r] - tail) / m[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new("c", pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()).unwrap()
    }

    #[test]
    fn identity_and_antisymmetry() {
        let a = curve(&[(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.8), (1.2, 37.0)]);
        let b = curve(&[(0.12, 28.3), (0.22, 30.4), (0.41, 33.4), (0.85, 36.0)]);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let ab = avg_log_rate_diff(&a, &b).unwrap();
        let ba = avg_log_rate_diff(&b, &a).unwrap();
        assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = curve(&[(0.1, 28.0), (0.2, 30.0), (0.4, 32.0), (0.8, 34.0)]);
        let far = curve(&[(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)]);
        assert!(bd_rate(&a, &far).is_err());
        let three = curve(&[(0.1, 28.0), (0.2, 30.0), (0.4, 32.0)]);
        assert!(bd_rate(&a, &three).is_err());
    }
}

use crate::error::{Error, Result};
use crate::network::SIGMA_MIN;
use crate::prob;

/// Default probability resolution in bits.
pub const DEFAULT_PRECISION: u32 = 16;
/// Default mass left outside the explicit symbol support.
pub const DEFAULT_TAIL_MASS: f64 = 1e-6;
/// Width of the raw value written after an escape.
pub const BYPASS_BITS: u32 = 32;

/// Frozen integer model over symbols `offset ..= offset + n - 1` plus one
/// escape bin for everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    precision: u32,
    offset: i32,
    /// `n + 2` entries: `cdf[0] = 0`, `cdf[n + 1] = 2^precision`; bin `n` is
    /// the escape bin.
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantize a probability mass function over the support (plus the
    /// escape mass) to integer frequencies summing to `2^precision`.
    ///
    /// Frequencies are `round_ties_even(p * 2^precision)` floored at 1; the
    /// rounding surplus or deficit is settled on the largest bins, largest
    /// first, lowest index on ties.
    pub fn from_pmf(offset: i32, pmf: &[f64], escape: f64, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        let total = 1u64 << precision;
        let bins = pmf.len() + 1;
        if pmf.is_empty() || bins as u64 > total / 2 {
            return Err(Error::invalid(format!(
                "{} bins do not fit {precision}-bit precision",
                bins
            )));
        }
        if pmf.iter().chain([&escape]).any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let scale = total as f64;
        let mut freq: Vec<u64> = pmf
            .iter()
            .chain([&escape])
            .map(|&p| ((p * scale).round_ties_even() as u64).max(1))
            .collect();
        let mut order: Vec<usize> = (0..bins).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        let mut sum: u64 = freq.iter().sum();
        let mut k = 0;
        while sum != total {
            let i = order[k % bins];
            if sum < total {
                freq[i] += total - sum;
                sum = total;
            } else {
                let take = (sum - total).min(freq[i] - 1);
                freq[i] -= take;
                sum -= take;
            }
            k += 1;
        }
        let mut cdf = Vec::with_capacity(bins + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc as u32);
        }
        Ok(CdfTable { precision, offset, cdf })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Number of explicitly modelled symbols.
    pub fn support(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn escape_index(&self) -> usize {
        self.support()
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn freq(&self, bin: usize) -> u32 {
        self.cdf[bin + 1] - self.cdf[bin]
    }

    /// Bin of `symbol`, or the escape bin.
    pub fn bin(&self, symbol: i32) -> usize {
        let idx = symbol as i64 - self.offset as i64;
        if idx >= 0 && (idx as usize) < self.support() {
            idx as usize
        } else {
            self.escape_index()
        }
    }

    /// Cost of `symbol` under the frozen table, bypass bits included.
    pub fn bits(&self, symbol: i32) -> f64 {
        let bin = self.bin(symbol);
        let b = self.precision as f64 - (self.freq(bin) as f64).log2();
        if bin == self.escape_index() {
            b + BYPASS_BITS as f64
        } else {
            b
        }
    }

    /// Bin containing the scaled cumulative value `v`.
    pub(crate) fn lookup(&self, v: u32) -> usize {
        // last index with cdf[i] <= v
        self.cdf.partition_point(|&c| c <= v) - 1
    }
}

fn check_precision(precision: u32) -> Result<()> {
    if !(8..=24).contains(&precision) {
        return Err(Error::invalid(format!("precision {precision} outside 8..=24")));
    }
    Ok(())
}

fn check_tail(tail_mass: f64) -> Result<()> {
    if !(tail_mass > 0.0 && tail_mass < 1e-3) {
        return Err(Error::invalid(format!("tail mass {tail_mass} outside (0, 1e-3)")));
    }
    Ok(())
}

/// Table for `round(y - mu)` under `N(0, sigma^2)` on unit bins: the symbol
/// range is the smallest symmetric one holding `1 - tail_mass`.
pub fn build_gaussian_cdf(sigma: f64, precision: u32, tail_mass: f64) -> Result<CdfTable> {
    check_precision(precision)?;
    check_tail(tail_mass)?;
    if !(sigma >= SIGMA_MIN) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma {sigma} below {SIGMA_MIN}")));
    }
    let outside = |r: i32| 2.0 * prob::normal_cdf(-(r as f64 + 0.5) / sigma);
    let mut r = 0;
    while outside(r) > tail_mass {
        r += 1;
    }
    let pmf: Vec<f64> = (-r..=r).map(|k| prob::gaussian_bin(k as f64, sigma)).collect();
    CdfTable::from_pmf(-r, &pmf, outside(r), precision)
}

/// Table for integer `z` under a logistic density.
pub fn build_logistic_cdf(loc: f64, scale: f64, precision: u32, tail_mass: f64) -> Result<CdfTable> {
    check_precision(precision)?;
    check_tail(tail_mass)?;
    if !(scale > 0.0 && scale.is_finite() && loc.is_finite()) {
        return Err(Error::invalid(format!("bad logistic parameters loc {loc} scale {scale}")));
    }
    let below = |lo: i32| prob::sigmoid((lo as f64 - 0.5 - loc) / scale);
    let above = |hi: i32| prob::sigmoid(-(hi as f64 + 0.5 - loc) / scale);
    let centre = loc.round().clamp(-1e6, 1e6) as i32;
    let (mut lo, mut hi) = (centre, centre);
    while below(lo) + above(hi) > tail_mass {
        if below(lo) >= above(hi) {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    let pmf: Vec<f64> = (lo..=hi).map(|k| prob::logistic_bin(k as f64, loc, scale)).collect();
    CdfTable::from_pmf(lo, &pmf, below(lo) + above(hi), precision)
}

/// Geometric grid of scales with one prebuilt Gaussian table per level.
#[derive(Clone, Debug)]
pub struct ScaleTables {
    levels: Vec<f64>,
    tables: Vec<CdfTable>,
}

pub const SCALE_LEVELS: usize = 64;
pub const SCALE_MAX: f64 = 64.0;

impl ScaleTables {
    pub fn new(precision: u32, tail_mass: f64) -> Result<Self> {
        let levels: Vec<f64> = (0..SCALE_LEVELS)
            .map(|i| {
                let t = i as f64 / (SCALE_LEVELS - 1) as f64;
                (SIGMA_MIN.ln() + t * (SCALE_MAX.ln() - SIGMA_MIN.ln())).exp()
            })
            .collect();
        let tables = levels
            .iter()
            .map(|&s| build_gaussian_cdf(s.max(SIGMA_MIN), precision, tail_mass))
            .collect::<Result<_>>()?;
        Ok(ScaleTables { levels, tables })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Level nearest to `sigma` in log scale, clamped to the grid.
    pub fn index(&self, sigma: f64) -> usize {
        if !(sigma > SIGMA_MIN) {
            return 0;
        }
        let t = (sigma.ln() - SIGMA_MIN.ln()) / (SCALE_MAX.ln() - SIGMA_MIN.ln());
        ((t * (SCALE_LEVELS - 1) as f64).round() as usize).min(SCALE_LEVELS - 1)
    }

    pub fn table(&self, index: usize) -> &CdfTable {
        &self.tables[index]
    }

    pub fn for_sigma(&self, sigma: f64) -> &CdfTable {
        &self.tables[self.index(sigma)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(t: &CdfTable) -> u32 {
        *t.cdf().last().unwrap()
    }

    #[test]
    fn normalization_and_monotonicity() {
        for &s in &[SIGMA_MIN, 0.3, 1.0, 5.0, 64.0] {
            let t = build_gaussian_cdf(s, 16, 1e-6).unwrap();
            assert_eq!(total(&t), 1 << 16);
            assert_eq!(t.cdf()[0], 0);
            assert!((0..=t.support()).all(|b| t.freq(b) >= 1));
        }
    }

    #[test]
    fn concentrated_sigma_has_tiny_support() {
        let t = build_gaussian_cdf(SIGMA_MIN, 16, 1e-6).unwrap();
        assert!(t.support() <= 5, "{}", t.support());
        let zero = t.bin(0);
        assert!((0..=t.support()).all(|b| b == zero || t.freq(b) < t.freq(zero)));
        assert!(t.freq(zero) > 65_500);
    }

    #[test]
    fn unit_sigma_matches_cdf_differences() {
        let t = build_gaussian_cdf(1.0, 16, 1e-6).unwrap();
        for k in t.offset()..t.offset() + t.support() as i32 {
            let p = prob::normal_cdf(k as f64 + 0.5) - prob::normal_cdf(k as f64 - 0.5);
            let q = t.freq(t.bin(k)) as f64 / 65536.0;
            // rounding (half a unit) plus the floor and the correction on the peak
            assert!((p - q).abs() <= 1.0 / 65536.0 + 16.0 / 65536.0 * (k == 0) as u8 as f64, "{k}: {p} {q}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_gaussian_cdf(1.0, 7, 1e-6).is_err());
        assert!(build_gaussian_cdf(1.0, 25, 1e-6).is_err());
        assert!(build_gaussian_cdf(0.01, 16, 1e-6).is_err());
        assert!(build_gaussian_cdf(1.0, 16, 1e-2).is_err());
        assert!(build_logistic_cdf(0.0, 0.0, 16, 1e-6).is_err());
    }

    #[test]
    fn logistic_table_covers_location() {
        let t = build_logistic_cdf(3.3, 0.8, 16, 1e-6).unwrap();
        assert_eq!(total(&t), 1 << 16);
        assert!(t.bin(3) != t.escape_index());
        assert!(t.freq(t.bin(3)) > t.freq(t.bin(5)));
        assert_eq!(t.bin(1000), t.escape_index());
    }

    #[test]
    fn scale_grid_snaps_in_log_domain() {
        let g = ScaleTables::new(16, 1e-6).unwrap();
        assert_eq!(g.levels().len(), 64);
        assert!((g.levels()[0] - SIGMA_MIN).abs() < 1e-15);
        assert!((g.levels()[63] - 64.0).abs() < 1e-9);
        assert_eq!(g.index(0.0), 0);
        assert_eq!(g.index(1e9), 63);
        for (i, &l) in g.levels().iter().enumerate() {
            assert_eq!(g.index(l), i);
            assert_eq!(g.index(l * 1.05), i);
        }
    }

    #[test]
    fn deterministic_construction() {
        assert_eq!(build_gaussian_cdf(2.7, 16, 1e-6).unwrap(), build_gaussian_cdf(2.7, 16, 1e-6).unwrap());
    }
}

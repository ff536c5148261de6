//! Bjontegaard delta rate between two rate-distortion curves.

use gabic::evaluator::{bd_rate, RdCurve, RdPoint, BD_METHOD};

fn curve(label: &str, pts: &[(f64, f64)]) -> gabic::Result<RdCurve> {
    RdCurve::new(label, pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect())
}

fn main() -> gabic::Result<()> {
    let anchor = curve("anchor", &[(0.12, 27.1), (0.25, 29.8), (0.5, 32.6), (1.0, 35.2)])?;
    let test = curve("test", &[(0.11, 27.3), (0.22, 30.0), (0.46, 32.9), (0.93, 35.4)])?;
    let halved = curve("halved", &[(0.06, 27.1), (0.125, 29.8), (0.25, 32.6), (0.5, 35.2)])?;
    println!("method: {BD_METHOD}");
    println!("test vs anchor:   {:+.3}%", bd_rate(&anchor, &test)?);
    println!("halved vs anchor: {:+.3}%", bd_rate(&anchor, &halved)?);
    Ok(())
}

//! Procedural training images: smooth gradients, checkerboards, blurred
//! noise and hard-edged shapes.

use crate::image::Image;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    FilteredNoise,
    Edges,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Gradient,
        Pattern::Checkerboard,
        Pattern::FilteredNoise,
        Pattern::Edges,
    ];
}

fn colour(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One `size x size` RGB image of the given pattern.
pub fn pattern_image(pattern: Pattern, size: usize, rng: &mut Rng) -> Image {
    let mut px = vec![[0.0f64; 3]; size * size];
    match pattern {
        Pattern::Gradient => {
            let (a, b) = (colour(rng), colour(rng));
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let radial = rng.uniform() < 0.3;
            let (cx, cy) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
                    let t = if radial {
                        (((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / size as f64).min(1.0)
                    } else {
                        (fx * dx + fy * dy) / std::f64::consts::SQRT_2 + 0.5
                    };
                    px[y * size + x] = std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t);
                }
            }
        }
        Pattern::Checkerboard => {
            let (a, b) = (colour(rng), colour(rng));
            let cell = 16 + rng.below(17);
            let (ox, oy) = (rng.below(cell), rng.below(cell));
            for y in 0..size {
                for x in 0..size {
                    let odd = ((x + ox) / cell + (y + oy) / cell) % 2 == 1;
                    px[y * size + x] = if odd { a } else { b };
                }
            }
        }
        Pattern::FilteredNoise => {
            let radius = 4 + rng.below(7);
            let base = colour(rng);
            let amp = rng.uniform_range(0.2, 0.6);
            for c in 0..3 {
                let noise: Vec<f64> = (0..size * size).map(|_| rng.uniform() - 0.5).collect();
                let blurred = box_blur(&box_blur(&noise, size, radius, true), size, radius, false);
                // box filtering shrinks the spread by about (2r + 1)
                let gain = amp * (2 * radius + 1) as f64;
                for (p, v) in px.iter_mut().zip(blurred) {
                    p[c] = base[c] + gain * v;
                }
            }
        }
        Pattern::Edges => {
            let background = colour(rng);
            px.fill(background);
            for _ in 0..1 + rng.below(3) {
                let col = colour(rng);
                let s = size as f64;
                let (cx, cy) = (rng.uniform() * s, rng.uniform() * s);
                let r = rng.uniform_range(0.1, 0.4) * s;
                let kind = rng.below(3);
                let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
                for y in 0..size {
                    for x in 0..size {
                        let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let inside = match kind {
                            0 => fx * fx + fy * fy < r * r,
                            1 => fx.abs() < r && fy.abs() < r * 0.6,
                            _ => fx * angle.cos() + fy * angle.sin() > 0.0,
                        };
                        if inside {
                            px[y * size + x] = col;
                        }
                    }
                }
            }
        }
    }
    if matches!(pattern, Pattern::Checkerboard | Pattern::Edges) {
        // soften hard edges over a few pixels
        let r = 1 + rng.below(3);
        for c in 0..3 {
            let plane: Vec<f64> = px.iter().map(|p| p[c]).collect();
            let plane = box_blur(&box_blur(&plane, size, r, true), size, r, false);
            for (p, v) in px.iter_mut().zip(plane) {
                p[c] = v;
            }
        }
    }
    let data = px.iter().flat_map(|p| p.map(to_u8)).collect();
    Image::new(size, size, 3, data).expect("valid geometry")
}

fn box_blur(src: &[f64], size: usize, r: usize, horizontal: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for d in 0..=2 * r {
                let o = (d as isize - r as isize).rem_euclid(size as isize) as usize;
                let (sx, sy) = if horizontal { ((x + o) % size, y) } else { (x, (y + o) % size) };
                acc += src[sy * size + sx];
            }
            out[y * size + x] = acc / (2 * r + 1) as f64;
        }
    }
    out
}

/// `count` images cycling through every pattern.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            pattern_image(Pattern::ALL[i % Pattern::ALL.len()], size, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = synthetic_images(8, 32, 1);
        assert_eq!(a, synthetic_images(8, 32, 1));
        assert_ne!(a, synthetic_images(8, 32, 2));
        for img in &a {
            let (lo, hi) = img.data.iter().fold((255, 0), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi > lo, "flat image");
        }
    }
}

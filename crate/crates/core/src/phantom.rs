//! Synthetic fibrous ground-truth images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub fiber_count: usize,
    /// Gaussian cross-section sigma, in pixels.
    pub fiber_width_px: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub background_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 128,
            width: 128,
            fiber_count: 10,
            fiber_width_px: 1.5,
            intensity_min: 0.3,
            intensity_max: 1.0,
            background_level: 0.02,
            seed: 1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "phantom must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fiber_width_px > 0.0 && self.fiber_width_px.is_finite()) {
            return Err(Error::Config("phantom.fiber_width_px must be > 0".into()));
        }
        if !(0.0 <= self.intensity_min
            && self.intensity_min <= self.intensity_max
            && self.intensity_max <= 1.0)
        {
            return Err(Error::Config(
                "phantom intensity range must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        if !(0.0..=0.1).contains(&self.background_level) {
            return Err(Error::Config(
                "phantom.background_level must lie in [0, 0.1]".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomConfig { seed, ..self.clone() }
    }
}

/// Quadratic Bezier through three control points, `(row, col)` coordinates.
#[derive(Clone, Copy, Debug)]
struct Fiber {
    ctrl: [(f64, f64); 3],
    amplitude: f64,
}

impl Fiber {
    fn point(&self, t: f64) -> (f64, f64) {
        let [p0, p1, p2] = self.ctrl;
        let s = 1.0 - t;
        (
            s * s * p0.0 + 2.0 * s * t * p1.0 + t * t * p2.0,
            s * s * p0.1 + 2.0 * s * t * p1.1 + t * t * p2.1,
        )
    }

    fn polyline(&self) -> Vec<(f64, f64)> {
        let [p0, p1, p2] = self.ctrl;
        let hull = dist(p0, p1) + dist(p1, p2);
        let n = ((hull * 2.0).ceil() as usize).max(2);
        (0..=n).map(|i| self.point(i as f64 / n as f64)).collect()
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn segment_dist_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let len_sq = d.0 * d.0 + d.1 * d.1;
    let t = if len_sq > 0.0 {
        (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = (a.0 + t * d.0, a.1 + t * d.1);
    (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)
}

fn draw_fibers(config: &PhantomConfig) -> Vec<Fiber> {
    let (h, w) = (config.height as f64, config.width as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Control points may sit slightly outside the frame so fibers can enter
    // and leave through the border.
    let (mr, mc) = (0.1 * h, 0.1 * w);
    (0..config.fiber_count)
        .map(|_| {
            let mut ctrl = [(0.0, 0.0); 3];
            for p in &mut ctrl {
                *p = (
                    rng.random_range(-mr..h + mr),
                    rng.random_range(-mc..w + mc),
                );
            }
            let amplitude = if config.intensity_max > config.intensity_min {
                rng.random_range(config.intensity_min..=config.intensity_max)
            } else {
                config.intensity_min
            };
            Fiber { ctrl, amplitude }
        })
        .collect()
}

pub fn generate_phantom(config: &PhantomConfig) -> Result<Image> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let fibers = draw_fibers(config);

    let sigma = config.fiber_width_px;
    let reach = 4.0 * sigma;
    let mut img = Image::filled(h, w, config.background_level);
    let mut nearest = vec![f64::INFINITY; h * w];
    for fiber in &fibers {
        nearest.fill(f64::INFINITY);
        let line = fiber.polyline();
        for seg in line.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let r1 = (a.0.max(b.0) + reach).ceil().min(h as f64 - 1.0);
            let c1 = (a.1.max(b.1) + reach).ceil().min(w as f64 - 1.0);
            let r0 = (a.0.min(b.0) - reach).floor().max(0.0);
            let c0 = (a.1.min(b.1) - reach).floor().max(0.0);
            if r1 < r0 || c1 < c0 {
                continue;
            }
            for r in r0 as usize..=r1 as usize {
                for c in c0 as usize..=c1 as usize {
                    let d = segment_dist_sq((r as f64, c as f64), a, b);
                    let slot = &mut nearest[r * w + c];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
        for (px, &d) in img.pixels_mut().iter_mut().zip(&nearest) {
            if d.is_finite() {
                *px += fiber.amplitude * (-d / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0)).quantize_f32())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PhantomConfig {
        PhantomConfig {
            height: 32,
            width: 40,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn empty_phantom_is_zero() {
        let img = generate_phantom(&PhantomConfig {
            fiber_count: 0,
            background_level: 0.0,
            ..cfg()
        })
        .unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        assert_eq!(img.dims(), (32, 40));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&cfg()).unwrap();
        let b = generate_phantom(&cfg()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_phantom(&cfg().with_seed(99)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn five_fibers_stay_in_range() {
        let config = PhantomConfig {
            height: 64,
            width: 64,
            fiber_count: 5,
            background_level: 0.01,
            seed: 7,
            ..PhantomConfig::default()
        };
        let img = generate_phantom(&config).unwrap();
        let max = img.max();
        assert!((0.01..=1.0).contains(&max));
        assert!(img.pixels().iter().all(|&v| (0.01 - 1e-7..=1.0).contains(&v)));

        // Oracle: densely sample each curve and take the brute-force nearest
        // sample for every pixel, ignoring the 4-sigma truncation.
        let fibers = draw_fibers(&config);
        let sigma = config.fiber_width_px;
        let samples: Vec<Vec<(f64, f64)>> = fibers
            .iter()
            .map(|f| (0..=4000).map(|i| f.point(i as f64 / 4000.0)).collect())
            .collect();
        let mut oracle_bright = 0;
        for r in 0..64 {
            for c in 0..64 {
                let mut v = config.background_level;
                for (f, pts) in fibers.iter().zip(&samples) {
                    let d2 = pts
                        .iter()
                        .map(|&p| (p.0 - r as f64).powi(2) + (p.1 - c as f64).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    v += f.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                if v.min(1.0) > 0.1 {
                    oracle_bright += 1;
                }
            }
        }
        let bright = img.pixels().iter().filter(|&&v| v > 0.1).count();
        assert!(bright > 0 && bright < 64 * 64);
        let diff = (bright as f64 - oracle_bright as f64).abs() / (64.0 * 64.0);
        assert!(diff < 0.005, "rendered {bright} vs oracle {oracle_bright}");
    }

    #[test]
    fn rejects_small_or_inverted() {
        assert!(generate_phantom(&PhantomConfig { height: 8, ..cfg() }).is_err());
        assert!(generate_phantom(&PhantomConfig {
            intensity_min: 0.9,
            intensity_max: 0.2,
            ..cfg()
        })
        .is_err());
        assert!(generate_phantom(&PhantomConfig {
            background_level: 0.5,
            ..cfg()
        })
        .is_err());
    }
}

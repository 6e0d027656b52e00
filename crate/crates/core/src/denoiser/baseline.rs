use super::{enforce_quantile_order, MeasurementStack, QuantilePredictor, QuantileTriple, EPS_MIN};
use crate::error::Result;
use crate::image::Image;

/// Non-learned predictor: pass average for the estimate, local 3x3 standard
/// deviation of that average for the spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub k_sigma: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline { k_sigma: 1.0 }
    }
}

impl QuantilePredictor for Baseline {
    fn predict(&self, stack: &MeasurementStack) -> Result<QuantileTriple> {
        baseline_predict(stack, self.k_sigma)
    }
}

pub fn baseline_predict(stack: &MeasurementStack, k_sigma: f64) -> Result<QuantileTriple> {
    let (h, w) = stack.dims();
    let n = stack.count() as f64;
    let mut mean = vec![0.0; h * w];
    for m in stack.channels() {
        for (acc, v) in mean.iter_mut().zip(m.image.pixels()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mean = Image::from_vec_unchecked(h, w, mean)?;

    let spread = Image::from_fn(h, w, |r, c| {
        let (mut s, mut s2, mut k) = (0.0, 0.0, 0.0);
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                let v = mean.get(rr, cc);
                s += v;
                s2 += v * v;
                k += 1.0;
            }
        }
        let mu = s / k;
        ((s2 / k - mu * mu).max(0.0)).sqrt().max(EPS_MIN)
    });

    let lower = Image::from_fn(h, w, |r, c| {
        (mean.get(r, c) - k_sigma * spread.get(r, c)).max(0.0)
    });
    let upper = Image::from_fn(h, w, |r, c| mean.get(r, c) + k_sigma * spread.get(r, c));
    Ok(enforce_quantile_order(QuantileTriple::new(lower, mean, upper)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ScanMask;
    use crate::scan::{Measurement, ScanConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_of(imgs: Vec<Image>) -> MeasurementStack {
        let (h, w) = imgs[0].dims();
        MeasurementStack::new(
            imgs.into_iter()
                .map(|image| Measurement {
                    image,
                    mask: ScanMask::full(h, w),
                    scan: ScanConfig::default(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_stack_hits_floor() {
        let s = stack_of(vec![Image::filled(5, 5, 0.4); 3]);
        let t = baseline_predict(&s, 2.0).unwrap();
        for i in 0..25 {
            assert!((t.mean.pixels()[i] - 0.4).abs() < 1e-15);
            let width = t.upper.pixels()[i] - t.lower.pixels()[i];
            assert!((width - 2.0 * 2.0 * EPS_MIN).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_mean_is_channel() {
        let img = Image::from_fn(4, 6, |r, c| (r * 6 + c) as f64 / 24.0);
        let t = baseline_predict(&stack_of(vec![img.clone()]), 1.0).unwrap();
        assert_eq!(t.mean, img);
    }

    #[test]
    fn two_channels_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (6, 7);
        let a = Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
        let b = Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
        let k = 1.5;
        let t = baseline_predict(&stack_of(vec![a.clone(), b.clone()]), k).unwrap();
        for r in 0..h {
            for c in 0..w {
                let m = |rr: usize, cc: usize| (a.get(rr, cc) + b.get(rr, cc)) / 2.0;
                let mut vals = Vec::new();
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            vals.push(m(rr as usize, cc as usize));
                        }
                    }
                }
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
                let sd = var.sqrt().max(EPS_MIN);
                assert!((t.mean.get(r, c) - m(r, c)).abs() < 1e-15);
                assert!((t.upper.get(r, c) - (m(r, c) + k * sd)).abs() < 1e-12);
                assert!((t.lower.get(r, c) - (m(r, c) - k * sd).max(0.0)).abs() < 1e-12);
            }
        }
    }
}

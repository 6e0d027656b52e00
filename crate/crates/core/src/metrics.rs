//! Image-quality metrics, display transforms and the threshold sweep.

use std::fmt::Write as _;

use crate::adaptive::{run_acquisition, AcquisitionConfig, RoundLog, Strategy};
use crate::conformal::{format_sig6, CalibrationResult, UncertaintyMap};
use crate::denoiser::QuantilePredictor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scan::Exposure;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "mse")?;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable "valid" Gaussian filter: output is `(h-10) x (w-10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            horiz[r * ow + c] = taps.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src_row = &horiz[(r + k) * ow..(r + k + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src_row) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let x = a.pixels();
    let y = b.pixels();
    let sq = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let xx = filter_valid(&sq(&|i| x[i] * x[i]), h, w, &taps);
    let yy = filter_valid(&sq(&|i| y[i] * y[i]), h, w, &taps);
    let xy = filter_valid(&sq(&|i| x[i] * y[i]), h, w, &taps);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn mean_uncertainty(u: &UncertaintyMap) -> f64 {
    u.image.mean()
}

/// `v^(1/gamma)` for viewing; never fed back into the pipeline.
pub fn display_map(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Input(format!("gamma must be > 0, got {gamma}")));
    }
    img.validate()?;
    Ok(img.map(|v| v.powf(1.0 / gamma)))
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub u_thresh: f64,
    /// Share of the frame selected for the first rescan (0 when the loop
    /// stopped after the initial scan).
    pub frac_round1: f64,
    pub rounds: Vec<RoundLog>,
    pub total: Exposure,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "u_thresh,frac_round1,round,mse,ssim,mean_u,cum_time_s,cum_dose_mj";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
        for row in &self.rows {
            for r in &row.rounds {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    format_sig6(row.u_thresh),
                    format_sig6(row.frac_round1),
                    r.round,
                    opt(r.mse),
                    opt(r.ssim),
                    format_sig6(r.mean_uncertainty),
                    format_sig6(r.cumulative.time_s),
                    format_sig6(r.cumulative.dose_mj),
                )
                .unwrap();
            }
        }
        out
    }
}

/// Runs the acquisition loop once per threshold, all with the same seed, so
/// every row shares the identical first scan.
pub fn sweep(
    truth: &Image,
    reference: Option<&Image>,
    predictor: &dyn QuantilePredictor,
    cal: &CalibrationResult,
    thresholds: &[f64],
    base: &AcquisitionConfig,
    seed: u64,
) -> Result<SweepReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("sweep needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::Config("sweep thresholds must be strictly increasing".into()));
    }
    let n = truth.len() as f64;
    let rows = thresholds
        .iter()
        .map(|&u_thresh| {
            let ac = AcquisitionConfig {
                strategy: Strategy::Threshold,
                u_thresh,
                ..base.clone()
            };
            let res = run_acquisition(truth, reference, predictor, cal, &ac, seed)?;
            let frac_round1 = res.rounds.get(1).map_or(0.0, |r| r.pixels_scanned as f64 / n);
            Ok(SweepRow {
                u_thresh,
                frac_round1,
                total: res.total(),
                rounds: res.rounds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::LambdaFit;
    use crate::denoiser::Baseline;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn mse_examples() {
        let a = Image::zeros(4, 4);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &Image::filled(4, 4, 0.1)).unwrap() - 0.01).abs() < 1e-15);
        let (x, y) = (random(1, 9, 7), random(2, 9, 7));
        let mut s = 0.0;
        for r in 0..9 {
            for c in 0..7 {
                s += (x.get(r, c) - y.get(r, c)).powi(2);
            }
        }
        assert!((mse(&x, &y).unwrap() - s / 63.0).abs() < 1e-12);
        assert!(mse(&x, &Image::zeros(7, 9)).is_err());
    }

    /// Direct per-window SSIM with explicit 2-D weights.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let half = 5i64;
        let mut wts = [[0.0; 11]; 11];
        let mut total = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as i64 - half, j as i64 - half);
                wts[i][j] = (-((di * di + dj * dj) as f64) / (2.0 * 1.5 * 1.5)).exp();
                total += wts[i][j];
            }
        }
        let (h, w) = a.dims();
        let (c1, c2) = (0.0001, 0.0009);
        let mut acc = 0.0;
        let mut count = 0.0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = wts[i][j] / total;
                        mx += wt * a.get(r + i, c + j);
                        my += wt * b.get(r + i, c + j);
                    }
                }
                let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = wts[i][j] / total;
                        let dx = a.get(r + i, c + j) - mx;
                        let dy = b.get(r + i, c + j) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cv += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_properties() {
        let a = random(3, 16, 16);
        let b = a.map(|v| (v * 0.8 + 0.05).min(1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let direct = ssim_direct(&a, &b);
        assert!((ssim(&a, &b).unwrap() - direct).abs() < 1e-9, "{direct}");
        let c = random(4, 16, 16);
        let v = ssim(&a, &c).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert!((v - ssim_direct(&a, &c)).abs() < 1e-9);
        assert!(ssim(&Image::zeros(10, 20), &Image::zeros(10, 20)).is_err());
    }

    #[test]
    fn uncertainty_mean() {
        let u = |img: Image| UncertaintyMap { image: img, lambda: 1.0 };
        assert_eq!(mean_uncertainty(&u(Image::filled(3, 3, 0.25))), 0.25);
        assert_eq!(mean_uncertainty(&u(Image::zeros(3, 3))), 0.0);
        let r = random(5, 6, 6);
        let s: f64 = r.pixels().iter().sum();
        assert!((mean_uncertainty(&u(r)) - s / 36.0).abs() < 1e-15);
    }

    #[test]
    fn display_examples() {
        let img = Image::from_vec(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(display_map(&img, 1.0).unwrap(), img);
        let g2 = display_map(&img, 2.0).unwrap();
        assert_eq!(g2.pixels(), &[0.0, 0.5, 1.0]);
        assert!(display_map(&img, 0.0).is_err());
        assert!(display_map(&img, -2.2).is_err());
    }

    fn cal_all(lambda: f64) -> CalibrationResult {
        let mut c = CalibrationResult::new(0.1);
        for k in 1..=5 {
            c.insert(k, LambdaFit { lambda, risk: 0.0, n: 12 });
        }
        c
    }

    #[test]
    fn sweep_shape() {
        let truth = random(6, 16, 16);
        let cal = cal_all(1.5);
        let pred = Baseline::default();
        let ac = AcquisitionConfig::default();
        let report = sweep(&truth, Some(&truth), &pred, &cal, &[0.0, 0.1, 0.3, 1.0, 100.0], &ac, 4).unwrap();
        let fr: Vec<f64> = report.rows.iter().map(|r| r.frac_round1).collect();
        assert!(fr.windows(2).all(|p| p[1] <= p[0]), "{fr:?}");
        assert_eq!(fr[0], 1.0);
        assert_eq!(fr[4], 0.0);
        let full = &report.rows[0];
        let one = crate::scan::ScanLog::new(256, &ac.scan).exposure();
        assert!((full.total.time_s - 5.0 * one.time_s).abs() < 1e-15);

        let single = run_acquisition(
            &truth,
            Some(&truth),
            &pred,
            &cal,
            &AcquisitionConfig { u_thresh: 0.0, ..ac.clone() },
            4,
        )
        .unwrap();
        assert_eq!(single.rounds, report.rows[0].rounds);
        let csv = report.to_csv();
        let rounds: usize = report.rows.iter().map(|r| r.rounds.len()).sum();
        assert_eq!(csv.lines().count(), 1 + rounds);
        assert!(sweep(&truth, None, &pred, &cal, &[0.2, 0.1], &ac, 4).is_err());
    }
}

//! Point-scan measurement simulation and time / light-dose bookkeeping.
//!
//! The detector model is scaled Poisson shot noise plus additive Gaussian
//! read noise. `photons_per_unit` is the expected photon count for an
//! intensity of 1.0 at the reference operating point (1 µs dwell, 5 mW), and
//! the expected count scales linearly with dwell time and power.

use std::ops::{Add, AddAssign};

use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::image::{Image, ScanMask};
use crate::rng::pixel_rng;

pub const REFERENCE_DWELL_US: f64 = 1.0;
pub const REFERENCE_POWER_MW: f64 = 5.0;

/// Averaging protocol for the pseudo ground truth: 20 frames at 20x dwell.
pub const GT_AVERAGES: usize = 20;
pub const GT_DWELL_FACTOR: f64 = 20.0;

/// Pass numbers used by the pseudo ground truth start here so they never
/// share random streams with ordinary scans of the same site.
const GT_PASS_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    pub dwell_time_us: f64,
    pub power_mw: f64,
    pub photons_per_unit: f64,
    pub read_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            dwell_time_us: REFERENCE_DWELL_US,
            power_mw: REFERENCE_POWER_MW,
            photons_per_unit: 10.0,
            read_noise_sigma: 0.02,
            seed: 1,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scan.dwell_time_us", self.dwell_time_us),
            ("scan.power_mw", self.power_mw),
            ("scan.photons_per_unit", self.photons_per_unit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.read_noise_sigma >= 0.0 && self.read_noise_sigma.is_finite()) {
            return Err(Error::Config("scan.read_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Expected photon count for unit intensity at this dwell time and power.
    pub fn photon_scale(&self) -> f64 {
        self.photons_per_unit
            * (self.dwell_time_us / REFERENCE_DWELL_US)
            * (self.power_mw / REFERENCE_POWER_MW)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScanConfig { seed, ..self.clone() }
    }
}

/// One scan pass: intensities, which pixels were visited, and the settings
/// used. Unvisited pixels are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub image: Image,
    pub mask: ScanMask,
    pub scan: ScanConfig,
}

impl Measurement {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn pixels_scanned(&self) -> usize {
        self.mask.count()
    }
}

fn sample_pixel(x: f64, scan: &ScanConfig, pixel: usize, pass: u64) -> f64 {
    let scale = scan.photon_scale();
    let mut rng = pixel_rng(scan.seed, pixel, pass);
    let mu = x * scale;
    let photons = if mu > 0.0 {
        Poisson::new(mu).expect("finite positive rate").sample(&mut rng)
    } else {
        0.0
    };
    let read = if scan.read_noise_sigma > 0.0 {
        Normal::new(0.0, scan.read_noise_sigma)
            .expect("finite sigma")
            .sample(&mut rng)
    } else {
        0.0
    };
    (photons / scale + read).max(0.0)
}

/// Simulates one pass over the pixels in `mask`. Every pixel draws from its
/// own stream keyed by `(scan.seed, pixel index, pass)`, so a rescan of a
/// subset reproduces exactly the values a full-frame pass would have drawn.
pub fn simulate_scan(
    truth: &Image,
    scan: &ScanConfig,
    mask: &ScanMask,
    pass: u64,
) -> Result<Measurement> {
    scan.validate()?;
    truth.validate()?;
    if mask.dims() != truth.dims() {
        return Err(Error::Input(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            truth.height(),
            truth.width()
        )));
    }
    let pixels = truth
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if mask.contains_index(i) {
                sample_pixel(x, scan, i, pass)
            } else {
                0.0
            }
        })
        .collect();
    let image = Image::from_vec_unchecked(truth.height(), truth.width(), pixels)?.quantize_f32();
    Ok(Measurement {
        image,
        mask: mask.clone(),
        scan: scan.clone(),
    })
}

pub fn simulate_full_scan(truth: &Image, scan: &ScanConfig, pass: u64) -> Result<Measurement> {
    let (h, w) = truth.dims();
    simulate_scan(truth, scan, &ScanMask::full(h, w), pass)
}

/// Settings of one pseudo-ground-truth frame: same scan with 20x dwell.
pub fn pseudo_ground_truth_scan(scan: &ScanConfig) -> ScanConfig {
    ScanConfig {
        dwell_time_us: scan.dwell_time_us * GT_DWELL_FACTOR,
        ..scan.clone()
    }
}

/// Average of 20 full-frame scans at 20x the dwell time.
pub fn simulate_pseudo_ground_truth(truth: &Image, scan: &ScanConfig) -> Result<Image> {
    let long = pseudo_ground_truth_scan(scan);
    let mut acc = vec![0.0; truth.len()];
    for j in 0..GT_AVERAGES {
        let m = simulate_full_scan(truth, &long, GT_PASS_BASE + j as u64)?;
        for (a, v) in acc.iter_mut().zip(m.image.pixels()) {
            *a += v;
        }
    }
    let n = GT_AVERAGES as f64;
    Image::from_vec_unchecked(
        truth.height(),
        truth.width(),
        acc.into_iter().map(|v| v / n).collect(),
    )
    .map(Image::quantize_f32)
}

/// Scan log entries equivalent to acquiring one pseudo ground truth.
pub fn pseudo_ground_truth_logs(pixel_count: usize, scan: &ScanConfig) -> Vec<ScanLog> {
    let long = pseudo_ground_truth_scan(scan);
    vec![ScanLog::new(pixel_count, &long); GT_AVERAGES]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanLog {
    pub pixel_count: usize,
    pub dwell_time_us: f64,
    pub power_mw: f64,
}

impl ScanLog {
    pub fn new(pixel_count: usize, scan: &ScanConfig) -> Self {
        ScanLog {
            pixel_count,
            dwell_time_us: scan.dwell_time_us,
            power_mw: scan.power_mw,
        }
    }

    pub fn exposure(&self) -> Exposure {
        let time_s = self.pixel_count as f64 * self.dwell_time_us * 1e-6;
        Exposure {
            time_s,
            // mW * s = mJ
            dose_mj: self.power_mw * time_s,
        }
    }
}

/// Beam-on time and delivered light dose.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Exposure {
    pub time_s: f64,
    pub dose_mj: f64,
}

impl Add for Exposure {
    type Output = Exposure;

    fn add(self, rhs: Exposure) -> Exposure {
        Exposure {
            time_s: self.time_s + rhs.time_s,
            dose_mj: self.dose_mj + rhs.dose_mj,
        }
    }
}

impl AddAssign for Exposure {
    fn add_assign(&mut self, rhs: Exposure) {
        *self = *self + rhs;
    }
}

pub fn accounting(logs: &[ScanLog]) -> Exposure {
    logs.iter()
        .map(ScanLog::exposure)
        .fold(Exposure::default(), Add::add)
}

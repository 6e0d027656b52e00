//! Uncertainty-driven rescanning: pick coordinates from a calibrated
//! uncertainty map, rescan them, splice them into the first scan, and feed the
//! grown stack back to the predictor.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::conformal::{format_sig6, uncertainty_map, CalibrationResult, UncertaintyMap};
use crate::denoiser::{MeasurementStack, QuantilePredictor, QuantileTriple, MAX_CHANNELS};
use crate::error::{Error, Result};
use crate::image::{Image, ScanMask};
use crate::metrics::{mean_uncertainty, mse, ssim};
use crate::scan::{accounting, simulate_full_scan, simulate_scan, Exposure, Measurement, ScanConfig, ScanLog};

/// Most rescans the five-slot input allows after the first scan.
pub const MAX_ROUNDS: usize = MAX_CHANNELS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Threshold,
    TopFraction,
    Rows,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Strategy::Threshold),
            "top_fraction" => Ok(Strategy::TopFraction),
            "rows" => Ok(Strategy::Rows),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected threshold, top_fraction or rows)"
            ))),
        }
    }
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Threshold => "threshold",
            Strategy::TopFraction => "top_fraction",
            Strategy::Rows => "rows",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    pub u_thresh: f64,
    pub fraction: f64,
    pub row_thresh: f64,
    pub max_rounds: usize,
    pub scan: ScanConfig,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            strategy: Strategy::Threshold,
            u_thresh: 0.3,
            fraction: 0.5,
            row_thresh: 0.3,
            max_rounds: MAX_ROUNDS,
            scan: ScanConfig::default(),
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds > MAX_ROUNDS {
            return Err(Error::Config(format!(
                "acquisition.max_rounds must be <= {MAX_ROUNDS}, got {}",
                self.max_rounds
            )));
        }
        match self.strategy {
            Strategy::Threshold if !(self.u_thresh >= 0.0) => {
                Err(Error::Config("acquisition.u_thresh must be >= 0".into()))
            }
            Strategy::TopFraction if !(self.fraction > 0.0 && self.fraction <= 1.0) => {
                Err(Error::Config("acquisition.fraction must lie in (0, 1]".into()))
            }
            Strategy::Rows if !(self.row_thresh >= 0.0) => {
                Err(Error::Config("acquisition.row_thresh must be >= 0".into()))
            }
            _ => self.scan.validate(),
        }
    }

    pub fn select(&self, u: &UncertaintyMap, round: usize) -> RescanSet {
        match self.strategy {
            Strategy::Threshold => select_threshold(u, self.u_thresh, round),
            Strategy::TopFraction => select_top_fraction(u, self.fraction, round),
            Strategy::Rows => select_rows(u, self.row_thresh, round),
        }
    }
}

/// Coordinates chosen for the scan of `round`.
#[derive(Clone, Debug, PartialEq)]
pub struct RescanSet {
    pub mask: ScanMask,
    pub round: usize,
}

impl RescanSet {
    pub fn len(&self) -> usize {
        self.mask.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All pixels with `û >= u_thresh`.
pub fn select_threshold(u: &UncertaintyMap, u_thresh: f64, round: usize) -> RescanSet {
    let (h, w) = u.dims();
    let img = &u.image;
    RescanSet {
        mask: ScanMask::from_fn(h, w, |r, c| img.get(r, c) >= u_thresh),
        round,
    }
}

/// The `ceil(fraction * H * W)` most uncertain pixels; ties go to the
/// smaller `(row, col)`.
pub fn select_top_fraction(u: &UncertaintyMap, fraction: f64, round: usize) -> RescanSet {
    let (h, w) = u.dims();
    let n = h * w;
    let take = ((fraction * n as f64).ceil() as usize).min(n);
    let px = u.image.pixels();
    let mut order: Vec<usize> = (0..n).collect();
    // flat index order equals (row, col) order
    order.sort_by(|&a, &b| px[b].total_cmp(&px[a]).then(a.cmp(&b)));
    let mask = ScanMask::from_coords(h, w, order[..take].iter().map(|&i| (i / w, i % w)))
        .expect("indices are in bounds");
    RescanSet { mask, round }
}

/// Every pixel of each row whose mean `û` is at least `row_thresh`.
pub fn select_rows(u: &UncertaintyMap, row_thresh: f64, round: usize) -> RescanSet {
    let (h, w) = u.dims();
    let keep: Vec<bool> = (0..h)
        .map(|r| {
            let row = &u.image.pixels()[r * w..(r + 1) * w];
            row.iter().sum::<f64>() / w as f64 >= row_thresh
        })
        .collect();
    RescanSet {
        mask: ScanMask::from_fn(h, w, |r, _| keep[r]),
        round,
    }
}

/// Copy of `base` with the pixels of `set` replaced by the rescan; the result
/// is a complete frame.
pub fn superimpose(base: &Measurement, rescan: &Measurement, set: &RescanSet) -> Result<Measurement> {
    if base.dims() != rescan.dims() || set.mask.dims() != base.dims() {
        return Err(Error::Input("superimpose: dimension mismatch".into()));
    }
    if !base.mask.is_full() {
        return Err(Error::Input("superimpose: base must be a full-frame scan".into()));
    }
    if !rescan.mask.is_subset_of(&set.mask) {
        return Err(Error::Input("superimpose: rescan covers pixels outside the set".into()));
    }
    let mut image = base.image.clone();
    for (i, (dst, &src)) in image.pixels_mut().iter_mut().zip(rescan.image.pixels()).enumerate() {
        if set.mask.contains_index(i) {
            *dst = src;
        }
    }
    let (h, w) = base.dims();
    Ok(Measurement {
        image,
        mask: ScanMask::full(h, w),
        scan: rescan.scan.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// `None` for the initial full-frame scan.
    pub rescan: Option<RescanSet>,
    pub pixels_scanned: usize,
    pub cumulative: Exposure,
    pub mean_uncertainty: f64,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AcquisitionResult {
    pub triple: QuantileTriple,
    pub uncertainty: UncertaintyMap,
    pub rounds: Vec<RoundLog>,
    pub stack: MeasurementStack,
}

impl AcquisitionResult {
    pub fn total(&self) -> Exposure {
        self.rounds.last().map(|r| r.cumulative).unwrap_or_default()
    }

    pub fn total_pixels_scanned(&self) -> usize {
        self.rounds.iter().map(|r| r.pixels_scanned).sum()
    }

    pub const CSV_HEADER: &'static str =
        "round,pixels_scanned,cum_time_s,cum_dose_mj,mean_uncertainty,mse,ssim";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
        for r in &self.rounds {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.round,
                r.pixels_scanned,
                format_sig6(r.cumulative.time_s),
                format_sig6(r.cumulative.dose_mj),
                format_sig6(r.mean_uncertainty),
                opt(r.mse),
                opt(r.ssim),
            )
            .unwrap();
        }
        out
    }
}

/// Image quality against a reference, or `None` when no reference is given.
fn quality(reference: Option<&Image>, estimate: &Image) -> Result<(Option<f64>, Option<f64>)> {
    match reference {
        None => Ok((None, None)),
        Some(r) => {
            let s = if r.height() >= 11 && r.width() >= 11 {
                Some(ssim(r, estimate)?)
            } else {
                None
            };
            Ok((Some(mse(r, estimate)?), s))
        }
    }
}

/// Closed acquisition loop on a simulated sample.
///
/// `truth` drives the simulated detector; `reference` (when given) is what
/// each round's estimate is scored against. Round `t` uses λ̂ for `t + 1`
/// passes even though rescanned pixels have mixed pass counts.
pub fn run_acquisition(
    truth: &Image,
    reference: Option<&Image>,
    predictor: &dyn QuantilePredictor,
    cal: &CalibrationResult,
    ac: &AcquisitionConfig,
    seed: u64,
) -> Result<AcquisitionResult> {
    ac.validate()?;
    for count in 1..=ac.max_rounds + 1 {
        cal.lambda_for(count)?;
    }
    let scan = ac.scan.with_seed(seed);
    let (h, w) = truth.dims();

    let base = simulate_full_scan(truth, &scan, 0)?;
    let mut stack = MeasurementStack::single(base.clone())?;
    let mut logs = vec![ScanLog::new(h * w, &scan)];
    let mut triple = predictor.predict(&stack)?;
    let mut u = uncertainty_map(&triple, cal.lambda_for(1)?)?;
    let (m, s) = quality(reference, &triple.mean)?;
    let mut rounds = vec![RoundLog {
        round: 0,
        rescan: None,
        pixels_scanned: h * w,
        cumulative: accounting(&logs),
        mean_uncertainty: mean_uncertainty(&u),
        mse: m,
        ssim: s,
    }];

    for t in 1..=ac.max_rounds {
        let set = ac.select(&u, t);
        if set.is_empty() {
            break;
        }
        let rescan = simulate_scan(truth, &scan, &set.mask, t as u64)?;
        let channel = superimpose(&base, &rescan, &set)?;
        stack.push(channel)?;
        logs.push(ScanLog::new(set.len(), &scan));
        triple = predictor.predict(&stack)?;
        u = uncertainty_map(&triple, cal.lambda_for(t + 1)?)?;
        let (m, s) = quality(reference, &triple.mean)?;
        rounds.push(RoundLog {
            round: t,
            pixels_scanned: set.len(),
            rescan: Some(set),
            cumulative: accounting(&logs),
            mean_uncertainty: mean_uncertainty(&u),
            mse: m,
            ssim: s,
        });
    }
    Ok(AcquisitionResult {
        triple,
        uncertainty: u,
        rounds,
        stack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::LambdaFit;
    use crate::denoiser::Baseline;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn umap(h: usize, w: usize, v: &[f64]) -> UncertaintyMap {
        UncertaintyMap {
            image: Image::from_vec(h, w, v.to_vec()).unwrap(),
            lambda: 1.0,
        }
    }

    fn coords(s: &RescanSet) -> Vec<(usize, usize)> {
        s.mask.coords().collect()
    }

    #[test]
    fn threshold_examples() {
        let u = umap(2, 2, &[0.1, 0.5, 0.9, 0.2]);
        assert_eq!(coords(&select_threshold(&u, 0.5, 1)), vec![(0, 1), (1, 0)]);
        assert_eq!(select_threshold(&u, 0.0, 1).len(), 4);
        assert!(select_threshold(&u, 0.91, 1).is_empty());
    }

    #[test]
    fn top_fraction_examples() {
        let u = umap(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(coords(&select_top_fraction(&u, 0.5, 1)), vec![(1, 0), (1, 1)]);
        assert_eq!(select_top_fraction(&u, 1.0, 1).len(), 4);
        let ties = umap(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(coords(&select_top_fraction(&ties, 0.25, 1)), vec![(0, 0)]);
        assert_eq!(select_top_fraction(&u, 0.3, 1).len(), 2);
    }

    #[test]
    fn row_examples() {
        let u = umap(2, 2, &[0.1, 0.1, 0.9, 0.9]);
        assert_eq!(coords(&select_rows(&u, 0.5, 1)), vec![(1, 0), (1, 1)]);
        assert_eq!(select_rows(&u, 0.0, 1).len(), 4);
    }

    fn meas(img: Image, mask: ScanMask) -> Measurement {
        Measurement {
            image: img,
            mask,
            scan: ScanConfig::default(),
        }
    }

    #[test]
    fn superimpose_cases() {
        let base = meas(Image::filled(3, 3, 0.2), ScanMask::full(3, 3));
        let full = meas(Image::filled(3, 3, 0.7), ScanMask::full(3, 3));
        let empty = RescanSet {
            mask: ScanMask::empty(3, 3),
            round: 1,
        };
        let blank = meas(Image::zeros(3, 3), ScanMask::empty(3, 3));
        assert_eq!(superimpose(&base, &blank, &empty).unwrap().image, base.image);
        let all = RescanSet {
            mask: ScanMask::full(3, 3),
            round: 1,
        };
        assert_eq!(superimpose(&base, &full, &all).unwrap().image, full.image);
        assert!(superimpose(&base, &full, &empty).is_err());
    }

    #[test]
    fn superimpose_matches_direct_splice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (5, 6);
        let b = Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
        let mask = ScanMask::from_fn(h, w, |_, _| rng.random_bool(0.4));
        let r = Image::from_fn(h, w, |r, c| if mask.contains(r, c) { rng.random_range(0.0..1.0) } else { 0.0 });
        let set = RescanSet { mask: mask.clone(), round: 2 };
        let out = superimpose(&meas(b.clone(), ScanMask::full(h, w)), &meas(r.clone(), mask.clone()), &set).unwrap();
        for row in 0..h {
            for col in 0..w {
                let want = if mask.contains(row, col) { r.get(row, col) } else { b.get(row, col) };
                assert_eq!(out.image.get(row, col), want);
            }
        }
        assert!(out.mask.is_full());
    }

    fn cal_all(lambda: f64) -> CalibrationResult {
        let mut c = CalibrationResult::new(0.1);
        for k in 1..=5 {
            c.insert(k, LambdaFit { lambda, risk: 0.0, n: 12 });
        }
        c
    }

    #[test]
    fn loop_bookkeeping() {
        let truth = Image::from_fn(16, 16, |r, c| ((r + c) % 5) as f64 / 5.0);
        let pred = Baseline::default();
        let mut ac = AcquisitionConfig {
            u_thresh: 0.0,
            ..AcquisitionConfig::default()
        };
        let res = run_acquisition(&truth, Some(&truth), &pred, &cal_all(1.0), &ac, 9).unwrap();
        assert_eq!(res.rounds.len(), 5);
        assert_eq!(res.total_pixels_scanned(), 5 * 256);
        assert_eq!(res.stack.count(), 5);
        for pair in res.rounds.windows(2) {
            assert!(pair[1].cumulative.time_s >= pair[0].cumulative.time_s);
        }
        // channel 0 survives every round untouched
        let first = simulate_full_scan(&truth, &ac.scan.with_seed(9), 0).unwrap();
        assert_eq!(res.stack.channels()[0], first);

        ac.u_thresh = 1e9;
        let res = run_acquisition(&truth, None, &pred, &cal_all(1.0), &ac, 9).unwrap();
        assert_eq!(res.rounds.len(), 1);
        assert_eq!(res.rounds[0].mse, None);

        ac.max_rounds = 0;
        ac.u_thresh = 0.0;
        let res = run_acquisition(&truth, None, &pred, &cal_all(1.0), &ac, 9).unwrap();
        assert_eq!(res.rounds.len(), 1);
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(AcquisitionResult::CSV_HEADER));
    }

    #[test]
    fn missing_lambda_is_config_error() {
        let truth = Image::filled(16, 16, 0.3);
        let mut cal = CalibrationResult::new(0.1);
        cal.insert(1, LambdaFit { lambda: 1.0, risk: 0.0, n: 12 });
        let ac = AcquisitionConfig {
            u_thresh: 0.0,
            ..AcquisitionConfig::default()
        };
        let err = run_acquisition(&truth, None, &Baseline::default(), &cal, &ac, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let bad = AcquisitionConfig { max_rounds: 5, ..ac };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn top_fraction_matches_sort_oracle(vals in proptest::collection::vec(0u8..6, 12), frac in 0.01f64..1.0) {
            let u = umap(3, 4, &vals.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let got = coords(&select_top_fraction(&u, frac, 1));
            let mut all: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
            all.sort_by(|a, b| {
                let va = vals[a.0 * 4 + a.1];
                let vb = vals[b.0 * 4 + b.1];
                vb.cmp(&va).then(a.cmp(b))
            });
            let n = (frac * 12.0).ceil() as usize;
            let mut want = all[..n].to_vec();
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn rows_match_mean_oracle(vals in proptest::collection::vec(0.0f64..1.0, 20), t in 0.0f64..1.0) {
            let u = umap(4, 5, &vals);
            let got = select_rows(&u, t, 1);
            for r in 0..4 {
                let mean: f64 = vals[r * 5..r * 5 + 5].iter().sum::<f64>() / 5.0;
                for c in 0..5 {
                    prop_assert_eq!(got.mask.contains(r, c), mean >= t);
                }
            }
        }

        #[test]
        fn raising_threshold_shrinks_set(vals in proptest::collection::vec(0.0f64..1.0, 16), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let u = umap(4, 4, &vals);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_threshold(&u, hi, 1).mask.is_subset_of(&select_threshold(&u, lo, 1).mask));
        }
    }
}

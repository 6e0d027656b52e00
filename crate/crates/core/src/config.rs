//! Flat `section.key = value` run configuration.
//!
//! Precedence is built-in defaults, then the config file, then command-line
//! overrides; every layer goes through [`RunConfig::set`].

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptive::AcquisitionConfig;
use crate::conformal::CalibrationConfig;
use crate::denoiser::{QuantileConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::scan::ScanConfig;

/// Which image the denoiser is trained and scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Average of 20 long-dwell scans, as an experiment would obtain it.
    PseudoGroundTruth,
    /// The noiseless phantom itself.
    Phantom,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelKind {
    Network,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_sites: usize,
    pub calib_sites: usize,
    pub test_sites: usize,
    pub target: Target,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_sites: 82,
            calib_sites: 12,
            test_sites: 6,
            target: Target::PseudoGroundTruth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub scan: ScanConfig,
    pub train: TrainConfig,
    pub quantile: QuantileConfig,
    pub calibration: CalibrationConfig,
    pub acquisition: AcquisitionConfig,
    pub data: DataConfig,
    pub model: ModelKind,
    pub baseline_k_sigma: f64,
    pub sweep_thresholds: Vec<f64>,
    pub site: usize,
    pub count: usize,
    pub gamma: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            scan: ScanConfig::default(),
            train: TrainConfig::default(),
            quantile: QuantileConfig::default(),
            calibration: CalibrationConfig::default(),
            acquisition: AcquisitionConfig::default(),
            data: DataConfig::default(),
            model: ModelKind::Network,
            baseline_k_sigma: 1.0,
            sweep_thresholds: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            site: 0,
            count: 1,
            gamma: 2.2,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for {key}")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "phantom.height" => self.phantom.height = parse(key, v)?,
            "phantom.width" => self.phantom.width = parse(key, v)?,
            "phantom.fiber_count" => self.phantom.fiber_count = parse(key, v)?,
            "phantom.fiber_width_px" => self.phantom.fiber_width_px = parse(key, v)?,
            "phantom.intensity_min" => self.phantom.intensity_min = parse(key, v)?,
            "phantom.intensity_max" => self.phantom.intensity_max = parse(key, v)?,
            "phantom.background_level" => self.phantom.background_level = parse(key, v)?,
            "phantom.seed" => self.phantom.seed = parse(key, v)?,

            "scan.dwell_time_us" => self.scan.dwell_time_us = parse(key, v)?,
            "scan.power_mw" => self.scan.power_mw = parse(key, v)?,
            "scan.photons_per_unit" => self.scan.photons_per_unit = parse(key, v)?,
            "scan.read_noise_sigma" => self.scan.read_noise_sigma = parse(key, v)?,
            "scan.seed" => self.scan.seed = parse(key, v)?,

            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train.patch_size" => self.train.patch_size = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,

            "quantile.q_low" => self.quantile.q_low = parse(key, v)?,
            "quantile.q_high" => self.quantile.q_high = parse(key, v)?,

            "calibration.alpha" => self.calibration.alpha = parse(key, v)?,
            "calibration.lambda_min" => self.calibration.lambda_min = parse(key, v)?,
            "calibration.lambda_max" => self.calibration.lambda_max = parse(key, v)?,
            "calibration.lambda_step" => self.calibration.lambda_step = parse(key, v)?,

            "acquisition.strategy" => self.acquisition.strategy = v.parse()?,
            "acquisition.u_thresh" => self.acquisition.u_thresh = parse(key, v)?,
            "acquisition.fraction" => self.acquisition.fraction = parse(key, v)?,
            "acquisition.row_thresh" => self.acquisition.row_thresh = parse(key, v)?,
            "acquisition.max_rounds" => self.acquisition.max_rounds = parse(key, v)?,
            "acquisition.site" => self.site = parse(key, v)?,

            "data.train_sites" => self.data.train_sites = parse(key, v)?,
            "data.calib_sites" => self.data.calib_sites = parse(key, v)?,
            "data.test_sites" => self.data.test_sites = parse(key, v)?,
            "data.target" => {
                self.data.target = match v {
                    "pseudo_gt" => Target::PseudoGroundTruth,
                    "phantom" => Target::Phantom,
                    _ => {
                        return Err(Error::Config(format!(
                            "data.target must be pseudo_gt or phantom, got `{v}`"
                        )))
                    }
                }
            }

            "model.kind" => {
                self.model = match v {
                    "network" => ModelKind::Network,
                    "baseline" => ModelKind::Baseline,
                    _ => {
                        return Err(Error::Config(format!(
                            "model.kind must be network or baseline, got `{v}`"
                        )))
                    }
                }
            }
            "model.k_sigma" => self.baseline_k_sigma = parse(key, v)?,

            "sweep.thresholds" => {
                self.sweep_thresholds = v
                    .split(',')
                    .map(|t| parse::<f64>(key, t.trim()))
                    .collect::<Result<_>>()?
            }
            "denoise.count" => self.count = parse(key, v)?,
            "report.gamma" => self.gamma = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file body. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.scan.validate()?;
        self.train.validate()?;
        self.quantile.validate()?;
        self.calibration.validate()?;
        self.acquisition_config().validate()?;
        if self.data.calib_sites < 2 {
            return Err(Error::Config("data.calib_sites must be >= 2".into()));
        }
        if self.sweep_thresholds.is_empty()
            || self.sweep_thresholds.iter().any(|t| !(*t >= 0.0))
            || self.sweep_thresholds.windows(2).any(|p| !(p[0] < p[1]))
        {
            return Err(Error::Config(
                "sweep.thresholds must be non-negative and strictly increasing".into(),
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("report.gamma must be > 0".into()));
        }
        if !(1..=crate::denoiser::MAX_CHANNELS).contains(&self.count) {
            return Err(Error::Config("denoise.count must lie in 1..=5".into()));
        }
        Ok(())
    }

    /// Acquisition settings with the rescan sharing the scan section.
    pub fn acquisition_config(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            scan: self.scan.clone(),
            ..self.acquisition.clone()
        }
    }

    /// Renders every key, so a run's effective configuration can be saved
    /// next to its outputs.
    pub fn to_text(&self) -> String {
        let target = match self.data.target {
            Target::PseudoGroundTruth => "pseudo_gt",
            Target::Phantom => "phantom",
        };
        let model = match self.model {
            ModelKind::Network => "network",
            ModelKind::Baseline => "baseline",
        };
        let thresholds: Vec<String> = self.sweep_thresholds.iter().map(|t| t.to_string()).collect();
        let p = &self.phantom;
        let s = &self.scan;
        let t = &self.train;
        let a = &self.acquisition;
        let c = &self.calibration;
        let lines = [
            ("phantom.height", p.height.to_string()),
            ("phantom.width", p.width.to_string()),
            ("phantom.fiber_count", p.fiber_count.to_string()),
            ("phantom.fiber_width_px", p.fiber_width_px.to_string()),
            ("phantom.intensity_min", p.intensity_min.to_string()),
            ("phantom.intensity_max", p.intensity_max.to_string()),
            ("phantom.background_level", p.background_level.to_string()),
            ("phantom.seed", p.seed.to_string()),
            ("scan.dwell_time_us", s.dwell_time_us.to_string()),
            ("scan.power_mw", s.power_mw.to_string()),
            ("scan.photons_per_unit", s.photons_per_unit.to_string()),
            ("scan.read_noise_sigma", s.read_noise_sigma.to_string()),
            ("scan.seed", s.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.patch_size", t.patch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("quantile.q_low", self.quantile.q_low.to_string()),
            ("quantile.q_high", self.quantile.q_high.to_string()),
            ("calibration.alpha", c.alpha.to_string()),
            ("calibration.lambda_min", c.lambda_min.to_string()),
            ("calibration.lambda_max", c.lambda_max.to_string()),
            ("calibration.lambda_step", c.lambda_step.to_string()),
            ("acquisition.strategy", a.strategy.as_str().to_string()),
            ("acquisition.u_thresh", a.u_thresh.to_string()),
            ("acquisition.fraction", a.fraction.to_string()),
            ("acquisition.row_thresh", a.row_thresh.to_string()),
            ("acquisition.max_rounds", a.max_rounds.to_string()),
            ("acquisition.site", self.site.to_string()),
            ("data.train_sites", self.data.train_sites.to_string()),
            ("data.calib_sites", self.data.calib_sites.to_string()),
            ("data.test_sites", self.data.test_sites.to_string()),
            ("data.target", target.to_string()),
            ("model.kind", model.to_string()),
            ("model.k_sigma", self.baseline_k_sigma.to_string()),
            ("sweep.thresholds", thresholds.join(",")),
            ("denoise.count", self.count.to_string()),
            ("report.gamma", self.gamma.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.scan.dwell_time_us, 1.0);
        assert_eq!(cfg.acquisition.max_rounds, 4);
        cfg.apply_text("scan.dwell_time_us = 2.5\nacquisition.max_rounds = 3 # comment\n\n")
            .unwrap();
        assert_eq!(cfg.scan.dwell_time_us, 2.5);
        cfg.set("acquisition.max_rounds", "0").unwrap();
        assert_eq!(cfg.acquisition.max_rounds, 0);
        // untouched keys keep their defaults
        assert_eq!(cfg.scan.power_mw, 5.0);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("scan.colour", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("scan.seed", "abc"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("no equals sign"), Err(Error::Config(_))));
        assert!(cfg.set("acquisition.strategy", "spiral").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("sweep.thresholds", "0.05, 0.1,0.5").unwrap();
        cfg.set("data.target", "phantom").unwrap();
        cfg.set("acquisition.strategy", "rows").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.calib_sites = 1;
        assert!(cfg.validate().is_err());
    }
}

//! Command-line front end. Every subcommand reads a [`RunConfig`] (defaults,
//! then `--config`, then flags) and writes its artifacts under the output
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptive::run_acquisition;
use crate::config::{ModelKind, RunConfig};
use crate::conformal::{calibrate, evaluate_coverage, format_sig6, uncertainty_map, CalibrationResult};
use crate::dataset::{load_site, make_dataset, Split};
use crate::denoiser::{train, Baseline, ModelWeights, QuantilePredictor, MAX_CHANNELS};
use crate::error::{Error, Result};
use crate::image::{save_pgm, Image};
use crate::metrics::{display_map, mean_uncertainty, mse, ssim, sweep};
use crate::phantom::generate_phantom;
use crate::scan::{accounting, pseudo_ground_truth_logs, ScanLog};

#[derive(Debug, Parser)]
#[command(name = "uqscan", version, about = "Uncertainty-driven adaptive scanning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `output.dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render one phantom.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the train / calibration / test sites.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the quantile regressor on the training sites.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate λ̂ for 1..5 measurements on the calibration sites.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Denoise one test site from its first `count` scans.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the adaptive acquisition loop on one test site.
    Acquire {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: Option<usize>,
        #[arg(long)]
        max_rounds: Option<usize>,
        #[arg(long)]
        u_thresh: Option<f64>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Sweep uncertainty thresholds on one test site.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: Option<usize>,
        #[arg(long)]
        max_rounds: Option<usize>,
        /// Comma-separated, strictly increasing.
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Write display maps and summary tables for the test sites.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 1 for usage or
/// configuration errors, 2 for runtime and model errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(common: &Common, overrides: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = dir.clone();
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt<T: ToString>(key: &'static str, v: &Option<T>) -> Option<(&'static str, String)> {
    v.as_ref().map(|v| (key, v.to_string()))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { common } => cmd_phantom(&load_config(&common, &[])?),
        Command::Dataset { common } => {
            let cfg = load_config(&common, &[])?;
            make_dataset(&cfg, &dataset_root(&cfg)).map(|_| ())
        }
        Command::Train { common } => cmd_train(&load_config(&common, &[])?),
        Command::Calibrate { common } => cmd_calibrate(&load_config(&common, &[])?),
        Command::Denoise {
            common,
            site,
            count,
        } => {
            let o: Vec<_> = [opt("acquisition.site", &site), opt("denoise.count", &count)]
                .into_iter()
                .flatten()
                .collect();
            cmd_denoise(&load_config(&common, &o)?)
        }
        Command::Acquire {
            common,
            site,
            max_rounds,
            u_thresh,
            strategy,
        } => {
            let o: Vec<_> = [
                opt("acquisition.site", &site),
                opt("acquisition.max_rounds", &max_rounds),
                opt("acquisition.u_thresh", &u_thresh),
                opt("acquisition.strategy", &strategy),
            ]
            .into_iter()
            .flatten()
            .collect();
            cmd_acquire(&load_config(&common, &o)?)
        }
        Command::Sweep {
            common,
            site,
            max_rounds,
            thresholds,
        } => {
            let o: Vec<_> = [
                opt("acquisition.site", &site),
                opt("acquisition.max_rounds", &max_rounds),
                opt("sweep.thresholds", &thresholds),
            ]
            .into_iter()
            .flatten()
            .collect();
            cmd_sweep(&load_config(&common, &o)?)
        }
        Command::Report { common } => cmd_report(&load_config(&common, &[])?),
    }
}

pub fn dataset_root(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

pub fn weights_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("model").join("weights.uawts")
}

pub fn calibration_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("calibration.txt")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn predictor(cfg: &RunConfig) -> Result<Box<dyn QuantilePredictor>> {
    Ok(match cfg.model {
        ModelKind::Network => Box::new(ModelWeights::load(&weights_path(cfg))?),
        ModelKind::Baseline => Box::new(Baseline {
            k_sigma: cfg.baseline_k_sigma,
        }),
    })
}

fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let img = generate_phantom(&cfg.phantom)?;
    img.save(&cfg.output_dir.join("phantom.uasim"))?;
    save_pgm(&display_map(&img, cfg.gamma)?, &cfg.output_dir.join("phantom.pgm"))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let root = dataset_root(cfg);
    let mut samples = Vec::new();
    for i in 0..cfg.data.train_sites {
        let site = load_site(cfg, &root, Split::Train, i, 15)?;
        samples.extend(site.training_samples(cfg.data.target)?);
    }
    let init = ModelWeights::init(cfg.train.seed);
    let (weights, curve) = train(&init, &samples, &cfg.train, &cfg.quantile)?;
    let path = weights_path(cfg);
    ensure_dir(path.parent().unwrap())?;
    weights.save(&path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        writeln!(csv, "{},{}", e + 1, format_sig6(*l)).unwrap();
    }
    write_text(&cfg.output_dir.join("model").join("loss_curve.csv"), &csv)
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let model = predictor(cfg)?;
    let root = dataset_root(cfg);
    let sites = (0..cfg.data.calib_sites)
        .map(|i| load_site(cfg, &root, Split::Calib, i, MAX_CHANNELS))
        .collect::<Result<Vec<_>>>()?;
    let mut result = CalibrationResult::new(cfg.calibration.alpha);
    for count in 1..=MAX_CHANNELS {
        let pairs = sites
            .iter()
            .map(|s| Ok((s.target(cfg.data.target).clone(), model.predict(&s.stack(count)?)?)))
            .collect::<Result<Vec<_>>>()?;
        result.insert(count, calibrate(&pairs, &cfg.calibration)?);
    }
    let path = calibration_path(cfg);
    ensure_dir(&cfg.output_dir)?;
    result.save(&path)
}

fn cmd_denoise(cfg: &RunConfig) -> Result<()> {
    let model = predictor(cfg)?;
    let cal = CalibrationResult::load(&calibration_path(cfg))?;
    let site = load_site(cfg, &dataset_root(cfg), Split::Test, cfg.site, cfg.count)?;
    let triple = model.predict(&site.stack(cfg.count)?)?;
    let u = uncertainty_map(&triple, cal.lambda_for(cfg.count)?)?;
    let dir = cfg
        .output_dir
        .join("denoise")
        .join(format!("site_{:03}_count_{}", cfg.site, cfg.count));
    ensure_dir(&dir)?;
    triple.lower.save(&dir.join("lower.uasim"))?;
    triple.mean.save(&dir.join("mean.uasim"))?;
    triple.upper.save(&dir.join("upper.uasim"))?;
    u.image.save(&dir.join("uncertainty.uasim"))
}

fn cmd_acquire(cfg: &RunConfig) -> Result<()> {
    let model = predictor(cfg)?;
    let cal = CalibrationResult::load(&calibration_path(cfg))?;
    let site = load_site(cfg, &dataset_root(cfg), Split::Test, cfg.site, 0)?;
    let ac = cfg.acquisition_config();
    let res = run_acquisition(
        &site.phantom,
        Some(site.target(cfg.data.target)),
        model.as_ref(),
        &cal,
        &ac,
        site.seeds.scan,
    )?;
    let dir = cfg.output_dir.join("acquire");
    ensure_dir(&dir)?;
    let stem = format!("site_{:03}", cfg.site);
    write_text(&dir.join(format!("{stem}.csv")), &res.to_csv())?;
    for r in &res.rounds {
        if let Some(set) = &r.rescan {
            set.mask.save(&dir.join(format!("{stem}_round_{}.uamsk", r.round)))?;
        }
    }
    res.triple.mean.save(&dir.join(format!("{stem}_mean.uasim")))?;
    res.uncertainty.image.save(&dir.join(format!("{stem}_uncertainty.uasim")))
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let model = predictor(cfg)?;
    let cal = CalibrationResult::load(&calibration_path(cfg))?;
    let site = load_site(cfg, &dataset_root(cfg), Split::Test, cfg.site, 0)?;
    let report = sweep(
        &site.phantom,
        Some(site.target(cfg.data.target)),
        model.as_ref(),
        &cal,
        &cfg.sweep_thresholds,
        &cfg.acquisition_config(),
        site.seeds.scan,
    )?;
    write_text(
        &cfg.output_dir.join("sweep").join(format!("site_{:03}.csv", cfg.site)),
        &report.to_csv(),
    )
}

/// Scale for uncertainty display: the value exceeded by the top 5% of pixels.
fn display_ceiling(u: &Image) -> f64 {
    let mut v = u.pixels().to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() as f64) * 0.95).floor() as usize;
    v[idx.min(v.len() - 1)].max(1e-12)
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let model = predictor(cfg)?;
    let cal = CalibrationResult::load(&calibration_path(cfg))?;
    let root = dataset_root(cfg);
    let out = cfg.output_dir.join("report");
    ensure_dir(&out)?;
    let (h, w) = (cfg.phantom.height, cfg.phantom.width);
    let ac = cfg.acquisition_config();

    let mut per_count = String::from("site,count,lambda,mse,ssim,mean_u,coverage\n");
    let mut dose = String::from("measurement,total_time_s,total_dose_mj\n");
    let row = |name: &str, logs: &[ScanLog]| {
        let e = accounting(logs);
        format!("{name},{},{}\n", format_sig6(e.time_s), format_sig6(e.dose_mj))
    };
    dose += &row("ground_truth", &pseudo_ground_truth_logs(h * w, &cfg.scan));
    dose += &row("five_noisy", &[ScanLog::new(h * w, &cfg.scan); 5]);
    dose += &row("single_noisy", &[ScanLog::new(h * w, &cfg.scan)]);

    for i in 0..cfg.data.test_sites {
        let site = load_site(cfg, &root, Split::Test, i, MAX_CHANNELS)?;
        let target = site.target(cfg.data.target);
        let dir = out.join(format!("site_{i:03}"));
        ensure_dir(&dir)?;
        save_pgm(&display_map(target, cfg.gamma)?, &dir.join("ground_truth.pgm"))?;
        save_pgm(&display_map(&site.noisy[0].image, cfg.gamma)?, &dir.join("noisy.pgm"))?;
        let mut ceiling = None;
        for count in [1, 3, 5] {
            let triple = model.predict(&site.stack(count)?)?;
            let lambda = cal.lambda_for(count)?;
            let u = uncertainty_map(&triple, lambda)?;
            let cover = evaluate_coverage(&[(target.clone(), triple.clone())], lambda)?;
            writeln!(
                per_count,
                "{i},{count},{},{},{},{},{}",
                format_sig6(lambda),
                format_sig6(mse(target, &triple.mean)?),
                format_sig6(ssim(target, &triple.mean)?),
                format_sig6(mean_uncertainty(&u)),
                format_sig6(cover)
            )
            .unwrap();
            let shown = triple.mean.map(|v| v.clamp(0.0, 1.0));
            save_pgm(&display_map(&shown, cfg.gamma)?, &dir.join(format!("denoised_{count}.pgm")))?;
            // every count on the scale of the 1-scan map
            let top = *ceiling.get_or_insert_with(|| display_ceiling(&u.image));
            let scaled = u.image.map(|v| (v / top).min(1.0));
            save_pgm(&display_map(&scaled, cfg.gamma)?, &dir.join(format!("uncertainty_{count}.pgm")))?;
        }
        let res = run_acquisition(&site.phantom, Some(target), model.as_ref(), &cal, &ac, site.seeds.scan)?;
        let logs: Vec<ScanLog> = res.rounds.iter().map(|r| ScanLog::new(r.pixels_scanned, &ac.scan)).collect();
        dose += &row(&format!("adaptive_site_{i:03}"), &logs);
    }
    write_text(&out.join("uncertainty_vs_count.csv"), &per_count)?;
    write_text(&out.join("time_dose.csv"), &dose)
}

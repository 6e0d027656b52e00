//! Synthetic multi-site datasets: per site a phantom, its pseudo ground
//! truth and twenty independent full-frame noisy scans.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{DataConfig, RunConfig, Target};
use crate::denoiser::{MeasurementStack, TrainSample, MAX_CHANNELS};
use crate::error::{Error, Result};
use crate::image::{Image, ScanMask};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::rng::mix;
use crate::scan::{simulate_full_scan, simulate_pseudo_ground_truth, Measurement, ScanConfig};

pub const NOISY_SCANS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calib, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calib => "calib",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calib => 2,
            Split::Test => 3,
        }
    }

    pub fn size(&self, data: &DataConfig) -> usize {
        match self {
            Split::Train => data.train_sites,
            Split::Calib => data.calib_sites,
            Split::Test => data.test_sites,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteSeeds {
    pub phantom: u64,
    pub scan: u64,
}

pub fn site_seeds(phantom: &PhantomConfig, scan: &ScanConfig, split: Split, index: usize) -> SiteSeeds {
    SiteSeeds {
        phantom: mix(&[phantom.seed, split.tag(), index as u64]),
        scan: mix(&[scan.seed, split.tag(), index as u64, 0x5ca9]),
    }
}

/// One imaged field of view.
#[derive(Clone, Debug)]
pub struct Site {
    pub phantom: Image,
    pub pseudo_gt: Image,
    /// Full-frame scans; scan `j` is acquisition pass `j`.
    pub noisy: Vec<Measurement>,
    pub seeds: SiteSeeds,
}

impl Site {
    pub fn target(&self, target: Target) -> &Image {
        match target {
            Target::PseudoGroundTruth => &self.pseudo_gt,
            Target::Phantom => &self.phantom,
        }
    }

    /// The first `count` scans as a stack: the same passes an acquisition
    /// that rescans every pixel would collect.
    pub fn stack(&self, count: usize) -> Result<MeasurementStack> {
        MeasurementStack::new(self.noisy[..count].to_vec())
    }

    /// One stack per pass count, drawn from disjoint scans (1 + 2 + 3 + 4 + 5
    /// of the twenty).
    pub fn training_samples(&self, target: Target) -> Result<Vec<TrainSample>> {
        let mut start = 0;
        (1..=MAX_CHANNELS)
            .map(|count| {
                let stack = MeasurementStack::new(self.noisy[start..start + count].to_vec())?;
                start += count;
                Ok(TrainSample {
                    stack,
                    target: self.target(target).clone(),
                })
            })
            .collect()
    }
}

pub fn generate_site(
    phantom: &PhantomConfig,
    scan: &ScanConfig,
    split: Split,
    index: usize,
    noisy_scans: usize,
) -> Result<Site> {
    let seeds = site_seeds(phantom, scan, split, index);
    let truth = generate_phantom(&phantom.with_seed(seeds.phantom))?;
    let site_scan = scan.with_seed(seeds.scan);
    let pseudo_gt = simulate_pseudo_ground_truth(&truth, &site_scan)?;
    let noisy = (0..noisy_scans)
        .map(|pass| simulate_full_scan(&truth, &site_scan, pass as u64))
        .collect::<Result<_>>()?;
    Ok(Site {
        phantom: truth,
        pseudo_gt,
        noisy,
        seeds,
    })
}

pub fn site_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join(format!("site_{index:03}"))
}

fn noisy_name(j: usize) -> String {
    format!("noisy_{j:02}.uasim")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every site of every split under `root` plus `manifest.txt`.
pub fn make_dataset(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(root)?;
    let mut manifest = String::new();
    for split in Split::ALL {
        writeln!(manifest, "sites.{} = {}", split.name(), split.size(&cfg.data)).unwrap();
    }
    writeln!(manifest, "noisy_scans = {NOISY_SCANS}").unwrap();
    for split in Split::ALL {
        for i in 0..split.size(&cfg.data) {
            let site = generate_site(&cfg.phantom, &cfg.scan, split, i, NOISY_SCANS)?;
            let dir = site_dir(root, split, i);
            create_dir(&dir)?;
            site.phantom.save(&dir.join("phantom.uasim"))?;
            site.pseudo_gt.save(&dir.join("gt.uasim"))?;
            for (j, m) in site.noisy.iter().enumerate() {
                m.image.save(&dir.join(noisy_name(j)))?;
            }
            let key = format!("site.{}.{i:03}", split.name());
            let rel = dir.strip_prefix(root).unwrap_or(&dir);
            writeln!(manifest, "{key}.dir = {}", rel.display()).unwrap();
            writeln!(manifest, "{key}.phantom_seed = {}", site.seeds.phantom).unwrap();
            writeln!(manifest, "{key}.scan_seed = {}", site.seeds.scan).unwrap();
        }
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a site back; only the first `noisy_scans` scans are loaded.
pub fn load_site(
    cfg: &RunConfig,
    root: &Path,
    split: Split,
    index: usize,
    noisy_scans: usize,
) -> Result<Site> {
    if index >= split.size(&cfg.data) {
        return Err(Error::Config(format!(
            "{} split has {} site(s); index {index} is out of range",
            split.name(),
            split.size(&cfg.data)
        )));
    }
    let dir = site_dir(root, split, index);
    let seeds = site_seeds(&cfg.phantom, &cfg.scan, split, index);
    let scan = cfg.scan.with_seed(seeds.scan);
    let phantom = Image::load(&dir.join("phantom.uasim"))?;
    let pseudo_gt = Image::load(&dir.join("gt.uasim"))?;
    let noisy = (0..noisy_scans.min(NOISY_SCANS))
        .map(|j| {
            let image = Image::load(&dir.join(noisy_name(j)))?;
            let (h, w) = image.dims();
            Ok(Measurement {
                image,
                mask: ScanMask::full(h, w),
                scan: scan.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Site {
        phantom,
        pseudo_gt,
        noisy,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.phantom.height = 16;
        cfg.phantom.width = 16;
        cfg.data = DataConfig {
            train_sites: 1,
            calib_sites: 2,
            test_sites: 1,
            target: Target::PseudoGroundTruth,
        };
        cfg
    }

    #[test]
    fn sites_are_distinct_and_reproducible() {
        let cfg = small();
        let a = generate_site(&cfg.phantom, &cfg.scan, Split::Train, 0, 2).unwrap();
        let b = generate_site(&cfg.phantom, &cfg.scan, Split::Train, 0, 2).unwrap();
        let c = generate_site(&cfg.phantom, &cfg.scan, Split::Test, 0, 2).unwrap();
        assert_eq!(a.phantom, b.phantom);
        assert_eq!(a.noisy, b.noisy);
        assert_ne!(a.phantom, c.phantom);
        assert_ne!(a.noisy[0], a.noisy[1]);
    }

    #[test]
    fn training_samples_use_disjoint_scans() {
        let cfg = small();
        let site = generate_site(&cfg.phantom, &cfg.scan, Split::Train, 0, NOISY_SCANS).unwrap();
        let samples = site.training_samples(Target::Phantom).unwrap();
        assert_eq!(samples.iter().map(|s| s.stack.count()).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert_eq!(samples[1].stack.channels()[0], site.noisy[1]);
        assert_eq!(samples[0].target, site.phantom);
    }

    #[test]
    fn written_sites_load_back_identically() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        make_dataset(&cfg, dir.path()).unwrap();
        let site = generate_site(&cfg.phantom, &cfg.scan, Split::Calib, 1, NOISY_SCANS).unwrap();
        let back = load_site(&cfg, dir.path(), Split::Calib, 1, NOISY_SCANS).unwrap();
        assert_eq!(back.phantom, site.phantom);
        assert_eq!(back.pseudo_gt, site.pseudo_gt);
        assert_eq!(back.noisy, site.noisy);
        assert!(load_site(&cfg, dir.path(), Split::Calib, 2, 1).is_err());
    }
}

//! Multi-measurement quantile denoising: input stacks, the output triple,
//! losses, the trainable network and a non-learned baseline.

mod baseline;
mod loss;
mod network;
mod train;

pub use baseline::{baseline_predict, Baseline};
pub use loss::{combined_loss, mse_loss, quantile_loss};
pub use network::{ModelWeights, ARCHITECTURE, ARCHITECTURE_HASH, WEIGHTS_MAGIC};
pub use train::{train, TrainConfig, TrainSample};

pub(crate) use loss::combined_loss_with_grad;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scan::Measurement;

/// Network input depth; one slot per acquisition pass.
pub const MAX_CHANNELS: usize = 5;

/// Smallest interval width any emitted triple may have.
pub const EPS_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileConfig {
    pub q_low: f64,
    pub q_high: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig {
            q_low: 0.05,
            q_high: 0.95,
        }
    }
}

impl QuantileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_low > 0.0 && self.q_low < 0.5) {
            return Err(Error::Config("quantile.q_low must lie in (0, 0.5)".into()));
        }
        if !(self.q_high > 0.5 && self.q_high < 1.0) {
            return Err(Error::Config("quantile.q_high must lie in (0.5, 1)".into()));
        }
        Ok(())
    }
}

/// Ordered passes over one field of view. Channel 0 is the original
/// full-frame scan; later channels are full frames too (rescans spliced into
/// channel 0).
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementStack {
    channels: Vec<Measurement>,
}

impl MeasurementStack {
    pub fn new(channels: Vec<Measurement>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Input("measurement stack needs at least one channel".into()))?;
        if channels.len() > MAX_CHANNELS {
            return Err(Error::Input(format!(
                "measurement stack holds at most {MAX_CHANNELS} channels, got {}",
                channels.len()
            )));
        }
        if !first.mask.is_full() {
            return Err(Error::Input("channel 0 must be a full-frame scan".into()));
        }
        let dims = first.dims();
        if channels.iter().any(|m| m.dims() != dims || m.mask.dims() != dims) {
            return Err(Error::Input("stack channels differ in size".into()));
        }
        Ok(MeasurementStack { channels })
    }

    pub fn single(m: Measurement) -> Result<Self> {
        Self::new(vec![m])
    }

    pub fn push(&mut self, m: Measurement) -> Result<()> {
        if self.channels.len() == MAX_CHANNELS {
            return Err(Error::Input("measurement stack is full".into()));
        }
        if m.dims() != self.dims() {
            return Err(Error::Input("stack channels differ in size".into()));
        }
        self.channels.push(m);
        Ok(())
    }

    pub fn channels(&self) -> &[Measurement] {
        &self.channels
    }

    /// Number of distinct acquisition passes.
    pub fn count(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    /// The five network input planes: real passes first, unused slots filled
    /// with copies of channel 0.
    pub fn filled_planes(&self) -> [&Image; MAX_CHANNELS] {
        std::array::from_fn(|i| &self.channels.get(i).unwrap_or(&self.channels[0]).image)
    }

    /// 1 for slots holding a real pass, 0 for replicated slots.
    pub fn pass_indicators(&self) -> [f64; MAX_CHANNELS] {
        std::array::from_fn(|i| if i < self.channels.len() { 1.0 } else { 0.0 })
    }
}

/// Lower quantile, point estimate and upper quantile images.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTriple {
    pub lower: Image,
    pub mean: Image,
    pub upper: Image,
}

impl QuantileTriple {
    pub fn new(lower: Image, mean: Image, upper: Image) -> Result<Self> {
        lower.ensure_same_dims(&mean, "quantile triple")?;
        upper.ensure_same_dims(&mean, "quantile triple")?;
        Ok(QuantileTriple { lower, mean, upper })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mean.dims()
    }

    pub fn width(&self) -> Image {
        let w = self
            .upper
            .pixels()
            .iter()
            .zip(self.lower.pixels())
            .map(|(u, l)| u - l)
            .collect();
        Image::from_vec_unchecked(self.mean.height(), self.mean.width(), w)
            .expect("aligned triple")
    }

    pub fn is_ordered(&self) -> bool {
        self.lower
            .pixels()
            .iter()
            .zip(self.mean.pixels())
            .zip(self.upper.pixels())
            .all(|((&l, &m), &u)| l <= m && m <= u && u - l >= EPS_MIN)
    }
}

/// Repairs quantile crossing: bounds are pushed out to the point estimate,
/// then intervals narrower than [`EPS_MIN`] are widened symmetrically.
pub fn enforce_quantile_order(triple: QuantileTriple) -> QuantileTriple {
    let QuantileTriple {
        mut lower,
        mean,
        mut upper,
    } = triple;
    for ((l, &m), u) in lower
        .pixels_mut()
        .iter_mut()
        .zip(mean.pixels())
        .zip(upper.pixels_mut().iter_mut())
    {
        let mut lo = l.min(m);
        let mut hi = u.max(m);
        if hi - lo < EPS_MIN {
            lo = m - EPS_MIN / 2.0;
            hi = m + EPS_MIN / 2.0;
            // Rounding can leave the width a hair short; nudge outward.
            while hi - lo < EPS_MIN {
                lo = lo.next_down();
                hi = hi.next_up();
            }
        }
        *l = lo;
        *u = hi;
    }
    QuantileTriple { lower, mean, upper }
}

/// Anything that maps a measurement stack to an ordered quantile triple.
pub trait QuantilePredictor {
    fn predict(&self, stack: &MeasurementStack) -> Result<QuantileTriple>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ScanMask;
    use crate::scan::ScanConfig;
    use proptest::prelude::*;

    fn img(v: &[f64]) -> Image {
        Image::from_vec_unchecked(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn ordered_triple_unchanged() {
        let t = QuantileTriple::new(img(&[0.1, 0.2]), img(&[0.3, 0.4]), img(&[0.5, 0.9])).unwrap();
        assert_eq!(enforce_quantile_order(t.clone()), t);
    }

    #[test]
    fn full_crossing_collapses_to_floor() {
        let t = QuantileTriple::new(img(&[0.9]), img(&[0.5]), img(&[0.1])).unwrap();
        let o = enforce_quantile_order(t);
        let (l, m, u) = (o.lower.get(0, 0), o.mean.get(0, 0), o.upper.get(0, 0));
        assert_eq!(m, 0.5);
        assert!(l < 0.5 && u > 0.5);
        assert!(u - l >= EPS_MIN && u - l < EPS_MIN * 1.001);
    }

    #[test]
    fn stack_rules() {
        let m = Measurement {
            image: Image::filled(4, 4, 0.5),
            mask: ScanMask::full(4, 4),
            scan: ScanConfig::default(),
        };
        let partial = Measurement {
            mask: ScanMask::empty(4, 4),
            ..m.clone()
        };
        assert!(MeasurementStack::new(vec![]).is_err());
        assert!(MeasurementStack::new(vec![partial]).is_err());
        assert!(MeasurementStack::new(vec![m.clone(); 6]).is_err());
        let mut s = MeasurementStack::single(m.clone()).unwrap();
        s.push(m.clone()).unwrap();
        assert_eq!(s.count(), 2);
        assert_eq!(s.pass_indicators(), [1.0, 1.0, 0.0, 0.0, 0.0]);
        let small = Measurement {
            image: Image::zeros(2, 2),
            mask: ScanMask::full(2, 2),
            scan: ScanConfig::default(),
        };
        assert!(s.push(small).is_err());
    }

    proptest! {
        #[test]
        fn order_invariant_holds(vals in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..40)) {
            let n = vals.len();
            let l = vals.iter().map(|v| v.0).collect();
            let m = vals.iter().map(|v| v.1).collect();
            let u = vals.iter().map(|v| v.2).collect();
            let t = QuantileTriple::new(
                Image::from_vec_unchecked(1, n, l).unwrap(),
                Image::from_vec_unchecked(1, n, m).unwrap(),
                Image::from_vec_unchecked(1, n, u).unwrap(),
            ).unwrap();
            let o = enforce_quantile_order(t.clone());
            prop_assert!(o.is_ordered());
            prop_assert_eq!(&o.mean, &t.mean);
        }
    }
}

//! Fixed four-layer convolutional quantile regressor with hand-written
//! backpropagation.
//!
//! Layout: 3x3 convolutions with reflect padding, channel widths
//! 5 -> 16 -> 16 -> 16 -> 3, leaky ReLU (slope 0.1) after the hidden layers and
//! a linear output whose planes are (lower, mean, upper). The five per-slot
//! pass indicators enter through a 16x5 matrix added to the first layer's
//! bias.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{enforce_quantile_order, MeasurementStack, QuantilePredictor, QuantileTriple, MAX_CHANNELS};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ARCHITECTURE: &str =
    "conv3x3-reflect:5-16-16-16-3;pass-indicator-bias:5x16;leaky-relu:0.1;out:lower,mean,upper";
pub const ARCHITECTURE_HASH: u64 = fnv1a(ARCHITECTURE.as_bytes());
pub const WEIGHTS_MAGIC: &[u8; 7] = b"UAWTS1\0";

const WIDTHS: [usize; 5] = [MAX_CHANNELS, 16, 16, 16, 3];
const LAYERS: usize = WIDTHS.len() - 1;
const LEAK: f64 = 0.1;
const HIDDEN: usize = WIDTHS[1];

const fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    hash
}

/// Offsets of each tensor inside the flat parameter vector, in declaration
/// order: conv1.w, conv1.b, indicator.w, conv2.w, conv2.b, ...
#[derive(Clone, Copy, Debug)]
struct Layout {
    weight: [usize; LAYERS],
    bias: [usize; LAYERS],
    indicator: usize,
    total: usize,
}

const fn layout() -> Layout {
    let mut weight = [0; LAYERS];
    let mut bias = [0; LAYERS];
    let mut indicator = 0;
    let mut off = 0;
    let mut l = 0;
    while l < LAYERS {
        weight[l] = off;
        off += WIDTHS[l + 1] * WIDTHS[l] * 9;
        bias[l] = off;
        off += WIDTHS[l + 1];
        if l == 0 {
            indicator = off;
            off += HIDDEN * MAX_CHANNELS;
        }
        l += 1;
    }
    Layout {
        weight,
        bias,
        indicator,
        total: off,
    }
}

const LAYOUT: Layout = layout();

/// Learned parameters plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: Vec<f64>,
    pub version: u32,
    pub epochs: u32,
    pub final_loss: f64,
}

/// Network input: five planes (channel-major) and the pass indicators.
#[derive(Clone, Debug)]
pub(crate) struct NetInput {
    pub planes: Vec<f64>,
    pub indicators: [f64; MAX_CHANNELS],
    pub height: usize,
    pub width: usize,
}

impl NetInput {
    pub fn from_stack(stack: &MeasurementStack) -> Self {
        let (height, width) = stack.dims();
        let mut planes = Vec::with_capacity(MAX_CHANNELS * height * width);
        for img in stack.filled_planes() {
            planes.extend_from_slice(img.pixels());
        }
        NetInput {
            planes,
            indicators: stack.pass_indicators(),
            height,
            width,
        }
    }

    /// The network input of a rectangular window of `stack`.
    pub fn from_stack_window(
        stack: &MeasurementStack,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        let mut planes = Vec::with_capacity(MAX_CHANNELS * rows * cols);
        for img in stack.filled_planes() {
            let w = img.width();
            for r in row..row + rows {
                planes.extend_from_slice(&img.pixels()[r * w + col..r * w + col + cols]);
            }
        }
        NetInput {
            planes,
            indicators: stack.pass_indicators(),
            height: rows,
            width: cols,
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn reflect_pad(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let y = reflect(py as isize - 1, h);
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[1..=w].copy_from_slice(row);
            drow[0] = row[1];
            drow[w + 1] = row[w - 2];
        }
    }
    out
}

/// Adds the reflect-padded gradient back onto the unpadded input positions.
fn fold_padded_grad(gpad: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        let src = &gpad[c * ph * pw..(c + 1) * ph * pw];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            let y = reflect(py as isize - 1, h);
            for px in 0..pw {
                let x = reflect(px as isize - 1, w);
                dst[y * w + x] += src[py * pw + px];
            }
        }
    }
    out
}

fn conv_forward(
    padded: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![0.0; out_c * h * w];
    for o in 0..out_c {
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        dst.fill(bias[o]);
        for i in 0..in_c {
            let src = &padded[i * plane..(i + 1) * plane];
            let k = &weights[(o * in_c + i) * 9..(o * in_c + i + 1) * 9];
            for y in 0..h {
                let drow = &mut dst[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let srow = &src[(y + ky) * pw..(y + ky + 1) * pw];
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        for (d, s) in drow.iter_mut().zip(&srow[kx..kx + w]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the gradient with respect to the padded input and accumulates the
/// weight and bias gradients.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    padded: &[f64],
    gout: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    gweights: &mut [f64],
    gbias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut gpad = want_input_grad.then(|| vec![0.0; in_c * plane]);
    for o in 0..out_c {
        let g = &gout[o * h * w..(o + 1) * h * w];
        gbias[o] += g.iter().sum::<f64>();
        for i in 0..in_c {
            let src = &padded[i * plane..(i + 1) * plane];
            let base = (o * in_c + i) * 9;
            for y in 0..h {
                let grow = &g[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let row_off = (y + ky) * pw;
                    let srow = &src[row_off..row_off + pw];
                    for kx in 0..3 {
                        let dot: f64 = grow.iter().zip(&srow[kx..kx + w]).map(|(a, b)| a * b).sum();
                        gweights[base + ky * 3 + kx] += dot;
                    }
                }
            }
            if let Some(gp) = gpad.as_mut() {
                let dst = &mut gp[i * plane..(i + 1) * plane];
                let k = &weights[base..base + 9];
                for y in 0..h {
                    let grow = &g[y * w..(y + 1) * w];
                    for ky in 0..3 {
                        let row_off = (y + ky) * pw;
                        for kx in 0..3 {
                            let wv = k[ky * 3 + kx];
                            for (d, s) in dst[row_off + kx..row_off + kx + w].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    gpad
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAK * z
    }
}

/// Intermediate activations kept for the backward pass.
struct Tape {
    /// Padded input of every layer.
    padded: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros() -> Self {
        ModelWeights {
            params: vec![0.0; LAYOUT.total],
            version: 1,
            epochs: 0,
            final_loss: 0.0,
        }
    }

    /// He-normal hidden layers, a small output layer, zero biases and zero
    /// indicator weights.
    pub fn init(seed: u64) -> Self {
        let mut w = Self::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..LAYERS {
            let fan_in = (WIDTHS[l] * 9) as f64;
            let gain = if l + 1 == LAYERS { 0.5 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / fan_in).sqrt()).unwrap();
            let n = WIDTHS[l + 1] * WIDTHS[l] * 9;
            for p in &mut w.params[LAYOUT.weight[l]..LAYOUT.weight[l] + n] {
                *p = dist.sample(&mut rng);
            }
        }
        w
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != LAYOUT.total {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                LAYOUT.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(ModelWeights {
            params,
            ..Self::zeros()
        })
    }

    pub fn parameter_count() -> usize {
        LAYOUT.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check(&self) -> Result<()> {
        if self.params.len() != LAYOUT.total {
            return Err(Error::Model("parameter count does not match architecture".into()));
        }
        Ok(())
    }

    fn forward_tape(&self, input: &NetInput) -> Result<Tape> {
        self.check()?;
        let (h, w) = (input.height, input.width);
        if h < 2 || w < 2 {
            return Err(Error::Input(format!("network input {h}x{w} is too small")));
        }
        let p = &self.params;
        let mut padded = Vec::with_capacity(LAYERS);
        let mut pre = Vec::with_capacity(LAYERS - 1);
        let mut act = input.planes.clone();
        for l in 0..LAYERS {
            let (ic, oc) = (WIDTHS[l], WIDTHS[l + 1]);
            let pad = reflect_pad(&act, ic, h, w);
            let mut bias = p[LAYOUT.bias[l]..LAYOUT.bias[l] + oc].to_vec();
            if l == 0 {
                for (o, b) in bias.iter_mut().enumerate() {
                    let row = &p[LAYOUT.indicator + o * MAX_CHANNELS..][..MAX_CHANNELS];
                    *b += row.iter().zip(&input.indicators).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let z = conv_forward(
                &pad,
                ic,
                oc,
                h,
                w,
                &p[LAYOUT.weight[l]..LAYOUT.weight[l] + oc * ic * 9],
                &bias,
            );
            padded.push(pad);
            if l + 1 < LAYERS {
                act = z.iter().map(|&v| leaky(v)).collect();
                pre.push(z);
            } else {
                act = z;
            }
        }
        Ok(Tape {
            padded,
            pre,
            output: act,
        })
    }

    /// Raw (unordered) output planes, channel-major: lower, mean, upper.
    pub(crate) fn forward(&self, input: &NetInput) -> Result<Vec<f64>> {
        Ok(self.forward_tape(input)?.output)
    }

    /// Combined loss of one input/target pair and its gradient with respect
    /// to every parameter, in the flat declaration order.
    pub(crate) fn loss_and_grad(
        &self,
        input: &NetInput,
        target: &[f64],
        qc: &super::QuantileConfig,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = self.forward_tape(input)?;
        let (h, w) = (input.height, input.width);
        let n = h * w;
        if target.len() != n {
            return Err(Error::Input("target does not match network input".into()));
        }
        let out = &tape.output;
        let mut gout = vec![0.0; 3 * n];
        let loss = {
            let (g_lo, rest) = gout.split_at_mut(n);
            let (g_mu, g_hi) = rest.split_at_mut(n);
            super::combined_loss_with_grad(
                [&out[..n], &out[n..2 * n], &out[2 * n..]],
                target,
                qc,
                [g_lo, g_mu, g_hi],
            )
        };

        let p = &self.params;
        let mut grad = vec![0.0; LAYOUT.total];
        let mut g = gout;
        for l in (0..LAYERS).rev() {
            let (ic, oc) = (WIDTHS[l], WIDTHS[l + 1]);
            let wr = LAYOUT.weight[l]..LAYOUT.weight[l] + oc * ic * 9;
            let br = LAYOUT.bias[l]..LAYOUT.bias[l] + oc;
            let (gw_part, gb_part) = grad.split_at_mut(br.start);
            let gpad = conv_backward(
                &tape.padded[l],
                &g,
                ic,
                oc,
                h,
                w,
                &p[wr.clone()],
                &mut gw_part[wr],
                &mut gb_part[..oc],
                l > 0,
            );
            if l == 0 {
                for o in 0..oc {
                    let gb = grad[br.start + o];
                    for c in 0..MAX_CHANNELS {
                        grad[LAYOUT.indicator + o * MAX_CHANNELS + c] += gb * input.indicators[c];
                    }
                }
                break;
            }
            let mut ga = fold_padded_grad(&gpad.expect("requested"), ic, h, w);
            for (gv, &z) in ga.iter_mut().zip(&tape.pre[l - 1]) {
                if z <= 0.0 {
                    *gv *= LEAK;
                }
            }
            g = ga;
        }
        Ok((loss, grad))
    }

    /// Pre-activations of every hidden unit; gradient checks use their signs
    /// to stay clear of the activation kink.
    pub fn hidden_preactivations(&self, stack: &MeasurementStack) -> Result<Vec<f64>> {
        Ok(self.forward_tape(&NetInput::from_stack(stack))?.pre.concat())
    }

    /// Training objective on a whole stack and its gradient with respect to
    /// [`params`](Self::params).
    pub fn objective(
        &self,
        stack: &MeasurementStack,
        target: &Image,
        qc: &super::QuantileConfig,
    ) -> Result<(f64, Vec<f64>)> {
        stack.channels()[0].image.ensure_same_dims(target, "objective target")?;
        self.loss_and_grad(&NetInput::from_stack(stack), target.pixels(), qc)
    }

    /// Network output before quantile ordering is enforced.
    pub fn predict_raw(&self, stack: &MeasurementStack) -> Result<QuantileTriple> {
        let input = NetInput::from_stack(stack);
        let (h, w) = (input.height, input.width);
        let mut out = self.forward(&input)?;
        let n = h * w;
        let upper = out.split_off(2 * n);
        let mean = out.split_off(n);
        QuantileTriple::new(
            Image::from_vec_unchecked(h, w, out)?,
            Image::from_vec_unchecked(h, w, mean)?,
            Image::from_vec_unchecked(h, w, upper)?,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 + 4 * self.params.len() + 8);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&ARCHITECTURE_HASH.to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&(self.final_loss as f32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let expected = 7 + 8 + 4 * LAYOUT.total + 8;
        if bytes.len() < 15 || &bytes[..7] != WEIGHTS_MAGIC {
            return Err(Error::format(path, "not a weights file"));
        }
        let hash = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
        if hash != ARCHITECTURE_HASH {
            return Err(Error::Model(format!(
                "{}: architecture hash {hash:#018x} does not match {ARCHITECTURE_HASH:#018x}",
                path.display()
            )));
        }
        if bytes.len() != expected {
            return Err(Error::Model(format!(
                "{}: expected {expected} bytes for this architecture, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let body = &bytes[15..15 + 4 * LAYOUT.total];
        let params = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let footer = &bytes[15 + 4 * LAYOUT.total..];
        let mut w = Self::from_params(params)?;
        w.epochs = u32::from_le_bytes(footer[..4].try_into().unwrap());
        w.final_loss = f32::from_le_bytes(footer[4..8].try_into().unwrap()) as f64;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl QuantilePredictor for ModelWeights {
    fn predict(&self, stack: &MeasurementStack) -> Result<QuantileTriple> {
        Ok(enforce_quantile_order(self.predict_raw(stack)?))
    }
}

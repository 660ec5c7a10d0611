//! Small lesion classifier operating on the pixels of a lesion mask.
//!
//! Activations exist only on mask pixels: a 3x3 convolution reads zero for
//! any neighbour outside the mask (or outside the image). Pooling divides by
//! the mask cardinality, so the output does not depend on how much empty
//! image surrounds the lesion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::{ImagePlane, Mask, Protocol};
use crate::error::{Error, Result};

pub const CLASSES: usize = 2;
const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_channels: usize,
    /// Widths of the 1x1 signal-exploitation layers (empty for parameter-map input).
    pub exploit_widths: Vec<usize>,
    /// Widths of the 3x3 feature layers.
    pub feature_widths: Vec<usize>,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ArchitectureConfig {
    /// Raw b-value channels: two 1x1 layers (8, 4) then two 3x3 layers (16, 16).
    pub fn e2e(input_channels: usize) -> Self {
        ArchitectureConfig { input_channels, exploit_widths: vec![8, 4], feature_widths: vec![16, 16], pooling: Pooling::Average }
    }

    /// ADC and AKC maps straight into the 3x3 feature layers.
    pub fn f2e() -> Self {
        ArchitectureConfig { input_channels: 2, exploit_widths: Vec::new(), feature_widths: vec![16, 16], pooling: Pooling::Average }
    }

    pub fn is_f2e(&self) -> bool {
        self.exploit_widths.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.feature_widths.is_empty() {
            return Err(Error::InvalidConfig("architecture needs input channels and at least one feature layer".into()));
        }
        if self.exploit_widths.iter().chain(&self.feature_widths).any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.is_f2e() && self.input_channels != 2 {
            return Err(Error::InvalidConfig("a network without 1x1 stage takes exactly the ADC and AKC maps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Pointwise,
    Conv3x3,
    Affine,
}

impl LayerKind {
    pub fn taps(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 9,
            _ => 1,
        }
    }
}

/// Weights laid out as `[output][tap][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(kind: LayerKind, inputs: usize, outputs: usize) -> Self {
        Layer { kind, inputs, outputs, weights: vec![0.0; outputs * kind.taps() * inputs], bias: vec![0.0; outputs] }
    }

    fn fan_in(&self) -> usize {
        self.inputs * self.kind.taps()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Parameter `i` counting weights first, then biases.
    pub fn parameter_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn parameter(&self, i: usize) -> f64 {
        let nw = self.weights.len();
        if i < nw {
            self.weights[i]
        } else {
            self.bias[i - nw]
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Epoch whose weights were kept (0 = initial weights).
    pub selected_epoch: usize,
    pub validation_error: Option<f64>,
    /// Validation error after each epoch.
    #[serde(default)]
    pub validation_history: Vec<f64>,
    /// b-values of the signal channels the network was trained on (E2E), or
    /// the protocol its parameter maps were fitted from (F2E).
    #[serde(default)]
    pub protocol: Option<Protocol>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub architecture: ArchitectureConfig,
    pub layers: Vec<Layer>,
    pub meta: TrainingMeta,
}

impl Network {
    /// All-zero network: every output is exactly 0.5.
    pub fn zeros(architecture: ArchitectureConfig) -> Result<Self> {
        architecture.validate()?;
        let mut layers = Vec::new();
        let mut width = architecture.input_channels;
        for &w in &architecture.exploit_widths {
            layers.push(Layer::zeros(LayerKind::Pointwise, width, w));
            width = w;
        }
        for &w in &architecture.feature_widths {
            layers.push(Layer::zeros(LayerKind::Conv3x3, width, w));
            width = w;
        }
        layers.push(Layer::zeros(LayerKind::Affine, width, CLASSES));
        Ok(Network { architecture, layers, meta: TrainingMeta::default() })
    }

    /// Uniform initialization scaled by fan-in (He-uniform for ReLU layers),
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(architecture: ArchitectureConfig, rng: &mut R) -> Result<Self> {
        let mut net = Network::zeros(architecture)?;
        for layer in &mut net.layers {
            let gain = if layer.kind == LayerKind::Affine { 3.0 } else { 6.0 };
            let limit = (gain / layer.fan_in() as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Redraw hidden units that never activate on any pixel of `inputs`,
    /// layer by layer, for at most `rounds` attempts per layer. Inputs are
    /// non-negative signals, so a unit whose weights point away from all of
    /// them is dead from the start and receives no gradient. Returns the
    /// number of units redrawn.
    pub fn revive_dead_units<R: Rng + ?Sized>(&mut self, inputs: &[&MaskedInput], rng: &mut R, rounds: usize) -> usize {
        let mut redrawn = 0;
        for k in 0..self.layers.len() - 1 {
            for _ in 0..rounds {
                let width = self.layers[k].outputs;
                let mut alive = vec![false; width];
                for input in inputs {
                    let acts = self.run(input).activations;
                    for (i, &v) in acts[k].iter().enumerate() {
                        if v > 0.0 {
                            alive[i % width] = true;
                        }
                    }
                }
                if alive.iter().all(|&a| a) {
                    break;
                }
                let layer = &mut self.layers[k];
                let limit = (6.0 / layer.fan_in() as f64).sqrt();
                let row = layer.kind.taps() * layer.inputs;
                for (o, _) in alive.iter().enumerate().filter(|(_, &a)| !a) {
                    for w in &mut layer.weights[o * row..(o + 1) * row] {
                        *w = rng.gen_range(-limit..limit);
                    }
                    redrawn += 1;
                }
            }
        }
        redrawn
    }

    fn check_input(&self, input: &MaskedInput) -> Result<()> {
        if input.channels != self.architecture.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} channels, input has {}",
                self.architecture.input_channels, input.channels
            )));
        }
        if input.pixels() == 0 {
            return Err(Error::ShapeMismatch("input has no mask pixels".into()));
        }
        Ok(())
    }

    /// Class probabilities `[benign, malignant]`.
    pub fn probabilities(&self, input: &MaskedInput) -> Result<[f64; 2]> {
        self.check_input(input)?;
        Ok(self.run(input).probs)
    }

    /// Probability of malignancy.
    pub fn forward(&self, input: &MaskedInput) -> Result<f64> {
        Ok(self.probabilities(input)?[1])
    }

    fn run(&self, input: &MaskedInput) -> ForwardCache {
        let pixels = input.pixels();
        let mut activations = Vec::with_capacity(self.layers.len());
        let hidden = &self.layers[..self.layers.len() - 1];
        for (k, layer) in hidden.iter().enumerate() {
            let x = if k == 0 { &input.values } else { &activations[k - 1] };
            let mut out = vec![0.0; pixels * layer.outputs];
            spatial_forward(layer, x, &input.neighbors, &mut out);
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(out);
        }
        let last = activations.last().expect("at least one feature layer");
        let width = hidden.last().expect("hidden layer").outputs;
        let (pooled, argmax) = pool(last, pixels, width, self.architecture.pooling);
        let affine = self.layers.last().expect("affine layer");
        let mut logits = [0.0; CLASSES];
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit = affine.bias[c] + (0..width).map(|i| affine.weights[c * width + i] * pooled[i]).sum::<f64>();
        }
        ForwardCache { activations, pooled, argmax, probs: softmax(logits) }
    }

    /// Cross-entropy loss for `label_index` and its gradient for every layer.
    pub fn loss_and_gradient(&self, input: &MaskedInput, label_index: usize) -> Result<(f64, Vec<Layer>)> {
        self.check_input(input)?;
        let cache = self.run(input);
        let loss = -cache.probs[label_index].max(f64::MIN_POSITIVE).ln();
        let pixels = input.pixels();
        let mut grads: Vec<Layer> =
            self.layers.iter().map(|l| Layer::zeros(l.kind, l.inputs, l.outputs)).collect();

        let mut dlogits = cache.probs;
        dlogits[label_index] -= 1.0;
        let n_layers = self.layers.len();
        let affine = &self.layers[n_layers - 1];
        let width = affine.inputs;
        let mut dpooled = vec![0.0; width];
        {
            let g = &mut grads[n_layers - 1];
            for c in 0..CLASSES {
                g.bias[c] = dlogits[c];
                for i in 0..width {
                    g.weights[c * width + i] = dlogits[c] * cache.pooled[i];
                    dpooled[i] += dlogits[c] * affine.weights[c * width + i];
                }
            }
        }

        let mut dh = vec![0.0; pixels * width];
        match self.architecture.pooling {
            Pooling::Average => {
                let inv = 1.0 / pixels as f64;
                for p in 0..pixels {
                    for c in 0..width {
                        dh[p * width + c] = dpooled[c] * inv;
                    }
                }
            }
            Pooling::Max => {
                for c in 0..width {
                    dh[cache.argmax[c] * width + c] = dpooled[c];
                }
            }
        }

        for k in (0..n_layers - 1).rev() {
            let layer = &self.layers[k];
            let h = &cache.activations[k];
            for (d, &a) in dh.iter_mut().zip(h) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let x = if k == 0 { &input.values } else { &cache.activations[k - 1] };
            let need_dx = k > 0;
            let dx = spatial_backward(layer, x, &input.neighbors, &dh, &mut grads[k], need_dx);
            dh = dx;
        }
        Ok((loss, grads))
    }
}

struct ForwardCache {
    /// Post-ReLU activations of every hidden layer, pixel-major.
    activations: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    probs: [f64; 2],
}

fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn pool(h: &[f64], pixels: usize, width: usize, pooling: Pooling) -> (Vec<f64>, Vec<usize>) {
    let mut pooled = vec![0.0; width];
    let mut argmax = vec![0; width];
    match pooling {
        Pooling::Average => {
            for p in 0..pixels {
                for c in 0..width {
                    pooled[c] += h[p * width + c];
                }
            }
            for v in &mut pooled {
                *v /= pixels as f64;
            }
        }
        Pooling::Max => {
            for c in 0..width {
                let mut best = f64::NEG_INFINITY;
                for p in 0..pixels {
                    let v = h[p * width + c];
                    if v > best {
                        best = v;
                        argmax[c] = p;
                    }
                }
                pooled[c] = best;
            }
        }
    }
    (pooled, argmax)
}

fn source_pixel(layer: &Layer, neighbors: &[[u32; 9]], p: usize, tap: usize) -> Option<usize> {
    if layer.kind.taps() == 1 {
        Some(p)
    } else {
        let q = neighbors[p][tap];
        (q != NO_NEIGHBOR).then_some(q as usize)
    }
}

fn spatial_forward(layer: &Layer, x: &[f64], neighbors: &[[u32; 9]], out: &mut [f64]) {
    let (nin, nout, taps) = (layer.inputs, layer.outputs, layer.kind.taps());
    let pixels = out.len() / nout;
    for p in 0..pixels {
        let row = &mut out[p * nout..(p + 1) * nout];
        row.copy_from_slice(&layer.bias);
        for tap in 0..taps {
            let Some(q) = source_pixel(layer, neighbors, p, tap) else { continue };
            let xin = &x[q * nin..(q + 1) * nin];
            for (o, acc) in row.iter_mut().enumerate() {
                let w = &layer.weights[(o * taps + tap) * nin..(o * taps + tap + 1) * nin];
                *acc += w.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Accumulates parameter gradients into `grad`; returns the input gradient
/// when `need_dx`.
fn spatial_backward(layer: &Layer, x: &[f64], neighbors: &[[u32; 9]], dz: &[f64], grad: &mut Layer, need_dx: bool) -> Vec<f64> {
    let (nin, nout, taps) = (layer.inputs, layer.outputs, layer.kind.taps());
    let pixels = dz.len() / nout;
    let mut dx = if need_dx { vec![0.0; pixels * nin] } else { Vec::new() };
    for p in 0..pixels {
        let drow = &dz[p * nout..(p + 1) * nout];
        for (o, &d) in drow.iter().enumerate() {
            grad.bias[o] += d;
        }
        for tap in 0..taps {
            let Some(q) = source_pixel(layer, neighbors, p, tap) else { continue };
            let xin = &x[q * nin..(q + 1) * nin];
            for (o, &d) in drow.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let base = (o * taps + tap) * nin;
                let gw = &mut grad.weights[base..base + nin];
                for (g, &xv) in gw.iter_mut().zip(xin) {
                    *g += d * xv;
                }
                if need_dx {
                    let w = &layer.weights[base..base + nin];
                    let dxq = &mut dx[q * nin..(q + 1) * nin];
                    for (g, &wv) in dxq.iter_mut().zip(w) {
                        *g += d * wv;
                    }
                }
            }
        }
    }
    dx
}

/// Channel values on the pixels of a mask, with the 3x3 neighbourhood of
/// each pixel resolved to mask-pixel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub channels: usize,
    /// Pixel-major values: `values[p * channels + c]`.
    pub values: Vec<f64>,
    neighbors: Vec<[u32; 9]>,
}

impl MaskedInput {
    /// Gather `planes` over `mask`, dividing every value by `scale`.
    pub fn from_planes(planes: &[&ImagePlane], mask: &Mask, scale: f64) -> Result<Self> {
        let (w, h) = mask.dims();
        if let Some(p) = planes.iter().find(|p| p.dims() != (w, h)) {
            return Err(Error::ShapeMismatch(format!("plane {:?} vs mask {:?}", p.dims(), (w, h))));
        }
        let pixels = mask.indices();
        let mut slot = vec![NO_NEIGHBOR; w * h];
        for (k, &i) in pixels.iter().enumerate() {
            slot[i] = k as u32;
        }
        let neighbors = pixels
            .iter()
            .map(|&i| {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                let mut n = [NO_NEIGHBOR; 9];
                for (tap, entry) in n.iter_mut().enumerate() {
                    let (nx, ny) = (x + tap as isize % 3 - 1, y + tap as isize / 3 - 1);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        *entry = slot[ny as usize * w + nx as usize];
                    }
                }
                n
            })
            .collect();
        let channels = planes.len();
        let mut values = Vec::with_capacity(pixels.len() * channels);
        for &i in &pixels {
            for p in planes {
                values.push(p.data()[i] / scale);
            }
        }
        Ok(MaskedInput { channels, values, neighbors })
    }

    pub fn pixels(&self) -> usize {
        self.neighbors.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, channels: usize, w: usize, h: usize) -> (Vec<ImagePlane>, Mask) {
        let planes = (0..channels)
            .map(|_| ImagePlane::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap())
            .collect();
        let mask = Mask::from_fn(w, h, |x, y| (x * 7 + y * 3) % 5 != 0 && x > 0);
        (planes, mask)
    }

    fn input(planes: &[ImagePlane], mask: &Mask) -> MaskedInput {
        let refs: Vec<&ImagePlane> = planes.iter().collect();
        MaskedInput::from_planes(&refs, mask, 1.0).unwrap()
    }

    #[test]
    fn zero_network_gives_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (planes, mask) = random_input(&mut rng, 4, 6, 6);
        let net = Network::zeros(ArchitectureConfig::e2e(4)).unwrap();
        assert_eq!(net.forward(&input(&planes, &mask)).unwrap(), 0.5);
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (planes, mask) = random_input(&mut rng, 3, 7, 5);
            let mut net = Network::init(ArchitectureConfig::e2e(3), &mut rng).unwrap();
            // exaggerate weights to push the softmax to its limits
            for l in &mut net.layers {
                for w in &mut l.weights {
                    *w *= 3.0;
                }
            }
            let p = net.probabilities(&input(&planes, &mask)).unwrap();
            assert!(p[0] >= 0.0 && p[1] <= 1.0);
            assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (planes, mask) = random_input(&mut rng, 3, 4, 4);
        let net = Network::zeros(ArchitectureConfig::e2e(4)).unwrap();
        assert!(matches!(net.forward(&input(&planes, &mask)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn single_pixel_matches_hand_unrolled_dense_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchitectureConfig::e2e(3);
        let net = Network::init(arch, &mut rng).unwrap();
        for l in &net.layers {
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        let mut net = net;
        for l in &mut net.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
        let values = [0.9, 0.55, 0.2];
        let planes: Vec<ImagePlane> = values
            .iter()
            .map(|&v| {
                let mut d = vec![0.0; 25];
                d[12] = v;
                ImagePlane::new(5, 5, d).unwrap()
            })
            .collect();
        let mask = Mask::from_fn(5, 5, |x, y| x == 2 && y == 2);

        // Dense oracle: a 3x3 conv on an isolated pixel only sees its centre tap.
        let mut h: Vec<f64> = values.to_vec();
        for l in &net.layers[..net.layers.len() - 1] {
            let taps = l.kind.taps();
            let centre = if taps == 9 { 4 } else { 0 };
            h = (0..l.outputs)
                .map(|o| {
                    let mut acc = l.bias[o];
                    for i in 0..l.inputs {
                        acc += l.weights[(o * taps + centre) * l.inputs + i] * h[i];
                    }
                    acc.max(0.0)
                })
                .collect();
        }
        let a = net.layers.last().unwrap();
        let z: Vec<f64> = (0..2).map(|c| a.bias[c] + (0..a.inputs).map(|i| a.weights[c * a.inputs + i] * h[i]).sum::<f64>()).collect();
        let oracle = z[1].exp() / (z[0].exp() + z[1].exp());
        let got = net.forward(&input(&planes, &mask)).unwrap();
        assert!((got - oracle).abs() < 1e-14, "{got} vs {oracle}");
    }

    #[test]
    fn padding_with_empty_pixels_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (planes, mask) = random_input(&mut rng, 4, 6, 5);
        let net = Network::init(ArchitectureConfig::e2e(4), &mut rng).unwrap();
        let base = net.forward(&input(&planes, &mask)).unwrap();
        // embed into a 10x9 image at offset (2, 3)
        let pad = |src: &ImagePlane| {
            let mut d = vec![0.0; 90];
            for y in 0..5 {
                for x in 0..6 {
                    d[(y + 3) * 10 + x + 2] = src.get(x, y);
                }
            }
            ImagePlane::new(10, 9, d).unwrap()
        };
        let padded: Vec<ImagePlane> = planes.iter().map(pad).collect();
        let big_mask = Mask::from_fn(10, 9, |x, y| x >= 2 && y >= 3 && x < 8 && y < 8 && mask.get(x - 2, y - 3));
        let got = net.forward(&input(&padded, &big_mask)).unwrap();
        assert!((got - base).abs() <= 1e-12);
    }

    #[test]
    fn max_pooling_gradient_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (planes, mask) = random_input(&mut rng, 2, 5, 5);
        let arch = ArchitectureConfig { pooling: Pooling::Max, ..ArchitectureConfig::f2e() };
        let net = Network::init(arch, &mut rng).unwrap();
        let (loss, grads) = net.loss_and_gradient(&input(&planes, &mask), 1).unwrap();
        assert!(loss > 0.0);
        assert!(grads.iter().any(|g| g.weights.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn architecture_validation() {
        assert!(ArchitectureConfig::e2e(4).validate().is_ok());
        assert!(ArchitectureConfig::f2e().validate().is_ok());
        let bad = ArchitectureConfig { input_channels: 3, ..ArchitectureConfig::f2e() };
        assert!(bad.validate().is_err());
    }
}

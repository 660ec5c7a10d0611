use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::Label;
use crate::error::{Error, Result};

use super::input::{predict_prepared, Example};
use super::network::{ArchitectureConfig, Layer, MaskedInput, Network, TrainingMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 8, max_epochs: 100, seed: 0, beta1: 0.9, beta2: 0.999, adam_epsilon: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        let zeros = |net: &Network| net.layers.iter().map(|l| Layer::zeros(l.kind, l.inputs, l.outputs)).collect();
        Adam { m: zeros(net), v: zeros(net), t: 0 }
    }

    fn step(&mut self, net: &mut Network, grads: &[Layer], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            for i in 0..layer.parameter_count() {
                let g = grads[k].parameter(i);
                let m = self.m[k].parameter_mut(i);
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                let mhat = *m / c1;
                let v = self.v[k].parameter_mut(i);
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let vhat = *v / c2;
                *layer.parameter_mut(i) -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

fn add_into(acc: &mut [Layer], g: &[Layer], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.weights.iter_mut().zip(&b.weights) {
            *x += scale * y;
        }
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x += scale * y;
        }
    }
}

/// Attempts per layer to redraw units that are inactive on the whole training set.
pub const REVIVE_ROUNDS: usize = 20;

/// Misclassification rate at a 0.5 threshold; empty lesions score 0.
pub fn validation_error(net: &Network, cases: &[Example]) -> Result<f64> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for c in cases {
        let p = predict_prepared(net, c.input.as_ref())?;
        if (p > 0.5) != c.label.is_positive() {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / cases.len() as f64)
}

fn sorted_by_id(cases: &[Example]) -> Vec<&Example> {
    let mut v: Vec<&Example> = cases.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Mini-batch Adam on cross-entropy. Cases are first sorted by id so that
/// the result depends only on the seed, not on the order they were passed in.
/// Empty lesions take no part in gradient steps. Units inactive on every
/// training pixel are redrawn before the first step. The returned weights are the
/// epoch snapshot with the lowest validation error (earliest on ties).
pub fn train(cases: &[Example], val_cases: &[Example], arch: &ArchitectureConfig, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    let has = |l: Label| cases.iter().any(|c| c.label == l);
    if !has(Label::Benign) || !has(Label::Malignant) {
        return Err(Error::SingleClassTraining);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(arch.clone(), &mut rng)?;
    net.meta = TrainingMeta { seed: cfg.seed, ..TrainingMeta::default() };
    let trainable: Vec<(&MaskedInput, usize)> =
        sorted_by_id(cases).into_iter().filter_map(|c| c.input.as_ref().map(|i| (i, c.label.index()))).collect();
    let val: Vec<Example> = sorted_by_id(val_cases).into_iter().cloned().collect();
    if cfg.max_epochs == 0 || trainable.is_empty() {
        return Ok(net);
    }

    let inputs: Vec<&MaskedInput> = trainable.iter().map(|t| t.0).collect();
    let redrawn = net.revive_dead_units(&inputs, &mut rng, REVIVE_ROUNDS);
    if redrawn > 0 {
        log::debug!("redrew {redrawn} inactive units at initialization");
    }

    let mut adam = Adam::new(&net);
    let mut best: Option<(f64, usize, Vec<Layer>)> = None;
    let mut order: Vec<usize> = (0..trainable.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            batch_step(&mut net, &mut adam, &trainable, batch, cfg)?;
        }
        let err = validation_error(&net, &val)?;
        net.meta.validation_history.push(err);
        if best.as_ref().map_or(true, |(e, _, _)| err < *e) {
            best = Some((err, epoch, net.layers.clone()));
        }
    }
    let (err, epoch, layers) = best.expect("at least one epoch");
    net.layers = layers;
    net.meta.epochs_run = cfg.max_epochs;
    net.meta.selected_epoch = epoch;
    net.meta.validation_error = Some(err);
    Ok(net)
}

fn batch_step(net: &mut Network, adam: &mut Adam, trainable: &[(&MaskedInput, usize)], batch: &[usize], cfg: &TrainConfig) -> Result<()> {
    let mut acc: Vec<Layer> = net.layers.iter().map(|l| Layer::zeros(l.kind, l.inputs, l.outputs)).collect();
    for &i in batch {
        let (input, label) = trainable[i];
        let (_, g) = net.loss_and_gradient(input, label)?;
        add_into(&mut acc, &g, 1.0 / batch.len() as f64);
    }
    adam.step(net, &acc, cfg);
    Ok(())
}

/// Exactly `steps` Adam mini-batch updates of `net`, no model selection.
/// Batches follow the same seeded per-pass shuffle as [`train`].
pub fn train_steps(net: &mut Network, cases: &[Example], cfg: &TrainConfig, steps: usize) -> Result<()> {
    cfg.validate()?;
    let trainable: Vec<(&MaskedInput, usize)> =
        sorted_by_id(cases).into_iter().filter_map(|c| c.input.as_ref().map(|i| (i, c.label.index()))).collect();
    if trainable.is_empty() {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net);
    let mut order: Vec<usize> = (0..trainable.len()).collect();
    let mut done = 0;
    while done < steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size).take(steps - done) {
            batch_step(net, &mut adam, &trainable, batch, cfg)?;
            done += 1;
        }
    }
    Ok(())
}

/// Analytic and central-difference derivative of the loss for one parameter.
pub fn gradient_pair(net: &Network, input: &MaskedInput, label: Label, layer: usize, index: usize, step: f64) -> Result<(f64, f64)> {
    let (_, grads) = net.loss_and_gradient(input, label.index())?;
    let analytic = grads[layer].parameter(index);
    let mut probe = net.clone();
    let w = net.layers[layer].parameter(index);
    *probe.layers[layer].parameter_mut(index) = w + step;
    let plus = probe.loss_and_gradient(input, label.index())?.0;
    *probe.layers[layer].parameter_mut(index) = w - step;
    let minus = probe.loss_and_gradient(input, label.index())?.0;
    Ok((analytic, (plus - minus) / (2.0 * step)))
}

/// Relative error floor, so parameters with vanishing gradient compare absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and finite-difference gradients
/// over up to `per_layer` random parameters per layer (all when fewer).
/// Step is `1e-5 * max(1, |w|)`.
pub fn backward_check(net: &Network, input: &MaskedInput, label: Label, per_layer: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, layer) in net.layers.iter().enumerate() {
        let n = layer.parameter_count();
        let picks: Vec<usize> = if n <= per_layer { (0..n).collect() } else { (0..per_layer).map(|_| rng.gen_range(0..n)).collect() };
        for i in picks {
            let step = 1e-5 * layer.parameter(i).abs().max(1.0);
            let (a, fd) = gradient_pair(net, input, label, k, i, step)?;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRADIENT_CHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwi::{ImagePlane, Mask};

    fn blob(rng: &mut ChaCha8Rng, id: usize, label: Label, channels: usize) -> Example {
        let (w, h) = (6, 6);
        let level = if label.is_positive() { 0.4 } else { 1.0 };
        let planes: Vec<ImagePlane> = (0..channels)
            .map(|c| {
                let v = level * (1.0 - 0.2 * c as f64) + rng.gen_range(-0.05..0.05);
                ImagePlane::new(w, h, vec![v; w * h]).unwrap()
            })
            .collect();
        let r = rng.gen_range(1..3);
        let mask = Mask::from_fn(w, h, |x, y| x.abs_diff(3) <= r && y.abs_diff(3) <= r);
        let refs: Vec<&ImagePlane> = planes.iter().collect();
        Example { id: format!("c{id:03}"), label, input: Some(MaskedInput::from_planes(&refs, &mask, 1.0).unwrap()) }
    }

    fn toy(seed: u64, n: usize, channels: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| blob(&mut rng, i, if i % 2 == 0 { Label::Malignant } else { Label::Benign }, channels)).collect()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = toy(1, 24, 4);
        let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 60, ..TrainConfig::default() };
        let net = train(&data, &data, &ArchitectureConfig::e2e(4), &cfg).unwrap();
        assert_eq!(validation_error(&net, &data).unwrap(), 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = toy(2, 10, 4);
        let cfg = TrainConfig { max_epochs: 0, seed: 9, ..TrainConfig::default() };
        let net = train(&data, &data, &ArchitectureConfig::e2e(4), &cfg).unwrap();
        let init = Network::init(ArchitectureConfig::e2e(4), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(net.layers, init.layers);
    }

    #[test]
    fn deterministic_and_order_independent() {
        let data = toy(3, 16, 2);
        let cfg = TrainConfig { max_epochs: 5, seed: 4, ..TrainConfig::default() };
        let a = train(&data, &data, &ArchitectureConfig::f2e(), &cfg).unwrap();
        let b = train(&data, &data, &ArchitectureConfig::f2e(), &cfg).unwrap();
        assert_eq!(a, b);
        let mut shuffled = data.clone();
        shuffled.reverse();
        let c = train(&shuffled, &shuffled, &ArchitectureConfig::f2e(), &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn train_steps_changes_weights_deterministically() {
        let data = toy(9, 12, 2);
        let init = Network::init(ArchitectureConfig::f2e(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (mut a, mut b) = (init.clone(), init.clone());
        train_steps(&mut a, &data, &TrainConfig::default(), 10).unwrap();
        train_steps(&mut b, &data, &TrainConfig::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers, init.layers);
        let mut c = init.clone();
        train_steps(&mut c, &data, &TrainConfig::default(), 0).unwrap();
        assert_eq!(c, init);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let data: Vec<Example> = toy(4, 10, 2).into_iter().filter(|e| e.label == Label::Benign).collect();
        assert!(matches!(
            train(&data, &data, &ArchitectureConfig::f2e(), &TrainConfig::default()),
            Err(Error::SingleClassTraining)
        ));
    }

    #[test]
    fn gradient_check_at_init_and_after_training() {
        for (arch, channels) in [(ArchitectureConfig::e2e(4), 4), (ArchitectureConfig::f2e(), 2)] {
            let data = toy(5, 12, channels);
            for steps in [0, 10] {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let mut net = Network::init(arch.clone(), &mut rng).unwrap();
                let inputs: Vec<&MaskedInput> = data.iter().filter_map(|e| e.input.as_ref()).collect();
                net.revive_dead_units(&inputs, &mut rng, REVIVE_ROUNDS);
                let cfg = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
                train_steps(&mut net, &data, &cfg, steps).unwrap();
                for ex in data.iter().take(3) {
                    let err = backward_check(&net, ex.input.as_ref().unwrap(), ex.label, 50, 11).unwrap();
                    assert!(err <= 1e-4, "arch {arch:?} steps {steps}: {err}");
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_kernel_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Network::init(ArchitectureConfig::e2e(3), &mut rng).unwrap();
        for l in &mut net.layers {
            for b in &mut l.bias {
                *b = 0.1;
            }
        }
        let zero = ImagePlane::zeros(4, 4);
        let mask = Mask::from_fn(4, 4, |x, _| x > 0);
        let input = MaskedInput::from_planes(&[&zero, &zero, &zero], &mask, 1.0).unwrap();
        let (_, g) = net.loss_and_gradient(&input, 1).unwrap();
        assert!(g[0].weights.iter().all(|&v| v == 0.0));
        assert!(g[0].bias.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let data = toy(7, 4, 2);
        let net = Network::init(ArchitectureConfig::f2e(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let ex = &data[0];
        let input = ex.input.as_ref().unwrap();
        // pick the affine weight with the largest gradient, away from ReLU kinks
        let (_, g) = net.loss_and_gradient(input, ex.label.index()).unwrap();
        let last = net.layers.len() - 1;
        let idx = (0..g[last].weights.len()).max_by(|&a, &b| g[last].weights[a].abs().total_cmp(&g[last].weights[b].abs())).unwrap();
        let err = |h: f64| {
            let (a, fd) = gradient_pair(&net, input, ex.label, last, idx, h).unwrap();
            (a - fd).abs()
        };
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e2 < e1, "{e1} {e2}");
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
    }
}

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{Mode, ScenarioSpec};
use crate::dki::{fit_roi, roi_mean_coefficients, threshold_classify, FitConfig, THRESHOLD_WIDTH};
use crate::dwi::{BValue, DwiStack, ImagePlane, Label, LabeledCase, Protocol};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mbda::{adapt_stack, effective_config};
use crate::nn::{
    make_splits, maps_input, predict_prepared, stack_input, train, ArchitectureConfig, Example, MaskedInput, Network, Pooling,
    SplitPlan, TrainConfig, FOLDS,
};
use crate::stats::{auc, delong_test, delong_variance, holm_bonferroni, DelongComparison, ScoredSet};

/// How a training channel with no measured counterpart is filled when the
/// network sees altered input without adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingFill {
    /// Closest measured b-value; ties go to the lower one.
    #[default]
    Nearest,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub pooling: Pooling,
    pub missing_fill: MissingFill,
    pub alpha: f64,
    pub split_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            pooling: Pooling::Average,
            missing_fill: MissingFill::Nearest,
            alpha: 0.05,
            split_seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.train.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    /// Pooled test scores in dataset order.
    pub scores: Vec<f64>,
    pub auc: f64,
    pub fold_aucs: Vec<f64>,
    /// Sample SD of the per-fold AUCs.
    pub fold_sd: f64,
    /// DeLong standard error of the pooled AUC.
    pub delong_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Mode,
    pub b: Mode,
    pub delong: DelongComparison,
    pub holm_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub case_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub modes: Vec<ModeResult>,
    pub comparisons: Vec<Comparison>,
}

impl ScenarioResult {
    pub fn mode(&self, mode: Mode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn auc(&self, mode: Mode) -> Option<f64> {
        self.mode(mode).map(|m| m.auc)
    }

    pub fn comparison(&self, a: Mode, b: Mode) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }
}

/// Pairs tested for every row: MBDA against each altered-input baseline.
pub const TESTED_PAIRS: [(Mode, Mode); 2] = [(Mode::Mbda, Mode::AlteredE2e), (Mode::Mbda, Mode::AlteredF2e)];

/// Independent training seed for fold `k`.
pub fn fold_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.next_u64()
}

/// Inference planes laid out in the training protocol's channel order.
/// A replaced b-value takes the slot it replaced; a missing one is filled
/// per `fill`.
pub fn slot_altered(inference: &DwiStack, training: &Protocol, fill: MissingFill) -> Result<DwiStack> {
    let wanted = training.to_set();
    let extras: Vec<BValue> = inference.protocol().bvalues().iter().copied().filter(|b| !wanted.contains(b)).collect();
    let absent: Vec<BValue> = training.bvalues().iter().copied().filter(|b| !inference.protocol().contains(*b)).collect();
    let (w, h) = inference.dims();
    let planes = training
        .bvalues()
        .iter()
        .map(|&b| {
            if let Some(p) = inference.plane(b) {
                return p.clone();
            }
            if extras.len() == absent.len() {
                // shifted: pair replaced and replacement values in order
                let k = absent.iter().position(|&a| a == b).expect("absent b-value");
                return inference.plane(extras[k]).expect("measured").clone();
            }
            match fill {
                MissingFill::Zero => ImagePlane::zeros(w, h),
                MissingFill::Nearest => {
                    let nearest = inference
                        .protocol()
                        .bvalues()
                        .iter()
                        .min_by(|x, y| (x.value() - b.value()).abs().total_cmp(&(y.value() - b.value()).abs()))
                        .expect("non-empty protocol");
                    inference.plane(*nearest).expect("measured").clone()
                }
            }
        })
        .collect();
    Ok(DwiStack::with_theta(training.clone(), planes, inference.lesion_mask().clone(), inference.fat_mask().clone(), inference.theta()))
}

#[derive(Default)]
struct Prepared {
    e2e_train: Option<MaskedInput>,
    f2e_train: Option<MaskedInput>,
    tests: BTreeMap<Mode, Option<MaskedInput>>,
}

fn fit_maps_input(stack: &DwiStack, fit: &FitConfig) -> Result<Option<MaskedInput>> {
    if stack.lesion_mask().is_empty() {
        return Ok(None);
    }
    let maps = fit_roi(stack, &effective_config(stack, fit), Execution::Sequential)?;
    maps_input(&maps)
}

fn prepare(case: &LabeledCase, spec: &ScenarioSpec, cfg: &ScenarioConfig) -> Result<Prepared> {
    let train_stack = case.stack.subset_protocol(&spec.training.to_set())?;
    let infer_stack = case.stack.subset_protocol(&spec.inference.to_set())?;
    let e2e = spec.modes.iter().any(|m| !m.uses_f2e());
    let f2e = spec.modes.iter().any(|m| m.uses_f2e());
    let mut out = Prepared::default();
    if e2e {
        out.e2e_train = stack_input(&train_stack)?;
    }
    if f2e {
        out.f2e_train = fit_maps_input(&train_stack, &cfg.fit)?;
    }
    for &mode in &spec.modes {
        let input = match mode {
            Mode::Matched => out.e2e_train.clone(),
            Mode::F2eMatched => out.f2e_train.clone(),
            Mode::AlteredE2e => stack_input(&slot_altered(&infer_stack, &spec.training, cfg.missing_fill)?)?,
            Mode::Mbda => {
                if infer_stack.lesion_mask().is_empty() {
                    None
                } else {
                    stack_input(&adapt_stack(&infer_stack, &spec.training, &cfg.fit, Execution::Sequential)?.0)?
                }
            }
            Mode::AlteredF2e => fit_maps_input(&infer_stack, &cfg.fit)?,
        };
        out.tests.insert(mode, input);
    }
    Ok(out)
}

fn examples(dataset: &[LabeledCase], idx: &[usize], inputs: impl Fn(usize) -> Option<MaskedInput>) -> Vec<Example> {
    idx.iter().map(|&i| Example { id: dataset[i].id.clone(), label: dataset[i].label, input: inputs(i) }).collect()
}

type FoldScores = BTreeMap<Mode, Vec<(usize, f64)>>;

fn run_fold(
    k: usize,
    dataset: &[LabeledCase],
    prepared: &[Prepared],
    split: &SplitPlan,
    spec: &ScenarioSpec,
    cfg: &ScenarioConfig,
) -> Result<FoldScores> {
    let fold = split.fold(k);
    let train_cfg = TrainConfig { seed: fold_seed(cfg.train.seed, k), ..cfg.train.clone() };
    let mut nets: BTreeMap<bool, Network> = BTreeMap::new();
    for f2e in [false, true] {
        if !spec.modes.iter().any(|m| m.uses_f2e() == f2e) {
            continue;
        }
        let pick = |i: usize| if f2e { prepared[i].f2e_train.clone() } else { prepared[i].e2e_train.clone() };
        let arch = if f2e {
            ArchitectureConfig { pooling: cfg.pooling, ..ArchitectureConfig::f2e() }
        } else {
            ArchitectureConfig { pooling: cfg.pooling, ..ArchitectureConfig::e2e(spec.training.len()) }
        };
        let net = train(&examples(dataset, &fold.train, pick), &examples(dataset, &fold.validation, pick), &arch, &train_cfg)?;
        log::debug!("fold {k} {} selected epoch {}", if f2e { "f2e" } else { "e2e" }, net.meta.selected_epoch);
        nets.insert(f2e, net);
    }
    let mut out = FoldScores::new();
    for &mode in &spec.modes {
        let net = &nets[&mode.uses_f2e()];
        let scores = fold
            .test
            .iter()
            .map(|&i| Ok((i, predict_prepared(net, prepared[i].tests[&mode].as_ref())?)))
            .collect::<Result<Vec<_>>>()?;
        out.insert(mode, scores);
    }
    Ok(out)
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Cross-validated evaluation of one scenario. One E2E and one F2E network
/// are trained per fold (seeded by fold), and test scores of all folds are
/// pooled. Comparisons are Holm-corrected within the row; [`run_matrix`]
/// corrects across the whole matrix instead.
pub fn run_scenario(
    spec: &ScenarioSpec,
    dataset: &[LabeledCase],
    split: &SplitPlan,
    cfg: &ScenarioConfig,
    exec: Execution,
) -> Result<ScenarioResult> {
    spec.validate()?;
    cfg.validate()?;
    if split.parts.len() != dataset.len() {
        return Err(Error::ShapeMismatch(format!("split covers {} cases, dataset has {}", split.parts.len(), dataset.len())));
    }
    log::info!("scenario {}: train {} / infer {}", spec.kind, spec.training, spec.inference);
    let prepared = exec.try_map(dataset, |c| prepare(c, spec, cfg))?;
    let folds: Vec<FoldScores> =
        exec.map_range(FOLDS, |k| run_fold(k, dataset, &prepared, split, spec, cfg)).into_iter().collect::<Result<_>>()?;

    let labels: Vec<Label> = dataset.iter().map(|c| c.label).collect();
    let mut modes = Vec::new();
    for &mode in &spec.modes {
        let mut scores = vec![f64::NAN; dataset.len()];
        let mut fold_aucs = Vec::with_capacity(FOLDS);
        for fold in &folds {
            let part = &fold[&mode];
            for &(i, s) in part {
                scores[i] = s;
            }
            let set = ScoredSet::new(part.iter().map(|p| p.1).collect(), part.iter().map(|p| labels[p.0]).collect())?;
            fold_aucs.push(auc(&set)?);
        }
        let pooled = ScoredSet::new(scores.clone(), labels.clone())?;
        modes.push(ModeResult {
            mode,
            auc: auc(&pooled)?,
            fold_sd: sample_sd(&fold_aucs),
            delong_se: delong_variance(&pooled)?.sqrt(),
            fold_aucs,
            scores,
        });
    }

    let mut comparisons = Vec::new();
    for (a, b) in TESTED_PAIRS {
        let (Some(ra), Some(rb)) = (modes.iter().find(|m| m.mode == a), modes.iter().find(|m| m.mode == b)) else { continue };
        let delong = delong_test(&ScoredSet::new(ra.scores.clone(), labels.clone())?, &ScoredSet::new(rb.scores.clone(), labels.clone())?)?;
        comparisons.push(Comparison { a, b, delong, holm_adjusted: delong.p_two_sided, significant: false });
    }
    let mut result =
        ScenarioResult { spec: spec.clone(), case_ids: dataset.iter().map(|c| c.id.clone()).collect(), labels, modes, comparisons };
    apply_holm(std::slice::from_mut(&mut result), cfg.alpha)?;
    Ok(result)
}

/// Holm correction over every comparison of `results` as one family.
pub fn apply_holm(results: &mut [ScenarioResult], alpha: f64) -> Result<()> {
    let p: Vec<f64> = results.iter().flat_map(|r| r.comparisons.iter().map(|c| c.delong.p_two_sided)).collect();
    let holm = holm_bonferroni(&p, alpha)?;
    let mut k = 0;
    for r in results.iter_mut() {
        for c in &mut r.comparisons {
            c.holm_adjusted = holm.adjusted[k];
            c.significant = holm.reject[k];
            k += 1;
        }
    }
    Ok(())
}

/// Cases sorted by id, so results do not depend on load order.
pub fn canonical_order(dataset: &[LabeledCase]) -> Vec<LabeledCase> {
    let mut v = dataset.to_vec();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Every spec on the same split, with one Holm family across all rows.
/// Rows are independent and run in sequence; each row parallelizes its
/// case preparation and folds.
pub fn run_matrix(specs: &[ScenarioSpec], dataset: &[LabeledCase], cfg: &ScenarioConfig, exec: Execution) -> Result<Vec<ScenarioResult>> {
    let dataset = canonical_order(dataset);
    let labels: Vec<Label> = dataset.iter().map(|c| c.label).collect();
    let split = make_splits(&labels, cfg.split_seed)?;
    let mut results = specs.iter().map(|s| run_scenario(s, &dataset, &split, cfg, exec)).collect::<Result<Vec<_>>>()?;
    apply_holm(&mut results, cfg.alpha)?;
    Ok(results)
}

/// Fitted ROI-mean ADC through the logistic threshold rule; empty lesions
/// score 0. A classifier-free reference for how separable a dataset is.
pub fn threshold_baseline(dataset: &[LabeledCase], protocol: &BTreeSet<BValue>, threshold: f64, fit: &FitConfig, exec: Execution) -> Result<ScoredSet> {
    let scores = exec.try_map(dataset, |c| -> Result<f64> {
        let stack = c.stack.subset_protocol(protocol)?;
        if stack.lesion_mask().is_empty() {
            return Ok(0.0);
        }
        let maps = fit_roi(&stack, &effective_config(&stack, fit), Execution::Sequential)?;
        let (adc, _) = roi_mean_coefficients(&maps)?;
        Ok(threshold_classify(adc, threshold, THRESHOLD_WIDTH))
    })?;
    ScoredSet::new(scores, dataset.iter().map(|c| c.label).collect())
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mbda_core::dki::{fit_roi, roi_mean_coefficients, save_maps};
use mbda_core::dwi::{parse_bvalues, BValue, DwiStack, Label, LabeledCase, Protocol};
use mbda_core::exec::Execution;
use mbda_core::io::{load_dataset, load_stack_with_manifest, manifest_for, save_dataset, save_stack_with, write_json};
use mbda_core::mbda::{adapt_stack, effective_config};
use mbda_core::nn::{
    load_network, make_splits, maps_input, predict_case, save_network, stack_input, train, ArchitectureConfig, CaseInput, Example,
    MaskedInput, Network,
};
use mbda_core::phantom::generate_dataset;
use mbda_core::scenario::{canonical_order, emit_report, enumerate_scenarios, fold_seed, load_report, marks, render_csv, run_matrix, Mode, ScenarioKind};
use mbda_core::stats::{auc, delong_test, delong_variance, ScoredSet};
use mbda_core::{Error, Result};
use serde::Serialize;

use crate::config::{write_run_record, RunConfig};
use crate::{Arch, Cli, Command, PhantomCommand, ScenarioCommand};

pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const NETWORK_FILE: &str = "network.bin";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn protocol_arg(text: &str) -> Result<Protocol> {
    Protocol::new(parse_bvalues(text)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?);
    Ok(())
}

struct Context<'a> {
    config: RunConfig,
    exec: Execution,
    argv: &'a [String],
}

impl Context<'_> {
    fn record(&self, dir: &Path) -> Result<()> {
        write_run_record(dir, self.argv, &self.config)
    }
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let exec = match cli.threads {
        Some(0) => return Err(Error::InvalidConfig("--threads must be at least 1".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Execution::default()
        }
        None => Execution::default(),
    };
    apply_flag_overrides(&mut config, &cli.command)?;
    let ctx = Context { config: config.resolve()?, exec, argv };

    match &cli.command {
        Command::Phantom { action: PhantomCommand::Generate(a) } => phantom_generate(&ctx, &a.out),
        Command::Fit(a) => fit(&ctx, &a.input, &a.out, a.protocol.as_deref()),
        Command::Restore(a) => restore(&ctx, &a.input, &a.target_protocol, &a.out),
        Command::Train(a) => train_cmd(&ctx, &a.dataset, &a.out, a.arch, a.protocol.as_deref(), a.fold),
        Command::Predict(a) => predict(&ctx, &a.network, a.dataset.as_deref(), a.input.as_deref(), &a.out, a.adapt),
        Command::Evaluate(a) => evaluate(&ctx, &a.predictions, a.against.as_deref(), a.out.as_deref()),
        Command::Scenario { action: ScenarioCommand::Enumerate(a) } => scenario_enumerate(&ctx, a.protocol.as_deref()),
        Command::Scenario { action: ScenarioCommand::Run(a) } => scenario_run(&ctx, &a.dataset, &a.out),
        Command::Report(a) => report(&a.input, a.out.as_deref()),
    }
}

/// Flags win over file values; they are folded into the config before
/// validation so that `run.json` records what actually ran.
fn apply_flag_overrides(config: &mut RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::Phantom { action: PhantomCommand::Generate(a) } => {
            if let Some(n) = a.benign {
                config.dataset.benign = n;
            }
            if let Some(n) = a.malignant {
                config.dataset.malignant = n;
            }
            if let Some(s) = a.noise {
                config.phantom.noise_sigma = s;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                config.train.max_epochs = e;
            }
        }
        Command::Scenario { action: ScenarioCommand::Run(a) } => {
            if let Some(k) = &a.kind {
                config.scenario.kind = Some(k.parse()?);
            }
            if let Some(rows) = &a.rows {
                let parsed = rows
                    .split(',')
                    .map(|r| r.trim().parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad row index '{r}'"))))
                    .collect::<Result<Vec<_>>>()?;
                config.scenario.rows = Some(parsed);
            }
            if let Some(m) = &a.modes {
                config.scenario.modes = m.split(',').map(|s| s.trim().parse()).collect::<Result<BTreeSet<Mode>>>()?;
            }
            if let Some(e) = a.epochs {
                config.train.max_epochs = e;
            }
        }
        Command::Scenario { action: ScenarioCommand::Enumerate(a) } => {
            if let Some(k) = &a.kind {
                config.scenario.kind = Some(k.parse()?);
            }
        }
        _ => {}
    }
    Ok(())
}

fn phantom_generate(ctx: &Context, out: &Path) -> Result<()> {
    let c = &ctx.config;
    let cases = generate_dataset(&c.phantom, c.dataset.benign, c.dataset.malignant, ctx.exec)?;
    let echo = serde_json::to_value(&c.phantom).expect("config serializes");
    let index = save_dataset(&cases, c.phantom.seed, echo, out)?;
    ctx.record(out)?;
    log::info!("wrote {} cases to {}", cases.len(), index.display());
    Ok(())
}

fn fit(ctx: &Context, input: &Path, out: &Path, protocol: Option<&str>) -> Result<()> {
    let (stack, manifest) = load_stack_with_manifest(input)?;
    let stack = match protocol {
        Some(p) => stack.subset_protocol(&protocol_arg(p)?.to_set())?,
        None => stack,
    };
    let cfg = effective_config(&stack, &ctx.config.fit);
    let maps = fit_roi(&stack, &cfg, ctx.exec)?;
    save_maps(&maps, manifest.id.as_deref(), &cfg, out)?;
    ctx.record(out)?;
    #[derive(Serialize)]
    struct FitSummary {
        voxels: usize,
        unconverged: usize,
        akc_constrained: bool,
        adc_mean: Option<f64>,
        akc_mean: Option<f64>,
    }
    let means = roi_mean_coefficients(&maps).ok();
    print_json(&FitSummary {
        voxels: maps.mask.count(),
        unconverged: maps.unconverged,
        akc_constrained: cfg.constrain_akc_zero,
        adc_mean: means.map(|m| m.0),
        akc_mean: means.map(|m| m.1),
    })
}

fn restore(ctx: &Context, input: &Path, target: &str, out: &Path) -> Result<()> {
    let (stack, source) = load_stack_with_manifest(input)?;
    let target = protocol_arg(target)?;
    let (adapted, report) = adapt_stack(&stack, &target, &ctx.config.fit, ctx.exec)?;
    let mut manifest = manifest_for(&adapted);
    manifest.id = source.id;
    manifest.label = source.label;
    manifest.annotations = source.annotations;
    manifest.annotations.insert("adaptation".into(), serde_json::to_value(&report).expect("report serializes"));
    save_stack_with(&adapted, &manifest, out)?;
    ctx.record(out)?;
    print_json(&report)
}

fn dataset_protocol(cases: &[LabeledCase]) -> Result<Protocol> {
    let first = cases.first().ok_or_else(|| Error::InvalidConfig("dataset is empty".into()))?;
    let p = first.stack.protocol().clone();
    if cases.iter().any(|c| c.stack.protocol() != &p) {
        return Err(Error::Protocol("dataset cases do not share one protocol".into()));
    }
    Ok(p)
}

fn maps_example_input(stack: &DwiStack, ctx: &Context) -> Result<Option<MaskedInput>> {
    if stack.lesion_mask().is_empty() {
        return Ok(None);
    }
    let maps = fit_roi(stack, &effective_config(stack, &ctx.config.fit), ctx.exec)?;
    maps_input(&maps)
}

fn train_cmd(ctx: &Context, dataset: &Path, out: &Path, arch: Arch, protocol: Option<&str>, fold: usize) -> Result<()> {
    let (_, cases) = load_dataset(dataset)?;
    let cases = canonical_order(&cases);
    let protocol = match protocol {
        Some(p) => protocol_arg(p)?,
        None => dataset_protocol(&cases)?,
    };
    let labels: Vec<Label> = cases.iter().map(|c| c.label).collect();
    let split = make_splits(&labels, ctx.config.scenario.split_seed)?;
    if fold >= split.folds() {
        return Err(Error::InvalidConfig(format!("fold {fold} out of range 0..{}", split.folds())));
    }
    let f = split.fold(fold);
    let build = |idx: &[usize]| -> Result<Vec<Example>> {
        idx.iter()
            .map(|&i| {
                let stack = cases[i].stack.subset_protocol(&protocol.to_set())?;
                let input = match arch {
                    Arch::E2e => stack_input(&stack)?,
                    Arch::F2e => maps_example_input(&stack, ctx)?,
                };
                Ok(Example { id: cases[i].id.clone(), label: cases[i].label, input })
            })
            .collect()
    };
    let architecture = match arch {
        Arch::E2e => ArchitectureConfig { pooling: ctx.config.scenario.pooling, ..ArchitectureConfig::e2e(protocol.len()) },
        Arch::F2e => ArchitectureConfig { pooling: ctx.config.scenario.pooling, ..ArchitectureConfig::f2e() },
    };
    let cfg = mbda_core::nn::TrainConfig { seed: fold_seed(ctx.config.train.seed, fold), ..ctx.config.train.clone() };
    let mut net = train(&build(&f.train)?, &build(&f.validation)?, &architecture, &cfg)?;
    net.meta.protocol = Some(protocol);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    save_network(&net, &out.join(NETWORK_FILE))?;
    write_json(&out.join("split.json"), &split)?;
    ctx.record(out)?;
    log::info!("selected epoch {} (validation error {:?})", net.meta.selected_epoch, net.meta.validation_error);
    Ok(())
}

/// Bring a stack onto the network's training protocol.
fn align_stack(stack: &DwiStack, net: &Network, adapt: bool, ctx: &Context) -> Result<DwiStack> {
    let Some(target) = &net.meta.protocol else {
        return Ok(stack.clone());
    };
    let have = stack.protocol().to_set();
    if target.to_set().is_subset(&have) {
        return stack.subset_protocol(&target.to_set());
    }
    if net.architecture.is_f2e() {
        // parameter maps are fitted from whatever was measured
        return Ok(stack.clone());
    }
    if !adapt {
        let missing: Vec<BValue> = target.to_set().difference(&have).copied().collect();
        return Err(Error::MissingBValue(missing[0].value()));
    }
    Ok(adapt_stack(stack, target, &ctx.config.fit, Execution::Sequential)?.0)
}

fn score_stack(stack: &DwiStack, net: &Network, adapt: bool, ctx: &Context) -> Result<f64> {
    let stack = align_stack(stack, net, adapt, ctx)?;
    if net.architecture.is_f2e() {
        if stack.lesion_mask().is_empty() {
            return Ok(0.0);
        }
        let maps = fit_roi(&stack, &effective_config(&stack, &ctx.config.fit), Execution::Sequential)?;
        predict_case(net, CaseInput::Maps(&maps))
    } else {
        predict_case(net, CaseInput::Stack(&stack))
    }
}

fn predict(ctx: &Context, network: &Path, dataset: Option<&Path>, input: Option<&Path>, out: &Path, adapt: bool) -> Result<()> {
    let net = load_network(network)?;
    let rows: Vec<(String, Option<Label>, DwiStack)> = match (dataset, input) {
        (Some(d), _) => canonical_order(&load_dataset(d)?.1).into_iter().map(|c| (c.id, Some(c.label), c.stack)).collect(),
        (None, Some(i)) => {
            let (stack, m) = load_stack_with_manifest(i)?;
            vec![(m.id.unwrap_or_else(|| "case".into()), m.label, stack)]
        }
        (None, None) => return Err(Error::InvalidConfig("either --dataset or --in is required".into())),
    };
    let scores = ctx.exec.try_map(&rows, |(_, _, stack)| score_stack(stack, &net, adapt, ctx))?;
    let mut csv = String::from("id,label,score\n");
    for ((id, label, _), s) in rows.iter().zip(&scores) {
        let _ = writeln!(csv, "{id},{},{s}", label.map(|l| l.to_string()).unwrap_or_default());
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join(PREDICTIONS_CSV);
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    ctx.record(out)
}

/// Rows of a predictions file: id, label, score.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, Label, f64)>> {
    let file = if path.is_dir() { path.join(PREDICTIONS_CSV) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
    let bad = |line: &str| Error::Format { path: file.clone(), reason: format!("bad predictions row '{line}'") };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(line));
            }
            let label = match cols[1] {
                "benign" => Label::Benign,
                "malignant" => Label::Malignant,
                _ => return Err(bad(line)),
            };
            let score: f64 = cols[2].parse().map_err(|_| bad(line))?;
            Ok((cols[0].to_string(), label, score))
        })
        .collect()
}

fn evaluate(ctx: &Context, predictions: &Path, against: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let a = read_predictions(predictions)?;
    let set_a = ScoredSet::new(a.iter().map(|r| r.2).collect(), a.iter().map(|r| r.1).collect())?;
    let mut result = BTreeMap::new();
    result.insert("cases".to_string(), serde_json::json!(a.len()));
    result.insert("auc".to_string(), serde_json::json!(auc(&set_a)?));
    result.insert("delong_se".to_string(), serde_json::json!(delong_variance(&set_a)?.sqrt()));
    if let Some(other) = against {
        let b = read_predictions(other)?;
        let by_id: BTreeMap<&str, (Label, f64)> = b.iter().map(|r| (r.0.as_str(), (r.1, r.2))).collect();
        if by_id.len() != a.len() {
            return Err(Error::LabelMismatch);
        }
        let paired = a
            .iter()
            .map(|r| by_id.get(r.0.as_str()).filter(|(l, _)| *l == r.1).map(|v| v.1).ok_or(Error::LabelMismatch))
            .collect::<Result<Vec<f64>>>()?;
        let set_b = ScoredSet::new(paired, set_a.labels().to_vec())?;
        let cmp = delong_test(&set_a, &set_b)?;
        result.insert("comparison".to_string(), serde_json::to_value(cmp).expect("serializes"));
        result.insert("significant".to_string(), serde_json::json!(cmp.p_two_sided <= ctx.config.eval.alpha));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("evaluation.json"), &result)?;
        ctx.record(dir)?;
    }
    print_json(&result)
}

fn kinds(ctx: &Context) -> Vec<ScenarioKind> {
    match ctx.config.scenario.kind {
        Some(k) => vec![k],
        None => vec![ScenarioKind::Shifted, ScenarioKind::Missing],
    }
}

fn scenario_enumerate(ctx: &Context, protocol: Option<&str>) -> Result<()> {
    let full = match protocol {
        Some(p) => protocol_arg(p)?,
        None => Protocol::standard(),
    };
    #[derive(Serialize)]
    struct Row {
        index: usize,
        kind: ScenarioKind,
        training: Protocol,
        inference: Protocol,
        train_marks: Vec<&'static str>,
        test_marks: Vec<&'static str>,
    }
    let mut rows = Vec::new();
    for kind in kinds(ctx) {
        for (index, spec) in enumerate_scenarios(&full, kind).into_iter().enumerate() {
            let (train_marks, test_marks) = marks(&spec, &full);
            rows.push(Row { index, kind, training: spec.training, inference: spec.inference, train_marks, test_marks });
        }
    }
    print_json(&rows)
}

fn scenario_run(ctx: &Context, dataset: &Path, out: &Path) -> Result<()> {
    let kind = ctx.config.scenario.kind.ok_or_else(|| Error::InvalidConfig("scenario kind is required (--kind or scenario.kind)".into()))?;
    let (_, cases) = load_dataset(dataset)?;
    let full = dataset_protocol(&cases)?;
    let all = enumerate_scenarios(&full, kind);
    let selected: Vec<_> = match &ctx.config.scenario.rows {
        Some(rows) => rows
            .iter()
            .map(|&r| all.get(r).cloned().ok_or_else(|| Error::InvalidConfig(format!("row {r} out of range 0..{}", all.len()))))
            .collect::<Result<_>>()?,
        None => all,
    };
    let specs: Vec<_> = selected.into_iter().map(|s| mbda_core::scenario::ScenarioSpec { modes: ctx.config.scenario.modes.clone(), ..s }).collect();
    let results = run_matrix(&specs, &cases, &ctx.config.scenario_config(), ctx.exec)?;
    emit_report(&results, &full, out)?;
    ctx.record(out)?;
    log::info!("{} scenario rows written to {}", results.len(), out.display());
    Ok(())
}

fn report(input: &Path, out: Option<&Path>) -> Result<()> {
    let r = load_report(input)?;
    match out {
        Some(dir) => {
            emit_report(&r.rows, &r.full_protocol, dir)?;
        }
        None => print!("{}", render_csv(&r.rows, &r.full_protocol)),
    }
    Ok(())
}


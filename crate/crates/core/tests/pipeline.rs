use std::collections::BTreeSet;

use mbda_core::dki::{fit_roi, FitConfig};
use mbda_core::dwi::{BValue, Protocol};
use mbda_core::exec::Execution;
use mbda_core::io::{load_dataset, save_dataset};
use mbda_core::mbda::adapt_stack;
use mbda_core::nn::{
    load_network, make_splits, predict_case, save_network, train, ArchitectureConfig, CaseInput, Example, TrainConfig,
};
use mbda_core::phantom::{generate_dataset, PhantomConfig};
use mbda_core::scenario::canonical_order;

fn small() -> PhantomConfig {
    PhantomConfig { width: 16, height: 16, lesion_axes: [2.0, 4.0], seed: 8, ..PhantomConfig::default() }
}

fn bset(values: &[f64]) -> BTreeSet<BValue> {
    values.iter().map(|&v| BValue::new(v).unwrap()).collect()
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cases = generate_dataset(&small(), 6, 6, Execution::Parallel).unwrap();
    save_dataset(&cases, 8, serde_json::to_value(small()).unwrap(), dir.path()).unwrap();
    let (_, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), cases.len());
    for (a, b) in canonical_order(&cases).iter().zip(&canonical_order(&loaded)) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.stack.lesion_mask(), b.stack.lesion_mask());
        for (pa, pb) in a.stack.planes().iter().zip(b.stack.planes()) {
            // planes are stored as f32
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}

#[test]
fn train_on_full_protocol_and_score_adapted_reduced_stacks() {
    let dir = tempfile::tempdir().unwrap();
    let cases = canonical_order(&generate_dataset(&small(), 12, 12, Execution::Parallel).unwrap());
    let labels: Vec<_> = cases.iter().map(|c| c.label).collect();
    let fold = make_splits(&labels, 3).unwrap().fold(0);
    let examples: Vec<Example> = cases.iter().map(|c| Example::from_case(c).unwrap()).collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    let cfg = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
    let net = train(&pick(&fold.train), &pick(&fold.validation), &ArchitectureConfig::e2e(4), &cfg).unwrap();

    let path = dir.path().join("net.bin");
    save_network(&net, &path).unwrap();
    let net = load_network(&path).unwrap();

    let kept = bset(&[0.0, 100.0, 1500.0]);
    for &i in &fold.test {
        let case = &cases[i];
        let reduced = case.stack.subset_protocol(&kept).unwrap();
        let (adapted, report) = adapt_stack(&reduced, &Protocol::standard(), &FitConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(report.derived, bset(&[750.0]));
        let score = predict_case(&net, CaseInput::Stack(&adapted)).unwrap();
        if case.stack.lesion_mask().is_empty() {
            assert_eq!(score, 0.0);
        } else {
            assert!((0.0..=1.0).contains(&score));
            // the restored channel is close to the measured one, so scores barely move
            let full = predict_case(&net, CaseInput::Stack(&case.stack)).unwrap();
            assert!((score - full).abs() < 0.1, "{score} vs {full}");
        }
    }
}

#[test]
fn parameter_maps_do_not_depend_on_execution() {
    let cases = generate_dataset(&small(), 3, 3, Execution::Sequential).unwrap();
    for c in &cases {
        let a = fit_roi(&c.stack, &FitConfig::default(), Execution::Sequential).unwrap();
        let b = fit_roi(&c.stack, &FitConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}

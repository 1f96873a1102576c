use gzsl_core::data::{
    import_csv, load_dataset, save_dataset, synth_benchmark, validate_splits, Dataset, SplitName, SynthSpec, Violation,
};
use proptest::prelude::*;

fn small() -> Dataset {
    synth_benchmark(&SynthSpec { samples_per_class: 6, ..SynthSpec::default() }).unwrap()
}

#[derive(Debug, Clone)]
enum Mutation {
    UnseenIntoTrain(usize),
    TestIntoTrain(usize),
    SeenIntoUnseenTest(usize),
    LabelOutOfRange(usize),
    ClassInBoth(usize),
    DropSemanticRow,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        (0usize..1000).prop_map(Mutation::UnseenIntoTrain),
        (0usize..1000).prop_map(Mutation::TestIntoTrain),
        (0usize..1000).prop_map(Mutation::SeenIntoUnseenTest),
        (0usize..1000).prop_map(Mutation::LabelOutOfRange),
        (0usize..1000).prop_map(Mutation::ClassInBoth),
        Just(Mutation::DropSemanticRow),
    ]
}

fn apply(ds: &mut Dataset, m: &Mutation) {
    let pick = |v: &[usize], k: usize| v[k % v.len()];
    match *m {
        Mutation::UnseenIntoTrain(k) => {
            let i = pick(&ds.test_unseen_idx, k);
            ds.test_unseen_idx.retain(|&j| j != i);
            ds.train_idx.push(i);
        }
        Mutation::TestIntoTrain(k) => {
            let i = pick(&ds.test_seen_idx, k);
            ds.train_idx.push(i);
        }
        Mutation::SeenIntoUnseenTest(k) => {
            let i = pick(&ds.test_seen_idx, k);
            ds.test_seen_idx.retain(|&j| j != i);
            ds.test_unseen_idx.push(i);
        }
        Mutation::LabelOutOfRange(k) => {
            let i = k % ds.labels.len();
            ds.labels[i] = ds.num_classes() + 3;
        }
        Mutation::ClassInBoth(k) => {
            let seen: Vec<usize> = ds.seen_classes.iter().copied().collect();
            ds.unseen_classes.insert(pick(&seen, k));
        }
        Mutation::DropSemanticRow => {
            let c = ds.semantic.rows() - 1;
            let rows: Vec<usize> = (0..c).collect();
            ds.semantic = ds.semantic.select_rows(&rows);
        }
    }
}

fn expected(v: &Violation, m: &Mutation) -> bool {
    matches!(
        (m, v),
        (Mutation::UnseenIntoTrain(_), Violation::UnseenInTraining { .. })
            | (Mutation::TestIntoTrain(_), Violation::DuplicateIndex { .. })
            | (Mutation::SeenIntoUnseenTest(_), Violation::WrongDomainInTest { split: SplitName::TestUnseen, .. })
            | (Mutation::LabelOutOfRange(_), Violation::LabelOutOfRange { .. })
            | (Mutation::ClassInBoth(_), Violation::ClassInBothDomains(_))
            | (Mutation::DropSemanticRow, Violation::ClassWithoutSemanticRow(_))
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_mutation_is_detected(m in mutation()) {
        let mut ds = small();
        prop_assert!(validate_splits(&ds).is_empty());
        apply(&mut ds, &m);
        let found = validate_splits(&ds);
        prop_assert!(found.iter().any(|v| expected(v, &m)), "{:?} not reported in {:?}", m, found);
    }
}

#[test]
fn binary_round_trip_and_identical_bytes() {
    let spec = SynthSpec { seed: 5, ..SynthSpec::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(&synth_benchmark(&spec).unwrap(), a.path()).unwrap();
    save_dataset(&synth_benchmark(&spec).unwrap(), b.path()).unwrap();
    for f in ["visual.f32bin", "semantic.f32bin", "labels.u32bin", "splits.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded, synth_benchmark(&spec).unwrap());
    assert!(validate_splits(&loaded).is_empty());
}

#[test]
fn csv_import_matches_binary() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let rows = |t: &gzsl_core::autodiff::Tensor| {
        (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| format!("{}", *v as f32)).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    };
    std::fs::write(dir.path().join("visual.csv"), rows(&ds.visual)).unwrap();
    std::fs::write(dir.path().join("semantic.csv"), rows(&ds.semantic)).unwrap();
    let labels: Vec<String> = ds.labels.iter().map(ToString::to_string).collect();
    std::fs::write(dir.path().join("labels.csv"), labels.join("\n")).unwrap();
    assert_eq!(import_csv(dir.path()).unwrap(), ds);
    for f in ["visual.f32bin", "semantic.f32bin", "labels.u32bin"] {
        std::fs::remove_file(dir.path().join(f)).unwrap();
    }
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

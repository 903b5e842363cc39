use std::collections::BTreeMap;

use ogi_core::bg::{preprocess_corpus, BgMethod};
use ogi_core::flow::FarnebackParams;
use ogi_core::gasnet::{GasNetVariant, TrainConfig};
use ogi_core::gvid::{same_distance, trim_segment, DatasetManifest};
use ogi_core::harness::*;
use ogi_core::synth::{render_corpus, SynthConfig};
use ogi_core::Corpus;
use proptest::prelude::*;

fn tiny_config() -> SynthConfig {
    SynthConfig {
        width: 32,
        height: 24,
        frames_per_class: 40,
        trim_head_s: 0.4,
        trim_tail_s: 0.2,
        ..SynthConfig::desk(3)
    }
}

fn tiny_corpus() -> Corpus {
    render_corpus(&tiny_config()).unwrap()
}

fn usable_frames(m: &DatasetManifest, equipment: &str) -> usize {
    m.segments
        .iter()
        .filter(|s| s.equipment_id == equipment)
        .map(|s| trim_segment(s, m).unwrap().len() as usize)
        .sum()
}

#[test]
fn splits_are_deterministic_disjoint_and_equipment_pure() {
    let c = tiny_corpus();
    let m = &c.manifest;
    let plan = SplitPlan::standard(5);
    let a = make_splits(m, 0, &plan).unwrap();
    let b = make_splits(m, 0, &plan).unwrap();
    assert_eq!(a, b);
    check_disjoint(m, &plan, &a).unwrap();
    assert_eq!(a.train.len() + a.val.len(), usable_frames(m, "sep2"));
    assert_eq!(a.test.len(), usable_frames(m, "sep1"));
    for r in &a.test {
        assert_eq!(m.segments[r.segment as usize].equipment_id, "sep1");
    }
    // Per-segment 80/20: validation is a fifth of each training segment.
    let frac = a.val.len() as f64 / (a.train.len() + a.val.len()) as f64;
    assert!((frac - 0.2).abs() < 0.02, "{frac}");
    let other = make_splits(m, 0, &SplitPlan::standard(6)).unwrap();
    assert_ne!(a.val, other.val);
}

#[test]
fn degenerate_and_missing_equipment_plans_fail() {
    let c = tiny_corpus();
    let mut plan = SplitPlan::standard(1);
    plan.train_fraction = 1.0;
    assert!(make_splits(&c.manifest, 0, &plan).is_err());
    let mut plan = SplitPlan::standard(1);
    plan.test_equipment = vec!["sep9".into()];
    assert!(make_splits(&c.manifest, 0, &plan).is_err());
    let mut plan = SplitPlan::standard(1);
    plan.test_equipment = vec!["sep2".into()];
    assert!(make_splits(&c.manifest, 0, &plan).is_err());
}

#[test]
fn warmup_frames_are_excluded() {
    let c = tiny_corpus();
    let s = make_splits(&c.manifest, 30, &SplitPlan::standard(2)).unwrap();
    assert!(s.train.iter().chain(&s.val).chain(&s.test).all(|r| r.frame >= 30));
}

#[test]
fn block_mode_validates_on_segment_tails() {
    let c = tiny_corpus();
    let mut plan = SplitPlan::standard(2);
    plan.mode = SplitMode::Block;
    let s = make_splits(&c.manifest, 0, &plan).unwrap();
    let mut last_train: BTreeMap<u32, u32> = BTreeMap::new();
    for r in &s.train {
        let e = last_train.entry(r.segment).or_default();
        *e = (*e).max(r.frame);
    }
    for r in &s.val {
        assert!(r.frame > last_train[&r.segment]);
    }
}

#[test]
fn reference_sizes_match_published_magnitudes() {
    for (_, tr, va, te) in REFERENCE_SPLIT_SIZES {
        assert!((11_000..11_400).contains(&tr));
        assert!((2_700..2_900).contains(&va));
        assert!((9_400..9_500).contains(&te));
        // Validation is a fifth of training plus validation.
        assert!(((va as f64) / ((tr + va) as f64) - 0.2).abs() < 0.001);
    }
}

fn class_of(m: &DatasetManifest, r: &FrameRef) -> (f64, u8) {
    let s = &m.segments[r.segment as usize];
    (s.distance_m, s.label())
}

#[test]
fn method1_sets_hold_one_class_pair_at_one_distance() {
    let c = tiny_corpus();
    let m = &c.manifest;
    let splits = make_splits(m, 0, &SplitPlan::standard(3)).unwrap();
    let tasks = method1_tasks(m);
    assert_eq!(tasks.len(), 35);
    let task = BinaryTask::method1(4.6, 2);
    let ts = build_task_set(m, &splits, &task, 3).unwrap();
    for part in [&ts.train, &ts.val, &ts.test] {
        assert_eq!(part.count(0), part.count(1));
        for (r, &y) in part.frames.iter().zip(&part.labels) {
            let (d, class) = class_of(m, r);
            assert!(same_distance(d, 4.6));
            assert_eq!(class, if y == 0 { 0 } else { 2 });
        }
    }
}

fn cell_counts(m: &DatasetManifest, set: &LabeledFrames) -> BTreeMap<(i64, u8), usize> {
    let mut out = BTreeMap::new();
    for (r, &y) in set.frames.iter().zip(&set.labels) {
        if y == 1 {
            let (d, class) = class_of(m, r);
            *out.entry(((d * 10.0).round() as i64, class)).or_default() += 1;
        }
    }
    out
}

#[test]
fn method3_pool_draws_evenly_from_every_cell() {
    let c = tiny_corpus();
    let m = &c.manifest;
    let splits = make_splits(m, 0, &SplitPlan::standard(3)).unwrap();
    let ts = build_task_set(m, &splits, &BinaryTask::method3(), 3).unwrap();
    // The tiny validation set has fewer negatives than cells, so only
    // train and test can populate all 35.
    for part in [&ts.train, &ts.test] {
        assert_eq!(part.count(0), part.count(1));
        let cells = cell_counts(m, part);
        assert_eq!(cells.len(), 35);
        let lo = cells.values().min().unwrap();
        let hi = cells.values().max().unwrap();
        assert!(hi - lo <= 1, "cell counts {lo}..{hi}");
    }
}

#[test]
fn method2_rebalances_when_a_class_is_missing() {
    let c = tiny_corpus();
    let mut m = c.manifest.clone();
    m.segments
        .retain(|s| !(same_distance(s.distance_m, 6.9) && s.label() == 4));
    let splits = make_splits(&m, 0, &SplitPlan::standard(3)).unwrap();
    let ts = build_task_set(&m, &splits, &BinaryTask::method2(6.9), 3).unwrap();
    for part in [&ts.train, &ts.test] {
        assert_eq!(part.count(0), part.count(1));
        let cells = cell_counts(&m, part);
        assert_eq!(cells.len(), 6);
        let lo = cells.values().min().unwrap();
        let hi = cells.values().max().unwrap();
        assert!(hi - lo <= 1);
    }
}

#[test]
fn empty_positive_pool_is_an_error() {
    let c = tiny_corpus();
    let mut m = c.manifest.clone();
    m.segments.retain(|s| s.label() != 5);
    let splits = make_splits(&m, 0, &SplitPlan::standard(3)).unwrap();
    assert!(build_task_set(&m, &splits, &BinaryTask::method1(4.6, 5), 3).is_err());
}

#[test]
fn task_sets_are_seeded() {
    let c = tiny_corpus();
    let m = &c.manifest;
    let splits = make_splits(m, 0, &SplitPlan::standard(3)).unwrap();
    let t = BinaryTask::method2(9.8);
    assert_eq!(build_task_set(m, &splits, &t, 1).unwrap(), build_task_set(m, &splits, &t, 1).unwrap());
    assert_ne!(build_task_set(m, &splits, &t, 1).unwrap(), build_task_set(m, &splits, &t, 2).unwrap());
}

#[test]
fn constant_classifier_scores_one_half() {
    let truth: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let (cm, folds) = score(&[1; 200], &truth, 4).unwrap();
    assert_eq!(cm.accuracy(), 0.5);
    assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (100, 100, 0, 0));
    assert_eq!(folds.len(), FOLDS);
}

#[test]
fn equal_folds_have_zero_std() {
    let truth: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
    let (cm, folds) = score(&truth, &truth, 4).unwrap();
    assert_eq!(cm.accuracy(), 1.0);
    assert_eq!(mean_std(&folds), (1.0, 0.0));
}

#[test]
fn std_is_population_std() {
    let (m, s) = mean_std(&[0.5, 1.0]);
    assert_eq!(m, 0.75);
    assert!((s - 0.25).abs() < 1e-15);
}

#[test]
fn confusion_uses_leak_as_positive() {
    let cm = ConfusionMatrix::from_predictions(&[0, 1, 0, 1, 1], &[0, 0, 1, 1, 1]);
    assert_eq!(
        cm,
        ConfusionMatrix {
            tn: 1,
            fp: 1,
            fn_: 1,
            tp: 2
        }
    );
    assert_eq!(cm.accuracy(), 0.6);
    let json = serde_json::to_string(&cm).unwrap();
    assert!(json.contains("\"fn\":1"), "{json}");
}

proptest! {
    #[test]
    fn folds_partition_the_test_set(n in 10usize..400, seed in any::<u64>()) {
        let folds = random_folds(n, FOLDS, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn accuracy_matches_pooled_counts(
        pairs in proptest::collection::vec((0u8..2, 0u8..2), 10..300),
        seed in any::<u64>(),
    ) {
        let (p, y): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let (cm, _) = score(&p, &y, seed).unwrap();
        let hits = p.iter().zip(&y).filter(|(a, b)| a == b).count();
        prop_assert_eq!(cm.total(), y.len());
        prop_assert_eq!(cm.accuracy(), hits as f64 / y.len() as f64);
    }

    #[test]
    fn water_fill_is_even_and_bounded(
        caps in proptest::collection::vec(0usize..50, 1..12),
        total in 0usize..400,
    ) {
        let q = water_fill(&caps, total);
        prop_assert_eq!(q.iter().sum::<usize>(), total.min(caps.iter().sum()));
        for (a, c) in q.iter().zip(&caps) {
            prop_assert!(a <= c);
        }
        // Unsaturated cells sit at the top level, within one of each other.
        let top = *q.iter().max().unwrap();
        for (a, c) in q.iter().zip(&caps) {
            if a < c {
                prop_assert!(top - a <= 1);
            }
        }
    }
}

fn report(method: Aggregation, d: Option<f64>, class: Option<u8>, acc: f64) -> EvalReport {
    let task = BinaryTask {
        method,
        distance_m: d,
        positive_class: class,
    };
    EvalReport {
        task_id: task.id(),
        task,
        detector: "gasnet2".into(),
        bg_method: "moving".into(),
        accuracy_mean: acc,
        accuracy_std: 0.01,
        fold_accuracies: vec![acc; FOLDS],
        confusion: ConfusionMatrix::default(),
        val_accuracy: acc,
        sizes: SetSizes::default(),
        seed: 0,
        provenance: serde_json::Value::Null,
    }
}

#[test]
fn empty_curve_list_is_header_only() {
    assert_eq!(emit_curves(&[]), format!("{CURVE_HEADER}\n"));
}

#[test]
fn method1_curves_have_35_rows_over_5_distances() {
    let m = tiny_corpus().manifest;
    let reports: Vec<EvalReport> = method1_tasks(&m)
        .into_iter()
        .map(|t| report(Aggregation::Method1, t.distance_m, t.positive_class, 0.9))
        .collect();
    let csv = emit_curves(&reports);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 35);
    let mut d: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    d.dedup();
    assert_eq!(d, ["4.6", "6.9", "9.8", "12.6", "15.6"]);
    assert_eq!(rows[0], "1,moving,4.6,1,0.900000,0.010000");
}

#[test]
fn table4_has_a_row_per_distance_and_an_aggregate() {
    let ds = [4.6, 9.8];
    let mut reports = vec![
        report(Aggregation::Method1, Some(4.6), Some(1), 0.8),
        report(Aggregation::Method1, Some(4.6), Some(7), 1.0),
        report(Aggregation::Method1, Some(9.8), Some(1), 0.6),
        report(Aggregation::Method2, Some(4.6), None, 0.95),
        report(Aggregation::Method2, Some(9.8), None, 0.75),
    ];
    reports.push(report(Aggregation::Method3, Some(4.6), None, 0.97));
    reports.push(report(Aggregation::Method3, Some(9.8), None, 0.77));
    reports.push(report(Aggregation::Method3, None, None, 0.87));
    let rows = table4(&reports, &ds);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].method1, Some(0.9));
    assert_eq!(rows[1].method1, Some(0.6));
    assert_eq!(rows[2].method1, Some((0.8 + 1.0 + 0.6) / 3.0));
    assert_eq!(rows[2].method2, Some(0.85));
    assert_eq!(rows[2].method3, Some(0.87));
    let csv = table4_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), "distance_m,method1,method2,method3");
    assert!(csv.lines().last().unwrap().starts_with("all,"));
}

#[test]
fn suites_are_identical_for_any_worker_count() {
    let c = tiny_corpus();
    let rc = preprocess_corpus(&c, &BgMethod::Moving { window: 10 }).unwrap();
    let plan = SplitPlan::standard(9);
    let splits = make_splits(&c.manifest, rc.provenance.warmup_frames, &plan).unwrap();
    let data = ExperimentData::new(&rc, &plan, &splits).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let jobs = vec![
        (
            BinaryTask::method1(4.6, 7),
            Detector::GasNet {
                variant: GasNetVariant::GasNet1,
                config: config.clone(),
            },
        ),
        (
            BinaryTask::method2(6.9),
            Detector::Baseline {
                flow: FarnebackParams::default(),
            },
        ),
        (
            BinaryTask::method3(),
            Detector::GasNet {
                variant: GasNetVariant::GasNet1,
                config,
            },
        ),
    ];
    let one = run_suite(&data, &jobs, 1, false).unwrap();
    let two = run_suite(&data, &jobs, 2, false).unwrap();
    let dump = |o: &[ExperimentOutput]| {
        let reports: Vec<EvalReport> = o.iter().flat_map(|x| x.reports.clone()).collect();
        (emit_curves(&reports), serde_json::to_string(&reports).unwrap())
    };
    assert_eq!(dump(&one), dump(&two));
    // Method 3 reports every distance, then the pooled set.
    assert_eq!(one[2].reports.len(), 6);
    assert!(one[2].reports[5].task.distance_m.is_none());
    for r in one.iter().flat_map(|o| &o.reports) {
        assert_eq!(r.accuracy_mean, r.confusion.accuracy());
        assert_eq!(r.confusion.total(), r.sizes.test);
        assert_eq!(r.confusion.tp + r.confusion.fn_, r.confusion.tn + r.confusion.fp);
    }
    assert!(one[1].grid.as_ref().unwrap().table.len() == 144);
}

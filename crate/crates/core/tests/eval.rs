use partseg_core::eval::{AblationReport, ConfusionAccumulator, EvalReport, TableRow, Thresholds};
use partseg_core::image::LabelMap;
use partseg_core::N_CLASSES;
use proptest::prelude::*;

fn map(h: usize, w: usize, data: &[u8]) -> LabelMap {
    let mut m = LabelMap::new(h, w);
    m.data.copy_from_slice(data);
    m
}

#[test]
fn identical_maps_have_no_errors() {
    let gt = map(2, 3, &[0, 1, 1, 5, 13, 0]);
    let mut acc = ConfusionAccumulator::new();
    acc.accumulate(&gt, &gt).unwrap();
    assert!(acc.fp.iter().chain(&acc.fn_).all(|&v| v == 0));
    assert_eq!((acc.tp[0], acc.tp[4], acc.tp[12]), (2, 1, 1));
    assert_eq!(acc.miou().unwrap(), 100.0);
    assert_eq!(acc.macc().unwrap(), 100.0);
}

#[test]
fn background_prediction_misses_everything() {
    let gt = map(2, 2, &[3, 3, 0, 3]);
    let mut acc = ConfusionAccumulator::new();
    acc.accumulate(&LabelMap::new(2, 2), &gt).unwrap();
    assert_eq!((acc.tp[2], acc.fn_[2], acc.fp[2]), (0, 3, 0));
    assert_eq!(acc.miou().unwrap(), 0.0);
}

#[test]
fn hand_counted_four_by_four() {
    #[rustfmt::skip]
    let gt = map(4, 4, &[
        1, 1, 0, 0,
        1, 1, 2, 2,
        0, 3, 2, 2,
        3, 3, 0, 0,
    ]);
    #[rustfmt::skip]
    let pred = map(4, 4, &[
        1, 0, 0, 2,
        1, 1, 2, 2,
        3, 3, 1, 2,
        3, 0, 0, 0,
    ]);
    let mut acc = ConfusionAccumulator::new();
    acc.accumulate(&pred, &gt).unwrap();
    assert_eq!((acc.tp[0], acc.fp[0], acc.fn_[0]), (3, 1, 1));
    assert_eq!((acc.tp[1], acc.fp[1], acc.fn_[1]), (3, 1, 1));
    assert_eq!((acc.tp[2], acc.fp[2], acc.fn_[2]), (2, 1, 1));
    let iou = [3.0 / 5.0, 3.0 / 5.0, 2.0 / 4.0];
    let want = 100.0 * iou.iter().sum::<f64>() / 3.0;
    assert!((acc.miou().unwrap() - want).abs() < 1e-12);
    let acc_c = [3.0 / 4.0, 3.0 / 4.0, 2.0 / 3.0];
    let want = 100.0 * acc_c.iter().sum::<f64>() / 3.0;
    assert!((acc.macc().unwrap() - want).abs() < 1e-12);
    assert!(acc.class_iou(5).is_none());
}

#[test]
fn half_overlap_is_one_third() {
    // Each mask covers 2a = 4 pixels, overlap a = 2.
    let gt = map(2, 4, &[7, 7, 7, 7, 0, 0, 0, 0]);
    let pred = map(2, 4, &[0, 0, 7, 7, 7, 7, 0, 0]);
    let mut acc = ConfusionAccumulator::new();
    acc.accumulate(&pred, &gt).unwrap();
    let r = EvalReport::from_confusion(&acc, 1).unwrap();
    assert_eq!(r.miou, 33.33);
    assert_eq!(r.macc, 50.0);

    let disjoint = map(2, 4, &[0, 0, 0, 0, 7, 7, 7, 7]);
    let mut acc = ConfusionAccumulator::new();
    acc.accumulate(&disjoint, &gt).unwrap();
    assert_eq!(acc.class_iou(6), Some(0.0));
}

#[test]
fn shape_mismatch_and_empty_confusion_are_errors() {
    let mut acc = ConfusionAccumulator::new();
    assert!(acc.accumulate(&LabelMap::new(2, 2), &LabelMap::new(2, 3)).is_err());
    acc.accumulate(&LabelMap::new(2, 2), &LabelMap::new(2, 2)).unwrap();
    assert!(acc.miou().is_err());
}

fn arb_map(h: usize, w: usize) -> impl Strategy<Value = LabelMap> {
    proptest::collection::vec(0u8..=N_CLASSES as u8, h * w).prop_map(move |d| map(h, w, &d))
}

proptest! {
    #[test]
    fn merged_counts_equal_joint_counts(a in arb_map(3, 5), b in arb_map(3, 5), c in arb_map(3, 5), d in arb_map(3, 5)) {
        let mut joint = ConfusionAccumulator::new();
        joint.accumulate(&a, &b).unwrap();
        joint.accumulate(&c, &d).unwrap();
        let (mut x, mut y) = (ConfusionAccumulator::new(), ConfusionAccumulator::new());
        x.accumulate(&a, &b).unwrap();
        y.accumulate(&c, &d).unwrap();
        x.merge(&y);
        prop_assert_eq!(&x, &joint);
        // Every non-background pixel is a TP, FP or FN of some class.
        let labelled = |p: &LabelMap, t: &LabelMap| p.data.iter().zip(&t.data).map(|(&p, &t)| match (p, t) {
            (0, 0) => 0u64,
            (p, t) if p == t => 1,
            (0, _) | (_, 0) => 1,
            _ => 2,
        }).sum::<u64>();
        let total: u64 = (0..N_CLASSES).map(|k| joint.tp[k] + joint.fp[k] + joint.fn_[k]).sum();
        prop_assert_eq!(total, labelled(&a, &b) + labelled(&c, &d));
        if let Ok(m) = joint.miou() {
            prop_assert!((0.0..=100.0).contains(&m));
        }
    }
}

fn report() -> AblationReport {
    let labels = ["Base", "+GTP", "+GTP+RAM", "+VP+RAM", "Full"];
    let mut r = AblationReport::default();
    for (i, l) in labels.iter().enumerate() {
        let m = 70.0 + i as f64;
        r.components.push(TableRow::from_runs(l, &[(0, m, m + 5.0), (1, m + 0.5, m + 5.5), (2, m + 1.0, m + 6.0)]));
    }
    for (k, m) in [(3, 74.0), (1, 72.0), (2, 75.0)] {
        r.refs.push((k, TableRow::from_runs(&format!("k={k}"), &[(0, m, m)])));
    }
    r.gat_depth.push(TableRow::from_runs("4 layers", &[(0, 74.5, 80.0)]));
    r.sort();
    r
}

#[test]
fn ablation_table_renders_consistently() {
    let r = report();
    assert_eq!(r.components.len(), 5);
    assert_eq!(r.row("Full").unwrap().miou, Some(74.5));
    assert_eq!(r.row("Base").unwrap().seeds, vec![0, 1, 2]);
    assert_eq!(r.sweep_points(), vec![(1, 72.0), (2, 75.0), (3, 74.0)]);

    let text = r.to_text();
    let json: AblationReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(json, r);
    for row in &r.components {
        let line = text.lines().find(|l| l.starts_with(&row.label) && l[row.label.len()..].starts_with(' ')).unwrap();
        assert!(line.contains(&format!("{:.2}", row.miou.unwrap())), "{line}");
        assert!(line.contains(&format!("{:.2}", row.macc.unwrap())), "{line}");
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("k=")).count(), 3);

    let missing = TableRow::from_runs("Full", &[]);
    assert!(missing.miou.is_none() && missing.note.is_some());
}

#[test]
fn thresholds_flag_shortfalls() {
    let r = report();
    let t = Thresholds {
        miou: Some(74.0),
        full_over_base_miou: Some(4.0),
        vp_over_base_macc: Some(3.0),
    };
    assert!(t.check_ablation(&r).is_empty());
    let strict = Thresholds {
        miou: Some(80.0),
        full_over_base_miou: Some(4.5),
        vp_over_base_macc: Some(3.5),
    };
    assert_eq!(strict.check_ablation(&r).len(), 3);
    assert_eq!(Thresholds::default().check_ablation(&AblationReport::default()).len(), 0);
    assert_eq!(t.check_ablation(&AblationReport::default()).len(), 3);
}

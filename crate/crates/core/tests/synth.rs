use std::collections::BTreeSet;

use partseg_core::image::LabelMap;
use partseg_core::ontology::*;
use partseg_core::synth::*;
use proptest::prelude::*;

fn sample(identity: u32, view: Viewpoint, seed: u64) -> LabeledSample {
    generate(&VehicleSpec::new(IdentitySpec::from_seed(identity, 3), view, seed))
}

fn pixels(m: &LabelMap, c: ClassId) -> Vec<(usize, usize)> {
    let v = c as u8 + 1;
    (0..m.h)
        .flat_map(|y| (0..m.w).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x) == v)
        .collect()
}

fn touches(m: &LabelMap, a: ClassId, b: ClassId) -> bool {
    let vb = b as u8 + 1;
    pixels(m, a).into_iter().any(|(y, x)| {
        let n = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        n.iter().any(|&(ny, nx)| ny < m.h && nx < m.w && m.get(ny, nx) == vb)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn visibility_rule_holds(seed in any::<u64>(), id in 0u32..500, v in 0usize..8) {
        let view = Viewpoint::ALL[v];
        let s = sample(id, view, seed);
        for c in s.mask.present_classes() {
            match side_of(c) {
                Side::Left => prop_assert!(view.shows_left(), "{} in {view}", CLASS_NAMES[c]),
                Side::Right => prop_assert!(view.shows_right(), "{} in {view}", CLASS_NAMES[c]),
                Side::Center => {}
            }
            if c == FRONT_WINDOW {
                prop_assert!(matches!(view, Viewpoint::Front | Viewpoint::FrontLeft | Viewpoint::FrontRight));
            }
            if c == BACK_WINDOW {
                prop_assert!(matches!(view, Viewpoint::Back | Viewpoint::BackLeft | Viewpoint::BackRight));
            }
        }
        let per_class: usize = (0..N_CLASSES).map(|c| pixels(&s.mask, c).len()).sum();
        prop_assert_eq!(per_class, s.mask.data.iter().filter(|&&v| v > 0).count());
        prop_assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_deterministic() {
    let a = sample(7, Viewpoint::FrontRight, 11);
    let b = sample(7, Viewpoint::FrontRight, 11);
    assert_eq!(a, b);
    assert_eq!(a.image.to_bytes(), b.image.to_bytes());
}

#[test]
fn left_view_mask_has_no_right_values() {
    let s = sample(1, Viewpoint::Left, 5);
    assert!(s.mask.data.iter().all(|&v| !(10..=13).contains(&v)));
}

#[test]
fn doors_touch_their_windows_and_the_body() {
    let pairs = [
        (LEFT_FRONT_DOOR, LEFT_FRONT_WINDOW),
        (LEFT_BACK_DOOR, LEFT_BACK_WINDOW),
        (RIGHT_FRONT_DOOR, RIGHT_FRONT_WINDOW),
        (RIGHT_BACK_DOOR, RIGHT_BACK_WINDOW),
    ];
    let mut doors_seen = 0;
    for seed in 0..100u64 {
        let s = sample(seed as u32, Viewpoint::ALL[seed as usize % 8], seed * 31);
        let present = s.mask.present_classes();
        for (door, window) in pairs {
            if present.contains(&door) {
                doors_seen += 1;
                assert!(touches(&s.mask, door, window), "seed {seed}: {}", CLASS_NAMES[door]);
                assert!(touches(&s.mask, door, FOREGROUND), "seed {seed}: {}", CLASS_NAMES[door]);
            }
        }
    }
    assert!(doors_seen >= 100);
}

#[test]
fn corpus_contract() {
    let data = generate_corpus(&CorpusConfig {
        count: 64,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(data.samples.len(), 64);

    let ids = |split| -> BTreeSet<u32> {
        data.split(split).iter().map(|s| s.record.identity).collect()
    };
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));

    let covered: BTreeSet<ClassId> = data.presence(Split::Train).into_iter().flatten().collect();
    assert_eq!(covered.len(), N_CLASSES);

    for s in &data.samples {
        assert_eq!(s.record.present, s.mask.present_classes());
    }
}

#[test]
fn default_corpus_split_sizes() {
    let data = generate_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(data.split(Split::Train).len(), 512);
    assert_eq!(data.split(Split::Val).len(), 128);
    assert_eq!(data.split(Split::Test).len(), 128);
}

#[test]
fn balanced_views_separate_the_flanks() {
    let data = generate_corpus(&CorpusConfig::default()).unwrap();
    let sets = data.presence(Split::Train);
    let count = |a, b| sets.iter().filter(|s| s.contains(&a) && s.contains(&b)).count();
    assert!(count(LEFT_FRONT_DOOR, RIGHT_FRONT_DOOR) < count(LEFT_FRONT_DOOR, FOREGROUND));
}

#[test]
fn written_corpus_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_corpus(&CorpusConfig {
        count: 16,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    data.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.config, data.config);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.record, b.record);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}

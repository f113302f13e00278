use super::*;
use crate::metrics::SoftmaxProbe;
use proptest::prelude::*;

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train: 300,
        n_val: 50,
        n_test: 200,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_is_bitwise_identical() {
    let a = generate(&small(3)).unwrap();
    let b = generate(&small(3)).unwrap();
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.2.to_bytes(), b.2.to_bytes());
    let c = generate(&small(4)).unwrap();
    assert_ne!(a.0.features, c.0.features);
}

#[test]
fn labels_follow_the_rule() {
    let spec = small(1);
    let (train, val, test) = generate(&spec).unwrap();
    for ds in [&train, &val, &test] {
        for i in 0..ds.len() {
            assert_eq!(spec.label_rule(ds.concept_row(i)), ds.labels()[i]);
        }
        assert_eq!(ds.features.shape(), &[ds.len(), spec.input_dim]);
        assert_eq!(ds.concepts.len(), ds.len() * spec.num_concepts);
    }
    assert_eq!((train.len(), val.len(), test.len()), (300, 50, 200));
}

#[test]
fn label_rule_spells_binary_mod_m() {
    let spec = SyntheticSpec {
        num_classes: 5,
        ..Default::default()
    };
    assert_eq!(spec.label_bits(), 3);
    let mut c = vec![0u8; 16];
    c[0] = 1;
    c[2] = 1;
    assert_eq!(spec.label_rule(&c), 5 % 5);
    c[0] = 0;
    assert_eq!(spec.label_rule(&c), 1);
    let one = SyntheticSpec {
        num_classes: 1,
        ..Default::default()
    };
    assert_eq!(one.label_rule(&c), 0);
}

#[test]
fn rho_one_snaps_every_background_to_its_anchor() {
    let spec = SyntheticSpec { rho: 1.0, ..small(2) };
    let (train, _, _) = generate(&spec).unwrap();
    let mix = Mixing::from_spec(&spec);
    let z = &train.latents.as_ref().unwrap().z;
    for i in 0..train.len() {
        assert_eq!(z.row(i), mix.anchor(train.labels()[i]));
    }
}

#[test]
fn rho_zero_background_is_uncorrelated_with_label() {
    let spec = SyntheticSpec {
        rho: 0.0,
        n_train: 10_000,
        ..small(5)
    };
    let (train, _, _) = generate(&spec).unwrap();
    let z = &train.latents.as_ref().unwrap().z;
    let mix = Mixing::from_spec(&spec);
    for m in 0..spec.num_classes {
        let proj: Vec<f64> = (0..train.len())
            .map(|i| z.row(i).iter().zip(mix.anchor(m)).map(|(a, b)| a * b).sum())
            .collect();
        let ind: Vec<f64> = train.labels().iter().map(|&y| (y == m) as u8 as f64).collect();
        let corr = pearson(&proj, &ind);
        assert!(corr.abs() < 0.1, "class {m}: {corr}");
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn pair_correlation_only_on_first_quarter_pairs() {
    let spec = SyntheticSpec {
        n_train: 8000,
        ..small(6)
    };
    let (train, _, _) = generate(&spec).unwrap();
    let col = |k: usize| -> Vec<f64> { (0..train.len()).map(|i| train.concept_row(i)[k] as f64).collect() };
    assert!((pearson(&col(0), &col(1)) - 0.3).abs() < 0.05);
    assert!((pearson(&col(6), &col(7)) - 0.3).abs() < 0.05);
    assert!(pearson(&col(8), &col(9)).abs() < 0.05);
    let indep = SyntheticSpec {
        pair_correlation: 0.0,
        ..spec
    };
    let (train, _, _) = generate(&indep).unwrap();
    let col = |k: usize| -> Vec<f64> { (0..train.len()).map(|i| train.concept_row(i)[k] as f64).collect() };
    assert!(pearson(&col(0), &col(1)).abs() < 0.05);
}

/// Accuracy of a softmax probe from `z` to `y`, trained on `train`.
fn z_probe(train: &SynDataset, eval: &SynDataset) -> f64 {
    let z = &train.latents.as_ref().unwrap().z;
    let rows: Vec<&[f64]> = (0..train.len()).map(|i| z.row(i)).collect();
    let probe = SoftmaxProbe::fit(&rows, train.labels(), train.spec.num_classes, 30, 0);
    let ez = &eval.latents.as_ref().unwrap().z;
    let hits = (0..eval.len()).filter(|&i| probe.predict(ez.row(i)) == eval.labels()[i]).count();
    100.0 * hits as f64 / eval.len() as f64
}

#[test]
fn spuriousness_increases_background_probe_accuracy() {
    let mut accs = Vec::new();
    for rho in [0.0, 0.5, 0.9] {
        let spec = SyntheticSpec {
            rho,
            n_train: 2000,
            n_test: 2000,
            ..small(7)
        };
        let (train, _, test) = generate(&spec).unwrap();
        accs.push(z_probe(&train, &test));
    }
    assert!((accs[0] - 12.5).abs() <= 5.0, "{accs:?}");
    assert!(accs[0] < accs[1] && accs[1] < accs[2], "{accs:?}");
    assert!(accs[2] >= 80.0, "{accs:?}");
}

#[test]
fn random_shift_destroys_background_signal() {
    let spec = SyntheticSpec {
        n_train: 2000,
        n_test: 2000,
        ..small(8)
    };
    let (train, _, test) = generate(&spec).unwrap();
    let shifted = apply_shift(&test, ShiftKind::RandomShift, 1).unwrap();
    let acc = z_probe(&train, &shifted);
    assert!((acc - 12.5).abs() <= 5.0, "{acc}");
    assert_eq!(shifted.concepts, test.concepts);
    assert_eq!(shifted.labels(), test.labels());
}

#[test]
fn in_distribution_shift_is_identity() {
    let (_, _, test) = generate(&small(9)).unwrap();
    let same = apply_shift(&test, ShiftKind::InDistribution, 3).unwrap();
    assert_eq!(same.to_bytes(), test.to_bytes());
}

#[test]
fn zero_shift_recomputes_from_r_and_eps() {
    let spec = small(10);
    let (_, _, test) = generate(&spec).unwrap();
    let zero = apply_shift(&test, ShiftKind::ZeroShift, 0).unwrap();
    let mix = Mixing::from_spec(&spec);
    let lat = test.latents.as_ref().unwrap();
    for i in 0..test.len() {
        for j in 0..spec.input_dim {
            let ar: f64 = mix.a.row(j).iter().zip(lat.r.row(i)).map(|(w, v)| w * v).sum();
            assert_eq!(zero.features.get(&[i, j]), ar + lat.eps.get(&[i, j]));
        }
    }
    assert!(zero.latents.as_ref().unwrap().z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fixed_shift_moves_every_class_to_another_anchor() {
    let spec = small(11);
    let (_, _, test) = generate(&spec).unwrap();
    let fixed = apply_shift(&test, ShiftKind::FixedShift, 5).unwrap();
    let mix = Mixing::from_spec(&spec);
    let perm = derangement(spec.num_classes, 5).unwrap();
    let z = &fixed.latents.as_ref().unwrap().z;
    for i in 0..test.len() {
        let y = test.labels()[i];
        assert_eq!(z.row(i), mix.anchor(perm[y]));
        assert_ne!(z.row(i), mix.anchor(y));
    }
}

proptest! {
    #[test]
    fn derangements_have_no_fixed_point(m in 2usize..20, seed in 0u64..1000) {
        let p = derangement(m, seed).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..m).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
    }
}

#[test]
fn shift_requires_latents() {
    let (_, _, mut test) = generate(&small(12)).unwrap();
    test.latents = None;
    assert!(apply_shift(&test, ShiftKind::ZeroShift, 0).is_err());
    assert!(derangement(1, 0).is_err());
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, test) = generate(&small(13)).unwrap();
    for ds in [&train, &test] {
        let path = dir.path().join(format!("{}.bin", ds.split.as_str()));
        ds.save(&path).unwrap();
        let back = SynDataset::load(&path).unwrap();
        assert_eq!(&back, ds);
        assert_eq!(back.hash(), ds.hash());
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    }
}

#[test]
fn truncated_or_foreign_files_are_format_errors() {
    let (train, _, _) = generate(&small(14)).unwrap();
    let bytes = train.to_bytes();
    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(SynDataset::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(SynDataset::from_bytes(&extra), Err(Error::Format(_))));
    let foreign = String::from_utf8_lossy(&bytes).replacen("RECEMDATA v1", "RECEMDATA v2", 1);
    assert!(matches!(SynDataset::from_bytes(foreign.as_bytes()), Err(Error::Format(_))));
}

#[test]
fn incomplete_mode_hides_a_label_concept() {
    let spec = SyntheticSpec {
        incomplete: true,
        ..small(15)
    };
    assert_eq!(spec.observed_concepts(), 15);
    assert_eq!(spec.dropped_concept(), Some(2));
    let (train, _, _) = generate(&spec).unwrap();
    assert_eq!(train.concepts.len(), train.len() * 15);
    let full = generate(&SyntheticSpec { incomplete: false, ..spec }).unwrap().0;
    for i in 0..train.len() {
        let f = full.concept_row(i);
        let mut expect = f.to_vec();
        expect.remove(2);
        assert_eq!(train.concept_row(i), expect.as_slice());
        assert_eq!(train.labels()[i], full.labels()[i]);
    }
}

#[test]
fn training_view_guards_test_labels() {
    let (train, val, test) = generate(&small(16)).unwrap();
    assert!(TrainingView::new(&train).is_ok());
    assert!(TrainingView::new(&val).is_ok());
    assert!(TrainingView::new(&test).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec { num_concepts: 2, num_classes: 5, ..Default::default() },
        SyntheticSpec { input_dim: 40, ..Default::default() },
        SyntheticSpec { rho: 1.5, ..Default::default() },
        SyntheticSpec { noise_sigma: -1.0, ..Default::default() },
        SyntheticSpec { n_val: 0, ..Default::default() },
    ];
    for s in bad {
        assert!(generate(&s).is_err(), "{s:?}");
    }
}

#[test]
fn fingerprint_tracks_every_field() {
    let a = SyntheticSpec::default();
    assert_eq!(a.fingerprint(), SyntheticSpec::default().fingerprint());
    assert_ne!(a.fingerprint(), SyntheticSpec { rho: 0.8, ..a.clone() }.fingerprint());
    assert_eq!(a.fingerprint().len(), 16);
}

use std::collections::BTreeSet;
use std::f64::consts::PI;

use harpeft_core::data::{
    build_label_union, channel_stats, generate_synthetic, load_corpus, lodo_folds, read_domain_csv, resample_to_50hz,
    segment_windows, split_train_eval, write_domain_csv, write_manifest, znormalize, DatasetBundle, DomainEntry,
    Manifest, SensorRecording, SyntheticSpec, Window,
};
use harpeft_core::io::{load_windows, save_windows};
use harpeft_core::numerics::{Matrix, Rng};
use harpeft_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn recording(samples: Matrix, rate: f64, activity: &str, domain: &str) -> SensorRecording {
    SensorRecording {
        samples,
        sample_rate: rate,
        activity: activity.into(),
        domain: domain.into(),
        subject: None,
    }
}

#[test]
fn resampling_rates() {
    let r = recording(Matrix::from_fn(200, 6, |i, j| (i + j) as f64), 100.0, "walk", "d");
    let out = resample_to_50hz(&r).unwrap();
    assert_eq!((out.samples.rows(), out.sample_rate), (100, 50.0));

    let r50 = recording(Matrix::from_fn(77, 6, |i, j| (i * j) as f64 * 0.1), 50.0, "walk", "d");
    assert_eq!(resample_to_50hz(&r50).unwrap(), r50);

    let r75 = recording(Matrix::from_fn(300, 2, |i, _| i as f64), 75.0, "walk", "d");
    let out = resample_to_50hz(&r75).unwrap();
    assert_eq!(out.samples.rows(), 200);
    // A ramp survives linear interpolation exactly.
    assert!((out.samples.get(7, 0) - 10.5).abs() < 1e-12);

    let slow = recording(Matrix::zeros(10, 6), 20.0, "walk", "d");
    assert!(matches!(resample_to_50hz(&slow), Err(Error::UnsupportedUpsampling(_))));
}

#[test]
fn resampled_sine_keeps_its_frequency() {
    let n = 800;
    let r = recording(Matrix::from_fn(n, 1, |i, _| (2.0 * PI * 5.0 * i as f64 / 200.0).sin()), 200.0, "a", "d");
    let out = resample_to_50hz(&r).unwrap();
    let x: Vec<f64> = out.samples.as_slice().to_vec();
    let m = x.len();
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * PI * (k * t) as f64 / m as f64;
            re += v * a.cos();
            im -= v * a.sin();
        }
        re * re + im * im
    };
    let peak = (1..m / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
    let bin = 50.0 / m as f64;
    assert!((peak as f64 * bin - 5.0).abs() <= bin);
}

#[test]
fn znormalize_properties() {
    let mut recs = vec![recording(Matrix::from_rows(&[&[1.0, 4.0], &[2.0, 4.0], &[3.0, 4.0]]), 50.0, "a", "d")];
    znormalize(&mut recs);
    let (mean, std) = channel_stats(&[&recs[0].samples]);
    assert!(mean[0].abs() < 1e-12 && (std[0] - 1.0).abs() < 1e-12);
    assert!(recs[0].samples.as_slice().iter().skip(1).step_by(2).all(|v| *v == 0.0));

    // Each domain is normalized on its own.
    let mut rng = Rng::new(1);
    let make = |scale: f64, shift: f64, rng: &mut Rng| {
        (0..3)
            .map(|_| recording(Matrix::from_fn(90, 6, |_, _| shift + scale * rng.normal()), 50.0, "a", "x"))
            .collect::<Vec<_>>()
    };
    let mut a = make(3.0, 10.0, &mut rng);
    let mut b = make(0.2, -4.0, &mut rng);
    let a_alone = {
        let mut c = a.clone();
        znormalize(&mut c);
        c
    };
    znormalize(&mut a);
    znormalize(&mut b);
    assert_eq!(a, a_alone);
    for dom in [&a, &b] {
        let (mean, std) = channel_stats(&dom.iter().map(|r| &r.samples).collect::<Vec<_>>());
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }
}

proptest! {
    #[test]
    fn window_count_and_slices(n in 0usize..700) {
        let src = Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        let ws = segment_windows(&recording(src.clone(), 50.0, "walk", "d")).unwrap();
        let expect = if n < 128 { 0 } else { (n - 128) / 64 + 1 };
        prop_assert_eq!(ws.len(), expect);
        for (k, w) in ws.iter().enumerate() {
            prop_assert_eq!(&w.values, &src.slice_rows(64 * k, 64 * k + 128));
            prop_assert_eq!(w.activity.as_str(), "walk");
        }
    }
}

fn bundle(name: &str, activities: &[&str], per: usize) -> DatasetBundle {
    let windows = activities
        .iter()
        .flat_map(|a| {
            (0..per).map(move |i| Window {
                values: Matrix::filled(4, 2, i as f64),
                activity: a.to_string(),
                domain: name.to_string(),
            })
        })
        .collect();
    DatasetBundle::from_windows(name, windows)
}

#[test]
fn label_union_is_lexicographic() {
    let u = build_label_union(&[bundle("a", &["walk", "sit"], 1), bundle("b", &["walk", "run"], 1)]).unwrap();
    assert_eq!(u.vocabulary, ["run", "sit", "walk"]);
    let single = build_label_union(&[bundle("a", &["walk", "sit"], 1)]).unwrap();
    assert_eq!(single.vocabulary, ["sit", "walk"]);
}

#[test]
fn lodo_partitions() {
    for d in [2usize, 3, 5] {
        let bundles: Vec<DatasetBundle> = (0..d).map(|i| bundle(&format!("d{i}"), &["walk", "sit"], i + 1)).collect();
        let folds = lodo_folds(&bundles).unwrap();
        assert_eq!(folds.len(), d);
        let targets: BTreeSet<&str> = folds.iter().map(|f| f.target_domain.as_str()).collect();
        assert_eq!(targets.len(), d);
        for f in &folds {
            let sources: BTreeSet<&str> = f.pretrain.windows.iter().map(|w| w.domain.as_str()).collect();
            assert!(!sources.contains(f.target_domain.as_str()));
            assert_eq!(sources.len(), d - 1);
            assert_eq!(f.pretrain.len() + f.target.len(), bundles.iter().map(|b| b.len()).sum::<usize>());
        }
    }
    let two = lodo_folds(&[bundle("x", &["a"], 1), bundle("y", &["a"], 1)]).unwrap();
    assert_eq!(two[0].pretrain.windows, two[1].target.windows);
    assert!(matches!(lodo_folds(&[bundle("x", &["a"], 1)]), Err(Error::Protocol(_))));
}

#[test]
fn split_partition() {
    let b = bundle("t", &["run", "sit", "walk", "bike"], 25);
    let s = split_train_eval(&b, 0.7, 3).unwrap();
    assert_eq!((s.train.len(), s.eval.len()), (70, 30));
    let key = |w: &Window| (w.activity.clone(), w.values.get(0, 0) as i64);
    let train: BTreeSet<_> = s.train.windows.iter().map(key).collect();
    let eval: BTreeSet<_> = s.eval.windows.iter().map(key).collect();
    assert!(train.is_disjoint(&eval));
    assert_eq!(train.len() + eval.len(), 100);
    assert_eq!(split_train_eval(&b, 0.7, 3).unwrap(), s);

    let lonely = build_label_union(&[bundle("t", &["walk"], 6), bundle("u", &["jump"], 1)]).unwrap();
    let s = split_train_eval(&lonely, 0.5, 1).unwrap();
    assert_eq!(s.warnings.len(), 1);
    assert!(s.train.windows.iter().any(|w| w.activity == "jump"));
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let bundles = generate_synthetic(&SyntheticSpec::separable(2, 2, 11)).unwrap();
    let split = split_train_eval(&bundles[0], 0.7, 5).unwrap();
    let design = |b: &DatasetBundle| {
        let rows: Vec<f64> = b
            .windows
            .iter()
            .flat_map(|w| w.values.as_slice().iter().copied().chain([1.0]))
            .collect();
        let p = b.windows[0].values.len() + 1;
        DMatrix::from_row_slice(b.len(), p, &rows)
    };
    let targets = |b: &DatasetBundle| {
        DVector::from_iterator(b.len(), b.labels().unwrap().into_iter().map(|y| if y == 0 { -1.0 } else { 1.0 }))
    };
    let x = design(&split.train);
    let y = targets(&split.train);
    // Ridge solution in dual form: w = Xᵀ(XXᵀ + λI)⁻¹y.
    let gram = &x * x.transpose() + DMatrix::identity(x.nrows(), x.nrows());
    let w = x.transpose() * gram.lu().solve(&y).unwrap();
    let pred = design(&split.eval) * w;
    let truth = targets(&split.eval);
    let correct = pred.iter().zip(truth.iter()).filter(|(p, t)| p.signum() == **t).count();
    let acc = correct as f64 / truth.len() as f64;
    assert!(acc >= 0.9, "probe accuracy {acc}");
}

#[test]
fn synthetic_is_deterministic_and_null_shift_matches() {
    let spec = SyntheticSpec::separable(3, 3, 4);
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    let null = generate_synthetic(&spec.without_shift()).unwrap();
    for b in &null[1..] {
        for (w0, w) in null[0].windows.iter().zip(&b.windows) {
            assert_eq!(w0.values, w.values);
        }
    }
}

#[test]
fn csv_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(7);
    let recs: Vec<SensorRecording> = ["walk", "sit", "walk"]
        .iter()
        .map(|a| recording(Matrix::from_fn(300, 6, |_, _| rng.normal()), 100.0, a, "p"))
        .collect();
    let path = dir.path().join("p.csv");
    write_domain_csv(&path, &recs).unwrap();
    let back = read_domain_csv(&path, "p", 100.0).unwrap();
    assert_eq!(back, recs);

    let mut q = recs.clone();
    q.iter_mut().for_each(|r| r.domain = "q".into());
    write_domain_csv(&dir.path().join("q.csv"), &q).unwrap();
    let manifest = Manifest {
        domains: vec![
            DomainEntry {
                name: "p".into(),
                path: "p.csv".into(),
                sample_rate: 100.0,
            },
            DomainEntry {
                name: "q".into(),
                path: "q.csv".into(),
                sample_rate: 100.0,
            },
        ],
    };
    write_manifest(&dir.path().join("m.toml"), &manifest).unwrap();
    let corpus = load_corpus(&dir.path().join("m.toml")).unwrap();
    assert_eq!(corpus.len(), 2);
    assert_eq!(corpus[0].vocabulary, ["sit", "walk"]);
    assert!(corpus[0].windows.iter().all(|w| w.values.shape() == (128, 6)));
}

#[test]
fn window_cache_round_trip() {
    let bundles = generate_synthetic(&SyntheticSpec::separable(2, 3, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_windows(&path, &bundles).unwrap();
    let back = load_windows(&path).unwrap();
    assert_eq!(back, bundles);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"HPCK");
}

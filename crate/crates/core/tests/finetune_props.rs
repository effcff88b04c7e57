mod common;

use common::{random, tiny_config};
use harpeft_core::eval::count_parameters;
use harpeft_core::finetune::{
    pool_and_classify, select_trainable, train, ClassifierHead, FineTuneModel, LabeledSet, Strategy, TrainConfig,
};
use harpeft_core::io::{load_adapters, load_model, save_adapters, save_model};
use harpeft_core::model::{Encoder, Module};
use harpeft_core::numerics::{Matrix, Rng, Tape};
use harpeft_core::peft::LoraConfig;
use harpeft_core::Error;

#[test]
fn cross_entropy_values() {
    let mut t = Tape::new();
    let z = t.constant(Matrix::zeros(1, 6)).unwrap();
    let l = t.cross_entropy(z, &[4]).unwrap();
    assert!((t.value(l).get(0, 0) - 6f64.ln()).abs() < 1e-15);

    let mut logits = Matrix::zeros(1, 6);
    logits.set(0, 2, 60.0);
    let z = t.constant(logits).unwrap();
    let l = t.cross_entropy(z, &[2]).unwrap();
    assert!(t.value(l).get(0, 0) < 1e-25);

    assert!(t.cross_entropy(z, &[6]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = Rng::new(1);
    let logits = random(1, 5, &mut rng);
    let mut t = Tape::new();
    let z = t.leaf(logits.clone(), true).unwrap();
    let l = t.cross_entropy(z, &[3]).unwrap();
    t.backward(l).unwrap();
    let denom: f64 = logits.row(0).iter().map(|v| v.exp()).sum();
    for j in 0..5 {
        let p = logits.get(0, j).exp() / denom;
        let expect = p - f64::from(j == 3);
        assert!((t.grad(z).unwrap().get(0, j) - expect).abs() < 1e-15);
    }
}

#[test]
fn head_modes() {
    let cfg = tiny_config();
    let mut rng = Rng::new(2);
    let enc = random(cfg.num_tokens() * 3, cfg.embed_dim, &mut rng);

    let mut zero = ClassifierHead::new(cfg.embed_dim, cfg.head_hidden, 4, 0.5, &mut rng);
    zero.visit_mut(&mut |p| p.value.fill(0.0));
    let mut t = Tape::new();
    let e = t.constant(enc.clone()).unwrap();
    let logits = pool_and_classify(&mut t, e, cfg.num_tokens(), &zero).unwrap();
    assert_eq!(t.value(logits).shape(), (3, 4));
    assert!(t.value(logits).as_slice().iter().all(|v| *v == 0.0));

    let head = ClassifierHead::new(cfg.embed_dim, cfg.head_hidden, 4, 0.5, &mut rng);
    let eval = |h: &ClassifierHead| {
        let mut t = Tape::new();
        let e = t.constant(enc.clone()).unwrap();
        let l = pool_and_classify(&mut t, e, cfg.num_tokens(), h).unwrap();
        t.value(l).clone()
    };
    assert_eq!(eval(&head), eval(&head));

    let train_mode = |seed: u64| {
        let mut h = head.clone();
        let mut t = Tape::new();
        let e = t.constant(enc.clone()).unwrap();
        let pooled = t.mean_pool(e, cfg.num_tokens()).unwrap();
        let l = h.forward_train(&mut t, pooled, &mut Rng::new(seed)).unwrap();
        t.value(l).clone()
    };
    assert_eq!(train_mode(5), train_mode(5));
    assert_ne!(train_mode(5), train_mode(6));
}

fn backbone() -> Encoder {
    Encoder::new(&tiny_config(), &mut Rng::new(3)).unwrap()
}

fn config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        lora: strategy.uses_adapters().then(|| LoraConfig::with_rank(2, 4.0)),
        ..TrainConfig::for_strategy(strategy)
    }
}

#[test]
fn strategy_partition() {
    let bb = backbone();
    for s in Strategy::ALL {
        let model = FineTuneModel::prepare(&bb, 3, &config(s)).unwrap();
        let (mut trainable, mut frozen, mut all) = (0, 0, 0);
        model.visit(&mut |p| {
            all += 1;
            let expect = match s {
                Strategy::Full => true,
                Strategy::FrozenHead => p.name.starts_with("head."),
                Strategy::Lora | Strategy::Qlora => p.name.starts_with("head.") || p.name.contains(".lora_"),
            };
            assert_eq!(p.trainable, expect, "{s}: {}", p.name);
            if p.trainable {
                trainable += 1;
            } else {
                frozen += 1;
            }
        });
        assert_eq!(trainable + frozen, all);
        assert_eq!(model.trainable_names().len(), trainable);
        if s == Strategy::Full {
            let (t, total) = count_parameters(&model);
            assert_eq!(t, total);
        }
    }
}

#[test]
fn strategy_wrapping_mismatch() {
    let bb = backbone();
    let mut lora = FineTuneModel::prepare(&bb, 3, &config(Strategy::Lora)).unwrap();
    for s in [Strategy::Full, Strategy::FrozenHead, Strategy::Qlora] {
        assert!(matches!(select_trainable(&mut lora, s), Err(Error::StrategyMismatch { .. })));
    }
    let mut plain = FineTuneModel::prepare(&bb, 3, &config(Strategy::Full)).unwrap();
    assert!(matches!(select_trainable(&mut plain, Strategy::Lora), Err(Error::StrategyMismatch { .. })));
    assert!(FineTuneModel::prepare(&lora.encoder, 3, &config(Strategy::Lora)).is_err());
}

/// Two classes separated by the sign of a constant channel offset.
fn separable(n_per_class: usize, seed: u64) -> LabeledSet {
    let cfg = tiny_config();
    let mut rng = Rng::new(seed);
    let mut set = LabeledSet::default();
    for i in 0..2 * n_per_class {
        let y = i % 2;
        let shift = if y == 0 { 1.5 } else { -1.5 };
        set.windows
            .push(Matrix::from_fn(cfg.window_len, cfg.channels, |_, _| shift + 0.3 * rng.normal()));
        set.labels.push(y);
    }
    set
}

#[test]
fn frozen_head_converges_on_separable_data() {
    let data = separable(24, 4);
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 5,
        ..config(Strategy::FrozenHead)
    };
    let mut model = FineTuneModel::prepare(&backbone(), 2, &tc).unwrap();
    let before = model.encoder.clone();
    let log = train(&mut model, &data, &LabeledSet::default(), &tc).unwrap();
    assert_eq!(log.epochs.len(), 50);
    assert_eq!(log.to_json_lines().unwrap().lines().count(), 50);
    let losses = log.losses();
    let first: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(last < first, "{first} -> {last}");
    let acc = model.evaluate(&data, 32).unwrap().accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(model.encoder, before);
}

#[test]
fn frozen_head_backbone_gradients_are_zero() {
    let data = separable(4, 6);
    let mut model = FineTuneModel::prepare(&backbone(), 2, &config(Strategy::FrozenHead)).unwrap();
    let mut t = Tape::new();
    let logits = model.logits_train(&mut t, &data.refs(), &mut Rng::new(1)).unwrap();
    let l = t.cross_entropy(logits, &data.labels).unwrap();
    t.backward(l).unwrap();
    model.collect_grads(&t).unwrap();
    model.encoder.visit(&mut |p| assert_eq!(p.grad.max_abs(), 0.0, "{}", p.name));
    let mut head_grad = 0.0;
    model.head.visit(&mut |p| head_grad += p.grad.max_abs());
    assert!(head_grad > 0.0);
}

#[test]
fn identical_seeds_identical_logs() {
    let data = separable(6, 7);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 5,
        seed: 9,
        ..config(Strategy::Lora)
    };
    let run = || {
        let mut m = FineTuneModel::prepare(&backbone(), 2, &tc).unwrap();
        train(&mut m, &data, &data, &tc).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses(), b.losses());
    let acc = |l: &harpeft_core::finetune::TrainLog| l.epochs.iter().map(|e| e.val_accuracy).collect::<Vec<_>>();
    assert_eq!(acc(&a), acc(&b));
}

#[test]
fn lora_training_keeps_backbone_bytes() {
    let data = separable(6, 8);
    let bb = backbone();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-2,
        ..config(Strategy::Lora)
    };
    let mut model = FineTuneModel::prepare(&bb, 2, &tc).unwrap();
    train(&mut model, &data, &LabeledSet::default(), &tc).unwrap();

    let mut original = Vec::new();
    bb.visit(&mut |p| original.push((p.name.clone(), p.value.to_le_bytes())));
    let mut after = Vec::new();
    let mut adapters_moved = false;
    model.encoder.visit(&mut |p| {
        if p.name.contains(".lora_") {
            adapters_moved |= p.name.ends_with("lora_a") && p.value.max_abs() > 0.0;
        } else {
            after.push((p.name.clone(), p.value.to_le_bytes()));
        }
    });
    assert_eq!(original, after);
    assert!(adapters_moved);
}

#[test]
fn empty_class_is_a_warning() {
    let data = separable(3, 9);
    let tc = TrainConfig {
        epochs: 1,
        ..config(Strategy::FrozenHead)
    };
    let mut model = FineTuneModel::prepare(&backbone(), 3, &tc).unwrap();
    let log = train(&mut model, &data, &LabeledSet::default(), &tc).unwrap();
    assert_eq!(log.warnings, vec!["class 2 has no training windows".to_string()]);
}

#[test]
fn reloaded_models_give_identical_logits() {
    let data = separable(6, 9);
    let bb = backbone();
    let dir = tempfile::tempdir().unwrap();
    let logits = |m: &FineTuneModel| {
        let mut t = Tape::new();
        let z = m.logits_eval(&mut t, &data.refs()).unwrap();
        t.value(z).to_le_bytes()
    };
    for s in Strategy::ALL {
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            ..config(s)
        };
        let mut model = FineTuneModel::prepare(&bb, 2, &tc).unwrap();
        train(&mut model, &data, &LabeledSet::default(), &tc).unwrap();
        let path = dir.path().join(format!("{s}.hpck"));
        let back = if s.uses_adapters() {
            save_adapters(&path, &model).unwrap();
            load_adapters(&path, &bb).unwrap()
        } else {
            save_model(&path, &model).unwrap();
            load_model(&path).unwrap()
        };
        assert_eq!(logits(&model), logits(&back), "{s}");
    }
}

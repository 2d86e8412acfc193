use vkd_core::data::{generate, split, Dataset, GenSpec};
use vkd_core::model::{is_text_param, ForwardCtx};
use vkd_core::objectives::{objective_loss, LossOptions};
use vkd_core::trainer::{
    checkpoint_text, load_checkpoint, parse_checkpoint, run_epoch, save_checkpoint, train, train_from, TrainState,
};
use vkd_core::{Error, Graph, ModelConfig, Objective, TrainConfig, VkdModel};

fn model_config(latent_dim: usize) -> ModelConfig {
    ModelConfig {
        latent_dim,
        hidden: 24,
        feature_dim: 24,
        embed_dim: 16,
        ..ModelConfig::default()
    }
}

fn datasets(n: usize, seed: u64) -> (Dataset, Dataset) {
    let ds = generate(&GenSpec {
        n_samples: n,
        seed,
        ..GenSpec::default()
    })
    .unwrap();
    let (tr, va, _) = split(&ds, [0.8, 0.2, 0.0], seed).unwrap();
    (tr, va)
}

fn config(objective: Objective, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        objective,
        max_epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (tr, va) = datasets(300, 1);
    let m = VkdModel::init(model_config(4), 2).unwrap();
    let mut cfg = config(Objective::Vkd, 3);
    cfg.adam.lr = 0.0;
    cfg.patience = 100;
    let out = train(m.clone(), &tr, &va, &cfg).unwrap();
    assert_eq!(out.state.model, m);
    assert_eq!(out.state.adam.step, 3 * 4);
}

#[test]
fn first_epoch_loss_is_below_initial_loss() {
    let ds = generate(&GenSpec::default()).unwrap();
    let (tr, va, _) = split(&ds, [0.75, 0.25, 0.0], 0).unwrap();
    for obj in [Objective::Vkd, Objective::Cvi] {
        let m = VkdModel::init(ModelConfig::default(), 0).unwrap();
        let mut state = TrainState::new(m, config(obj, 1)).unwrap();
        let mut log = Vec::new();
        run_epoch(&mut state, &tr, &va, &mut log).unwrap();
        let loss = log[0].train.total;
        assert!(loss < obj.initial_loss(6), "{obj:?}: {loss}");
    }
}

#[test]
fn training_stops_within_max_epochs_and_returns_best_weights() {
    let (tr, va) = datasets(400, 2);
    let cfg = TrainConfig {
        patience: 2,
        ..config(Objective::Cvi, 12)
    };
    let out = train(VkdModel::init(model_config(4), 1).unwrap(), &tr, &va, &cfg).unwrap();
    assert!(out.state.epoch <= 12);
    assert_eq!(out.log.len(), out.state.epoch);
    let best = out.log.iter().map(|r| r.val_macro_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_auc, Some(best));
    let (report, _) = vkd_core::trainer::validate(&out.model, &va, &cfg).unwrap();
    assert_eq!(report.macro_auc, best);
}

#[test]
fn same_seed_gives_identical_logs() {
    let (tr, va) = datasets(300, 3);
    let cfg = TrainConfig {
        log_batches: true,
        ..config(Objective::Vkd, 3)
    };
    let run = || {
        let out = train(VkdModel::init(model_config(4), 5).unwrap(), &tr, &va, &cfg).unwrap();
        let rows: Vec<_> = out.log.iter().map(|r| r.without_timing()).collect();
        (rows, out.state)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.len(), 3 * 4 + 3);
    let bits = |rows: &[vkd_core::TrainLogRow]| -> Vec<u64> {
        rows.iter()
            .flat_map(|r| [r.beta, r.train.total, r.train.kl, r.val_image_ce, r.val_macro_auc].map(f64::to_bits))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(sa, sb);

    let other = TrainConfig { seed: 4, ..cfg.clone() };
    let out = train(VkdModel::init(model_config(4), 5).unwrap(), &tr, &va, &other).unwrap();
    assert_ne!(bits(&out.log), bits(&a));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (tr, va) = datasets(200, 4);
    let mut state = TrainState::new(VkdModel::init(model_config(3), 1).unwrap(), config(Objective::Vkd, 5)).unwrap();
    run_epoch(&mut state, &tr, &va, &mut Vec::new()).unwrap();
    run_epoch(&mut state, &tr, &va, &mut Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(checkpoint_text(&back), std::fs::read_to_string(&path).unwrap());
    assert!(!dir.path().join("m.ckpt.tmp").exists());

    let text = checkpoint_text(&state);
    assert!(text.starts_with("vkdc 1\n"));
    assert!(text.trim_end().ends_with(&format!("step={}", state.adam.step)));
    assert!(text.contains("\nprior.out.w.m 2 24 6\n"));
}

#[test]
fn checkpoint_errors() {
    let state = TrainState::new(VkdModel::init(model_config(3), 1).unwrap(), config(Objective::Vkd, 5)).unwrap();
    let text = checkpoint_text(&state);

    let e = parse_checkpoint(&text.replacen("vkdc 1", "vkdc 2", 1)).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)), "{e}");

    let e = parse_checkpoint(&text.replacen("latent_dim=3", "latent_dim=5", 1)).unwrap_err();
    assert!(matches!(e, Error::LatentDimMismatch { config: 5, checkpoint: 3 }), "{e}");
    let msg = e.to_string();
    assert!(msg.contains('5') && msg.contains('3'), "{msg}");

    let cut: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
    assert!(parse_checkpoint(&cut).is_err());
    assert!(parse_checkpoint(&text.replacen("image_encoder.w 2 16 24", "image_encoder.w 2 16 25", 1)).is_err());
}

#[test]
fn resume_replays_uninterrupted_run() {
    let (tr, va) = datasets(300, 6);
    let cfg = TrainConfig {
        patience: 100,
        ..config(Objective::Vkd, 4)
    };
    let model = VkdModel::init(model_config(4), 8).unwrap();
    let full = train(model.clone(), &tr, &va, &cfg).unwrap();

    let mut state = TrainState::new(model, cfg).unwrap();
    let mut first = Vec::new();
    run_epoch(&mut state, &tr, &va, &mut first).unwrap();
    run_epoch(&mut state, &tr, &va, &mut first).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e2.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let resumed = train_from(load_checkpoint(&path).unwrap(), &tr, &va).unwrap();

    let strip = |rows: &[vkd_core::TrainLogRow]| rows.iter().map(|r| r.without_timing()).collect::<Vec<_>>();
    let mut joined = strip(&first);
    joined.extend(strip(&resumed.log));
    assert_eq!(joined, strip(&full.log));
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.model, full.model);
}

#[test]
fn no_mi_ablation_sends_no_gradient_to_text_head() {
    let (tr, _) = datasets(64, 7);
    let m = VkdModel::init(model_config(4), 3).unwrap();
    // move off the zero-initialized final layers so every path carries gradient
    let mut m = m;
    for p in m.params_mut() {
        p.value.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * ((i % 7) as f64 - 3.0));
    }
    let batch = tr.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let opts = LossOptions::new(0.5, 1, ForwardCtx::train(1, 1));
    for (obj, text_head_grad) in [(Objective::VkdNoMi, false), (Objective::Vkd, true)] {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let loss = objective_loss(&mut g, &p, &m, &batch, obj, &opts).unwrap();
        assert_eq!(loss.breakdown(&g).text_ce > 0.0, text_head_grad);
        g.backward(loss.total).unwrap();
        for (param, &v) in m.params().iter().zip(p.vars()) {
            let nonzero = g.grad(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
            if param.name.starts_with("text_head.") {
                assert_eq!(nonzero, text_head_grad, "{obj:?} {}", param.name);
            } else if is_text_param(&param.name) && param.name != "text_embedding" {
                assert!(nonzero, "{obj:?} {}", param.name);
            }
        }
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let (tr, va) = datasets(100, 8);
    let m = VkdModel::init(model_config(4), 3).unwrap();
    let empty = Dataset::empty(tr.input_dim, tr.seq_len, tr.vocab, tr.n_classes);
    assert!(train(m.clone(), &empty, &va, &config(Objective::Vkd, 1)).is_err());
    assert!(train(m.clone(), &tr, &empty, &config(Objective::Vkd, 1)).is_err());
    let wrong = VkdModel::init(ModelConfig { input_dim: 9, ..model_config(4) }, 3).unwrap();
    assert!(matches!(
        train(wrong, &tr, &va, &config(Objective::Vkd, 1)),
        Err(Error::DimensionMismatch { .. })
    ));
    let bad = TrainConfig { batch_size: 0, ..config(Objective::Vkd, 1) };
    assert!(matches!(train(m, &tr, &va, &bad), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_batch_index() {
    let (tr, va) = datasets(100, 9);
    let mut m = VkdModel::init(model_config(4), 3).unwrap();
    m.params_mut()[0].value.data_mut()[0] = f64::NAN;
    let e = train(m, &tr, &va, &config(Objective::Cvi, 2)).unwrap_err();
    match e {
        Error::NonFiniteLoss { batch, breakdown } => {
            assert_eq!(batch, 1);
            assert!(!breakdown.is_finite());
        }
        other => panic!("unexpected {other}"),
    }
}

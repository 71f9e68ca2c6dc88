use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmpda::losses::AdaptWeights;
use mmpda::model::{ModelArch, ModelBundle, ModelDims};
use mmpda::synthdata::{generate_domain, gap_triplet, DomainDataset, Role};
use mmpda::trainer::{
    apply_step, build_objective, collect_grads, run_training, sample_paired_batch, train_step, AdaptConfig,
    OptimizerKind, OptimizerState, PairedBatch, TrainState,
};
use mmpda::{Error, Graph, Tensor};

fn small_dims() -> ModelDims {
    ModelDims {
        encoder_hidden: vec![6],
        unimodal_width: 5,
        fused_width: 4,
        disc_hidden: vec![6],
        ..ModelDims::default()
    }
}

fn domains() -> (DomainDataset, DomainDataset) {
    let specs = gap_triplet(3, 40);
    (
        generate_domain(&specs[0]).unwrap(),
        generate_domain(&specs[2]).unwrap().with_role(Role::Target).unwrap(),
    )
}

fn setup() -> (ModelBundle, PairedBatch, DomainDataset, DomainDataset) {
    let (s, t) = domains();
    let model = ModelBundle::init(ModelArch::new(s.widths().to_vec(), small_dims()).unwrap(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sample_paired_batch(&s, &t, 8, &mut rng).unwrap();
    (model, batch, s, t)
}

fn grads(model: &ModelBundle, batch: &PairedBatch, cfg: &AdaptConfig, pseudo: Option<&[Option<usize>]>) -> Vec<Tensor> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obj = build_objective(&mut g, model, batch, cfg, 0.7, pseudo, &mut rng).unwrap();
    g.backward(obj.total).unwrap();
    collect_grads(&g, &obj.params).leaves().into_iter().cloned().collect()
}

#[test]
fn baseline_gradients_ignore_the_target_batch() {
    let (model, batch, _, _) = setup();
    let cfg = AdaptConfig {
        weights: AdaptWeights::baseline(),
        ..AdaptConfig::default()
    };
    let mut other = batch.clone();
    other.target = other.target.iter().map(|t| t.map(|v| 100.0 - 3.0 * v)).collect();
    assert_eq!(grads(&model, &batch, &cfg, None), grads(&model, &other, &cfg, None));
}

#[test]
fn pseudo_labels_only_reach_the_mdd_term() {
    let (model, batch, _, _) = setup();
    let cfg = AdaptConfig {
        weights: AdaptWeights {
            beta: 0.0,
            ..AdaptWeights::default()
        },
        ..AdaptConfig::default()
    };
    let zeros = vec![Some(0); 8];
    let mixed: Vec<_> = (0..8).map(|i| (i % 3 != 0).then_some(i % 2)).collect();
    assert_eq!(grads(&model, &batch, &cfg, Some(&zeros)), grads(&model, &batch, &cfg, Some(&mixed)));
    // Pseudo-labels do matter once target features carry gradient.
    let with_mdd = AdaptConfig {
        target_grad: true,
        ..AdaptConfig::default()
    };
    assert_ne!(
        grads(&model, &batch, &with_mdd, Some(&zeros)),
        grads(&model, &batch, &with_mdd, Some(&mixed))
    );
}

#[test]
fn zero_weights_match_the_baseline_update() {
    let (model, batch, _, _) = setup();
    let step = |weights| {
        let cfg = AdaptConfig {
            weights,
            optimizer: OptimizerKind::PlainSgd,
            lr: 0.05,
            ..AdaptConfig::default()
        };
        let mut m = model.clone();
        let mut opt = OptimizerState::new(cfg.optimizer, &m.params);
        apply_step(&batch, &mut m, &cfg, &mut opt, 0.3, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m
    };
    let base = step(AdaptWeights::baseline());
    let zeroed = step(AdaptWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        eta: 0.0,
        lambda: 10.0,
    });
    for (a, b) in base.params.leaves().iter().zip(zeroed.params.leaves()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn progress_advances_by_one_step_and_ends_at_one() {
    let (mut model, batch, _, _) = setup();
    let cfg = AdaptConfig::desk_scale();
    let total = 7;
    let mut state = TrainState::new(total, OptimizerState::new(cfg.optimizer, &model.params));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut last = state.progress();
    assert_eq!(last, 0.0);
    for k in 1..=total {
        train_step(&batch, &mut model, &cfg, &mut state, &mut rng).unwrap();
        let p = state.progress();
        assert_eq!(p, k as f64 / total as f64);
        assert!(p > last);
        last = p;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn each_source_is_visited_once_per_epoch_in_order() {
    let specs = gap_triplet(5, 40);
    let a = generate_domain(&specs[0]).unwrap();
    let mut b_spec = specs[1].clone();
    b_spec.count = 20;
    let b = generate_domain(&b_spec).unwrap();
    let t = generate_domain(&specs[2]).unwrap().with_role(Role::Target).unwrap();
    let cfg = AdaptConfig {
        epochs: 3,
        batch_size: 16,
        model: small_dims(),
        ..AdaptConfig::desk_scale()
    };
    let (_, report) = run_training(&[a, b], &t, &cfg).unwrap();
    for e in &report.per_epoch {
        let trace: Vec<_> = e.source_domain_trace.iter().map(|v| (v.domain.as_str(), v.steps)).collect();
        assert_eq!(trace, vec![("domain-1", 3), ("domain-2", 2)]);
    }
}

#[test]
fn exploding_update_is_reported_as_divergence() {
    let (mut model, batch, _, _) = setup();
    let cfg = AdaptConfig {
        optimizer: OptimizerKind::PlainSgd,
        lr: 1e308,
        grad_clip: None,
        ..AdaptConfig::default()
    };
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let err = apply_step(&batch, &mut model, &cfg, &mut opt, 0.5, 42, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 42, .. }), "{err:?}");
}

#[test]
fn report_config_echo_round_trips() {
    let (s, t) = domains();
    let cfg = AdaptConfig {
        epochs: 1,
        model: small_dims(),
        ..AdaptConfig::desk_scale()
    };
    let (_, report) = run_training(&[s], &t, &cfg).unwrap();
    let back: AdaptConfig = serde_json::from_value(report.config.clone()).unwrap();
    assert_eq!(back, cfg);
    let json = report.to_json().unwrap();
    assert!(json.contains("\"final\""));
}

use lpnlab::autodiff::Tensor;
use lpnlab::data::{self, Dataset};
use lpnlab::lpnorm::{self, LpNormLayer, NormOrder, RadiusParam};
use lpnlab::models::{build_poc, Classifier};
use lpnlab::train::{self, Optimizer, TrainConfig};

fn config(epochs: usize, batch_size: Option<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: Optimizer::adam(1e-2),
        seed,
        eval_epochs: vec![epochs],
        shuffle: true,
    }
}

fn learnable() -> LpNormLayer {
    LpNormLayer::new(NormOrder::learnable(), RadiusParam::learnable())
}

fn toy() -> Dataset {
    let points = Tensor::from_rows(&[[1.0, 1.0], [2.0, 0.5], [-1.0, -1.0], [-0.5, -2.0]]).unwrap();
    Dataset::new(points, vec![1, 1, 0, 0], 2).unwrap()
}

#[test]
fn separable_toy_is_fit_with_every_norm_setting() {
    let settings = [
        None,
        Some(LpNormLayer::new(NormOrder::One, RadiusParam::Fixed(1.0))),
        Some(LpNormLayer::new(NormOrder::Two, RadiusParam::Fixed(1.0))),
        Some(LpNormLayer::new(NormOrder::Inf, RadiusParam::Fixed(1.0))),
        Some(learnable()),
    ];
    for norm in settings {
        let mut c = build_poc(2, norm, 3).unwrap();
        let record = train::train(&mut c, &toy(), &config(200, None, 1)).unwrap();
        let hit = record.epochs.iter().find(|e| e.train_acc == 1.0);
        assert!(hit.is_some(), "{norm:?} never separated the toy set");
    }
}

#[test]
fn first_epoch_loss_is_near_chance() {
    let data = data::sample(&data::poc_spec(), 250, 11).unwrap();
    for norm in [None, Some(LpNormLayer::new(NormOrder::Two, RadiusParam::Fixed(1.0)))] {
        let mut c = build_poc(2, norm, 5).unwrap();
        let mut cfg = config(1, Some(32), 2);
        cfg.optimizer = Optimizer::adam(1e-3);
        let record = train::train(&mut c, &data, &cfg).unwrap();
        let loss = record.epochs[0].train_loss;
        assert!((loss - 2f64.ln()).abs() < 0.2, "epoch-1 loss {loss}");
    }
}

#[test]
fn learnable_scalars_receive_gradient_and_move() {
    let data = data::sample(&data::poc_spec(), 50, 12).unwrap();
    let mut c = build_poc(4, Some(learnable()), 6).unwrap();
    c.zero_grad();
    c.loss_and_accumulate(&data.points, &data.labels).unwrap();
    for name in ["lpnorm.p_raw", "lpnorm.alpha_raw"] {
        let p = c.params().iter().find(|p| p.name == name).unwrap();
        assert!(p.grad[0] != 0.0 && p.grad[0].is_finite(), "{name} grad {}", p.grad[0]);
    }
    let record = train::train(&mut c, &data, &config(5, Some(16), 3)).unwrap();
    let last = record.last();
    assert!(last.p_decoded.unwrap() != 2.0);
    assert!(last.alpha_decoded.unwrap() != 1.0);
    assert!(last.p_decoded.unwrap() >= 1.0 && last.alpha_decoded.unwrap() > 0.0);
}

#[test]
fn trained_representations_obey_the_magnitude_bounds() {
    let data = data::sample(&data::poc_spec(), 100, 13).unwrap();
    for order in [NormOrder::One, NormOrder::General(3.0), NormOrder::Inf, NormOrder::learnable()] {
        let layer = LpNormLayer::new(order, RadiusParam::learnable());
        let mut c = build_poc(4, Some(layer), 7).unwrap();
        train::train(&mut c, &data, &config(10, Some(32), 4)).unwrap();
        let trained = c.norm_layer().unwrap();
        let (p, alpha) = (trained.p(), trained.alpha());
        let out = c.forward(&data.points).unwrap();
        for (raw, norm) in out.penultimate.row_iter().zip(out.normalized.row_iter()) {
            let len = lpnorm::lp_norm(norm, 2.0).unwrap();
            let expected = alpha * lpnorm::cp_ratio(raw, p).unwrap();
            assert!((len - expected).abs() <= 1e-10 * alpha.max(1.0));
            let iv = lpnorm::magnitude_interval(raw, p, alpha).unwrap();
            assert!(iv.lo <= len * (1.0 + 1e-12) && len <= iv.hi * (1.0 + 1e-12));
        }
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = data::sample(&data::poc_spec(), 60, 14).unwrap();
    let run = || {
        let mut c = build_poc(2, Some(learnable()), 8).unwrap();
        let r = train::train(&mut c, &data, &config(8, Some(10), 5)).unwrap();
        (c, r.to_csv())
    };
    let (a, csv_a) = run();
    let (b, csv_b) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lpn");
    a.save(&path).unwrap();
    let loaded = Classifier::load(&path).unwrap();
    assert_eq!(loaded.predict(&data.points).unwrap(), a.predict(&data.points).unwrap());
    assert_eq!(loaded.forward(&data.points).unwrap(), a.forward(&data.points).unwrap());
}

#[test]
fn divergence_is_reported_not_propagated() {
    let mut c = build_poc(2, None, 9).unwrap();
    let mut cfg = config(3, None, 6);
    cfg.optimizer = Optimizer::Sgd { lr: f64::MAX };
    let err = train::train(&mut c, &toy(), &cfg).unwrap_err();
    assert!(matches!(err, lpnlab::Error::Diverged { .. }), "{err}");
}

//! End-to-end training checks: analytic gradients against finite
//! differences, optimizer behavior, and determinism of full steps.

use qgn_core::mask::gen_synthetic;
use qgn_core::model::{
    encode_checkpoint, mask_to_image, PropagationScheme, QgnConfig, QgnModel,
};
use qgn_core::pyramid::{build_t_pyramid, TPyramid};
use qgn_core::sparse::{DenseTensor, Scalar, SparseActivation};
use qgn_core::train::{
    level_loss, level_loss_with_grad, total_loss, train_step, ClassWeights, LossWeights,
    TrainConfig,
};
use qgn_core::QgnError;

fn small_cfg(seed: u64) -> QgnConfig {
    QgnConfig {
        levels: 2,
        num_classes: 3,
        in_channels: 3,
        encoder_channels: vec![4, 6, 8],
        decoder_channels: vec![4, 4, 6],
        units_per_block: 1,
        seed,
    }
}

fn weighted_loss<T: Scalar>(
    model: &QgnModel<T>,
    img: &DenseTensor<T>,
    gt: &TPyramid,
    scheme: PropagationScheme,
    lw: &LossWeights,
    cw: &ClassWeights,
) -> f64 {
    let pass = model.forward(img, scheme, Some(gt)).unwrap();
    let losses: Vec<f64> = (0..=model.cfg.levels)
        .map(|l| level_loss(&pass.prediction.logits[l as usize], gt, l, cw).unwrap())
        .collect();
    total_loss(&losses, lw).unwrap()
}

fn analytic_grads<T: Scalar>(
    model: &mut QgnModel<T>,
    img: &DenseTensor<T>,
    gt: &TPyramid,
    scheme: PropagationScheme,
    lw: &LossWeights,
    cw: &ClassWeights,
) {
    model.zero_grads();
    let pass = model.forward(img, scheme, Some(gt)).unwrap();
    let mut grads: Vec<Option<SparseActivation<T>>> = Vec::new();
    for l in 0..=model.cfg.levels {
        let (_, mut g) =
            level_loss_with_grad(&pass.prediction.logits[l as usize], gt, l, cw).unwrap();
        let beta = T::from_f64(lw.beta()[l as usize]).unwrap();
        for v in g.sites.values_mut() {
            for c in v.iter_mut() {
                *c = *c * beta;
            }
        }
        grads.push(Some(g));
    }
    model.backward(&pass, grads).unwrap();
}

/// Central-difference check on a spread of parameters across all layers.
fn fd_check<T: Scalar>(scheme: PropagationScheme, h: f64, tol: f64) {
    let mut model = QgnModel::<T>::init(small_cfg(11)).unwrap();
    let mask = gen_synthetic(8, 8, 3, 3, 5);
    let gt = build_t_pyramid(&mask, 2).unwrap();
    let img = mask_to_image::<T>(&mask);
    let lw = LossWeights::fixed(0.75, 2);
    let cw = ClassWeights::ones(3);
    analytic_grads(&mut model, &img, &gt, scheme, &lw, &cw);

    let n_layers = model.param_layers().len();
    for li in 0..n_layers {
        for &wi in &[0usize, 7] {
            let (len, g) = {
                let p = model.param_layers()[li];
                if wi >= p.w.len() {
                    continue;
                }
                (p.w.len(), p.gw[wi].to_f64().unwrap())
            };
            let _ = len;
            let orig = model.param_layers()[li].w[wi];
            let hh = T::from_f64(h).unwrap();
            model.param_layers_mut()[li].w[wi] = orig + hh;
            let up = weighted_loss(&model, &img, &gt, scheme, &lw, &cw);
            model.param_layers_mut()[li].w[wi] = orig - hh;
            let down = weighted_loss(&model, &img, &gt, scheme, &lw, &cw);
            model.param_layers_mut()[li].w[wi] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-4);
            assert!(
                (g - fd).abs() / denom < tol,
                "layer {li} w[{wi}]: analytic {g} vs fd {fd}"
            );
        }
        // one bias per layer
        let gb = model.param_layers()[li].gb[0].to_f64().unwrap();
        let orig = model.param_layers()[li].b[0];
        let hh = T::from_f64(h).unwrap();
        model.param_layers_mut()[li].b[0] = orig + hh;
        let up = weighted_loss(&model, &img, &gt, scheme, &lw, &cw);
        model.param_layers_mut()[li].b[0] = orig - hh;
        let down = weighted_loss(&model, &img, &gt, scheme, &lw, &cw);
        model.param_layers_mut()[li].b[0] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = gb.abs().max(fd.abs()).max(1e-4);
        assert!((gb - fd).abs() / denom < tol, "layer {li} b[0]: analytic {gb} vs fd {fd}");
    }
}

#[test]
fn gradients_match_finite_differences_f64_all() {
    fd_check::<f64>(PropagationScheme::All, 1e-6, 1e-5);
}

#[test]
fn gradients_match_finite_differences_f64_gtc() {
    fd_check::<f64>(PropagationScheme::Gtc, 1e-6, 1e-5);
}

#[test]
fn gradients_match_finite_differences_f32() {
    // f32 analytic gradients against f64 finite differences on an
    // identically seeded model, sidestepping f32 FD roundoff noise.
    let mut m32 = QgnModel::<f32>::init(small_cfg(11)).unwrap();
    let mut m64 = QgnModel::<f64>::init(small_cfg(11)).unwrap();
    let mask = gen_synthetic(8, 8, 3, 3, 5);
    let gt = build_t_pyramid(&mask, 2).unwrap();
    let img32 = mask_to_image::<f32>(&mask);
    let img64 = mask_to_image::<f64>(&mask);
    let lw = LossWeights::fixed(0.75, 2);
    let cw = ClassWeights::ones(3);
    analytic_grads(&mut m32, &img32, &gt, PropagationScheme::All, &lw, &cw);

    let h = 1e-6;
    for li in 0..m64.param_layers().len() {
        for &wi in &[0usize, 7] {
            if wi >= m64.param_layers()[li].w.len() {
                continue;
            }
            let g = m32.param_layers()[li].gw[wi] as f64;
            let orig = m64.param_layers()[li].w[wi];
            m64.param_layers_mut()[li].w[wi] = orig + h;
            let up = weighted_loss(&m64, &img64, &gt, PropagationScheme::All, &lw, &cw);
            m64.param_layers_mut()[li].w[wi] = orig - h;
            let down = weighted_loss(&m64, &img64, &gt, PropagationScheme::All, &lw, &cw);
            m64.param_layers_mut()[li].w[wi] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-4);
            assert!((g - fd).abs() / denom < 1e-2, "layer {li} w[{wi}]: {g} vs {fd}");
        }
    }
}

fn small_batch(seed: u64) -> Vec<(DenseTensor<f32>, TPyramid)> {
    let mask = gen_synthetic(8, 8, 3, 3, seed);
    let gt = build_t_pyramid(&mask, 2).unwrap();
    let img = mask_to_image::<f32>(&mask);
    vec![(img, gt)]
}

#[test]
fn train_step_rejects_pc() {
    let mut model = QgnModel::<f32>::init(small_cfg(1)).unwrap();
    let mut lw = LossWeights::fixed(1.0, 2);
    let cw = ClassWeights::ones(3);
    let cfg = TrainConfig::default();
    let err = train_step(
        &mut model,
        &small_batch(1),
        PropagationScheme::Pc,
        &mut lw,
        &cw,
        &cfg,
        0,
    );
    assert!(matches!(err, Err(QgnError::Config(_))));
}

#[test]
fn train_step_with_zero_lr_keeps_params() {
    let mut model = QgnModel::<f32>::init(small_cfg(1)).unwrap();
    let before = encode_checkpoint(&model);
    let mut lw = LossWeights::fixed(1.0, 2);
    let cw = ClassWeights::ones(3);
    let cfg = TrainConfig { lr0: 0.0, ..Default::default() };
    train_step(&mut model, &small_batch(1), PropagationScheme::All, &mut lw, &cw, &cfg, 0)
        .unwrap();
    assert_eq!(encode_checkpoint(&model), before);
}

#[test]
fn train_steps_reduce_the_loss() {
    let mut model = QgnModel::<f32>::init(small_cfg(4)).unwrap();
    let mut lw = LossWeights::fixed(0.75, 2);
    let cw = ClassWeights::ones(3);
    let cfg = TrainConfig { lr0: 0.05, iters: 200, ..Default::default() };
    let batch = small_batch(9);
    let mut first = 0.0;
    let mut last = 0.0;
    for i in 0..50 {
        let stats =
            train_step(&mut model, &batch, PropagationScheme::All, &mut lw, &cw, &cfg, i)
                .unwrap();
        if i == 0 {
            first = stats.total;
        }
        last = stats.total;
        assert!(stats.total.is_finite());
    }
    assert!(last < first, "loss went {first} -> {last}");
    assert!(last < 0.5 * first, "loss went {first} -> {last}");
}

#[test]
fn train_steps_are_deterministic() {
    let run = || {
        let mut model = QgnModel::<f32>::init(small_cfg(4)).unwrap();
        let mut lw = LossWeights::adaptive(0.99, 2);
        let cw = ClassWeights::ones(3);
        let cfg = TrainConfig { lr0: 0.05, iters: 200, ..Default::default() };
        let batch = small_batch(9);
        for i in 0..10 {
            train_step(&mut model, &batch, PropagationScheme::Gtc, &mut lw, &cw, &cfg, i)
                .unwrap();
        }
        (encode_checkpoint(&model), lw.beta().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn momentum_changes_the_trajectory() {
    let run = |momentum: f64| {
        let mut model = QgnModel::<f32>::init(small_cfg(4)).unwrap();
        let mut lw = LossWeights::fixed(1.0, 2);
        let cw = ClassWeights::ones(3);
        let cfg = TrainConfig { lr0: 0.02, iters: 200, momentum, ..Default::default() };
        let batch = small_batch(9);
        let mut last = 0.0;
        for i in 0..20 {
            last = train_step(&mut model, &batch, PropagationScheme::All, &mut lw, &cw, &cfg, i)
                .unwrap()
                .total;
        }
        (encode_checkpoint(&model), last)
    };
    let (plain, l0) = run(0.0);
    let (heavy, l1) = run(0.9);
    assert_ne!(plain, heavy);
    assert!(l0.is_finite() && l1.is_finite());
}

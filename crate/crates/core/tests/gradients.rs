mod common;

use common::*;
use proptest::prelude::*;
use uad_core::autodiff::{
    adam_step, backbone_logits, cross_entropy, cross_entropy_sum, forward_backbone, grad, grad_through_update,
    lstm_forward, one_hot, AdamConfig, AdamState, BackboneSpec, LstmSpec, MetaGradMode, ParamSet, Tensor,
};
use uad_core::meta::{adapt_on, inner_update, MetaParams};
use uad_core::rng;

#[test]
fn kernels_match_finite_differences() {
    gradient_exactness(8).assert();
}

#[test]
fn meta_gradient_matches_finite_differences() {
    meta_gradient_exactness().assert();
}

#[test]
fn scalar_meta_gradient_and_outer_step() {
    let (dt, da, t, a) = scalar_meta_example();
    assert!((dt - 0.75).abs() < 1e-10, "{dt}");
    assert!((da + 1.5).abs() < 1e-10, "{da}");
    assert!((t - 1.925).abs() < 1e-12, "{t}");
    assert!((a - 0.65).abs() < 1e-12, "{a}");
}

#[test]
fn first_order_mode_drops_second_order_terms() {
    let theta = scalar_params(2.0);
    let alpha = scalar_params(0.5);
    let mg = grad_through_update(&theta, &alpha, half_sq_shifted, half_sq, 1, MetaGradMode::FirstOrder).unwrap();
    assert!((mg.theta.flatten()[0] - 1.5).abs() < 1e-12);
    assert!((mg.alpha.flatten()[0] + 1.5).abs() < 1e-12);
}

#[test]
fn zero_alpha_still_has_alpha_gradient() {
    let theta = scalar_params(2.0);
    let alpha = scalar_params(0.0);
    let mg = grad_through_update(&theta, &alpha, half_sq_shifted, half_sq, 1, MetaGradMode::Exact).unwrap();
    let fd = fd_gradient(&alpha, |a| {
        let th = 2.0 - a.flatten()[0] * (2.0 - 1.0);
        0.5 * th * th
    });
    assert!((mg.theta.flatten()[0] - 2.0).abs() < 1e-12);
    assert!((mg.alpha.flatten()[0] - fd[0]).abs() < 1e-8);
    assert!((mg.alpha.flatten()[0] + 2.0).abs() < 1e-12);
}

#[test]
fn two_parameter_quadratics_match_finite_differences() {
    let mut theta = ParamSet::new();
    theta.push("w", Tensor::vector(vec![0.7, -1.3])).unwrap();
    let mut alpha = ParamSet::new();
    alpha.push("w", Tensor::vector(vec![0.2, 0.4])).unwrap();
    let inner = |g: &mut uad_core::autodiff::Graph, p: &[uad_core::autodiff::Var]| {
        let s = g.square(p[0]);
        let s = g.sum(s);
        let t = g.sum(p[0]);
        let t = g.square(t);
        Ok(g.add(s, t))
    };
    let outer = |g: &mut uad_core::autodiff::Graph, p: &[uad_core::autodiff::Var]| {
        let d = g.affine(p[0], 1.0, -0.5);
        let s = g.square(d);
        Ok(g.sum(s))
    };
    let mg = grad_through_update(&theta, &alpha, inner, outer, 1, MetaGradMode::Exact).unwrap();
    let composed = |t: &[f64], a: &[f64]| {
        let s = t[0] + t[1];
        let g = [2.0 * t[0] + 2.0 * s, 2.0 * t[1] + 2.0 * s];
        (0..2).map(|i| (t[i] - a[i] * g[i] - 0.5).powi(2)).sum::<f64>()
    };
    let a0 = alpha.flatten();
    let t0 = theta.flatten();
    let fd_t = fd_gradient(&theta, |t| composed(&t.flatten(), &a0));
    let fd_a = fd_gradient(&alpha, |a| composed(&t0, &a.flatten()));
    for (x, y) in mg.theta.flatten().iter().zip(&fd_t).chain(mg.alpha.flatten().iter().zip(&fd_a)) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn inner_update_matches_finite_difference_step() {
    let (spec, meta, task) = small_task(9);
    let adapted = inner_update(&meta, &spec, &task, 1).unwrap();
    let fd = fd_gradient(&meta.theta, |t| batch_loss(t, &spec, &task.support));
    let want: Vec<f64> = meta
        .theta
        .flatten()
        .iter()
        .zip(meta.alpha.flatten())
        .zip(&fd)
        .map(|((t, a), g)| t - a * g)
        .collect();
    assert!(max_rel_err(&adapted.flatten(), &want) < 1e-4);
}

#[test]
fn scalar_inner_step_closed_form() {
    let meta = MetaParams::new(scalar_params(1.0), scalar_params(0.1)).unwrap();
    let (_, grad) = grad(&meta.theta, |g, p| {
        let s = g.square(p[0]);
        Ok(g.sum(s))
    })
    .unwrap();
    let stepped = meta.theta.zip_map(&meta.alpha.zip_map(&grad, |a, g| a * g).unwrap(), |t, s| t - s).unwrap();
    assert!((stepped.flatten()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn steps_zero_is_identity_and_meta_unchanged() {
    let (spec, meta, task) = small_task(2);
    let before = meta.clone();
    assert_eq!(adapt_on(&meta, &spec, &task.support, 0).unwrap(), meta.theta);
    let _ = adapt_on(&meta, &spec, &task.support, 3).unwrap();
    assert_eq!(meta, before);
}

#[test]
fn lstm_forward_matches_reference_loops() {
    let mut r = rng::stream(4, "lstm", 0);
    let spec = LstmSpec {
        input: 3,
        hidden: vec![4, 2],
    };
    let mut params = ParamSet::new();
    spec.init_into(&mut params, "p", &mut r).unwrap();
    let params = params.map(|v| v * 1.5 + 0.05);
    let seq: Vec<Tensor> = (0..3).map(|_| random_tensor(&[2, 3], 1.0, &mut r)).collect();
    let got = lstm_forward(&params, "p", &spec, &seq).unwrap();
    let want = lstm_reference(&params, &spec, &seq);
    for (layer, (h, c)) in got.final_states.iter().enumerate() {
        for row in 0..2 {
            let (wh, wc) = &want[row][layer];
            for j in 0..wh.len() {
                assert!((h.row(row)[j] - wh[j]).abs() < 1e-14);
                assert!((c.row(row)[j] - wc[j]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn adam_first_step_is_lr_per_coordinate() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
    let mut g = ParamSet::new();
    g.push("w", Tensor::vector(vec![3.0, -0.01, 1e-3])).unwrap();
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&p);
    let next = adam_step(&p, &g, &mut state, &cfg).unwrap();
    for ((a, b), gv) in p.flatten().iter().zip(next.flatten()).zip(g.flatten()) {
        let want = cfg.lr * gv / (gv.abs() + cfg.eps);
        assert!(((a - b) - want).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    assert!((cross_entropy(&[0.7, 0.2, 0.1], &[0.0, 1.0, 0.0]).unwrap() - 0.2f64.ln().abs()).abs() < 1e-12);
    let u = vec![1.0 / 7.0; 7];
    let mut y = vec![0.0; 7];
    y[3] = 1.0;
    assert!((cross_entropy(&u, &y).unwrap() - 7f64.ln()).abs() < 1e-12);
}

fn ce_grad(params: &ParamSet, x: &Tensor, y: &Tensor, scale: f64) -> ParamSet {
    grad(params, |g, p| {
        let xv = g.input(x);
        let yv = g.input(y);
        let l = backbone_logits(g, p, xv);
        let ce = cross_entropy_sum(g, l, yv);
        Ok(g.scale(ce, scale))
    })
    .unwrap()
    .1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng::stream(seed, "linear", 0);
        let spec = BackboneSpec::with_hidden(3, vec![4], 2);
        let params = spec.init(&mut r);
        let x = random_tensor(&[3, 3], 1.0, &mut r);
        let y1 = one_hot(&[0, 1, 3], 4);
        let y2 = one_hot(&[2, 2, 1], 4);
        let (_, both) = grad(&params, |g, p| {
            let xv = g.input(&x);
            let l = backbone_logits(g, p, xv);
            let t1 = g.input(&y1);
            let t2 = g.input(&y2);
            let c1 = cross_entropy_sum(g, l, t1);
            let c2 = cross_entropy_sum(g, l, t2);
            let c1 = g.scale(c1, a);
            let c2 = g.scale(c2, b);
            Ok(g.add(c1, c2))
        }).unwrap();
        let sum = ce_grad(&params, &x, &y1, a).zip_map(&ce_grad(&params, &x, &y2, b), |u, v| u + v).unwrap();
        for (u, v) in both.flatten().iter().zip(sum.flatten()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn output_permutation_is_equivariant(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "perm", 0);
        let spec = BackboneSpec::with_hidden(3, vec![5], 2);
        let params = spec.init(&mut r);
        let x = random_tensor(&[2, 3], 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let w = params.get("dense1.weight").unwrap();
        let b = params.get("dense1.bias").unwrap();
        let cols = w.cols();
        let mut wd = vec![0.0; w.len()];
        for i in 0..w.rows() {
            for (j, &pj) in perm.iter().enumerate() {
                wd[i * cols + j] = w.row(i)[pj];
            }
        }
        let bd: Vec<f64> = perm.iter().map(|&pj| b.data()[pj]).collect();
        let mut permuted = ParamSet::new();
        permuted.push("dense0.weight", params.get("dense0.weight").unwrap().clone()).unwrap();
        permuted.push("dense0.bias", params.get("dense0.bias").unwrap().clone()).unwrap();
        permuted.push("dense1.weight", Tensor::matrix(w.rows(), cols, wd)).unwrap();
        permuted.push("dense1.bias", Tensor::vector(bd)).unwrap();
        let p = forward_backbone(&params, &spec, &x).unwrap();
        let q = forward_backbone(&permuted, &spec, &x).unwrap();
        for row in 0..2 {
            for (j, &pj) in perm.iter().enumerate() {
                prop_assert!((q.row(row)[j] - p.row(row)[pj]).abs() < 1e-15);
            }
        }
    }
}

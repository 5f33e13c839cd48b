use icodoa::doa_model::{forward_tensor, ModelConfig, ModelParams, NetContext};
use icodoa::grad_engine::*;
use icodoa::ico_grid::{GridPyramid, IcoGrid};
use icodoa::ico_nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, t: usize, c: usize, o: usize, g: &IcoGrid) -> IcoTensor<f64> {
    IcoTensor::from_vec(t, c, o, g, random(rng, t * c * o * g.n_cells())).unwrap()
}

fn sample(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|_| rng.random_range(0..len)).collect()
}

/// Compares `analytic` with central differences of `f` at sampled indices.
fn check(name: &str, x: &mut [f64], analytic: &[f64], idx: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) {
    assert_eq!(x.len(), analytic.len(), "{name}");
    for &i in idx {
        let num = central_difference(x, i, H, f);
        let e = rel_error(analytic[i], num);
        assert!(e < TOL, "{name}[{i}]: analytic {} numeric {num} rel {e}", analytic[i]);
    }
}

/// Like [`check`], but a miss is probed again at h/10 and h/100: a ReLU or
/// orientation-max switch within the step makes the quotient meaningless.
/// Returns how many points needed a smaller step.
fn check_piecewise(name: &str, x: &mut [f64], analytic: &[f64], idx: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) -> usize {
    let mut refined = 0;
    for &i in idx {
        let errs: Vec<f64> = [H, H / 10.0, H / 100.0].iter().map(|&h| rel_error(analytic[i], central_difference(x, i, h, f))).collect();
        assert!(errs.iter().any(|&e| e < TOL), "{name}[{i}]: analytic {} rel errors {errs:?}", analytic[i]);
        refined += (errs[0] >= TOL) as usize;
    }
    refined
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn ico_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for r in 1..=2 {
        let g = IcoGrid::new(r).unwrap();
        for (cin, oin, cout) in [(1, 1, 3), (2, 6, 2)] {
            let gather = ConvGather::new(&g, oin);
            let x = random_tensor(&mut rng, 2, cin, oin, &g);
            let mut w = random(&mut rng, cout * cin * oin * 7);
            let mut b = random(&mut rng, cout);
            let y = ico_conv(&x, &w, &b, cout, &g, &gather).unwrap();
            let proj = random(&mut rng, y.data.len());
            let dy = IcoTensor::from_vec(y.t, y.c, y.o, &g, proj.clone()).unwrap();
            let gr = ico_conv_backward(&x, &w, cout, &dy, &g, &gather);

            let (w0, b0) = (w.clone(), b.clone());
            let mut xd = x.data.clone();
            let idx = sample(&mut rng, xd.len(), 40);
            check("conv dx", &mut xd, &gr.dx.data, &idx, &mut |v| {
                let xt = IcoTensor::from_vec(x.t, cin, oin, &g, v.to_vec()).unwrap();
                dot(&ico_conv(&xt, &w0, &b0, cout, &g, &gather).unwrap().data, &proj)
            });
            let idx = sample(&mut rng, w.len(), 40);
            check("conv dw", &mut w, &gr.dw, &idx, &mut |v| dot(&ico_conv(&x, v, &b0, cout, &g, &gather).unwrap().data, &proj));
            let idx: Vec<usize> = (0..cout).collect();
            check("conv db", &mut b, &gr.db, &idx, &mut |v| dot(&ico_conv(&x, &w0, v, cout, &g, &gather).unwrap().data, &proj));
        }
    }
}

#[test]
fn temporal_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = IcoGrid::new(1).unwrap();
    let (cin, cout) = (3, 2);
    let x = random_tensor(&mut rng, 7, cin, 6, &g);
    let mut w = random(&mut rng, cout * cin * TEMPORAL_KERNEL);
    let mut b = random(&mut rng, cout);
    let y = temporal_conv(&x, &w, &b, cout).unwrap();
    let proj = random(&mut rng, y.data.len());
    let dy = IcoTensor::from_vec(y.t, y.c, y.o, &g, proj.clone()).unwrap();
    let gr = temporal_conv_backward(&x, &w, cout, &dy);
    let (w0, b0) = (w.clone(), b.clone());
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 40);
    check("tconv dx", &mut xd, &gr.dx.data, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(x.t, cin, 6, &g, v.to_vec()).unwrap();
        dot(&temporal_conv(&xt, &w0, &b0, cout).unwrap().data, &proj)
    });
    let idx: Vec<usize> = (0..w.len()).collect();
    check("tconv dw", &mut w, &gr.dw, &idx, &mut |v| dot(&temporal_conv(&x, v, &b0, cout).unwrap().data, &proj));
    check("tconv db", &mut b, &gr.db, &[0, 1], &mut |v| dot(&temporal_conv(&x, &w0, v, cout).unwrap().data, &proj));
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = IcoGrid::new(2).unwrap();
    let c = 3;
    let x = random_tensor(&mut rng, 2, c, 6, &g);
    let mut s = random(&mut rng, c);
    let mut b = random(&mut rng, c);
    let (y, stats) = layer_norm(&x, &s, &b, &g).unwrap();
    let proj = random(&mut rng, y.data.len());
    let dy = IcoTensor::from_vec(y.t, y.c, y.o, &g, proj.clone()).unwrap();
    let gr = layer_norm_backward(&x, &s, &stats, &dy, &g);
    let (s0, b0) = (s.clone(), b.clone());
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 60);
    check("ln dx", &mut xd, &gr.dx.data, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(x.t, c, 6, &g, v.to_vec()).unwrap();
        dot(&layer_norm(&xt, &s0, &b0, &g).unwrap().0.data, &proj)
    });
    check("ln dscale", &mut s, &gr.dscale, &[0, 1, 2], &mut |v| dot(&layer_norm(&x, v, &b0, &g).unwrap().0.data, &proj));
    check("ln dbias", &mut b, &gr.dbias, &[0, 1, 2], &mut |v| dot(&layer_norm(&x, &s0, v, &g).unwrap().0.data, &proj));
}

#[test]
fn pool_and_orientation_max_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = GridPyramid::new(2).unwrap();
    let (fine, coarse) = (p.grid(2), p.grid(1));
    let x = random_tensor(&mut rng, 2, 2, 6, fine);
    let y = ico_pool(&x, fine, coarse).unwrap();
    let proj = random(&mut rng, y.data.len());
    let dy = IcoTensor::from_vec(y.t, y.c, y.o, coarse, proj.clone()).unwrap();
    let dx = ico_pool_backward(&x, &dy, fine, coarse);
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 60);
    check("pool dx", &mut xd, &dx.data, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(x.t, 2, 6, fine, v.to_vec()).unwrap();
        dot(&ico_pool(&xt, fine, coarse).unwrap().data, &proj)
    });

    let (y, arg) = orientation_maxpool(&x).unwrap();
    let proj = random(&mut rng, y.data.len());
    let dy = IcoTensor::from_vec(y.t, y.c, y.o, fine, proj.clone()).unwrap();
    let dx = orientation_maxpool_backward(&x, &arg, &dy);
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 60);
    check("orientation max dx", &mut xd, &dx.data, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(x.t, 2, 6, fine, v.to_vec()).unwrap();
        dot(&orientation_maxpool(&xt).unwrap().0.data, &proj)
    });
}

fn small_config() -> ModelConfig {
    ModelConfig { r: 2, channels: 4, n_final_units: 2 }
}

fn target(rng: &mut ChaCha8Rng, t: usize) -> Vec<[f64; 3]> {
    (0..t)
        .map(|_| {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect()
}

fn model_loss(ctx: &NetContext, p: &ModelParams<f64>, x: &IcoTensor<f64>, gt: &[[f64; 3]]) -> f64 {
    loss_mse(&forward_tensor(x.clone(), p, ctx).unwrap().v, gt).unwrap()
}

#[test]
fn tape_forward_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ctx = NetContext::new(2).unwrap();
    let p = ModelParams::<f64>::init(ModelConfig::new(2), 3).unwrap();
    let x = random_tensor(&mut rng, 3, 1, 1, ctx.grid(2));
    let direct = forward_tensor(x.clone(), &p, &ctx).unwrap();
    let (tape, out) = record(&ctx, &p, x).unwrap();
    assert_eq!(tape.vectors(out).unwrap(), direct.v);
    let probs: Vec<f64> = direct.probs.concat();
    assert_eq!(tape.probs(out).unwrap(), &probs[..]);
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_config();
    let ctx = NetContext::new(cfg.r).unwrap();
    let mut p = ModelParams::<f64>::init(cfg, 8).unwrap();
    // Larger weights than the default init so every unit gets a gradient
    // well above the relative-error floor.
    for t in &mut p.tensors {
        if t.name.ends_with("weight") {
            t.data.iter_mut().for_each(|v| *v *= 3.0);
        }
    }
    let x = random_tensor(&mut rng, 3, 1, 1, ctx.grid(cfg.r));
    let gt = target(&mut rng, 3);

    let (mut tape, out) = record(&ctx, &p, x.clone()).unwrap();
    let loss = tape.mse(out, &gt).unwrap();
    let value = tape.scalar(loss).unwrap();
    assert!((value - model_loss(&ctx, &p, &x, &gt)).abs() < 1e-14);
    let grads = tape.backward(loss).unwrap();
    let pg = grads.params(&p);

    let (mut checked, mut refined) = (0, 0);
    for i in 0..p.tensors.len() {
        let idx = sample(&mut rng, p.tensors[i].len(), 6);
        let mut data = p.tensors[i].data.clone();
        let name = p.tensors[i].name.clone();
        let mut q = p.clone();
        checked += idx.len();
        refined += check_piecewise(&name, &mut data, &pg[i], &idx, &mut |v| {
            q.tensors[i].data.copy_from_slice(v);
            model_loss(&ctx, &q, &x, &gt)
        });
    }
    let input_node = p.tensors.len();
    let dx = grads.node(input_node).unwrap().to_vec();
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 30);
    let grid = ctx.grid(cfg.r);
    checked += idx.len();
    refined += check_piecewise("input", &mut xd, &dx, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(3, 1, 1, grid, v.to_vec()).unwrap();
        model_loss(&ctx, &p, &xt, &gt)
    });
    assert!(refined * 4 <= checked, "{refined} of {checked} points straddle a switch");
}

#[test]
fn soft_argmax_and_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig { r: 1, channels: 3, n_final_units: 1 };
    let ctx = NetContext::new(1).unwrap();
    let p = ModelParams::<f64>::init(cfg, 1).unwrap();
    let x = random_tensor(&mut rng, 2, 1, 1, ctx.grid(1));
    let (mut tape, out) = record(&ctx, &p, x.clone()).unwrap();
    let s = tape.sum(out);
    let total: f64 = tape.vectors(out).unwrap().iter().flatten().sum();
    assert!((tape.scalar(s).unwrap() - total).abs() < 1e-14);
    let grads = tape.backward(s).unwrap();
    let dx = grads.node(p.tensors.len()).unwrap().to_vec();
    let mut xd = x.data.clone();
    let idx = sample(&mut rng, xd.len(), 30);
    check("sum input", &mut xd, &dx, &idx, &mut |v| {
        let xt = IcoTensor::from_vec(2, 1, 1, ctx.grid(1), v.to_vec()).unwrap();
        forward_tensor(xt, &p, &ctx).unwrap().v.iter().flatten().sum()
    });
}

#[test]
fn backward_needs_scalar() {
    let ctx = NetContext::new(1).unwrap();
    let p = ModelParams::<f64>::init(ModelConfig::new(1), 1).unwrap();
    let x = IcoTensor::zeros(1, 1, 1, ctx.grid(1));
    let (tape, out) = record(&ctx, &p, x).unwrap();
    assert!(tape.backward(out).is_err());
}

#[test]
fn batch_gradient_is_mean_of_items_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = small_config();
    let ctx = NetContext::new(cfg.r).unwrap();
    let p = ModelParams::<f64>::init(cfg, 2).unwrap();
    let items: Vec<_> = (0..3).map(|_| (random_tensor(&mut rng, 2, 1, 1, ctx.grid(cfg.r)), target(&mut rng, 2))).collect();
    let (l, g) = batch_loss_and_grads(&ctx, &p, items.clone()).unwrap();
    let (l2, g2) = batch_loss_and_grads(&ctx, &p, items.clone()).unwrap();
    assert_eq!(l.to_bits(), l2.to_bits());
    assert_eq!(g, g2);
    let mut mean_l = 0.0;
    let mut mean_g: Vec<Vec<f64>> = g.iter().map(|t| vec![0.0; t.len()]).collect();
    for (x, gt) in items {
        let (li, gi) = loss_and_grads(&ctx, &p, x, &gt).unwrap();
        mean_l += li / 3.0;
        for (a, b) in mean_g.iter_mut().zip(gi) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b / 3.0);
        }
    }
    assert!((mean_l - l).abs() < 1e-12);
    for (a, b) in mean_g.iter().flatten().zip(g.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(batch_loss_and_grads(&ctx, &p, Vec::new()).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let cfg = ModelConfig::new(1);
    let mut p = ModelParams::<f64>::init(cfg, 1).unwrap();
    let before = p.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    let grads: Vec<Vec<f64>> = p.tensors.iter().map(|t| (0..t.len()).map(|i| if i % 2 == 0 { 0.5 } else { -2.0 }).collect()).collect();
    adam.step(&mut p, &grads).unwrap();
    assert_eq!(adam.step, 1);
    for (a, b) in p.tensors.iter().zip(&before.tensors) {
        for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
            let want = if i % 2 == 0 { -1e-4 } else { 1e-4 };
            assert!(((x - y) - want).abs() < 1e-9, "{}", x - y);
        }
    }
}

#[test]
fn adam_rejects_non_finite_gradients_without_side_effects() {
    let mut p = ModelParams::<f64>::init(ModelConfig::new(1), 1).unwrap();
    let before = p.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    let mut grads: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.1; t.len()]).collect();
    grads[3][5] = f64::NAN;
    assert!(adam.step(&mut p, &grads).is_err());
    assert_eq!(adam.step, 0);
    assert_eq!(p, before);
    grads[3][5] = f64::INFINITY;
    assert!(adam.step(&mut p, &grads).is_err());
    assert!(adam.step(&mut p, &grads[1..]).is_err());
}

#[test]
fn adam_state_round_trips_through_checkpoint() {
    let mut p = ModelParams::<f32>::init(ModelConfig::new(1), 1).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let g: Vec<Vec<f32>> = p.tensors.iter().map(|t| (0..t.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        adam.step(&mut p, &g).unwrap();
    }
    adam.step = 70_001;
    let mut all = p.tensors.clone();
    all.extend(adam.to_tensors(&p));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    icodoa::doa_model::write_checkpoint(&path, &all).unwrap();
    let back = icodoa::doa_model::read_checkpoint(&path).unwrap();
    let q = ModelParams::<f32>::from_tensors(&back).unwrap();
    assert_eq!(p, q);
    let restored = AdamState::from_tensors(AdamConfig::default(), &q, &back).unwrap();
    assert_eq!(restored, adam);
    assert!(AdamState::from_tensors(AdamConfig::default(), &q, &p.tensors).is_err());
}

#[test]
fn curriculum_sampling() {
    let c = Curriculum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    assert_eq!(c.phase(3).sample(&mut rng), 30.0);
    assert_eq!(c.phase(3).label(), "fixed");
    assert_eq!(c.phase(30).label(), "random");
    for _ in 0..500 {
        let s = c.phase(40).sample(&mut rng);
        assert!((5.0..=30.0).contains(&s));
    }
}

use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

// ---- independent oracles -------------------------------------------------

/// Direct nested-loop 2D convolution per frame, `C×L×H×W` input.
fn conv_spatial_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [c, l, h, wd] = x.shape().try_into().unwrap();
    let [co, ci, d, _] = w.shape().try_into().unwrap();
    assert_eq!(c, ci);
    let ho = (h + 2 * pad - d) / stride + 1;
    let wo = (wd + 2 * pad - d) / stride + 1;
    let frame = |c: usize, l: usize| c * x.shape()[1] + l;
    let mut out = vec![0.0; co * l * ho * wo];
    for o in 0..co {
        for f in 0..l {
            for a in 0..ho {
                for b in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for p in 0..d {
                            for q in 0..d {
                                let hi = (a * stride + p) as isize - pad as isize;
                                let wi = (b * stride + q) as isize - pad as isize;
                                let v = if hi < 0 || wi < 0 || hi >= h as isize || wi >= wd as isize {
                                    0.0
                                } else {
                                    x.data()[(frame(i, f) * h + hi as usize) * wd + wi as usize]
                                };
                                acc += w.data()[((o * c + i) * d + p) * d + q] * v;
                            }
                        }
                    }
                    out[((o * l + f) * ho + a) * wo + b] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, l, ho, wo], out).unwrap()
}

/// Direct 1D convolution along L with zero padding.
fn conv_temporal_oracle(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let [c, l, h, wd] = x.shape().try_into().unwrap();
    let [co, _, t] = w.shape().try_into().unwrap();
    let lo = l + 2 * pad - t + 1;
    let mut out = vec![0.0; co * lo * h * wd];
    for o in 0..co {
        for f in 0..lo {
            for s in 0..h * wd {
                let mut acc = 0.0;
                for i in 0..c {
                    for tau in 0..t {
                        let src = (f + tau) as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            acc += w.data()[(o * c + i) * t + tau] * x.data()[(i * l + src as usize) * h * wd + s];
                        }
                    }
                }
                out[(o * lo + f) * h * wd + s] = acc;
            }
        }
    }
    Tensor::new(vec![co, lo, h, wd], out).unwrap()
}

fn max_pool_oracle(x: &[f64], h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut out = Vec::new();
    for a in 0..ho {
        for b in 0..wo {
            let mut m = f64::NEG_INFINITY;
            for p in 0..k {
                for q in 0..k {
                    m = m.max(x[(a * s + p) * w + b * s + q]);
                }
            }
            out.push(m);
        }
    }
    out
}

/// Central differences of `f` with respect to every entry of leaf `index`.
fn numeric_grad(inputs: &[Tensor<f64>], index: usize, eps: f64, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    let eval = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    (0..inputs[index].numel())
        .map(|i| {
            let mut plus = inputs.to_vec();
            plus[index].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[index].data_mut()[i] -= eps;
            (eval(&plus) - eval(&minus)) / (2.0 * eps)
        })
        .collect()
}

fn analytic_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let g = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| g.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

fn assert_grads_match(inputs: &[Tensor<f64>], tol: f64, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let analytic = analytic_grads(inputs, f);
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_grad(inputs, i, 1e-5, f);
        for (j, (&ai, &ni)) in a.iter().zip(&n).enumerate() {
            let e = relative_error(ai, ni);
            assert!(e <= tol, "input {i} coord {j}: analytic {ai} numeric {ni} rel {e}");
        }
    }
}

// ---- conv_spatial --------------------------------------------------------

#[test]
fn conv_spatial_all_ones_sums_window() {
    let mut tape = Tape::new();
    let x = tape.input(t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv_spatial(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 45.0);
}

#[test]
fn conv_spatial_unit_kernel_is_identity() {
    let xt = Tensor::<f64>::uniform(&[1, 2, 4, 5], -1.0, 1.0, &mut rng(1));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv_spatial(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xt);
}

#[test]
fn conv_spatial_matches_direct_oracle() {
    let xt = Tensor::<f64>::uniform(&[4, 2, 8, 8], -1.0, 1.0, &mut rng(2));
    let wt = Tensor::<f64>::uniform(&[6, 4, 3, 3], -1.0, 1.0, &mut rng(3));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(wt.clone());
    let y = tape.conv_spatial(x, w, None, 2, 1).unwrap();
    let expected = conv_spatial_oracle(&xt, &wt, 2, 1);
    assert_eq!(tape.shape(y), &[6, 2, 4, 4]);
    assert!(tape.value(y).max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn conv_spatial_batched_matches_per_example() {
    let a = Tensor::<f64>::uniform(&[3, 2, 5, 5], -1.0, 1.0, &mut rng(4));
    let b = Tensor::<f64>::uniform(&[3, 2, 5, 5], -1.0, 1.0, &mut rng(5));
    let wt = Tensor::<f64>::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng(6));
    let mut tape = Tape::new();
    let x = tape.input(Tensor::stack(&[&a, &b]).unwrap());
    let w = tape.input(wt.clone());
    let y = tape.conv_spatial(x, w, None, 1, 1).unwrap();
    assert!(tape.value(y).index0(1).max_abs_diff(&conv_spatial_oracle(&b, &wt, 1, 1)) <= 1e-12);
}

#[test]
fn conv_spatial_rejects_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(&[2, 1, 4, 4]));
    let even = tape.input(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(tape.conv_spatial(x, even, None, 1, 0), Err(Error::Shape { .. })));
    let wrong_c = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv_spatial(x, wrong_c, None, 1, 0), Err(Error::Shape { .. })));
}

#[test]
fn conv_spatial_commutes_with_frame_permutation() {
    let xt = Tensor::<f64>::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng(7));
    let wt = Tensor::<f64>::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng(8));
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor<f64>| {
        let s = t.shape().to_vec();
        let frame = s[2] * s[3];
        let mut out = t.data().to_vec();
        for c in 0..s[0] {
            for (dst, &src) in perm.iter().enumerate() {
                out[(c * s[1] + dst) * frame..][..frame].copy_from_slice(&t.data()[(c * s[1] + src) * frame..][..frame]);
            }
        }
        Tensor::new(s, out).unwrap()
    };
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.input(x);
        let w = tape.input(wt.clone());
        let y = tape.conv_spatial(x, w, None, 1, 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(permute(&xt)), permute(&run(xt)));
}

// ---- conv_temporal -------------------------------------------------------

#[test]
fn conv_temporal_hand_summation() {
    let mut tape = Tape::new();
    let x = tape.input(t64(&[1, 3, 1, 1], &[1., 2., 3.]));
    let w = tape.input(Tensor::full(&[1, 1, 3], 1.0));
    let y = tape.conv_temporal(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 6., 5.]);
}

#[test]
fn conv_temporal_unit_tap_scales() {
    let xt = Tensor::<f64>::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng(9));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(t64(&[1, 1, 1], &[0.75]));
    let y = tape.conv_temporal(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xt.map(|v| 0.75 * v));
}

#[test]
fn conv_temporal_matches_direct_oracle() {
    let xt = Tensor::<f64>::uniform(&[3, 8, 4, 4], -1.0, 1.0, &mut rng(10));
    let wt = Tensor::<f64>::uniform(&[5, 3, 3], -1.0, 1.0, &mut rng(11));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(wt.clone());
    let y = tape.conv_temporal(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[5, 8, 4, 4]);
    assert!(tape.value(y).max_abs_diff(&conv_temporal_oracle(&xt, &wt, 1)) <= 1e-12);
}

#[test]
fn conv_temporal_unit_kernel_is_channel_matmul() {
    let xt = Tensor::<f64>::uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut rng(12));
    let wt = Tensor::<f64>::uniform(&[4, 3, 1], -1.0, 1.0, &mut rng(13));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(wt.clone());
    let y = tape.conv_temporal(x, w, None, 1, 0).unwrap();
    let sites = 2 * 2 * 3;
    for s in 0..sites {
        for o in 0..4 {
            let expect: f64 = (0..3).map(|i| wt.data()[o * 3 + i] * xt.data()[i * sites + s]).sum();
            assert_abs_diff_eq!(tape.value(y).data()[o * sites + s], expect, epsilon = 1e-14);
        }
    }
}

#[test]
fn conv_temporal_rejects_even_or_oversized_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(&[1, 2, 1, 1]));
    let even = tape.input(Tensor::zeros(&[1, 1, 2]));
    assert!(tape.conv_temporal(x, even, None, 1, 0).is_err());
    let long = tape.input(Tensor::zeros(&[1, 1, 5]));
    assert!(tape.conv_temporal(x, long, None, 1, 1).is_err());
}

// ---- relu / pooling / linear / loss --------------------------------------

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.variable(t64(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    let w = tape.input(t64(&[1, 2], &[1.0, 1.0]));
    let b = tape.input(t64(&[1], &[0.0]));
    let s = tape.linear(y, w, b).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn global_pool_mean_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.global_pool(x, PoolAxes::SPATIOTEMPORAL).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
    let w = tape.input(t64(&[1, 1], &[3.0]));
    let b = tape.input(t64(&[1], &[0.0]));
    let s = tape.linear(y, w, b).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.75; 4]);

    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[2, 3, 2, 2], 1.5));
    let y = tape.global_pool(x, PoolAxes::SPATIAL).unwrap();
    assert_eq!(tape.shape(y), &[2, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
}

#[test]
fn max_pool_examples_and_tie_break() {
    let mut tape = Tape::new();
    let x = tape.variable(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.max_pool_spatial(x, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::new();
    let x = tape.variable(Tensor::full(&[1, 1, 4, 4], 2.0));
    let y = tape.max_pool_spatial(x, 2, 2, 0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    let p = tape.global_pool(y, PoolAxes::SPATIOTEMPORAL).unwrap();
    let w = tape.input(t64(&[1, 1], &[4.0]));
    let b = tape.input(t64(&[1], &[0.0]));
    let s = tape.linear(p, w, b).unwrap();
    let g = tape.backward(s).unwrap();
    // one unit of gradient lands on the top-left element of each window
    let expected = [1., 0., 1., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0., 0., 0., 0.];
    assert_eq!(g.get(x).unwrap(), &expected);
}

#[test]
fn max_pool_matches_window_scan_oracle() {
    let xt = Tensor::<f64>::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut rng(14));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let y = tape.max_pool_spatial(x, 3, 2, 0).unwrap();
    assert_eq!(tape.value(y).data(), max_pool_oracle(xt.data(), 6, 6, 3, 2).as_slice());
    assert!(tape.max_pool_spatial(x, 7, 1, 0).is_err());
}

#[test]
fn linear_examples_and_oracle() {
    let mut tape = Tape::new();
    let x = tape.input(t64(&[1], &[3.0]));
    let w = tape.input(t64(&[1, 1], &[2.0]));
    let b = tape.input(t64(&[1], &[1.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0]);

    let xt = Tensor::<f64>::uniform(&[10], -1.0, 1.0, &mut rng(15));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let eye: Vec<f64> = (0..100).map(|i| if i % 11 == 0 { 1.0 } else { 0.0 }).collect();
    let w = tape.input(t64(&[10, 10], &eye));
    let b = tape.input(Tensor::zeros(&[10]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y), &xt);

    let wt = Tensor::<f64>::uniform(&[4, 10], -1.0, 1.0, &mut rng(16));
    let bt = Tensor::<f64>::uniform(&[4], -1.0, 1.0, &mut rng(17));
    let mut tape = Tape::new();
    let x = tape.input(xt.clone());
    let w = tape.input(wt.clone());
    let b = tape.input(bt.clone());
    let y = tape.linear(x, w, b).unwrap();
    for k in 0..4 {
        let dot: f64 = (0..10).map(|f| wt.data()[k * 10 + f] * xt.data()[f]).sum::<f64>() + bt.data()[k];
        assert_abs_diff_eq!(tape.value(y).data()[k], dot, epsilon = 1e-12);
    }
    let bad = tape.input(Tensor::zeros(&[4, 9]));
    assert!(tape.linear(x, bad, b).is_err());
}

#[test]
fn softmax_xent_examples() {
    let xent = |logits: &[f64], label: usize| {
        let mut tape = Tape::new();
        let z = tape.input(t64(&[logits.len()], logits));
        let l = tape.softmax_xent(z, &[label]).unwrap();
        tape.value(l).item()
    };
    assert_abs_diff_eq!(xent(&[0.3; 4], 2), 4f64.ln(), epsilon = 1e-12);
    // ln(1 + e^-20) evaluated in closed form
    let closed = (-20f64).exp().ln_1p();
    assert_abs_diff_eq!(xent(&[10.0, -10.0], 0), closed, epsilon = 1e-20);
    assert!((closed - 2.061e-9).abs() < 1e-12);
    let base = [0.2, -1.3, 2.5, 0.7];
    let shifted: Vec<f64> = base.iter().map(|v| v + 17.25).collect();
    assert_abs_diff_eq!(xent(&base, 1), xent(&shifted, 1), epsilon = 1e-12);

    let mut tape = Tape::<f64>::new();
    let z = tape.input(Tensor::zeros(&[3]));
    assert!(matches!(tape.softmax_xent(z, &[3]), Err(Error::InvalidArgument(_))));
}

// ---- batch norm ----------------------------------------------------------

fn bn_train(xt: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = xt.shape()[1];
    let mut tape = Tape::new();
    let x = tape.input(xt);
    let g = tape.input(Tensor::full(&[c], gamma));
    let b = tape.input(Tensor::full(&[c], beta));
    let (y, stats) = tape.batch_norm(x, g, b, NormMode::Train, 1e-5).unwrap();
    assert!(stats.is_some());
    tape.value(y).clone()
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let y = bn_train(Tensor::full(&[2, 3, 2, 2, 2], 4.0), 1.0, 0.0);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_moments_of_output() {
    let xt = Tensor::<f64>::uniform(&[4, 3, 2, 3, 3], -2.0, 3.0, &mut rng(18));
    let (n, c, s) = (4, 3, 18);
    let y = bn_train(xt.clone(), 1.0, 0.0);
    let shifted = bn_train(xt.clone(), 1.0, 5.0);
    for ch in 0..c {
        let vals = |t: &Tensor<f64>, ch: usize| -> Vec<f64> {
            (0..n).flat_map(|i| t.data()[(i * c + ch) * s..][..s].to_vec()).collect()
        };
        let yv = vals(&y, ch);
        let xv = vals(&xt, ch);
        let m = yv.iter().sum::<f64>() / yv.len() as f64;
        let v = yv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / yv.len() as f64;
        let xm = xv.iter().sum::<f64>() / xv.len() as f64;
        let xvar = xv.iter().map(|a| (a - xm).powi(2)).sum::<f64>() / xv.len() as f64;
        assert!(m.abs() < 1e-10);
        assert!((v - xvar / (xvar + 1e-5)).abs() < 1e-6);
        let sm = vals(&shifted, ch).iter().sum::<f64>() / yv.len() as f64;
        assert!((sm - 5.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_eval_requires_matching_stats_and_positive_eps() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(&[1, 2, 1, 2, 2]));
    let g = tape.input(Tensor::full(&[2], 1.0));
    let b = tape.input(Tensor::zeros(&[2]));
    let mean = [0.0];
    let var = [1.0];
    assert!(tape.batch_norm(x, g, b, NormMode::Eval { mean: &mean, var: &var }, 1e-5).is_err());
    assert!(tape.batch_norm(x, g, b, NormMode::Train, 0.0).is_err());
}

// ---- gradients -----------------------------------------------------------

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut r = rng(19);
    let x = Tensor::<f64>::uniform(&[2, 3, 3, 5, 5], -1.0, 1.0, &mut r);
    let ws = Tensor::<f64>::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let bs = Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut r);
    assert_grads_match(&[x.clone(), ws, bs], 1e-6, &|t, v| {
        let y = t.conv_spatial(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        sum_probe_batched(t, y, 1)
    });

    let wt = Tensor::<f64>::uniform(&[4, 3, 3], -1.0, 1.0, &mut r);
    let bt = Tensor::<f64>::uniform(&[4], -1.0, 1.0, &mut r);
    assert_grads_match(&[x.clone(), wt.clone(), bt], 1e-6, &|t, v| {
        let y = t.conv_temporal(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        sum_probe_batched(t, y, 2)
    });
    assert_grads_match(&[x.clone(), wt], 1e-6, &|t, v| {
        let y = t.conv_temporal(v[0], v[1], None, 2, 1).unwrap();
        sum_probe_batched(t, y, 3)
    });

    let gamma = Tensor::<f64>::uniform(&[3], 0.5, 1.5, &mut r);
    let beta = Tensor::<f64>::uniform(&[3], -0.5, 0.5, &mut r);
    assert_grads_match(&[x.clone(), gamma, beta], 1e-6, &|t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Train, 1e-5).unwrap();
        sum_probe_batched(t, y, 4)
    });

    assert_grads_match(std::slice::from_ref(&x), 1e-6, &|t, v| {
        let y = t.max_pool_spatial(v[0], 3, 2, 1).unwrap();
        sum_probe_batched(t, y, 5)
    });
    assert_grads_match(std::slice::from_ref(&x), 1e-6, &|t, v| {
        let y = t.global_pool(v[0], PoolAxes::SPATIAL).unwrap();
        sum_probe_batched(t, y, 6)
    });
    assert_grads_match(std::slice::from_ref(&x), 1e-6, &|t, v| {
        let y = t.frame_subsample(v[0], 2).unwrap();
        sum_probe_batched(t, y, 7)
    });

    let feats = Tensor::<f64>::uniform(&[3, 10], -1.0, 1.0, &mut r);
    let wl = Tensor::<f64>::uniform(&[4, 10], -1.0, 1.0, &mut r);
    let bl = Tensor::<f64>::uniform(&[4], -1.0, 1.0, &mut r);
    assert_grads_match(&[feats, wl, bl], 1e-6, &|t, v| {
        let z = t.linear(v[0], v[1], v[2]).unwrap();
        t.softmax_xent(z, &[0, 3, 1]).unwrap()
    });
}

/// Projects a tensor onto a fixed random direction, yielding a scalar.
fn sum_probe_batched(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).numel();
    let flat = tape.reshape(y, &[n]).unwrap();
    let w = tape.input(Tensor::uniform(&[1, n], -1.0, 1.0, &mut rng(100 + seed)));
    let b = tape.input(Tensor::zeros(&[1]));
    tape.linear(flat, w, b).unwrap()
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_disconnected() {
    let mut tape = Tape::new();
    let x = tape.variable(t64(&[2], &[1.0, 2.0]));
    let unused = tape.variable(t64(&[2], &[3.0, 4.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    let w = tape.input(t64(&[1, 2], &[1.0, 1.0]));
    let b = tape.input(t64(&[1], &[0.0]));
    let y = tape.linear(x, w, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
}

fn two_layer_store(seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.register("conv.weight", Group::Shared, true, Tensor::uniform(&[4, 2, 3, 3], -0.5, 0.5, &mut r)).unwrap();
    store.register("temporal.weight", Group::VideoBranch, true, Tensor::uniform(&[3, 4, 3], -0.5, 0.5, &mut r)).unwrap();
    store.register("head.weight", Group::HeadVideo, true, Tensor::uniform(&[5, 3], -0.5, 0.5, &mut r)).unwrap();
    store.register("head.bias", Group::HeadVideo, true, Tensor::uniform(&[5], -0.5, 0.5, &mut r)).unwrap();
    store.register("orphan.weight", Group::ImageBranch, true, Tensor::uniform(&[3, 4, 1], -0.5, 0.5, &mut r)).unwrap();
    store
}

fn two_layer_loss(store: &ParamStore<f64>, tape: &mut Tape<f64>, input: &Tensor<f64>) -> crate::Result<Var> {
    let x = tape.input(input.clone());
    let p = |name: &str, tape: &mut Tape<f64>| store.leaf(tape, store.id(name).unwrap());
    let w1 = p("conv.weight", tape);
    let w2 = p("temporal.weight", tape);
    let hw = p("head.weight", tape);
    let hb = p("head.bias", tape);
    let h = tape.conv_spatial(x, w1, None, 1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv_temporal(h, w2, None, 1, 1)?;
    let h = tape.global_pool(h, PoolAxes::SPATIOTEMPORAL)?;
    let z = tape.linear(h, hw, hb)?;
    tape.softmax_xent(z, &[1, 4])
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let input = Tensor::<f64>::uniform(&[2, 2, 4, 5, 5], -1.0, 1.0, &mut rng(20));
    let mut store = two_layer_store(21);
    let opts = GradCheckOptions {
        max_coords_per_param: usize::MAX,
        eps: 1e-5,
        tol: 1e-6,
        ..Default::default()
    };
    let report = grad_check(&mut store, &opts, |s, t| two_layer_loss(s, t, &input)).unwrap();
    assert!(report.passed(), "{:?}", report.params);

    // the orphan is never recorded, so it accumulates nothing
    let mut tape = Tape::new();
    let loss = two_layer_loss(&store, &mut tape, &input).unwrap();
    let g = tape.backward(loss).unwrap();
    store.accumulate(&tape, &g);
    assert_eq!(store.grad_l1(Group::ImageBranch), 0.0);
    assert!(store.grad_l1(Group::Shared) > 0.0);
}

#[test]
fn repeated_backward_accumulates_and_is_deterministic() {
    let input = Tensor::<f64>::uniform(&[2, 2, 4, 5, 5], -1.0, 1.0, &mut rng(22));
    let mut store = two_layer_store(23);
    let run = |store: &mut ParamStore<f64>| {
        let mut tape = Tape::new();
        let loss = two_layer_loss(store, &mut tape, &input).unwrap();
        let g = tape.backward(loss).unwrap();
        store.accumulate(&tape, &g);
    };
    run(&mut store);
    let once = store.by_name("conv.weight").unwrap().grad.clone().unwrap();
    run(&mut store);
    let twice = store.by_name("conv.weight").unwrap().grad.clone().unwrap();
    assert_eq!(twice, once.map(|v| v + v));

    let mut other = two_layer_store(23);
    run(&mut other);
    assert_eq!(other.by_name("conv.weight").unwrap().grad.as_ref().unwrap(), &once);
    store.zero_grads();
    assert_eq!(store.grad_l1(Group::Shared), 0.0);
}

#[test]
fn grad_check_linear_is_exact_and_detects_faults() {
    let mut r = rng(24);
    let input = Tensor::<f64>::uniform(&[6], -1.0, 1.0, &mut r);
    let mut store = ParamStore::new();
    store.register("w", Group::HeadImage, true, Tensor::uniform(&[3, 6], -1.0, 1.0, &mut r)).unwrap();
    store.register("b", Group::HeadImage, true, Tensor::uniform(&[3], -1.0, 1.0, &mut r)).unwrap();
    let dir = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut r);
    let opts = GradCheckOptions {
        tol: 1e-9,
        ..Default::default()
    };
    let loss = |s: &ParamStore<f64>, t: &mut Tape<f64>| {
        let x = t.input(input.clone());
        let w = s.leaf(t, s.id("w").unwrap());
        let b = s.leaf(t, s.id("b").unwrap());
        let y = t.linear(x, w, b)?;
        let d = t.input(dir.clone());
        let z = t.input(Tensor::zeros(&[1]));
        t.linear(y, d, z)
    };
    let report = grad_check(&mut store, &opts, loss).unwrap();
    assert!(report.max_rel_error() <= 1e-9, "{}", report.max_rel_error());

    let conv_input = Tensor::<f64>::uniform(&[2, 2, 4, 5, 5], -1.0, 1.0, &mut r);
    let mut store = two_layer_store(25);
    let faulty = GradCheckOptions {
        fault: Some((OpKind::ConvSpatial, 2.0)),
        ..Default::default()
    };
    let report = grad_check(&mut store, &faulty, |s, t| two_layer_loss(s, t, &conv_input)).unwrap();
    assert!(report.max_rel_error() > 0.1);
    assert!(!report.passed());
}


#[test]
fn every_layer_kind_passes_the_suite() {
    let reports = check_layers(&GradCheckOptions::default()).unwrap();
    assert_eq!(reports.len(), LAYER_KINDS.len());
    for (kind, r) in reports {
        assert!(r.passed(), "{kind}: {}", r.max_rel_error());
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-1.0..1.0)))
}

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

// ---- direct-loop oracles -------------------------------------------------

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor<f64>, kind: PoolKind, win: usize) -> Vec<f64> {
    let s = x.shape();
    let (ho, wo) = (s[2] / win, s[3] / win);
    let mut out = Vec::new();
    for p in 0..s[0] * s[1] {
        for y in 0..ho {
            for xx in 0..wo {
                let vals: Vec<f64> = (0..win * win)
                    .map(|k| x.data()[p * s[2] * s[3] + (y * win + k / win) * s[3] + xx * win + k % win])
                    .collect();
                out.push(match kind {
                    PoolKind::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                    PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn to_f64(v: &Tensor<f32>) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

// ---- forward examples ----------------------------------------------------

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut g = Graph::<f32>::new();
    let x = random::<f32>(&[2, 3, 4, 4], 1);
    let w = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_hand_example() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let x = random::<f64>(&[2, 3, 8, 8], 2);
    let w = random::<f64>(&[4, 3, 3, 3], 3);
    let expected = conv_oracle(&x, &w, 1, 1);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.cast());
    let wv = g.constant(w.cast());
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    assert!(max_abs_diff(&to_f64(g.value(y)), &expected) < 1e-5);
}

#[test]
fn conv_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros([2, 2, 3, 3]));
    let err = g.conv2d(x, w, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    // (4 + 0 - 3) is not divisible by stride 2
    let w = g.constant(Tensor::zeros([2, 3, 3, 3]));
    assert!(g.conv2d(x, w, 2, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_oracle_on_random_shapes(
        n in 1usize..4, cin in 1usize..8, cout in 1usize..8,
        hw in 3usize..16, k in prop::sample::select(vec![1usize, 3]),
        pad in 0usize..2, seed in any::<u64>()
    ) {
        let x = random::<f64>(&[n, cin, hw, hw], seed);
        let w = random::<f64>(&[cout, cin, k, k], seed ^ 1);
        let expected = conv_oracle(&x, &w, 1, pad);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let wv = g.constant(w.cast());
        let y = g.conv2d(xv, wv, 1, pad).unwrap();
        prop_assert!(max_abs_diff(&to_f64(g.value(y)), &expected) < 1e-5);
    }

    #[test]
    fn forward_is_bit_identical_across_runs(seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(random(&[2, 3, 6, 6], seed));
            let w = g.constant(random(&[4, 3, 3, 3], seed ^ 7));
            let y = g.conv2d(x, w, 1, 1).unwrap();
            let y = g.relu(y).unwrap();
            let y = g.pool2d(y, PoolKind::Max, 2).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn conv_strided_matches_oracle() {
    let x = random::<f64>(&[1, 2, 9, 9], 4);
    let w = random::<f64>(&[3, 2, 3, 3], 5);
    let expected = conv_oracle(&x, &w, 2, 1);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, 2, 1).unwrap();
    assert!(max_abs_diff(g.value(y).data(), &expected) < 1e-12);
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[1, 2], &[1., 2.]));
    let w = g.constant(t(&[2, 1], &[1., 1.]));
    let b = g.constant(t(&[1], &[3.]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    let xi = random::<f32>(&[3, 3], 9);
    let x = g.constant(xi.clone());
    let eye = g.constant(Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let zero = g.constant(Tensor::zeros([3]));
    let y = g.linear(x, eye, zero).unwrap();
    assert_eq!(g.value(y), &xi);

    let bad = g.constant(Tensor::zeros([4, 1]));
    assert!(matches!(g.linear(x, bad, b), Err(Error::Shape { .. })));
}

#[test]
fn linear_matches_loop_oracle() {
    let x = random::<f64>(&[4, 10], 10);
    let w = random::<f64>(&[10, 3], 11);
    let b = random::<f64>(&[3], 12);
    let mut expected = vec![0.0; 12];
    for i in 0..4 {
        for k in 0..3 {
            expected[i * 3 + k] =
                b.data()[k] + (0..10).map(|d| x.data()[i * 10 + d] * w.data()[d * 3 + k]).sum::<f64>();
        }
    }
    let mut g = Graph::<f32>::new();
    let (xv, wv, bv) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
    let y = g.linear(xv, wv, bv).unwrap();
    assert!(max_abs_diff(&to_f64(g.value(y)), &expected) < 1e-5);
}

#[test]
fn relu_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[3], &[-1., 0., 2.]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 2.]);

    let pos = g.constant(t(&[2], &[0.5, 3.0]));
    let y2 = g.relu(pos).unwrap();
    assert_eq!(g.value(y2).data(), &[0.5, 3.0]);

    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[3], &[-1., 0., 2.]));
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    // subgradient at the kink is 0
    assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 1.]);
}

#[test]
fn pool_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 3., 5., 7.]));
    let a = g.pool2d(x, PoolKind::Avg, 2).unwrap();
    let m = g.pool2d(x, PoolKind::Max, 2).unwrap();
    assert_eq!(g.value(a).data(), &[4.0]);
    assert_eq!(g.value(m).data(), &[7.0]);
    let odd = g.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(g.pool2d(odd, PoolKind::Max, 2).is_err());
}

#[test]
fn pool_matches_loop_oracle() {
    let x = random::<f64>(&[1, 2, 4, 4], 13);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let expected = pool_oracle(&x, kind, 2);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let y = g.pool2d(xv, kind, 2).unwrap();
        assert!(max_abs_diff(&to_f64(g.value(y)), &expected) < 1e-6);
    }
}

#[test]
fn max_pool_tie_routes_to_lowest_index() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[1, 1, 2, 2], &[2., 2., 2., 1.]));
    let y = g.pool2d(x, PoolKind::Max, 2).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 0., 0.]);
}

#[test]
fn batch_norm_eval_identity() {
    let xi = random::<f32>(&[2, 3, 2, 2], 14);
    let mut g = Graph::<f32>::new();
    let x = g.constant(xi.clone());
    let gamma = g.constant(Tensor::ones([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let (y, stats) = g
        .batch_norm2d(x, gamma, beta, (&[0.0; 3], &[1.0; 3]), BatchNormMode::Eval, 1e-5)
        .unwrap();
    assert!(stats.is_none());
    for (a, b) in g.value(y).data().iter().zip(xi.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_constant_channel_yields_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([3, 1, 2, 2], 4.2));
    let gamma = g.constant(Tensor::full([1], 2.0));
    let beta = g.constant(Tensor::full([1], 0.25));
    let (y, _) = g
        .batch_norm2d(x, gamma, beta, (&[0.0], &[1.0]), BatchNormMode::Train, 1e-5)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let xi = random::<f64>(&[8, 3, 4, 4], 15);
    let mut g = Graph::<f32>::new();
    let x = g.constant(xi.cast());
    let gamma = g.constant(Tensor::ones([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let (y, stats) = g
        .batch_norm2d(x, gamma, beta, (&[0.0; 3], &[1.0; 3]), BatchNormMode::Train, 1e-8)
        .unwrap();
    let stats = stats.unwrap();
    let y = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| (0..16).map(move |j| (n * 3 + c) * 16 + j))
            .map(|i| y[i] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(
            mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4,
            "channel {c}: {mean} {var}"
        );

        let raw: Vec<f64> = (0..8)
            .flat_map(|n| (0..16).map(move |j| (n * 3 + c) * 16 + j))
            .map(|i| xi.data()[i])
            .collect();
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        assert!((stats.mean[c] as f64 - m).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(t(&[1, 2], &[0., 0.]));
    let l = g.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);

    let z = g.constant(t(&[1, 2], &[1000., 0.]));
    let l = g.softmax_cross_entropy(z, &[0]).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite() && v.abs() < 1e-6);

    assert!(matches!(
        g.softmax_cross_entropy(z, &[2]),
        Err(Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
}

#[test]
fn cross_entropy_matches_f64_reference() {
    let z = random::<f64>(&[3, 5], 16);
    let labels = [4, 0, 2];
    let expected = (0..3)
        .map(|i| {
            let row = &z.data()[i * 5..(i + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .sum::<f64>()
        / 3.0;
    let mut g = Graph::<f32>::new();
    let zv = g.constant(z.cast());
    let l = g.softmax_cross_entropy(zv, &labels).unwrap();
    assert!((g.value(l).item() as f64 - expected).abs() < 1e-6);
}

// ---- backward ------------------------------------------------------------

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[3], &[0.3, -2., 5.]));
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[2., 3.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[4., 6.]);
}

#[test]
fn backward_error_paths() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[2., 3.]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphCleared)));
    assert!(matches!(g.relu(x), Err(Error::GraphCleared)));
}

#[test]
fn unconnected_param_gets_zero_grad() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[2., 3.]));
    let y = g.param(t(&[2], &[1., 1.]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(y).unwrap().data(), &[0., 0.]);
}

#[test]
fn checked_graph_rejects_non_finite() {
    let mut g = Graph::<f32>::checked();
    let x = g.constant(t(&[2], &[f32::MAX, f32::MAX]));
    assert!(matches!(g.add(x, x), Err(Error::NonFinite(_))));
}

#[test]
fn finite_diff_check_examples() {
    let x = random::<f32>(&[5], 17);
    let r = finite_diff_check(|g, v| g.sum(v), &x, 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    let r = finite_diff_check(|g, v| g.sum(v), &x.cast::<f64>(), 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);

    let x = t(&[3], &[1., 2., 3.]);
    fn sq<T: Real>(g: &mut Graph<T>, v: Var) -> crate::Result<Var> {
        let p = g.mul(v, v)?;
        g.sum(p)
    }
    // rounding of the f32 loss limits what central differences can resolve
    let r = finite_diff_check(sq, &x, 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    let r = finite_diff_check(sq, &x.cast::<f64>(), 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);

    assert!(finite_diff_check(|g, v| g.relu(v), &x, 1e-3).is_err());
    assert!(finite_diff_check(|g, v| g.sum(v), &x, 0.0).is_err());
}

/// Gradient of `sum(op(x) * probe)` for a fixed random `probe`, so every
/// output element carries a distinct weight.
fn probe_loss<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(y).to_vec();
    let p = g.constant(random(&shape, seed));
    let m = g.mul(y, p)?;
    g.sum(m)
}

type OpCase<T> = (
    &'static str,
    Tensor<T>,
    Box<dyn Fn(&mut Graph<T>, Var) -> crate::Result<Var>>,
);

fn op_cases<T: Real>() -> Vec<OpCase<T>> {
    vec![
        (
            "conv2d/input",
            random(&[2, 3, 5, 5], 20),
            Box::new(|g, x| {
                let w = g.constant(random(&[4, 3, 3, 3], 21));
                let y = g.conv2d(x, w, 1, 1)?;
                probe_loss(g, y, 22)
            }),
        ),
        (
            "conv2d/weight",
            random(&[4, 3, 3, 3], 21),
            Box::new(|g, w| {
                let x = g.constant(random(&[2, 3, 5, 5], 20));
                let y = g.conv2d(x, w, 2, 1)?;
                probe_loss(g, y, 23)
            }),
        ),
        (
            "linear/input",
            random(&[3, 4], 24),
            Box::new(|g, x| {
                let w = g.constant(random(&[4, 2], 25));
                let b = g.constant(random(&[2], 26));
                let y = g.linear(x, w, b)?;
                probe_loss(g, y, 27)
            }),
        ),
        (
            "linear/weight",
            random(&[4, 2], 25),
            Box::new(|g, w| {
                let x = g.constant(random(&[3, 4], 24));
                let b = g.constant(random(&[2], 26));
                let y = g.linear(x, w, b)?;
                probe_loss(g, y, 28)
            }),
        ),
        (
            "linear/bias",
            random(&[2], 26),
            Box::new(|g, b| {
                let x = g.constant(random(&[3, 4], 24));
                let w = g.constant(random(&[4, 2], 25));
                let y = g.linear(x, w, b)?;
                probe_loss(g, y, 29)
            }),
        ),
        (
            "relu",
            // keep entries away from the kink
            Tensor::from_fn([12], |i| {
                T::of(if i % 2 == 0 {
                    0.3 + i as f64 * 0.1
                } else {
                    -0.2 - i as f64 * 0.1
                })
            }),
            Box::new(|g, x| {
                let y = g.relu(x)?;
                probe_loss(g, y, 30)
            }),
        ),
        (
            "max_pool",
            Tensor::from_fn([1, 2, 4, 4], |i| T::of(((i * 7919) % 32) as f64 * 0.1)),
            Box::new(|g, x| {
                let y = g.pool2d(x, PoolKind::Max, 2)?;
                probe_loss(g, y, 31)
            }),
        ),
        (
            "avg_pool",
            random(&[1, 2, 4, 4], 32),
            Box::new(|g, x| {
                let y = g.pool2d(x, PoolKind::Avg, 2)?;
                probe_loss(g, y, 33)
            }),
        ),
        (
            "batch_norm/train/input",
            random(&[3, 2, 3, 3], 34),
            Box::new(|g, x| {
                let gamma = g.constant(random(&[2], 35));
                let beta = g.constant(random(&[2], 36));
                let (y, _) = g.batch_norm2d(
                    x,
                    gamma,
                    beta,
                    (&[T::zero(); 2], &[T::one(); 2]),
                    BatchNormMode::Train,
                    T::of(1e-5),
                )?;
                probe_loss(g, y, 37)
            }),
        ),
        (
            "batch_norm/train/gamma",
            random(&[2], 35),
            Box::new(|g, gamma| {
                let x = g.constant(random(&[3, 2, 3, 3], 34));
                let beta = g.constant(random(&[2], 36));
                let (y, _) = g.batch_norm2d(
                    x,
                    gamma,
                    beta,
                    (&[T::zero(); 2], &[T::one(); 2]),
                    BatchNormMode::Train,
                    T::of(1e-5),
                )?;
                probe_loss(g, y, 38)
            }),
        ),
        (
            "batch_norm/eval/input",
            random(&[3, 2, 3, 3], 39),
            Box::new(|g, x| {
                let gamma = g.constant(random(&[2], 35));
                let beta = g.constant(random(&[2], 36));
                let rm = [T::of(0.1), T::of(-0.2)];
                let rv = [T::of(0.5), T::of(1.5)];
                let (y, _) = g.batch_norm2d(x, gamma, beta, (&rm, &rv), BatchNormMode::Eval, T::of(1e-5))?;
                probe_loss(g, y, 40)
            }),
        ),
        (
            "channel_scale/input",
            random(&[2, 3, 2, 2], 41),
            Box::new(|g, x| {
                let s = g.constant(random(&[3], 42));
                let y = g.channel_scale(x, s)?;
                probe_loss(g, y, 43)
            }),
        ),
        (
            "channel_scale/scale",
            random(&[3], 42),
            Box::new(|g, s| {
                let x = g.constant(random(&[2, 3, 2, 2], 41));
                let y = g.channel_scale(x, s)?;
                probe_loss(g, y, 44)
            }),
        ),
        (
            "softmax_cross_entropy",
            random(&[3, 5], 45),
            Box::new(|g, z| g.softmax_cross_entropy(z, &[1, 4, 0])),
        ),
        (
            "add/sub/mul/scale/reshape",
            random(&[2, 3], 46),
            Box::new(|g, x| {
                let c = g.constant(random(&[2, 3], 47));
                let a = g.add(x, c)?;
                let b = g.sub(a, x)?;
                let m = g.mul(a, x)?;
                let s = g.scale(m, T::of(0.7))?;
                let r = g.add(s, b)?;
                let f = g.reshape(r, &[3, 2])?;
                probe_loss(g, f, 48)
            }),
        ),
    ]
}

#[test]
fn every_op_matches_finite_differences_f64() {
    for (name, x, f) in op_cases::<f64>() {
        let r = finite_diff_check(&*f, &x, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{name}: {}", r.max_rel_error);
    }
}

#[test]
fn every_op_matches_finite_differences_f32() {
    for (name, x, f) in op_cases::<f32>() {
        // ops that are piecewise linear in the probed input tolerate a wide
        // step, which keeps f32 rounding of the loss out of the estimate
        let smooth = name.starts_with("batch_norm/train") || name.starts_with("softmax") || name.starts_with("add/");
        let step = if smooth { 1e-2 } else { 1e-1 };
        let r = finite_diff_check(&*f, &x, step).unwrap();
        assert!(r.max_rel_error < 1e-2, "{name}: {}", r.max_rel_error);
    }
}

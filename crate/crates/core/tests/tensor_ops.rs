mod common;

use common::*;
use crackseg::gradsuite;
use crackseg::tensor::{grad_check, grad_check_with_fault, Element, Graph, Objective, OpKind, Padding, Tensor, Var};
use crackseg::{Error, Result};
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv2d_matches_loop_oracle_on_100_instances() {
    let mut r = rng(100);
    for case in 0..100 {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let h = r.random_range(k..k + 6);
        let w = r.random_range(k..k + 6);
        let stride = r.random_range(1..3);
        let same = stride == 1 && r.random_bool(0.5);
        let pad = if same { (k - 1) / 2 } else { r.random_range(0..k) };
        let x = random_vec(&mut r, n * cin * h * w, -1.0, 1.0);
        let wt = random_vec(&mut r, cout * cin * k * k, -1.0, 1.0);
        let b = random_vec(&mut r, cout, -1.0, 1.0);

        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&t([n, cin, h, w], x.clone()));
        let wv = g.leaf(&t([cout, cin, k, k], wt.clone()));
        let bv = g.leaf(&Tensor::new([cout], b.clone()).unwrap());
        let padding = if same { Padding::Same } else { Padding::Explicit(pad) };
        let y = g.conv2d(xv, wv, bv, stride, padding).unwrap();

        let (want, shape) = conv2d_oracle(&x, [n, cin, h, w], &wt, [cout, cin, k, k], &b, stride, pad);
        assert_eq!(g.shape(y), shape, "case {case}");
        let err = max_abs_diff(g.value(y), &want);
        assert!(err < 1e-5, "case {case}: max abs error {err}");
    }
}

#[test]
fn conv2d_random_4x4_with_3x3_kernel() {
    let mut r = rng(7);
    let x = random_vec(&mut r, 16, -1.0, 1.0);
    let w = random_vec(&mut r, 9, -1.0, 1.0);
    let mut g = Graph::<f32>::new();
    let xv = g.leaf(&t([1, 1, 4, 4], x.clone()));
    let wv = g.leaf(&t([1, 1, 3, 3], w.clone()));
    let bv = g.leaf(&Tensor::new([1], vec![0.0]).unwrap());
    let y = g.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
    let (want, _) = conv2d_oracle(&x, [1, 1, 4, 4], &w, [1, 1, 3, 3], &[0.0], 1, 1);
    assert!(max_abs_diff(g.value(y), &want) < 1e-5);
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&Tensor::zeros([1, 2, 4, 4]).unwrap());
    let w = g.leaf(&Tensor::zeros([1, 3, 3, 3]).unwrap());
    let b = g.leaf(&Tensor::zeros([1]).unwrap());
    let err = g.conv2d(x, w, b, 1, Padding::Same).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let w = g.leaf(&Tensor::zeros([1, 2, 2, 2]).unwrap());
    assert!(g.conv2d(x, w, b, 1, Padding::Same).is_err(), "even kernel with same padding");
    let w = g.leaf(&Tensor::zeros([1, 2, 3, 3]).unwrap());
    assert!(g.conv2d(x, w, b, 0, Padding::Same).is_err(), "zero stride");
    assert!(Tensor::<f32>::zeros([1, 0, 4, 4]).is_err(), "zero-sized dimension");
}

#[test]
fn conv_transpose_matches_stamp_oracle_on_100_instances() {
    let mut r = rng(200);
    for case in 0..100 {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let s = r.random_range(1..4);
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let x = random_vec(&mut r, n * cin * h * w, -1.0, 1.0);
        let wt = random_vec(&mut r, cin * cout * s * s, -1.0, 1.0);
        let b = random_vec(&mut r, cout, -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&t([n, cin, h, w], x.clone()));
        let wv = g.leaf(&t([cin, cout, s, s], wt.clone()));
        let bv = g.leaf(&Tensor::new([cout], b.clone()).unwrap());
        let y = g.conv2d_transpose(xv, wv, bv, s).unwrap();
        assert_eq!(g.shape(y), [n, cout, s * h, s * w], "case {case}");
        let err = max_abs_diff(g.value(y), &conv_transpose_oracle(&x, [n, cin, h, w], &wt, cout, &b, s));
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

/// The transposed convolution of `x` equals the input-gradient of a strided
/// convolution with the same kernel, taken with upstream gradient `x`.
#[test]
fn conv_transpose_is_the_conv_input_gradient() {
    let mut r = rng(300);
    for case in 0..100 {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let s = r.random_range(1..4);
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let x = random_vec(&mut r, n * cin * h * w, -1.0, 1.0);
        let wt = random_vec(&mut r, cin * cout * s * s, -1.0, 1.0);

        // conv2d: [N, Cout, sH, sW] -> [N, Cin, H, W] with weight [Cin, Cout, s, s]
        let mut g = Graph::<f32>::new();
        let z = g.leaf(&Tensor::zeros([n, cout, s * h, s * w]).unwrap().with_grad());
        let wv = g.leaf(&t([cin, cout, s, s], wt.clone()));
        let bv = g.leaf(&Tensor::zeros([cin]).unwrap());
        let y = g.conv2d(z, wv, bv, s, Padding::Explicit(0)).unwrap();
        let loss = g.weighted_sum(y, x.clone()).unwrap();
        g.backward(loss).unwrap();
        let vjp = g.grad(z).unwrap().to_vec();

        let mut g2 = Graph::<f32>::new();
        let xv = g2.leaf(&t([n, cin, h, w], x));
        let wv = g2.leaf(&t([cin, cout, s, s], wt));
        let bv = g2.leaf(&Tensor::zeros([cout]).unwrap());
        let up = g2.conv2d_transpose(xv, wv, bv, s).unwrap();
        let err = max_abs_diff(g2.value(up), &vjp);
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

#[test]
fn conv_transpose_rejects_kernel_other_than_stride() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&Tensor::zeros([1, 1, 2, 2]).unwrap());
    let w = g.leaf(&Tensor::zeros([1, 1, 3, 3]).unwrap());
    let b = g.leaf(&Tensor::zeros([1]).unwrap());
    let err = g.conv2d_transpose(x, w, b, 2).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)), "{err}");
}

#[test]
fn maxpool_matches_scan_oracle_on_100_instances() {
    let mut r = rng(400);
    for case in 0..100 {
        let (n, c) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (2 * r.random_range(1..4), 2 * r.random_range(1..4));
        // coarse quantization makes ties common
        let x: Vec<f32> = (0..n * c * h * w).map(|_| r.random_range(0..4) as f32).collect();
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&t([n, c, h, w], x.clone()));
        let (y, idx) = g.maxpool2d(xv).unwrap();
        let (want, want_idx) = maxpool_oracle(&x, n * c, h, w);
        assert_eq!(g.value(y), &want[..], "case {case}");
        assert_eq!(idx.positions(), &want_idx[..], "case {case}");
    }
}

#[test]
fn maxpool_rejects_odd_dims() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&Tensor::zeros([1, 1, 3, 4]).unwrap());
    assert!(g.maxpool2d(x).is_err());
}

#[test]
fn unpool_matches_scatter_oracle_on_100_instances() {
    let mut r = rng(500);
    for case in 0..100 {
        let (n, c) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (2 * r.random_range(1..4), 2 * r.random_range(1..4));
        let x = random_vec(&mut r, n * c * h * w, -1.0, 1.0);
        let v = random_vec(&mut r, n * c * h * w / 4, -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&t([n, c, h, w], x));
        let (_, idx) = g.maxpool2d(xv).unwrap();
        let vv = g.leaf(&t([n, c, h / 2, w / 2], v.clone()));
        let u = g.max_unpool2d(vv, &idx, (h, w)).unwrap();
        assert_eq!(g.value(u), &unpool_oracle(&v, idx.positions(), n * c, h, w)[..], "case {case}");
    }
}

#[test]
fn unpool_rejects_bad_geometry() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&Tensor::zeros([1, 1, 4, 4]).unwrap());
    let (y, idx) = g.maxpool2d(x).unwrap();
    assert!(g.max_unpool2d(y, &idx, (6, 6)).is_err());
    let other = g.leaf(&Tensor::zeros([1, 2, 2, 2]).unwrap());
    assert!(g.max_unpool2d(other, &idx, (4, 4)).is_err());
    let bad = crackseg::tensor::PoolIndices::new([1, 1, 1, 1], (2, 2), vec![9]);
    assert!(bad.is_err(), "position outside the source plane");
}

#[test]
fn bce_matches_loop_oracle_on_100_instances() {
    let mut r = rng(600);
    for case in 0..100 {
        let len = r.random_range(1..50);
        let mut p = random_vec(&mut r, len, 0.0, 1.0);
        if case % 10 == 0 {
            p[0] = 0.0;
            p[len - 1] = 1.0;
        }
        let tg = random_vec(&mut r, len, 0.0, 1.0);
        let mut g = Graph::<f32>::new();
        let pv = g.leaf(&Tensor::new([len], p.clone()).unwrap());
        let tv = g.leaf(&Tensor::new([len], tg.clone()).unwrap());
        let l = g.bce_loss(pv, tv).unwrap();
        let err = (g.value(l)[0] as f64 - bce_oracle(&p, &tg)).abs();
        assert!(err < 1e-6, "case {case}: {err}");
    }
}

#[test]
fn add_and_concat_match_index_oracles() {
    let mut r = rng(700);
    for case in 0..100 {
        let (n, ca, cb) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let a = random_vec(&mut r, n * ca * h * w, -1.0, 1.0);
        let b = random_vec(&mut r, n * cb * h * w, -1.0, 1.0);
        let b2 = random_vec(&mut r, n * ca * h * w, -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let av = g.leaf(&t([n, ca, h, w], a.clone()));
        let bv = g.leaf(&t([n, cb, h, w], b.clone()));
        let b2v = g.leaf(&t([n, ca, h, w], b2.clone()));
        let cat = g.concat_channels(av, bv).unwrap();
        let sum = g.add(av, b2v).unwrap();
        let plane = h * w;
        for bi in 0..n {
            for c in 0..ca + cb {
                for p in 0..plane {
                    let got = g.value(cat)[(bi * (ca + cb) + c) * plane + p];
                    let want = if c < ca {
                        a[(bi * ca + c) * plane + p]
                    } else {
                        b[(bi * cb + c - ca) * plane + p]
                    };
                    assert_eq!(got, want, "case {case}");
                }
            }
        }
        for i in 0..a.len() {
            assert_eq!(g.value(sum)[i], a[i] + b2[i]);
        }
    }
}

#[test]
fn concat_and_add_reject_mismatches() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(&Tensor::zeros([1, 2, 4, 4]).unwrap());
    let b = g.leaf(&Tensor::zeros([1, 3, 4, 2]).unwrap());
    assert!(g.concat_channels(a, b).is_err());
    assert!(g.add(a, b).is_err());
}

/// conv2d -> relu -> sigmoid -> bce on a 1x1x8x8 input, as one objective.
struct ConvReluBce {
    target: Vec<f32>,
}

impl Objective for ConvReluBce {
    fn eval<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = g.conv2d(p[0], p[1], p[2], 1, Padding::Same)?;
        let y = g.relu(y);
        let y = g.sigmoid(y);
        let data = self.target.iter().map(|&v| T::from_single(v)).collect();
        let tv = g.constant([1, 1, 8, 8], data)?;
        g.bce_loss(y, tv)
    }
}

#[test]
fn grad_check_on_conv_relu_bce_stack() {
    let mut r = rng(800);
    let obj = ConvReluBce {
        target: random_vec(&mut r, 64, 0.0, 1.0),
    };
    let params = [
        t([1, 1, 8, 8], random_vec(&mut r, 64, -1.0, 1.0)),
        t([1, 1, 3, 3], random_vec(&mut r, 9, -1.0, 1.0)),
        Tensor::new([1], vec![0.1]).unwrap(),
    ];
    let rep = grad_check(&obj, &params, gradsuite::EPS).unwrap();
    assert!(rep.max_rel_error < 1e-2, "{rep:?}");
    let bad = grad_check_with_fault(&obj, &params, gradsuite::EPS, OpKind::Conv2d).unwrap();
    assert!(bad.max_rel_error > 0.1, "{bad:?}");
}

#[test]
fn every_op_passes_grad_check_over_10_seeds() {
    for seed in 0..10 {
        for c in gradsuite::run_suite(seed, None).unwrap() {
            assert!(c.passed(), "seed {seed}: {} {:?}", c.name, c.report);
        }
    }
}

#[test]
fn every_injected_fault_is_caught() {
    let faults = [
        (OpKind::Conv2d, "conv2d"),
        (OpKind::ConvTranspose2d, "conv2d_transpose"),
        (OpKind::MaxPool2d, "maxpool2d"),
        (OpKind::MaxUnpool2d, "max_unpool2d"),
        (OpKind::Relu, "relu"),
        (OpKind::Sigmoid, "sigmoid"),
        (OpKind::Concat, "concat"),
        (OpKind::Add, "add"),
        (OpKind::BceLoss, "bce_loss"),
    ];
    for (kind, check) in faults {
        let out = gradsuite::run_suite(0, Some(kind)).unwrap();
        let hit = out.iter().find(|c| c.name == check).unwrap();
        assert!(hit.report.max_rel_error > 0.1, "{check}: {:?}", hit.report);
    }
    let block = gradsuite::run_suite(0, Some(OpKind::Relu)).unwrap();
    assert!(!block.iter().find(|c| c.name == "residual_block").unwrap().passed());
}

#[test]
fn sigmoid_derivative_matches_closed_form() {
    let mut r = rng(900);
    for _ in 0..50 {
        let x: f64 = r.random_range(-6.0..6.0);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(&Tensor::new([1], vec![x]).unwrap().with_grad());
        let y = g.sigmoid(xv);
        let s = g.value(y)[0];
        let l = g.sum(y);
        g.backward(l).unwrap();
        let analytic = g.grad(xv).unwrap()[0];
        let closed = s * (1.0 - s);
        assert!(((analytic - closed) / closed).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn sigmoid_is_symmetric_and_bounded(x in -88.0f32..88.0) {
        let mut g = Graph::<f32>::new();
        let v = g.leaf(&Tensor::new([2], vec![x, -x]).unwrap());
        let y = g.sigmoid(v);
        let (a, b) = (g.value(y)[0], g.value(y)[1]);
        prop_assert!(a.is_finite() && (0.0..=1.0).contains(&a));
        prop_assert!((a - (1.0 - b)).abs() < 1e-6);
    }

    #[test]
    fn relu_matches_definition(xs in prop::collection::vec(-5.0f32..5.0, 1..32)) {
        let mut g = Graph::<f32>::new();
        let v = g.leaf(&Tensor::new([xs.len()], xs.clone()).unwrap());
        let y = g.relu(v);
        for (o, i) in g.value(y).iter().zip(&xs) {
            prop_assert_eq!(*o, i.max(0.0));
        }
    }

    #[test]
    fn bce_is_non_negative(
        pt in prop::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 1..64)
    ) {
        let (p, tg): (Vec<f32>, Vec<f32>) = pt.into_iter().unzip();
        let mut g = Graph::<f32>::new();
        let pv = g.leaf(&Tensor::new([p.len()], p).unwrap());
        let tv = g.leaf(&Tensor::new([tg.len()], tg).unwrap());
        let l = g.bce_loss(pv, tv).unwrap();
        prop_assert!(g.value(l)[0] >= 0.0);
    }

    #[test]
    fn pool_of_unpool_of_pool_is_pool(
        seed in any::<u64>(), hh in 1usize..5, ww in 1usize..5, c in 1usize..3
    ) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut r = rng(seed);
        // non-negative, as after a ReLU; a negative maximum loses to the
        // zeros unpooling writes around it
        let x = random_vec(&mut r, c * h * w, 0.0, 1.0);
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&t([1, c, h, w], x.clone()));
        let (p, idx) = g.maxpool2d(xv).unwrap();
        let u = g.max_unpool2d(p, &idx, (h, w)).unwrap();
        let (p2, _) = g.maxpool2d(u).unwrap();
        prop_assert_eq!(g.value(p), g.value(p2));
        // maxima back at their original positions, zeros elsewhere
        let pooled = g.value(p).to_vec();
        for (i, v) in g.value(u).iter().enumerate() {
            prop_assert!(*v == 0.0 || (*v == x[i] && pooled.contains(v)));
        }
    }

    #[test]
    fn conv_forward_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = t([1, 2, 6, 6], random_vec(&mut r, 72, -1.0, 1.0));
        let w = t([3, 2, 3, 3], random_vec(&mut r, 54, -1.0, 1.0));
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(&x);
            let wv = g.leaf(&w);
            let bv = g.leaf(&Tensor::zeros([3]).unwrap());
            let y = g.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
            g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

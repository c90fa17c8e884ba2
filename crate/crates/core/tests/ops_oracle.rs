mod common;

use common::*;
use dsppnet::ops::resize_bilinear;
use dsppnet::{Conv2dSpec, Graph, Tensor};
use rand::Rng;

fn library_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Tensor {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.constant(x.clone()).unwrap(),
        g.constant(w.clone()).unwrap(),
        g.constant(b.clone()).unwrap(),
    );
    let y = g.conv2d(x, w, b, spec).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(11);
    for _ in 0..200 {
        let (x, w, b, spec) = random_conv_case(&mut r);
        let got = library_conv(&x, &w, &b, spec);
        let want = conv2d(&Nd::from(&x), &w, &b, &spec);
        assert_eq!(got.shape(), &[want.n, want.c, want.h, want.w], "{spec:?}");
        assert!(max_abs_diff(got.data(), want.data()) <= 1e-12, "{spec:?}");
    }
}

#[test]
fn conv_output_size_matches_formula() {
    let mut r = rng(12);
    for _ in 0..100 {
        let (x, _, _, spec) = random_conv_case(&mut r);
        let [_, _, h, w] = x.dims4().unwrap();
        let axis = |len: usize, k: usize| (len + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
        assert_eq!(
            spec.output_size(h, w).unwrap(),
            (axis(h, spec.kernel.0), axis(w, spec.kernel.1))
        );
    }
}

#[test]
fn bilinear_matches_scalar_reference() {
    let mut r = rng(13);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let (oh, ow) = (r.gen_range(1..13), r.gen_range(1..13));
        let x = random_tensor(&mut r, &[2, 2, h, w], 1.0);
        let got = resize_bilinear(&x, (oh, ow)).unwrap();
        let want = bilinear(&Nd::from(&x), oh, ow);
        assert!(max_abs_diff(got.data(), want.data()) <= 1e-12);
    }
}

#[test]
fn bilinear_non_integer_ratio() {
    let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = resize_bilinear(&x, (3, 5)).unwrap();
    let want = [
        0.0, 0.1, 0.5, 0.9, 1.0, 1.0, 1.1, 1.5, 1.9, 2.0, 2.0, 2.1, 2.5, 2.9, 3.0,
    ];
    assert!(max_abs_diff(y.data(), &want) < 1e-12);
}

#[test]
fn dense_and_loss_match_reference() {
    let mut r = rng(14);
    for _ in 0..50 {
        let (n, d, k) = (r.gen_range(1..5), r.gen_range(1..7), r.gen_range(2..5));
        let x = random_tensor(&mut r, &[n, d], 2.0);
        let w = random_tensor(&mut r, &[k, d], 1.0);
        let b = random_tensor(&mut r, &[k], 1.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(w.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let y = g.dense(xv, wv, bv).unwrap();
        let loss = g.softmax_cross_entropy(y, &labels).unwrap();
        let rows: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
        let want = dense(&rows, &w, &b);
        assert!(max_abs_diff(g.value(y).data(), &want.concat()) <= 1e-12);
        assert!((g.value(loss).data()[0] - cross_entropy(&want, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn gap_and_concat_match_reference() {
    let mut r = rng(15);
    let a = random_tensor(&mut r, &[2, 2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[2, 3, 3, 4], 1.0);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let c = g.concat_channels(&[av, bv]).unwrap();
    let p = g.global_avg_pool(c).unwrap();
    let want_c = concat(&[Nd::from(&a), Nd::from(&b)]);
    assert_eq!(g.value(c).data(), want_c.data());
    assert!(max_abs_diff(g.value(p).data(), &gap(&want_c).concat()) <= 1e-12);
}

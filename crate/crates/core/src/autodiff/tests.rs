use super::*;
use crate::param::ParamStore;

fn seq(v: &[f64]) -> Tensor<f64> {
    Tensor::sequence(v)
}

fn conv1(x: &[f64], w: &[f64], dilation: usize, pad: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(seq(x)).unwrap();
    let wv = g.constant(Tensor::from_vec(Shape::new(1, 1, w.len(), 1, 1), w.to_vec()).unwrap()).unwrap();
    let geom = ConvGeom {
        kernel: w.len(),
        dilation,
        groups: 1,
        pad_left: pad,
        pad_right: pad,
    };
    let y = g.temporal_conv(xv, wv, geom).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn temporal_conv_examples() {
    assert_eq!(conv1(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 1, 1), vec![3.0, 6.0, 5.0]);
    assert_eq!(conv1(&[4.0, -1.0, 7.0, 2.0], &[0.0, 1.0, 0.0], 1, 1), vec![4.0, -1.0, 7.0, 2.0]);
    assert_eq!(
        conv1(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 1.0, 1.0], 2, 2),
        vec![4.0, 6.0, 9.0, 6.0, 8.0]
    );
}

#[test]
fn conv_rejects_bad_groups_and_length() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 5, 1, 1))).unwrap();
    let w = g.constant(Tensor::zeros(Shape::new(3, 1, 3, 1, 1))).unwrap();
    let geom = ConvGeom::same(3, 1, 2);
    assert!(matches!(g.temporal_conv(x, w, geom), Err(Error::Config(_))));
    let short = ConvGeom {
        pad_right: 0,
        ..ConvGeom::same(3, 1, 3)
    };
    assert!(matches!(g.temporal_conv(x, w, short), Err(Error::Config(_))));
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g
        .constant(Tensor::from_vec(Shape::new(1, 2, 2, 1, 1), vec![1.0, 2.0, 10.0, 20.0]).unwrap())
        .unwrap();
    let eye = g.constant(Tensor::from_vec(Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let y = g.pointwise_conv(x, eye).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let sum = g.constant(Tensor::from_vec(Shape::matrix(1, 2), vec![1.0, 1.0]).unwrap()).unwrap();
    let y = g.pointwise_conv(x, sum).unwrap();
    assert_eq!(g.value(y).data(), &[11.0, 22.0]);
    let bad = g.constant(Tensor::zeros(Shape::matrix(1, 3))).unwrap();
    assert!(g.pointwise_conv(x, bad).is_err());
}

#[test]
fn pointwise_zero_weight_gradient_is_outer_product() {
    let mut g = Graph::<f64>::new();
    let xt = Tensor::from_vec(Shape::new(1, 2, 3, 1, 1), vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
    let x = g.constant(xt.clone()).unwrap();
    let w = g.input(Tensor::zeros(Shape::matrix(2, 2))).unwrap();
    let y = g.pointwise_conv(x, w).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let r = Tensor::from_vec(Shape::new(1, 2, 3, 1, 1), vec![0.5, -1.0, 2.0, 1.0, 1.0, -3.0]).unwrap();
    let root = g.dot(y, &r).unwrap();
    let grads = g.backward(root).unwrap();
    let dw = grads.wrt(w).unwrap();
    for o in 0..2 {
        for i in 0..2 {
            let want: f64 = (0..3).map(|t| r.at(0, o, t, 0, 0) * xt.at(0, i, t, 0, 0)).sum();
            assert_eq!(dw.data()[o * 2 + i], want);
        }
    }
}

#[test]
fn relu_and_its_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(seq(&[-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let mut g = Graph::<f64>::new();
    let x = g.input(seq(&[-1.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::<f64>::new();
    let mut stats = RunningStats::new(1);
    let x = g.constant(seq(&[5.0, 5.0, 5.0])).unwrap();
    let y = g.batch_norm(x, None, &mut stats, true).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(seq(&[1.0, 3.0])).unwrap();
    let mut stats = RunningStats::new(1);
    let y = g.batch_norm(x, None, &mut stats, true).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    // running stats: mean 0.9*0 + 0.1*2, unbiased var 2 -> 0.9 + 0.2
    assert!((stats.mean[0] - 0.2).abs() < 1e-12);
    assert!((stats.var[0] - 1.1).abs() < 1e-12);

    let x = g.constant(seq(&[7.0])).unwrap();
    assert!(g.batch_norm(x, None, &mut RunningStats::new(1), true).is_err());
    let y = g.batch_norm(x, None, &mut stats, false).unwrap();
    assert!((g.value(y).data()[0] - (7.0 - 0.2) / (1.1f64 + 1e-5).sqrt()).abs() < 1e-12);
}

#[test]
fn pool_examples() {
    let run = |kind, x: &[f64], stride| {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(seq(x)).unwrap();
        let y = g.pool_t(xv, kind, 2, stride).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(PoolKind::Max, &[3.0, 1.0, 2.0], 1), vec![3.0, 3.0, 2.0]);
    assert_eq!(run(PoolKind::Avg, &[2.0, 2.0, 2.0], 1), vec![1.0, 2.0, 2.0]);
    assert_eq!(run(PoolKind::Max, &[1.0, 4.0, 2.0, 3.0], 2), vec![4.0, 3.0]);
    assert_eq!(run(PoolKind::Max, &[1.0, 4.0, 2.0, 3.0, 9.0], 2), vec![4.0, 3.0]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 0, 1, 1))).unwrap();
    assert!(matches!(g.pool_t(x, PoolKind::Max, 2, 1), Err(Error::Config(_))));
    let x = g.constant(seq(&[1.0, 2.0])).unwrap();
    assert!(g.pool_t(x, PoolKind::Max, 2, 3).is_err());
}

#[test]
fn softmax_and_concat() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
    let p = g.softmax(a).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    let b = g.constant(Tensor::vector(&[1000.0, 1001.0])).unwrap();
    let c = g.constant(Tensor::vector(&[0.0, 1.0])).unwrap();
    let (pb, pc) = (g.softmax(b).unwrap(), g.softmax(c).unwrap());
    assert!(g.value(pb).data().iter().zip(g.value(pc).data()).all(|(x, y)| (x - y).abs() < 1e-15));

    let x2 = g.constant(Tensor::from_fn(Shape::new(1, 2, 2, 1, 1), |i| i as f64)).unwrap();
    let x3 = g.constant(Tensor::from_fn(Shape::new(1, 3, 2, 1, 1), |i| 10.0 + i as f64)).unwrap();
    let y = g.concat_channels(&[x2, x3]).unwrap();
    assert_eq!(g.shape(y).c, 5);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
    assert!(matches!(g.concat_channels(&[]), Err(Error::Config(_))));
}

#[test]
fn sigmoid_and_linear() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(&[0.0, 2.0])).unwrap();
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    let w = g.constant(Tensor::from_vec(Shape::matrix(1, 2), vec![3.0, -1.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::vector(&[0.5])).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[-1.5]);
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(seq(&[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    let other = Graph::<f64>::new();
    assert!(matches!(other.backward(x), Err(Error::Usage(_))));
}

#[test]
fn unreachable_parameter_gets_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::vector(&[1.0]));
    let b = store.add("b", Tensor::vector(&[2.0]));
    let mut g = Graph::new();
    let av = g.param(store.get(a)).unwrap();
    let _bv = g.param(store.get(b)).unwrap();
    let root = g.sum(av).unwrap();
    let grads = g.backward(root).unwrap();
    store.accumulate(&grads);
    assert_eq!(store.get(a).grad.data(), &[1.0]);
    assert_eq!(store.get(b).grad.data(), &[0.0]);
}

#[test]
fn repeated_parameter_use_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::vector(&[3.0]));
    let mut g = Graph::new();
    let v1 = g.param(store.get(a)).unwrap();
    let v2 = g.param(store.get(a)).unwrap();
    assert_eq!(v1, v2);
    let s = g.add_n(&[v1, v2]).unwrap();
    let root = g.sum(s).unwrap();
    assert_eq!(g.backward(root).unwrap().param(store.get(a).key()).unwrap().data(), &[2.0]);
}

#[test]
fn non_finite_values_rejected() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(g.constant(Tensor::vector(&[f64::NAN])), Err(Error::Numeric(_))));
    let x = g.constant(Tensor::vector(&[1e306])).unwrap();
    let y = g.add_n(&[x, x]).unwrap();
    assert!(matches!(g.add_n(&vec![y; 400]), Err(Error::Numeric(_))));
}

#[test]
fn deterministic_forward_backward() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(Shape::new(2, 3, 5, 1, 1), |i| ((i * 37) % 11) as f64 - 5.0)).unwrap();
        let w = g.input(Tensor::from_fn(Shape::new(3, 1, 3, 1, 1), |i| i as f64 * 0.1)).unwrap();
        let y = g.temporal_conv(x, w, ConvGeom::same(3, 1, 3)).unwrap();
        let mut stats = RunningStats::new(3);
        let y = g.batch_norm(y, None, &mut stats, true).unwrap();
        let y = g.relu(y).unwrap();
        let root = g.sum(y).unwrap();
        let grads = g.backward(root).unwrap();
        (grads.wrt(x).unwrap().clone(), grads.wrt(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
}

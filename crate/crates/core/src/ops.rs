//! The candidate operations of the temporal search space and the
//! softmax-weighted mixture placed on every cell edge during search.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvUnit, Mode};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Identity,
    Zero,
    AvgPool2,
    MaxPool2,
    DilConvK3,
    DilConvK5,
    SepConvK3,
    SepConvK5,
    SepConvK7,
}

impl OpKind {
    /// Search-space order; α vectors are indexed in this order.
    pub const ALL: [OpKind; 9] = [
        OpKind::Identity,
        OpKind::Zero,
        OpKind::AvgPool2,
        OpKind::MaxPool2,
        OpKind::DilConvK3,
        OpKind::DilConvK5,
        OpKind::SepConvK3,
        OpKind::SepConvK5,
        OpKind::SepConvK7,
    ];

    pub const COUNT: usize = 9;

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
            OpKind::AvgPool2 => "avg_pool_2",
            OpKind::MaxPool2 => "max_pool_2",
            OpKind::DilConvK3 => "dil_conv_k3",
            OpKind::DilConvK5 => "dil_conv_k5",
            OpKind::SepConvK3 => "sep_conv_k3",
            OpKind::SepConvK5 => "sep_conv_k5",
            OpKind::SepConvK7 => "sep_conv_k7",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn spec(self) -> &'static OpSpec {
        &SEARCH_SPACE[self.index()]
    }

    /// Number of stacked ReLU-Conv-BN units (0 for parameter-free ops).
    pub fn units(self) -> usize {
        match self {
            OpKind::DilConvK3 | OpKind::DilConvK5 => 1,
            OpKind::SepConvK3 | OpKind::SepConvK5 | OpKind::SepConvK7 => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown op name {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRule {
    /// `g = C`: one filter per channel.
    PerChannel,
}

/// One row of the search-space table. `None` marks a blank cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpSpec {
    pub kind: OpKind,
    pub kernel: Option<usize>,
    pub dilation: Option<usize>,
    pub groups: Option<GroupRule>,
    /// Total temporal padding.
    pub padding: Option<usize>,
}

const fn row(
    kind: OpKind,
    kernel: Option<usize>,
    dilation: Option<usize>,
    groups: Option<GroupRule>,
    padding: Option<usize>,
) -> OpSpec {
    OpSpec {
        kind,
        kernel,
        dilation,
        groups,
        padding,
    }
}

pub const SEARCH_SPACE: [OpSpec; 9] = [
    row(OpKind::Identity, None, None, None, None),
    row(OpKind::Zero, None, None, None, None),
    row(OpKind::AvgPool2, Some(2), None, None, Some(1)),
    row(OpKind::MaxPool2, Some(2), None, None, Some(1)),
    row(OpKind::DilConvK3, Some(3), Some(2), Some(GroupRule::PerChannel), Some(2)),
    row(OpKind::DilConvK5, Some(5), Some(2), Some(GroupRule::PerChannel), Some(4)),
    row(OpKind::SepConvK3, Some(3), Some(1), None, Some(1)),
    row(OpKind::SepConvK5, Some(5), Some(1), None, Some(2)),
    row(OpKind::SepConvK7, Some(7), Some(1), None, Some(3)),
];

/// A built, differentiable candidate operation.
#[derive(Clone, Debug)]
pub enum OpBlock<S> {
    Identity,
    Zero,
    Pool(PoolKind),
    Conv { kind: OpKind, units: Vec<ConvUnit<S>> },
}

/// Builds `spec` for `channels` channels. Convolutions are depthwise along T
/// followed by a pointwise mix; SepConv stacks two such units.
pub fn build_op<S: Scalar, R: Rng + ?Sized>(
    spec: &OpSpec,
    channels: usize,
    affine: bool,
    store: &mut ParamStore<S>,
    name: &str,
    rng: &mut R,
) -> Result<OpBlock<S>> {
    if channels == 0 {
        return Err(Error::config(format!("{} built for zero channels", spec.kind)));
    }
    Ok(match spec.kind {
        OpKind::Identity => OpBlock::Identity,
        OpKind::Zero => OpBlock::Zero,
        OpKind::AvgPool2 => OpBlock::Pool(PoolKind::Avg),
        OpKind::MaxPool2 => OpBlock::Pool(PoolKind::Max),
        kind => {
            let (Some(k), Some(d), Some(pad)) = (spec.kernel, spec.dilation, spec.padding) else {
                return Err(Error::config(format!("{kind} is missing kernel geometry")));
            };
            let geom = ConvGeom {
                kernel: k,
                dilation: d,
                groups: channels,
                pad_left: pad,
                pad_right: pad,
            };
            let units = (0..kind.units())
                .map(|u| ConvUnit::new(store, &format!("{name}.unit{u}"), channels, geom, affine, rng))
                .collect();
            OpBlock::Conv { kind, units }
        }
    })
}

impl<S: Scalar> OpBlock<S> {
    pub fn kind(&self) -> OpKind {
        match self {
            OpBlock::Identity => OpKind::Identity,
            OpBlock::Zero => OpKind::Zero,
            OpBlock::Pool(PoolKind::Avg) => OpKind::AvgPool2,
            OpBlock::Pool(PoolKind::Max) => OpKind::MaxPool2,
            OpBlock::Conv { kind, .. } => *kind,
        }
    }

    pub fn forward(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            OpBlock::Identity => Ok(x),
            OpBlock::Zero => g.zeros_like(x),
            OpBlock::Pool(kind) => g.pool_t(x, *kind, 2, 1),
            OpBlock::Conv { units, .. } => {
                let mut y = x;
                for u in units {
                    y = u.forward(g, store, y, mode)?;
                }
                Ok(y)
            }
        }
    }

    pub(crate) fn transplant(&self, src: &ParamStore<S>, dst: &mut ParamStore<S>, name: &str) -> Self {
        match self {
            OpBlock::Conv { kind, units } => OpBlock::Conv {
                kind: *kind,
                units: units
                    .iter()
                    .enumerate()
                    .map(|(i, u)| u.transplant(src, dst, &format!("{name}.unit{i}")))
                    .collect(),
            },
            other => other.clone(),
        }
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        match self {
            OpBlock::Conv { units, .. } => units.iter().map(|u| u.batch_norm()).collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        match self {
            OpBlock::Conv { units, .. } => units.iter_mut().map(|u| u.batch_norm_mut()).collect(),
            _ => Vec::new(),
        }
    }
}

/// Builds one block per search-space op, in search-space order.
pub fn build_all<S: Scalar, R: Rng + ?Sized>(
    channels: usize,
    affine: bool,
    store: &mut ParamStore<S>,
    name: &str,
    rng: &mut R,
) -> Result<Vec<OpBlock<S>>> {
    SEARCH_SPACE
        .iter()
        .map(|spec| build_op(spec, channels, affine, store, &format!("{name}.{}", spec.kind), rng))
        .collect()
}

/// `sum_o softmax(alpha)_o * op_o(x)`. `alpha` is a `(1, |ops|, 1, 1, 1)` var.
/// Zero ops contribute nothing and are not evaluated.
pub fn mixed_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    alpha: Var,
    ops: &mut [OpBlock<S>],
    mode: Mode,
) -> Result<Var> {
    if g.shape(alpha).len() != ops.len() {
        return Err(Error::config(format!(
            "mixed op has {} candidates but alpha has {} entries",
            ops.len(),
            g.shape(alpha).len()
        )));
    }
    let weights = g.softmax(alpha)?;
    let mut terms = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter_mut().enumerate() {
        if matches!(op, OpBlock::Zero) {
            continue;
        }
        terms.push((i, op.forward(g, store, x, mode)?));
    }
    if terms.is_empty() {
        return g.zeros_like(x);
    }
    g.mix(weights, &terms)
}

/// Numerically stable softmax of a plain slice.
pub fn softmax<S: Scalar>(alpha: &[S]) -> Vec<S> {
    let max = alpha.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = alpha.iter().map(|&a| (a - max).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Discretizes one edge: the non-Zero op with the largest softmax weight
/// (lowest index on ties) and that weight as the edge strength.
pub fn discretize_edge<S: Scalar>(alpha: &[S]) -> (OpKind, S) {
    let p = softmax(alpha);
    let mut best: Option<(usize, S)> = None;
    for (i, &w) in p.iter().enumerate() {
        if i == OpKind::Zero.index() {
            continue;
        }
        if best.is_none_or(|(_, b)| w > b) {
            best = Some((i, w));
        }
    }
    let (i, w) = best.expect("search space has non-zero ops");
    (OpKind::from_index(i).expect("index within search space"), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn table_matches_canonical_names() {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            [
                "identity",
                "zero",
                "avg_pool_2",
                "max_pool_2",
                "dil_conv_k3",
                "dil_conv_k5",
                "sep_conv_k3",
                "sep_conv_k5",
                "sep_conv_k7"
            ]
        );
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
            assert_eq!(SEARCH_SPACE[k.index()].kind, k);
        }
        assert!("conv9".parse::<OpKind>().is_err());
    }

    #[test]
    fn every_op_preserves_shape() {
        let shape = Shape::new(2, 6, 8, 2, 2);
        let x = Tensor::random_normal(shape, 1.0, &mut rng());
        for spec in &SEARCH_SPACE {
            let mut store = ParamStore::<f64>::new();
            let mut op = build_op(spec, 6, true, &mut store, "op", &mut rng()).unwrap();
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let y = op.forward(&mut g, &store, xv, Mode::Train).unwrap();
            assert_eq!(g.shape(y), shape, "{}", spec.kind);
            if spec.kind == OpKind::Identity {
                assert_eq!(g.value(y), &x);
            }
            if spec.kind == OpKind::Zero {
                assert!(g.value(y).data().iter().all(|&v| v == 0.0));
                let root = g.sum(y).unwrap();
                assert!(g.backward(root).unwrap().wrt(xv).is_none_or(|t| t.max_abs() == 0.0));
            }
        }
    }

    #[test]
    fn conv_units_and_parameter_counts() {
        for (kind, units, params) in [
            (OpKind::DilConvK3, 1, 4 * 3 + 16 + 8),
            (OpKind::SepConvK5, 2, 2 * (4 * 5 + 16 + 8)),
        ] {
            let mut store = ParamStore::<f64>::new();
            build_op(kind.spec(), 4, true, &mut store, "op", &mut rng()).unwrap();
            assert_eq!(kind.units(), units);
            assert_eq!(store.num_scalars(), params);
        }
        assert!(build_op::<f64, _>(OpKind::SepConvK3.spec(), 0, true, &mut ParamStore::new(), "op", &mut rng()).is_err());
    }

    #[test]
    fn identity_zero_mix_halves_input() {
        let x = Tensor::random_normal(Shape::new(2, 3, 4, 1, 1), 1.0, &mut rng());
        let mut ops = vec![OpBlock::<f64>::Identity, OpBlock::Zero];
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let a = g.input(Tensor::vector(&[0.0, 0.0])).unwrap();
        let y = mixed_forward(&mut g, &ParamStore::new(), xv, a, &mut ops, Mode::Train).unwrap();
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
        let bad = g.input(Tensor::vector(&[0.0; 3])).unwrap();
        assert!(matches!(
            mixed_forward(&mut g, &ParamStore::new(), xv, bad, &mut ops, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn saturated_mix_selects_identity() {
        let shape = Shape::new(2, 4, 6, 1, 1);
        let x = Tensor::random_normal(shape, 1.0, &mut rng());
        let mut store = ParamStore::<f64>::new();
        let mut ops = build_all(4, false, &mut store, "e", &mut rng()).unwrap();
        let mut alpha = vec![0.0f64; OpKind::COUNT];
        alpha[OpKind::Identity.index()] = 20.0;
        let p = softmax(&alpha);
        let dist: f64 = p.iter().enumerate().map(|(i, v)| (v - if i == 0 { 1.0 } else { 0.0 }).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-7);
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let a = g.input(Tensor::vector(&alpha)).unwrap();
        let y = mixed_forward(&mut g, &store, xv, a, &mut ops, Mode::Train).unwrap();
        let err = g.value(y).data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize_edge(&[0.0f64; 9]).0, OpKind::Identity);
        let mut a = [0.0f64; 9];
        a[OpKind::SepConvK5.index()] = 1.0;
        assert_eq!(discretize_edge(&a).0, OpKind::SepConvK5);
        a[OpKind::Zero.index()] = 9.0;
        assert_eq!(discretize_edge(&a).0, OpKind::SepConvK5);
    }

    proptest! {
        #[test]
        fn discretize_matches_scan(alpha in proptest::collection::vec(-4.0f64..4.0, 9), shift in -50.0f64..50.0) {
            let (kind, w) = discretize_edge(&alpha);
            let p = softmax(&alpha);
            let mut best = 0;
            for i in [0usize, 2, 3, 4, 5, 6, 7, 8] {
                if p[i] > p[best] {
                    best = i;
                }
            }
            prop_assert_eq!(kind.index(), best);
            prop_assert_eq!(w, p[best]);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
            prop_assert_eq!(discretize_edge(&shifted).0, kind);
        }
    }
}

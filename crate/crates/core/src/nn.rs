//! Parameterized building blocks shared by cells and the classifier head.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, RunningStats, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<S: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::random_uniform(shape, bound, rng)
}

/// Copies a parameter from `src` into `dst` under a new name.
pub(crate) fn copy_param<S: Scalar>(src: &ParamStore<S>, id: ParamId, dst: &mut ParamStore<S>, name: String) -> ParamId {
    dst.add(name, src.get(id).value.clone())
}

#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    name: String,
    affine: Option<(ParamId, ParamId)>,
    pub stats: RunningStats<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(store: &mut ParamStore<S>, name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add(format!("{name}.gamma"), Tensor::full(Shape::vector(channels), S::one())),
                store.add(format!("{name}.beta"), Tensor::zeros(Shape::vector(channels))),
            )
        });
        BatchNorm {
            name: name.to_string(),
            affine,
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let affine = match self.affine {
            Some((gm, bt)) => Some((g.param(store.get(gm))?, g.param(store.get(bt))?)),
            None => None,
        };
        g.batch_norm(x, affine, &mut self.stats, mode.is_train())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn transplant(&self, src: &ParamStore<S>, dst: &mut ParamStore<S>, name: &str) -> Self {
        let affine = self.affine.map(|(gm, bt)| {
            (
                copy_param(src, gm, dst, format!("{name}.gamma")),
                copy_param(src, bt, dst, format!("{name}.beta")),
            )
        });
        BatchNorm {
            name: name.to_string(),
            affine,
            stats: self.stats.clone(),
        }
    }
}

/// ReLU -> depthwise temporal conv -> pointwise conv -> BatchNorm.
#[derive(Clone, Debug)]
pub struct ConvUnit<S> {
    depthwise: ParamId,
    pointwise: ParamId,
    bn: BatchNorm<S>,
    geom: ConvGeom,
}

impl<S: Scalar> ConvUnit<S> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        geom: ConvGeom,
        affine: bool,
        rng: &mut R,
    ) -> Self {
        let depthwise = store.add(
            format!("{name}.depthwise"),
            kaiming_uniform(Shape::new(channels, 1, geom.kernel, 1, 1), geom.kernel, rng),
        );
        let pointwise = store.add(
            format!("{name}.pointwise"),
            kaiming_uniform(Shape::matrix(channels, channels), channels, rng),
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels, affine);
        ConvUnit {
            depthwise,
            pointwise,
            bn,
            geom,
        }
    }

    pub fn forward(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let dw = g.param(store.get(self.depthwise))?;
        let pw = g.param(store.get(self.pointwise))?;
        let y = g.relu(x)?;
        let y = g.temporal_conv(y, dw, self.geom)?;
        let y = g.pointwise_conv(y, pw)?;
        self.bn.forward(g, store, y, mode)
    }

    pub(crate) fn transplant(&self, src: &ParamStore<S>, dst: &mut ParamStore<S>, name: &str) -> Self {
        ConvUnit {
            depthwise: copy_param(src, self.depthwise, dst, format!("{name}.depthwise")),
            pointwise: copy_param(src, self.pointwise, dst, format!("{name}.pointwise")),
            bn: self.bn.transplant(src, dst, &format!("{name}.bn")),
            geom: self.geom,
        }
    }

    pub(crate) fn batch_norm(&self) -> &BatchNorm<S> {
        &self.bn
    }

    pub(crate) fn batch_norm_mut(&mut self) -> &mut BatchNorm<S> {
        &mut self.bn
    }
}

/// Channel reduction of a cell input: ReLU -> pointwise conv -> BatchNorm.
#[derive(Clone, Debug)]
pub struct Projection<S> {
    weight: ParamId,
    bn: BatchNorm<S>,
}

impl<S: Scalar> Projection<S> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.pointwise"),
            kaiming_uniform(Shape::matrix(c_out, c_in), c_in, rng),
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out, affine);
        Projection { weight, bn }
    }

    pub fn forward(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store.get(self.weight))?;
        let y = g.relu(x)?;
        let y = g.pointwise_conv(y, w)?;
        self.bn.forward(g, store, y, mode)
    }

    pub(crate) fn transplant(&self, src: &ParamStore<S>, dst: &mut ParamStore<S>, name: &str) -> Self {
        Projection {
            weight: copy_param(src, self.weight, dst, format!("{name}.pointwise")),
            bn: self.bn.transplant(src, dst, &format!("{name}.bn")),
        }
    }

    pub(crate) fn batch_norm(&self) -> &BatchNorm<S> {
        &self.bn
    }

    pub(crate) fn batch_norm_mut(&mut self) -> &mut BatchNorm<S> {
        &mut self.bn
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                kaiming_uniform(Shape::matrix(c_out, c_in), c_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(c_out))),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store.get(self.weight))?;
        let b = g.param(store.get(self.bias))?;
        g.linear(x, w, b)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

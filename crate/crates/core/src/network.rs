//! NAS-TC layers (channel groups -> shared cell -> channel shuffle ->
//! temporal max-pool) stacked over backbone features, plus the classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PoolKind, Var};
use crate::cell::{CellArch, DiscreteCell, RelaxedCell};
use crate::error::{Error, Result};
use crate::genotype::{Genotype, NODES};
use crate::nn::{BatchNorm, Linear, Mode};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Independent per-class sigmoid; trained with binary cross-entropy.
    MultiLabel,
    /// One class per sample; trained with softmax cross-entropy.
    SingleLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    /// Channel groups `N` per layer.
    pub groups: usize,
    /// Intermediate nodes `S` per cell; must be 4.
    pub nodes: usize,
    /// Projection divisor `M`.
    pub reduction: usize,
    pub hidden: usize,
    pub classes: usize,
    pub task: Task,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: 1024,
            timesteps: 32,
            height: 7,
            width: 7,
            layers: 3,
            groups: 8,
            nodes: 4,
            reduction: 3,
            hidden: 512,
            classes: 157,
            task: Task::MultiLabel,
            dropout: 0.5,
        }
    }
}

/// Channel bookkeeping of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// Channels of `I_{k-2}`.
    pub c_prev2: usize,
    /// Channels of `I_{k-1}` (the layer input).
    pub c_prev1: usize,
    /// Per-group cell width `floor((C / N) / M)`.
    pub width: usize,
    pub out_channels: usize,
    pub t_in: usize,
}

impl NetworkConfig {
    /// Feature shape for a batch of `n` samples.
    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.channels, self.timesteps, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::schema(format!("/{field}"), msg));
        if self.layers == 0 {
            return bad("layers", "at least one layer is required".into());
        }
        if self.nodes != NODES {
            return bad("nodes", format!("cells have exactly {NODES} intermediate nodes"));
        }
        if self.groups == 0 {
            return bad("groups", "must be at least 1".into());
        }
        if self.reduction == 0 {
            return bad("reduction", "must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1".into());
        }
        if self.classes == 0 {
            return bad("classes", "must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("height", "spatial extent must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if self.layers >= usize::BITS as usize || self.timesteps == 0 || !self.timesteps.is_multiple_of(1 << self.layers) {
            return bad(
                "timesteps",
                format!("{} is not divisible by 2^{}", self.timesteps, self.layers),
            );
        }
        self.plan().map(|_| ())
    }

    /// Per-layer channel plan. Fails when a layer's channels do not split
    /// into the groups or leave no inner width.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        layer_plan(self.channels, self.timesteps, self.layers, self.groups, self.reduction)
    }

    /// Channels entering the classifier.
    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.plan()?.last().map_or(self.channels, |p| p.out_channels))
    }
}

pub fn layer_plan(channels: usize, timesteps: usize, layers: usize, groups: usize, reduction: usize) -> Result<Vec<LayerPlan>> {
    let mut out = Vec::with_capacity(layers);
    let (mut prev2, mut prev1, mut t) = (channels, channels, timesteps);
    for k in 0..layers {
        if groups == 0 || prev1 % groups != 0 || prev2 % groups != 0 {
            return Err(Error::schema(
                "/groups",
                format!("layer {} input of {prev1} channels does not split into {groups} groups", k + 1),
            ));
        }
        let width = prev1 / groups / reduction.max(1);
        if width == 0 {
            return Err(Error::schema(
                "/channels",
                format!("layer {} groups of {} channels leave no width after dividing by {reduction}", k + 1, prev1 / groups),
            ));
        }
        let out_channels = groups * NODES * width;
        out.push(LayerPlan {
            c_prev2: prev2,
            c_prev1: prev1,
            width,
            out_channels,
            t_in: t,
        });
        prev2 = prev1;
        prev1 = out_channels;
        t /= 2;
    }
    Ok(out)
}

/// Channel-shuffle permutation for `groups` groups: output channel `o` is
/// input channel `(o % g) * (C / g) + o / g`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!("{channels} channels do not split into {groups} groups")));
    }
    let per = channels / groups;
    Ok((0..channels).map(|o| (o % groups) * per + o / groups).collect())
}

pub fn channel_shuffle<S: Scalar>(g: &mut Graph<S>, x: Var, groups: usize) -> Result<Var> {
    let perm = shuffle_permutation(g.shape(x).c, groups)?;
    g.permute_channels(x, &perm)
}

#[derive(Clone, Debug)]
enum LayerCell<S> {
    Relaxed(RelaxedCell<S>),
    Discrete(DiscreteCell<S>),
}

#[derive(Clone, Debug)]
struct Layer<S> {
    cell: LayerCell<S>,
    plan: LayerPlan,
}

/// Moves channel groups into the batch axis: `(B, C, ..) -> (B * N, C / N, ..)`.
fn fold_groups<S: Scalar>(g: &mut Graph<S>, x: Var, groups: usize) -> Result<Var> {
    let s = g.shape(x);
    if !s.c.is_multiple_of(groups) {
        return Err(Error::config(format!("{} channels do not split into {groups} groups", s.c)));
    }
    g.reshape(x, Shape::new(s.n * groups, s.c / groups, s.t, s.h, s.w))
}

impl<S: Scalar> Layer<S> {
    /// `s0` is `I_{k-2}`, `s1` is `I_{k-1}`. A skip input at twice the
    /// temporal resolution is max-pooled to match.
    fn forward(
        &mut self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        alpha: Option<&[Var]>,
        s0: Var,
        s1: Var,
        groups: usize,
        mode: Mode,
    ) -> Result<Var> {
        let (a, b) = (g.shape(s0), g.shape(s1));
        let s0 = if a.t == b.t {
            s0
        } else if a.t == 2 * b.t {
            g.pool_t(s0, PoolKind::Max, 2, 2)?
        } else {
            return Err(Error::config(format!("layer inputs {a} and {b} differ in timesteps")));
        };
        if b.c != self.plan.c_prev1 || g.shape(s0).c != self.plan.c_prev2 {
            return Err(Error::config(format!(
                "layer expects {} and {} channels, got {} and {}",
                self.plan.c_prev2, self.plan.c_prev1, a.c, b.c
            )));
        }
        let f0 = fold_groups(g, s0, groups)?;
        let f1 = fold_groups(g, s1, groups)?;
        let y = match (&mut self.cell, alpha) {
            (LayerCell::Relaxed(c), Some(alpha)) => c.forward(g, store, alpha, f0, f1, mode)?,
            (LayerCell::Discrete(c), None) => c.forward(g, store, f0, f1, mode)?,
            _ => return Err(Error::Internal("architecture weights do not match the cell kind".into())),
        };
        let ys = g.shape(y);
        let y = g.reshape(y, Shape::new(b.n, ys.c * groups, ys.t, ys.h, ys.w))?;
        let y = channel_shuffle(g, y, groups)?;
        g.pool_t(y, PoolKind::Max, 2, 2)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        match &self.cell {
            LayerCell::Relaxed(c) => c.batch_norms(),
            LayerCell::Discrete(c) => c.batch_norms(),
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        match &mut self.cell {
            LayerCell::Relaxed(c) => c.batch_norms_mut(),
            LayerCell::Discrete(c) => c.batch_norms_mut(),
        }
    }
}

/// Full classifier over backbone features. Relaxed networks carry one
/// [`CellArch`] shared by every layer.
#[derive(Clone, Debug)]
pub struct Network<S> {
    cfg: NetworkConfig,
    store: ParamStore<S>,
    arch: Option<CellArch<S>>,
    layers: Vec<Layer<S>>,
    hidden: Linear,
    output: Linear,
}

impl<S: Scalar> Network<S> {
    /// Search-time network: mixed ops on every edge, BatchNorm without affine
    /// parameters, α drawn from `N(0, alpha_std^2)`.
    pub fn relaxed<R: Rng + ?Sized>(cfg: &NetworkConfig, alpha_std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let arch = CellArch::random(alpha_std, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for (k, plan) in cfg.plan()?.into_iter().enumerate() {
            let cell = RelaxedCell::new(
                &mut store,
                &format!("layer{k}.cell"),
                plan.c_prev2 / cfg.groups,
                plan.c_prev1 / cfg.groups,
                plan.width,
                false,
                rng,
            )?;
            layers.push(Layer {
                cell: LayerCell::Relaxed(cell),
                plan,
            });
        }
        Self::finish(cfg, store, Some(arch), layers, rng)
    }

    /// Deployment network built from a genotype, with affine BatchNorm.
    pub fn discrete<R: Rng + ?Sized>(cfg: &NetworkConfig, genotype: &Genotype, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.layers);
        for (k, plan) in cfg.plan()?.into_iter().enumerate() {
            let cell = DiscreteCell::new(
                &mut store,
                &format!("layer{k}.cell"),
                genotype,
                plan.c_prev2 / cfg.groups,
                plan.c_prev1 / cfg.groups,
                plan.width,
                true,
                rng,
            )?;
            layers.push(Layer {
                cell: LayerCell::Discrete(cell),
                plan,
            });
        }
        Self::finish(cfg, store, None, layers, rng)
    }

    /// Discrete network holding previously saved tensors.
    pub fn discrete_with_weights(cfg: &NetworkConfig, genotype: &Genotype, tensors: &[(String, Tensor<S>)]) -> Result<Self> {
        // initial values are overwritten below
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::discrete(cfg, genotype, &mut rng)?;
        net.load_named(tensors)?;
        Ok(net)
    }

    fn finish<R: Rng + ?Sized>(
        cfg: &NetworkConfig,
        mut store: ParamStore<S>,
        arch: Option<CellArch<S>>,
        layers: Vec<Layer<S>>,
        rng: &mut R,
    ) -> Result<Self> {
        let c = layers.last().map_or(cfg.channels, |l| l.plan.out_channels);
        let hidden = Linear::new(&mut store, "head.hidden", c, cfg.hidden, rng);
        let output = Linear::new(&mut store, "head.output", cfg.hidden, cfg.classes, rng);
        Ok(Network {
            cfg: cfg.clone(),
            store,
            arch,
            layers,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn arch(&self) -> Option<&CellArch<S>> {
        self.arch.as_ref()
    }

    pub fn arch_mut(&mut self) -> Option<&mut CellArch<S>> {
        self.arch.as_mut()
    }

    pub fn is_relaxed(&self) -> bool {
        self.arch.is_some()
    }

    pub fn layer_plans(&self) -> Vec<LayerPlan> {
        self.layers.iter().map(|l| l.plan).collect()
    }

    /// Trainable weight scalars (α excluded).
    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalars per layer and for the classifier, by enumerating instantiated
    /// parameter tensors.
    pub fn parameter_breakdown(&self) -> (Vec<usize>, usize) {
        let mut layers = vec![0; self.layers.len()];
        let mut head = 0;
        for p in self.store.iter() {
            let n = p.value.len();
            match p.name().strip_prefix("layer").and_then(|r| r.split('.').next()).and_then(|k| k.parse::<usize>().ok()) {
                Some(k) => layers[k] += n,
                None => head += n,
            }
        }
        (layers, head)
    }

    /// Logits `(B, K, 1, 1, 1)` for features `(B, C, T, H, W)`.
    pub fn forward<R: Rng + ?Sized>(&mut self, g: &mut Graph<S>, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let outs = self.forward_layers(g, x, mode)?;
        let last = outs.last().copied().unwrap_or(x);
        let h = g.global_avg_pool(last)?;
        let h = self.hidden.forward(g, &self.store, h)?;
        let h = g.relu(h)?;
        let h = if mode.is_train() {
            g.dropout(h, self.cfg.dropout, rng)?
        } else {
            h
        };
        self.output.forward(g, &self.store, h)
    }

    /// Output of every NAS-TC layer, in order.
    pub fn forward_layers(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<Vec<Var>> {
        let xs = g.shape(x);
        let want = self.cfg.input_shape(xs.n);
        if xs != want {
            return Err(Error::config(format!("features {xs} do not match the configured {want}")));
        }
        let alpha = match &self.arch {
            Some(a) => Some(a.vars(g)?),
            None => None,
        };
        let (mut s0, mut s1) = (x, x);
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let y = layer.forward(g, &self.store, alpha.as_deref(), s0, s1, self.cfg.groups, mode)?;
            outs.push(y);
            s0 = s1;
            s1 = y;
        }
        Ok(outs)
    }

    /// Task loss on logits: mean BCE for multi-label, mean CE for single-label.
    pub fn loss(&self, g: &mut Graph<S>, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        match self.cfg.task {
            Task::MultiLabel => g.bce_with_logits(logits, targets),
            Task::SingleLabel => g.softmax_cross_entropy(logits, targets),
        }
    }

    /// Per-class scores from logits: sigmoid or softmax by task.
    pub fn scores(&self, logits: &Tensor<S>) -> Tensor<S> {
        match self.cfg.task {
            Task::MultiLabel => logits.map(|z| S::one() / (S::one() + (-z).exp())),
            Task::SingleLabel => {
                let s = logits.shape();
                let mut out = logits.clone();
                for row in out.data_mut().chunks_mut(s.c) {
                    let p = crate::ops::softmax(row);
                    row.copy_from_slice(&p);
                }
                out
            }
        }
    }

    /// Evaluation-mode scores `(B, K)` as rows, processed `batch` samples at a time.
    pub fn predict(&mut self, features: &Tensor<S>, batch: usize) -> Result<Vec<Vec<S>>> {
        let s = features.shape();
        let per = s.len() / s.n.max(1);
        let mut out = Vec::with_capacity(s.n);
        // evaluation mode draws no random numbers
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for start in (0..s.n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(s.n);
            let x = Tensor::from_vec(s.with_n(end - start), features.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let logits = self.forward(&mut g, xv, Mode::Eval, &mut rng)?;
            let scores = self.scores(g.value(logits));
            out.extend(scores.data().chunks(self.cfg.classes).map(<[S]>::to_vec));
        }
        Ok(out)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        self.layers.iter().flat_map(|l| l.batch_norms()).collect()
    }

    /// Every parameter followed by every BatchNorm's running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out: Vec<(String, Tensor<S>)> =
            self.store.iter().map(|p| (p.name().to_string(), p.value.clone())).collect();
        for bn in self.batch_norms() {
            out.push((format!("{}.running_mean", bn.name()), Tensor::vector(&bn.stats.mean)));
            out.push((format!("{}.running_var", bn.name()), Tensor::vector(&bn.stats.var)));
        }
        out
    }

    /// Replaces every named tensor; the set of names and shapes must match
    /// exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<S>)]) -> Result<()> {
        let expected = self.named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::config(format!(
                "weights hold {} tensors, the network has {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut by_name = std::collections::HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::config(format!("tensor {name:?} appears twice")));
            }
        }
        for (name, t) in &expected {
            let Some(new) = by_name.get(name.as_str()) else {
                return Err(Error::config(format!("tensor {name:?} missing from weights")));
            };
            if new.shape() != t.shape() {
                return Err(Error::config(format!(
                    "tensor {name:?} has shape {}, expected {}",
                    new.shape(),
                    t.shape()
                )));
            }
        }
        for p in self.store.iter_mut() {
            p.value = by_name[p.name()].clone();
        }
        for layer in &mut self.layers {
            for bn in layer.batch_norms_mut() {
                bn.stats.mean = by_name[format!("{}.running_mean", bn.name()).as_str()].data().to_vec();
                bn.stats.var = by_name[format!("{}.running_var", bn.name()).as_str()].data().to_vec();
            }
        }
        Ok(())
    }
}

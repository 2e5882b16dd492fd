//! Central finite-difference checks of analytic gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ConvGeom, Graph, PoolKind, RunningStats, Var};
use crate::error::Result;
use crate::nn::Mode;
use crate::ops::{build_all, build_op, mixed_forward, OpKind, SEARCH_SPACE};
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Builds a graph from leaf values and returns the scalar root and the
/// vars standing for each leaf.
pub type Builder<'a> = dyn FnMut(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> + 'a;

/// `||a - b||_inf / max(||a||_inf, ||b||_inf)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over all leaves.
pub fn check_gradients(leaves: &[Tensor<f64>], build: &mut Builder<'_>) -> Result<f64> {
    let (g, root, vars) = build(leaves)?;
    let grads = g.backward(root)?;
    let mut worst: f64 = 0.0;
    let mut probe = leaves.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map_or_else(|| vec![0.0; leaf.len()], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(leaf.len());
        for j in 0..leaf.len() {
            let orig = leaf.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let (g1, r1, _) = build(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let (g2, r2, _) = build(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((g1.value(r1).data()[0] - g2.value(r2).data()[0]) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random_shape<R: Rng>(rng: &mut R) -> Shape {
    Shape::new(
        rng.random_range(2..=3),
        rng.random_range(2..=4),
        rng.random_range(4..=8),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
    )
}

fn normal<R: Rng>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    Tensor::random_normal(shape, 1.0, rng)
}

/// Leaves are `[x, params...]`; the root is `dot(op(x), r)`.
fn op_check(kind: OpKind, shape: Shape, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = build_op(&SEARCH_SPACE[kind.index()], shape.c, true, &mut store, "op", &mut rng)?;
    for p in store.iter_mut() {
        p.value = normal(p.value.shape(), &mut rng);
    }
    let r = normal(shape, &mut rng);
    let mut leaves = vec![normal(shape, &mut rng)];
    leaves.extend(store.iter().map(|p| p.value.clone()));
    let mut build = |vals: &[Tensor<f64>]| {
        let mut st = store.clone();
        for (p, v) in st.iter_mut().zip(&vals[1..]) {
            p.value = v.clone();
        }
        let mut blk = block.clone();
        let mut g = Graph::new();
        let x = g.input(vals[0].clone())?;
        let y = blk.forward(&mut g, &st, x, Mode::Train)?;
        let root = g.dot(y, &r)?;
        let mut vars = vec![x];
        for p in st.iter() {
            vars.push(g.param(p)?);
        }
        Ok((g, root, vars))
    };
    check_gradients(&leaves, &mut build)
}

/// Softmax-weighted mix over the full search space; leaves are `[x, alpha, params...]`.
fn mixed_check(shape: Shape, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ops = build_all(shape.c, true, &mut store, "edge", &mut rng)?;
    for p in store.iter_mut() {
        p.value = normal(p.value.shape(), &mut rng);
    }
    let r = normal(shape, &mut rng);
    let mut leaves = vec![normal(shape, &mut rng), normal(Shape::vector(OpKind::COUNT), &mut rng)];
    leaves.extend(store.iter().map(|p| p.value.clone()));
    let mut build = |vals: &[Tensor<f64>]| {
        let mut st = store.clone();
        for (p, v) in st.iter_mut().zip(&vals[2..]) {
            p.value = v.clone();
        }
        let mut blocks = ops.clone();
        let mut g = Graph::new();
        let x = g.input(vals[0].clone())?;
        let a = g.input(vals[1].clone())?;
        let y = mixed_forward(&mut g, &st, x, a, &mut blocks, Mode::Train)?;
        let root = g.dot(y, &r)?;
        let mut vars = vec![x, a];
        for p in st.iter() {
            vars.push(g.param(p)?);
        }
        Ok((g, root, vars))
    };
    check_gradients(&leaves, &mut build)
}

/// A primitive check: `f` maps leaf vars to an output that is projected
/// onto a fixed random tensor.
fn primitive_check<F>(leaves: Vec<Tensor<f64>>, seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| probe.input(t.clone())).collect::<Result<_>>()?;
    let out_shape = {
        let y = f(&mut probe, &vars)?;
        probe.shape(y)
    };
    let r = normal(out_shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let mut build = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect::<Result<_>>()?;
        let y = f(&mut g, &vars)?;
        let root = g.dot(y, &r)?;
        Ok((g, root, vars))
    };
    check_gradients(&leaves, &mut build)
}

type PrimitiveCase = (&'static str, fn(Shape, u64) -> Result<f64>);

fn primitive_cases() -> Vec<PrimitiveCase> {
    fn conv(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = ConvGeom::same(3, 2, s.c);
        let leaves = vec![normal(s, &mut rng), normal(Shape::new(s.c, 1, 3, 1, 1), &mut rng)];
        primitive_check(leaves, seed, |g, v| g.temporal_conv(v[0], v[1], geom))
    }
    fn dense_conv(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = ConvGeom::same(3, 1, 1);
        let leaves = vec![normal(s, &mut rng), normal(Shape::new(3, s.c, 3, 1, 1), &mut rng)];
        primitive_check(leaves, seed, |g, v| g.temporal_conv(v[0], v[1], geom))
    }
    fn pointwise(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(s, &mut rng), normal(Shape::matrix(3, s.c), &mut rng)];
        primitive_check(leaves, seed, |g, v| g.pointwise_conv(v[0], v[1]))
    }
    fn relu(s: Shape, seed: u64) -> Result<f64> {
        let leaves = vec![normal(s, &mut ChaCha8Rng::seed_from_u64(seed))];
        primitive_check(leaves, seed, |g, v| g.relu(v[0]))
    }
    fn sigmoid(s: Shape, seed: u64) -> Result<f64> {
        let leaves = vec![normal(s, &mut ChaCha8Rng::seed_from_u64(seed))];
        primitive_check(leaves, seed, |g, v| g.sigmoid(v[0]))
    }
    fn batch_norm_train(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(s, &mut rng), normal(Shape::vector(s.c), &mut rng), normal(Shape::vector(s.c), &mut rng)];
        primitive_check(leaves, seed, |g, v| {
            let mut stats = RunningStats::new(s.c);
            g.batch_norm(v[0], Some((v[1], v[2])), &mut stats, true)
        })
    }
    fn batch_norm_eval(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(s, &mut rng), normal(Shape::vector(s.c), &mut rng), normal(Shape::vector(s.c), &mut rng)];
        let mean: Vec<f64> = (0..s.c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..s.c).map(|_| rng.random_range(0.5..2.0)).collect();
        primitive_check(leaves, seed, move |g, v| {
            let mut stats = RunningStats::new(s.c);
            stats.mean = mean.clone();
            stats.var = var.clone();
            g.batch_norm(v[0], Some((v[1], v[2])), &mut stats, false)
        })
    }
    fn max_pool(s: Shape, seed: u64) -> Result<f64> {
        let leaves = vec![normal(s, &mut ChaCha8Rng::seed_from_u64(seed))];
        primitive_check(leaves, seed, |g, v| {
            let a = g.pool_t(v[0], PoolKind::Max, 2, 1)?;
            g.pool_t(a, PoolKind::Max, 2, 2)
        })
    }
    fn avg_pool(s: Shape, seed: u64) -> Result<f64> {
        let leaves = vec![normal(s, &mut ChaCha8Rng::seed_from_u64(seed))];
        primitive_check(leaves, seed, |g, v| {
            let a = g.pool_t(v[0], PoolKind::Avg, 2, 1)?;
            g.pool_t(a, PoolKind::Avg, 2, 2)
        })
    }
    fn softmax(_s: Shape, seed: u64) -> Result<f64> {
        let leaves = vec![normal(Shape::new(2, 9, 1, 1, 1), &mut ChaCha8Rng::seed_from_u64(seed))];
        primitive_check(leaves, seed, |g, v| g.softmax(v[0]))
    }
    fn mix(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(Shape::vector(3), &mut rng), normal(s, &mut rng), normal(s, &mut rng)];
        primitive_check(leaves, seed, |g, v| g.mix(v[0], &[(0, v[1]), (2, v[2])]))
    }
    fn add_concat_shuffle(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(s, &mut rng), normal(s, &mut rng), normal(s.with_c(1), &mut rng)];
        primitive_check(leaves, seed, |g, v| {
            let a = g.add_n(&[v[0], v[1], v[0]])?;
            let c = g.concat_channels(&[a, v[2]])?;
            let cs = g.shape(c);
            let perm: Vec<usize> = (0..cs.c).rev().collect();
            let p = g.permute_channels(c, &perm)?;
            g.reshape(p, Shape::new(1, cs.n * cs.c, cs.t, cs.h, cs.w))
        })
    }
    fn head(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![normal(s, &mut rng), normal(Shape::matrix(5, s.c), &mut rng), normal(Shape::vector(5), &mut rng)];
        primitive_check(leaves, seed, |g, v| {
            let p = g.global_avg_pool(v[0])?;
            g.linear(p, v[1], v[2])
        })
    }
    fn bce(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::matrix(s.n, s.c);
        let targets = Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let leaves = vec![normal(shape, &mut rng)];
        primitive_check(leaves, seed, move |g, v| g.bce_with_logits(v[0], &targets))
    }
    fn cross_entropy(s: Shape, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::matrix(s.n, s.c);
        let hot: Vec<usize> = (0..s.n).map(|_| rng.random_range(0..s.c)).collect();
        let targets = Tensor::from_fn(shape, |i| if hot[i / s.c] == i % s.c { 1.0 } else { 0.0 });
        let leaves = vec![normal(shape, &mut rng)];
        primitive_check(leaves, seed, move |g, v| g.softmax_cross_entropy(v[0], &targets))
    }
    vec![
        ("temporal_conv_depthwise", conv),
        ("temporal_conv_dense", dense_conv),
        ("pointwise_conv", pointwise),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("batch_norm_train", batch_norm_train),
        ("batch_norm_eval", batch_norm_eval),
        ("max_pool", max_pool),
        ("avg_pool", avg_pool),
        ("softmax", softmax),
        ("mix", mix),
        ("add_concat_permute_reshape", add_concat_shuffle),
        ("global_pool_linear", head),
        ("bce_with_logits", bce),
        ("softmax_cross_entropy", cross_entropy),
    ]
}

/// Every primitive, every search-space op and the mixed op, `trials`
/// random inputs each.
pub fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: String, f: &mut dyn FnMut(Shape, u64) -> Result<f64>| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ out.len() as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let shape = random_shape(&mut rng);
            worst = worst.max(f(shape, rng.random())?);
        }
        out.push(CheckResult {
            name,
            trials,
            max_rel_error: worst,
        });
        Ok(())
    };
    for (name, f) in primitive_cases() {
        run(name.to_string(), &mut |s, k| f(s, k))?;
    }
    for kind in OpKind::ALL {
        run(kind.name().to_string(), &mut |s, k| op_check(kind, s, k))?;
    }
    run("mixed_op".to_string(), &mut mixed_check)?;
    Ok(out)
}

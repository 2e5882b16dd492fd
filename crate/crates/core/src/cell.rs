//! The cell: two projected inputs, four intermediate nodes, concatenated
//! output. The relaxed form mixes every candidate op on all 14 edges; the
//! discrete form keeps two ops per node.

use rand::Rng;
use serde_json::{json, Value};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::genotype::{edge_index, Genotype, GenotypeEdge, GenotypeMeta, EDGES, INPUTS, NODES};
use crate::nn::{BatchNorm, Mode, Projection};
use crate::ops::{build_all, build_op, discretize_edge, mixed_forward, OpBlock, OpKind};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Default channel divisor `M` applied by the input projections.
pub const REDUCTION: usize = 3;

/// Inner width of a cell whose `I_{k-1}` input has `c_in` channels, with the
/// default divisor.
pub fn inner_width(c_in: usize) -> usize {
    c_in / REDUCTION
}

/// Architecture parameters: one α vector of length 9 per edge.
#[derive(Clone, Debug)]
pub struct CellArch<S> {
    store: ParamStore<S>,
    edges: Vec<ParamId>,
}

impl<S: Scalar> CellArch<S> {
    /// α drawn from `N(0, std^2)`.
    pub fn random<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let edges = (0..EDGES)
            .map(|e| store.add(format!("alpha.edge{e}"), Tensor::random_normal(Shape::vector(OpKind::COUNT), std, rng)))
            .collect();
        CellArch { store, edges }
    }

    pub fn from_values(values: &[Vec<S>]) -> Result<Self> {
        if values.len() != EDGES {
            return Err(Error::config(format!("arch has {} edges, expected {EDGES}", values.len())));
        }
        let mut store = ParamStore::new();
        let mut edges = Vec::with_capacity(EDGES);
        for (e, v) in values.iter().enumerate() {
            if v.len() != OpKind::COUNT {
                return Err(Error::config(format!(
                    "edge {e} has {} weights, expected {}",
                    v.len(),
                    OpKind::COUNT
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("edge {e} has a non-finite weight")));
            }
            edges.push(store.add(format!("alpha.edge{e}"), Tensor::vector(v)));
        }
        Ok(CellArch { store, edges })
    }

    /// A saturated arch whose derived genotype is `g`: chosen ops get `+big`,
    /// every other edge is dominated by Zero.
    pub fn saturated(g: &Genotype, big: S) -> Self {
        let mut values = vec![vec![S::zero(); OpKind::COUNT]; EDGES];
        for v in values.iter_mut() {
            v[OpKind::Zero.index()] = big;
        }
        for (j, e) in g.edges() {
            let v = &mut values[edge_index(e.pred, j)];
            v[OpKind::Zero.index()] = S::zero();
            v[e.op.index()] = big;
        }
        Self::from_values(&values).expect("saturated arch is well formed")
    }

    pub fn edge(&self, e: usize) -> &[S] {
        self.store.get(self.edges[e]).value.data()
    }

    pub fn values(&self) -> Vec<Vec<S>> {
        (0..EDGES).map(|e| self.edge(e).to_vec()).collect()
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Graph leaves for every edge's α, in edge order.
    pub fn vars(&self, g: &mut Graph<S>) -> Result<Vec<Var>> {
        self.edges.iter().map(|&id| g.param(self.store.get(id))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|p| p.value.is_finite())
    }

    /// `{"version": "nas-tc/1", "edges": [[9 floats] x 14]}`.
    pub fn to_json(&self) -> Value {
        let edges: Vec<Vec<f64>> = self.values().iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect();
        json!({"version": crate::genotype::SCHEMA_VERSION, "edges": edges})
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        match v.get("version").and_then(Value::as_str) {
            Some(crate::genotype::SCHEMA_VERSION) => {}
            _ => return Err(Error::schema("/version", "missing or unsupported schema version")),
        }
        let edges = v
            .get("edges")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::schema("/edges", "expected an array"))?;
        if edges.len() != EDGES {
            return Err(Error::schema("/edges", format!("expected {EDGES} edges, found {}", edges.len())));
        }
        let mut values = Vec::with_capacity(EDGES);
        for (e, row) in edges.iter().enumerate() {
            let row = row
                .as_array()
                .filter(|r| r.len() == OpKind::COUNT)
                .ok_or_else(|| Error::schema(format!("/edges/{e}"), format!("expected {} numbers", OpKind::COUNT)))?;
            let mut out = Vec::with_capacity(OpKind::COUNT);
            for (i, x) in row.iter().enumerate() {
                let x = x
                    .as_f64()
                    .ok_or_else(|| Error::schema(format!("/edges/{e}/{i}"), "expected a number"))?;
                out.push(S::of(x));
            }
            values.push(out);
        }
        Self::from_values(&values)
    }

    pub fn derive_genotype(&self) -> Genotype {
        derive_genotype(&self.values())
    }
}

/// Keeps, for every node, the two strongest incoming edges with their argmax
/// non-Zero ops. Strength ties go to the lower predecessor index.
pub fn derive_genotype<S: Scalar>(alpha: &[Vec<S>]) -> Genotype {
    assert_eq!(alpha.len(), EDGES, "arch must have {EDGES} edges");
    let mut nodes = [[GenotypeEdge::new(0, OpKind::Identity); 2]; NODES];
    for (j, node) in nodes.iter_mut().enumerate() {
        let mut cand: Vec<(usize, OpKind, S)> = (0..INPUTS + j)
            .map(|i| {
                let (op, w) = discretize_edge(&alpha[edge_index(i, j)]);
                (i, op, w)
            })
            .collect();
        // stable sort keeps the lower predecessor first on equal strength
        cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        node[0] = GenotypeEdge::new(cand[0].0, cand[0].1);
        node[1] = GenotypeEdge::new(cand[1].0, cand[1].1);
        node.sort_by_key(|e| e.pred);
    }
    Genotype {
        nodes,
        meta: GenotypeMeta::default(),
    }
}

fn check_inputs<S: Scalar>(g: &Graph<S>, s0: Var, s1: Var) -> Result<()> {
    let (a, b) = (g.shape(s0), g.shape(s1));
    if (a.n, a.t, a.h, a.w) != (b.n, b.t, b.h, b.w) {
        return Err(Error::config(format!("cell inputs disagree: {a} vs {b}")));
    }
    Ok(())
}

/// Relaxed cell used during search. α lives in a separate [`CellArch`].
#[derive(Clone, Debug)]
pub struct RelaxedCell<S> {
    pre0: Projection<S>,
    pre1: Projection<S>,
    edges: Vec<Vec<OpBlock<S>>>,
    width: usize,
    name: String,
}

impl<S: Scalar> RelaxedCell<S> {
    /// `c_prev2`, `c_prev1`: channel counts of `I_{k-2}` and `I_{k-1}`;
    /// both are projected to `width` channels.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_prev2: usize,
        c_prev1: usize,
        width: usize,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::config("cell inner width must be at least 1"));
        }
        let pre0 = Projection::new(store, &format!("{name}.pre0"), c_prev2, width, affine, rng);
        let pre1 = Projection::new(store, &format!("{name}.pre1"), c_prev1, width, affine, rng);
        let edges = (0..EDGES)
            .map(|e| build_all(width, affine, store, &format!("{name}.edge{e}"), rng))
            .collect::<Result<_>>()?;
        Ok(RelaxedCell {
            pre0,
            pre1,
            edges,
            width,
            name: name.to_string(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn out_channels(&self) -> usize {
        NODES * self.width
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        alpha: &[Var],
        s0: Var,
        s1: Var,
        mode: Mode,
    ) -> Result<Var> {
        check_inputs(g, s0, s1)?;
        if alpha.len() != EDGES {
            return Err(Error::config(format!("relaxed cell needs {EDGES} alpha vars, got {}", alpha.len())));
        }
        let mut states = vec![self.pre0.forward(g, store, s0, mode)?, self.pre1.forward(g, store, s1, mode)?];
        for j in 0..NODES {
            let mut terms = Vec::with_capacity(INPUTS + j);
            for (i, &h) in states.iter().enumerate() {
                let e = edge_index(i, j);
                terms.push(mixed_forward(g, store, h, alpha[e], &mut self.edges[e], mode)?);
            }
            states.push(g.add_n(&terms)?);
        }
        g.concat_channels(&states[INPUTS..])
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        let mut out = vec![self.pre0.batch_norm(), self.pre1.batch_norm()];
        for edge in &self.edges {
            for op in edge {
                out.extend(op.batch_norms());
            }
        }
        out
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        let mut out = vec![self.pre0.batch_norm_mut(), self.pre1.batch_norm_mut()];
        for edge in &mut self.edges {
            for op in edge {
                out.extend(op.batch_norms_mut());
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Deployment cell: each node sums exactly two ops.
#[derive(Clone, Debug)]
pub struct DiscreteCell<S> {
    pre0: Projection<S>,
    pre1: Projection<S>,
    genotype: Genotype,
    ops: Vec<[OpBlock<S>; 2]>,
    width: usize,
}

impl<S: Scalar> DiscreteCell<S> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        genotype: &Genotype,
        c_prev2: usize,
        c_prev1: usize,
        width: usize,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.validate()?;
        if width == 0 {
            return Err(Error::config("cell inner width must be at least 1"));
        }
        let pre0 = Projection::new(store, &format!("{name}.pre0"), c_prev2, width, affine, rng);
        let pre1 = Projection::new(store, &format!("{name}.pre1"), c_prev1, width, affine, rng);
        let mut ops = Vec::with_capacity(NODES);
        for (j, node) in genotype.nodes.iter().enumerate() {
            let mut build = |k: usize| {
                let e = node[k];
                build_op(e.op.spec(), width, affine, store, &format!("{name}.node{j}.{k}.{}", e.op), rng)
            };
            ops.push([build(0)?, build(1)?]);
        }
        Ok(DiscreteCell {
            pre0,
            pre1,
            genotype: genotype.clone(),
            ops,
            width,
        })
    }

    /// Copies the projections and the chosen ops' weights out of a relaxed
    /// cell into `dst`.
    pub fn from_relaxed(
        relaxed: &RelaxedCell<S>,
        src: &ParamStore<S>,
        genotype: &Genotype,
        dst: &mut ParamStore<S>,
        name: &str,
    ) -> Result<Self> {
        genotype.validate()?;
        let pre0 = relaxed.pre0.transplant(src, dst, &format!("{name}.pre0"));
        let pre1 = relaxed.pre1.transplant(src, dst, &format!("{name}.pre1"));
        let mut ops = Vec::with_capacity(NODES);
        for (j, node) in genotype.nodes.iter().enumerate() {
            let take = |k: usize, dst: &mut ParamStore<S>| {
                let e = node[k];
                relaxed.edges[edge_index(e.pred, j)][e.op.index()].transplant(
                    src,
                    dst,
                    &format!("{name}.node{j}.{k}.{}", e.op),
                )
            };
            let a = take(0, dst);
            let b = take(1, dst);
            ops.push([a, b]);
        }
        Ok(DiscreteCell {
            pre0,
            pre1,
            genotype: genotype.clone(),
            ops,
            width: relaxed.width,
        })
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn out_channels(&self) -> usize {
        NODES * self.width
    }

    pub fn forward(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, s0: Var, s1: Var, mode: Mode) -> Result<Var> {
        check_inputs(g, s0, s1)?;
        let mut states = vec![self.pre0.forward(g, store, s0, mode)?, self.pre1.forward(g, store, s1, mode)?];
        for j in 0..NODES {
            let node = self.genotype.nodes[j];
            let a = self.ops[j][0].forward(g, store, states[node[0].pred], mode)?;
            let b = self.ops[j][1].forward(g, store, states[node[1].pred], mode)?;
            states.push(g.add_n(&[a, b])?);
        }
        g.concat_channels(&states[INPUTS..])
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        let mut out = vec![self.pre0.batch_norm(), self.pre1.batch_norm()];
        for pair in &self.ops {
            for op in pair {
                out.extend(op.batch_norms());
            }
        }
        out
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        let mut out = vec![self.pre0.batch_norm_mut(), self.pre1.batch_norm_mut()];
        for pair in &mut self.ops {
            for op in pair {
                out.extend(op.batch_norms_mut());
            }
        }
        out
    }
}

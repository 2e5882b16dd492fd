//! Discretized cells and their JSON representation (schema `nas-tc/1`).
//!
//! ```json
//! {"version": "nas-tc/1",
//!  "nodes": [[{"pred": 0, "op": "sep_conv_k3"}, {"pred": 1, "op": "dil_conv_k3"}], ...],
//!  "meta": {"seed": 7, "epoch": 10, "dataset": "synth"}}
//! ```
//!
//! Predecessor indices: 0 is `I_{k-2}`, 1 is `I_{k-1}`, `2 + j` is node `B_j`.

use rand::seq::index::sample;
use rand::Rng;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::ops::OpKind;

pub const SCHEMA_VERSION: &str = "nas-tc/1";
/// Intermediate nodes per cell.
pub const NODES: usize = 4;
/// Cell inputs (`I_{k-2}`, `I_{k-1}`).
pub const INPUTS: usize = 2;
/// Directed edges of the relaxed cell: 2 + 3 + 4 + 5.
pub const EDGES: usize = INPUTS * NODES + NODES * (NODES - 1) / 2;

/// Index of edge `pred -> B_node` in the relaxed cell's edge list.
pub fn edge_index(pred: usize, node: usize) -> usize {
    debug_assert!(pred < INPUTS + node);
    INPUTS * node + node * node.saturating_sub(1) / 2 + pred
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GenotypeEdge {
    pub pred: usize,
    pub op: OpKind,
}

impl GenotypeEdge {
    pub fn new(pred: usize, op: OpKind) -> Self {
        GenotypeEdge { pred, op }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenotypeMeta {
    pub seed: Option<u64>,
    pub epoch: Option<u64>,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub nodes: [[GenotypeEdge; 2]; NODES],
    pub meta: GenotypeMeta,
}

impl Genotype {
    pub fn new(nodes: [[GenotypeEdge; 2]; NODES]) -> Result<Self> {
        let g = Genotype {
            nodes,
            meta: GenotypeMeta::default(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (j, node) in self.nodes.iter().enumerate() {
            for (e, edge) in node.iter().enumerate() {
                if edge.pred >= INPUTS + j {
                    return Err(Error::schema(
                        format!("/nodes/{j}/{e}/pred"),
                        format!("predecessor {} is not earlier than node {j}", edge.pred),
                    ));
                }
                if edge.op == OpKind::Zero {
                    return Err(Error::schema(
                        format!("/nodes/{j}/{e}/op"),
                        "\"zero\" is not a valid genotype op",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, GenotypeEdge)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(j, n)| n.iter().map(move |e| (j, *e)))
    }

    /// Number of unit operations executed to produce each node when every
    /// reused node is expanded in place (inputs count zero). A parameter-free
    /// edge still counts as one operation.
    pub fn expanded_unit_ops(&self) -> [usize; NODES] {
        let mut cost = [0usize; INPUTS + NODES];
        for j in 0..NODES {
            cost[INPUTS + j] = self.nodes[j].iter().map(|e| 1 + cost[e.pred]).sum();
        }
        let mut out = [0; NODES];
        out.copy_from_slice(&cost[INPUTS..]);
        out
    }

    pub fn to_json(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                Value::Array(
                    n.iter()
                        .map(|e| json!({"pred": e.pred, "op": e.op.name()}))
                        .collect(),
                )
            })
            .collect();
        let mut meta = Map::new();
        if let Some(s) = self.meta.seed {
            meta.insert("seed".into(), json!(s));
        }
        if let Some(e) = self.meta.epoch {
            meta.insert("epoch".into(), json!(e));
        }
        if let Some(d) = &self.meta.dataset {
            meta.insert("dataset".into(), json!(d));
        }
        json!({"version": SCHEMA_VERSION, "nodes": nodes, "meta": meta})
    }

    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("genotype JSON is always serializable")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::schema("", format!("invalid JSON: {e}")))?;
        Self::from_json(&v)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::schema("", "expected an object"))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "version" | "nodes" | "meta") {
                return Err(Error::schema(format!("/{key}"), "unknown field"));
            }
        }
        match obj.get("version") {
            None => return Err(Error::schema("/version", "missing schema version")),
            Some(Value::String(s)) if s == SCHEMA_VERSION => {}
            Some(other) => {
                return Err(Error::schema(
                    "/version",
                    format!("unsupported version {other}, expected {SCHEMA_VERSION:?}"),
                ))
            }
        }
        let nodes = obj
            .get("nodes")
            .ok_or_else(|| Error::schema("/nodes", "missing field"))?
            .as_array()
            .ok_or_else(|| Error::schema("/nodes", "expected an array"))?;
        if nodes.len() != NODES {
            return Err(Error::schema(
                "/nodes",
                format!("expected {NODES} nodes, found {}", nodes.len()),
            ));
        }
        let mut parsed = [[GenotypeEdge::new(0, OpKind::Identity); 2]; NODES];
        for (j, node) in nodes.iter().enumerate() {
            let edges = node
                .as_array()
                .ok_or_else(|| Error::schema(format!("/nodes/{j}"), "expected an array"))?;
            if edges.len() != 2 {
                return Err(Error::schema(
                    format!("/nodes/{j}"),
                    format!("expected 2 edges, found {}", edges.len()),
                ));
            }
            for (e, edge) in edges.iter().enumerate() {
                let at = format!("/nodes/{j}/{e}");
                let eo = edge
                    .as_object()
                    .ok_or_else(|| Error::schema(at.clone(), "expected an object"))?;
                for key in eo.keys() {
                    if key != "pred" && key != "op" {
                        return Err(Error::schema(format!("{at}/{key}"), "unknown field"));
                    }
                }
                let pred = eo
                    .get("pred")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::schema(format!("{at}/pred"), "expected a non-negative integer"))?
                    as usize;
                let op_name = eo
                    .get("op")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::schema(format!("{at}/op"), "expected an op name"))?;
                let op = op_name
                    .parse::<OpKind>()
                    .map_err(|_| Error::schema(format!("{at}/op"), format!("unknown op name {op_name:?}")))?;
                parsed[j][e] = GenotypeEdge { pred, op };
            }
        }
        let meta = match obj.get("meta") {
            None | Some(Value::Null) => GenotypeMeta::default(),
            Some(Value::Object(m)) => {
                let mut meta = GenotypeMeta::default();
                for (k, val) in m {
                    let at = format!("/meta/{k}");
                    match k.as_str() {
                        "seed" => meta.seed = Some(val.as_u64().ok_or_else(|| Error::schema(at, "expected an integer"))?),
                        "epoch" => meta.epoch = Some(val.as_u64().ok_or_else(|| Error::schema(at, "expected an integer"))?),
                        "dataset" => {
                            meta.dataset = Some(val.as_str().ok_or_else(|| Error::schema(at, "expected a string"))?.to_string())
                        }
                        _ => return Err(Error::schema(at, "unknown field")),
                    }
                }
                meta
            }
            Some(_) => return Err(Error::schema("/meta", "expected an object")),
        };
        let g = Genotype { nodes: parsed, meta };
        g.validate()?;
        Ok(g)
    }

    /// Uniformly random genotype: two distinct predecessors per node, each
    /// with a uniformly chosen non-Zero op.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let choices: Vec<OpKind> = OpKind::ALL.into_iter().filter(|&k| k != OpKind::Zero).collect();
        let mut nodes = [[GenotypeEdge::new(0, OpKind::Identity); 2]; NODES];
        for (j, node) in nodes.iter_mut().enumerate() {
            let mut preds = sample(rng, INPUTS + j, 2).into_vec();
            preds.sort_unstable();
            for (slot, pred) in node.iter_mut().zip(preds) {
                *slot = GenotypeEdge::new(pred, choices[rng.random_range(0..choices.len())]);
            }
        }
        Genotype {
            nodes,
            meta: GenotypeMeta::default(),
        }
    }

    /// A fixed, hand-written genotype used as the default deployment cell and
    /// by the parameter audit. It is not a searched result.
    pub fn fixture() -> Self {
        use OpKind::*;
        let e = GenotypeEdge::new;
        Genotype {
            nodes: [
                [e(0, SepConvK3), e(1, DilConvK3)],
                [e(1, SepConvK5), e(2, MaxPool2)],
                [e(2, DilConvK5), e(3, SepConvK7)],
                [e(3, SepConvK3), e(4, Identity)],
            ],
            meta: GenotypeMeta {
                dataset: Some("fixture".into()),
                ..GenotypeMeta::default()
            },
        }
    }
}

impl serde::Serialize for Genotype {
    fn serialize<Ser: serde::Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        Genotype::from_json(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_indices_are_dense() {
        let mut seen = vec![];
        for j in 0..NODES {
            for i in 0..INPUTS + j {
                seen.push(edge_index(i, j));
            }
        }
        assert_eq!(seen, (0..EDGES).collect::<Vec<_>>());
        assert_eq!(EDGES, 14);
    }

    #[test]
    fn random_genotypes_are_valid_and_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut g = Genotype::random(&mut rng);
            g.meta.seed = Some(rng.random());
            g.validate().unwrap();
            assert_eq!(Genotype::parse(&g.serialize()).unwrap(), g);
        }
    }

    #[test]
    fn fixture_round_trips() {
        let g = Genotype::fixture();
        assert_eq!(Genotype::parse(&g.serialize()).unwrap(), g);
    }

    #[test]
    fn unknown_op_names_field() {
        let mut v = Genotype::fixture().to_json();
        v["nodes"][2][1]["op"] = json!("conv9");
        let err = Genotype::from_json(&v).unwrap_err().to_string();
        assert!(err.contains("/nodes/2/1/op"), "{err}");
        assert!(err.contains("conv9"), "{err}");
    }

    #[test]
    fn forward_reference_rejected() {
        let mut v = Genotype::fixture().to_json();
        v["nodes"][1][0]["pred"] = json!(3);
        let err = Genotype::from_json(&v).unwrap_err().to_string();
        assert!(err.contains("/nodes/1/0/pred"), "{err}");
    }

    #[test]
    fn missing_version_rejected() {
        let mut v = Genotype::fixture().to_json();
        v.as_object_mut().unwrap().remove("version");
        let err = Genotype::from_json(&v).unwrap_err().to_string();
        assert!(err.contains("/version"), "{err}");
    }

    #[test]
    fn zero_op_rejected() {
        let mut v = Genotype::fixture().to_json();
        v["nodes"][0][0]["op"] = json!("zero");
        assert!(Genotype::from_json(&v).is_err());
    }

    #[test]
    fn chained_genotype_unit_op_counts() {
        use OpKind::*;
        let e = GenotypeEdge::new;
        // each node reuses the previous node on both edges
        let g = Genotype::new([
            [e(0, SepConvK3), e(1, SepConvK3)],
            [e(2, SepConvK3), e(1, Identity)],
            [e(3, SepConvK3), e(1, Identity)],
            [e(4, SepConvK3), e(1, Identity)],
        ])
        .unwrap();
        let ops = g.expanded_unit_ops();
        assert_eq!(ops, [2, 4, 6, 8]);
        assert!(Genotype::fixture().expanded_unit_ops().windows(2).all(|w| w[0] <= w[1]));
    }
}

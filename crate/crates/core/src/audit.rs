//! Analytic parameter accounting for NAS-TC stacks and for a reference
//! Timeception temporal-conv module stack.
//!
//! Cost formulas (no convolution biases): depthwise `C * k`, pointwise
//! `C_in * C_out`, BatchNorm `2 * C`, dense layer `C_in * C_out + C_out`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::network::{layer_plan, NetworkConfig};
use crate::ops::OpKind;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub struct CostModel;

impl CostModel {
    pub const fn depthwise(c: usize, k: usize) -> usize {
        c * k
    }

    pub const fn pointwise(c_in: usize, c_out: usize) -> usize {
        c_in * c_out
    }

    pub const fn batch_norm(c: usize) -> usize {
        2 * c
    }

    pub const fn dense(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + c_out
    }

    /// Parameters of one candidate op at width `c`.
    pub fn op(kind: OpKind, c: usize) -> usize {
        let k = kind.spec().kernel.unwrap_or(0);
        kind.units() * (Self::depthwise(c, k) + Self::pointwise(c, c) + Self::batch_norm(c))
    }

    /// ReLU -> pointwise -> BatchNorm projection.
    pub const fn projection(c_in: usize, c_out: usize) -> usize {
        Self::pointwise(c_in, c_out) + Self::batch_norm(c_out)
    }
}

/// One NAS-TC layer. The cell is shared by all `groups`, so its weights are
/// counted once.
pub fn count_nas_tc_layer(c_prev2: usize, c_prev1: usize, groups: usize, reduction: usize, genotype: &Genotype) -> usize {
    let (g2, g1) = (c_prev2 / groups, c_prev1 / groups);
    let c = g1 / reduction;
    let ops: usize = genotype.edges().map(|(_, e)| CostModel::op(e.op, c)).sum();
    CostModel::projection(g2, c) + CostModel::projection(g1, c) + ops
}

/// Hidden dense layer plus output layer.
pub fn count_classifier(c_in: usize, hidden: usize, classes: usize) -> usize {
    CostModel::dense(c_in, hidden) + CostModel::dense(hidden, classes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NasTcCount {
    pub layers: Vec<usize>,
    pub classifier: usize,
}

impl NasTcCount {
    pub fn layers_total(&self) -> usize {
        self.layers.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.layers_total() + self.classifier
    }
}

/// Counts for `cfg` as given; `cfg.layers` may be 0 (classifier only).
pub fn count_nas_tc(cfg: &NetworkConfig, genotype: &Genotype) -> Result<NasTcCount> {
    let plan = layer_plan(cfg.channels, cfg.timesteps.max(1 << cfg.layers), cfg.layers, cfg.groups, cfg.reduction)?;
    let layers = plan
        .iter()
        .map(|p| count_nas_tc_layer(p.c_prev2, p.c_prev1, cfg.groups, cfg.reduction, genotype))
        .collect();
    let c_out = plan.last().map_or(cfg.channels, |p| p.out_channels);
    Ok(NasTcCount {
        layers,
        classifier: count_classifier(c_out, cfg.hidden, cfg.classes),
    })
}

/// Reference temporal-conv module: per channel group, five branches each
/// starting with a reducing pointwise conv to `b = floor(g * expansion / 5)`
/// channels; three add a temporal conv (kernels 3, 5, 7), one a temporal
/// max-pool; every branch ends in BatchNorm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeceptionConfig {
    pub groups: usize,
    pub expansion: f64,
    pub kernels: [usize; 3],
    /// Temporal convs are per-channel (`b * k`); otherwise dense over the
    /// branch width (`b * b * k`).
    pub depthwise: bool,
}

impl Default for TimeceptionConfig {
    fn default() -> Self {
        TimeceptionConfig {
            groups: 8,
            expansion: 1.25,
            kernels: [3, 5, 7],
            depthwise: true,
        }
    }
}

const BRANCHES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BranchCount {
    pub name: String,
    pub pointwise: usize,
    pub temporal: usize,
    pub batch_norm: usize,
}

impl BranchCount {
    pub fn total(&self) -> usize {
        self.pointwise + self.temporal + self.batch_norm
    }
}

/// One layer, all groups included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimeceptionLayerCount {
    pub branches: Vec<BranchCount>,
    pub branch_width: usize,
    pub out_channels: usize,
}

impl TimeceptionLayerCount {
    pub fn total(&self) -> usize {
        self.branches.iter().map(BranchCount::total).sum()
    }

    /// Fraction of branch parameters held by the pointwise convs.
    pub fn pointwise_share(&self) -> f64 {
        let pw: usize = self.branches.iter().map(|b| b.pointwise).sum();
        pw as f64 / self.total() as f64
    }
}

impl TimeceptionConfig {
    fn branch_width(&self, c_in: usize) -> Result<(usize, usize)> {
        if self.groups == 0 || !c_in.is_multiple_of(self.groups) {
            return Err(Error::config(format!("{c_in} channels do not split into {} groups", self.groups)));
        }
        let g = c_in / self.groups;
        let b = (g as f64 * self.expansion / BRANCHES as f64).floor() as usize;
        if b == 0 {
            return Err(Error::config(format!("group width {g} leaves empty branches")));
        }
        Ok((g, b))
    }

    fn temporal_cost(&self, b: usize, k: usize) -> usize {
        if self.depthwise {
            CostModel::depthwise(b, k)
        } else {
            b * b * k
        }
    }

    /// Output channels of a layer fed `c_in` channels.
    pub fn out_channels(&self, c_in: usize) -> Result<usize> {
        let (_, b) = self.branch_width(c_in)?;
        Ok(b * BRANCHES * self.groups)
    }
}

pub fn count_timeception_layer(c_in: usize, cfg: &TimeceptionConfig) -> Result<TimeceptionLayerCount> {
    let (g, b) = cfg.branch_width(c_in)?;
    let n = cfg.groups;
    let mut branches: Vec<BranchCount> = cfg
        .kernels
        .iter()
        .map(|&k| BranchCount {
            name: format!("temporal_conv_k{k}"),
            pointwise: n * CostModel::pointwise(g, b),
            temporal: n * cfg.temporal_cost(b, k),
            batch_norm: n * CostModel::batch_norm(b),
        })
        .collect();
    for name in ["max_pool", "pointwise_only"] {
        branches.push(BranchCount {
            name: name.into(),
            pointwise: n * CostModel::pointwise(g, b),
            temporal: 0,
            batch_norm: n * CostModel::batch_norm(b),
        });
    }
    Ok(TimeceptionLayerCount {
        branches,
        branch_width: b,
        out_channels: b * BRANCHES * n,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimeceptionCount {
    pub layers: Vec<usize>,
    pub classifier: usize,
}

impl TimeceptionCount {
    pub fn layers_total(&self) -> usize {
        self.layers.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.layers_total() + self.classifier
    }
}

/// A Timeception stack of `layers` layers over `channels` inputs with the
/// same classifier head as the NAS-TC network.
pub fn count_timeception(channels: usize, layers: usize, hidden: usize, classes: usize, cfg: &TimeceptionConfig) -> Result<TimeceptionCount> {
    let mut c = channels;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let l = count_timeception_layer(c, cfg)?;
        out.push(l.total());
        c = l.out_channels;
    }
    Ok(TimeceptionCount {
        layers: out,
        classifier: count_classifier(c, hidden, classes),
    })
}

/// Instantiates zero-valued parameter tensors of a Timeception layer with
/// the shapes the cost formulas assume.
pub fn timeception_layer_store<S: Scalar>(c_in: usize, cfg: &TimeceptionConfig) -> Result<ParamStore<S>> {
    let (g, b) = cfg.branch_width(c_in)?;
    let mut store = ParamStore::new();
    for grp in 0..cfg.groups {
        let mut branch = |name: &str, k: Option<usize>| {
            let p = format!("group{grp}.{name}");
            store.add(format!("{p}.reduce"), Tensor::zeros(Shape::matrix(b, g)));
            if let Some(k) = k {
                let shape = if cfg.depthwise { Shape::new(b, 1, k, 1, 1) } else { Shape::new(b, b, k, 1, 1) };
                store.add(format!("{p}.temporal"), Tensor::zeros(shape));
            }
            store.add(format!("{p}.bn.gamma"), Tensor::zeros(Shape::vector(b)));
            store.add(format!("{p}.bn.beta"), Tensor::zeros(Shape::vector(b)));
        };
        for &k in &cfg.kernels {
            branch(&format!("temporal_conv_k{k}"), Some(k));
        }
        branch("max_pool", None);
        branch("pointwise_only", None);
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub layers: usize,
    /// Totals include the classifier, as in the layer-count curve.
    pub nas_tc: usize,
    pub timeception: usize,
    pub nas_tc_layers_only: usize,
    pub timeception_layers_only: usize,
    /// `1 - nas_tc / timeception` on totals.
    pub reduction: f64,
    /// Same ratio with the classifier removed from both sides.
    pub reduction_layers_only: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub network: NetworkConfig,
    pub timeception: TimeceptionConfig,
    pub genotype: serde_json::Value,
    pub assumptions: Vec<String>,
    pub classifier: usize,
    pub rows: Vec<AuditRow>,
    /// Per-branch breakdown of the first Timeception layer.
    pub first_layer_branches: Vec<BranchCount>,
    pub pointwise_share_depthwise: f64,
    pub pointwise_share_dense: f64,
}

pub fn audit(l_max: usize, network: &NetworkConfig, genotype: &Genotype, tm: &TimeceptionConfig) -> Result<AuditReport> {
    let mut rows = Vec::with_capacity(l_max + 1);
    for l in 0..=l_max {
        let cfg = NetworkConfig {
            layers: l,
            ..network.clone()
        };
        let nas = count_nas_tc(&cfg, genotype)?;
        let tc = count_timeception(network.channels, l, network.hidden, network.classes, tm)?;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 1.0 - a as f64 / b as f64 };
        rows.push(AuditRow {
            layers: l,
            nas_tc: nas.total(),
            timeception: tc.total(),
            nas_tc_layers_only: nas.layers_total(),
            timeception_layers_only: tc.layers_total(),
            reduction: ratio(nas.total(), tc.total()),
            reduction_layers_only: ratio(nas.layers_total(), tc.layers_total()),
        });
    }
    let first_dw = count_timeception_layer(network.channels, &TimeceptionConfig { depthwise: true, ..tm.clone() })?;
    let first_dense = count_timeception_layer(network.channels, &TimeceptionConfig { depthwise: false, ..tm.clone() })?;
    let assumptions = vec![
        format!(
            "classifier: global average pool -> dense({}) -> ReLU -> dropout -> dense({}), biases on both",
            network.hidden, network.classes
        ),
        format!("NAS-TC: {} groups share one cell; projections to floor((C/N)/{})", network.groups, network.reduction),
        "NAS-TC: layer k projects the previous layer input and its own input; first layer uses the features twice".into(),
        "convolutions have no bias; BatchNorm counts gamma and beta".into(),
        format!(
            "Timeception: {} groups, 5 branches of width floor(g*{}/5), temporal kernels {:?}, {} temporal convs",
            tm.groups,
            tm.expansion,
            tm.kernels,
            if tm.depthwise { "depthwise" } else { "dense" }
        ),
        "pointwise share reported for depthwise and dense temporal kernels at the input width".into(),
        "totals include the classifier; the layers-only columns exclude it".into(),
    ];
    Ok(AuditReport {
        network: network.clone(),
        timeception: tm.clone(),
        genotype: genotype.to_json(),
        assumptions,
        classifier: rows[0].nas_tc,
        rows,
        pointwise_share_depthwise: first_dw.pointwise_share(),
        pointwise_share_dense: first_dense.pointwise_share(),
        first_layer_branches: first_dw.branches,
    })
}

impl AuditReport {
    pub const CSV_HEADER: &'static str = "layers,nas_tc_params,timeception_params";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.layers, r.nas_tc, r.timeception);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for a in &self.assumptions {
            let _ = writeln!(s, "# {a}");
        }
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>12} {:>9} {:>12} {:>12} {:>9}",
            "layers", "nas_tc", "timeception", "reduction", "nas_tc_tc", "tm_tc", "red_tc"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>12} {:>12} {:>8.1}% {:>12} {:>12} {:>8.1}%",
                r.layers,
                r.nas_tc,
                r.timeception,
                100.0 * r.reduction,
                r.nas_tc_layers_only,
                r.timeception_layers_only,
                100.0 * r.reduction_layers_only
            );
        }
        let _ = writeln!(
            s,
            "pointwise share of Timeception branches: {:.1}% (depthwise temporal), {:.1}% (dense temporal)",
            100.0 * self.pointwise_share_depthwise,
            100.0 * self.pointwise_share_dense
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::GenotypeEdge;
    use crate::network::Network;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_free_genotype_costs_projections_only() {
        use OpKind::*;
        let e = GenotypeEdge::new;
        let g = Genotype::new([
            [e(0, Identity), e(1, MaxPool2)],
            [e(0, AvgPool2), e(2, Identity)],
            [e(1, MaxPool2), e(3, Identity)],
            [e(2, AvgPool2), e(4, MaxPool2)],
        ])
        .unwrap();
        // groups of 128 -> width 42
        assert_eq!(count_nas_tc_layer(1024, 1024, 8, 3, &g), 2 * (128 * 42 + 84));
    }

    #[test]
    fn classifier_head() {
        assert_eq!(count_classifier(1024, 512, 157), 1024 * 512 + 512 + 512 * 157 + 157);
    }

    #[test]
    fn timeception_first_layer_hand_count() {
        // g = 128, b = 32: 5 reductions 128x32, depthwise 32*(3+5+7), 5 BN of 32
        let l = count_timeception_layer(1024, &TimeceptionConfig::default()).unwrap();
        assert_eq!(l.total(), 8 * (5 * 128 * 32 + 32 * 15 + 5 * 64));
        assert_eq!(l.out_channels, 1280);
    }

    #[test]
    fn timeception_beats_nas_tc_layer_over_widths() {
        let g = Genotype::fixture();
        let tm = TimeceptionConfig::default();
        for c in (256..=2048).step_by(64) {
            let nas = count_nas_tc_layer(c, c, 8, 3, &g);
            let tc = count_timeception_layer(c, &tm).unwrap().total();
            assert!(tc > nas, "C={c}: {tc} <= {nas}");
        }
    }

    fn small_cfg(c: usize, layers: usize, groups: usize) -> NetworkConfig {
        NetworkConfig {
            channels: c,
            timesteps: 1 << layers,
            height: 1,
            width: 1,
            layers,
            groups,
            hidden: 16,
            classes: 5,
            ..NetworkConfig::default()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn analytic_matches_instantiated(seed in any::<u64>(), groups in 1usize..4, per in 3usize..12, layers in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geno = Genotype::random(&mut rng);
            let cfg = small_cfg(groups * per, layers, groups);
            prop_assume!(cfg.validate().is_ok());
            let net = Network::<f32>::discrete(&cfg, &geno, &mut rng).unwrap();
            let count = count_nas_tc(&cfg, &geno).unwrap();
            let (layers_bf, head_bf) = net.parameter_breakdown();
            prop_assert_eq!(&count.layers, &layers_bf);
            prop_assert_eq!(count.classifier, head_bf);
        }

        #[test]
        fn timeception_analytic_matches_instantiated(groups in 1usize..5, g in 4usize..40, dense in any::<bool>()) {
            let cfg = TimeceptionConfig { groups, depthwise: !dense, ..TimeceptionConfig::default() };
            let c = groups * g;
            let store = timeception_layer_store::<f32>(c, &cfg).unwrap();
            prop_assert_eq!(store.num_scalars(), count_timeception_layer(c, &cfg).unwrap().total());
        }

        #[test]
        fn counts_monotone_in_channels(c in 1usize..64) {
            let g = Genotype::fixture();
            let a = count_nas_tc_layer(24 * c, 24 * c, 8, 3, &g);
            let b = count_nas_tc_layer(24 * (c + 1), 24 * (c + 1), 8, 3, &g);
            prop_assert!(b > a);
        }
    }

    #[test]
    fn csv_layout() {
        let r = audit(2, &NetworkConfig::default(), &Genotype::fixture(), &TimeceptionConfig::default()).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layers,nas_tc_params,timeception_params");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,605341,605341"));
    }
}

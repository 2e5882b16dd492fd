//! Fixed-genotype training and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::{accuracy, argmax, mean_average_precision, one_hot_labels};
use crate::network::{Network, NetworkConfig, Task};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep a checkpoint every this many epochs; must divide `epochs`.
    /// `None` keeps only the final weights.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 18,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::schema("/batch_size", "must be at least 1"));
        }
        for (path, v) in [("/lr", self.lr), ("/weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::schema(path, format!("{v} must be a finite non-negative number")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::schema("/eps", format!("{} must be positive", self.eps)));
        }
        for (path, v) in [("/beta1", self.beta1), ("/beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::schema(path, format!("{v} outside [0, 1)")));
            }
        }
        if let Some(k) = self.checkpoint_every {
            if k == 0 || !self.epochs.is_multiple_of(k) {
                return Err(Error::schema(
                    "/checkpoint_every",
                    format!("{k} does not divide {} epochs", self.epochs),
                ));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// mAP for multi-label tasks, accuracy for single-label ones.
    pub val_metric: Option<f64>,
}

/// Weights saved at a checkpoint epoch, in [`Network::named_tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor<S>)>,
}

#[derive(Debug)]
pub struct TrainOutcome<S> {
    pub network: Network<S>,
    pub history: Vec<TrainEpoch>,
}

/// A training run stopped by divergence; `checkpoint` is the last one kept.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} completed epochs: {source}", history.len())]
pub struct TrainAbort<S: std::fmt::Debug> {
    #[source]
    pub source: Error,
    pub history: Vec<TrainEpoch>,
    pub checkpoint: Option<Checkpoint<S>>,
}

/// Trains a discrete network for `genotype` with Adam. `on_checkpoint` runs
/// at every checkpoint epoch; an error from it aborts training.
pub fn train<S: Scalar>(
    genotype: &Genotype,
    data: &Dataset,
    val: Option<&Dataset>,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint<S>) -> Result<()>,
) -> Result<TrainOutcome<S>, TrainAbort<S>> {
    let mut history = Vec::new();
    let mut last: Option<Checkpoint<S>> = None;
    macro_rules! bail {
        ($e:expr) => {
            return Err(TrainAbort {
                source: $e,
                history,
                checkpoint: last,
            })
        };
    }
    if let Err(e) = cfg.validate().and_then(|_| check_data(data, net_cfg)) {
        bail!(e);
    }
    if let Some(v) = val {
        if let Err(e) = check_data(v, net_cfg) {
            bail!(e);
        }
    }
    if data.is_empty() {
        bail!(Error::config("training data is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = match Network::<S>::discrete(net_cfg, genotype, &mut rng) {
        Ok(n) => n,
        Err(e) => bail!(e),
    };
    let mut opt = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            match train_step(&mut net, &mut opt, data, chunk, &mut rng) {
                Ok(l) => sum += l * chunk.len() as f64,
                Err(e) => bail!(e),
            }
        }
        let val_metric = match val.map(|v| evaluate(&net, v, cfg.batch_size)).transpose() {
            Ok(r) => r.map(|r| r.headline()),
            Err(e) => bail!(e),
        };
        history.push(TrainEpoch {
            epoch,
            train_loss: sum / data.len() as f64,
            val_metric,
        });
        if cfg.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0) {
            let ck = Checkpoint {
                epoch,
                tensors: net.named_tensors(),
            };
            if let Err(e) = on_checkpoint(&ck) {
                bail!(e);
            }
            last = Some(ck);
        }
    }
    Ok(TrainOutcome { network: net, history })
}

fn check_data(data: &Dataset, cfg: &NetworkConfig) -> Result<()> {
    let got = (data.channels, data.timesteps, data.height, data.width, data.classes);
    let want = (cfg.channels, cfg.timesteps, cfg.height, cfg.width, cfg.classes);
    if got != want {
        return Err(Error::config(format!(
            "data has (C, T, H, W, K) = {got:?} but the network expects {want:?}"
        )));
    }
    if data.label_mode.task() != cfg.task {
        return Err(Error::config(format!(
            "data labels are {:?} but the network task is {:?}",
            data.label_mode, cfg.task
        )));
    }
    Ok(())
}

fn train_step<S: Scalar>(
    net: &mut Network<S>,
    opt: &mut Adam<S>,
    data: &Dataset,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (x, y) = data.batch::<S>(indices)?;
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let logits = net.forward(&mut g, xv, Mode::Train, rng)?;
    let loss = net.loss(&mut g, logits, &y)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let store = net.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    opt.step(store);
    if store.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("network weights diverged".into()));
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Per-class one-vs-rest counts. Multi-label predictions threshold the
/// sigmoid score at 0.5; single-label predictions take the argmax, which
/// also fills the full `matrix[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub per_class: Vec<ClassCounts>,
    pub matrix: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub samples: usize,
    pub loss: f64,
    /// `null` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub accuracy: Option<f64>,
    pub confusion: ConfusionSummary,
}

impl EvalReport {
    /// mAP for multi-label tasks, accuracy for single-label ones.
    pub fn headline(&self) -> f64 {
        self.accuracy.unwrap_or(self.map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports are always serializable")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples   {}", self.samples);
        let _ = writeln!(s, "loss      {:.6}", self.loss);
        let _ = writeln!(s, "mAP       {:.4}", self.map);
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy  {a:.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>5}  {:>8}  {:>6}  {:>6}  {:>6}  {:>6}", "class", "AP", "tp", "fp", "fn", "tn");
        for (k, (ap, c)) in self.per_class_ap.iter().zip(&self.confusion.per_class).enumerate() {
            let ap = ap.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{k:>5}  {ap:>8}  {:>6}  {:>6}  {:>6}  {:>6}", c.tp, c.fp, c.fn_, c.tn);
        }
        s
    }
}

/// Evaluation-mode loss and metrics over `data`, `batch` samples at a time.
pub fn evaluate<S: Scalar>(net: &Network<S>, data: &Dataset, batch: usize) -> Result<EvalReport> {
    check_data(data, net.config())?;
    if data.is_empty() {
        return Err(Error::config("evaluation data is empty"));
    }
    let task = net.config().task;
    let classes = data.classes;
    let all: Vec<usize> = (0..data.len()).collect();
    let frozen: &Network<S> = net;
    // batches run in parallel on private copies; results are reduced in order
    let parts = all
        .par_chunks(batch.max(1))
        .map(|chunk| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut net = frozen.clone();
            // evaluation mode draws no random numbers
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (x, y) = data.batch::<S>(chunk)?;
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let logits = net.forward(&mut g, xv, Mode::Eval, &mut rng)?;
            let loss = net.loss(&mut g, logits, &y)?;
            let s = net.scores(g.value(logits));
            Ok((
                g.value(loss).data()[0].as_f64() * chunk.len() as f64,
                s.data().chunks(classes).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss_sum = 0.0;
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(data.len());
    for (l, s) in parts {
        loss_sum += l;
        scores.extend(s);
    }
    let labels = data.label_matrix();
    let m = mean_average_precision::<f64, f64>(&scores, &labels)?;
    let (acc, predicted): (Option<f64>, Vec<Vec<bool>>) = match task {
        Task::SingleLabel => {
            let truth = one_hot_labels(&labels)?;
            let pred = scores
                .iter()
                .map(|r| {
                    let a = argmax(r);
                    (0..classes).map(|k| Some(k) == a).collect()
                })
                .collect();
            (Some(accuracy(&scores, &truth)?), pred)
        }
        Task::MultiLabel => (None, scores.iter().map(|r| r.iter().map(|&v| v >= 0.5).collect()).collect()),
    };
    let mut per_class = vec![ClassCounts::default(); classes];
    for (p, l) in predicted.iter().zip(&labels) {
        for k in 0..classes {
            let c = &mut per_class[k];
            match (p[k], l[k]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    let matrix = (task == Task::SingleLabel).then(|| {
        let mut mat = vec![vec![0; classes]; classes];
        for (p, l) in predicted.iter().zip(&labels) {
            if let (Some(t), Some(q)) = (l.iter().position(|&b| b), p.iter().position(|&b| b)) {
                mat[t][q] += 1;
            }
        }
        mat
    });
    Ok(EvalReport {
        task,
        samples: data.len(),
        loss: loss_sum / data.len() as f64,
        per_class_ap: m.per_class,
        map: m.map,
        accuracy: acc,
        confusion: ConfusionSummary { per_class, matrix },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabelMode, Motif, SynthSpec};

    /// Two classes planted on disjoint channel bands.
    fn separable(mode: LabelMode) -> (Dataset, NetworkConfig) {
        let motif = |class: usize, channels: Vec<usize>| Motif {
            class,
            channels,
            period: 2,
            width: 1,
            duration: 8,
            amplitude: 1.0,
        };
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 16,
            channels: 6,
            timesteps: 8,
            noise: 0.2,
            overlap: 0.0,
            label_mode: mode,
            motifs: vec![motif(0, vec![0, 1, 2]), motif(1, vec![3, 4, 5])],
            ..SynthSpec::default()
        };
        let net = NetworkConfig {
            channels: 6,
            timesteps: 8,
            height: 1,
            width: 1,
            layers: 1,
            groups: 1,
            hidden: 8,
            classes: 2,
            task: mode.task(),
            dropout: 0.0,
            ..NetworkConfig::default()
        };
        (generate_synthetic(&spec).unwrap(), net)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn no_checkpoints(_: &Checkpoint<f32>) -> Result<()> {
        Ok(())
    }

    #[test]
    fn separable_toy_loss_drops_fourfold() {
        let (data, net) = separable(LabelMode::SingleLabel);
        let g = Genotype::fixture();
        let init = train::<f32>(&g, &data, None, &net, &quick(0), no_checkpoints).unwrap();
        let initial = evaluate(&init.network, &data, 8).unwrap().loss;
        let out = train::<f32>(&g, &data, None, &net, &quick(50), no_checkpoints).unwrap();
        assert_eq!(out.history.len(), 50);
        let last = out.history[49].train_loss;
        assert!(last < initial / 4.0, "initial {initial}, final {last}");
        assert!(last < out.history[0].train_loss / 4.0);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (data, net) = separable(LabelMode::MultiLabel);
        let g = Genotype::fixture();
        let out = train::<f32>(&g, &data, Some(&data), &net, &quick(0), no_checkpoints).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fresh = Network::<f32>::discrete(&net, &g, &mut rng).unwrap();
        assert_eq!(out.network.named_tensors(), fresh.named_tensors());
        assert!(out.history.is_empty());
    }

    #[test]
    fn fixed_seed_gives_identical_weights() {
        let (data, net) = separable(LabelMode::MultiLabel);
        let g = Genotype::fixture();
        let cfg = quick(3);
        let a = train::<f32>(&g, &data, Some(&data), &net, &cfg, no_checkpoints).unwrap();
        let b = train::<f32>(&g, &data, Some(&data), &net, &cfg, no_checkpoints).unwrap();
        assert_eq!(a.network.named_tensors(), b.network.named_tensors());
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().all(|h| h.val_metric.is_some()));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let (data, net) = separable(LabelMode::MultiLabel);
        let g = Genotype::fixture();
        let cfg = TrainConfig { lr: 0.0, ..quick(2) };
        let out = train::<f32>(&g, &data, None, &net, &cfg, no_checkpoints).unwrap();
        let init = train::<f32>(&g, &data, None, &net, &quick(0), no_checkpoints).unwrap();
        assert_eq!(out.network.store().fingerprint(), init.network.store().fingerprint());
    }

    #[test]
    fn abort_keeps_the_last_checkpoint() {
        let (data, net) = separable(LabelMode::MultiLabel);
        let g = Genotype::fixture();
        let cfg = TrainConfig {
            checkpoint_every: Some(1),
            ..quick(4)
        };
        let mut seen = Vec::new();
        let err = train::<f32>(&g, &data, None, &net, &cfg, |ck| {
            seen.push(ck.epoch);
            if ck.epoch == 2 {
                Err(Error::Numeric("injected".into()))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert_eq!(seen, vec![0, 1, 2]);
        assert!(err.source.is_numeric());
        assert_eq!(err.history.len(), 3);
        assert_eq!(err.checkpoint.unwrap().epoch, 1);
    }

    #[test]
    fn non_finite_features_abort_numerically() {
        let (mut data, net) = separable(LabelMode::MultiLabel);
        data.records[3].features[5] = f32::NAN;
        let err = train::<f32>(&Genotype::fixture(), &data, None, &net, &quick(1), no_checkpoints).unwrap_err();
        assert!(err.source.is_numeric(), "{err}");
        assert!(err.checkpoint.is_none());
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (data, mut net) = separable(LabelMode::MultiLabel);
        net.timesteps = 16;
        let err = train::<f32>(&Genotype::fixture(), &data, None, &net, &quick(1), no_checkpoints).unwrap_err();
        assert!(matches!(err.source, Error::Config(_)), "{err}");
    }

    #[test]
    fn single_label_report() {
        let (data, net) = separable(LabelMode::SingleLabel);
        let out = train::<f32>(&Genotype::fixture(), &data, None, &net, &quick(20), no_checkpoints).unwrap();
        let r = evaluate(&out.network, &data, 7).unwrap();
        assert_eq!(r.samples, 32);
        let acc = r.accuracy.unwrap();
        assert_eq!(r.headline(), acc);
        let m = r.confusion.matrix.as_ref().unwrap();
        let correct: usize = (0..2).map(|k| m[k][k]).sum();
        assert_eq!(correct as f64 / 32.0, acc);
        assert_eq!(m.iter().flatten().sum::<usize>(), 32);
        for (k, c) in r.confusion.per_class.iter().enumerate() {
            assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 32);
            assert_eq!(c.tp, m[k][k]);
        }
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["confusion"]["per_class"][0]["fn"].is_u64());
        let table = r.to_table();
        let rows: Vec<&str> = table.lines().skip_while(|l| !l.trim_start().starts_with("class")).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|l| l.len() == rows[0].len()), "{table}");
    }

    #[test]
    fn multi_label_report_excludes_empty_classes() {
        let (mut data, net) = separable(LabelMode::MultiLabel);
        for r in &mut data.records {
            r.labels[1] = 0;
            r.labels[0] = 1;
        }
        let init = train::<f32>(&Genotype::fixture(), &data, None, &net, &quick(0), no_checkpoints).unwrap();
        let r = evaluate(&init.network, &data, 8).unwrap();
        assert_eq!(r.per_class_ap[1], None);
        assert_eq!(r.per_class_ap[0], Some(1.0));
        assert_eq!(r.map, 1.0);
        assert!(r.accuracy.is_none() && r.confusion.matrix.is_none());
        assert!(r.to_table().contains("    -"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().epochs, 300);
        assert_eq!(TrainConfig::default().batch_size, 18);
        for (cfg, path) in [
            (TrainConfig { batch_size: 0, ..quick(1) }, "/batch_size"),
            (TrainConfig { lr: f64::NAN, ..quick(1) }, "/lr"),
            (TrainConfig { eps: 0.0, ..quick(1) }, "/eps"),
            (TrainConfig { checkpoint_every: Some(3), ..quick(10) }, "/checkpoint_every"),
            (TrainConfig { checkpoint_every: Some(0), ..quick(10) }, "/checkpoint_every"),
        ] {
            match cfg.validate() {
                Err(Error::Schema { path: p, .. }) => assert_eq!(p, path),
                other => panic!("{cfg:?}: {other:?}"),
            }
        }
    }
}

//! First-order bilevel architecture search: α steps on validation batches
//! alternate with weight steps on training batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cell::CellArch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::network::{Network, NetworkConfig};
use crate::nn::Mode;
use crate::optim::{cosine_lr, Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the search data used for weight steps; the rest drives α.
    pub split: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
    pub alpha_init_std: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            split: 0.5,
            alpha_lr: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
            alpha_init_std: 1e-3,
            lr: 0.025,
            min_lr: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::schema(path, format!("{v} must be a finite non-negative number")))
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::schema("/epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::schema("/batch_size", "must be at least 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::schema("/split", format!("{} outside (0, 1)", self.split)));
        }
        for (path, v) in [
            ("/alpha_lr", self.alpha_lr),
            ("/alpha_weight_decay", self.alpha_weight_decay),
            ("/alpha_init_std", self.alpha_init_std),
            ("/lr", self.lr),
            ("/min_lr", self.min_lr),
            ("/weight_decay", self.weight_decay),
            ("/grad_clip", self.grad_clip),
        ] {
            non_negative(path, v)?;
        }
        for (path, v) in [
            ("/alpha_beta1", self.alpha_beta1),
            ("/alpha_beta2", self.alpha_beta2),
            ("/momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::schema(path, format!("{v} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub genotype: Genotype,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub epochs: Vec<SearchEpoch>,
}

impl SearchTrace {
    /// The trace with wall-clock readings zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> SearchTrace {
        let mut t = self.clone();
        t.epochs.iter_mut().for_each(|e| e.wall_clock_s = 0.0);
        t
    }
}

/// A failed search together with everything recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("search aborted after {} completed epochs: {source}", trace.epochs.len())]
pub struct SearchAbort {
    #[source]
    pub source: Error,
    pub trace: SearchTrace,
}

/// Relaxed network plus its two optimizers.
#[derive(Debug)]
pub struct Searcher<S> {
    cfg: SearchConfig,
    net: Network<S>,
    alpha_opt: Adam<S>,
    weight_opt: Sgd<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Searcher<S> {
    pub fn new(net_cfg: &NetworkConfig, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::relaxed(net_cfg, cfg.alpha_init_std, &mut rng)?;
        Ok(Searcher {
            cfg: cfg.clone(),
            net,
            alpha_opt: Adam::new(AdamConfig {
                lr: cfg.alpha_lr,
                beta1: cfg.alpha_beta1,
                beta2: cfg.alpha_beta2,
                eps: 1e-8,
                weight_decay: cfg.alpha_weight_decay,
            }),
            weight_opt: Sgd::new(SgdConfig {
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            }),
            rng,
        })
    }

    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn genotype(&self) -> Genotype {
        self.arch().derive_genotype()
    }

    pub fn arch(&self) -> &CellArch<S> {
        self.net.arch().expect("searcher networks are relaxed")
    }

    pub fn set_weight_lr(&mut self, lr: f64) {
        self.weight_opt.set_lr(lr);
    }

    fn loss(&mut self, x: &Tensor<S>, y: &Tensor<S>) -> Result<(Graph<S>, Var)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let logits = self.net.forward(&mut g, xv, Mode::Train, &mut self.rng)?;
        let loss = self.net.loss(&mut g, logits, y)?;
        Ok((g, loss))
    }

    /// One Adam step on α from the loss on a validation batch, evaluated at
    /// the current weights. Returns that loss.
    pub fn alpha_step(&mut self, x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
        let (g, loss) = self.loss(x, y)?;
        let value = g.value(loss).data()[0].as_f64();
        let grads = g.backward(loss)?;
        let arch = self.net.arch_mut().expect("searcher networks are relaxed");
        arch.store_mut().zero_grad();
        arch.store_mut().accumulate(&grads);
        self.alpha_opt.step(arch.store_mut());
        if !arch.is_finite() {
            return Err(Error::Numeric("architecture parameters diverged".into()));
        }
        Ok(value)
    }

    /// One clipped SGD step on the weights from the loss on a training batch.
    /// Returns that loss.
    pub fn weight_step(&mut self, x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
        let (g, loss) = self.loss(x, y)?;
        let value = g.value(loss).data()[0].as_f64();
        let grads = g.backward(loss)?;
        let store = self.net.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        if self.cfg.grad_clip > 0.0 {
            store.clip_grad_norm(self.cfg.grad_clip);
        }
        self.weight_opt.step(store);
        if store.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("network weights diverged".into()));
        }
        Ok(value)
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug)]
pub struct SearchOutcome<S> {
    pub genotype: Genotype,
    pub trace: SearchTrace,
    /// Final architecture parameters of the shared cell.
    pub arch: CellArch<S>,
}

/// Searches a shared cell on `data`, split into weight and α halves by
/// `cfg.split`. Each step takes one α step on the next validation batch and
/// then one weight step on the next training batch.
pub fn search<S: Scalar>(data: &Dataset, net_cfg: &NetworkConfig, cfg: &SearchConfig) -> Result<SearchOutcome<S>, SearchAbort> {
    let mut trace = SearchTrace::default();
    let abort = |source: Error, trace: &SearchTrace| SearchAbort {
        source,
        trace: trace.clone(),
    };
    let (train, val) = data.split(cfg.split, cfg.seed).map_err(|e| abort(e, &trace))?;
    if train.is_empty() || val.is_empty() {
        return Err(abort(
            Error::config(format!("{} samples cannot be split into two non-empty parts", data.len())),
            &trace,
        ));
    }
    let mut searcher = Searcher::<S>::new(net_cfg, cfg).map_err(|e| abort(e, &trace))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bd3);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.min_lr, epoch, cfg.epochs);
        searcher.set_weight_lr(lr);
        let train_batches = batches(train.len(), cfg.batch_size, &mut order_rng);
        let val_batches = batches(val.len(), cfg.batch_size, &mut order_rng);
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for (step, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[step % val_batches.len()];
            let (v, t) = search_step(&mut searcher, &train, tb, &val, vb).map_err(|e| abort(e, &trace))?;
            val_sum += v;
            train_sum += t;
        }
        let steps = train_batches.len() as f64;
        trace.epochs.push(SearchEpoch {
            epoch,
            lr,
            train_loss: train_sum / steps,
            val_loss: val_sum / steps,
            genotype: snapshot(&searcher, epoch, cfg.seed),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SearchOutcome {
        genotype: snapshot(&searcher, cfg.epochs - 1, cfg.seed),
        trace,
        arch: searcher.arch().clone(),
    })
}

fn search_step<S: Scalar>(s: &mut Searcher<S>, train: &Dataset, tb: &[usize], val: &Dataset, vb: &[usize]) -> Result<(f64, f64)> {
    let (vx, vy) = val.batch::<S>(vb)?;
    let v = s.alpha_step(&vx, &vy)?;
    let (tx, ty) = train.batch::<S>(tb)?;
    let t = s.weight_step(&tx, &ty)?;
    Ok((v, t))
}

fn snapshot<S: Scalar>(s: &Searcher<S>, epoch: usize, seed: u64) -> Genotype {
    let mut g = s.genotype();
    g.meta.seed = Some(seed);
    g.meta.epoch = Some(epoch as u64);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabelMode, SynthSpec};
    use crate::network::Task;
    use crate::autodiff::Gradients;
    use crate::ops::softmax;
    use crate::param::ParamKey;

    fn toy(samples_per_class: usize) -> (Dataset, NetworkConfig) {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class,
            channels: 6,
            timesteps: 8,
            noise: 0.3,
            label_mode: LabelMode::SingleLabel,
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
            task: Task::SingleLabel,
            dropout: 0.0,
            ..NetworkConfig::default()
        };
        (generate_synthetic(&spec).unwrap(), net)
    }

    fn quick() -> SearchConfig {
        SearchConfig {
            epochs: 1,
            batch_size: 8,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let (data, net) = toy(16);
        assert_eq!(data.len(), 32);
        let out = search::<f32>(&data, &net, &quick()).unwrap();
        out.genotype.validate().unwrap();
        assert_eq!(out.trace.epochs.len(), 1);
        assert_eq!(out.genotype.nodes, out.arch.derive_genotype().nodes);
        assert_eq!(out.trace.epochs[0].genotype, out.genotype);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (data, net) = toy(16);
        let cfg = SearchConfig { epochs: 2, ..quick() };
        let a = search::<f32>(&data, &net, &cfg).unwrap();
        let b = search::<f32>(&data, &net, &cfg).unwrap();
        assert_eq!(a.genotype, b.genotype);
        assert_eq!(a.trace.without_timing(), b.trace.without_timing());
        assert_eq!(a.arch.store().fingerprint(), b.arch.store().fingerprint());
        assert_eq!(a.trace.epochs.len(), 2);
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let (data, net) = toy(8);
        let cfg = SearchConfig {
            alpha_lr: 0.05,
            ..quick()
        };
        let mut s = Searcher::<f64>::new(&net, &cfg).unwrap();
        let (x, y) = data.batch::<f64>(&(0..8).collect::<Vec<_>>()).unwrap();
        for _ in 0..3 {
            let w = s.network().store().fingerprint();
            let a = s.arch().store().fingerprint();
            s.alpha_step(&x, &y).unwrap();
            assert_eq!(s.network().store().fingerprint(), w);
            assert_ne!(s.arch().store().fingerprint(), a);

            let w = s.network().store().fingerprint();
            let a = s.arch().store().fingerprint();
            s.weight_step(&x, &y).unwrap();
            assert_eq!(s.arch().store().fingerprint(), a);
            assert_ne!(s.network().store().fingerprint(), w);

            for row in s.arch().values() {
                let p = softmax(&row);
                assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_only_training_reduces_loss() {
        let (data, net) = toy(16);
        let cfg = SearchConfig {
            alpha_lr: 0.0,
            alpha_weight_decay: 0.0,
            ..quick()
        };
        let mut s = Searcher::<f32>::new(&net, &cfg).unwrap();
        let alpha = s.arch().store().fingerprint();
        let all: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        for step in 0..50 {
            let idx: Vec<usize> = all.iter().copied().cycle().skip(step * 8 % data.len()).take(8).collect();
            let (x, y) = data.batch::<f32>(&idx).unwrap();
            s.alpha_step(&x, &y).unwrap();
            losses.push(s.weight_step(&x, &y).unwrap());
        }
        assert_eq!(s.arch().store().fingerprint(), alpha);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.7, "loss went from {head} to {tail}");
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let (data, net) = toy(4);
        let mut s = Searcher::<f64>::new(&net, &SearchConfig { alpha_init_std: 0.5, ..quick() }).unwrap();
        let (x, y) = data.batch::<f64>(&(0..8).collect::<Vec<_>>()).unwrap();
        let loss_at = |s: &mut Searcher<f64>| -> (f64, Gradients<f64>) {
            let (g, l) = s.loss(&x, &y).unwrap();
            (g.value(l).data()[0], g.backward(l).unwrap())
        };
        let (_, grads) = loss_at(&mut s);
        let ids: Vec<ParamKey> = s.arch().store().iter().map(|p| p.key()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (e, key) in ids.iter().enumerate() {
            let analytic = grads.param(*key).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; 9]);
            let mut numeric = Vec::new();
            for o in 0..analytic.len() {
                let bump = |d: f64, s: &mut Searcher<f64>| {
                    let p = s.net.arch_mut().unwrap().store_mut().iter_mut().nth(e).unwrap();
                    p.value.data_mut()[o] += d;
                };
                bump(h, &mut s);
                let up = loss_at(&mut s).0;
                bump(-2.0 * h, &mut s);
                let down = loss_at(&mut s).0;
                bump(h, &mut s);
                numeric.push((up - down) / (2.0 * h));
            }
            worst = worst.max(crate::gradcheck::relative_error(&analytic, &numeric));
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }

    #[test]
    fn divergence_aborts_with_the_trace_so_far() {
        let (data, net) = toy(16);
        let cfg = SearchConfig {
            epochs: 3,
            lr: 1e30,
            min_lr: 1e30,
            grad_clip: 0.0,
            ..quick()
        };
        let err = search::<f32>(&data, &net, &cfg).unwrap_err();
        assert!(err.source.is_numeric(), "{err}");
        assert!(err.trace.epochs.len() < 3);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SearchConfig { epochs: 0, ..quick() },
            SearchConfig { split: 1.0, ..quick() },
            SearchConfig { batch_size: 0, ..quick() },
            SearchConfig { alpha_lr: -1.0, ..quick() },
            SearchConfig { momentum: 1.0, ..quick() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Schema { .. })), "{cfg:?}");
        }
        assert_eq!(SearchConfig::default().epochs, 50);
        assert_eq!(SearchConfig::default().split, 0.5);
    }
}

//! Training and evaluation loops, optimizer and history logging.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::expected_cost;
use crate::data::Dataset;
use crate::search::{ArchDescription, ArchMeta, SearchConfig};
use crate::supernet::{Network, NetworkSpec, ParamKind, Phase};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Use only the first `train_limit` training examples.
    pub train_limit: Option<usize>,
    /// Training batches used to re-estimate batch-norm statistics after each
    /// epoch; 0 keeps the momentum averages.
    pub bn_recalibration_batches: usize,
    /// Save a checkpoint into this directory after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            grad_clip: Some(5.0),
            lr_decay: 0.97,
            seed: 1,
            train_limit: None,
            bn_recalibration_batches: 20,
            checkpoint_dir: None,
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr {}, momentum {}, decay {}",
                self.lr, self.momentum, self.lr_decay
            )));
        }
        self.search.validate()
    }
}

/// SGD with momentum; thresholds use a scaled step size.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub threshold_lr_mult: f64,
    pub grad_clip: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, threshold_lr_mult: f64) -> Self {
        Sgd {
            lr,
            momentum,
            threshold_lr_mult,
            grad_clip: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.grad_clip = clip;
        self
    }

    fn apply(&mut self, net: &mut Network, grads: Vec<(String, Tensor)>) -> Result<()> {
        let norm = grads
            .iter()
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt();
        let factor = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, grad) in grads {
            let kind = net
                .params
                .kind(&name)
                .expect("gradient of a known parameter");
            let lr = match kind {
                ParamKind::Weight => self.lr,
                ParamKind::Threshold => self.lr * self.threshold_lr_mult,
                ParamKind::Buffer => continue,
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let p = net.params.get_mut(&name)?;
            for ((p, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *v = self.momentum * *v + factor * g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub ce: f64,
    /// Relaxed expected multiply-adds, when the network has search sites.
    pub expected_cost: Option<f64>,
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// `argmax` of each row of `(N, K)` logits.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// One optimization step: hard forward, relaxed backward, update of weights
/// and thresholds. The loss is `CE + λ·ln(expected cost)` for networks with
/// search sites and plain CE otherwise. A non-finite loss leaves the network
/// untouched.
pub fn train_step(
    net: &mut Network,
    opt: &mut Sgd,
    x: Tensor,
    labels: &[usize],
    lambda: f64,
    at: (usize, usize),
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, x, Phase::Train)?;
    let ce = g.softmax_cross_entropy(fwd.logits, labels)?;
    let mut loss = ce;
    let mut expected = None;
    if !fwd.cost_terms.is_empty() {
        let cc = expected_cost(&mut g, net.spec.backbone_flops()?, &fwd.cost_terms)?;
        expected = Some(g.value(cc).item());
        if lambda > 0.0 {
            let ln = g.ln(cc)?;
            let weighted = g.scale(ln, lambda);
            loss = g.add(ce, weighted)?;
        }
    }
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Diverged {
            epoch: at.0,
            step: at.1,
            loss: loss_value,
        });
    }
    let correct = predictions(g.value(fwd.logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let ce_value = g.value(ce).item();
    g.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|(name, &id)| (name.clone(), g.grad(id).expect("trainable leaf").clone()))
        .collect::<Vec<_>>();
    if grads
        .iter()
        .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Diverged {
            epoch: at.0,
            step: at.1,
            loss: f64::NAN,
        });
    }
    opt.apply(net, grads)?;
    net.commit(fwd.pending)?;
    Ok(StepMetrics {
        ce: ce_value,
        expected_cost: expected,
        loss: loss_value,
        correct,
        count: labels.len(),
    })
}

/// Search-mode step; identical to [`train_step`] on a supernet.
pub fn search_step(
    net: &mut Network,
    opt: &mut Sgd,
    x: Tensor,
    labels: &[usize],
    lambda: f64,
    at: (usize, usize),
) -> Result<StepMetrics> {
    if net.search_cfg.is_none() {
        return Err(Error::Config(
            "search_step needs a network with search sites".into(),
        ));
    }
    train_step(net, opt, x, labels, lambda, at)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy with running statistics.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, x, Phase::Eval)?;
        let ce = g.softmax_cross_entropy(fwd.logits, &labels)?;
        loss_sum += g.value(ce).item() * chunk.len() as f64;
        correct += predictions(g.value(fwd.logits))
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        top1: correct as f64 / n,
        loss: loss_sum / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub flops_expected: f64,
}

/// Per-step training loss and relaxed expected cost.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub expected_cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub steps: Vec<StepRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,top1,flops_expected\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.split, r.loss, r.top1, r.flops_expected
            ));
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss,expected_cost\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.step, r.loss, r.expected_cost
            ));
        }
        s
    }

    pub fn last(&self, split: &str) -> Option<&HistoryRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Example order of one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch as u64),
    );
    idx.shuffle(&mut rng);
    idx
}

/// Trains for `cfg.epochs` epochs. Each epoch logs a `train` row (mean
/// train-mode loss and accuracy) and, when `eval` is given, a row for it.
/// `flops_expected` is the mean relaxed expected cost for networks with
/// search sites and the fixed per-sample cost otherwise.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let data = match cfg.train_limit {
        Some(n) => data.take(n),
        None => data.clone(),
    };
    let fixed_flops = net.flops_report()?.total as f64;
    let mut opt =
        Sgd::new(cfg.lr, cfg.momentum, cfg.search.threshold_lr_mult).with_clip(cfg.grad_clip);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct, mut cost_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk);
            let m = train_step(net, &mut opt, x, &labels, cfg.search.lambda, (epoch, step))?;
            loss_sum += m.loss * m.count as f64;
            correct += m.correct;
            let cost = m.expected_cost.unwrap_or(fixed_flops);
            cost_sum += cost;
            history.steps.push(StepRow {
                epoch: epoch + 1,
                step,
                loss: m.loss,
                expected_cost: cost,
            });
            steps += 1;
        }
        if cfg.bn_recalibration_batches > 0 {
            let batches = order
                .chunks(cfg.batch_size)
                .take(cfg.bn_recalibration_batches)
                .map(|chunk| data.batch(chunk).0);
            net.recalibrate_bn(batches)?;
        }
        let n = data.len().max(1) as f64;
        history.rows.push(HistoryRow {
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / n,
            top1: correct as f64 / n,
            flops_expected: cost_sum / steps.max(1) as f64,
        });
        if let Some(ev) = eval {
            let m = evaluate(net, ev, cfg.batch_size)?;
            history.rows.push(HistoryRow {
                epoch: epoch + 1,
                split: ev.split.clone(),
                loss: m.loss,
                top1: m.top1,
                flops_expected: fixed_flops,
            });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            net.save(&dir.join(format!("epoch{}.ckpt", epoch + 1)))?;
        }
    }
    Ok(history)
}

pub struct SearchOutcome {
    pub arch: ArchDescription,
    pub history: History,
    pub supernet: Network,
}

/// Trains a supernet over `spec` with `cfg.search` and derives its
/// architecture.
pub fn search(
    spec: NetworkSpec,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<SearchOutcome> {
    let mut net = Network::supernet(spec, cfg.search.clone(), cfg.search.wd_init_std, cfg.seed)?;
    let history = train(&mut net, data, eval, cfg)?;
    let arch = net.derive(ArchMeta {
        seed: cfg.seed,
        lambda: cfg.search.lambda,
        steps: history.steps.len() as u64,
    })?;
    Ok(SearchOutcome {
        arch,
        history,
        supernet: net,
    })
}

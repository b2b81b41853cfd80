//! Relative-error losses, Adam, the cosine schedule and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{Norm, Tape};
use crate::data::OperatorDataset;
use crate::error::{shape_err, PitError, Result};
use crate::model::PiTModel;
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor2;

fn relative(pred: &Tensor2, truth: &Tensor2, batch: usize, norm: Norm) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || batch == 0 || !pred.rows().is_multiple_of(batch) {
        return Err(shape_err(
            "relative error",
            format!("pred {:?}, truth {:?}, batch {batch}", pred.shape(), truth.shape()),
        ));
    }
    let per = pred.len() / batch;
    (0..batch)
        .map(|b| {
            let p = &pred.data()[b * per..(b + 1) * per];
            let t = &truth.data()[b * per..(b + 1) * per];
            let (num, den) = match norm {
                Norm::L1 => (
                    p.iter().zip(t).map(|(x, y)| (x - y).abs()).sum::<f64>(),
                    t.iter().map(|y| y.abs()).sum::<f64>(),
                ),
                Norm::L2 => (
                    p.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
                    t.iter().map(|y| y * y).sum::<f64>().sqrt(),
                ),
            };
            if den == 0.0 {
                Err(PitError::ZeroNormTarget(b))
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

/// Per-sample `||pred - truth||_2 / ||truth||_2`; samples are stacked row blocks.
pub fn relative_l2(pred: &Tensor2, truth: &Tensor2, batch: usize) -> Result<Vec<f64>> {
    relative(pred, truth, batch, Norm::L2)
}

/// Per-sample `||pred - truth||_1 / ||truth||_1`.
pub fn relative_l1(pred: &Tensor2, truth: &Tensor2, batch: usize) -> Result<Vec<f64>> {
    relative(pred, truth, batch, Norm::L1)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median by order statistics; an even count averages the central pair.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `0.5 lr0 (1 + cos(π e / E))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Tensor2> {
            s.iter()
                .map(|(_, p)| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, 0.9, 0.999, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update from the gradients held in `store`, followed by
    /// projection of constrained parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(PitError::InvalidArgument(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.project();
        }
        store.check_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    RelL1Mean,
    RelL2Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    RelL1Median,
    RelL2Mean,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::RelL1Mean => "rel_l1_mean",
            LossKind::RelL2Mean => "rel_l2_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LossKind::RelL1Mean, LossKind::RelL2Mean]
            .into_iter()
            .find(|k| k.name() == s)
    }

    fn norm(self) -> Norm {
        match self {
            LossKind::RelL1Mean => Norm::L1,
            LossKind::RelL2Mean => Norm::L2,
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RelL1Median => "rel_l1_median",
            Metric::RelL2Mean => "rel_l2_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Metric::RelL1Median, Metric::RelL2Mean]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub metric: Metric,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            lr: 1e-3,
            loss: LossKind::RelL2Mean,
            metric: Metric::RelL2Mean,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PitError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PitError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(PitError::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch,loss,lr,seconds`.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e}",
            self.epoch, self.loss, self.lr, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub test_metric: f64,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Loss of one batch recorded on `tape`; returns the scalar loss node.
pub fn batch_loss(
    tape: &mut Tape,
    model: &PiTModel,
    ds: &OperatorDataset,
    idx: &[usize],
    loss: LossKind,
) -> Result<crate::autodiff::Var> {
    let (a, u) = ds.batch(idx)?;
    let x = tape.constant(a);
    let y = model.forward(tape, x, idx.len(), &ds.input_mesh, &ds.output_mesh)?;
    let per = tape.relative_error(y, &u, idx.len(), loss.norm())?;
    tape.mean(per)
}

/// Trains in place. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut PiTModel,
    train_set: &OperatorDataset,
    test_set: &OperatorDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PitError::InvalidArgument("training set is empty".into()));
    }
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, model, train_set, idx, cfg.loss)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(PitError::Diverged { epoch, loss: value });
            }
            model.store.zero_grad();
            tape.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store, lr)?;
            total += value;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / batches as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    log.test_metric = if test_set.is_empty() {
        f64::NAN
    } else {
        evaluate(model, test_set, cfg.metric)?
    };
    Ok(log)
}

/// Per-sample relative errors of the model on a dataset, in sample order.
pub fn sample_errors(model: &PiTModel, ds: &OperatorDataset, norm: Norm) -> Result<Vec<f64>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (a, u) = ds.batch(idx)?;
        let y = model.predict(&a, &ds.input_mesh, &ds.output_mesh)?;
        out.extend(relative(&y, &u, idx.len(), norm)?);
    }
    Ok(out)
}

pub fn evaluate(model: &PiTModel, ds: &OperatorDataset, metric: Metric) -> Result<f64> {
    if ds.is_empty() {
        return Err(PitError::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(match metric {
        Metric::RelL2Mean => mean(&sample_errors(model, ds, Norm::L2)?),
        Metric::RelL1Median => median(&sample_errors(model, ds, Norm::L1)?),
    })
}

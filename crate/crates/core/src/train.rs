//! Minibatch training with Adam, evaluation, and the metrics CSV.
//!
//! Per-sample forward/backward passes run in parallel over a read-only model;
//! gradients are then summed in sample order, so results do not depend on the
//! thread count.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,top5";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: i32,
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, opts: &TrainOptions) -> Self {
        let zeros: Vec<Vec<F>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![F::zero(); t.len()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: F::of(opts.lr),
            beta1: F::of(opts.beta1),
            beta2: F::of(opts.beta2),
            eps: F::of(opts.eps),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>]) {
        self.step += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (((_, p), g), (m, v)) in params
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = *w - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    /// Only reported for five or more classes.
    pub top5: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "samples={} loss={:.6} top1={:.6}", self.samples, self.loss, self.top1)?;
        if let Some(t5) = self.top5 {
            write!(f, " top5={t5:.6}")?;
        }
        Ok(())
    }
}

/// Cross-entropy and rank of the true class, in double precision.
fn score(logits: &[f64], label: usize) -> (f64, usize) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let rank = logits.iter().filter(|&&z| z > logits[label]).count();
    (lse - logits[label], rank)
}

pub fn evaluate<F: Real>(model: &Model<F>, images: &[Tensor<F>], labels: &[usize]) -> Result<EvalReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Config(format!(
            "evaluation needs matching non-empty images ({}) and labels ({})",
            images.len(),
            labels.len()
        )));
    }
    let classes = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    let logits: Vec<Vec<F>> = images
        .par_iter()
        .map(|img| model.logits(img))
        .collect::<Result<_>>()?;
    let (mut loss, mut hit1, mut hit5) = (0.0, 0usize, 0usize);
    for (z, &label) in logits.iter().zip(labels) {
        let z: Vec<f64> = z.iter().map(|v| v.f64()).collect();
        let (l, rank) = score(&z, label);
        loss += l;
        hit1 += usize::from(rank < 1);
        hit5 += usize::from(rank < 5);
    }
    let n = labels.len() as f64;
    Ok(EvalReport {
        samples: labels.len(),
        loss: loss / n,
        top1: hit1 as f64 / n,
        top5: (classes >= 5).then(|| hit5 as f64 / n),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub report: EvalReport,
}

impl MetricRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let top5 = r.top5.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{},{},{:.6},{:.6},{}", self.epoch, self.split, r.loss, r.top1, top5)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome<F> {
    pub model: Model<F>,
    /// Highest top-1 on the validation split (or the training split if none).
    pub best: Model<F>,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<MetricRow>,
}

fn check_labels(data: &Dataset, classes: usize, split: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{split} dataset is empty")));
    }
    if data.num_classes() > classes {
        return Err(Error::Config(format!(
            "{split} dataset has {} classes but the model predicts {classes}",
            data.num_classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place of a copy; `on_epoch` sees each epoch's rows as
/// soon as they are computed.
pub fn train<F: Real>(
    mut model: Model<F>,
    train: &Dataset,
    val: Option<&Dataset>,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&[MetricRow]),
) -> Result<TrainOutcome<F>> {
    opts.validate()?;
    let classes = model.config.num_classes;
    check_labels(train, classes, "training")?;
    if let Some(v) = val {
        check_labels(v, classes, "validation")?;
    }
    let train_images = train.images_as::<F>();
    let val_images = val.map(Dataset::images_as::<F>);
    for img in &train_images {
        model.check_image(img)?;
    }

    let mut adam = Adam::new(&model.params, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut metrics = Vec::new();

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let weight = F::of(1.0 / batch.len() as f64);
            let per_sample: Vec<(F, Vec<Vec<F>>)> = batch
                .par_iter()
                .map(|&i| {
                    let (loss, _, grads) = model.loss_and_grads(&train_images[i], train.labels[i], weight)?;
                    Ok((loss, grads))
                })
                .collect::<Result<_>>()?;
            let mut total: Vec<Vec<F>> = per_sample[0].1.clone();
            for (pos, (loss, grads)) in per_sample.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} at epoch {epoch}, sample {}",
                        batch[pos]
                    )));
                }
                if pos == 0 {
                    continue;
                }
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a = *a + x;
                    }
                }
            }
            adam.update(&mut model.params, &total);
        }

        let mut rows = vec![MetricRow {
            epoch,
            split: "train".into(),
            report: evaluate(&model, &train_images, &train.labels)?,
        }];
        if let (Some(v), Some(imgs)) = (val, &val_images) {
            rows.push(MetricRow {
                epoch,
                split: "val".into(),
                report: evaluate(&model, imgs, &v.labels)?,
            });
        }
        let tracked = rows.last().expect("at least the train row").report.top1;
        log::info!(
            "epoch {epoch}: {}",
            rows.iter()
                .map(|r| format!("{} {}", r.split, r.report))
                .collect::<Vec<_>>()
                .join(" | ")
        );
        if tracked > best_score {
            best_score = tracked;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        on_epoch(&rows);
        metrics.extend(rows);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        metrics,
    })
}

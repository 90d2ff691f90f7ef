use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::HbFormer;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::train::data::{augment, collate, LabelMap, SegmentationSample};
use crate::train::metrics::{AggregateReport, MetricsReport};
use crate::train::optim::{
    sgd_step, LrSchedule, OptimizerState, DEFAULT_LR, DEFAULT_LR_MIN, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY,
};

/// Seeds of the three independent runs whose mean and spread are reported.
pub const DEFAULT_SEEDS: [u64; 3] = [3407, 8261, 10993];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Evaluate on the evaluation set every this many steps; 0 only at the end.
    pub eval_every: usize,
    pub eval_threads: NonZeroUsize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            total_steps: 500,
            lr: DEFAULT_LR,
            lr_min: DEFAULT_LR_MIN,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            augment: true,
            eval_every: 0,
            eval_threads: NonZeroUsize::MIN,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_init: self.lr,
            lr_min: self.lr_min,
            total_steps: self.total_steps,
        }
    }
}

/// How a training run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// A non-finite loss or gradient appeared at `step`; that update was
    /// discarded, so the parameters are the last good ones.
    Diverged {
        step: usize,
    },
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ParamStore,
    pub losses: Vec<f64>,
    /// `(step, mean DSC)` of every periodic evaluation.
    pub history: Vec<(usize, f64)>,
    pub report: MetricsReport,
    pub status: RunStatus,
}

impl SeedRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub runs: Vec<SeedRun>,
    pub aggregate: AggregateReport,
}

/// Class map of the highest logit at every pixel of `logits [K, H, W]`.
pub fn argmax_classes(logits: &[f32], classes: usize, h: usize, w: usize) -> LabelMap {
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * plane + p] > logits[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        labels,
    }
}

/// Predicted class maps, one forward pass per sample, spread over up to
/// `threads` workers. Results do not depend on the thread count.
pub fn predict_masks(
    model: &HbFormer,
    params: &ParamStore,
    samples: &[SegmentationSample],
    threads: NonZeroUsize,
) -> Result<Vec<LabelMap>> {
    let k = model.config.num_classes;
    let one = |s: &SegmentationSample| -> Result<LabelMap> {
        let shape = s.image.shape();
        let mut batch = vec![1];
        batch.extend_from_slice(shape);
        let img = Tensor::new(batch, s.image.data().to_vec())?;
        let logits = model.predict(params, &img)?;
        Ok(argmax_classes(logits.data(), k, shape[1], shape[2]))
    };
    let workers = threads.get().min(samples.len()).max(1);
    if workers == 1 {
        return samples.iter().map(one).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(
    model: &HbFormer,
    params: &ParamStore,
    samples: &[SegmentationSample],
    seed: u64,
    threads: NonZeroUsize,
) -> Result<(MetricsReport, Vec<LabelMap>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_masks(model, params, samples, threads)?;
    let pairs: Vec<(LabelMap, LabelMap)> = preds
        .iter()
        .cloned()
        .zip(samples.iter().map(|s| s.mask.clone()))
        .collect();
    let report = MetricsReport::evaluate(&pairs, model.config.num_classes, seed)?;
    Ok((report, preds))
}

/// One training step on a batch; returns the loss, or `None` when the loss
/// or a gradient is non-finite (the parameters are then left untouched).
pub fn train_step(
    model: &HbFormer,
    params: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[&SegmentationSample],
) -> Result<Option<f64>> {
    let (images, labels) = collate(batch)?;
    let mut s = Session::new(params, true);
    let x = s.graph.constant(images.shape().to_vec(), images.into_data())?;
    let logits = model.forward(&mut s, x)?;
    let loss = s.graph.bce_dice_loss(logits, &labels)?;
    let out = s.finish();
    let value = out.graph.value(loss)[0] as f64;
    if !value.is_finite() {
        return Ok(None);
    }
    params.zero_grad();
    out.backward_into(loss, params)?;
    let finite = params
        .iter()
        .all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
    if !finite {
        params.zero_grad();
        return Ok(None);
    }
    sgd_step(params, opt)?;
    out.apply_updates(params)?;
    params.zero_grad();
    Ok(Some(value))
}

/// Trains one model from `seed`. Mini-batches are drawn without replacement
/// from a per-epoch shuffle; shuffling and augmentation use a random stream
/// derived from the seed and the epoch number.
pub fn train_seed(
    model: &HbFormer,
    cfg: &TrainConfig,
    train: &[SegmentationSample],
    eval: &[SegmentationSample],
    seed: u64,
) -> Result<SeedRun> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = model.init_params(seed);
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let sched = cfg.schedule();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut history = Vec::new();
    let mut status = RunStatus::Completed;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch + 1);
                epoch += 1;
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            batch.push(if cfg.augment { augment(s, &mut rng) } else { s.clone() });
        }
        opt.lr = sched.lr(step);
        let refs: Vec<&SegmentationSample> = batch.iter().collect();
        match train_step(model, &mut params, &mut opt, &refs)? {
            Some(loss) => losses.push(loss),
            None => {
                status = RunStatus::Diverged { step };
                break;
            }
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.total_steps {
            let (r, _) = evaluate(model, &params, eval, seed, cfg.eval_threads)?;
            history.push((step + 1, r.mean_dsc));
        }
    }
    let (report, _) = evaluate(model, &params, eval, seed, cfg.eval_threads)?;
    history.push((losses.len(), report.mean_dsc));
    Ok(SeedRun {
        seed,
        params,
        losses,
        history,
        report,
        status,
    })
}

/// [`train_seed`] for every seed, plus the mean and spread across seeds.
pub fn train_loop(
    model: &HbFormer,
    cfg: &TrainConfig,
    train: &[SegmentationSample],
    eval: &[SegmentationSample],
    seeds: &[u64],
) -> Result<TrainSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let runs = seeds
        .iter()
        .map(|&seed| train_seed(model, cfg, train, eval, seed))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(TrainSummary {
        aggregate: AggregateReport::from_reports(&reports)?,
        runs,
    })
}

//! Mini-batch training with Adam, plateau learning-rate halving, NaN abort,
//! and the two-stage teacher-then-ground-truth distillation protocol.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdstereo_tensor::{Tensor, TensorError};

use crate::checkpoint::Checkpoint;
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::io::dataset::Sample;
use crate::loss::{compute_loss, LossConfig, LossTerms, Targets};
use crate::metrics::{Accumulator, MetricsReport};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed of the per-epoch sample shuffle.
    pub seed: u64,
    /// Epochs without validation improvement before the rate is halved.
    pub patience: usize,
    pub min_lr: f64,
    pub loss: LossConfig,
    /// Stop after this many optimizer updates (0 = no limit).
    pub max_updates: usize,
    /// Reload the weights of the best validation epoch when done.
    pub keep_best: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save `epoch_<n>.ckpt` every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            patience: 3,
            min_lr: 1e-6,
            loss: LossConfig::default(),
            max_updates: 0,
            keep_best: true,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.loss.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let l = &self.loss;
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("patience", self.patience.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("lambda0", l.lambda0.to_string()),
            ("lambda1", l.lambda1.to_string()),
            ("lambda2", l.lambda2.to_string()),
            ("lambda3", l.lambda3.to_string()),
            ("max_updates", self.max_updates.to_string()),
            ("keep_best", self.keep_best.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one key; returns `false` for keys this schedule does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "lambda0" => self.loss.lambda0 = num(key, value)?,
            "lambda1" => self.loss.lambda1 = num(key, value)?,
            "lambda2" => self.loss.lambda2 = num(key, value)?,
            "lambda3" => self.loss.lambda3 = num(key, value)?,
            "max_updates" => self.max_updates = num(key, value)?,
            "keep_best" => self.keep_best = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    Teacher,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::GroundTruth => "gt",
            LabelSource::Teacher => "teacher",
        })
    }
}

impl LabelSource {
    fn labels(self, s: &Sample) -> Result<&DisparityMap> {
        match self {
            LabelSource::GroundTruth => Ok(&s.gt),
            LabelSource::Teacher => s
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("sample {} has no teacher labels", s.name))),
        }
    }
}

/// One optimizer update: the mean of the per-sample loss terms of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub source: LabelSource,
    /// Sample names that made up the batch.
    pub batch: Vec<String>,
    pub lr: f64,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub source: LabelSource,
    pub lr: f64,
    pub train_loss: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-oriented text form of the log.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let t = &s.terms;
            out.push_str(&format!(
                "step stage={} epoch={} step={} source={} lr={:e} total={:.6} full={:.6} quarter={:.6} left8={:.6} left16={:.6} right8={:.6} right16={:.6}\n",
                s.stage, s.epoch, s.step, s.source, s.lr, t.total, t.full, t.quarter, t.left8, t.left16, t.right8, t.right16
            ));
        }
        for e in &self.epochs {
            let val = e
                .validation
                .map(|m| format!(" val_epe={:.6} val_error3={:.4}", m.epe, m.error3))
                .unwrap_or_default();
            out.push_str(&format!(
                "epoch stage={} epoch={} source={} lr={:e} train_loss={:.6}{val}\n",
                e.stage, e.epoch, e.source, e.lr, e.train_loss
            ));
        }
        out
    }
}

pub enum Event<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
    pub best: Option<MetricsReport>,
    pub adam: Adam,
}

/// Pixel-weighted metrics of `model` over `samples` against `source` labels.
pub fn evaluate(model: &Model, samples: &[Sample], source: LabelSource) -> Result<MetricsReport> {
    let mut acc = Accumulator::default();
    for s in samples {
        let pred = model.predict(&s.left, &s.right)?;
        acc.add(&pred, source.labels(s)?);
    }
    acc.report()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }))
}

fn diverged(epoch: usize, step: usize, reason: String, last_good: &Checkpoint) -> Error {
    Error::Diverged {
        epoch,
        step,
        reason,
        last_good: Box::new(last_good.clone()),
    }
}

/// Per-sample forward/backward; returns the loss terms and parameter
/// gradients.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    labels: &DisparityMap,
    loss: &LossConfig,
) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
    let (h, w) = (sample.height(), sample.width());
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Invalid(format!(
            "training sample {} is {h}×{w}; extents must be multiples of 16",
            sample.name
        )));
    }
    let targets = Targets::new(labels)?;
    let mut tape = Tape::new(&model.params, true);
    let l = tape.constant(sample.left.clone());
    let r = tape.constant(sample.right.clone());
    let out = model.forward(&mut tape, l, r, true)?;
    let (total, terms) = compute_loss(&mut tape, &out, &targets, loss)?;
    tape.backward(total)?;
    let grads = tape.param_grads().into_iter().map(|g| g.cloned()).collect();
    Ok((terms, grads))
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

struct Trainer<'a, 'cb> {
    model: &'a mut Model,
    schedule: &'a Schedule,
    source: LabelSource,
    stage: usize,
    on_event: &'a mut (dyn FnMut(Event) + 'cb),
}

impl Trainer<'_, '_> {
    fn checkpoint(&self, adam: &Adam, epoch: usize, step: usize, lr: f64) -> Checkpoint {
        let mut ck = Checkpoint::from_model(self.model, Some(adam));
        ck.set_meta("stage", self.stage);
        ck.set_meta("epoch", epoch);
        ck.set_meta("step", step);
        ck.set_meta("lr", lr);
        ck.set_meta("label_source", self.source);
        ck
    }

    fn save(&self, ck: &Checkpoint, file: &str) -> Result<()> {
        if let Some(dir) = &self.schedule.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            ck.save(&dir.join(file))?;
        }
        Ok(())
    }

    fn run(&mut self, train: &[Sample], val: &[Sample], log: &mut TrainLog) -> Result<TrainOutcome> {
        let sch = self.schedule;
        sch.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        for s in train {
            s.validate()?;
            self.source.labels(s)?;
        }
        if !val.is_empty() {
            for s in val {
                self.source.labels(s)?;
            }
        }
        let mut adam = Adam::new(&self.model.params);
        let mut lr = sch.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(sch.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0usize;
        let mut best: Option<(usize, MetricsReport, Checkpoint)> = None;
        let mut since_best = 0usize;
        let mut last_good = self.checkpoint(&adam, 0, 0, lr);

        'epochs: for epoch in 1..=sch.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(sch.batch_size) {
                let mut grads: Vec<Option<Tensor>> = vec![None; self.model.params.len()];
                let mut terms = LossTerms::default();
                let mut names = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let s = &train[i];
                    let labels = self.source.labels(s)?;
                    let (t, g) = match sample_gradients(self.model, s, labels, &sch.loss) {
                        Ok(v) => v,
                        Err(e) if is_divergence(&e) => {
                            return Err(diverged(epoch, step, format!("{e} on sample {}", s.name), &last_good))
                        }
                        Err(e) => return Err(e),
                    };
                    if !t.total.is_finite() {
                        return Err(diverged(epoch, step, format!("loss {} on sample {}", t.total, s.name), &last_good));
                    }
                    accumulate(&mut grads, g);
                    for (a, b) in [
                        (&mut terms.full, t.full),
                        (&mut terms.quarter, t.quarter),
                        (&mut terms.left8, t.left8),
                        (&mut terms.left16, t.left16),
                        (&mut terms.right8, t.right8),
                        (&mut terms.right16, t.right16),
                        (&mut terms.total, t.total),
                    ] {
                        *a += b / chunk.len() as f64;
                    }
                    names.push(s.name.clone());
                }
                let n = chunk.len() as f64;
                for g in grads.iter_mut().flatten() {
                    for v in g.data_mut() {
                        *v /= n;
                    }
                }
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(diverged(epoch, step, "non-finite gradient".into(), &last_good));
                }
                last_good = self.checkpoint(&adam, epoch, step, lr);
                adam.update(&mut self.model.params, &grads, lr)?;
                step += 1;
                epoch_loss += terms.total;
                batches += 1;
                let rec = StepRecord {
                    stage: self.stage,
                    epoch,
                    step,
                    source: self.source,
                    batch: names,
                    lr,
                    terms,
                };
                (self.on_event)(Event::Step(&rec));
                log.steps.push(rec);
                if sch.max_updates > 0 && step >= sch.max_updates {
                    self.finish_epoch(epoch, lr, epoch_loss / batches as f64, val, log, &adam, step, &mut best, &mut since_best)?;
                    break 'epochs;
                }
            }
            let improved =
                self.finish_epoch(epoch, lr, epoch_loss / batches.max(1) as f64, val, log, &adam, step, &mut best, &mut since_best)?;
            if !improved && since_best >= sch.patience.max(1) {
                lr = (lr * 0.5).max(sch.min_lr);
                since_best = 0;
            }
            if sch.checkpoint_every > 0 && epoch % sch.checkpoint_every == 0 {
                self.save(&self.checkpoint(&adam, epoch, step, lr), &format!("epoch_{epoch}.ckpt"))?;
            }
        }

        let final_ck = self.checkpoint(&adam, sch.epochs, step, lr);
        self.save(&final_ck, "last.ckpt")?;
        let (best_epoch, best_report) = match &best {
            Some((e, m, ck)) => {
                self.save(ck, "best.ckpt")?;
                if sch.keep_best {
                    let restored = ck.restore_model()?;
                    self.model.params = restored.params;
                }
                (Some(*e), Some(*m))
            }
            None => (None, None),
        };
        Ok(TrainOutcome {
            log: log.clone(),
            best_epoch,
            best: best_report,
            adam,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_epoch(
        &mut self,
        epoch: usize,
        lr: f64,
        train_loss: f64,
        val: &[Sample],
        log: &mut TrainLog,
        adam: &Adam,
        step: usize,
        best: &mut Option<(usize, MetricsReport, Checkpoint)>,
        since_best: &mut usize,
    ) -> Result<bool> {
        let validation = if val.is_empty() {
            None
        } else {
            Some(evaluate(self.model, val, self.source)?)
        };
        let rec = EpochRecord {
            stage: self.stage,
            epoch,
            source: self.source,
            lr,
            train_loss,
            validation,
        };
        (self.on_event)(Event::Epoch(&rec));
        log.epochs.push(rec);
        // Without a validation set the training loss decides.
        let score = validation.map_or(train_loss, |m| m.epe);
        let prev = best.as_ref().map(|(_, m, ck)| {
            if validation.is_some() {
                m.epe
            } else {
                ck.meta("train_loss").and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY)
            }
        });
        if prev.is_none_or(|p| score < p) {
            let mut ck = self.checkpoint(adam, epoch, step, lr);
            ck.set_meta("train_loss", train_loss);
            let report = validation.unwrap_or(MetricsReport {
                error1: f64::NAN,
                error2: f64::NAN,
                error3: f64::NAN,
                epe: f64::NAN,
                d1: f64::NAN,
                n_valid: 0,
            });
            *best = Some((epoch, report, ck));
            *since_best = 0;
            Ok(true)
        } else {
            *since_best += 1;
            Ok(false)
        }
    }
}

/// Trains `model` in place on `source` labels. Validation (when `val` is
/// non-empty) uses the same label source.
pub fn train(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    schedule: &Schedule,
    source: LabelSource,
    on_event: &mut dyn FnMut(Event),
) -> Result<TrainOutcome> {
    let mut log = TrainLog::default();
    Trainer {
        model,
        schedule,
        source,
        stage: 1,
        on_event,
    }
    .run(train, val, &mut log)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub log: TrainLog,
    pub stage1_best_epoch: Option<usize>,
    pub stage2: TrainOutcome,
}

/// Stage 1 trains on teacher labels; stage 2 restarts from the best stage-1
/// weights with a fresh optimizer and trains on ground truth. Every sample
/// must carry teacher labels.
pub fn distill(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    stage1: &Schedule,
    stage2: &Schedule,
    on_event: &mut dyn FnMut(Event),
) -> Result<DistillOutcome> {
    if let Some(s) = train.iter().chain(val).find(|s| s.teacher.is_none()) {
        return Err(Error::Invalid(format!(
            "distillation needs teacher labels for every sample; {} has none",
            s.name
        )));
    }
    let mut s1 = stage1.clone();
    s1.keep_best = true;
    s1.checkpoint_dir = stage1.checkpoint_dir.as_ref().map(|d| d.join("stage1"));
    let mut log = TrainLog::default();
    let first = Trainer {
        model,
        schedule: &s1,
        source: LabelSource::Teacher,
        stage: 1,
        on_event,
    }
    .run(train, val, &mut log)?;
    let mut s2 = stage2.clone();
    s2.checkpoint_dir = stage2.checkpoint_dir.as_ref().map(|d| d.join("stage2"));
    let second = Trainer {
        model,
        schedule: &s2,
        source: LabelSource::GroundTruth,
        stage: 2,
        on_event,
    }
    .run(train, val, &mut log)?;
    Ok(DistillOutcome {
        log,
        stage1_best_epoch: first.best_epoch,
        stage2: second,
    })
}

/// Stage-2 schedule derived from stage 1: a tenth of the rate and about a
/// sixth of the epochs.
pub fn stage2_schedule(stage1: &Schedule) -> Schedule {
    Schedule {
        epochs: stage1.epochs.div_ceil(6).max(1),
        lr: stage1.lr / 10.0,
        ..stage1.clone()
    }
}

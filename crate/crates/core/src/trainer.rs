//! Dataset splitting, Adam, and the epoch loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, SegSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_channels, EfpnModel};
use crate::nn::ParamStore;
use crate::tensor::{Gradients, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 8,
            split: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("TrainConfig.{msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} is outside [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        validate_ratios(self.split)
    }
}

fn validate_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios {r:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// Subset sizes: floor allocation for validation and test, remainder to train.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    validate_ratios(ratios)?;
    let val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    let sizes = [n - val - test, val, test];
    for (i, name) in ["train", "validation", "test"].iter().enumerate() {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            return Err(Error::config(format!(
                "{name} split is empty for {n} samples at ratio {}",
                ratios[i]
            )));
        }
    }
    Ok(sizes)
}

/// Seeded shuffle followed by a contiguous train / validation / test cut.
pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    let [a, b, _] = split_sizes(items.len(), ratios)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..a]), pick(&order[a..a + b]), pick(&order[a + b..])))
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Parameters
/// the gradient does not reach are treated as having zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = grads.param(i) {
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("gradient of {} is {} at element {j}", p.name, g[j])));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = grads.param(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let step = cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.epsilon);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("record serializes");
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "train_loss", "val_loss", "val_iou", "val_f1"])
                .expect("header");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss and confusion matrix of a model over a sample set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &EfpnModel, samples: &[SegSample], batch_size: usize) -> Result<Evaluation> {
    let k = model.num_classes();
    let mut confusion = ConfusionMatrix::new(k);
    let (mut loss_sum, mut pixels) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, masks) = make_batch(&refs)?;
        let mut tape = Tape::inference();
        let p = model.params().bind(&mut tape);
        let xv = tape.leaf(x);
        let logits = model.forward_tape(&mut tape, &p, xv)?;
        let loss = tape.cross_entropy_loss(logits, &masks, None)?;
        let n: usize = masks.iter().map(|m| m.len()).sum();
        loss_sum += tape.value(loss).item()? as f64 * n as f64;
        pixels += n;
        for (pred, gt) in argmax_channels(tape.value(logits)).iter().zip(&masks) {
            confusion.accumulate(pred, gt)?;
        }
    }
    Ok(Evaluation {
        loss: if pixels > 0 { loss_sum / pixels as f64 } else { f64::NAN },
        confusion,
    })
}

/// Training loop state; everything needed to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: EfpnModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
    pub best: Option<(f64, usize, ParamStore)>,
}

impl Trainer {
    pub fn new(model: EfpnModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            config,
            adam,
            epoch: 0,
            history: TrainHistory::default(),
            best: None,
        })
    }

    /// Runs one epoch: seeded shuffle, mini-batch Adam updates, validation.
    pub fn run_epoch(&mut self, train: &[SegSample], val: &[SegSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pixels) = (0.0, 0usize);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let refs: Vec<&SegSample> = idx.iter().map(|&i| &train[i]).collect();
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let (x, masks) = make_batch(&refs)?;
            let mut tape = Tape::new();
            let p = self.model.params().bind(&mut tape);
            let xv = tape.leaf(x);
            let logits = self.model.forward_tape(&mut tape, &p, xv).map_err(at)?;
            let loss = tape.cross_entropy_loss(logits, &masks, None).map_err(at)?;
            let n: usize = masks.iter().map(|m| m.len()).sum();
            loss_sum += tape.value(loss).item()? as f64 * n as f64;
            pixels += n;
            let grads = tape.backward(loss).map_err(at)?;
            adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.config).map_err(at)?;
        }
        let record = if val.is_empty() {
            EpochRecord {
                epoch,
                train_loss: loss_sum / pixels as f64,
                val_loss: f64::NAN,
                val_iou: f64::NAN,
                val_f1: f64::NAN,
            }
        } else {
            let ev = evaluate(&self.model, val, self.config.batch_size)?;
            EpochRecord {
                epoch,
                train_loss: loss_sum / pixels as f64,
                val_loss: ev.loss,
                val_iou: ev.confusion.mean_iou(true)?,
                val_f1: ev.confusion.f1_macro()?,
            }
        };
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => record.val_iou > *best || (best.is_nan() && !record.val_iou.is_nan()),
        };
        if improved || val.is_empty() {
            self.best = Some((record.val_iou, epoch, self.model.params().clone()));
        }
        self.epoch = epoch;
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete or `on_epoch`
    /// returns `false`.
    pub fn run(
        &mut self,
        train: &[SegSample],
        val: &[SegSample],
        mut on_epoch: impl FnMut(&EpochRecord) -> bool,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let r = self.run_epoch(train, val)?;
            if !on_epoch(&r) {
                break;
            }
        }
        Ok(())
    }

    /// The parameters with the best validation IoU so far, or the current
    /// ones when no epoch has run.
    pub fn best_model(&self) -> Result<EfpnModel> {
        let mut m = self.model.clone();
        if let Some((_, _, params)) = &self.best {
            m.set_params(params.clone())?;
        }
        Ok(m)
    }

    /// Optimizer and bookkeeping state (the model itself is saved as a
    /// checkpoint).
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = b"EFPT".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&(&self.config, &self.history.records, self.best.as_ref().map(|b| (b.0, b.1))))
            .expect("state serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    /// Restores a trainer from a model and [`Trainer::state_bytes`]. The
    /// best-so-far parameters are taken from `best` when given.
    pub fn restore(model: EfpnModel, state: &[u8], best: Option<EfpnModel>) -> Result<Self> {
        let fail = |m: &str| Error::data(format!("train state: {m}"));
        let mut r = ByteReader { buf: state, pos: 0 };
        if r.bytes(4)? != b"EFPT" || r.bytes(4)? != 1u32.to_le_bytes() {
            return Err(fail("bad magic or version"));
        }
        let epoch = r.u64()? as usize;
        let t = r.u64()?;
        let count = r.u64()? as usize;
        if count != model.params().len() {
            return Err(fail("parameter count does not match the model"));
        }
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for p in model.params().iter() {
            let len = r.u64()? as usize;
            if len != p.tensor.numel() {
                return Err(fail(&format!("moment length mismatch for {}", p.name)));
            }
            m.push(r.f64s(len)?);
            v.push(r.f64s(len)?);
        }
        let len = r.u64()? as usize;
        let json = r.bytes(len)?;
        let (config, records, best_meta): (TrainConfig, Vec<EpochRecord>, Option<(f64, usize)>) =
            serde_json::from_slice(json).map_err(|e| fail(&e.to_string()))?;
        let best = match (best_meta, best) {
            (Some((score, ep)), Some(b)) => Some((score, ep, b.params().clone())),
            (Some(_), None) => return Err(fail("state records a best model but none was supplied")),
            (None, _) => None,
        };
        Ok(Trainer {
            model,
            config,
            adam: AdamState { m, v, t },
            epoch,
            history: TrainHistory { records },
            best,
        })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::data("train state: truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::data("train state: overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Trains `model` on `train`, validating on `val` after every epoch.
/// Returns the trainer, whose `best_model()` is the best-validation-IoU
/// checkpoint.
pub fn train(model: EfpnModel, train_set: &[SegSample], val: &[SegSample], config: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(train_set, val, |_| true)?;
    Ok(t)
}

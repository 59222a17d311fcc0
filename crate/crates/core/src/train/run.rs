use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{Batch, Dataset, Modality};
use super::optim::{Optimizer, OptimizerConfig};
use crate::data::{Domain, Split};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossTargets};
use crate::model::{ForwardOptions, Rev2Net, Rev2NetConfig};
use crate::seed;
use crate::tensor::Tape;

/// Relative tolerance of the per-step check that the reported total equals
/// the weighted sum of its components.
pub const TOTAL_CHECK_TOL: f64 = 1e-6;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.bin";
pub const REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Root of every random stream: initialization, shuffling and latent noise.
    pub seed: u64,
    /// Dataset manifest (file or directory).
    pub manifest: Option<PathBuf>,
    /// Where checkpoints, metrics and reports go. Nothing is written without it.
    pub output_dir: Option<PathBuf>,
    /// Restrict training and evaluation to one domain.
    pub domain: Option<Domain>,
    /// Use only the first `n` training clips (in manifest order).
    pub max_train_clips: Option<usize>,
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            manifest: None,
            output_dir: None,
            domain: None,
            max_train_clips: None,
            modality: Modality::Rgb,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.max_train_clips == Some(0) {
            return Err(Error::config("train.max_train_clips", "must be >= 1"));
        }
        self.optimizer.validate()
    }
}

/// Checks that a model config can consume the configured input modality.
pub fn check_modality(model: &Rev2NetConfig, modality: Modality) -> Result<()> {
    match modality {
        Modality::Rgb if model.input_channels != 3 => {
            Err(Error::config("model.input_channels", "RGB input needs 3 channels"))
        }
        Modality::Flow if model.input_channels != 2 => {
            Err(Error::config("model.input_channels", "flow input needs 2 channels"))
        }
        Modality::Flow if model.flow_decoder || model.frame_decoder => Err(Error::config(
            "model",
            "flow-input models are plain classifiers without decoders",
        )),
        _ => Ok(()),
    }
}

/// Which samples a run trains on and which it reports held-out accuracy for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Selection {
    pub fn from_config(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mut train = data.indices(Split::Train, cfg.domain);
        if let Some(n) = cfg.max_train_clips {
            train.truncate(n);
        }
        let test = data.indices(Split::Test, cfg.domain);
        if train.is_empty() {
            return Err(Error::input("no training clips selected"));
        }
        Ok(Self { train, test })
    }

    pub fn all(&self) -> Vec<usize> {
        self.train.iter().chain(&self.test).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps of each logged breakdown field.
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
    /// SHA-256 over the clip ids of every batch in order.
    pub data_order: String,
    pub model: Rev2NetConfig,
    pub train: TrainConfig,
}

impl TrainReport {
    pub fn last(&self) -> &EpochReport {
        self.epochs.last().expect("at least one epoch")
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        ce: mean(|b| b.ce),
        ddp_high: mean(|b| b.ddp_high),
        ddp_low: mean(|b| b.ddp_low),
        flow: mean(|b| b.flow),
        recon: mean(|b| b.recon),
        total: mean(|b| b.total),
        weights: steps[0].weights,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains `model` in place with the weights and discrepancy mode from its
/// config. Every step logs its loss breakdown and checks that the total is
/// the weighted sum of the components.
pub fn train<T: Element>(
    model: &mut Rev2Net<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    sel: &Selection,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mc = model.config().clone();
    check_modality(&mc, cfg.modality)?;
    if sel.train.is_empty() {
        return Err(Error::input("no training clips selected"));
    }
    let start = Instant::now();
    let mut metrics = match &cfg.output_dir {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(METRICS_FILE);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut opt = Optimizer::<T>::new(cfg.optimizer)?;
    let mut order_hash = Sha256::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order = sel.train.clone();
        order.shuffle(&mut seed::rng(seed::indexed_seed(cfg.seed, "shuffle", epoch as u64)));
        let mut logged = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::<T>::assemble(data, chunk, cfg.modality, mc.flow_decoder, mc.frame_decoder)?;
            for id in &batch.clip_ids {
                order_hash.update(id.as_bytes());
                order_hash.update([0]);
            }
            let tape = Tape::new();
            let tracked = model.tracked(&tape);
            let noise = ForwardOptions::seeded(seed::indexed_seed(cfg.seed, "noise", step as u64));
            let out = tracked.forward_train(&batch.input, &noise)?;
            let targets = LossTargets {
                labels: &batch.labels,
                flows: batch.flows.as_ref(),
                reversed_frames: batch.reversed_frames.as_ref(),
            };
            let (total, breakdown) = total_loss(&out, &targets, &mc.weights, mc.ddp_mode)?;
            breakdown.check_total(TOTAL_CHECK_TOL)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Data(format!("non-finite loss at epoch {epoch} step {step}")));
            }
            total.backward()?;
            let next = opt.update(model.params(), tracked.params())?;
            model.set_params(next)?;
            let record = StepRecord {
                epoch,
                step,
                batch_size: chunk.len(),
                loss: breakdown,
            };
            log::debug!("epoch {epoch} step {step} total {:.6}", breakdown.total);
            if let Some((path, w)) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
            }
            logged.push(breakdown);
            step += 1;
        }
        let train_accuracy = accuracy(model, data, &sel.train, cfg.modality, cfg.batch_size)?;
        let test_accuracy = if sel.test.is_empty() {
            None
        } else {
            Some(accuracy(model, data, &sel.test, cfg.modality, cfg.batch_size)?)
        };
        let loss = mean_breakdown(&logged);
        log::info!(
            "epoch {epoch}/{}: loss {:.4} (ce {:.4}) train acc {:.3} test acc {}",
            cfg.epochs,
            loss.total,
            loss.ce,
            train_accuracy,
            test_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        epochs.push(EpochReport {
            epoch,
            steps: logged.len(),
            loss,
            train_accuracy,
            test_accuracy,
        });
    }
    if let Some((path, mut w)) = metrics {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = match &cfg.output_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            model.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let report = TrainReport {
        epochs,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint,
        data_order: hex::encode(order_hash.finalize()),
        model: mc,
        train: cfg.clone(),
    };
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok(report)
}

/// Predicted class per listed sample, via the inference path only.
pub fn predict<T: Element>(
    model: &Rev2Net<T>,
    data: &Dataset,
    indices: &[usize],
    modality: Modality,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = Batch::<T>::assemble(data, chunk, modality, false, false)?;
        let logits = model.forward_infer(&batch.input)?;
        let k = logits.dims()[1];
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of listed samples whose argmax logit equals the label.
pub fn accuracy<T: Element>(
    model: &Rev2Net<T>,
    data: &Dataset,
    indices: &[usize],
    modality: Modality,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let pred = predict(model, data, indices, modality, batch_size)?;
    let hits = pred
        .iter()
        .zip(indices)
        .filter(|(p, &i)| **p == data.samples[i].clip.label)
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Accuracy on one split of the dataset, optionally within one domain.
pub fn evaluate<T: Element>(
    model: &Rev2Net<T>,
    data: &Dataset,
    split: Split,
    domain: Option<Domain>,
    modality: Modality,
) -> Result<f64> {
    accuracy(model, data, &data.indices(split, domain), modality, 16)
}

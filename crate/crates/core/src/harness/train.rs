//! Supervised training and evaluation on id sequences.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::listops::{listops_generate, load_lra_tsv, GeneratorSpec, ListOpsSample, NUM_CLASSES};
use super::optim::{clip_grad_norm, cosine_warmup, AdamW, AdamWConfig};
use crate::model::{checkpoint, init_model, Model, ModelConfig};
use crate::nn::ForwardCtx;
use crate::rng::substream;
use crate::tensor::{Element, Tape, Tensor};
use crate::tokenizers::{TokenInput, TokenizerConfig};
use crate::{Error, Result};

/// Where the three splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Generated {
        train: usize,
        val: usize,
        test: usize,
        generator: GeneratorSpec,
    },
    Files {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Generated {
            train: 10_000,
            val: 1_000,
            test: 1_000,
            generator: GeneratorSpec::new(128, 3),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ListOpsSample>,
    pub val: Vec<ListOpsSample>,
    pub test: Vec<ListOpsSample>,
}

impl DataSpec {
    /// Generated splits are consecutive draws from one seeded stream.
    pub fn load(&self, seed: u64) -> Result<Splits> {
        match self {
            DataSpec::Generated {
                train,
                val,
                test,
                generator,
            } => {
                let mut all = listops_generate(train + val + test, generator, seed)?;
                let test_set = all.split_off(train + val);
                let val_set = all.split_off(*train);
                Ok(Splits {
                    train: all,
                    val: val_set,
                    test: test_set,
                })
            }
            DataSpec::Files { train, val, test } => Ok(Splits {
                train: load_lra_tsv(train)?,
                val: load_lra_tsv(val)?,
                test: test.as_deref().map(load_lra_tsv).transpose()?.unwrap_or_default(),
            }),
        }
    }
}

fn default_epochs() -> usize {
    40
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> usize {
    1
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Peak learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSpec,
    /// Stop once an epoch's training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_acc: Option<f64>,
    /// Evaluation worker cap (0 = one).
    #[serde(default)]
    pub eval_threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        match self.model.tokenizer {
            TokenizerConfig::Ids { .. } => Ok(()),
            _ => Err(Error::Config("training expects an id tokenizer".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub last: Model<f32>,
}

/// Output files written by [`train`] into its output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

fn numeric_context(e: Error, what: String) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("{what}: {e}"))
    } else {
        e
    }
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs AdamW with warmup-cosine schedule; keeps the best-validation model.
///
/// With `out_dir`, appends one JSON line per epoch to [`METRICS_FILE`] and
/// rewrites [`CHECKPOINT_FILE`] whenever validation accuracy improves.
pub fn train(config: &TrainConfig, splits: &Splits, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut model = init_model::<f32>(&config.model, config.seed)?;
    let mut opt = AdamW::new(config.optimizer, &model.params);
    let steps_per_epoch = splits.train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let warmup = config.warmup_epochs * steps_per_epoch;
    let mut history = Vec::new();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut substream(config.seed, &format!("shuffle.{epoch}")));
        let ctx = ForwardCtx::train(
            config.model.drop_path,
            substream(config.seed, &format!("drop_path.{epoch}")),
        );
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = cosine_warmup(step, total, warmup, config.lr);
            let ids: Vec<Vec<usize>> = batch.iter().map(|&i| splits.train[i].ids.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| splits.train[i].label).collect();
            let where_ = || format!("epoch {epoch}, step {step}, lr {lr:.3e}");

            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let logits = model
                .logits(&p, &ctx, &TokenInput::Ids(ids))
                .map_err(|e| numeric_context(e, where_()))?;
            let loss = logits
                .cross_entropy(&labels)
                .map_err(|e| numeric_context(e.into(), where_()))?;
            let loss_value = loss.value().item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("{}: loss is {loss_value}", where_())));
            }
            tape.backward(loss).map_err(|e| numeric_context(e.into(), where_()))?;

            let lv = logits.value();
            let classes = lv.shape()[1];
            correct += lv
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += loss_value * batch.len() as f64;

            let mut grads: Vec<Tensor<f32>> = p
                .vars()
                .iter()
                .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
                .collect();
            let norm = clip_grad_norm(&mut grads, config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("{}: gradient norm is {norm}", where_())));
            }
            opt.adamw_step(&mut model.params, &grads, lr);
            step += 1;
        }

        let n = splits.train.len() as f64;
        let val_acc = if splits.val.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, &splits.val, config.batch_size, config.eval_threads)?.accuracy
        };
        let record = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} val {:.4}",
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        if let Some((f, path)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        let score = if val_acc.is_nan() { record.train_acc } else { val_acc };
        if score > best.2 {
            best = (model.clone(), epoch, score);
            if let Some(dir) = out_dir {
                let meta = serde_json::json!({ "epoch": epoch, "val_acc": val_acc });
                checkpoint::save(&model, meta, &dir.join(CHECKPOINT_FILE))?;
            }
        }
        let stop = config.stop_at_train_acc.is_some_and(|t| record.train_acc >= t);
        history.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best: best.0,
        best_epoch: best.1,
        last: model,
    })
}

/// Anything that maps id sequences to class predictions.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn predict(&self, batch: &[Vec<usize>]) -> Result<Vec<usize>>;
}

impl<T: Element> Predictor for Model<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, batch: &[Vec<usize>]) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let logits = self.logits(&p, &ForwardCtx::eval(), &TokenInput::Ids(batch.to_vec()))?;
        let v = logits.value();
        Ok(v.data().chunks(v.shape()[1]).map(argmax).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub per_class: Vec<ClassCount>,
}

/// Argmax accuracy over `samples`, batched and spread over up to `threads` workers.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[ListOpsSample],
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport> {
    let classes = predictor.num_classes();
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::Data(format!(
            "label {} outside the model's {classes} classes",
            s.label
        )));
    }
    let batches: Vec<&[ListOpsSample]> = samples.chunks(batch_size.max(1)).collect();
    let workers = threads.clamp(1, batches.len().max(1));
    let run = |w: usize| -> Result<Vec<(usize, Vec<usize>)>> {
        (w..batches.len())
            .step_by(workers)
            .map(|b| {
                let ids: Vec<Vec<usize>> = batches[b].iter().map(|s| s.ids.clone()).collect();
                Ok((b, predictor.predict(&ids)?))
            })
            .collect()
    };
    let mut preds: Vec<(usize, Vec<usize>)> = if workers == 1 {
        run(0)?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers).map(|w| scope.spawn(move || run(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    preds.sort_by_key(|(b, _)| *b);

    let mut per_class = vec![ClassCount::default(); classes];
    let mut correct = 0;
    for (s, pred) in samples.iter().zip(preds.into_iter().flat_map(|(_, p)| p)) {
        per_class[s.label].total += 1;
        if pred == s.label {
            per_class[s.label].correct += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: if samples.is_empty() {
            0.0
        } else {
            correct as f64 / samples.len() as f64
        },
        n: samples.len(),
        per_class,
    })
}

/// Loads a checkpoint and checks it can read `samples`.
pub fn load_for_eval(path: &Path, samples: &[ListOpsSample]) -> Result<Model<f32>> {
    let (model, _) = checkpoint::load::<f32>(path)?;
    let TokenizerConfig::Ids { vocab, .. } = model.config.tokenizer else {
        return Err(Error::Config("checkpoint is not an id-sequence model".into()));
    };
    if model.config.num_classes < NUM_CLASSES {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, data has {NUM_CLASSES}",
            model.config.num_classes
        )));
    }
    if let Some(id) = samples.iter().flat_map(|s| s.ids.iter()).find(|&&id| id >= vocab) {
        return Err(Error::Config(format!("token id {id} outside checkpoint vocabulary of {vocab}")));
    }
    Ok(model)
}

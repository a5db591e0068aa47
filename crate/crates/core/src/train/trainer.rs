//! Training loop, run directory layout and checkpoint cadence.
//!
//! A run directory holds `config.json`, `metrics.csv` (one row per step),
//! `eval.csv` (one row per evaluation) and `checkpoints/step_NNNNNN.ckpt`.
//! Step 0 is always checkpointed, so a diverged run keeps at least one.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Architecture, EncoderConfig, Forward};
use crate::error::{config_err, Error, Result};
use crate::params::Parameters;
use crate::tape::Tape;
use crate::train::model::ToyModel;
use crate::train::optim::{Adam, AdamConfig, LrSchedule};
use crate::train::task::{Dataset, ToyTaskSpec};
use crate::SeededRng;

/// Batches the producer thread may prepare ahead of the optimizer.
pub const PREFETCH: usize = 2;
const BATCH_ORDER_SALT: u64 = 0x4241_5443;
const VALID_SEED_SALT: u64 = 0x5641_4c49;

fn default_architecture() -> Architecture {
    Architecture::Branchformer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    pub task: ToyTaskSpec,
    /// Fixed training set size; batches cycle through it in shuffled epochs.
    pub train_size: usize,
    pub valid_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate reached at the end of warmup.
    pub peak_lr: f64,
    pub warmup: usize,
    pub label_smoothing: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.task.validate()?;
        if self.encoder.input_dim != self.task.vocab {
            return config_err(format!(
                "encoder input_dim {} must equal the task vocabulary {}",
                self.encoder.input_dim, self.task.vocab
            ));
        }
        for (name, v) in [
            ("train_size", self.train_size),
            ("valid_size", self.valid_size),
            ("batch_size", self.batch_size),
            ("warmup", self.warmup),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return config_err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return config_err(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        LrSchedule::with_peak(self.peak_lr, self.encoder.d_model, self.warmup)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_acc: f64,
    pub valid_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub final_checkpoint: PathBuf,
    pub evals: Vec<EvalRecord>,
}

impl TrainOutcome {
    pub fn last(&self) -> EvalRecord {
        *self.evals.last().expect("step 0 is always evaluated")
    }

    /// First evaluated step whose training accuracy reached `threshold`.
    pub fn first_step_reaching(&self, threshold: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.train_acc >= threshold).map(|e| e.step)
    }
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Training and validation sets for a task; both depend only on `task.seed`.
pub fn datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::generate(
        &config.task,
        config.train_size,
        &mut SeededRng::seed_from_u64(config.task.seed),
    )?;
    let valid = validation_set(&config.task, config.valid_size)?;
    Ok((train, valid))
}

/// The first `n` samples of the validation stream of `task`.
pub fn validation_set(task: &ToyTaskSpec, n: usize) -> Result<Dataset> {
    Dataset::generate(task, n, &mut SeededRng::seed_from_u64(task.seed ^ VALID_SEED_SALT))
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, &mut |_| {})
}

/// Runs training; `progress` sees every evaluation as it happens.
pub fn train_with_progress(
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;

    let mut model = ToyModel::init(&config.encoder, config.architecture, &config.task)?;
    let schedule = LrSchedule::with_peak(config.peak_lr, config.encoder.d_model, config.warmup)?;
    let mut adam = Adam::new(config.adam, &model);
    let (train_set, valid_set) = datasets(config)?;
    let train_set = Arc::new(train_set);

    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    metrics.write_record(["step", "loss", "acc", "lr"])?;
    let mut eval_log = csv::Writer::from_path(out.join("eval.csv"))?;
    eval_log.write_record(["step", "train_acc", "valid_acc"])?;
    model.save(&checkpoint_path(out, 0))?;
    let mut evals = Vec::new();
    let mut evaluate = |model: &ToyModel, step: usize| -> Result<()> {
        let record = EvalRecord {
            step,
            train_acc: model.accuracy(&train_set.samples)?,
            valid_acc: model.accuracy(&valid_set.samples)?,
        };
        eval_log.write_record([
            step.to_string(),
            record.train_acc.to_string(),
            record.valid_acc.to_string(),
        ])?;
        eval_log.flush()?;
        progress(&record);
        evals.push(record);
        Ok(())
    };
    evaluate(&model, 0)?;

    let (tx, rx) = sync_channel(PREFETCH);
    let producer = {
        let data = Arc::clone(&train_set);
        let (steps, batch) = (config.steps, config.batch_size);
        let order_rng = SeededRng::seed_from_u64(config.task.seed ^ BATCH_ORDER_SALT);
        std::thread::spawn(move || {
            for b in data.batches(batch, order_rng).take(steps) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        })
    };

    let mut rng = SeededRng::seed_from_u64(config.encoder.seed.wrapping_add(1));
    let mut final_checkpoint = checkpoint_path(out, 0);
    let result = (|| -> Result<()> {
        for step in 1..=config.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Config("batch producer stopped early".into()))?;
            let tape = Tape::new();
            let output = model.batch_loss(&tape, &batch, &mut Forward::training(&mut rng), config.label_smoothing)?;
            let loss = output.loss.item();
            let acc = output.correct as f64 / output.total as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let grads = tape.backward(&output.loss)?;
            model.assign_grads(&grads);
            let lr = schedule.lr(step)?;
            adam.update(&mut model, lr)?;
            metrics.write_record([
                step.to_string(),
                loss.to_string(),
                acc.to_string(),
                lr.to_string(),
            ])?;
            if step % config.eval_every == 0 || step == config.steps {
                evaluate(&model, step)?;
            }
            if step % config.checkpoint_every == 0 || step == config.steps {
                final_checkpoint = checkpoint_path(out, step);
                model.save(&final_checkpoint)?;
            }
        }
        Ok(())
    })();
    metrics.flush()?;
    drop(rx);
    producer.join().map_err(|_| Error::Config("batch producer panicked".into()))?;
    result?;
    Ok(TrainOutcome {
        model,
        final_checkpoint,
        evals,
    })
}

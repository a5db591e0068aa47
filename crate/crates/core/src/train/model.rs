//! Encoder plus a linear classification head.

use std::path::Path;

use rand::SeedableRng;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{prune_to_cgmlp, Architecture, EncoderConfig, EncoderParams, Forward};
use crate::error::{config_err, Result};
use crate::nn::{linear, LinearParams};
use crate::params::{join, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::optim::{label_smoothed_ce, predictions};
use crate::train::task::{Batch, Sample, TaskKind, ToyTaskSpec};
use crate::SeededRng;

/// Offset mixed into the seed that initializes the head.
const HEAD_SEED_SALT: u64 = 0x4845_4144;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub encoder: EncoderParams,
    pub head: LinearParams,
    pub task: ToyTaskSpec,
}

impl Parameters for ToyModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Summed loss and accuracy counts over a batch.
pub struct BatchOutput {
    /// Mean of the per-sample losses.
    pub loss: Var,
    pub correct: usize,
    pub total: usize,
}

impl ToyModel {
    pub fn init(config: &EncoderConfig, architecture: Architecture, task: &ToyTaskSpec) -> Result<Self> {
        task.validate()?;
        if config.input_dim != task.vocab {
            return config_err(format!(
                "encoder input_dim {} must equal the task vocabulary {}",
                config.input_dim, task.vocab
            ));
        }
        let encoder = EncoderParams::init(config, architecture)?;
        let mut rng = SeededRng::seed_from_u64(config.seed ^ HEAD_SEED_SALT);
        let head = LinearParams::init(config.d_model, task.num_classes(), true, &mut rng);
        Ok(Self {
            encoder,
            head,
            task: task.clone(),
        })
    }

    /// `[1×C]` for sequence classification, `[L×C]` for per-position tasks.
    pub fn logits(&self, tape: &Tape, features: &Tensor, ctx: &mut Forward<'_>) -> Result<Var> {
        let h = self.encoder.forward(tape, &tape.constant(features.clone()), ctx)?;
        let h = match self.task.kind {
            TaskKind::SeqClass => tape.mean_rows(&h)?,
            TaskKind::SymbolCopy => h,
        };
        linear(tape, &h, &self.head)
    }

    pub fn batch_loss(
        &self,
        tape: &Tape,
        batch: &Batch,
        ctx: &mut Forward<'_>,
        label_smoothing: f64,
    ) -> Result<BatchOutput> {
        let mut total_loss: Option<Var> = None;
        let (mut correct, mut total) = (0, 0);
        for b in 0..batch.len() {
            let logits = self.logits(tape, &batch.sample(b), ctx)?;
            let targets = &batch.targets[b];
            let loss = label_smoothed_ce(tape, &logits, targets, label_smoothing)?;
            for (p, t) in predictions(logits.value()).iter().zip(targets) {
                correct += usize::from(p == t);
                total += 1;
            }
            total_loss = Some(match total_loss {
                None => loss,
                Some(acc) => tape.add(&acc, &loss)?,
            });
        }
        let loss = total_loss.ok_or_else(|| crate::Error::Config("empty batch".into()))?;
        Ok(BatchOutput {
            loss: tape.scale(&loss, 1.0 / batch.len() as f64),
            correct,
            total,
        })
    }

    /// Inference-mode accuracy over `samples` (per target).
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        self.accuracy_with(samples, |m, tape, x| m.logits(tape, x, &mut Forward::inference()))
    }

    /// Accuracy with every merge forced to the given branch weights.
    pub fn accuracy_forced(&self, samples: &[Sample], weights: [f64; 2]) -> Result<f64> {
        self.accuracy_with(samples, |m, tape, x| {
            m.logits(tape, x, &mut Forward::inference().with_forced_weights(weights))
        })
    }

    fn accuracy_with(
        &self,
        samples: &[Sample],
        run: impl Fn(&Self, &Tape, &Tensor) -> Result<Var>,
    ) -> Result<f64> {
        if samples.is_empty() {
            return config_err("no samples to evaluate");
        }
        let (mut correct, mut total) = (0, 0);
        for s in samples {
            let tape = Tape::inference();
            let logits = run(self, &tape, &s.features)?;
            for (p, t) in predictions(logits.value()).iter().zip(&s.targets) {
                correct += usize::from(p == t);
                total += 1;
            }
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn prune(&self) -> Result<Self> {
        Ok(Self {
            encoder: prune_to_cgmlp(&self.encoder)?,
            ..self.clone()
        })
    }

    fn header(&self) -> Result<std::collections::BTreeMap<String, String>> {
        let mut h = self.encoder.header();
        h.insert("task".into(), serde_json::to_string(&self.task)?);
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_params(self.header()?, self).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let task: ToyTaskSpec = serde_json::from_str(ckpt.get("task")?)
            .map_err(|e| CheckpointError::Header(format!("task: {e}")))?;
        let encoder = EncoderParams::skeleton_from_header(&ckpt.header)?;
        let mut model = Self {
            head: LinearParams::init(
                encoder.config.d_model,
                task.num_classes(),
                true,
                &mut SeededRng::seed_from_u64(0),
            ),
            encoder,
            task,
        };
        ckpt.restore_into(&mut model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::encoder::MergeKind;
    use crate::train::task::generate_toy_batch;

    fn task(kind: TaskKind) -> ToyTaskSpec {
        ToyTaskSpec {
            kind,
            vocab: 7,
            length: 8,
            noise: 0.1,
            seed: 2,
        }
    }

    #[test]
    fn logits_shapes_and_round_trip() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let dir = tempfile::tempdir().unwrap();
        for kind in [TaskKind::SeqClass, TaskKind::SymbolCopy] {
            let m = ToyModel::init(&c, Architecture::Branchformer, &task(kind)).unwrap();
            let batch = generate_toy_batch(&m.task, 2, &mut SeededRng::seed_from_u64(1)).unwrap();
            let tape = Tape::inference();
            let logits = m.logits(&tape, &batch.sample(0), &mut Forward::inference()).unwrap();
            let rows = if kind == TaskKind::SeqClass { 1 } else { 8 };
            assert_eq!(logits.shape(), &[rows, m.task.num_classes()]);

            let path = dir.path().join("m.ckpt");
            m.save(&path).unwrap();
            let back = ToyModel::load(&path).unwrap();
            assert_eq!(back, m);
            let pruned = m.prune().unwrap();
            pruned.save(&path).unwrap();
            assert!(ToyModel::load(&path).unwrap().encoder.is_pruned());
        }
    }

    #[test]
    fn input_dim_must_match_vocab() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let mut t = task(TaskKind::SeqClass);
        t.vocab = 8;
        assert!(ToyModel::init(&c, Architecture::Branchformer, &t).is_err());
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let c = EncoderConfig::toy(AttentionKind::Fastformer, MergeKind::Concat);
        let m = ToyModel::init(&c, Architecture::Branchformer, &task(TaskKind::SeqClass)).unwrap();
        let batch = generate_toy_batch(&m.task, 3, &mut SeededRng::seed_from_u64(4)).unwrap();
        let tape = Tape::inference();
        let out = m.batch_loss(&tape, &batch, &mut Forward::inference(), 0.1).unwrap();
        let mut sum = 0.0;
        for b in 0..3 {
            let logits = m.logits(&tape, &batch.sample(b), &mut Forward::inference()).unwrap();
            sum += label_smoothed_ce(&tape, &logits, &batch.targets[b], 0.1).unwrap().item();
        }
        assert!((out.loss.item() - sum / 3.0).abs() < 1e-12);
        assert_eq!(out.total, 3);
    }
}

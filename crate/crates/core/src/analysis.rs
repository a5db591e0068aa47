//! Branch-weight profiles and attention diagonality.

use std::path::Path;

use serde::Serialize;

use crate::encoder::{Architecture, EncoderParams, Forward, Layer, MergeParams, Probe};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `Cᵢ = 1 − Σⱼ aᵢⱼ|i−j| / maxⱼ|i−j|` for the 1-based row index `i`.
pub fn centrality(row: &[f64], i: usize) -> Result<f64> {
    let t = row.len();
    if t < 2 {
        return Err(TensorError::Contract(format!("centrality needs T ≥ 2, got {t}")).into());
    }
    if i == 0 || i > t {
        return Err(TensorError::Contract(format!("row index {i} outside 1..={t}")).into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&a| a < 0.0) {
        return Err(TensorError::Contract(format!(
            "attention row {i} is not a distribution (sums to {sum})"
        ))
        .into());
    }
    let max_disp = (i - 1).max(t - i) as f64;
    let spread: f64 = row
        .iter()
        .enumerate()
        .map(|(j, &a)| a * (j + 1).abs_diff(i) as f64)
        .sum();
    Ok(1.0 - spread / max_disp)
}

/// Mean centrality over the rows of a square attention matrix.
pub fn diagonality(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(TensorError::Contract(format!(
            "diagonality needs a square matrix, got {:?}",
            a.shape()
        ))
        .into());
    }
    let t = a.rows();
    let mut total = 0.0;
    for i in 0..t {
        total += centrality(a.row(i), i + 1)?;
    }
    Ok(total / t as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBranchWeights {
    pub layer: usize,
    pub mean_w_att: f64,
    pub mean_w_mlp: f64,
    pub std_w_att: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchWeightLog {
    pub samples: usize,
    pub layers: Vec<LayerBranchWeights>,
}

impl BranchWeightLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "mean_w_att", "mean_w_mlp", "std"])?;
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                l.mean_w_att.to_string(),
                l.mean_w_mlp.to_string(),
                l.std_w_att.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Inference-mode merge weights per layer, averaged over `samples`.
pub fn collect_branch_weights(model: &EncoderParams, samples: &[Tensor]) -> Result<BranchWeightLog> {
    let weighted = model.architecture == Architecture::Branchformer
        && model.blocks.iter().all(|b| {
            matches!(
                b,
                Layer::Branch(p) if !matches!(p.merge, MergeParams::Concat(_))
            )
        });
    if !weighted {
        return Err(Error::Unsupported(
            "branch weights exist only for weighted_average merges".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Config("no samples to analyze".into()));
    }
    let n_layers = model.blocks.len();
    let mut per_layer: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(samples.len()); n_layers];
    for x in samples {
        let mut probe = Probe::default();
        let tape = Tape::inference();
        model.forward(&tape, &tape.constant(x.clone()), &mut Forward::inference().with_probe(&mut probe))?;
        for (layer, w) in probe.branch_weights {
            per_layer[layer].push(w);
        }
    }
    let layers = per_layer
        .iter()
        .enumerate()
        .map(|(layer, ws)| {
            let att: Vec<f64> = ws.iter().map(|w| w[0]).collect();
            let mlp: Vec<f64> = ws.iter().map(|w| w[1]).collect();
            let (mean_w_att, std_w_att) = mean_std(&att);
            LayerBranchWeights {
                layer,
                mean_w_att,
                mean_w_mlp: mean_std(&mlp).0,
                std_w_att,
            }
        })
        .collect();
    Ok(BranchWeightLog {
        samples: samples.len(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagonalityReport {
    pub samples: usize,
    /// `(layer, D)`: per sample the mean over heads, then the mean over samples.
    pub layers: Vec<(usize, f64)>,
}

impl DiagonalityReport {
    /// Unweighted mean over layers.
    pub fn mean(&self) -> f64 {
        self.layers.iter().map(|l| l.1).sum::<f64>() / self.layers.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "D"])?;
        for (layer, d) in &self.layers {
            w.write_record([layer.to_string(), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Diagonality of every MHSA layer. Needs at least two frames after subsampling.
pub fn collect_diagonality(model: &EncoderParams, samples: &[Tensor]) -> Result<DiagonalityReport> {
    let mhsa_layers: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| match b {
            Layer::Transformer(_) => true,
            Layer::Branch(p) => p.attention.as_ref().is_some_and(|a| {
                a.attention.kind() == crate::attention::AttentionKind::Mhsa
            }),
        })
        .map(|(i, _)| i)
        .collect();
    if mhsa_layers.is_empty() {
        return Err(Error::Unsupported("model has no MHSA layers to analyze".into()));
    }
    if samples.is_empty() {
        return Err(Error::Config("no samples to analyze".into()));
    }
    let mut sums = vec![0.0; model.blocks.len()];
    for x in samples {
        let mut probe = Probe {
            capture_attention: true,
            ..Probe::default()
        };
        let tape = Tape::inference();
        model.forward(&tape, &tape.constant(x.clone()), &mut Forward::inference().with_probe(&mut probe))?;
        for (layer, maps) in &probe.attention_maps {
            let mut per_head = 0.0;
            for m in maps {
                per_head += diagonality(m)?;
            }
            sums[*layer] += per_head / maps.len() as f64;
        }
    }
    let n = samples.len() as f64;
    Ok(DiagonalityReport {
        samples: samples.len(),
        layers: mhsa_layers.into_iter().map(|l| (l, sums[l] / n)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::encoder::{EncoderConfig, MergeKind};
    use rand::SeedableRng;

    #[test]
    fn centrality_examples() {
        assert_eq!(centrality(&[0.0, 1.0, 0.0], 2).unwrap(), 1.0);
        assert_eq!(centrality(&[0.0, 1.0], 1).unwrap(), 0.0);
        let u = [1.0 / 3.0; 3];
        assert!((centrality(&u, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(centrality(&[0.5, 0.6], 1).is_err());
        assert!(centrality(&[1.0], 1).is_err());
        assert!(centrality(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn diagonality_examples() {
        for t in 2..=64 {
            assert_eq!(diagonality(&Tensor::eye(t)).unwrap(), 1.0);

            // Anti-identity: row i (1-based) sits |T+1−2i| away from the
            // diagonal out of a possible max(i−1, T−i).
            let mut rev = Tensor::zeros(&[t, t]);
            // All mass at the farthest column of each row.
            let mut far = Tensor::zeros(&[t, t]);
            let mut expect = 0.0;
            for i in 1..=t {
                rev.data_mut()[(i - 1) * t + (t - i)] = 1.0;
                let j = if i - 1 >= t - i { 1 } else { t };
                far.data_mut()[(i - 1) * t + (j - 1)] = 1.0;
                expect += 1.0 - (t + 1).abs_diff(2 * i) as f64 / (i - 1).max(t - i) as f64;
            }
            let d = diagonality(&rev).unwrap();
            assert!((d - expect / t as f64).abs() < 1e-12, "T={t}");
            assert_eq!(diagonality(&far).unwrap(), 0.0);
        }
        let rev2 = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(diagonality(&rev2).unwrap(), 0.0);
        let u = Tensor::full(&[3, 3], 1.0 / 3.0);
        assert!((diagonality(&u).unwrap() - 4.0 / 9.0).abs() < 1e-10);
    }

    #[test]
    fn branch_weights_single_sample_has_zero_std() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let m = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        let x = Tensor::uniform(&[27, 7], 1.0, &mut crate::SeededRng::seed_from_u64(1));
        let log = collect_branch_weights(&m, &[x]).unwrap();
        assert_eq!(log.layers.len(), 2);
        for l in &log.layers {
            assert_eq!(l.std_w_att, 0.0);
            assert!((l.mean_w_att + l.mean_w_mlp - 1.0).abs() < 1e-10);
        }
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::Concat);
        let m = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        assert!(matches!(
            collect_branch_weights(&m, &[Tensor::zeros(&[27, 7])]),
            Err(Error::Unsupported(_))
        ));
    }
}

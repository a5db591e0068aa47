//! Synthetic sequence tasks.
//!
//! Every token occupies [`FRAMES_PER_TOKEN`] input frames and the input ends
//! with [`PAD_FRAMES`] silent frames, so a sequence of `L` tokens has
//! `4L + 3` frames and the subsampler yields exactly `L` positions, position
//! `p` seeing token `p` in the middle of its receptive field.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::input_len_for;
use crate::tensor::Tensor;

pub const FRAMES_PER_TOKEN: usize = 4;
pub const PAD_FRAMES: usize = 3;

/// Symbols with a fixed role in [`TaskKind::SeqClass`].
pub const TRIGRAM: [usize; 3] = [1, 2, 3];
pub const MARKER_A: usize = 4;
pub const MARKER_B: usize = 5;
pub const SEQ_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One label per sequence: `2·[1 2 3 occurs] + [A occurs ≥ ⌈L/2⌉ positions before B]`.
    SeqClass,
    /// One label per position: the token at that position.
    SymbolCopy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub kind: TaskKind,
    /// Number of symbols; also the input feature dimension.
    pub vocab: usize,
    /// Tokens per sequence (positions after subsampling).
    pub length: usize,
    /// Standard deviation of Gaussian noise added to every feature.
    pub noise: f64,
    pub seed: u64,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return config_err(format!("task length must be at least 2, got {}", self.length));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return config_err(format!("noise must be finite and nonnegative, got {}", self.noise));
        }
        match self.kind {
            TaskKind::SeqClass if self.vocab < 6 => {
                config_err(format!("seq_class needs at least 6 symbols, got {}", self.vocab))
            }
            TaskKind::SeqClass if self.length < 6 => {
                config_err(format!("seq_class needs at least 6 tokens, got {}", self.length))
            }
            TaskKind::SymbolCopy if self.vocab < 2 => {
                config_err(format!("symbol_copy needs at least 2 symbols, got {}", self.vocab))
            }
            _ => Ok(()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::SeqClass => SEQ_CLASSES,
            TaskKind::SymbolCopy => self.vocab,
        }
    }

    pub fn frames(&self) -> usize {
        input_len_for(self.length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[frames × vocab]`
    pub features: Tensor,
    pub tokens: Vec<usize>,
    /// One entry for `SeqClass`, `length` entries for `SymbolCopy`.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B × frames × vocab]`
    pub features: Tensor,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `[frames × vocab]` features of sample `b`.
    pub fn sample(&self, b: usize) -> Tensor {
        let (t, f) = (self.features.shape()[1], self.features.shape()[2]);
        let data = self.features.data()[b * t * f..(b + 1) * t * f].to_vec();
        Tensor::new(&[t, f], data).expect("batch slice shape")
    }

    pub fn from_samples(samples: &[Sample]) -> Self {
        let shape = samples[0].features.shape();
        let mut data = Vec::with_capacity(samples.len() * shape[0] * shape[1]);
        for s in samples {
            data.extend_from_slice(s.features.data());
        }
        Self {
            features: Tensor::new(&[samples.len(), shape[0], shape[1]], data)
                .expect("samples share a shape"),
            targets: samples.iter().map(|s| s.targets.clone()).collect(),
        }
    }
}

/// `SeqClass` label of a token sequence.
pub fn seq_class_label(tokens: &[usize]) -> usize {
    let local = tokens.windows(3).any(|w| w == TRIGRAM);
    let gap = tokens.len().div_ceil(2);
    let mut first_a = None;
    let mut far = false;
    for (j, &tok) in tokens.iter().enumerate() {
        if tok == MARKER_A && first_a.is_none() {
            first_a = Some(j);
        }
        if tok == MARKER_B && first_a.is_some_and(|i| j >= i + gap) {
            far = true;
        }
    }
    2 * usize::from(local) + usize::from(far)
}

/// One-hot frames for `tokens` plus silent padding, with additive noise.
pub fn render<R: Rng + ?Sized>(tokens: &[usize], vocab: usize, noise: f64, rng: &mut R) -> Tensor {
    let frames = tokens.len() * FRAMES_PER_TOKEN + PAD_FRAMES;
    let mut data = vec![0.0; frames * vocab];
    for (p, &tok) in tokens.iter().enumerate() {
        for k in 0..FRAMES_PER_TOKEN {
            data[(p * FRAMES_PER_TOKEN + k) * vocab + tok] = 1.0;
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise is finite and nonnegative");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    Tensor::new(&[frames, vocab], data).expect("rendered shape")
}

fn filler_symbols(vocab: usize) -> Vec<usize> {
    (0..vocab).filter(|&s| s != MARKER_A && s != MARKER_B).collect()
}

/// Tokens whose label is `class`: exactly one `A` and one `B` per sequence,
/// the trigram inserted or excluded as required. Retries on accidental
/// trigrams among the filler.
fn seq_class_tokens<R: Rng + ?Sized>(class: usize, spec: &ToyTaskSpec, rng: &mut R) -> Vec<usize> {
    let l = spec.length;
    let gap = l.div_ceil(2);
    let fillers = filler_symbols(spec.vocab);
    let want_local = class >= 2;
    let want_far = class % 2 == 1;
    loop {
        let mut tokens: Vec<usize> = (0..l).map(|_| fillers[rng.random_range(0..fillers.len())]).collect();
        let (a, b) = if want_far {
            let a = rng.random_range(0..l - gap);
            (a, rng.random_range(a + gap..l))
        } else if rng.random_bool(0.5) {
            // B first, any distance.
            let b = rng.random_range(0..l - 1);
            (rng.random_range(b + 1..l), b)
        } else {
            // A first, closer than the gap.
            let a = rng.random_range(0..l - 1);
            (a, rng.random_range(a + 1..(a + gap).min(l)))
        };
        if want_local {
            let free: Vec<usize> = (0..=l - 3)
                .filter(|&p| ![a, b].iter().any(|&m| (p..p + 3).contains(&m)))
                .collect();
            if free.is_empty() {
                continue;
            }
            let p = free[rng.random_range(0..free.len())];
            tokens[p..p + 3].copy_from_slice(&TRIGRAM);
        }
        tokens[a] = MARKER_A;
        tokens[b] = MARKER_B;
        if seq_class_label(&tokens) == class {
            return tokens;
        }
    }
}

pub fn generate_sample<R: Rng + ?Sized>(spec: &ToyTaskSpec, rng: &mut R) -> Sample {
    let (tokens, targets) = match spec.kind {
        TaskKind::SeqClass => {
            let class = rng.random_range(0..SEQ_CLASSES);
            (seq_class_tokens(class, spec, rng), vec![class])
        }
        TaskKind::SymbolCopy => {
            let tokens: Vec<usize> = (0..spec.length).map(|_| rng.random_range(0..spec.vocab)).collect();
            (tokens.clone(), tokens)
        }
    };
    Sample {
        features: render(&tokens, spec.vocab, spec.noise, rng),
        tokens,
        targets,
    }
}

/// `n` samples with classes drawn uniformly. Deterministic in `rng`.
pub fn generate_samples<R: Rng + ?Sized>(spec: &ToyTaskSpec, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..n).map(|_| generate_sample(spec, rng)).collect())
}

pub fn generate_toy_batch<R: Rng + ?Sized>(spec: &ToyTaskSpec, batch: usize, rng: &mut R) -> Result<Batch> {
    if batch == 0 {
        return config_err("batch size must be positive");
    }
    Ok(Batch::from_samples(&generate_samples(spec, batch, rng)?))
}

/// A fixed set of samples shuffled into batches epoch by epoch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate<R: Rng + ?Sized>(spec: &ToyTaskSpec, n: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            samples: generate_samples(spec, n, rng)?,
        })
    }

    /// Endless batches of `batch` samples; each epoch is a fresh permutation.
    pub fn batches<'a, R: Rng + 'a>(&'a self, batch: usize, mut rng: R) -> impl Iterator<Item = Batch> + 'a {
        let mut order: Vec<usize> = Vec::new();
        std::iter::from_fn(move || {
            let mut picked = Vec::with_capacity(batch);
            while picked.len() < batch {
                if order.is_empty() {
                    order = (0..self.samples.len()).collect();
                    order.shuffle(&mut rng);
                }
                picked.push(self.samples[order.pop().expect("nonempty")].clone());
            }
            Some(Batch::from_samples(&picked))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;
    use rand::SeedableRng;

    fn spec(kind: TaskKind, noise: f64) -> ToyTaskSpec {
        ToyTaskSpec {
            kind,
            vocab: 7,
            length: 12,
            noise,
            seed: 1,
        }
    }

    /// Labels from an exhaustive search over windows and position pairs.
    fn brute_force_label(tokens: &[usize]) -> usize {
        let l = tokens.len();
        let mut local = false;
        for p in 0..l {
            if p + 2 < l && tokens[p] == 1 && tokens[p + 1] == 2 && tokens[p + 2] == 3 {
                local = true;
            }
        }
        let mut far = false;
        for i in 0..l {
            for j in 0..l {
                if tokens[i] == MARKER_A && tokens[j] == MARKER_B && j > i && 2 * (j - i) >= l {
                    far = true;
                }
            }
        }
        (if local { 2 } else { 0 }) + (if far { 1 } else { 0 })
    }

    #[test]
    fn same_seed_same_batch() {
        let s = spec(TaskKind::SeqClass, 0.2);
        let a = generate_toy_batch(&s, 8, &mut SeededRng::seed_from_u64(3)).unwrap();
        let b = generate_toy_batch(&s, 8, &mut SeededRng::seed_from_u64(3)).unwrap();
        assert!(a.features.bit_eq(&b.features));
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn zero_noise_is_one_hot() {
        let s = spec(TaskKind::SymbolCopy, 0.0);
        let sample = generate_sample(&s, &mut SeededRng::seed_from_u64(4));
        assert_eq!(sample.features.shape(), &[51, 7]);
        for (p, &tok) in sample.tokens.iter().enumerate() {
            for k in 0..FRAMES_PER_TOKEN {
                let row = sample.features.row(p * FRAMES_PER_TOKEN + k);
                for (j, &v) in row.iter().enumerate() {
                    assert_eq!(v, if j == tok { 1.0 } else { 0.0 });
                }
            }
        }
        for f in 48..51 {
            assert!(sample.features.row(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn labels_match_brute_force() {
        let s = spec(TaskKind::SeqClass, 0.1);
        let mut rng = SeededRng::seed_from_u64(5);
        let samples = generate_samples(&s, 1000, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for smp in &samples {
            assert_eq!(smp.targets[0], brute_force_label(&smp.tokens), "{:?}", smp.tokens);
            assert_eq!(smp.tokens.iter().filter(|&&t| t == MARKER_A).count(), 1);
            assert_eq!(smp.tokens.iter().filter(|&&t| t == MARKER_B).count(), 1);
            counts[smp.targets[0]] += 1;
        }
        assert!(counts.iter().all(|&c| c > 200), "{counts:?}");
        // Random token strings exercise the labeler beyond the generator's cases.
        for _ in 0..1000 {
            let l = rng.random_range(2..20);
            let toks: Vec<usize> = (0..l).map(|_| rng.random_range(0..7)).collect();
            assert_eq!(seq_class_label(&toks), brute_force_label(&toks), "{toks:?}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(TaskKind::SeqClass, 0.1);
        s.vocab = 5;
        assert!(s.validate().is_err());
        let mut s = spec(TaskKind::SeqClass, 0.1);
        s.noise = -1.0;
        assert!(s.validate().is_err());
        assert_eq!(spec(TaskKind::SeqClass, 0.0).frames(), 51);
    }

    #[test]
    fn dataset_batches_cover_each_epoch() {
        let s = spec(TaskKind::SymbolCopy, 0.0);
        let ds = Dataset::generate(&s, 6, &mut SeededRng::seed_from_u64(6)).unwrap();
        let mut seen: Vec<Vec<usize>> = ds
            .batches(3, SeededRng::seed_from_u64(7))
            .take(2)
            .flat_map(|b| b.targets)
            .collect();
        let mut all: Vec<Vec<usize>> = ds.samples.iter().map(|s| s.targets.clone()).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
    }
}

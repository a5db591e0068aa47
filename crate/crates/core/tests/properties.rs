use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;

use branchformer::analysis::{collect_branch_weights, diagonality};
use branchformer::attention::{attention_pooling, scaled_dot_attention, AttentionKind, AttnPoolingParams};
use branchformer::encoder::{
    merge_weighted_average, Architecture, EncoderConfig, EncoderParams, Forward, MergeKind, MergeParams,
};
use branchformer::nn::{depthwise_conv1d, layer_norm, subsampled_len, DepthwiseConvParams, LayerNormParams};
use branchformer::params::Parameters;
use branchformer::tape::Tape;
use branchformer::tensor::Tensor;
use branchformer::train::{label_smoothed_ce, ToyModel, ToyTaskSpec, TaskKind};
use branchformer::SeededRng;

fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

fn matrix(rows: usize, cols: usize, bound: f64, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], bound, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_concat_round_trip_is_exact(rows in 1usize..9, half in 1usize..9, seed in any::<u64>()) {
        let tape = Tape::new();
        let x = tape.constant(matrix(rows, 2 * half, 2.0, seed));
        let (a, b) = tape.split_half(&x).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        prop_assert!(back.value().bit_eq(x.value()));
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        rows in 1usize..6, cols in 1usize..12, shift in -50.0f64..50.0, seed in any::<u64>()
    ) {
        let tape = Tape::inference();
        let x = matrix(rows, cols, 5.0, seed);
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = tape.softmax(&tape.constant(x)).to_tensor();
        let b = tape.softmax(&tape.constant(shifted)).to_tensor();
        for i in 0..rows {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..6, d in 2usize..32, seed in any::<u64>()) {
        let tape = Tape::inference();
        let x = matrix(rows, d, 3.0, seed);
        let y = layer_norm(&tape, &tape.constant(x.clone()), &LayerNormParams::new(d)).unwrap().to_tensor();
        for i in 0..rows {
            let xr = x.row(i);
            let xm = xr.iter().sum::<f64>() / d as f64;
            let xv = xr.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / d as f64;
            prop_assume!(xv > 1e-3);
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_kernel_conv_is_identity(t in 1usize..20, c in 1usize..8, half_k in 0usize..4, seed in any::<u64>()) {
        let k = 2 * half_k + 1;
        let mut kernel = Tensor::zeros(&[c, k]);
        for ch in 0..c {
            kernel.data_mut()[ch * k + half_k] = 1.0;
        }
        let p = DepthwiseConvParams { kernel, bias: Tensor::zeros(&[c]) };
        let x = matrix(t, c, 2.0, seed);
        let tape = Tape::inference();
        let y = depthwise_conv1d(&tape, &tape.constant(x.clone()), &p).unwrap();
        prop_assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn attention_rows_are_distributions_and_outputs_convex(
        t in 1usize..10, dk in 1usize..6, dv in 1usize..6, seed in any::<u64>()
    ) {
        let tape = Tape::inference();
        let q = tape.constant(matrix(t, dk, 2.0, seed));
        let k = tape.constant(matrix(t, dk, 2.0, seed ^ 1));
        let v = matrix(t, dv, 2.0, seed ^ 2);
        let mut maps = Vec::new();
        let out = scaled_dot_attention(&tape, &q, &k, &tape.constant(v.clone()), Some(&mut maps)).unwrap();
        for i in 0..t {
            let row = maps[0].row(i);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        for j in 0..dv {
            let col: Vec<f64> = (0..t).map(|i| v.get2(i, j)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..t {
                let o = out.value().get2(i, j);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pooling_ignores_sequence_duplication(t in 1usize..10, d in 1usize..8, seed in any::<u64>()) {
        let y = matrix(t, d, 2.0, seed);
        let p = AttnPoolingParams::init(d, &mut rng(seed ^ 3));
        let tape = Tape::inference();
        let once = attention_pooling(&tape, &tape.constant(y.clone()), &p).unwrap();
        let twice = attention_pooling(&tape, &tape.constant(Tensor::vstack(&[&y, &y]).unwrap()), &p).unwrap();
        prop_assert!(once.value().max_abs_diff(twice.value()) < 1e-10);
    }

    #[test]
    fn weighted_merge_is_a_convex_combination(t in 1usize..8, d in 1usize..8, seed in any::<u64>()) {
        let MergeParams::WeightedAverage(p) =
            MergeParams::init(MergeKind::WeightedAverage, d, 0.0, &mut rng(seed))
        else {
            unreachable!()
        };
        let ya = matrix(t, d, 3.0, seed ^ 4);
        let ym = matrix(t, d, 3.0, seed ^ 5);
        let tape = Tape::inference();
        let (y, [wa, wm]) =
            merge_weighted_average(&tape, &tape.constant(ya.clone()), &tape.constant(ym.clone()), &p, None).unwrap();
        prop_assert!(wa >= 0.0 && wm >= 0.0);
        prop_assert!((wa + wm - 1.0).abs() < 1e-12);
        for ((o, a), m) in y.data().iter().zip(ya.data()).zip(ym.data()) {
            prop_assert!(*o >= a.min(*m) - 1e-12 && *o <= a.max(*m) + 1e-12);
        }
    }

    #[test]
    fn diagonality_of_symmetric_matrix_survives_transpose(t in 2usize..12, seed in any::<u64>()) {
        // Half uniform, half a random permutation averaged with its transpose.
        let mut r = rng(seed);
        let mut perm: Vec<usize> = (0..t).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let mut a = Tensor::full(&[t, t], 0.5 / t as f64);
        for (i, &j) in perm.iter().enumerate() {
            a.data_mut()[i * t + j] += 0.25;
            a.data_mut()[j * t + i] += 0.25;
        }
        let at = a.transpose2().unwrap();
        prop_assert_eq!(diagonality(&a).unwrap().to_bits(), diagonality(&at).unwrap().to_bits());
    }

    #[test]
    fn smoothed_ce_of_equal_logits_is_log_classes(c in 2usize..12, level in -5.0f64..5.0, eps in 0.0f64..0.5) {
        let tape = Tape::inference();
        let logits = tape.constant(Tensor::full(&[1, c], level));
        let loss = label_smoothed_ce(&tape, &logits, &[0], eps).unwrap().item();
        prop_assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), n in 1usize..5) {
        use branchformer::checkpoint::Checkpoint;
        let tensors: Vec<Tensor> = (0..n).map(|i| matrix(i + 1, 3, 1e3, seed ^ i as u64)).collect();
        let mut header = std::collections::BTreeMap::new();
        header.insert("seed".to_string(), seed.to_string());
        let ckpt = Checkpoint::from_params(header, &tensors);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let mut restored: Vec<Tensor> = (0..n).map(|i| Tensor::zeros(&[i + 1, 3])).collect();
        back.restore_into(&mut restored).unwrap();
        for (a, b) in tensors.iter().zip(&restored) {
            prop_assert!(a.bit_eq(b));
        }
    }
}

#[test]
fn subsampled_length_matches_closed_form() {
    for t in 7..=512 {
        assert_eq!(subsampled_len(t), Some((t - 7) / 4 + 1), "T={t}");
    }
    for t in 0..7 {
        assert_eq!(subsampled_len(t), None);
    }
}

#[test]
fn replayed_forward_backward_is_bit_identical() {
    let config = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
    let params = EncoderParams::init(&config, Architecture::Branchformer).unwrap();
    let x = matrix(27, 7, 1.0, 9);
    let run = || {
        let tape = Tape::new();
        let input = tape.leaf(x.clone());
        let y = params.forward(&tape, &input, &mut Forward::inference()).unwrap();
        let loss = tape.sum(&tape.mul_const(&y, Rc::new(vec![0.5; y.value().numel()])).unwrap());
        let grads = tape.backward(&loss).unwrap();
        let mut flat = y.to_tensor().into_data();
        flat.extend_from_slice(grads.wrt(&input).unwrap());
        params.visit("", &mut |_, t| flat.extend_from_slice(grads.for_tensor(t).unwrap_or(&[])));
        flat
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn branch_weight_logs_repeat_exactly() {
    let config = EncoderConfig::toy(AttentionKind::Fastformer, MergeKind::WeightedAverage);
    let samples: Vec<Tensor> = (0..5).map(|s| matrix(31, 7, 1.0, s)).collect();
    let log = || {
        let params = EncoderParams::init(&config, Architecture::Branchformer).unwrap();
        collect_branch_weights(&params, &samples).unwrap()
    };
    let (a, b) = (log(), log());
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert_eq!(x.mean_w_att.to_bits(), y.mean_w_att.to_bits());
        assert_eq!(x.mean_w_mlp.to_bits(), y.mean_w_mlp.to_bits());
        assert_eq!(x.std_w_att.to_bits(), y.std_w_att.to_bits());
    }
}

#[test]
fn untrained_seqclass_loss_is_near_log_classes() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/seqclass_mhsa.json")).unwrap();
    let config = branchformer::train::TrainConfig::from_json(&text).unwrap();
    let task = ToyTaskSpec { kind: TaskKind::SeqClass, ..config.task.clone() };
    let model = ToyModel::init(&config.encoder, config.architecture, &task).unwrap();
    let batch = branchformer::train::generate_toy_batch(&task, 64, &mut rng(11)).unwrap();
    let tape = Tape::inference();
    let loss = model
        .batch_loss(&tape, &batch, &mut Forward::inference(), config.label_smoothing)
        .unwrap()
        .loss
        .item();
    let expect = (task.num_classes() as f64).ln();
    assert!((loss - expect).abs() < 0.05 * expect, "loss {loss} vs ln C {expect}");
}

//! Central-difference verification of analytic gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{Architecture, EncoderConfig, EncoderParams, Forward};
use crate::error::Result;
use crate::nn::input_len_for;
use crate::params::Parameters;
use crate::tape::{Corruption, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn extend(&mut self, other: GradReport) {
        self.groups.extend(other.groups);
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            let status = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{status:>4}  {:<60} {:.3e}  ({} elements)", g.name, g.max_rel_error, g.elements)?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks gradients of a scalar function with respect to each of its inputs.
/// `make_tape` builds the tape for the analytic pass; finite differences use
/// inference tapes.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor],
    make_tape: &dyn Fn() -> Tape,
    f: &dyn Fn(&Tape, &[Var]) -> Result<Var>,
) -> Result<GroupError> {
    let tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for e in 0..xs[i].numel() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][e], numeric));
            elements += 1;
        }
    }
    Ok(GroupError {
        name: name.to_string(),
        max_rel_error: worst,
        elements,
    })
}

/// Checks every parameter of `params` against finite differences of `loss`.
/// One report group per named parameter tensor.
pub fn check_params<P: Parameters>(
    params: &mut P,
    make_tape: &dyn Fn() -> Tape,
    loss: &dyn Fn(&Tape, &P) -> Result<Var>,
    tolerance: f64,
) -> Result<GradReport> {
    let tape = make_tape();
    let l = loss(&tape, params)?;
    let grads = tape.backward(&l)?;
    let mut analytic = Vec::new();
    params.visit("", &mut |name, t| {
        let g = grads
            .for_tensor(t)
            .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
        analytic.push((name.to_string(), g));
    });
    drop(grads);
    drop(tape);

    let mut groups = Vec::with_capacity(analytic.len());
    for (pi, (name, g)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (e, &a) in g.iter().enumerate() {
            let orig = nudge(params, pi, e, None);
            nudge(params, pi, e, Some(orig + FD_STEP));
            let up = loss(&Tape::inference(), params)?.item();
            nudge(params, pi, e, Some(orig - FD_STEP));
            let down = loss(&Tape::inference(), params)?.item();
            nudge(params, pi, e, Some(orig));
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            elements: g.len(),
        });
    }
    Ok(GradReport { tolerance, groups })
}

/// Reads (and optionally overwrites) element `e` of the `pi`-th parameter.
fn nudge<P: Parameters>(params: &mut P, pi: usize, e: usize, value: Option<f64>) -> f64 {
    let mut idx = 0;
    let mut old = 0.0;
    params.visit_mut("", &mut |_, t| {
        if idx == pi {
            old = t.data()[e];
            if let Some(v) = value {
                t.data_mut()[e] = v;
            }
        }
        idx += 1;
    });
    old
}

/// Random linear functional `Σ rᵢ yᵢ`, used to reduce a tensor output to a
/// scalar without symmetric cancellations (e.g. `Σ softmax = 1`).
pub fn project(tape: &Tape, y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(&[y.value().numel()], 1.0, &mut rng).into_data();
    let weighted = tape.mul_const(y, Rc::new(r))?;
    Ok(tape.sum(&weighted))
}

/// Gradient checks for every primitive on the tape, inputs drawn from `[-2, 2]`.
pub fn primitive_suite(seed: u64, corruption: Option<Corruption>) -> Result<GradReport> {
    let make_tape = move || match corruption {
        Some(c) => Tape::new().with_corruption(c),
        None => Tape::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 2.0, &mut rng);
    let mut groups = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let project_out = |t: &Tape, v: &[Var]| -> Result<Var> { project(t, &f(t, v)?, 99) };
        groups.push(check_inputs(name, &inputs, &make_tape, &project_out)?);
        Ok(())
    };

    run("matmul", vec![u(&[3, 4]), u(&[4, 2])], &|t, v| Ok(t.matmul(&v[0], &v[1])?))?;
    run("transpose", vec![u(&[3, 2])], &|t, v| Ok(t.transpose(&v[0])?))?;
    run("add", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| Ok(t.add(&v[0], &v[1])?))?;
    run("sub", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| Ok(t.sub(&v[0], &v[1])?))?;
    run("mul", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| Ok(t.mul(&v[0], &v[1])?))?;
    run("scale", vec![u(&[2, 3])], &|t, v| Ok(t.scale(&v[0], -1.7)))?;
    run("scalar_mul", vec![u(&[1]), u(&[3, 2])], &|t, v| Ok(t.scalar_mul(&v[0], &v[1])?))?;
    run("repeat_rows", vec![u(&[1, 3])], &|t, v| Ok(t.repeat_rows(&v[0], 4)?))?;
    run("sum", vec![u(&[2, 2])], &|t, v| Ok(t.scale(&t.sum(&v[0]), 1.3)))?;
    run("mean_rows", vec![u(&[4, 3])], &|t, v| Ok(t.mean_rows(&v[0])?))?;
    run("slice_cols", vec![u(&[3, 5])], &|t, v| Ok(t.slice_cols(&v[0], 1, 3)?))?;
    run("concat_cols", vec![u(&[3, 2]), u(&[3, 1])], &|t, v| Ok(t.concat_cols(v)?))?;
    run("reshape", vec![u(&[2, 6])], &|t, v| Ok(t.reshape(&v[0], &[3, 4])?))?;
    run("softmax", vec![u(&[3, 4])], &|t, v| Ok(t.softmax(&v[0])))?;
    run("log_softmax", vec![u(&[3, 4])], &|t, v| Ok(t.log_softmax(&v[0])))?;
    run("layer_norm", vec![u(&[3, 5]), u(&[5]), u(&[5])], &|t, v| {
        Ok(t.layer_norm(&v[0], &v[1], &v[2], crate::nn::LAYER_NORM_EPS)?)
    })?;
    run("gelu", vec![u(&[3, 4])], &|t, v| Ok(t.gelu(&v[0])))?;
    let mask: Rc<Vec<f64>> = Rc::new(vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0]);
    run("mul_const", vec![u(&[2, 3])], &move |t, v| Ok(t.mul_const(&v[0], mask.clone())?))?;
    run("depthwise_conv1d", vec![u(&[6, 3]), u(&[3, 3]), u(&[3])], &|t, v| {
        Ok(t.depthwise_conv1d(&v[0], &v[1], &v[2])?)
    })?;
    run("conv2d", vec![u(&[7, 9, 2]), u(&[3, 3, 3, 2]), u(&[3])], &|t, v| {
        Ok(t.conv2d(&v[0], &v[1], &v[2], 2)?)
    })?;
    run("scaled_dot_attention", vec![u(&[4, 3]), u(&[5, 3]), u(&[5, 2])], &|t, v| {
        Ok(t.scaled_dot_attention(&v[0], &v[1], &v[2], 0.6, false)?.0)
    })?;

    Ok(GradReport {
        tolerance: DEFAULT_TOLERANCE,
        groups,
    })
}

/// Parameters are moved this far (uniformly) from their initial values before
/// an encoder check. Fresh initialization is a near-degenerate point (unit
/// LayerNorm gains, almost uniform pooling) where some gradients are small
/// enough to sit at the finite-difference noise floor.
pub const ENCODER_JITTER: f64 = 0.3;

/// Multiplies the projected encoder output. Central differences at step 1e-5
/// resolve about `ulp(loss) / 2e-5`; with an O(1) loss that noise (~1e-11)
/// exceeds the 1e-8 floor of [`relative_error`] and any element whose true
/// gradient is near zero fails on rounding alone.
pub const ENCODER_LOSS_SCALE: f64 = 1e-3;

/// Checks every encoder parameter and the input features for a sequence of
/// `seq_len` frames after subsampling. Dropout is off for the check.
pub fn check_encoder(
    config: &EncoderConfig,
    architecture: Architecture,
    seq_len: usize,
    tolerance: f64,
) -> Result<GradReport> {
    let mut params = EncoderParams::init(config, architecture)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    params.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-ENCODER_JITTER..=ENCODER_JITTER);
        }
    });
    let x = Tensor::uniform(&[input_len_for(seq_len), config.input_dim], 1.0, &mut rng);
    let loss = |tape: &Tape, p: &EncoderParams, x: &Var| -> Result<Var> {
        let y = p.forward(tape, x, &mut Forward::inference())?;
        Ok(tape.scale(&project(tape, &y, config.seed)?, ENCODER_LOSS_SCALE))
    };
    let mut report = check_params(
        &mut params,
        &Tape::new,
        &|tape, p| loss(tape, p, &tape.constant(x.clone())),
        tolerance,
    )?;
    report.groups.push(check_inputs(
        "input",
        std::slice::from_ref(&x),
        &Tape::new,
        &|tape, v| loss(tape, &params, &v[0]),
    )?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-10) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn every_primitive_passes() {
        let report = primitive_suite(2024, None).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.groups.len(), 21);
    }

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = crate::nn::LinearParams::init(3, 2, true, &mut rng);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let report = check_params(
            &mut p,
            &Tape::new,
            &|t, p| {
                let y = crate::nn::linear(t, &t.constant(x.clone()), p)?;
                Ok(t.sum(&t.mul(&y, &y)?))
            },
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_rule_is_named() {
        let c = Corruption {
            op: "gelu",
            factor: 1.01,
        };
        let report = primitive_suite(2024, Some(c)).unwrap();
        let failed: Vec<_> = report.failures().iter().map(|g| g.name.clone()).collect();
        assert_eq!(failed, vec!["gelu".to_string()]);
    }
}

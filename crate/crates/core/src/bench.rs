//! Forward-time scaling measurements and log-log slope fits.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use serde::Serialize;

use crate::attention::AttentionKind;
use crate::encoder::{prune_to_cgmlp, Architecture, EncoderConfig, EncoderParams, MergeKind};
use crate::error::{Error, Result};
use crate::nn::input_len_for;
use crate::tensor::Tensor;
use crate::SeededRng;

pub const WARMUP_REPS: usize = 2;
pub const MIN_REPS: usize = 5;
/// A single timed call shorter than this is repeated inside one measurement.
const MIN_MEASUREMENT: Duration = Duration::from_millis(1);
const MAX_INNER_CALLS: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub t: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub points: Vec<BenchPoint>,
    pub slope: f64,
    pub stderr: f64,
}

impl BenchResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["T", "median_s", "mean_s", "std_s"])?;
        for p in &self.points {
            w.write_record([
                p.t.to_string(),
                p.median_s.to_string(),
                p.mean_s.to_string(),
                p.std_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_fit_json(&self, path: &Path) -> Result<()> {
        let fit = serde_json::json!({ "slope": self.slope, "stderr": self.stderr });
        std::fs::write(path, serde_json::to_string_pretty(&fit)? + "\n")?;
        Ok(())
    }
}

/// Ordinary least squares of `ln t` on `ln T`: `(slope, standard error)`.
pub fn loglog_slope_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::Bench(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Bench(format!("nonpositive point {p:?}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Bench("all T values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let stderr = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, stderr))
}

fn validate_grid(tgrid: &[usize], reps: usize) -> Result<()> {
    if tgrid.len() < 4 {
        return Err(Error::Bench(format!("T grid needs at least 4 points, got {}", tgrid.len())));
    }
    if tgrid.windows(2).any(|w| w[0] >= w[1]) || tgrid[0] == 0 {
        return Err(Error::Bench(format!("T grid must be positive and ascending: {tgrid:?}")));
    }
    if tgrid[tgrid.len() - 1] < 8 * tgrid[0] {
        return Err(Error::Bench(format!("T grid must span at least 8x: {tgrid:?}")));
    }
    if reps < MIN_REPS {
        return Err(Error::Bench(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    Ok(())
}

fn summarize(t: usize, samples: &mut [f64]) -> BenchPoint {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    BenchPoint {
        t,
        median_s: median,
        mean_s: mean,
        std_s: var.sqrt(),
        reps: n,
    }
}

/// Times `run(T)` for every `T` in the grid on the calling thread. Calls
/// too quick for the timer are batched (doubling up to 4096 per
/// measurement) and reported per call.
pub fn forward_time_benchmark(
    run: &mut dyn FnMut(usize) -> Result<()>,
    tgrid: &[usize],
    reps: usize,
) -> Result<BenchResult> {
    validate_grid(tgrid, reps)?;
    let mut points = Vec::with_capacity(tgrid.len());
    for &t in tgrid {
        for _ in 0..WARMUP_REPS {
            run(t)?;
        }
        let mut inner = 1;
        loop {
            let start = Instant::now();
            for _ in 0..inner {
                run(t)?;
            }
            if start.elapsed() >= MIN_MEASUREMENT {
                break;
            }
            if inner >= MAX_INNER_CALLS {
                return Err(Error::Bench(format!(
                    "T={t}: {inner} calls still finish below the timer floor"
                )));
            }
            inner *= 2;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            for _ in 0..inner {
                run(t)?;
            }
            samples.push(start.elapsed().as_secs_f64() / inner as f64);
        }
        points.push(summarize(t, &mut samples));
    }
    let fit: Vec<(f64, f64)> = points.iter().map(|p| (p.t as f64, p.median_s)).collect();
    let (slope, stderr) = loglog_slope_fit(&fit)?;
    Ok(BenchResult {
        points,
        slope,
        stderr,
    })
}

/// Busy-waits for `d`; used by the synthetic scaling controls.
pub fn spin_for(d: Duration) {
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

/// The small encoder the scaling benchmarks time: one block, d = 16,
/// d_hidden = 64, two heads, kernel 7.
pub fn toy_bench_config(attention: AttentionKind) -> EncoderConfig {
    EncoderConfig {
        num_blocks: 1,
        d_model: 16,
        d_hidden: 64,
        heads: 2,
        kernel_size: 7,
        attention,
        merge: MergeKind::WeightedAverage,
        dropout: 0.0,
        branch_dropout: 0.0,
        seed: 0,
        input_dim: 7,
    }
}

/// Encoder inference timing: `batch` random inputs with `T` frames after
/// subsampling, run one after another.
pub fn encoder_benchmark(
    config: &EncoderConfig,
    pruned: bool,
    tgrid: &[usize],
    reps: usize,
    batch: usize,
) -> Result<BenchResult> {
    let mut model = EncoderParams::init(config, Architecture::Branchformer)?;
    if pruned {
        model = prune_to_cgmlp(&model)?;
    }
    let mut rng = SeededRng::seed_from_u64(config.seed);
    let mut inputs: Option<(usize, Vec<Tensor>)> = None;
    let mut run = |t: usize| -> Result<()> {
        if inputs.as_ref().map(|(n, _)| *n) != Some(t) {
            let xs = (0..batch)
                .map(|_| Tensor::uniform(&[input_len_for(t), config.input_dim], 1.0, &mut rng))
                .collect();
            inputs = Some((t, xs));
        }
        for x in &inputs.as_ref().expect("inputs prepared").1 {
            std::hint::black_box(model.infer(x)?);
        }
        Ok(())
    };
    forward_time_benchmark(&mut run, tgrid, reps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        for k in [1.0, 2.0] {
            let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0, 128.0, 512.0]
                .iter()
                .map(|&t: &f64| (t, 3e-7 * t.powf(k)))
                .collect();
            let (slope, se) = loglog_slope_fit(&pts).unwrap();
            assert!((slope - k).abs() < 1e-9);
            assert!(se < 1e-9);
        }
        let (slope, _) = loglog_slope_fit(&[(2.0, 4.0), (4.0, 16.0), (8.0, 64.0)]).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(loglog_slope_fit(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(loglog_slope_fit(&[(1.0, 1.0), (2.0, 0.0), (4.0, 1.0)]).is_err());
        assert!(loglog_slope_fit(&[(-1.0, 1.0), (2.0, 1.0), (4.0, 1.0)]).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut noop = |_: usize| Ok(());
        assert!(forward_time_benchmark(&mut noop, &[1, 2, 4], 5).is_err());
        assert!(forward_time_benchmark(&mut noop, &[1, 2, 3, 4], 5).is_err());
        assert!(forward_time_benchmark(&mut noop, &[8, 4, 16, 64], 5).is_err());
        assert!(forward_time_benchmark(&mut noop, &[1, 2, 4, 8], 4).is_err());
    }

    #[test]
    fn median_summary() {
        let p = summarize(3, &mut [3.0, 1.0, 2.0, 10.0]);
        assert_eq!(p.median_s, 2.5);
        assert_eq!(p.mean_s, 4.0);
        assert_eq!(p.reps, 4);
    }
}

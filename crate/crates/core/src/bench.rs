//! Timing harnesses: attention scaling with sequence length and model
//! throughput in frames per second.
//!
//! Every measurement discards one warm-up run and reports order statistics
//! over at least [`MIN_REPS`] timed runs of a monotonic clock. Everything
//! runs on the calling thread.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{flop_count, linformer_mha, standard_mha, AttentionMode, LinformerParams, MhaParams};
use crate::data::{preprocess, synthetic_frame, PreprocConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

pub const MIN_REPS: usize = 5;
pub const MIN_FRAMES: usize = 100;

/// Median and 10th/90th percentiles of wall-time samples, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub reps: usize,
}

impl TimingStats {
    /// Linear-interpolated percentiles of `samples`.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::contract("timing needs finite samples"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Ok(TimingStats {
            median_s: pct(0.5),
            p10_s: pct(0.1),
            p90_s: pct(0.9),
            reps: s.len(),
        })
    }
}

/// Runs `f` once untimed, then `reps` timed times.
pub fn measure<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<TimingStats> {
    let reps = reps.max(MIN_REPS);
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    TimingStats::from_samples(&samples)
}

/// Median time of measuring an empty workload.
pub fn harness_overhead() -> Result<f64> {
    Ok(measure(101, || {
        black_box(());
        Ok(())
    })?
    .median_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// `standard`, `linear` or `model`.
    pub mode: String,
    /// Sequence length (attention) or batch size (model).
    pub n: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub reps: usize,
    /// Analytic multiply-accumulate count of one timed call.
    pub flops: u64,
    /// Frames per second, model benchmarks only.
    pub fps: Option<f64>,
    pub threads: usize,
}

impl BenchResult {
    fn new(mode: String, n: usize, t: TimingStats, flops: u64, fps: Option<f64>) -> Self {
        BenchResult {
            mode,
            n,
            median_s: t.median_s,
            p10_s: t.p10_s,
            p90_s: t.p90_s,
            reps: t.reps,
            flops,
            fps,
            threads: 1,
        }
    }
}

pub fn check_seq_lens(seq_lens: &[usize]) -> Result<()> {
    if seq_lens.len() < 3 {
        return Err(Error::contract("need at least 3 sequence lengths"));
    }
    if seq_lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!("sequence lengths {seq_lens:?} are not strictly ascending")));
    }
    if seq_lens[0] == 0 || seq_lens[seq_lens.len() - 1] < 8 * seq_lens[0] {
        return Err(Error::contract("sequence lengths must span at least 8×"));
    }
    Ok(())
}

/// Times one forward pass of single-sequence attention at each length.
/// Low-rank mode uses projection rank `k` (clamped to `n`).
pub fn attention_scaling(
    mode: AttentionMode,
    seq_lens: &[usize],
    d_model: usize,
    heads: usize,
    k: usize,
    reps: usize,
) -> Result<Vec<BenchResult>> {
    check_seq_lens(seq_lens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(seq_lens.len());
    for &n in seq_lens {
        let x = Tensor::<f32>::randn([n, d_model], 1.0, &mut rng);
        let rank = k.min(n);
        let stats = match mode {
            AttentionMode::Standard => {
                let p = MhaParams::random(d_model, heads, 0.1, &mut rng)?;
                measure(reps, || {
                    black_box(standard_mha(&x, &p)?);
                    Ok(())
                })?
            }
            AttentionMode::Linear => {
                let p = LinformerParams::random(d_model, heads, n, rank, true, 0.1, &mut rng)?;
                measure(reps, || {
                    black_box(linformer_mha(&x, &p)?);
                    Ok(())
                })?
            }
        };
        out.push(BenchResult::new(
            mode.to_string(),
            n,
            stats,
            flop_count(mode, n, d_model, heads, rank),
            None,
        ));
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("slope needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::contract("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("slope needs distinct x values"));
    }
    Ok(sxy / sxx)
}

/// Slope of median wall time against sequence length.
pub fn time_slope(results: &[BenchResult]) -> Result<f64> {
    let xs: Vec<f64> = results.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.median_s).collect();
    loglog_slope(&xs, &ys)
}

/// Slope of the analytic count against sequence length.
pub fn flop_slope(results: &[BenchResult]) -> Result<f64> {
    let xs: Vec<f64> = results.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.flops as f64).collect();
    loglog_slope(&xs, &ys)
}

/// Multiply-accumulate count of one frame's forward pass.
pub fn model_flop_count(c: &ViTConfig) -> u64 {
    let (n, d, m) = (c.seq_len(), c.hidden_size as u64, c.mlp_size as u64);
    let embed = (c.n_patches() * c.patch_dim()) as u64 * d;
    let block = flop_count(c.attention_mode, n, c.hidden_size, c.heads, c.proj_rank) + 2 * n as u64 * d * m;
    embed + c.layers as u64 * block + d * c.num_classes as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub layers: usize,
    pub n_frames: usize,
    pub batch_size: usize,
    /// Forward passes on already preprocessed frames.
    pub model: BenchResult,
    /// Preprocessing of raw 8-bit frames plus the forward pass.
    pub end_to_end: BenchResult,
    pub model_latency_s: f64,
}

/// Inference throughput over `n_frames` synthetic frames in batches of
/// `batch_size`.
pub fn throughput(model: &ViTModel<f32>, n_frames: usize, batch_size: usize) -> Result<ThroughputReport> {
    throughput_with_reps(model, n_frames, batch_size, MIN_REPS)
}

pub fn throughput_with_reps(
    model: &ViTModel<f32>,
    n_frames: usize,
    batch_size: usize,
    reps: usize,
) -> Result<ThroughputReport> {
    if n_frames < MIN_FRAMES {
        return Err(Error::contract(format!("throughput needs at least {MIN_FRAMES} frames")));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let c = model.config();
    if c.channels != 3 {
        return Err(Error::contract("throughput frames are three-channel"));
    }
    let size = c.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let raw: Vec<Tensor<f32>> = (0..n_frames).map(|i| synthetic_frame(i % 3, size, &mut rng)).collect();
    let pcfg = PreprocConfig {
        target_size: size,
        ..Default::default()
    };
    let stack = |frames: &[Tensor<f32>]| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
        for f in frames {
            data.extend_from_slice(f.data());
        }
        Tensor::new([frames.len(), c.channels, size, size], data)
    };
    let prepped: Vec<Tensor<f32>> = raw.iter().map(|f| preprocess(f, &pcfg)).collect::<Result<_>>()?;
    let batches: Vec<Tensor<f32>> = prepped.chunks(batch_size).map(stack).collect::<Result<_>>()?;

    let model_t = measure(reps, || {
        for b in &batches {
            black_box(model.forward(b)?);
        }
        Ok(())
    })?;
    let e2e_t = measure(reps, || {
        for chunk in raw.chunks(batch_size) {
            let p: Vec<Tensor<f32>> = chunk.iter().map(|f| preprocess(f, &pcfg)).collect::<Result<_>>()?;
            black_box(model.forward(&stack(&p)?)?);
        }
        Ok(())
    })?;
    let flops = model_flop_count(c) * n_frames as u64;
    let fps = |t: &TimingStats| n_frames as f64 / t.median_s;
    Ok(ThroughputReport {
        layers: c.layers,
        n_frames,
        batch_size,
        model: BenchResult::new("model".into(), batch_size, model_t, flops, Some(fps(&model_t))),
        end_to_end: BenchResult::new("end-to-end".into(), batch_size, e2e_t, flops, Some(fps(&e2e_t))),
        model_latency_s: model_t.median_s / n_frames as f64,
    })
}

pub const CSV_HEADER: &str = "mode,n,median_s,p10_s,p90_s,flops,fps";

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let fps = r.fps.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.mode, r.n, r.median_s, r.p10_s, r.p90_s, r.flops, fps
        );
    }
    s
}

//! Single-threaded forward-latency measurement.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::config::{BranchMode, FusionMode, ModelConfig};
use crate::error::{contract, Result};
use crate::model::{ModelInput, XFormerModel};
use crate::params::ParamStore;
use crate::tensor::Graph;

/// Multiply-add count of attention scores and value mixing (`4·Tq·Tk·d` per
/// attention map) across the whole block stack, both branches present.
pub fn attention_flops(cfg: &ModelConfig) -> u64 {
    let (ti, tk, d) = (
        cfg.image_tokens() as u64,
        cfg.keypoint_tokens() as u64,
        cfg.d_model as u64,
    );
    let b = &cfg.blocks;
    let (img, kp) = (
        cfg.branches.has_image_branch(),
        cfg.branches.has_keypoint_branch(),
    );
    let self_layers = (b.n_front + b.n_back) as u64;
    let mut per_block = 0;
    if img {
        per_block += self_layers * 4 * ti * ti * d;
    }
    if kp {
        per_block += self_layers * 4 * tk * tk * d;
    }
    if cfg.branches == BranchMode::Both && b.fusion == FusionMode::CrossAttention {
        per_block += b.n_cross as u64 * 2 * 4 * ti * tk * d;
    }
    per_block * b.n_blocks as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    /// Counted by the graph during one forward pass.
    pub forward_flops: u64,
    pub attention_flops: u64,
    pub image_tokens: usize,
    pub keypoint_tokens: usize,
    pub tokens_per_sec: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "iterations      {} (+{} warmup)",
            self.iterations, self.warmup
        );
        let _ = writeln!(s, "median_ms       {:.3}", self.median_ms);
        let _ = writeln!(s, "p95_ms          {:.3}", self.p95_ms);
        let _ = writeln!(s, "mean_ms         {:.3}", self.mean_ms);
        let _ = writeln!(s, "forward_flops   {}", self.forward_flops);
        let _ = writeln!(s, "attention_flops {}", self.attention_flops);
        let _ = writeln!(
            s,
            "tokens          {} image + {} keypoint",
            self.image_tokens, self.keypoint_tokens
        );
        let _ = writeln!(s, "tokens_per_sec  {:.1}", self.tokens_per_sec);
        s
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times full inference passes (backbone, detector, both branches, ensemble)
/// after `warmup` discarded runs. Only one thread is supported.
pub fn benchmark(
    model: &XFormerModel,
    params: &ParamStore,
    input: ModelInput<'_>,
    iterations: usize,
    warmup: usize,
    threads: usize,
) -> Result<BenchReport> {
    if threads != 1 {
        return Err(contract("the benchmark runs on exactly one thread"));
    }
    if iterations == 0 {
        return Err(contract("benchmark needs at least one iteration"));
    }
    for _ in 0..warmup {
        model.predict(params, input)?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        model.predict(params, input)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let g = Graph::new();
    let b = params.bind_frozen(&g);
    model.forward(&b, input)?;
    let forward_flops = g.flops();
    times.sort_by(f64::total_cmp);
    let median_ms = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        (times[times.len() / 2 - 1] + times[times.len() / 2]) / 2.0
    };
    let (ti, tk) = model.token_counts();
    let (ti, tk) = (if input.image.is_some() { ti } else { 0 }, tk);
    Ok(BenchReport {
        iterations,
        warmup,
        median_ms,
        p95_ms: percentile(&times, 95.0),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        forward_flops,
        attention_flops: attention_flops(&model.config),
        image_tokens: ti,
        keypoint_tokens: tk,
        tokens_per_sec: (ti + tk) as f64 / (median_ms / 1e3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_tokens_quadruples_attention_cost() {
        let a = ModelConfig::small_toy();
        let mut b = a.clone();
        b.coarse_vertices *= 2;
        b.num_joints *= 2;
        b.num_keypoints *= 2;
        b.image_width *= 2;
        assert_eq!(b.image_tokens(), 2 * a.image_tokens());
        assert_eq!(b.keypoint_tokens(), 2 * a.keypoint_tokens());
        assert_eq!(attention_flops(&b), 4 * attention_flops(&a));
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }
}

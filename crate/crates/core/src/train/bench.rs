//! Inference latency comparison across attention variants.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ViT;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    /// `100 * (mean / baseline_mean - 1)`.
    pub delta_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Times one evaluation forward pass per model on `images`.
///
/// Rounds are interleaved (every model runs once per round) so drift in
/// machine load spreads evenly. The baseline is the model named `gqa` if
/// present, else the first. Warmup rounds are not timed.
pub fn bench_inference(
    models: &mut [(String, ViT)],
    images: &Tensor,
    warmup: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if models.is_empty() || repeats == 0 {
        return Err(Error::contract(
            "benchmark needs at least one model and one repeat",
        ));
    }
    let mut samples = vec![Vec::with_capacity(repeats); models.len()];
    for round in 0..warmup + repeats {
        for (i, (_, model)) in models.iter_mut().enumerate() {
            let began = Instant::now();
            let logits = model.predict(images)?;
            let ms = began.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(logits);
            if round >= warmup {
                samples[i].push(ms);
            }
        }
    }
    let baseline_idx = models.iter().position(|(n, _)| n == "gqa").unwrap_or(0);
    let stats: Vec<(f64, f64, f64)> = samples
        .iter_mut()
        .map(|s| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            s.sort_by(f64::total_cmp);
            let median = if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
            };
            (mean, var.sqrt(), median)
        })
        .collect();
    let base = stats[baseline_idx].0;
    let rows = models
        .iter()
        .zip(&stats)
        .map(|((name, _), &(mean, std, median))| BenchRow {
            name: name.clone(),
            mean_ms: mean,
            std_ms: std,
            median_ms: median,
            delta_pct: 100.0 * (mean / base - 1.0),
        })
        .collect();
    Ok(BenchReport {
        baseline: models[baseline_idx].0.clone(),
        batch: images.shape().first().copied().unwrap_or(0),
        warmup,
        repeats,
        rows,
    })
}

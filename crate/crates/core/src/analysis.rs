//! Post-hoc diagnostics: head-output similarity, allocation statistics,
//! similarity blending between schemes, and key/value head sweeps.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::allocation::{read_events, AllocationEvent, AllocationVector};
use crate::attention::group_boundaries;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{parameter_count, ViT, ViTConfig};
use crate::persistence::Checkpoint;
use crate::tensor::Tensor;
use crate::train::{evaluate, train_loop, TrainConfig};

/// Cosine similarity between flattened per-head outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// Row-major `H x H`.
    pub m: Vec<Vec<f64>>,
    pub variant: String,
    pub layer: usize,
    /// Heads whose output was all zeros; their rows and columns are 0.
    pub zero_heads: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn heads(&self) -> usize {
        self.m.len()
    }

    /// CSV with a header row `head,h0,h1,...` and one row per head.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["head".to_string()];
        header.extend((0..self.heads()).map(|h| format!("h{h}")));
        w.write_record(&header)?;
        for (i, row) in self.m.iter().enumerate() {
            let mut rec = vec![format!("h{i}")];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }

    /// Mean off-diagonal similarity within groups and between groups.
    pub fn group_means(&self, alloc: &AllocationVector) -> Result<(f64, f64)> {
        if alloc.total() != self.heads() {
            return Err(Error::contract(format!(
                "allocation covers {} heads, matrix has {}",
                alloc.total(),
                self.heads()
            )));
        }
        let mut owner = vec![0; self.heads()];
        for (g, (s, e)) in group_boundaries(alloc).into_iter().enumerate() {
            owner[s..e].fill(g);
        }
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.heads() {
            for j in 0..self.heads() {
                if i == j {
                    continue;
                }
                if owner[i] == owner[j] {
                    intra += self.m[i][j];
                    ni += 1;
                } else {
                    inter += self.m[i][j];
                    nx += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        Ok((mean(intra, ni), mean(inter, nx)))
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::contract(format!("csv output not UTF-8: {e}")))
}

/// Similarity of per-head outputs shaped `[batch, H, tokens, d_k]`.
pub fn head_similarity(heads: &Tensor, variant: &str, layer: usize) -> Result<SimilarityMatrix> {
    let &[batch, h, tokens, dk] = heads.shape() else {
        return Err(Error::contract(format!(
            "head outputs must be [batch, H, tokens, d_k], got {:?}",
            heads.shape()
        )));
    };
    if h < 2 {
        return Err(Error::contract("similarity needs at least two heads"));
    }
    let per = tokens * dk;
    let flat: Vec<Vec<f64>> = (0..h)
        .map(|hi| {
            (0..batch)
                .flat_map(|b| {
                    let start = (b * h + hi) * per;
                    heads.data()[start..start + per].iter().copied()
                })
                .collect()
        })
        .collect();
    let norms: Vec<f64> = flat
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let zero_heads: Vec<usize> = (0..h).filter(|&i| norms[i] == 0.0).collect();
    let mut m = vec![vec![0.0; h]; h];
    for i in 0..h {
        for j in i..h {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                let dot: f64 = flat[i].iter().zip(&flat[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    if !zero_heads.is_empty() {
        log::warn!(
            "layer {layer}: heads {zero_heads:?} produced all-zero outputs; similarity set to 0"
        );
    }
    Ok(SimilarityMatrix {
        m,
        variant: variant.to_string(),
        layer,
        zero_heads,
    })
}

/// Allocation events ordered by step within each layer.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AllocationHistory {
    pub events: Vec<AllocationEvent>,
}

impl AllocationHistory {
    /// Validates each allocation and the per-layer step order.
    pub fn new(events: Vec<AllocationEvent>) -> Result<Self> {
        let mut last: BTreeMap<usize, u64> = BTreeMap::new();
        for e in &events {
            AllocationVector::new(e.alloc.clone())?;
            if let Some(&prev) = last.get(&e.layer) {
                if e.step <= prev {
                    return Err(Error::contract(format!(
                        "layer {} events out of order: step {} after {prev}",
                        e.layer, e.step
                    )));
                }
            }
            last.insert(e.layer, e.step);
        }
        Ok(AllocationHistory { events })
    }

    pub fn from_jsonl(input: impl BufRead) -> Result<Self> {
        Self::new(read_events(input)?)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.events.iter().map(|e| e.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn for_layer(&self, layer: usize) -> AllocationHistory {
        AllocationHistory {
            events: self
                .events
                .iter()
                .filter(|e| e.layer == layer)
                .cloned()
                .collect(),
        }
    }
}

/// Share of events whose allocation differs from the uniform split of `heads`
/// over `groups` (remainder to the lowest groups).
pub fn nonuniform_fraction(hist: &AllocationHistory, heads: usize, groups: usize) -> Result<f64> {
    if hist.events.is_empty() {
        return Err(Error::contract("allocation history is empty"));
    }
    let uniform = AllocationVector::uniform(heads, groups)?;
    let odd = hist
        .events
        .iter()
        .filter(|e| e.alloc.as_slice() != uniform.counts())
        .count();
    Ok(odd as f64 / hist.events.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendFit {
    /// Weight on the multi-head matrix in `lambda * mha + (1 - lambda) * gqa`.
    pub lambda: f64,
    /// Frobenius residual divided by the norm of the fitted matrix.
    pub residual: f64,
}

/// Least-squares `lambda` in `[0, 1]` for `target ≈ lambda * mha + (1 - lambda) * gqa`.
pub fn similarity_blend_residual(
    target: &SimilarityMatrix,
    gqa: &SimilarityMatrix,
    mha: &SimilarityMatrix,
) -> Result<BlendFit> {
    let h = target.heads();
    if gqa.heads() != h || mha.heads() != h {
        return Err(Error::contract(format!(
            "matrices have {h}, {} and {} heads",
            gqa.heads(),
            mha.heads()
        )));
    }
    let flat = |s: &SimilarityMatrix| s.m.iter().flatten().copied().collect::<Vec<f64>>();
    let (d, g, m) = (flat(target), flat(gqa), flat(mha));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..d.len() {
        num += (d[i] - g[i]) * (m[i] - g[i]);
        den += (m[i] - g[i]).powi(2);
    }
    let lambda = if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    };
    let resid: f64 = (0..d.len())
        .map(|i| (d[i] - (lambda * m[i] + (1.0 - lambda) * g[i])).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let residual = if scale == 0.0 { resid } else { resid / scale };
    Ok(BlendFit { lambda, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kv_heads: usize,
    pub parameters: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    /// `kv_heads == heads`: the multi-head configuration.
    pub mha_ceiling: bool,
}

/// Trains `base` from scratch once per distinct `kv_heads` value with the same
/// budget and seed, and evaluates on `eval`. Rows come back sorted by `kv_heads`.
pub fn kv_sweep(
    base: &ViTConfig,
    kv_heads: &[usize],
    train: &TrainConfig,
    data: &Dataset,
    eval: &Dataset,
    eval_batch: usize,
) -> Result<Vec<SweepRow>> {
    let mut gs = kv_heads.to_vec();
    gs.sort_unstable();
    gs.dedup();
    if gs.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one kv_heads value".into(),
        ));
    }
    let mut cfgs = Vec::with_capacity(gs.len());
    for &g in &gs {
        let mut cfg = base.clone();
        cfg.attention.kv_heads = g;
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let mut rows = Vec::with_capacity(gs.len());
    for cfg in cfgs {
        let g = cfg.kv_heads();
        let model = ViT::new(cfg.clone(), train.seed)?;
        let out = train_loop(Checkpoint::fresh(model, train.seed), data, train, |_| {})?;
        let mut model = out.checkpoint.model;
        let result = evaluate(&mut model, eval, eval_batch)?;
        rows.push(SweepRow {
            kv_heads: g,
            parameters: parameter_count(&cfg),
            final_loss: out.metrics.losses.last().copied().unwrap_or(f64::NAN),
            accuracy: result.accuracy,
            mha_ceiling: g == cfg.heads(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    csv_string(w)
}

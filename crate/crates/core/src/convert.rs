//! Conversion of multi-head checkpoints to fewer key/value heads.
//!
//! Key heads are split into contiguous blocks of `H / G` heads and each block
//! is replaced by the mean of its projection columns and bias entries. The
//! same is done for value heads. Query, output and MLP weights are untouched.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariantConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{parameter_count, ViT, ViTConfig, ViTParams};
use crate::tensor::Tensor;

/// Mean of contiguous column blocks: `[rows, H·d_k]` to `[rows, G·d_k]`.
/// Works for biases too, viewed as a single row.
pub fn pool_head_columns(
    w: &Tensor,
    heads: usize,
    target: usize,
    head_dim: usize,
) -> Result<Tensor> {
    let cols = *w.shape().last().unwrap_or(&0);
    if cols != heads * head_dim {
        return Err(Error::contract(format!(
            "projection has {cols} columns, expected {heads} heads x {head_dim}"
        )));
    }
    check_divides(heads, target)?;
    let block = heads / target;
    let rows = w.numel() / cols;
    let mut out = vec![0.0; rows * target * head_dim];
    for r in 0..rows {
        let src = &w.data()[r * cols..(r + 1) * cols];
        let dst = &mut out[r * target * head_dim..(r + 1) * target * head_dim];
        for g in 0..target {
            for j in 0..head_dim {
                let sum: f64 = (0..block)
                    .map(|b| src[(g * block + b) * head_dim + j])
                    .sum();
                dst[g * head_dim + j] = sum / block as f64;
            }
        }
    }
    let mut shape = w.shape().to_vec();
    *shape.last_mut().expect("nonempty shape") = target * head_dim;
    Tensor::new(shape, out)
}

fn check_divides(heads: usize, target: usize) -> Result<()> {
    if target == 0 || target > heads || !heads.is_multiple_of(target) {
        return Err(Error::Infeasible(format!(
            "cannot pool {heads} key/value heads into {target} equal contiguous groups"
        )));
    }
    Ok(())
}

/// Converts a multi-head model into `target_g` key/value heads.
///
/// The result keeps the source's attention settings except for the head
/// count; its variant is GQA unless `variant` is given. Allocation state
/// starts uniform.
pub fn mha_to_grouped(src: &ViT, target_g: usize, variant: Option<Variant>) -> Result<ViT> {
    let cfg = &src.config;
    if cfg.kv_heads() != cfg.heads() {
        return Err(Error::contract(format!(
            "source must have one key/value head per query head, has {} of {}",
            cfg.kv_heads(),
            cfg.heads()
        )));
    }
    check_divides(cfg.heads(), target_g)?;
    let variant = variant.unwrap_or(if target_g == cfg.heads() {
        cfg.attention.variant
    } else if target_g == 1 {
        Variant::Mqa
    } else {
        Variant::Gqa
    });
    let config = ViTConfig {
        attention: AttentionVariantConfig {
            variant,
            kv_heads: target_g,
            ..cfg.attention.clone()
        },
        ..cfg.clone()
    };
    let params = pool_params(&src.params, cfg.heads(), target_g, cfg.head_dim())?;
    ViT::from_params(config, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPoolDistances {
    pub layer: usize,
    /// L2 distance between each original key head (projection columns plus
    /// bias) and the pooled head that replaced it.
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub heads: usize,
    pub source_kv_heads: usize,
    pub target_kv_heads: usize,
    pub source_parameters: usize,
    pub target_parameters: usize,
    /// `source_parameters - target_parameters`.
    pub parameter_delta: usize,
    pub layers: Vec<LayerPoolDistances>,
}

fn head_distances(
    w: &Tensor,
    b: &Tensor,
    pw: &Tensor,
    pb: &Tensor,
    heads: usize,
    target: usize,
    dk: usize,
) -> Vec<f64> {
    let block = heads / target;
    let cols = heads * dk;
    let pcols = target * dk;
    let rows = w.shape()[0];
    (0..heads)
        .map(|h| {
            let g = h / block;
            let mut sq = 0.0;
            for j in 0..dk {
                for r in 0..rows {
                    let diff = w.data()[r * cols + h * dk + j] - pw.data()[r * pcols + g * dk + j];
                    sq += diff * diff;
                }
                let diff = b.data()[h * dk + j] - pb.data()[g * dk + j];
                sq += diff * diff;
            }
            sq.sqrt()
        })
        .collect()
}

/// Summarises what a conversion removed.
pub fn conversion_report(src: &ViT, dst: &ViT) -> Result<ConversionReport> {
    let (h, g, dk) = (
        src.config.heads(),
        dst.config.kv_heads(),
        src.config.head_dim(),
    );
    if src.config.kv_heads() != h
        || dst.config.heads() != h
        || src.params.blocks.len() != dst.params.blocks.len()
    {
        return Err(Error::contract(
            "report needs a multi-head source and its converted model",
        ));
    }
    check_divides(h, g)?;
    let layers = src
        .params
        .blocks
        .iter()
        .zip(&dst.params.blocks)
        .enumerate()
        .map(|(layer, (s, d))| LayerPoolDistances {
            layer,
            key: head_distances(&s.wk, &s.bk, &d.wk, &d.bk, h, g, dk),
            value: head_distances(&s.wv, &s.bv, &d.wv, &d.bv, h, g, dk),
        })
        .collect();
    let source_parameters = parameter_count(&src.config);
    let target_parameters = parameter_count(&dst.config);
    Ok(ConversionReport {
        heads: h,
        source_kv_heads: src.config.kv_heads(),
        target_kv_heads: g,
        source_parameters,
        target_parameters,
        parameter_delta: source_parameters - target_parameters,
        layers,
    })
}

/// Pools the key and value projections of every block, leaving the rest as is.
pub fn pool_params(
    params: &ViTParams<Tensor>,
    heads: usize,
    target: usize,
    head_dim: usize,
) -> Result<ViTParams<Tensor>> {
    params.try_map(|name, t| {
        if name.ends_with(".wk")
            || name.ends_with(".bk")
            || name.ends_with(".wv")
            || name.ends_with(".bv")
        {
            pool_head_columns(t, heads, target, head_dim)
        } else {
            Ok(t.clone())
        }
    })
}

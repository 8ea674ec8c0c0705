//! Two-phase comparison: train a multi-head base, convert it to each variant,
//! uptrain, then fine-tune, with the same step budget for every variant.

use serde::{Deserialize, Serialize};

use super::{evaluate, train_loop, EvalResult, Phase, RunMetrics, TrainConfig};
use crate::attention::Variant;
use crate::convert::{conversion_report, mha_to_grouped, ConversionReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ViT, ViTConfig};
use crate::persistence::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    /// Multi-head base model; its window, alpha and seed carry over to every variant.
    pub base: ViTConfig,
    pub base_steps: u64,
    /// `(variant, kv_heads)` pairs to compare.
    pub variants: Vec<(Variant, usize)>,
    pub uptrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval_batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub kv_heads: usize,
    pub conversion: ConversionReport,
    pub uptrain: RunMetrics,
    pub finetune: RunMetrics,
    pub eval: EvalResult,
}

impl VariantRun {
    pub fn total_steps(&self) -> u64 {
        self.uptrain.steps + self.finetune.steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub base: RunMetrics,
    pub runs: Vec<VariantRun>,
}

impl RecipeReport {
    /// The common uptrain + fine-tune step count, or an error naming the
    /// variants that differ.
    pub fn step_budget(&self) -> Result<u64> {
        let first = self
            .runs
            .first()
            .ok_or_else(|| Error::contract("no variant runs"))?
            .total_steps();
        let odd: Vec<String> = self
            .runs
            .iter()
            .filter(|r| r.total_steps() != first)
            .map(|r| format!("{} ({} steps)", r.variant, r.total_steps()))
            .collect();
        if odd.is_empty() {
            Ok(first)
        } else {
            Err(Error::contract(format!(
                "step budgets differ from {first}: {}",
                odd.join(", ")
            )))
        }
    }
}

/// Trains the base once, then for each variant converts, uptrains on
/// `uptrain_data`, fine-tunes on `finetune_data` and evaluates on `eval_data`.
pub fn two_phase(
    cfg: &RecipeConfig,
    uptrain_data: &Dataset,
    finetune_data: &Dataset,
    eval_data: &Dataset,
) -> Result<RecipeReport> {
    if cfg.base.kv_heads() != cfg.base.heads() {
        return Err(Error::Config("the base model must be multi-head".into()));
    }
    if cfg.uptrain.phase != Phase::Uptrain || cfg.finetune.phase != Phase::Finetune {
        return Err(Error::Config(
            "uptrain and finetune configs must carry their phases".into(),
        ));
    }
    let base = ViT::new(cfg.base.clone(), cfg.seed)?;
    let base_cfg = TrainConfig {
        steps: cfg.base_steps,
        ..cfg.uptrain.clone()
    };
    let base_run = train_loop(
        Checkpoint::fresh(base, cfg.seed),
        uptrain_data,
        &base_cfg,
        |_| {},
    )?;
    let base_model = base_run.checkpoint.model;

    let mut runs = Vec::with_capacity(cfg.variants.len());
    for &(variant, kv_heads) in &cfg.variants {
        let converted = mha_to_grouped(&base_model, kv_heads, Some(variant))?;
        converted.config.validate()?;
        let conversion = conversion_report(&base_model, &converted)?;
        let up = train_loop(
            Checkpoint::fresh(converted, cfg.seed),
            uptrain_data,
            &cfg.uptrain,
            |_| {},
        )?;
        let ft = train_loop(up.checkpoint, finetune_data, &cfg.finetune, |_| {})?;
        let mut model = ft.checkpoint.model;
        let eval = evaluate(&mut model, eval_data, cfg.eval_batch)?;
        runs.push(VariantRun {
            variant,
            kv_heads,
            conversion,
            uptrain: up.metrics,
            finetune: ft.metrics,
            eval,
        });
    }
    Ok(RecipeReport {
        base: base_run.metrics,
        runs,
    })
}

//! Scaled dot-product attention with grouped key/value heads.
//!
//! Query heads are assigned to key/value heads left to right: group `g` owns
//! the next `alloc[g]` query heads. Static variants (MHA, MQA, GQA, PGQA) use
//! the uniform split; KDGQA recomputes the split from the keys on every pass;
//! DGQA updates it at window boundaries during training and freezes it for
//! inference. PGQA subtracts a statistics-matched Gaussian matrix with a zero
//! diagonal from each group's post-softmax attention map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    kdgqa_allocate, key_head_norms, window_scheduler, AllocationEvent, AllocationVector, CacheMode,
    NormCache,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{NoiseAmplitude, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mha,
    Mqa,
    Gqa,
    Kdgqa,
    DgqaDiff,
    DgqaEma,
    Pgqa,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Mha,
        Variant::Mqa,
        Variant::Gqa,
        Variant::Kdgqa,
        Variant::DgqaDiff,
        Variant::DgqaEma,
        Variant::Pgqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::Mqa => "mqa",
            Variant::Gqa => "gqa",
            Variant::Kdgqa => "kdgqa",
            Variant::DgqaDiff => "dgqa-diff",
            Variant::DgqaEma => "dgqa-ema",
            Variant::Pgqa => "pgqa",
        }
    }

    /// Group sizes never change for these.
    pub fn is_static(self) -> bool {
        matches!(
            self,
            Variant::Mha | Variant::Mqa | Variant::Gqa | Variant::Pgqa
        )
    }

    pub fn cache_mode(self) -> Option<CacheMode> {
        match self {
            Variant::DgqaDiff => Some(CacheMode::Difference),
            Variant::DgqaEma => Some(CacheMode::Ema),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of mha, mqa, gqa, kdgqa, dgqa-diff, dgqa-ema, pgqa)"
                ))
            })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionVariantConfig {
    pub variant: Variant,
    /// Query heads.
    pub heads: usize,
    /// Key/value heads.
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Steps between reallocations for the windowed variants.
    pub window: u64,
    pub alpha: f64,
    pub seed: u64,
    /// Whether PGQA noise is also applied outside training.
    #[serde(default = "default_true")]
    pub noise_at_inference: bool,
}

pub const DEFAULT_WINDOW: u64 = 300;
pub const DEFAULT_ALPHA: f64 = 0.9;

impl AttentionVariantConfig {
    pub fn new(variant: Variant, heads: usize, kv_heads: usize, head_dim: usize) -> Self {
        AttentionVariantConfig {
            variant,
            heads,
            kv_heads,
            head_dim,
            window: DEFAULT_WINDOW,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            noise_at_inference: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, g) = (self.heads, self.kv_heads);
        let fail = |msg: String| Err(Error::Config(msg));
        if h == 0 || g == 0 || g > h {
            return fail(format!(
                "need 1 <= kv_heads <= heads, got heads={h} kv_heads={g}"
            ));
        }
        if self.head_dim == 0 {
            return fail("head_dim must be positive".into());
        }
        match self.variant {
            Variant::Mha if g != h => {
                return fail(format!("mha needs kv_heads == heads ({h}), got {g}"))
            }
            Variant::Mqa if g != 1 => return fail(format!("mqa needs kv_heads == 1, got {g}")),
            v if v.is_static() && h % g != 0 => {
                return fail(format!(
                    "{v} needs kv_heads to divide heads ({h} % {g} != 0)"
                ))
            }
            _ => {}
        }
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha {} outside (0, 1]", self.alpha));
        }
        Ok(())
    }

    pub fn uniform_allocation(&self) -> Result<AllocationVector> {
        AllocationVector::uniform(self.heads, self.kv_heads)
    }
}

/// Contiguous query-head ranges, one per group, in group order.
pub fn group_boundaries(alloc: &AllocationVector) -> Vec<(usize, usize)> {
    let mut start = 0;
    alloc
        .counts()
        .iter()
        .map(|&q| {
            let range = (start, start + q);
            start += q;
            range
        })
        .collect()
}

/// Post-softmax attention weights of one group, `[batch, heads_in_group, tokens, tokens]`.
#[derive(Clone, Debug)]
pub struct GroupAttentionMap {
    pub a_hat: Tensor,
    pub mu: f64,
    pub sigma: f64,
}

impl GroupAttentionMap {
    pub fn new(a_hat: Tensor) -> Self {
        let (mu, sigma) = crate::tensor::mean_std(a_hat.data());
        GroupAttentionMap { a_hat, mu, sigma }
    }
}

/// Noise for one group in one pass, identified by its counters.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub seed: u64,
    pub step: u64,
    pub layer: usize,
    pub group: usize,
    /// `(R - mean(R)) / std(R)` for a standard-normal draw `R` shaped like the map.
    pub normalized: Tensor,
}

impl NoiseSpec {
    pub fn draw(shape: &[usize], seed: u64, step: u64, layer: usize, group: usize) -> Result<Self> {
        let mut rng = rng::derive(Stream::Noise, seed, &[step, layer as u64, group as u64]);
        let n: usize = shape.iter().product();
        loop {
            let raw: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (mean, std) = crate::tensor::mean_std(&raw);
            // a zero spread is only possible for degenerate draws; draw again
            if std > 0.0 {
                let normalized = Tensor::new(
                    shape.to_vec(),
                    raw.iter().map(|r| (r - mean) / std).collect(),
                )?;
                return Ok(NoiseSpec {
                    seed,
                    step,
                    layer,
                    group,
                    normalized,
                });
            }
        }
    }

    /// `sigma * normalized + mu` with every map diagonal forced to zero.
    pub fn gaussian(&self, mu: f64, sigma: f64) -> Tensor {
        let shape = self.normalized.shape();
        let t = shape[shape.len() - 1];
        let mut g = self.normalized.map(|z| sigma * z + mu);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            let within = i % (t * t);
            if within / t == within % t {
                *v = 0.0;
            }
        }
        g
    }
}

/// Map minus its matched noise matrix. Statistics are the map's own.
pub fn pgqa_perturb(map: &GroupAttentionMap, noise: &NoiseSpec) -> Result<GroupAttentionMap> {
    let gaussian = noise.gaussian(map.mu, map.sigma);
    Ok(GroupAttentionMap {
        a_hat: map.a_hat.sub(&gaussian)?,
        mu: map.mu,
        sigma: map.sigma,
    })
}

/// Per-call knobs for a forward pass through one attention layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionContext {
    pub step: u64,
    pub layer: usize,
    pub training: bool,
    pub capture_maps: bool,
    pub noise: NoiseAmplitude,
}

pub struct AttentionOutput<'t> {
    /// `[batch, tokens, heads * head_dim]`.
    pub output: Var<'t>,
    /// Per-head outputs before concatenation, `[batch, heads, tokens, head_dim]`.
    pub heads: Var<'t>,
    /// Post-perturbation maps per group, when requested.
    pub maps: Vec<GroupAttentionMap>,
}

/// Attention with `q` shaped `[batch, tokens, heads, d_k]` and `k`, `v` shaped
/// `[batch, tokens, groups, d_k]`, using the given allocation.
pub fn grouped_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    alloc: &AllocationVector,
    cfg: &AttentionVariantConfig,
    ctx: &AttentionContext,
) -> Result<AttentionOutput<'t>> {
    let q_shape = q.shape();
    let k_shape = k.shape();
    let &[batch, tokens, heads, d_k] = q_shape.as_slice() else {
        return Err(Error::contract(format!(
            "q must be rank 4, got {q_shape:?}"
        )));
    };
    if k_shape.len() != 4
        || v.shape() != k_shape
        || k_shape[0] != batch
        || k_shape[1] != tokens
        || k_shape[3] != d_k
    {
        return Err(Error::shape("grouped_attention", &q_shape, &k_shape));
    }
    let groups = k_shape[2];
    if heads != cfg.heads
        || groups != cfg.kv_heads
        || alloc.groups() != groups
        || alloc.total() != heads
    {
        return Err(Error::contract(format!(
            "allocation {:?} does not fit {heads} query heads over {groups} key/value heads (config H={}, G={})",
            alloc.counts(),
            cfg.heads,
            cfg.kv_heads
        )));
    }

    let apply_noise = cfg.variant == Variant::Pgqa && (ctx.training || cfg.noise_at_inference);
    let scale = 1.0 / (d_k as f64).sqrt();
    let qh = q.transpose(1, 2)?;
    let kh = k.transpose(1, 2)?;
    let vh = v.transpose(1, 2)?;

    let mut per_group = Vec::with_capacity(groups);
    let mut maps = Vec::new();
    for (g, (start, end)) in group_boundaries(alloc).into_iter().enumerate() {
        let q_count = end - start;
        let qg = qh
            .slice(1, start, end)?
            .reshape([batch, q_count * tokens, d_k])?;
        let kg = kh.slice(1, g, g + 1)?.reshape([batch, tokens, d_k])?;
        let vg = vh.slice(1, g, g + 1)?.reshape([batch, tokens, d_k])?;
        let scores = qg.matmul(kg.transpose(1, 2)?)?.scale(scale);
        let mut weights = scores
            .softmax_lastdim()?
            .reshape([batch, q_count, tokens, tokens])?;
        if apply_noise {
            if tokens >= 2 {
                let noise = NoiseSpec::draw(&weights.shape(), cfg.seed, ctx.step, ctx.layer, g)?;
                weights = weights
                    .subtract_matched_noise(&noise.normalized, ctx.noise)?
                    .0;
            } else {
                log::debug!(
                    "single-token map in layer {} group {g}: noise skipped",
                    ctx.layer
                );
            }
        }
        if ctx.capture_maps {
            maps.push(GroupAttentionMap::new(weights.value()));
        }
        let context = weights
            .reshape([batch, q_count * tokens, tokens])?
            .matmul(vg)?
            .reshape([batch, q_count, tokens, d_k])?;
        per_group.push(context);
    }
    let heads_out = if per_group.len() == 1 {
        per_group[0]
    } else {
        q.tape().concat(&per_group, 1)?
    };
    let output = heads_out
        .transpose(1, 2)?
        .reshape([batch, tokens, heads * d_k])?;
    Ok(AttentionOutput {
        output,
        heads: heads_out,
        maps,
    })
}

/// Allocation state carried by one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocState {
    /// Allocation currently in force (the last one used, for KDGQA).
    pub alloc: AllocationVector,
    pub cache: Option<NormCache>,
}

impl LayerAllocState {
    pub fn new(cfg: &AttentionVariantConfig) -> Result<Self> {
        let cache = cfg
            .variant
            .cache_mode()
            .map(|mode| NormCache::new(cfg.kv_heads, mode, cfg.window, cfg.alpha))
            .transpose()?;
        Ok(LayerAllocState {
            alloc: cfg.uniform_allocation()?,
            cache,
        })
    }
}

/// Picks this pass's allocation for `cfg.variant` and, on training window
/// boundaries, reports it as a loggable event.
pub fn resolve_allocation(
    cfg: &AttentionVariantConfig,
    state: &mut LayerAllocState,
    keys: &Tensor,
    ctx: &AttentionContext,
) -> Result<(AllocationVector, Option<AllocationEvent>)> {
    let boundary = ctx.training && ctx.step.is_multiple_of(cfg.window);
    let mut norms = None;
    match cfg.variant {
        Variant::Kdgqa => state.alloc = kdgqa_allocate(keys, cfg.heads)?,
        Variant::DgqaDiff | Variant::DgqaEma if ctx.training => {
            let cache = state
                .cache
                .as_mut()
                .ok_or_else(|| Error::contract("windowed variant without a norm cache"))?;
            if let Some(r) = window_scheduler(ctx.step, cache, keys, &state.alloc)? {
                state.alloc = r.alloc;
                norms = Some(r.norms);
            }
        }
        _ => {}
    }
    let event = if boundary {
        let norms = match norms {
            Some(n) => n,
            None => key_head_norms(keys)?,
        };
        Some(AllocationEvent {
            step: ctx.step,
            layer: ctx.layer,
            alloc: state.alloc.counts().to_vec(),
            norms: norms.as_slice().to_vec(),
        })
    } else {
        None
    };
    Ok((state.alloc.clone(), event))
}

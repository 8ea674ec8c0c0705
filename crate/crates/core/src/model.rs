//! A small pre-norm Vision Transformer built on the grouped attention layer.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationEvent;
use crate::attention::{
    grouped_attention, resolve_allocation, AttentionContext, AttentionVariantConfig,
    GroupAttentionMap, LayerAllocState, Variant,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{NoiseAmplitude, Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionVariantConfig,
}

impl ViTConfig {
    /// Named size presets; `heads` is fixed at 8 and `d_k = d_model / 8`.
    pub fn preset(name: &str, variant: Variant, kv_heads: usize) -> Result<Self> {
        let (d_model, depth) = match name {
            "vit-micro" => (64, 4),
            "vit-mini" => (128, 6),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset '{other}' (expected vit-micro or vit-mini)"
                )))
            }
        };
        let heads = 8;
        Ok(ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_model,
            depth,
            mlp_ratio: 4,
            num_classes: 10,
            attention: AttentionVariantConfig::new(variant, heads, kv_heads, d_model / heads),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("channels, num_classes and mlp_ratio must be positive".into());
        }
        if self.d_model != self.attention.heads * self.attention.head_dim {
            return fail(format!(
                "d_model {} must equal heads {} x head_dim {}",
                self.d_model, self.attention.heads, self.attention.head_dim
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn heads(&self) -> usize {
        self.attention.heads
    }

    pub fn kv_heads(&self) -> usize {
        self.attention.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.attention.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// Exact parameter count:
///
/// - embedding: `P²C·d + d` (patch projection) `+ d` (class token) `+ (N+1)·d` (positions)
/// - per block: `4d` (two layer norms) `+ (d+1)·H·d_k` (queries) `+ 2·(d+1)·G·d_k`
///   (keys and values) `+ H·d_k·d + d` (output) `+ (d+1)·r·d + r·d·d + d` (MLP)
/// - head: `2d` (final layer norm) `+ (d+1)·C`
pub fn parameter_count(cfg: &ViTConfig) -> usize {
    let d = cfg.d_model;
    let (h, g, dk) = (cfg.heads(), cfg.kv_heads(), cfg.head_dim());
    let hidden = cfg.hidden();
    let embed = cfg.patch_dim() * d + d + d + cfg.tokens() * d;
    let block = 4 * d
        + (d + 1) * h * dk
        + 2 * (d + 1) * g * dk
        + h * dk * d
        + d
        + (d + 1) * hidden
        + hidden * d
        + d;
    let head = 2 * d + (d + 1) * cfg.num_classes;
    embed + cfg.depth * block + head
}

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// All model weights. `T` is a tensor for stored weights and a tape handle
/// during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos: T,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_g: T,
    pub ln_b: T,
    pub head_w: T,
    pub head_b: T,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl<T> BlockParams<T> {
    fn try_map<U>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> Result<U>,
    ) -> Result<BlockParams<U>> {
        macro_rules! build {
            ($($field:ident),*) => {
                BlockParams { $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)?),* }
            };
        }
        Ok(block_fields!(build))
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        macro_rules! push {
            ($($field:ident),*) => {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)*
            };
        }
        block_fields!(push);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        macro_rules! push {
            ($($field:ident),*) => {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &mut self.$field));)*
            };
        }
        block_fields!(push);
    }
}

impl<T> ViTParams<T> {
    /// Applies `f` to every parameter by name, keeping the structure.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ViTParams<U>> {
        Ok(ViTParams {
            patch_w: f("patch_w", &self.patch_w)?,
            patch_b: f("patch_b", &self.patch_b)?,
            cls: f("cls", &self.cls)?,
            pos: f("pos", &self.pos)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
                .collect::<Result<_>>()?,
            ln_g: f("ln_g", &self.ln_g)?,
            ln_b: f("ln_b", &self.ln_b)?,
            head_w: f("head_w", &self.head_w)?,
            head_b: f("head_b", &self.head_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ViTParams<U> {
        self.try_map(|n, t| Ok(f(n, t))).expect("infallible map")
    }

    /// Parameters in canonical order: embedding, blocks, final norm, head.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut out);
        }
        out.push(("ln_g".to_string(), &self.ln_g));
        out.push(("ln_b".to_string(), &self.ln_b));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
            ("cls".to_string(), &mut self.cls),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), &mut out);
        }
        out.push(("ln_g".to_string(), &mut self.ln_g));
        out.push(("ln_b".to_string(), &mut self.ln_b));
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }
}

impl ViTParams<Tensor> {
    /// Expected shape of every parameter for `cfg`, in canonical order.
    pub fn shapes(cfg: &ViTConfig) -> ViTParams<Vec<usize>> {
        let d = cfg.d_model;
        let q = cfg.heads() * cfg.head_dim();
        let kv = cfg.kv_heads() * cfg.head_dim();
        let hidden = cfg.hidden();
        let block = BlockParams {
            ln1_g: vec![d],
            ln1_b: vec![d],
            wq: vec![d, q],
            bq: vec![q],
            wk: vec![d, kv],
            bk: vec![kv],
            wv: vec![d, kv],
            bv: vec![kv],
            wo: vec![q, d],
            bo: vec![d],
            ln2_g: vec![d],
            ln2_b: vec![d],
            w1: vec![d, hidden],
            b1: vec![hidden],
            w2: vec![hidden, d],
            b2: vec![d],
        };
        ViTParams {
            patch_w: vec![cfg.patch_dim(), d],
            patch_b: vec![d],
            cls: vec![d],
            pos: vec![cfg.tokens(), d],
            blocks: vec![block; cfg.depth],
            ln_g: vec![d],
            ln_b: vec![d],
            head_w: vec![d, cfg.num_classes],
            head_b: vec![cfg.num_classes],
        }
    }

    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit norm gains.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Self {
        let mut rng = rng::derive(Stream::Init, seed, &[]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self::shapes(cfg).map(|name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf.ends_with("_g") {
                Tensor::ones(shape.clone())
            } else if shape.len() == 2 || leaf == "cls" {
                Tensor::from_fn(shape.clone(), |_| normal.sample(&mut rng))
            } else {
                Tensor::zeros(shape.clone())
            }
        })
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Fails unless every parameter has the shape `cfg` requires.
    pub fn check_shapes(&self, cfg: &ViTConfig) -> Result<()> {
        let expected = Self::shapes(cfg);
        if expected.blocks.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "weights have {} blocks, config says {}",
                self.blocks.len(),
                expected.blocks.len()
            )));
        }
        for ((name, t), (_, shape)) in self.named().into_iter().zip(expected.named()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Splits `[B, C, S, S]` images into `[B, N, C·P·P]` patch rows, channel-major
/// within a patch.
pub fn patchify(images: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let &[batch, c, s, s2] = images.shape() else {
        return Err(Error::contract(format!(
            "images must be [B, C, S, S], got {:?}",
            images.shape()
        )));
    };
    if c != cfg.channels || s != cfg.image_size || s2 != s {
        return Err(Error::contract(format!(
            "images {:?} do not match config ({} channels, {}x{})",
            images.shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let per_side = s / p;
    let patch_dim = cfg.patch_dim();
    let data = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..batch {
        for py in 0..per_side {
            for px in 0..per_side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((b * c + ch) * s + py * p + y) * s + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([batch, per_side * per_side, patch_dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { step: u64 },
    Eval,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Keep post-perturbation attention maps per layer.
    pub capture_maps: bool,
    /// Keep per-head outputs per layer.
    pub capture_heads: bool,
    pub noise: NoiseAmplitude,
}

pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Tape handles of the weights used, for looking up gradients.
    pub params: ViTParams<Var<'t>>,
    pub events: Vec<AllocationEvent>,
    /// Per layer, when captured.
    pub maps: Vec<Vec<GroupAttentionMap>>,
    /// Per layer `[B, H, T, d_k]`, when captured.
    pub heads: Vec<Tensor>,
}

/// Weights plus per-layer allocation state.
#[derive(Clone, Debug, PartialEq)]
pub struct ViT {
    pub config: ViTConfig,
    pub params: ViTParams<Tensor>,
    pub alloc_states: Vec<LayerAllocState>,
}

impl ViT {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ViTParams::init(&config, seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ViTConfig, params: ViTParams<Tensor>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let alloc_states = (0..config.depth)
            .map(|_| LayerAllocState::new(&config.attention))
            .collect::<Result<_>>()?;
        Ok(ViT {
            config,
            params,
            alloc_states,
        })
    }

    /// Logits `[B, num_classes]` for `[B, C, S, S]` images. Training passes
    /// advance the windowed allocation state; evaluation passes leave it frozen.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        images: &Tensor,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<Forward<'t>> {
        let p = self.params.map(|_, t| tape.leaf(t.clone()));
        self.forward_with(tape, p, images, mode, opts)
    }

    /// Like [`ViT::forward`] but with caller-supplied weight handles, which
    /// must have the stored weights' shapes.
    pub fn forward_with<'t>(
        &mut self,
        tape: &'t Tape,
        p: ViTParams<Var<'t>>,
        images: &Tensor,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let patches = patchify(images, cfg)?;
        let batch = patches.shape()[0];
        let tokens = cfg.tokens();
        let (h, g, dk) = (cfg.heads(), cfg.kv_heads(), cfg.head_dim());

        let embedded = tape.leaf(patches).matmul(p.patch_w)?.add(p.patch_b)?;
        let cls = p.cls.reshape([1, cfg.d_model])?.repeat_leading(batch)?;
        let mut x = tape.concat(&[cls, embedded], 1)?.add(p.pos)?;

        let (training, step) = match mode {
            Mode::Train { step } => (true, step),
            Mode::Eval => (false, 0),
        };
        let mut events = Vec::new();
        let mut maps = Vec::new();
        let mut heads = Vec::new();
        for (layer, (bp, state)) in p
            .blocks
            .iter()
            .zip(self.alloc_states.iter_mut())
            .enumerate()
        {
            let ctx = AttentionContext {
                step,
                layer,
                training,
                capture_maps: opts.capture_maps,
                noise: opts.noise,
            };
            let hn = x.layernorm(bp.ln1_g, bp.ln1_b, LAYERNORM_EPS)?;
            let q = hn
                .matmul(bp.wq)?
                .add(bp.bq)?
                .reshape([batch, tokens, h, dk])?;
            let k = hn
                .matmul(bp.wk)?
                .add(bp.bk)?
                .reshape([batch, tokens, g, dk])?;
            let v = hn
                .matmul(bp.wv)?
                .add(bp.bv)?
                .reshape([batch, tokens, g, dk])?;
            let (alloc, event) = resolve_allocation(&cfg.attention, state, &k.value(), &ctx)?;
            events.extend(event);
            let att = grouped_attention(q, k, v, &alloc, &cfg.attention, &ctx)?;
            if opts.capture_maps {
                maps.push(att.maps);
            }
            if opts.capture_heads {
                heads.push(att.heads.value());
            }
            x = x.add(att.output.matmul(bp.wo)?.add(bp.bo)?)?;
            let hn = x.layernorm(bp.ln2_g, bp.ln2_b, LAYERNORM_EPS)?;
            let mlp = hn
                .matmul(bp.w1)?
                .add(bp.b1)?
                .gelu()
                .matmul(bp.w2)?
                .add(bp.b2)?;
            x = x.add(mlp)?;
        }
        let x = x.layernorm(p.ln_g, p.ln_b, LAYERNORM_EPS)?;
        let cls_out = x.slice(1, 0, 1)?.reshape([batch, cfg.d_model])?;
        let logits = cls_out.matmul(p.head_w)?.add(p.head_b)?;
        Ok(Forward {
            logits,
            params: p,
            events,
            maps,
            heads,
        })
    }

    /// Logits without recording gradients or touching the allocation state.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        Ok(self
            .forward(&tape, images, Mode::Eval, ForwardOptions::default())?
            .logits
            .value())
    }

    /// Allocation currently in force for each layer.
    pub fn allocations(&self) -> Vec<Vec<usize>> {
        self.alloc_states
            .iter()
            .map(|s| s.alloc.counts().to_vec())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny(variant: Variant, kv: usize, depth: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            d_model: 8,
            depth,
            mlp_ratio: 2,
            num_classes: 3,
            attention: AttentionVariantConfig::new(variant, 4, kv, 2),
        }
    }

    fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
        let mut r = rng::derive(Stream::Data, seed, &[]);
        Tensor::uniform(
            [batch, cfg.channels, cfg.image_size, cfg.image_size],
            0.0,
            1.0,
            &mut r,
        )
    }

    #[test]
    fn count_matches_shapes() {
        for (variant, kv) in [
            (Variant::Mha, 4),
            (Variant::Gqa, 2),
            (Variant::Mqa, 1),
            (Variant::Kdgqa, 3),
        ] {
            let cfg = tiny(variant, kv, 2);
            assert_eq!(ViTParams::init(&cfg, 0).numel(), parameter_count(&cfg));
        }
        let micro = ViTConfig::preset("vit-micro", Variant::Gqa, 4).unwrap();
        assert_eq!(ViTParams::init(&micro, 0).numel(), parameter_count(&micro));
    }

    #[test]
    fn patchify_layout() {
        let cfg = ViTConfig {
            channels: 1,
            ..tiny(Variant::Mha, 4, 1)
        };
        let img = Tensor::from_fn([1, 1, 8, 8], |i| i as f64);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16]);
        // second patch: rows 0..4, columns 4..8
        assert_eq!(&p.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(&p.data()[20..24], &[12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let cfg = tiny(Variant::Gqa, 2, 2);
        let mut params = ViTParams::init(&cfg, 1).map(|_, t| Tensor::zeros(t.shape()));
        params.head_b = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut model = ViT::from_params(cfg.clone(), params).unwrap();
        let logits = model.predict(&images(&cfg, 4, 2)).unwrap();
        for row in logits.data().chunks_exact(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn depth_zero_is_embedding_and_head() {
        let cfg = tiny(Variant::Gqa, 2, 0);
        let mut model = ViT::new(cfg.clone(), 3).unwrap();
        let img = images(&cfg, 2, 3);
        let got = model.predict(&img).unwrap();
        let p = &model.params;
        let cls = p
            .cls
            .reshape([1, 1, 8])
            .unwrap()
            .add(&p.pos.slice(0, 0, 1).unwrap())
            .unwrap();
        let x = cls
            .layernorm(&p.ln_g, &p.ln_b, LAYERNORM_EPS)
            .unwrap()
            .reshape([1, 8])
            .unwrap();
        let expect = x.matmul(&p.head_w).unwrap().add(&p.head_b).unwrap();
        for row in got.data().chunks_exact(3) {
            for (a, b) in row.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        for variant in [Variant::Gqa, Variant::Kdgqa, Variant::Pgqa] {
            let cfg = tiny(variant, 2, 2);
            let img = images(&cfg, 3, 4);
            let a = ViT::new(cfg.clone(), 5).unwrap().predict(&img).unwrap();
            let b = ViT::new(cfg.clone(), 5).unwrap().predict(&img).unwrap();
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn end_to_end_gradients() {
        for variant in [Variant::Gqa, Variant::Kdgqa] {
            let cfg = tiny(variant, 2, 2);
            let model = ViT::new(cfg.clone(), 6).unwrap();
            let img = images(&cfg, 2, 7);
            let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
            for name in &names {
                let x = model
                    .params
                    .named()
                    .into_iter()
                    .find(|(n, _)| n == name)
                    .unwrap()
                    .1
                    .clone();
                let err = grad_check(
                    |v| {
                        let tape = v.tape();
                        let p = model
                            .params
                            .map(|n, t| if n == name { v } else { tape.leaf(t.clone()) });
                        let mut m = model.clone();
                        let fwd =
                            m.forward_with(tape, p, &img, Mode::Eval, ForwardOptions::default())?;
                        fwd.logits.cross_entropy(&[0, 2])
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-3, "{variant} {name}: {err}");
            }
        }
    }
}

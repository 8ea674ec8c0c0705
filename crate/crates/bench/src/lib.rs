//! Shared fixtures for the criterion benches.

use gqa_core::{Variant, ViT, ViTConfig};

/// `vit-micro` at 16x16 with the given variant; mha and mqa get their fixed
/// key/value head counts, everything else four.
pub fn micro(variant: Variant) -> ViT {
    let kv = match variant {
        Variant::Mha => 8,
        Variant::Mqa => 1,
        _ => 4,
    };
    let mut cfg = ViTConfig::preset("vit-micro", variant, kv).expect("preset");
    cfg.image_size = 16;
    ViT::new(cfg, 0).expect("valid config")
}

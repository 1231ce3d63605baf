//! Trainable parameter layout shared by every stage of the pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{uniform, ParamSet, Tensor2};

/// Width choices for every learned head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Per-point feature width.
    pub feature_dim: usize,
    /// Query embedding width.
    pub embed_dim: usize,
    /// Hidden width of every two-layer MLP.
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            embed_dim: 32,
            hidden_dim: 32,
        }
    }
}

pub mod names {
    pub const POOL: &str = "pool";
    pub const BOX: &str = "box";
    pub const ATTN_Q: &str = "dec.attn_q";
    pub const ATTN_K: &str = "dec.attn_k";
    pub const ATTN_V: &str = "dec.attn_v";
    pub const POINT_PROJ_W: &str = "dec.point_proj.weight";
    pub const POINT_PROJ_B: &str = "dec.point_proj.bias";
    pub const OBJ_W: &str = "dec.obj.weight";
    pub const OBJ_B: &str = "dec.obj.bias";
    pub const STM_KEY: &str = "stm.key";
    pub const STM_VALUE: &str = "stm.value";
    pub const STM_TAU_W: &str = "stm.tau.weight";
    pub const STM_TAU_B: &str = "stm.tau.bias";
    /// Track association affinity head.
    pub const LTM: &str = "ltm";
    /// Mask merging affinity head.
    pub const LMI: &str = "lmi";
}

/// Names of one affinity head: geometric MLP plus the match and gate projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityNames {
    pub geo: String,
    pub w: String,
    pub w_gate: String,
}

impl AffinityNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            geo: format!("{prefix}.geo"),
            w: format!("{prefix}.w"),
            w_gate: format!("{prefix}.w_gate"),
        }
    }
}

fn init_affinity(p: &mut ParamSet, prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) {
    let n = AffinityNames::new(prefix);
    p.init_mlp(&n.geo, &[1, dims.hidden_dim, dims.embed_dim], rng);
    p.insert(n.w, uniform(dims.embed_dim, 1, dims.embed_dim, rng));
    p.insert(n.w_gate, uniform(dims.embed_dim, 1, dims.embed_dim, rng));
}

/// Seeded initialisation, uniform in `±1/sqrt(fan_in)`. The receptive-field
/// head starts with zero bias.
pub fn init_params(dims: &ModelDims, seed: u64) -> ParamSet {
    use names::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, d, h) = (dims.feature_dim, dims.embed_dim, dims.hidden_dim);
    let mut p = ParamSet::new();
    p.init_mlp(POOL, &[f, h, d], &mut rng);
    p.init_mlp(BOX, &[d, h, 6], &mut rng);
    p.insert(ATTN_Q, uniform(d, d, d, &mut rng));
    p.insert(ATTN_K, uniform(d, d, d, &mut rng));
    p.insert(ATTN_V, uniform(d, d, d, &mut rng));
    p.insert(POINT_PROJ_W, uniform(f, d, f, &mut rng));
    p.insert(POINT_PROJ_B, uniform(1, d, f, &mut rng));
    p.insert(OBJ_W, uniform(d, 1, d, &mut rng));
    p.insert(OBJ_B, Tensor2::zeros(1, 1));
    p.insert(STM_KEY, uniform(d, d, d, &mut rng));
    p.insert(STM_VALUE, uniform(d, d, d, &mut rng));
    p.insert(STM_TAU_W, uniform(d, 1, d, &mut rng));
    p.insert(STM_TAU_B, Tensor2::zeros(1, 1));
    init_affinity(&mut p, LTM, dims, &mut rng);
    init_affinity(&mut p, LMI, dims, &mut rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_complete_and_seeded() {
        let dims = ModelDims::default();
        let a = init_params(&dims, 5);
        assert_eq!(a, init_params(&dims, 5));
        assert_ne!(a, init_params(&dims, 6));
        assert_eq!(a.mlp(names::POOL).unwrap().input_dim(), 16);
        assert_eq!(a.mlp(names::POOL).unwrap().output_dim(), 32);
        assert_eq!(a.mlp(names::BOX).unwrap().output_dim(), 6);
        assert_eq!(a.mlp("ltm.geo").unwrap().input_dim(), 1);
        assert!(a.contains("lmi.w_gate"));
        assert!(a.is_finite());
    }
}

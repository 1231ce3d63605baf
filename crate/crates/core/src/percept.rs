//! Instance queries from a frame: mask pooling, the box head and the
//! two-branch decoder.
//!
//! Every operation exists in two forms. The `*_on_tape` functions record onto
//! a caller-owned [`Tape`] so training can differentiate through them; the
//! plain functions evaluate on a private tape and return values.

use serde::{Deserialize, Serialize};

use crate::diff::{mlp_on_tape, Activation, Bound, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::geom::{centroid, Aabb, Vec3};
use crate::model::names;
use crate::sim::FrameObservation;

/// One segment of the current frame as seen by the trackers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceQuery {
    pub embedding: Vec<f64>,
    pub centroid: Vec3,
    #[serde(rename = "box")]
    pub bbox: Aabb,
    /// Local point indices of the frame.
    pub mask: Vec<usize>,
    pub objectness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Self-attention among queries, one-to-one supervision.
    OneToOne,
    /// Heads applied to each query alone, one-to-many supervision.
    OneToMany,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub branch: Branch,
    /// Query embeddings after the branch's mixing step, `N x d`.
    pub embeddings: Tensor2,
    /// `N x num_points`.
    pub mask_logits: Tensor2,
    pub objectness_logits: Vec<f64>,
    pub boxes: Vec<Aabb>,
}

impl DecoderOutput {
    pub fn objectness(&self) -> Vec<f64> {
        self.objectness_logits.iter().map(|&z| crate::diff::sigmoid(z)).collect()
    }
}

/// Decoder results recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub embeddings: Var,
    /// Present only when mask logits were requested.
    pub mask_logits: Option<Var>,
    /// `N x 1`.
    pub objectness_logits: Var,
    /// `N x 6` as `(min xyz, max xyz)`.
    pub boxes: Var,
}

fn check_masks(obs: &FrameObservation, masks: &[Vec<usize>]) -> Result<()> {
    for m in masks {
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
        if let Some(&p) = m.iter().find(|&&p| p >= obs.num_points()) {
            return Err(Error::InvalidInput(format!(
                "mask index {p} out of range for {} points",
                obs.num_points()
            )));
        }
    }
    Ok(())
}

/// Mean member feature per mask, `N x f`.
pub fn mean_features(obs: &FrameObservation, masks: &[Vec<usize>]) -> Result<Tensor2> {
    check_masks(obs, masks)?;
    let f = obs.feature_dim;
    let mut out = Tensor2::zeros(masks.len(), f);
    for (i, m) in masks.iter().enumerate() {
        let row = out.row_mut(i);
        for &p in m {
            for (o, x) in row.iter_mut().zip(obs.feature(p)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

pub fn mask_centroids(obs: &FrameObservation, masks: &[Vec<usize>]) -> Result<Vec<Vec3>> {
    check_masks(obs, masks)?;
    masks
        .iter()
        .map(|m| centroid(&m.iter().map(|&p| obs.points[p]).collect::<Vec<_>>()))
        .collect()
}

/// Records the pooling MLP over each mask's mean feature. Returns `N x d`
/// embeddings and the mask centroids.
pub fn pool_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    obs: &FrameObservation,
    masks: &[Vec<usize>],
) -> Result<(Var, Vec<Vec3>)> {
    let means = mean_features(obs, masks)?;
    let x = mask_centroids(obs, masks)?;
    let layers = bound.mlp(names::POOL);
    if layers.is_empty() || tape.shape(layers[0].0).0 != obs.feature_dim {
        return Err(Error::Shape(format!(
            "pooling head does not accept {}-dimensional features",
            obs.feature_dim
        )));
    }
    let m = tape.leaf(means);
    Ok((mlp_on_tape(tape, &layers, Activation::Relu, m), x))
}

pub fn pool(obs: &FrameObservation, masks: &[Vec<usize>], params: &ParamSet) -> Result<(Tensor2, Vec<Vec3>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (q, x) = pool_on_tape(&mut tape, &bound, obs, masks)?;
    Ok((tape.value(q).clone(), x))
}

/// Records the box head. The raw output `(c, s)` decodes to the box of side
/// `softplus(s)` centred on `anchor + c`, so `min ≤ max` holds by
/// construction.
pub fn boxes_on_tape(tape: &mut Tape, bound: &Bound, q: Var, anchors: &[Vec3]) -> Var {
    let raw = mlp_on_tape(tape, &bound.mlp(names::BOX), Activation::Relu, q);
    let offset = tape.slice_cols(raw, 0, 3);
    let rows: Vec<[f64; 3]> = anchors.to_vec();
    let anchor = tape.leaf(Tensor2::from_rows(&rows, 3).expect("anchor rows"));
    let center = tape.add(offset, anchor);
    let side = tape.slice_cols(raw, 3, 6);
    let side = tape.softplus(side);
    let half = tape.scale(side, 0.5);
    let lo = tape.sub(center, half);
    let hi = tape.add(center, half);
    tape.concat_cols(vec![lo, hi])
}

/// Reads `N x 6` box rows back into boxes.
pub fn boxes_from_tensor(t: &Tensor2) -> Result<Vec<Aabb>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            Aabb::from_array([r[0], r[1], r[2], r[3], r[4], r[5]])
        })
        .collect()
}

pub fn boxes_to_tensor(boxes: &[Aabb]) -> Tensor2 {
    let rows: Vec<[f64; 6]> = boxes.iter().map(|b| b.to_array()).collect();
    let mut t = Tensor2::zeros(boxes.len(), 6);
    for (i, r) in rows.iter().enumerate() {
        t.row_mut(i).copy_from_slice(r);
    }
    t
}

/// Boxes centred on the origin plus the predicted offset.
pub fn predict_boxes(q: &Tensor2, params: &ParamSet) -> Result<Vec<Aabb>> {
    predict_boxes_anchored(q, &vec![[0.0; 3]; q.rows()], params)
}

/// Boxes centred on each query's anchor (its mask centroid) plus the
/// predicted offset.
pub fn predict_boxes_anchored(q: &Tensor2, anchors: &[Vec3], params: &ParamSet) -> Result<Vec<Aabb>> {
    if anchors.len() != q.rows() {
        return Err(Error::Shape(format!("{} anchors for {} queries", anchors.len(), q.rows())));
    }
    if q.rows() == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let qv = tape.leaf(q.clone());
    let b = boxes_on_tape(&mut tape, &bound, qv, anchors);
    boxes_from_tensor(tape.value(b))
}

/// Per-point features as an `n x f` matrix.
pub fn point_features(obs: &FrameObservation) -> Tensor2 {
    Tensor2::from_vec(obs.num_points(), obs.feature_dim, obs.features.clone()).expect("feature layout")
}

/// Records one decoder branch on `q` (`N x d`). Mask logits are computed only
/// when `points` is given.
pub fn decode_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    q: Var,
    anchors: &[Vec3],
    points: Option<Var>,
    branch: Branch,
) -> DecoderVars {
    let d = tape.shape(q).1;
    let mixed = match branch {
        Branch::OneToOne => {
            let qa = tape.matmul(q, bound.get(names::ATTN_Q));
            let ka = tape.matmul(q, bound.get(names::ATTN_K));
            let va = tape.matmul(q, bound.get(names::ATTN_V));
            let s = tape.matmul_t(qa, ka);
            let s = tape.scale(s, 1.0 / (d as f64).sqrt());
            let att = tape.softmax_rows(s);
            let mix = tape.matmul(att, va);
            tape.add(q, mix)
        }
        Branch::OneToMany => q,
    };
    let mask_logits = points.map(|f| {
        let proj = tape.linear(f, bound.get(names::POINT_PROJ_W), bound.get(names::POINT_PROJ_B));
        tape.matmul_t(mixed, proj)
    });
    let objectness_logits = tape.linear(mixed, bound.get(names::OBJ_W), bound.get(names::OBJ_B));
    let boxes = boxes_on_tape(tape, bound, mixed, anchors);
    DecoderVars {
        embeddings: mixed,
        mask_logits,
        objectness_logits,
        boxes,
    }
}

/// Full decoder pass of one branch, with boxes anchored at the mask centroids.
pub fn decode(
    q: &Tensor2,
    anchors: &[Vec3],
    obs: &FrameObservation,
    params: &ParamSet,
    branch: Branch,
) -> Result<DecoderOutput> {
    if anchors.len() != q.rows() {
        return Err(Error::Shape(format!("{} anchors for {} queries", anchors.len(), q.rows())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let qv = tape.leaf(q.clone());
    let f = tape.leaf(point_features(obs));
    let out = decode_on_tape(&mut tape, &bound, qv, anchors, Some(f), branch);
    Ok(DecoderOutput {
        branch,
        embeddings: tape.value(out.embeddings).clone(),
        mask_logits: tape.value(out.mask_logits.expect("requested")).clone(),
        objectness_logits: tape.value(out.objectness_logits).data().to_vec(),
        boxes: boxes_from_tensor(tape.value(out.boxes))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelDims};
    use proptest::prelude::*;

    fn obs_from(points: Vec<Vec3>, features: Vec<Vec<f64>>) -> FrameObservation {
        let f = features[0].len();
        FrameObservation {
            t: 0,
            point_ids: (0..points.len() as u32).collect(),
            gt_labels: vec![None; points.len()],
            fragments: vec![(0..points.len()).collect()],
            points,
            feature_dim: f,
            features: features.concat(),
        }
    }

    fn identity_pool(f: usize) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("pool.0.weight", Tensor2::identity(f));
        p.insert("pool.0.bias", Tensor2::zeros(1, f));
        p
    }

    fn small_obs() -> FrameObservation {
        obs_from(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [1.0, 1.0, 1.0]],
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.5], vec![0.0, 0.0]],
        )
    }

    #[test]
    fn mean_pooling_under_identity() {
        let obs = small_obs();
        let p = identity_pool(2);
        let (q, x) = pool(&obs, &[vec![0, 1]], &p).unwrap();
        assert_eq!(q.row(0), &[2.0, 3.0]);
        assert_eq!(x[0], [1.0, 0.0, 0.0]);

        let (q, _) = pool(&obs, &[vec![2]], &p).unwrap();
        assert_eq!(q.row(0), obs.feature(2));

        let (q, x) = pool(&obs, &[vec![2], vec![0, 1]], &p).unwrap();
        assert_eq!(q.row(0), &[-1.0, 0.5]);
        assert_eq!(q.row(1), &[2.0, 3.0]);
        assert_eq!(x[0], [0.0, 4.0, 0.0]);
    }

    #[test]
    fn pooling_rejects_bad_masks() {
        let obs = small_obs();
        let p = identity_pool(2);
        assert!(matches!(pool(&obs, &[vec![]], &p), Err(Error::EmptyMask)));
        assert!(pool(&obs, &[vec![9]], &p).is_err());
    }

    fn zero_heads(d: usize, f: usize) -> ParamSet {
        let dims = ModelDims {
            feature_dim: f,
            embed_dim: d,
            hidden_dim: 4,
        };
        let mut p = init_params(&dims, 0);
        for (name, t) in p.iter_mut() {
            if name.starts_with("box.") || name.starts_with("dec.") {
                *t = Tensor2::zeros(t.rows(), t.cols());
            }
        }
        p
    }

    #[test]
    fn bias_only_box_decode() {
        let p = zero_heads(3, 2);
        let q = Tensor2::from_rows(&[[0.5, -1.0, 2.0]], 3).unwrap();
        let b = predict_boxes(&q, &p).unwrap()[0];
        let half = 0.5 * std::f64::consts::LN_2;
        assert_eq!(b.min, [-half; 3]);
        assert_eq!(b.max, [half; 3]);
        let b = predict_boxes_anchored(&q, &[[1.0, 2.0, 3.0]], &p).unwrap()[0];
        assert_eq!(b.center(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn identical_embeddings_give_identical_boxes() {
        let p = init_params(&ModelDims::default(), 3);
        let row: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = Tensor2::from_rows(&[row.clone(), row], 32).unwrap();
        let b = predict_boxes(&q, &p).unwrap();
        assert_eq!(b[0], b[1]);
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let p = zero_heads(3, 2);
        let obs = small_obs();
        let q = Tensor2::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]], 3).unwrap();
        let out = decode(&q, &[[0.0; 3]; 2], &obs, &p, Branch::OneToOne).unwrap();
        assert_eq!(out.mask_logits.shape(), (2, 4));
        assert!(out.mask_logits.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.objectness(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_query_branches_agree() {
        let mut p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 4 }, 9);
        p.insert(names::ATTN_V, Tensor2::zeros(4, 4));
        let obs = small_obs();
        let q = Tensor2::from_rows(&[[0.3, -0.2, 0.9, 0.1]], 4).unwrap();
        let a = decode(&q, &[[0.0; 3]], &obs, &p, Branch::OneToOne).unwrap();
        let b = decode(&q, &[[0.0; 3]], &obs, &p, Branch::OneToMany).unwrap();
        assert_eq!(a.mask_logits, b.mask_logits);
        assert_eq!(a.objectness_logits, b.objectness_logits);
    }

    #[test]
    fn attention_separates_branches() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 4 }, 9);
        let obs = small_obs();
        let q = Tensor2::from_rows(&[[0.3, -0.2, 0.9, 0.1], [-1.0, 0.5, 0.2, 0.7]], 4).unwrap();
        let a = decode(&q, &[[0.0; 3]; 2], &obs, &p, Branch::OneToOne).unwrap();
        let b = decode(&q, &[[0.0; 3]; 2], &obs, &p, Branch::OneToMany).unwrap();
        let diff = a.mask_logits.zip_map(&b.mask_logits, |x, y| (x - y).abs()).max_abs();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn one_to_many_has_no_cross_query_flow() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 4 }, 2);
        let obs = small_obs();
        let q = Tensor2::from_rows(&[[0.3, -0.2, 0.9, 0.1], [-1.0, 0.5, 0.2, 0.7]], 4).unwrap();
        let mut q2 = q.clone();
        q2.row_mut(1).copy_from_slice(&[5.0, 5.0, -5.0, 2.0]);
        let a = decode(&q, &[[0.0; 3]; 2], &obs, &p, Branch::OneToMany).unwrap();
        let b = decode(&q2, &[[0.0; 3]; 2], &obs, &p, Branch::OneToMany).unwrap();
        assert_eq!(a.mask_logits.row(0), b.mask_logits.row(0));
        assert_eq!(a.objectness_logits[0], b.objectness_logits[0]);
        assert_eq!(a.boxes[0], b.boxes[0]);
    }

    #[test]
    fn pooling_and_boxes_follow_mask_order() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 4 }, 4);
        let obs = small_obs();
        let masks = vec![vec![0, 1], vec![2], vec![3]];
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| masks[i].clone()).collect();
        let (q, x) = pool(&obs, &masks, &p).unwrap();
        let (qp, xp) = pool(&obs, &permuted, &p).unwrap();
        let b = predict_boxes_anchored(&q, &x, &p).unwrap();
        let bp = predict_boxes_anchored(&qp, &xp, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(qp.row(k), q.row(i));
            assert_eq!(bp[k], b[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn boxes_are_always_valid(seed in 0u64..1000, scale in 0.1f64..50.0, off in -20.0f64..20.0) {
            let dims = ModelDims { feature_dim: 2, embed_dim: 3, hidden_dim: 3 };
            let mut p = init_params(&dims, seed);
            for (_, t) in p.iter_mut() {
                *t = t.map(|x| x * scale);
            }
            let q = Tensor2::from_rows(&[[off, -off * 0.5, 1.0]], 3).unwrap();
            let b = predict_boxes(&q, &p).unwrap()[0];
            prop_assert!((0..3).all(|k| b.min[k] <= b.max[k]));
        }
    }
}

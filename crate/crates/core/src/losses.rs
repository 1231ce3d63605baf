//! Training objectives, recorded on a [`Tape`] so one backward pass yields
//! every parameter gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::ltm::hungarian;
use crate::percept::DecoderVars;
use crate::scl::IcmsTargets;
use crate::sim::{gt_boxes, FrameObservation};

/// Logits are clipped to this magnitude before any cross-entropy.
pub const LOGIT_CLIP: f64 = 30.0;

/// Assignment cost for pairs that must never be selected.
const FORBIDDEN: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta_ltm: f64,
    pub beta_agg: f64,
    /// One-to-many mask term.
    pub lambda: f64,
    /// Background objectness term.
    pub gamma: f64,
    pub beta_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_ltm: 1.0,
            beta_agg: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            beta_conf: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_ltm, self.beta_agg, self.lambda, self.gamma, self.beta_conf];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// How the one-to-many supervision is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcmsMode {
    /// One-to-one supervision only.
    Off,
    /// One-to-many supervision replaces one-to-one on the attention branch.
    SingleBranch,
    /// Attention branch one-to-one, attention-free branch one-to-many.
    DualBranch,
}

/// Visible ground truth of one frame in local point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGt {
    pub num_points: usize,
    pub instances: BTreeMap<u32, Vec<usize>>,
    pub boxes: BTreeMap<u32, [f64; 6]>,
}

impl FrameGt {
    pub fn from_obs(obs: &FrameObservation) -> Self {
        Self {
            num_points: obs.num_points(),
            instances: obs.instance_points(),
            boxes: gt_boxes(obs).into_iter().map(|(k, b)| (k, b.to_array())).collect(),
        }
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.leaf(Tensor2::scalar(0.0))
}

/// Mean binary cross-entropy of clipped logits `z` against targets `y`.
fn bce(tape: &mut Tape, z: Var, y: &Tensor2) -> Var {
    let z = tape.clamp(z, -LOGIT_CLIP, LOGIT_CLIP);
    let sp = tape.softplus(z);
    let yv = tape.leaf(y.clone());
    let yz = tape.mul(yv, z);
    let l = tape.sub(sp, yz);
    tape.mean(l)
}

/// Per-query mask and box loss: BCE and smoothed Dice on the mask logits
/// (`1 x n`) plus mean absolute error on the six box coordinates.
pub fn mask_box_loss(tape: &mut Tape, logits: Var, target: &Tensor2, bbox: Var, gt_box: &[f64; 6]) -> Var {
    let b = bce(tape, logits, target);
    let z = tape.clamp(logits, -LOGIT_CLIP, LOGIT_CLIP);
    let p = tape.sigmoid(z);
    let yv = tape.leaf(target.clone());
    let py = tape.mul(p, yv);
    let inter = tape.sum(py);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, 1.0);
    let sp = tape.sum(p);
    let den = tape.add_scalar(sp, target.sum() + 1.0);
    let ratio = tape.div(num, den);
    let dice = tape.scale(ratio, -1.0);
    let dice = tape.add_scalar(dice, 1.0);
    let g = tape.leaf(Tensor2::row_vector(gt_box));
    let diff = tape.sub(bbox, g);
    let ad = tape.abs(diff);
    let l1 = tape.mean(ad);
    let s = tape.add(b, dice);
    tape.add(s, l1)
}

fn mask_target(gt: &FrameGt, k: u32) -> Tensor2 {
    let mut y = Tensor2::zeros(1, gt.num_points);
    for &p in &gt.instances[&k] {
        y.set(0, p, 1.0);
    }
    y
}

fn query_loss(tape: &mut Tape, out: &DecoderVars, i: usize, gt: &FrameGt, k: u32) -> Result<Var> {
    let logits = out
        .mask_logits
        .ok_or_else(|| Error::InvalidInput("segmentation loss needs mask logits".into()))?;
    let row = tape.gather_rows(logits, vec![i]);
    let b = tape.gather_rows(out.boxes, vec![i]);
    Ok(mask_box_loss(tape, row, &mask_target(gt, k), b, &gt.boxes[&k]))
}

/// One-to-one matching of input masks to visible instances by maximum IoU.
/// Pairs without overlap are dropped.
pub fn match_queries_to_gt(masks: &[Vec<usize>], gt: &FrameGt) -> Result<Vec<(usize, u32)>> {
    let ids: Vec<u32> = gt.instances.keys().copied().collect();
    if masks.is_empty() || ids.is_empty() {
        return Ok(Vec::new());
    }
    let mut label = vec![None; gt.num_points];
    for (&k, pts) in &gt.instances {
        for &p in pts {
            label[p] = Some(k);
        }
    }
    let mut iou = Tensor2::zeros(masks.len(), ids.len());
    for (i, m) in masks.iter().enumerate() {
        for (c, &k) in ids.iter().enumerate() {
            let inter = m.iter().filter(|&&p| label[p] == Some(k)).count() as f64;
            if inter > 0.0 {
                iou.set(i, c, inter / (m.len() as f64 + gt.instances[&k].len() as f64 - inter));
            }
        }
    }
    Ok(hungarian(&iou, true)?
        .into_iter()
        .filter(|&(i, c)| iou.get(i, c) > 0.0)
        .map(|(i, c)| (i, ids[c]))
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct SegTerms {
    pub one_to_one: Var,
    pub one_to_many: Var,
    pub background: Var,
    pub total: Var,
}

/// Segmentation objective for one frame.
///
/// `one_to_one` is the attention branch. `one_to_many` is the attention-free
/// branch and is required only in [`IcmsMode::DualBranch`].
pub fn seg_loss(
    tape: &mut Tape,
    one_to_one: &DecoderVars,
    one_to_many: Option<&DecoderVars>,
    masks: &[Vec<usize>],
    gt: &FrameGt,
    icms: &IcmsTargets,
    mode: IcmsMode,
    w: &LossWeights,
) -> Result<SegTerms> {
    let n = masks.len();
    let sum_terms = |tape: &mut Tape, terms: Vec<Var>| -> Var {
        terms.into_iter().reduce(|a, b| tape.add(a, b)).unwrap_or_else(|| zero(tape))
    };
    let many_terms = |tape: &mut Tape, out: &DecoderVars| -> Result<Vec<Var>> {
        let mut v = Vec::new();
        for (&k, members) in &icms.groups {
            for &i in members {
                v.push(query_loss(tape, out, i, gt, k)?);
            }
        }
        Ok(v)
    };
    let mut positive = vec![0.0; n];
    let (l11, l1n) = match mode {
        IcmsMode::SingleBranch => {
            for r in icms.rank.iter().enumerate().filter(|r| r.1.is_some()) {
                positive[r.0] = 1.0;
            }
            let t = many_terms(tape, one_to_one)?;
            (zero(tape), sum_terms(tape, t))
        }
        IcmsMode::Off | IcmsMode::DualBranch => {
            let mut t = Vec::new();
            for (i, k) in match_queries_to_gt(masks, gt)? {
                positive[i] = 1.0;
                t.push(query_loss(tape, one_to_one, i, gt, k)?);
            }
            let l11 = sum_terms(tape, t);
            let l1n = match (mode, one_to_many) {
                (IcmsMode::DualBranch, Some(out)) => {
                    let t = many_terms(tape, out)?;
                    sum_terms(tape, t)
                }
                (IcmsMode::DualBranch, None) => {
                    return Err(Error::InvalidInput("dual-branch supervision needs both branches".into()))
                }
                _ => zero(tape),
            };
            (l11, l1n)
        }
    };
    let bg = if n == 0 {
        zero(tape)
    } else {
        bce(tape, one_to_one.objectness_logits, &Tensor2::col_vector(&positive))
    };
    let weighted_many = tape.scale(l1n, w.lambda);
    let weighted_bg = tape.scale(bg, w.gamma);
    let total = tape.add(l11, weighted_many);
    let total = tape.add(total, weighted_bg);
    Ok(SegTerms {
        one_to_one: l11,
        one_to_many: l1n,
        background: bg,
        total,
    })
}

/// Ground-truth association targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTargets {
    /// `y_ij = 1` when segment `i` and tracklet `j` share an instance.
    pub y: Tensor2,
    /// Minimum `-log M̂` assignment restricted to pairs with `y = 1`.
    pub pi: Vec<(usize, usize)>,
}

impl MatchTargets {
    pub fn new(y: Tensor2, log_m: &Tensor2) -> Result<Self> {
        if y.shape() != log_m.shape() {
            return Err(Error::Shape(format!("targets {:?} vs scores {:?}", y.shape(), log_m.shape())));
        }
        for i in 0..y.rows() {
            if y.row(i).iter().filter(|&&v| v == 1.0).count() > 1 {
                return Err(Error::InvalidInput(format!("segment {i} has several true tracklets")));
            }
        }
        let mut cost = Tensor2::filled(y.rows(), y.cols(), FORBIDDEN);
        for (k, (&t, &l)) in y.data().iter().zip(log_m.data()).enumerate() {
            if t == 1.0 {
                cost.data_mut()[k] = -l;
            }
        }
        let pi = hungarian(&cost, false)?
            .into_iter()
            .filter(|&(i, j)| y.get(i, j) == 1.0)
            .collect();
        Ok(Self { y, pi })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LtmTerms {
    pub matching: Var,
    pub confidence: Var,
    pub total: Var,
}

/// Matching loss `-(1/N_t) Σ_{π*} log M̂` plus the gate's cross-entropy
/// against `y`, averaged over all pairs. Without a gate only the matching
/// term remains.
pub fn ltm_loss(
    tape: &mut Tape,
    log_m: Var,
    gate_logits: Option<Var>,
    targets: &MatchTargets,
    w: &LossWeights,
) -> Result<LtmTerms> {
    let (n_t, n_trk) = tape.shape(log_m);
    if targets.y.shape() != (n_t, n_trk) {
        return Err(Error::Shape("targets do not match the affinity".into()));
    }
    let matching = if targets.pi.is_empty() || n_t == 0 {
        zero(tape)
    } else {
        let flat = tape.reshape(log_m, n_t * n_trk, 1);
        let picked = tape.gather_rows(flat, targets.pi.iter().map(|&(i, j)| i * n_trk + j).collect());
        let s = tape.sum(picked);
        tape.scale(s, -1.0 / n_t as f64)
    };
    let confidence = match gate_logits {
        Some(g) if n_t * n_trk > 0 => bce(tape, g, &targets.y),
        _ => zero(tape),
    };
    let wc = tape.scale(confidence, w.beta_conf);
    let total = tape.add(matching, wc);
    Ok(LtmTerms {
        matching,
        confidence,
        total,
    })
}

/// Unordered pairs `i < j` split by whether both masks belong to the same
/// instance.
pub fn aggregation_pairs(owner: &[Option<u32>]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..owner.len() {
        for j in i + 1..owner.len() {
            if owner[i].is_some() && owner[i] == owner[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

/// Pairwise mask-affinity cross-entropy on `min(A, Aᵀ)`: positives pushed to
/// 1, negatives to 0, each side averaged separately.
pub fn agg_loss(tape: &mut Tape, a: Var, owner: &[Option<u32>]) -> Result<Var> {
    let n = owner.len();
    if tape.shape(a) != (n, n) {
        return Err(Error::Shape(format!("affinity {:?} for {n} masks", tape.shape(a))));
    }
    let (pos, neg) = aggregation_pairs(owner);
    let at = tape.transpose(a);
    let s = tape.minimum(a, at);
    let flat = tape.reshape(s, n * n, 1);
    let mut total = zero(tape);
    if !pos.is_empty() {
        let v = tape.gather_rows(flat, pos.iter().map(|&(i, j)| i * n + j).collect());
        let l = tape.log(v);
        let m = tape.mean(l);
        total = tape.sub(total, m);
    }
    if !neg.is_empty() {
        let v = tape.gather_rows(flat, neg.iter().map(|&(i, j)| i * n + j).collect());
        let nv = tape.scale(v, -1.0);
        let one_minus = tape.add_scalar(nv, 1.0);
        let l = tape.log(one_minus);
        let m = tape.mean(l);
        total = tape.sub(total, m);
    }
    Ok(total)
}

/// `L_seg + β_ltm·L_ltm + β_agg·L_agg`; absent terms count as zero.
pub fn total_loss(tape: &mut Tape, seg: Var, ltm: Option<Var>, agg: Option<Var>, w: &LossWeights) -> Var {
    let mut total = seg;
    if let Some(l) = ltm {
        let s = tape.scale(l, w.beta_ltm);
        total = tape.add(total, s);
    }
    if let Some(l) = agg {
        let s = tape.scale(l, w.beta_agg);
        total = tape.add(total, s);
    }
    total
}

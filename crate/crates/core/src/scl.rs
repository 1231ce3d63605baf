//! Spatial consistency: merging fragment masks that belong together at
//! inference, and the one-to-many supervision targets used in training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::percept::pool;
use crate::sim::FrameObservation;

/// Overlap fraction a mask needs with an instance to count as part of it.
pub const MEMBERSHIP_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeResult {
    /// Union of each group's member masks, sorted.
    pub masks: Vec<Vec<usize>>,
    /// Original mask indices per group, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Group index of every original mask.
    pub group_of: Vec<usize>,
}

impl MergeResult {
    /// Every mask in its own group.
    pub fn identity(masks: &[Vec<usize>]) -> Self {
        Self {
            masks: masks.to_vec(),
            groups: (0..masks.len()).map(|i| vec![i]).collect(),
            group_of: (0..masks.len()).collect(),
        }
    }
}

/// Complete-linkage agglomerative grouping on `min(A_ij, A_ji)`.
///
/// The pair of groups with the highest linkage merges first (ties go to the
/// pair with the smaller leading indices) for as long as that linkage
/// exceeds `delta`, so every pair inside a final group exceeds `delta`.
pub fn cluster_merge(a: &Tensor2, delta: f64, masks: &[Vec<usize>]) -> Result<MergeResult> {
    let n = masks.len();
    if a.shape() != (n, n) {
        return Err(Error::Shape(format!("affinity {:?} for {n} masks", a.shape())));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("merge threshold must lie in (0, 1), got {delta}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("merge affinity".into()));
    }
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut link: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j).min(a.get(j, i))).collect())
        .collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        let mut best_val = delta;
        for g in 0..groups.len() {
            for h in g + 1..groups.len() {
                if link[g][h] > best_val {
                    best_val = link[g][h];
                    best = Some((g, h));
                }
            }
        }
        let Some((g, h)) = best else { break };
        let moved = groups.remove(h);
        groups[g].extend(moved);
        groups[g].sort_unstable();
        let row_h = link.remove(h);
        for row in link.iter_mut() {
            row.remove(h);
        }
        for x in 0..groups.len() {
            let hx = if x < h { row_h[x] } else { row_h[x + 1] };
            let v = link[g][x].min(hx);
            link[g][x] = v;
            link[x][g] = v;
        }
    }
    let mut group_of = vec![0; n];
    let masks = groups
        .iter()
        .enumerate()
        .map(|(gi, members)| {
            let mut m: Vec<usize> = members
                .iter()
                .flat_map(|&i| {
                    group_of[i] = gi;
                    masks[i].iter().copied()
                })
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        })
        .collect();
    Ok(MergeResult {
        masks,
        groups,
        group_of,
    })
}

/// Pooling over the merged masks.
pub fn repool_merged(obs: &FrameObservation, merge: &MergeResult, params: &ParamSet) -> Result<(Tensor2, Vec<Vec3>)> {
    pool(obs, &merge.masks, params)
}

/// Instance owning more than half of the mask's points, if any.
pub fn majority_instance(mask: &[usize], labels: &[Option<u32>]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in mask {
        if let Some(k) = labels[p] {
            *counts.entry(k).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .find(|&(_, c)| c as f64 / mask.len() as f64 > MEMBERSHIP_OVERLAP)
        .map(|(k, _)| k)
}

/// Ground-truth affinity: 1 between masks owned by the same instance, 0
/// elsewhere (and on the diagonal).
pub fn gt_affinity(masks: &[Vec<usize>], labels: &[Option<u32>]) -> Tensor2 {
    let owner: Vec<Option<u32>> = masks.iter().map(|m| majority_instance(m, labels)).collect();
    let n = masks.len();
    let mut a = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && owner[i].is_some() && owner[i] == owner[j] {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcmsTargets {
    /// Retained members per instance, best IoU first.
    pub groups: BTreeMap<u32, Vec<usize>>,
    /// `(instance, rank)` of every retained query.
    pub rank: Vec<Option<(u32, usize)>>,
    /// Owning instance of every query, retained or not.
    pub owner: Vec<Option<u32>>,
    /// IoU of every query's mask with its owner's visible points.
    pub iou: Vec<f64>,
}

/// Assigns each mask to the instance covering more than half of it and keeps
/// the `top_k` masks with the highest IoU per instance (ties by index).
pub fn build_icms_targets(masks: &[Vec<usize>], labels: &[Option<u32>], top_k: usize) -> Result<IcmsTargets> {
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for k in labels.iter().flatten() {
        *sizes.entry(*k).or_default() += 1;
    }
    let mut owner = Vec::with_capacity(masks.len());
    let mut iou = Vec::with_capacity(masks.len());
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
        if m.iter().any(|&p| p >= labels.len()) {
            return Err(Error::InvalidInput(format!("mask {i} indexes past the label array")));
        }
        let k = majority_instance(m, labels);
        let v = match k {
            Some(k) => {
                let inter = m.iter().filter(|&&p| labels[p] == Some(k)).count() as f64;
                members.entry(k).or_default().push(i);
                inter / (m.len() as f64 + sizes[&k] as f64 - inter)
            }
            None => 0.0,
        };
        owner.push(k);
        iou.push(v);
    }
    let mut rank = vec![None; masks.len()];
    let mut groups = BTreeMap::new();
    for (k, mut list) in members {
        list.sort_by(|&a, &b| iou[b].total_cmp(&iou[a]).then(a.cmp(&b)));
        list.truncate(top_k);
        for (r, &i) in list.iter().enumerate() {
            rank[i] = Some((k, r));
        }
        groups.insert(k, list);
    }
    Ok(IcmsTargets {
        groups,
        rank,
        owner,
        iou,
    })
}

//! Class-agnostic average precision over accumulated per-track point sets,
//! plus identity-switch and fragmentation diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltm::{FrameTracks, TrackDump};
use crate::sim::{check_version, SequenceFile};

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Union of one track's points over the whole sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedTrack {
    pub points: Vec<u32>,
    /// Mean per-frame objectness.
    pub score: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence_id: String,
    pub frames: Vec<FrameTracks>,
    pub tracks: BTreeMap<u64, AccumulatedTrack>,
}

impl SequenceResult {
    pub fn from_dump(dump: &TrackDump) -> Self {
        let mut sets: BTreeMap<u64, (BTreeSet<u32>, f64, usize)> = BTreeMap::new();
        for f in &dump.frames {
            for t in &f.tracks {
                let e = sets.entry(t.id).or_default();
                e.0.extend(t.points.iter().copied());
                e.1 += t.objectness;
                e.2 += 1;
            }
        }
        let tracks = sets
            .into_iter()
            .map(|(id, (pts, s, n))| {
                (
                    id,
                    AccumulatedTrack {
                        points: pts.into_iter().collect(),
                        score: s / n as f64,
                        frames: n,
                    },
                )
            })
            .collect();
        Self {
            sequence_id: dump.sequence_id.clone(),
            frames: dump.frames.clone(),
            tracks,
        }
    }
}

/// Ground truth in global point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sequence_id: String,
    /// Every point of each instance observed at least once.
    pub instances: BTreeMap<u32, Vec<u32>>,
    /// Visible points per instance, per frame.
    pub frames: Vec<BTreeMap<u32, Vec<u32>>>,
}

impl GroundTruth {
    pub fn from_sequence(seq: &SequenceFile) -> Result<Self> {
        let mut instances: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        let mut frames = Vec::with_capacity(seq.frames.len());
        for f in &seq.frames {
            if f.gt_labels.len() != f.num_points() {
                return Err(Error::MissingGroundTruth(format!("frame {} of {}", f.t, seq.sequence_id)));
            }
            let mut per: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (p, l) in f.gt_labels.iter().enumerate() {
                if let Some(k) = l {
                    per.entry(*k).or_default().push(f.point_ids[p]);
                    instances.entry(*k).or_default().insert(f.point_ids[p]);
                }
            }
            for v in per.values_mut() {
                v.sort_unstable();
            }
            frames.push(per);
        }
        Ok(Self {
            sequence_id: seq.sequence_id.clone(),
            instances: instances.into_iter().map(|(k, s)| (k, s.into_iter().collect())).collect(),
            frames,
        })
    }
}

fn intersection_count(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// IoU of two sorted, duplicate-free point-id sets.
pub fn mask_iou_3d(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.is_empty() && gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inter = intersection_count(pred, gt) as f64;
    Ok(inter / (pred.len() as f64 + gt.len() as f64 - inter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub threshold: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over the ten thresholds 0.50..0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub id_switches: u64,
    /// Predicted tracks per ground-truth instance.
    pub fragmentation_rate: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub curves: Vec<PrCurve>,
}

/// One ranked prediction, tagged with its scene so matching stays within it.
#[derive(Debug, Clone, Copy)]
pub struct Prediction<'a> {
    pub scene: usize,
    pub score: f64,
    pub points: &'a [u32],
}

/// Greedy score-ordered matching at one IoU threshold; AP is the exact area
/// under the precision envelope.
pub fn pr_curve(preds: &[Prediction], gts: &[Vec<Vec<u32>>], threshold: f64) -> PrCurve {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for &k in &order {
        let p = &preds[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, pts) in gts[p.scene].iter().enumerate() {
            if used[p.scene][g] {
                continue;
            }
            let inter = intersection_count(p.points, pts) as f64;
            let iou = inter / (p.points.len() as f64 + pts.len() as f64 - inter);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                used[p.scene][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    PrCurve {
        threshold,
        precision,
        recall,
        ap,
    }
}

/// Frames where an instance's dominant track differs from its dominant track
/// in the previous frame it was covered. The dominant track covers the most
/// of the instance's visible points (ties to the smaller id).
pub fn id_switches(result: &SequenceResult, gt: &GroundTruth) -> u64 {
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    let mut switches = 0;
    for (f, frame) in result.frames.iter().enumerate() {
        let Some(visible) = gt.frames.get(frame.t).or_else(|| gt.frames.get(f)) else {
            continue;
        };
        for (&k, pts) in visible {
            let mut best: Option<(usize, u64)> = None;
            for t in &frame.tracks {
                let n = intersection_count(&t.points, pts);
                if n > 0 && best.is_none_or(|(bn, bid)| n > bn || (n == bn && t.id < bid)) {
                    best = Some((n, t.id));
                }
            }
            if let Some((_, id)) = best {
                if let Some(prev) = last.insert(k, id) {
                    if prev != id {
                        switches += 1;
                    }
                }
            }
        }
    }
    switches
}

/// Tracks owning more than half their accumulated points in one instance,
/// counted per instance.
fn fragment_counts(result: &SequenceResult, gt: &GroundTruth) -> usize {
    let mut count = 0;
    for tr in result.tracks.values() {
        if tr.points.is_empty() {
            continue;
        }
        if gt
            .instances
            .values()
            .any(|g| intersection_count(&tr.points, g) as f64 / tr.points.len() as f64 > 0.5)
        {
            count += 1;
        }
    }
    count
}

pub fn fragmentation_rate(result: &SequenceResult, gt: &GroundTruth) -> f64 {
    if gt.instances.is_empty() {
        return 0.0;
    }
    fragment_counts(result, gt) as f64 / gt.instances.len() as f64
}

/// Metrics pooled over every sequence with at least one instance.
pub fn average_precision(pairs: &[(&SequenceResult, &GroundTruth)], thresholds: &[f64]) -> MetricsReport {
    let kept: Vec<&(&SequenceResult, &GroundTruth)> = pairs.iter().filter(|(_, g)| !g.instances.is_empty()).collect();
    let gts: Vec<Vec<Vec<u32>>> = kept.iter().map(|(_, g)| g.instances.values().cloned().collect()).collect();
    let preds: Vec<Prediction> = kept
        .iter()
        .enumerate()
        .flat_map(|(s, (r, _))| {
            r.tracks.values().filter(|t| !t.points.is_empty()).map(move |t| Prediction {
                scene: s,
                score: t.score,
                points: &t.points,
            })
        })
        .collect();
    let curves: Vec<PrCurve> = thresholds.iter().map(|&th| pr_curve(&preds, &gts, th)).collect();
    let ap = if curves.is_empty() {
        0.0
    } else {
        curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64
    };
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let fragments: usize = kept.iter().map(|(r, g)| fragment_counts(r, g)).sum();
    MetricsReport {
        ap,
        ap50: pr_curve(&preds, &gts, 0.5).ap,
        ap25: pr_curve(&preds, &gts, 0.25).ap,
        id_switches: kept.iter().map(|(r, g)| id_switches(r, g)).sum(),
        fragmentation_rate: if num_gt == 0 { 0.0 } else { fragments as f64 / num_gt as f64 },
        num_gt,
        num_pred: preds.len(),
        curves,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence_id: String,
    pub metrics: MetricsReport,
}

/// Per-sequence records plus the pooled aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub sequences: Vec<SequenceMetrics>,
    pub aggregate: MetricsReport,
}

impl EvalReport {
    /// Sequences without instances are left out.
    pub fn build(pairs: &[(&SequenceResult, &GroundTruth)]) -> Self {
        let th = ap_thresholds();
        let sequences = pairs
            .iter()
            .filter(|(_, g)| !g.instances.is_empty())
            .map(|p| SequenceMetrics {
                sequence_id: p.1.sequence_id.clone(),
                metrics: average_precision(std::slice::from_ref(p), &th),
            })
            .collect();
        Self {
            format_version: METRICS_FORMAT_VERSION,
            sequences,
            aggregate: average_precision(pairs, &th),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, METRICS_FORMAT_VERSION)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltm::TrackRecord;
    use proptest::prelude::*;

    fn gt(instances: &[(u32, Vec<u32>)], frames: Vec<BTreeMap<u32, Vec<u32>>>) -> GroundTruth {
        GroundTruth {
            sequence_id: "s".into(),
            instances: instances.iter().cloned().collect(),
            frames,
        }
    }

    fn single_frame(tracks: &[(u64, Vec<u32>, f64)]) -> SequenceResult {
        let mut d = TrackDump::new("s");
        d.frames.push(FrameTracks {
            t: 0,
            tracks: tracks
                .iter()
                .map(|(id, p, s)| TrackRecord { id: *id, points: p.clone(), objectness: *s })
                .collect(),
        });
        SequenceResult::from_dump(&d)
    }

    #[test]
    fn iou_definitions() {
        assert_eq!(mask_iou_3d(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(mask_iou_3d(&[1, 2], &[3]).unwrap(), 0.0);
        assert_eq!(mask_iou_3d(&[1, 2, 3, 4, 5], &[4, 5, 6, 7, 8]).unwrap(), 0.25);
        assert!(mask_iou_3d(&[], &[]).is_err());
    }

    #[test]
    fn perfect_and_empty() {
        let g = gt(&[(0, vec![1, 2, 3])], vec![]);
        let r = single_frame(&[(5, vec![1, 2, 3], 0.9)]);
        let m = average_precision(&[(&r, &g)], &ap_thresholds());
        assert_eq!((m.ap, m.ap50, m.ap25), (1.0, 1.0, 1.0));
        let r = single_frame(&[]);
        let m = average_precision(&[(&r, &g)], &ap_thresholds());
        assert_eq!((m.ap, m.ap50, m.ap25), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_recall_by_hand() {
        // IoU 3/5 = 0.6 with instance 0; instance 1 is never predicted
        let g = gt(&[(0, vec![1, 2, 3, 4]), (1, vec![10, 11])], vec![]);
        let r = single_frame(&[(0, vec![2, 3, 4, 5], 0.8)]);
        let m = average_precision(&[(&r, &g)], &ap_thresholds());
        assert_eq!(m.ap50, 0.5);
        assert_eq!(m.ap25, 0.5);
        // thresholds 0.50 and 0.55 pass, 0.60 is reached exactly only in exact arithmetic
        assert!(m.ap <= m.ap50);
    }

    #[test]
    fn precision_envelope() {
        // ranks: FP, TP, TP over 2 instances -> envelope (2/3 at r = 0.5 and r = 1)
        let g = gt(&[(0, vec![1]), (1, vec![2])], vec![]);
        let r = single_frame(&[(0, vec![9], 0.9), (1, vec![1], 0.8), (2, vec![2], 0.7)]);
        let c = pr_curve(
            &r.tracks.values().map(|t| Prediction { scene: 0, score: t.score, points: &t.points }).collect::<Vec<_>>(),
            &[g.instances.values().cloned().collect()],
            0.5,
        );
        assert_eq!(c.precision, vec![0.0, 0.5, 2.0 / 3.0]);
        assert!((c.ap - 2.0 / 3.0).abs() < 1e-15);
    }

    fn frames_of(ids: &[Option<u64>]) -> (SequenceResult, GroundTruth) {
        let mut d = TrackDump::new("s");
        let mut gframes = Vec::new();
        for (t, id) in ids.iter().enumerate() {
            d.frames.push(FrameTracks {
                t,
                tracks: id.map(|id| vec![TrackRecord { id, points: vec![1, 2], objectness: 1.0 }]).unwrap_or_default(),
            });
            gframes.push(if id.is_some() { BTreeMap::from([(0, vec![1, 2])]) } else { BTreeMap::new() });
        }
        (SequenceResult::from_dump(&d), gt(&[(0, vec![1, 2])], gframes))
    }

    #[test]
    fn switch_counting() {
        let (r, g) = frames_of(&[Some(1), Some(1), Some(1)]);
        assert_eq!(id_switches(&r, &g), 0);
        let (r, g) = frames_of(&[Some(1), None, None, Some(2), Some(2)]);
        assert_eq!(id_switches(&r, &g), 1);
        let (r, g) = frames_of(&[Some(1), None, Some(2), None, Some(3), None, Some(4)]);
        assert_eq!(id_switches(&r, &g), 3);
    }

    #[test]
    fn fragmentation() {
        let g = gt(&[(0, vec![1, 2, 3, 4]), (1, vec![5, 6])], vec![]);
        let r = single_frame(&[(0, vec![1, 2, 3, 4], 1.0), (1, vec![5, 6], 1.0)]);
        assert_eq!(fragmentation_rate(&r, &g), 1.0);
        let r = single_frame(&[(0, vec![1, 2], 1.0), (1, vec![3, 4], 1.0), (2, vec![5, 6], 1.0)]);
        assert_eq!(fragmentation_rate(&r, &g), 1.5);
    }

    #[test]
    fn reports_are_deterministic_and_skip_empty_gt() {
        let g = gt(&[(0, vec![1, 2, 3])], vec![]);
        let empty = GroundTruth { sequence_id: "e".into(), instances: BTreeMap::new(), frames: vec![] };
        let r = single_frame(&[(5, vec![1, 2], 0.4), (6, vec![3], 0.7)]);
        let a = EvalReport::build(&[(&r, &g), (&r, &empty)]);
        let b = EvalReport::build(&[(&r, &g), (&r, &empty)]);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.sequences.len(), 1);
        assert_eq!(EvalReport::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    proptest! {
        #[test]
        fn ap_is_monotone_in_threshold(
            preds in prop::collection::vec((prop::collection::btree_set(0u32..40, 1..15), 0.0f64..1.0), 0..8),
        ) {
            let g = gt(&[(0, (0..10).collect()), (1, (10..25).collect()), (2, (25..40).collect())], vec![]);
            let tracks: Vec<(u64, Vec<u32>, f64)> = preds
                .iter()
                .enumerate()
                .map(|(i, (s, sc))| (i as u64, s.iter().copied().collect(), *sc))
                .collect();
            let r = single_frame(&tracks);
            let m = average_precision(&[(&r, &g)], &ap_thresholds());
            prop_assert!(0.0 <= m.ap && m.ap <= m.ap50 + 1e-12 && m.ap50 <= m.ap25 + 1e-12 && m.ap25 <= 1.0);
        }
    }
}

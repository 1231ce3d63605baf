use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::affinity::{affinity_between, GatedAffinity};
use super::hungarian::hungarian;
use crate::diff::{ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::model::{names, AffinityNames};
use crate::percept::InstanceQuery;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtmConfig {
    /// Minimum gated affinity for a Hungarian pair to count as a match.
    pub theta_match: f64,
    /// Frames an unmatched tracklet stays active.
    pub t_life: usize,
    /// Capacity of the stale buffer.
    pub k_buf: usize,
    /// Match leftover segments against stale tracklets.
    pub recall: bool,
    /// Multiply match probabilities by the confidence gate.
    pub confidence_gate: bool,
    /// Restart a recalled tracklet's age at 1 instead of its stored age.
    pub reset_age_on_recall: bool,
}

impl Default for LtmConfig {
    fn default() -> Self {
        Self {
            theta_match: 0.2,
            t_life: 5,
            k_buf: 64,
            recall: true,
            confidence_gate: true,
            reset_age_on_recall: false,
        }
    }
}

impl LtmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_match > 0.0 && self.theta_match < 1.0) {
            return Err(Error::Config(format!("theta_match must lie in (0, 1), got {}", self.theta_match)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Active,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u64,
    pub embedding: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: Aabb,
    /// Number of observations folded into the running averages.
    pub age: u32,
    pub last_seen: usize,
    pub state: TrackState,
    /// Union of the global point ids of every observation.
    pub points: BTreeSet<u32>,
}

impl Tracklet {
    pub fn new(id: u64, embedding: Vec<f64>, bbox: Aabb, t: usize) -> Self {
        Self {
            id,
            embedding,
            bbox,
            age: 1,
            last_seen: t,
            state: TrackState::Active,
            points: BTreeSet::new(),
        }
    }

    /// Folds one observation into the running means:
    /// `x ← (α·x + x_t) / (α + 1)`, then `α ← α + 1`.
    pub fn observe(&mut self, embedding: &[f64], bbox: &Aabb, t: usize) -> Result<()> {
        if embedding.len() != self.embedding.len() {
            return Err(Error::Shape(format!(
                "observation width {} vs tracklet width {}",
                embedding.len(),
                self.embedding.len()
            )));
        }
        let a = self.age as f64;
        let inv = 1.0 / (a + 1.0);
        for (x, y) in self.embedding.iter_mut().zip(embedding) {
            *x = (a * *x + y) * inv;
        }
        let (old, new) = (self.bbox.to_array(), bbox.to_array());
        let mut merged = [0.0; 6];
        for k in 0..6 {
            merged[k] = (a * old[k] + new[k]) * inv;
        }
        self.bbox = Aabb::from_array(merged)?;
        self.age += 1;
        self.last_seen = t;
        Ok(())
    }
}

/// Association result: indices refer to the segment list passed in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Association {
    /// `(segment, active tracklet id)`.
    pub matched: Vec<(usize, u64)>,
    /// `(segment, stale tracklet id)` brought back.
    pub reactivated: Vec<(usize, u64)>,
    /// Segments that start a new tracklet.
    pub new: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBank {
    pub active: BTreeMap<u64, Tracklet>,
    pub stale: VecDeque<Tracklet>,
    pub next_id: u64,
    pub evicted: u64,
    pub config: LtmConfig,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, d: usize) -> Tensor2 {
    let rows: Vec<Vec<f64>> = rows.collect();
    if rows.is_empty() {
        return Tensor2::zeros(0, d);
    }
    Tensor2::from_rows(&rows, d).expect("equal widths")
}

impl TrackBank {
    pub fn new(config: LtmConfig) -> Self {
        Self {
            active: BTreeMap::new(),
            stale: VecDeque::new(),
            next_id: 0,
            evicted: 0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len() + self.stale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        self.active.contains_key(&id) || self.stale.iter().any(|t| t.id == id)
    }

    /// Scores `segments` against `tracks` and keeps Hungarian pairs whose
    /// score reaches the threshold.
    fn stage(
        &self,
        params: &ParamSet,
        segments: &[&InstanceQuery],
        tracks: &[&Tracklet],
    ) -> Result<Vec<(usize, usize)>> {
        if segments.is_empty() || tracks.is_empty() {
            return Ok(Vec::new());
        }
        let d = segments[0].embedding.len();
        let qt = stack(segments.iter().map(|s| s.embedding.clone()), d);
        let qk = stack(tracks.iter().map(|t| t.embedding.clone()), d);
        let bt: Vec<Aabb> = segments.iter().map(|s| s.bbox).collect();
        let bk: Vec<Aabb> = tracks.iter().map(|t| t.bbox).collect();
        let g = affinity_between(params, &AffinityNames::new(names::LTM), &qt, &bt, &qk, &bk)?;
        let score = self.score(&g);
        if !score.is_finite() {
            return Err(Error::NonFinite("association affinity".into()));
        }
        Ok(hungarian(score, true)?
            .into_iter()
            .filter(|&(i, j)| score.get(i, j) >= self.config.theta_match)
            .collect())
    }

    fn score<'a>(&self, g: &'a GatedAffinity) -> &'a Tensor2 {
        if self.config.confidence_gate {
            &g.a
        } else {
            &g.m
        }
    }

    /// Two-stage association: active tracklets first, then leftover segments
    /// against the stale buffer when recall is enabled.
    pub fn associate(&self, segments: &[InstanceQuery], params: &ParamSet) -> Result<Association> {
        self.config.validate()?;
        let all: Vec<&InstanceQuery> = segments.iter().collect();
        let active: Vec<&Tracklet> = self.active.values().collect();
        let mut out = Association::default();
        let mut taken = vec![false; segments.len()];
        for (i, j) in self.stage(params, &all, &active)? {
            out.matched.push((i, active[j].id));
            taken[i] = true;
        }
        let rest: Vec<usize> = (0..segments.len()).filter(|&i| !taken[i]).collect();
        if self.config.recall && !rest.is_empty() {
            let segs: Vec<&InstanceQuery> = rest.iter().map(|&i| &segments[i]).collect();
            let stale: Vec<&Tracklet> = self.stale.iter().collect();
            for (k, j) in self.stage(params, &segs, &stale)? {
                out.reactivated.push((rest[k], stale[j].id));
                taken[rest[k]] = true;
            }
        }
        out.new = (0..segments.len()).filter(|&i| !taken[i]).collect();
        out.matched.sort_unstable();
        out.reactivated.sort_unstable();
        Ok(out)
    }

    /// Applies an association at frame `t` and ages the bank. Returns the
    /// tracklet id of every segment. `point_ids` maps the frame's local point
    /// indices to global ids.
    pub fn update(
        &mut self,
        segments: &[InstanceQuery],
        assoc: &Association,
        t: usize,
        point_ids: &[u32],
    ) -> Result<Vec<u64>> {
        let mut ids = vec![u64::MAX; segments.len()];
        for &(s, id) in &assoc.reactivated {
            let pos = self
                .stale
                .iter()
                .position(|tr| tr.id == id)
                .ok_or_else(|| Error::InvalidInput(format!("tracklet {id} is not stale")))?;
            let mut tr = self.stale.remove(pos).expect("position is valid");
            tr.state = TrackState::Active;
            if self.config.reset_age_on_recall {
                tr.age = 1;
            }
            self.active.insert(id, tr);
            ids[s] = id;
        }
        for &(s, id) in assoc.matched.iter().chain(&assoc.reactivated) {
            let seg = &segments[s];
            let tr = self
                .active
                .get_mut(&id)
                .ok_or_else(|| Error::InvalidInput(format!("tracklet {id} is not active")))?;
            tr.observe(&seg.embedding, &seg.bbox, t)?;
            tr.points.extend(seg.mask.iter().map(|&p| point_ids[p]));
            ids[s] = id;
        }
        for &s in &assoc.new {
            let seg = &segments[s];
            let id = self.next_id;
            self.next_id += 1;
            let mut tr = Tracklet::new(id, seg.embedding.clone(), seg.bbox, t);
            tr.points.extend(seg.mask.iter().map(|&p| point_ids[p]));
            self.active.insert(id, tr);
            ids[s] = id;
        }
        if ids.contains(&u64::MAX) {
            return Err(Error::InvalidInput("association does not cover every segment".into()));
        }
        let expired: Vec<u64> = self
            .active
            .values()
            .filter(|tr| t.saturating_sub(tr.last_seen) > self.config.t_life)
            .map(|tr| tr.id)
            .collect();
        for id in expired {
            let mut tr = self.active.remove(&id).expect("listed above");
            tr.state = TrackState::Stale;
            self.stale.push_back(tr);
        }
        while self.stale.len() > self.config.k_buf {
            self.stale.pop_front();
            self.evicted += 1;
        }
        Ok(ids)
    }

    /// Checks the lifecycle invariants.
    pub fn check(&self) -> Result<()> {
        if self.stale.len() > self.config.k_buf {
            return Err(Error::InvalidInput("stale buffer over capacity".into()));
        }
        for tr in &self.stale {
            if self.active.contains_key(&tr.id) || tr.state != TrackState::Stale {
                return Err(Error::InvalidInput(format!("tracklet {} both active and stale", tr.id)));
            }
        }
        for (id, tr) in &self.active {
            if *id != tr.id || tr.state != TrackState::Active || tr.age < 1 || tr.id >= self.next_id {
                return Err(Error::InvalidInput(format!("inconsistent active tracklet {id}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelDims};
    use proptest::prelude::*;

    fn seg(embedding: Vec<f64>, b: [f64; 6], mask: Vec<usize>) -> InstanceQuery {
        let bbox = Aabb::from_array(b).unwrap();
        InstanceQuery {
            embedding,
            centroid: bbox.center(),
            bbox,
            mask,
            objectness: 1.0,
        }
    }

    #[test]
    fn running_mean_at_age_one() {
        let mut tr = Tracklet::new(0, vec![0.0], Aabb::from_array([0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap(), 0);
        tr.observe(&[1.0], &Aabb::from_array([2.0, 2.0, 2.0, 4.0, 4.0, 4.0]).unwrap(), 1).unwrap();
        assert_eq!(tr.bbox.to_array(), [1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(tr.age, 2);
        assert_eq!(tr.embedding, vec![0.5]);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let b = Aabb::from_array([0.5, -1.0, 2.0, 1.5, 0.0, 2.25]).unwrap();
        let mut tr = Tracklet::new(0, vec![0.3, -0.7], b, 0);
        for t in 1..=10 {
            tr.observe(&[0.3, -0.7], &b, t).unwrap();
        }
        assert_eq!(tr.age, 11);
        assert!((tr.embedding[0] - 0.3).abs() < 1e-15);
        assert_eq!(tr.bbox, b);
    }

    #[test]
    fn empty_bank_makes_everything_new() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 3, hidden_dim: 3 }, 0);
        let bank = TrackBank::new(LtmConfig::default());
        let segs = vec![seg(vec![1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0]); 3];
        let a = bank.associate(&segs, &p).unwrap();
        assert_eq!(a.new, vec![0, 1, 2]);
        assert!(a.matched.is_empty());
    }

    /// Handset head: match logit and gate both grow with the IoU channel.
    fn handset(d: usize) -> ParamSet {
        let mut p = init_params(&ModelDims { feature_dim: 2, embed_dim: d, hidden_dim: 1 }, 0);
        p.insert("ltm.geo.0.weight", Tensor2::scalar(1.0));
        p.insert("ltm.geo.0.bias", Tensor2::zeros(1, 1));
        let mut w1 = Tensor2::zeros(1, d);
        w1.set(0, 0, 1.0);
        p.insert("ltm.geo.1.weight", w1);
        p.insert("ltm.geo.1.bias", Tensor2::zeros(1, d));
        let mut w = Tensor2::zeros(d, 1);
        w.set(0, 0, 20.0);
        p.insert("ltm.w", w.clone());
        let mut wg = Tensor2::zeros(d, 1);
        wg.set(0, 0, 20.0);
        p.insert("ltm.w_gate", wg);
        p
    }

    #[test]
    fn identical_segment_matches_its_tracklet() {
        let p = handset(3);
        let mut bank = TrackBank::new(LtmConfig {
            theta_match: 0.3,
            ..LtmConfig::default()
        });
        let b = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let first = vec![seg(vec![0.0, 1.0, 0.0], b, vec![0])];
        let a = bank.associate(&first, &p).unwrap();
        let ids = bank.update(&first, &a, 0, &[7]).unwrap();
        let a = bank.associate(&first, &p).unwrap();
        assert_eq!(a.matched, vec![(0, ids[0])]);
        // A = M·C with M = 1 (one tracklet) and C = σ(20·(1 + 0))
        let g = affinity_between(
            &p,
            &AffinityNames::new("ltm"),
            &Tensor2::row_vector(&[0.0, 1.0, 0.0]),
            &[Aabb::from_array(b).unwrap()],
            &Tensor2::row_vector(&[0.0, 1.0, 0.0]),
            &[Aabb::from_array(b).unwrap()],
        )
        .unwrap();
        assert!((g.a.item() - crate::diff::sigmoid(20.0)).abs() < 1e-12);
    }

    #[test]
    fn occluded_instance_is_recalled() {
        let p = handset(3);
        let cfg = LtmConfig {
            t_life: 2,
            ..LtmConfig::default()
        };
        let mut bank = TrackBank::new(cfg);
        let a_box = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b_box = [5.0, 0.0, 0.0, 6.0, 1.0, 1.0];
        let both = vec![seg(vec![0.0; 3], a_box, vec![0]), seg(vec![0.0; 3], b_box, vec![1])];
        let only_b = vec![seg(vec![0.0; 3], b_box, vec![1])];
        let a = bank.associate(&both, &p).unwrap();
        let ids0 = bank.update(&both, &a, 0, &[0, 1]).unwrap();
        for t in 1..6 {
            let a = bank.associate(&only_b, &p).unwrap();
            bank.update(&only_b, &a, t, &[0, 1]).unwrap();
        }
        assert_eq!(bank.stale.len(), 1);
        assert_eq!(bank.stale[0].id, ids0[0]);
        let a = bank.associate(&both, &p).unwrap();
        assert_eq!(a.reactivated, vec![(0, ids0[0])]);
        let ids = bank.update(&both, &a, 6, &[0, 1]).unwrap();
        assert_eq!(ids, ids0);
        assert_eq!(bank.active[&ids0[0]].age, 2);
        bank.check().unwrap();

        let mut no_recall = TrackBank::new(LtmConfig { recall: false, ..cfg });
        let a = no_recall.associate(&both, &p).unwrap();
        no_recall.update(&both, &a, 0, &[0, 1]).unwrap();
        for t in 1..6 {
            let a = no_recall.associate(&only_b, &p).unwrap();
            no_recall.update(&only_b, &a, t, &[0, 1]).unwrap();
        }
        let a = no_recall.associate(&both, &p).unwrap();
        assert_eq!(a.new, vec![0]);
    }

    #[test]
    fn recall_can_reset_age() {
        let p = handset(3);
        let mut bank = TrackBank::new(LtmConfig {
            t_life: 0,
            reset_age_on_recall: true,
            ..LtmConfig::default()
        });
        let s = vec![seg(vec![0.0; 3], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0])];
        for t in [0, 1] {
            let a = bank.associate(&s, &p).unwrap();
            bank.update(&s, &a, t, &[0]).unwrap();
        }
        let a = bank.associate(&[], &p).unwrap();
        bank.update(&[], &a, 3, &[0]).unwrap();
        assert_eq!(bank.stale.len(), 1);
        let a = bank.associate(&s, &p).unwrap();
        assert_eq!(a.reactivated.len(), 1);
        bank.update(&s, &a, 4, &[0]).unwrap();
        assert_eq!(bank.active[&0].age, 2);
    }

    proptest! {
        #[test]
        fn stream_mean_is_exact(values in prop::collection::vec(prop::array::uniform2(-10.0f64..10.0), 2..100)) {
            let b = Aabb::from_array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
            let mut tr = Tracklet::new(0, values[0].to_vec(), b, 0);
            for (t, v) in values.iter().enumerate().skip(1) {
                tr.observe(v, &b, t).unwrap();
            }
            for k in 0..2 {
                let mean = values.iter().map(|v| v[k]).sum::<f64>() / values.len() as f64;
                prop_assert!((tr.embedding[k] - mean).abs() < 1e-9);
            }
            prop_assert_eq!(tr.age as usize, values.len());
        }

        #[test]
        fn lifecycle_is_safe(
            seed in 0u64..50,
            frames in prop::collection::vec(prop::collection::vec(0usize..6, 0..4), 1..40),
            k_buf in 0usize..4,
            t_life in 0usize..3,
        ) {
            let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 3, hidden_dim: 3 }, seed);
            let mut bank = TrackBank::new(LtmConfig { k_buf, t_life, ..LtmConfig::default() });
            let mut seen_ids = BTreeSet::new();
            let mut max_id = None;
            for (t, present) in frames.iter().enumerate() {
                let segs: Vec<InstanceQuery> = present
                    .iter()
                    .map(|&k| {
                        let x = k as f64 * 3.0;
                        seg(vec![(k as f64).sin(), (k as f64).cos(), 0.5], [x, 0.0, 0.0, x + 1.0, 1.0, 1.0], vec![0])
                    })
                    .collect();
                let a = bank.associate(&segs, &p).unwrap();
                let ids = bank.update(&segs, &a, t, &[0]).unwrap();
                for &s in &a.new {
                    prop_assert!(seen_ids.insert(ids[s]), "id reused");
                    prop_assert!(max_id.is_none_or(|m| ids[s] > m));
                    max_id = Some(ids[s]);
                }
                let mut frame_ids = ids.clone();
                frame_ids.sort();
                frame_ids.dedup();
                prop_assert_eq!(frame_ids.len(), ids.len());
                prop_assert!(bank.check().is_ok());
                // bounded: active tracklets were seen within the last t_life+1 frames
                prop_assert!(bank.active.len() <= 4 * (t_life + 1));
            }
        }
    }
}

use std::path::Path;

use crate::diff::{Bound, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::eval::SequenceResult;
use crate::geom::Vec3;
use crate::ltm::{affinity_on_tape, Association, FrameTracks, TrackBank, TrackDump, TrackRecord};
use crate::model::{names, AffinityNames};
use crate::percept::{boxes_from_tensor, decode_on_tape, pool_on_tape, Branch, InstanceQuery};
use crate::scl::{cluster_merge, gt_affinity, MergeResult};
use crate::sim::{FrameObservation, SequenceFile};
use crate::stm::{stm_on_tape, StmMemory};

use super::config::{LmiMode, PipelineConfig, StageOrder};

/// Per-frame stages, recorded in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pool,
    Decode,
    Merge,
    Stm,
    Associate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub tracks: FrameTracks,
    pub segments: Vec<InstanceQuery>,
    pub merge: MergeResult,
    /// Track id of every segment.
    pub ids: Vec<u64>,
}

/// State of one sequence: the previous frame's refined queries and the track
/// bank.
pub struct Tracker<'a> {
    params: &'a ParamSet,
    config: PipelineConfig,
    bank: TrackBank,
    memory: StmMemory,
    next_fresh: u64,
    stages: Vec<Stage>,
}

struct Heads {
    emb: Var,
    obj: Var,
    boxes: Var,
}

fn decode(tape: &mut Tape, bound: &Bound, q: Var, x: &[Vec3]) -> Heads {
    let d = decode_on_tape(tape, bound, q, x, None, Branch::OneToOne);
    Heads {
        emb: d.embeddings,
        obj: d.objectness_logits,
        boxes: d.boxes,
    }
}

/// Group-wise mean of the rows of `v`.
fn group_means(v: &Tensor2, merge: &MergeResult) -> Tensor2 {
    let mut out = Tensor2::zeros(merge.groups.len(), v.cols());
    for (g, members) in merge.groups.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for &i in members {
            for (o, x) in out.row_mut(g).iter_mut().zip(v.row(i)) {
                *o += x * inv;
            }
        }
    }
    out
}

impl<'a> Tracker<'a> {
    pub fn new(params: &'a ParamSet, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params,
            bank: TrackBank::new(config.ltm_config()),
            config,
            memory: StmMemory::default(),
            next_fresh: 0,
            stages: Vec::new(),
        })
    }

    pub fn bank(&self) -> &TrackBank {
        &self.bank
    }

    /// Stages run by the latest [`Tracker::step`].
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    fn merge_affinity(&self, tape: &mut Tape, bound: &Bound, obs: &FrameObservation, masks: &[Vec<usize>], emb: Var, boxes: Var) -> Tensor2 {
        if self.config.lmi_gt_oracle {
            return gt_affinity(masks, &obs.gt_labels);
        }
        let prefix = if self.config.lmi_shares_ltm_params { names::LTM } else { names::LMI };
        let aff = affinity_on_tape(tape, bound, &AffinityNames::new(prefix), emb, boxes, emb, boxes, true);
        tape.value(aff.a).clone()
    }

    fn read_memory(&mut self, tape: &mut Tape, bound: &Bound, q: Var, x: &[Vec3]) -> Var {
        if !self.config.stm {
            return q;
        }
        self.stages.push(Stage::Stm);
        if self.memory.is_empty() {
            return q;
        }
        let mem = tape.leaf(self.memory.queries.clone());
        stm_on_tape(tape, bound, q, x, Some((mem, &self.memory.centroids))).refined
    }

    pub fn step(&mut self, obs: &FrameObservation) -> Result<FrameOutput> {
        let t = obs.t;
        self.stages.clear();
        let masks = obs.fragments.clone();
        if masks.is_empty() {
            self.memory = StmMemory::default();
            if self.config.ltm {
                self.stages.push(Stage::Associate);
                self.bank.update(&[], &Association::default(), t, &obs.point_ids)?;
            }
            return Ok(FrameOutput {
                tracks: FrameTracks { t, tracks: Vec::new() },
                segments: Vec::new(),
                merge: MergeResult::identity(&[]),
                ids: Vec::new(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (q, mut x) = pool_on_tape(&mut tape, &bound, obs, &masks)?;
        self.stages.push(Stage::Pool);
        let mut heads = decode(&mut tape, &bound, q, &x);
        self.stages.push(Stage::Decode);
        let lmi = self.config.lmi != LmiMode::Off;
        let mut merge = MergeResult::identity(&masks);
        let refined_values = match self.config.order {
            StageOrder::LmiThenStm => {
                if lmi {
                    let a = self.merge_affinity(&mut tape, &bound, obs, &masks, heads.emb, heads.boxes);
                    merge = cluster_merge(&a, self.config.delta, &masks)?;
                    self.stages.push(Stage::Merge);
                    if merge.groups.len() < masks.len() {
                        let (q2, x2) = pool_on_tape(&mut tape, &bound, obs, &merge.masks)?;
                        x = x2;
                        heads = decode(&mut tape, &bound, q2, &x);
                    }
                }
                let r = self.read_memory(&mut tape, &bound, heads.emb, &x);
                tape.value(r).clone()
            }
            StageOrder::StmThenLmi => {
                let r = self.read_memory(&mut tape, &bound, heads.emb, &x);
                if lmi {
                    let a = self.merge_affinity(&mut tape, &bound, obs, &masks, r, heads.boxes);
                    merge = cluster_merge(&a, self.config.delta, &masks)?;
                    self.stages.push(Stage::Merge);
                    if merge.groups.len() < masks.len() {
                        let refined = group_means(tape.value(r), &merge);
                        let (q2, x2) = pool_on_tape(&mut tape, &bound, obs, &merge.masks)?;
                        x = x2;
                        heads = decode(&mut tape, &bound, q2, &x);
                        refined
                    } else {
                        tape.value(r).clone()
                    }
                } else {
                    tape.value(r).clone()
                }
            }
        };
        let boxes = tape.value(heads.boxes);
        let obj = tape.value(heads.obj);
        if !refined_values.is_finite() || !boxes.is_finite() || !obj.is_finite() {
            return Err(Error::NumericalFailure(t));
        }
        let boxes = boxes_from_tensor(boxes).map_err(|_| Error::NumericalFailure(t))?;
        let segments: Vec<InstanceQuery> = (0..merge.masks.len())
            .map(|i| InstanceQuery {
                embedding: refined_values.row(i).to_vec(),
                centroid: x[i],
                bbox: boxes[i],
                mask: merge.masks[i].clone(),
                objectness: crate::diff::sigmoid(obj.get(i, 0)),
            })
            .collect();
        if self.config.stm {
            self.memory = StmMemory::new(refined_values, x)?;
        }
        let ids = if self.config.ltm {
            self.stages.push(Stage::Associate);
            let assoc = self.bank.associate(&segments, self.params).map_err(|e| match e {
                Error::NonFinite(_) => Error::NumericalFailure(t),
                e => e,
            })?;
            self.bank.update(&segments, &assoc, t, &obs.point_ids)?
        } else {
            let start = self.next_fresh;
            self.next_fresh += segments.len() as u64;
            (start..self.next_fresh).collect()
        };
        let mut records: Vec<TrackRecord> = segments
            .iter()
            .zip(&ids)
            .map(|(s, &id)| {
                let mut points: Vec<u32> = s.mask.iter().map(|&p| obs.point_ids[p]).collect();
                points.sort_unstable();
                TrackRecord {
                    id,
                    points,
                    objectness: s.objectness,
                }
            })
            .collect();
        records.sort_by_key(|r| r.id);
        Ok(FrameOutput {
            tracks: FrameTracks { t, tracks: records },
            segments,
            merge,
            ids,
        })
    }
}

/// Tracks a whole sequence and returns its dump and accumulated result.
pub fn run_track(seq: &SequenceFile, params: &ParamSet, config: &PipelineConfig) -> Result<(TrackDump, SequenceResult)> {
    let mut tracker = Tracker::new(params, config.clone())?;
    let mut dump = TrackDump::new(seq.sequence_id.clone());
    for obs in &seq.frames {
        dump.frames.push(tracker.step(obs)?.tracks);
    }
    let result = SequenceResult::from_dump(&dump);
    Ok((dump, result))
}

/// [`run_track`] on files.
pub fn run_track_files(
    sequence: impl AsRef<Path>,
    params: &ParamSet,
    config: &PipelineConfig,
    out: impl AsRef<Path>,
) -> Result<SequenceResult> {
    let seq = SequenceFile::load(sequence)?;
    let (dump, result) = run_track(&seq, params, config)?;
    dump.save(out)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{fragmentation_rate, id_switches, GroundTruth};
    use crate::ltm::TrackState;
    use crate::model::init_params;
    use crate::pipeline::oracle_params;
    use crate::sim::SimConfig;

    fn sequence(frames: usize, fragments: usize, seed: u64) -> SequenceFile {
        let cfg = SimConfig {
            num_instances: 4,
            points_per_instance: 60,
            frames,
            min_fragments: fragments,
            max_fragments: fragments,
            feature_noise: 0.0,
            min_separation: 3.0,
            seed,
            ..SimConfig::default()
        };
        SequenceFile::generate("t", &cfg).unwrap()
    }

    #[test]
    fn cold_start_opens_one_tracklet_per_mask() {
        let seq = sequence(1, 2, 3);
        let cfg = PipelineConfig::default();
        let params = init_params(&cfg.dims(), 0);
        let mut tr = Tracker::new(&params, cfg).unwrap();
        let out = tr.step(&seq.frames[0]).unwrap();
        assert_eq!(tr.bank().active.len(), out.segments.len());
        assert!(tr.bank().active.values().all(|t| t.age == 1 && t.state == TrackState::Active));
        let mut ids = out.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..out.segments.len() as u64).collect::<Vec<_>>());
    }

    #[test]
    fn without_modules_ids_are_fresh_every_frame() {
        let seq = sequence(4, 2, 4);
        let cfg = PipelineConfig {
            ltm: false,
            stm: false,
            lmi: LmiMode::Off,
            ..PipelineConfig::default()
        };
        let params = init_params(&cfg.dims(), 0);
        let (dump, _) = run_track(&seq, &params, &cfg).unwrap();
        let ids: Vec<u64> = dump.frames.iter().flat_map(|f| f.tracks.iter().map(|r| r.id)).collect();
        let total: usize = seq.frames.iter().map(|f| f.fragments.len()).sum();
        assert_eq!(ids.len(), total);
        assert_eq!(ids, (0..total as u64).collect::<Vec<_>>());
    }

    #[test]
    fn stages_run_in_the_configured_order() {
        let seq = sequence(2, 2, 5);
        let params = init_params(&PipelineConfig::default().dims(), 0);
        let cases = [
            (StageOrder::LmiThenStm, [Stage::Pool, Stage::Decode, Stage::Merge, Stage::Stm, Stage::Associate]),
            (StageOrder::StmThenLmi, [Stage::Pool, Stage::Decode, Stage::Stm, Stage::Merge, Stage::Associate]),
        ];
        for (order, expected) in cases {
            let cfg = PipelineConfig {
                order,
                ..PipelineConfig::default()
            };
            let mut tr = Tracker::new(&params, cfg).unwrap();
            for f in &seq.frames {
                tr.step(f).unwrap();
                assert_eq!(tr.stages(), expected);
            }
        }
    }

    #[test]
    fn oracle_run_repairs_fragments_and_keeps_identities() {
        let seq = sequence(12, 3, 6);
        let cfg = PipelineConfig {
            lmi_gt_oracle: true,
            ..PipelineConfig::default()
        };
        let params = oracle_params(&cfg.dims(), 0, 2.0).unwrap();
        let (_, result) = run_track(&seq, &params, &cfg).unwrap();
        let gt = GroundTruth::from_sequence(&seq).unwrap();
        assert_eq!(fragmentation_rate(&result, &gt), 1.0);
        assert_eq!(id_switches(&result, &gt), 0);
        assert_eq!(result.tracks.len(), 4);
    }

    #[test]
    fn non_finite_parameters_are_reported_with_the_frame() {
        let seq = sequence(1, 1, 7);
        let cfg = PipelineConfig::default();
        let mut params = init_params(&cfg.dims(), 0);
        params.get_mut(names::OBJ_B).unwrap().set(0, 0, f64::NAN);
        let err = run_track(&seq, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(0)), "{err}");
    }

    #[test]
    fn tracking_is_deterministic() {
        let seq = sequence(6, 3, 8);
        let cfg = PipelineConfig::default();
        let params = init_params(&cfg.dims(), 2);
        let a = run_track(&seq, &params, &cfg).unwrap().0.to_json().unwrap();
        let b = run_track(&seq, &params, &cfg).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
    }
}

//! End-to-end composition: per-frame tracking, training, evaluation,
//! ablations and export.

mod ablation;
mod config;
mod oracle;
mod ply;
mod tracker;
mod train;

pub use ablation::{benchmark_sequences, evaluate_on, run_ablation, AblationConfig, AblationReport, Split, Variant, VariantResult};
pub use config::{LmiMode, PipelineConfig, StageOrder};
pub use oracle::{oracle_params, ORACLE_GAIN, ORACLE_GATE_IOU};
pub use ply::{export_ply, track_color};
pub use tracker::{run_track, run_track_files, FrameOutput, Stage, Tracker};
pub use train::{
    run_train, sequence_loss_on_tape, Checkpoint, RngState, TrainRun, TrainTrace, Trainer, CHECKPOINT_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, GroundTruth, SequenceResult};
use crate::ltm::TrackDump;
use crate::sim::SequenceFile;

/// Scores dumps against the sequences they were tracked on, matched by
/// sequence id.
pub fn run_eval(dumps: &[TrackDump], sequences: &[SequenceFile]) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(dumps.len());
    let mut gts = Vec::with_capacity(dumps.len());
    for d in dumps {
        let seq = sequences
            .iter()
            .find(|s| s.sequence_id == d.sequence_id)
            .ok_or_else(|| Error::MissingGroundTruth(d.sequence_id.clone()))?;
        results.push(SequenceResult::from_dump(d));
        gts.push(GroundTruth::from_sequence(seq)?);
    }
    let pairs: Vec<(&SequenceResult, &GroundTruth)> = results.iter().zip(&gts).collect();
    Ok(EvalReport::build(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltm::{FrameTracks, TrackRecord};
    use crate::sim::SimConfig;

    fn seq(id: &str) -> SequenceFile {
        let cfg = SimConfig {
            num_instances: 2,
            points_per_instance: 20,
            frames: 2,
            ..SimConfig::default()
        };
        SequenceFile::generate(id, &cfg).unwrap()
    }

    /// One track per instance holding everything it ever shows.
    fn perfect(s: &SequenceFile) -> TrackDump {
        let mut d = TrackDump::new(s.sequence_id.clone());
        for f in &s.frames {
            let tracks = f
                .instance_points()
                .into_iter()
                .map(|(k, pts)| {
                    let mut points: Vec<u32> = pts.iter().map(|&p| f.point_ids[p]).collect();
                    points.sort_unstable();
                    TrackRecord { id: k as u64, points, objectness: 1.0 }
                })
                .collect();
            d.frames.push(FrameTracks { t: f.t, tracks });
        }
        d
    }

    #[test]
    fn perfect_and_empty_dumps() {
        let s = seq("a");
        let r = run_eval(&[perfect(&s)], std::slice::from_ref(&s)).unwrap();
        assert_eq!(r.aggregate.ap, 1.0);
        assert_eq!(r.aggregate.id_switches, 0);
        assert_eq!(r.aggregate.fragmentation_rate, 1.0);
        let r = run_eval(&[TrackDump::new("a")], std::slice::from_ref(&s)).unwrap();
        assert_eq!(r.aggregate.ap, 0.0);
    }

    #[test]
    fn dumps_need_their_sequence() {
        let err = run_eval(&[TrackDump::new("b")], &[seq("a")]).unwrap_err();
        assert!(matches!(err, Error::MissingGroundTruth(_)));
    }
}

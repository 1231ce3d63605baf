//! Long-term memory: gated segment-to-tracklet affinity, optimal assignment
//! and the tracklet lifecycle.

mod affinity;
mod bank;
mod dump;
mod hungarian;

pub use affinity::{
    affinity_between, affinity_features, affinity_features_on_tape, affinity_on_tape, gated_affinity,
    gated_affinity_on_tape, AffinityVars, GatedAffinity,
};
pub use bank::{Association, LtmConfig, TrackBank, TrackState, Tracklet};
pub use dump::{FrameTracks, TrackDump, TrackRecord, TRACK_DUMP_FORMAT_VERSION};
pub use hungarian::hungarian;

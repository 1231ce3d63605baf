//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackseg_core::diff::Tensor2;
use trackseg_core::sim::{SequenceFile, SimConfig};

/// Square cost matrix with uniform entries in `[0, 1)`.
pub fn random_costs(n: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2::from_vec(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).expect("square shape")
}

/// The throughput workload: 16 instances in 4 fragments each (64 queries)
/// and just under 20k visible points per frame.
pub fn throughput_sequence(frames: usize) -> SequenceFile {
    let cfg = SimConfig {
        num_instances: 16,
        points_per_instance: 2080,
        frames,
        min_fragments: 4,
        max_fragments: 4,
        extent: 30.0,
        seed: 9,
        ..SimConfig::default()
    };
    SequenceFile::generate("bench", &cfg).expect("valid bench scene")
}

use trackseg_core::pipeline::{run_eval, run_track, Checkpoint, PipelineConfig, Trainer};
use trackseg_core::sim::{SequenceFile, SimConfig};

fn micro_dataset() -> Vec<SequenceFile> {
    (0..2)
        .map(|i| {
            let cfg = SimConfig {
                num_instances: 3,
                points_per_instance: 24,
                frames: 6,
                min_fragments: 1,
                max_fragments: 3,
                min_separation: 2.5,
                extent: 10.0,
                seed: 40 + i,
                ..SimConfig::default()
            };
            SequenceFile::generate(format!("micro-{i}"), &cfg).unwrap()
        })
        .collect()
}

#[test]
fn loss_at_step_200_is_below_step_1() {
    let data = micro_dataset();
    let config = PipelineConfig::default();
    assert_eq!(config.steps, 200);
    let mut trainer = Trainer::new(&data, &config).unwrap();
    for _ in 0..config.steps {
        trainer.step().unwrap();
    }
    let losses = trainer.checkpoint().losses;
    assert_eq!(losses.len(), 200);
    assert!(losses[199] < losses[0], "step 1 {} step 200 {}", losses[0], losses[199]);
}

#[test]
fn saved_checkpoint_round_trips_through_a_file() {
    let data = micro_dataset();
    let config = PipelineConfig {
        steps: 3,
        ..PipelineConfig::default()
    };
    let mut trainer = Trainer::new(&data, &config).unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    trainer.checkpoint().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // a reloaded checkpoint tracks exactly like the in-memory one
    let ck = Checkpoint::load(&a).unwrap();
    let dump = |p| run_track(&data[0], p, &config).unwrap().0;
    assert_eq!(dump(&ck.params), dump(trainer.params()));
    let report = run_eval(&[dump(&ck.params)], &data[..1]).unwrap();
    assert!((0.0..=1.0).contains(&report.aggregate.ap));
}

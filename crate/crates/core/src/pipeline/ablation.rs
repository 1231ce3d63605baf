use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, GroundTruth, MetricsReport, SequenceResult};
use crate::losses::IcmsMode;
use crate::sim::{Occlusion, SequenceFile, SimConfig};

use super::config::{LmiMode, PipelineConfig};
use super::tracker::run_track;
use super::train::run_train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoLtm,
    NoStm,
    LmiTrainInfer,
    SingleBranch,
    /// Every module off.
    Baseline,
    /// Baseline plus long-term association.
    LtmOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoLtm,
        Variant::NoStm,
        Variant::LmiTrainInfer,
        Variant::SingleBranch,
        Variant::Baseline,
        Variant::LtmOnly,
    ];

    /// Training and inference configuration of this row.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoLtm => c.ltm = false,
            Variant::NoStm => c.stm = false,
            Variant::LmiTrainInfer => c.lmi = LmiMode::TrainAndInfer,
            Variant::SingleBranch => c.icms = IcmsMode::SingleBranch,
            Variant::Baseline | Variant::LtmOnly => {
                c.ltm = self == Variant::LtmOnly;
                c.stm = false;
                c.lmi = LmiMode::Off;
                c.icms = IcmsMode::Off;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Scene template; the seed and occlusions are set per scene.
    pub sim: SimConfig,
    pub scenes: usize,
    pub train_scenes: usize,
    pub base: PipelineConfig,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig {
                num_instances: 8,
                points_per_instance: 200,
                frames: 40,
                min_fragments: 1,
                max_fragments: 4,
                view_noise: 0.15,
                ..SimConfig::default()
            },
            scenes: 16,
            train_scenes: 16,
            // The library default learning rate barely moves the weights in
            // a single-core training budget.
            base: PipelineConfig {
                lr: 3e-3,
                steps: 600,
                ..PipelineConfig::default()
            },
            variants: Variant::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Seeded benchmark scenes. Each scene hides one instance for longer than
/// the tracker's lifetime and a second one briefly.
pub fn benchmark_sequences(cfg: &AblationConfig, split: Split) -> Result<Vec<SequenceFile>> {
    let (count, offset, tag) = match split {
        Split::Train => (cfg.train_scenes, 500, "train"),
        Split::Eval => (cfg.scenes, 0, "eval"),
    };
    let n = cfg.sim.num_instances as u32;
    let long = cfg.base.t_life + 3;
    (0..count)
        .map(|i| {
            let mut sim = cfg.sim.clone();
            sim.seed = cfg.seed.wrapping_mul(1000).wrapping_add((offset + i) as u64);
            let third = sim.frames / 4;
            sim.occlusions = vec![
                Occlusion {
                    instance: i as u32 % n,
                    start: third,
                    end: (third + long).min(sim.frames),
                },
                Occlusion {
                    instance: (i as u32 + 3) % n,
                    start: 2 * third + 2,
                    end: (2 * third + 5).min(sim.frames),
                },
            ];
            SequenceFile::generate(format!("{tag}-{i:03}"), &sim)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub config: PipelineConfig,
    pub final_loss: Option<f64>,
    /// Aggregate over the benchmark, without curves.
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
    /// `AP(full) − AP(variant)` for every non-full row.
    pub ap_deltas: BTreeMap<Variant, f64>,
}

impl AblationReport {
    pub fn ap(&self, v: Variant) -> Option<f64> {
        self.results.iter().find(|r| r.variant == v).map(|r| r.metrics.ap)
    }
}

/// Evaluates `params` on the benchmark scenes under `config`.
pub fn evaluate_on(seqs: &[SequenceFile], params: &ParamSet, config: &PipelineConfig) -> Result<EvalReport> {
    let mut results = Vec::new();
    let mut gts = Vec::new();
    for s in seqs {
        results.push(run_track(s, params, config)?.1);
        gts.push(GroundTruth::from_sequence(s)?);
    }
    let pairs: Vec<(&SequenceResult, &GroundTruth)> = results.iter().zip(&gts).collect();
    Ok(EvalReport::build(&pairs))
}

/// Trains every requested row on the training scenes (rows with identical
/// settings share one run) and evaluates it on the benchmark scenes.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&VariantResult)) -> Result<AblationReport> {
    if cfg.variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let train = benchmark_sequences(cfg, Split::Train)?;
    let eval = benchmark_sequences(cfg, Split::Eval)?;
    let mut trained: BTreeMap<String, (ParamSet, Option<f64>)> = BTreeMap::new();
    let mut results = Vec::new();
    for &v in &cfg.variants {
        let config = v.apply(&cfg.base);
        let key = serde_json::to_string(&config)?;
        if !trained.contains_key(&key) {
            let run = run_train(&train, &config, |_| Ok(()))?;
            if let Some(msg) = run.diverged {
                return Err(Error::Diverged(format!("{v:?}: {msg}")));
            }
            let last = run.checkpoint.losses.last().copied();
            trained.insert(key.clone(), (run.checkpoint.params, last));
        }
        let (params, final_loss) = &trained[&key];
        let mut metrics = evaluate_on(&eval, params, &config)?.aggregate;
        metrics.curves.clear();
        let r = VariantResult {
            variant: v,
            config,
            final_loss: *final_loss,
            metrics,
        };
        progress(&r);
        results.push(r);
    }
    let mut report = AblationReport {
        results,
        ap_deltas: BTreeMap::new(),
    };
    if let Some(full) = report.ap(Variant::Full) {
        report.ap_deltas = report
            .results
            .iter()
            .filter(|r| r.variant != Variant::Full)
            .map(|r| (r.variant, full - r.metrics.ap))
            .collect();
    }
    Ok(report)
}

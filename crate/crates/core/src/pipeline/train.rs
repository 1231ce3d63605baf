use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamW, Bound, OptimizerState, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::losses::{agg_loss, ltm_loss, seg_loss, total_loss, FrameGt, IcmsMode, MatchTargets};
use crate::ltm::affinity_on_tape;
use crate::model::{init_params, names, AffinityNames};
use crate::percept::{decode_on_tape, point_features, pool_on_tape, Branch};
use crate::scl::{build_icms_targets, cluster_merge, IcmsTargets};
use crate::sim::{check_version, FrameObservation, SequenceFile};
use crate::stm::stm_on_tape;

use super::config::{LmiMode, PipelineConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Counters filled in while the training objective is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainTrace {
    pub frames: usize,
    pub merge_calls: usize,
}

/// Ground-truth-driven tracklet held on the tape so the association loss
/// sees the running means of earlier frames.
struct TapeTrack {
    instance: u32,
    embedding: Var,
    bbox: Var,
    age: f64,
}

#[derive(Default)]
struct SequenceState {
    memory: Option<(Var, Vec<Vec3>)>,
    tracks: Vec<TapeTrack>,
}

fn running_mean(tape: &mut Tape, old: Var, new: Var, age: f64) -> Var {
    let a = tape.scale(old, age / (age + 1.0));
    let b = tape.scale(new, 1.0 / (age + 1.0));
    tape.add(a, b)
}

fn association_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &PipelineConfig,
    state: &mut SequenceState,
    queries: Var,
    boxes: Var,
    icms: &IcmsTargets,
) -> Result<Option<Var>> {
    let mut loss = None;
    if !state.tracks.is_empty() {
        let te = tape.concat_rows(state.tracks.iter().map(|t| t.embedding).collect());
        let tb = tape.concat_rows(state.tracks.iter().map(|t| t.bbox).collect());
        let aff = affinity_on_tape(tape, bound, &AffinityNames::new(names::LTM), queries, boxes, te, tb, false);
        let n = icms.owner.len();
        let mut y = Tensor2::zeros(n, state.tracks.len());
        for (i, o) in icms.owner.iter().enumerate() {
            if let Some(k) = o {
                if let Some(j) = state.tracks.iter().position(|t| t.instance == *k) {
                    y.set(i, j, 1.0);
                }
            }
        }
        let targets = MatchTargets::new(y, tape.value(aff.log_m))?;
        let gate = config.confidence_gate.then_some(aff.gate_logits);
        loss = Some(ltm_loss(tape, aff.log_m, gate, &targets, &config.weights)?.total);
        for &(i, j) in &targets.pi {
            let q = tape.gather_rows(queries, vec![i]);
            let b = tape.gather_rows(boxes, vec![i]);
            let tr = &mut state.tracks[j];
            tr.embedding = running_mean(tape, tr.embedding, q, tr.age);
            tr.bbox = running_mean(tape, tr.bbox, b, tr.age);
            tr.age += 1.0;
        }
    }
    for (&k, members) in &icms.groups {
        if state.tracks.iter().all(|t| t.instance != k) {
            let i = members[0];
            let embedding = tape.gather_rows(queries, vec![i]);
            let bbox = tape.gather_rows(boxes, vec![i]);
            state.tracks.push(TapeTrack {
                instance: k,
                embedding,
                bbox,
                age: 1.0,
            });
        }
    }
    Ok(loss)
}

fn frame_loss(
    tape: &mut Tape,
    bound: &Bound,
    obs: &FrameObservation,
    config: &PipelineConfig,
    state: &mut SequenceState,
    trace: &mut TrainTrace,
) -> Result<Option<Var>> {
    let mut masks = obs.fragments.clone();
    if masks.is_empty() {
        state.memory = None;
        return Ok(None);
    }
    trace.frames += 1;
    let (mut q, mut x) = pool_on_tape(tape, bound, obs, &masks)?;
    let points = tape.leaf(point_features(obs));
    let mut one = decode_on_tape(tape, bound, q, &x, Some(points), Branch::OneToOne);
    let mut icms = build_icms_targets(&masks, &obs.gt_labels, config.top_k)?;
    let mut agg = None;
    if config.lmi != LmiMode::Off && masks.len() >= 2 {
        let prefix = if config.lmi_shares_ltm_params { names::LTM } else { names::LMI };
        let aff = affinity_on_tape(
            tape,
            bound,
            &AffinityNames::new(prefix),
            one.embeddings,
            one.boxes,
            one.embeddings,
            one.boxes,
            true,
        );
        agg = Some(agg_loss(tape, aff.a, &icms.owner)?);
        if config.lmi == LmiMode::TrainAndInfer {
            let merge = cluster_merge(tape.value(aff.a), config.delta, &masks)?;
            trace.merge_calls += 1;
            if merge.groups.len() < masks.len() {
                masks = merge.masks;
                (q, x) = pool_on_tape(tape, bound, obs, &masks)?;
                one = decode_on_tape(tape, bound, q, &x, Some(points), Branch::OneToOne);
                icms = build_icms_targets(&masks, &obs.gt_labels, config.top_k)?;
            }
        }
    }
    let many = (config.icms == IcmsMode::DualBranch)
        .then(|| decode_on_tape(tape, bound, q, &x, Some(points), Branch::OneToMany));
    let gt = FrameGt::from_obs(obs);
    let seg = seg_loss(tape, &one, many.as_ref(), &masks, &gt, &icms, config.icms, &config.weights)?;
    let refined = if config.stm {
        let memory = state.memory.as_ref().map(|(v, c)| (*v, c.as_slice()));
        let r = stm_on_tape(tape, bound, one.embeddings, &x, memory).refined;
        state.memory = Some((r, x.clone()));
        r
    } else {
        one.embeddings
    };
    let ltm = if config.ltm {
        association_loss(tape, bound, config, state, refined, one.boxes, &icms)?
    } else {
        None
    };
    Ok(Some(total_loss(tape, seg.total, ltm, agg, &config.weights)))
}

/// Training objective of one sampled clip: the mean per-frame total loss.
/// Returns `None` when no frame has a segment.
pub fn sequence_loss_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    frames: &[&FrameObservation],
    config: &PipelineConfig,
    trace: &mut TrainTrace,
) -> Result<Option<Var>> {
    let mut state = SequenceState::default();
    let mut terms = Vec::new();
    for obs in frames {
        if let Some(l) = frame_loss(tape, bound, obs, config, &mut state, trace)? {
            terms.push(l);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    let sum = terms.into_iter().reduce(|a, b| tape.add(a, b)).expect("non-empty");
    Ok(Some(tape.scale(sum, 1.0 / n)))
}

/// Seed, stream and position of the sampling generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as text: JSON numbers cannot carry 128 bits portably.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad rng position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub config: PipelineConfig,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    /// Mean batch loss of every completed step.
    pub losses: Vec<f64>,
}

impl Checkpoint {
    /// Step 0: seeded initial parameters and a fresh optimizer.
    pub fn initial(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: 0,
            config: config.clone(),
            params: init_params(&config.dims(), config.seed),
            optimizer: OptimizerState::default(),
            rng: RngState::capture(&rng),
            losses: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, CHECKPOINT_FORMAT_VERSION)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct Trainer<'a> {
    data: &'a [SequenceFile],
    state: Checkpoint,
    rng: ChaCha8Rng,
    optimizer: AdamW,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a [SequenceFile], config: &PipelineConfig) -> Result<Self> {
        Self::resume(data, Checkpoint::initial(config)?)
    }

    pub fn resume(data: &'a [SequenceFile], state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("training needs at least one sequence".into()));
        }
        if data.iter().any(|s| s.frames.is_empty()) {
            return Err(Error::InvalidInput("training sequence without frames".into()));
        }
        let rng = state.rng.restore()?;
        let optimizer = AdamW {
            lr: state.config.lr,
            weight_decay: state.config.weight_decay,
            ..AdamW::default()
        };
        Ok(Self {
            data,
            state,
            rng,
            optimizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.state.clone();
        c.rng = RngState::capture(&self.rng);
        c
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    fn draw_batch(&mut self) -> Vec<(usize, Vec<usize>)> {
        let cfg = &self.state.config;
        let scenes: Vec<usize> = if self.data.len() >= cfg.batch_size {
            sample(&mut self.rng, self.data.len(), cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| self.rng.random_range(0..self.data.len())).collect()
        };
        scenes
            .into_iter()
            .map(|s| {
                let n = self.data[s].frames.len();
                let mut f = sample(&mut self.rng, n, cfg.frames_per_scene.min(n)).into_vec();
                f.sort_unstable();
                (s, f)
            })
            .collect()
    }

    /// One optimizer update on a fresh batch. Returns the mean batch loss.
    /// A non-finite loss or gradient leaves the parameters untouched.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.draw_batch();
        let cfg = self.state.config.clone();
        let mut grads: BTreeMap<String, Tensor2> = BTreeMap::new();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (s, frames) in &batch {
            let clip: Vec<&FrameObservation> = frames.iter().map(|&f| &self.data[*s].frames[f]).collect();
            let mut tape = Tape::new();
            let bound = self.state.params.bind(&mut tape);
            let mut trace = TrainTrace::default();
            let Some(loss) = sequence_loss_on_tape(&mut tape, &bound, &clip, &cfg, &mut trace)? else {
                continue;
            };
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged(format!("loss {v} at step {}", self.state.step + 1)));
            }
            total += v * scale;
            let g = tape.backward(loss);
            for (name, var) in bound.iter() {
                if let Some(gv) = g.get(*var) {
                    let e = grads.entry(name.clone()).or_insert_with(|| Tensor2::zeros(gv.rows(), gv.cols()));
                    for (a, b) in e.data_mut().iter_mut().zip(gv.data()) {
                        *a += b * scale;
                    }
                }
            }
        }
        let mut params = self.state.params.clone();
        let mut opt = self.state.optimizer.clone();
        self.optimizer.step(&mut params, &grads, &mut opt)?;
        if !params.is_finite() {
            return Err(Error::Diverged(format!("non-finite parameters at step {}", self.state.step + 1)));
        }
        self.state.params = params;
        self.state.optimizer = opt;
        self.state.step += 1;
        self.state.losses.push(total);
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// Latest good state.
    pub checkpoint: Checkpoint,
    /// Set when training stopped on divergence.
    pub diverged: Option<String>,
}

/// Runs `config.steps` updates, handing every periodic checkpoint to
/// `on_checkpoint`.
pub fn run_train(
    data: &[SequenceFile],
    config: &PipelineConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    let mut trainer = Trainer::new(data, config)?;
    for i in 0..config.steps {
        match trainer.step() {
            Ok(_) => {}
            Err(Error::Diverged(msg)) => {
                return Ok(TrainRun {
                    checkpoint: trainer.checkpoint(),
                    diverged: Some(msg),
                })
            }
            Err(e) => return Err(e),
        }
        if config.checkpoint_every > 0 && (i + 1) % config.checkpoint_every == 0 {
            on_checkpoint(&trainer.checkpoint())?;
        }
    }
    Ok(TrainRun {
        checkpoint: trainer.checkpoint(),
        diverged: None,
    })
}

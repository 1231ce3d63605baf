//! Deterministic synthetic streaming scenes.
//!
//! A [`Scene`] is a set of static Gaussian point blobs, each carrying a unit
//! feature signature. [`render_frame`] views the scene from a sweeping
//! direction, keeps the front-facing part of every non-occluded instance and
//! over-segments each visible part into contiguous fragments by recursive
//! bisection. Fragments never straddle instances.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{distance, Aabb, Vec3};

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

/// Hide instance `instance` for frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub instance: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_instances: usize,
    pub points_per_instance: usize,
    pub frames: usize,
    /// Fraction of an instance's points visible in each frame.
    pub visibility: f64,
    pub min_fragments: usize,
    pub max_fragments: usize,
    pub feature_dim: usize,
    /// Per-point feature noise standard deviation.
    pub feature_noise: f64,
    /// Per-frame, per-instance appearance offset standard deviation.
    pub view_noise: f64,
    /// Clutter fragments per frame, labelled background.
    pub background_fragments: usize,
    pub background_points: usize,
    pub blob_sigma: f64,
    pub min_separation: f64,
    /// Scene is the cube `[0, extent]^3`.
    pub extent: f64,
    pub min_points: usize,
    pub occlusions: Vec<Occlusion>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_instances: 8,
            points_per_instance: 200,
            frames: 40,
            visibility: 0.6,
            min_fragments: 1,
            max_fragments: 4,
            feature_dim: 16,
            feature_noise: 0.1,
            view_noise: 0.0,
            background_fragments: 0,
            background_points: 24,
            blob_sigma: 0.5,
            min_separation: 2.0,
            extent: 12.0,
            min_points: 8,
            occlusions: Vec::new(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_instances == 0 || self.points_per_instance == 0 || self.frames == 0 {
            return bad("counts must be at least 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return bad("visibility must lie in (0, 1]");
        }
        if self.min_fragments == 0 || self.min_fragments > self.max_fragments {
            return bad("fragment range must satisfy 1 <= min <= max");
        }
        if !(self.feature_noise >= 0.0) || !(self.view_noise >= 0.0) || !(self.blob_sigma > 0.0) {
            return bad("noise levels must be >= 0 and blob_sigma > 0");
        }
        if self.points_per_instance < self.min_points {
            return bad("points_per_instance below min_points");
        }
        if self.visible_count() < self.max_fragments {
            return bad("too few visible points per instance for max_fragments");
        }
        if self.background_fragments > 0 && self.background_points == 0 {
            return bad("background fragments need at least one point");
        }
        for o in &self.occlusions {
            if o.instance as usize >= self.num_instances || o.start > o.end {
                return bad("occlusion interval refers to a missing instance or is reversed");
            }
        }
        Ok(())
    }

    fn visible_count(&self) -> usize {
        ((self.visibility * self.points_per_instance as f64).ceil() as usize)
            .clamp(1, self.points_per_instance)
    }

    pub fn is_occluded(&self, instance: u32, t: usize) -> bool {
        self.occlusions
            .iter()
            .any(|o| o.instance == instance && o.start <= t && t < o.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u32,
    pub center: Vec3,
    pub points: Vec<Vec3>,
    pub signature: Vec<f64>,
    /// Global id of `points[0]`; the instance owns `offset..offset + points.len()`.
    pub point_offset: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub instances: Vec<Instance>,
    pub bounds: Aabb,
    pub seed: u64,
    /// Scene viewpoint sweep: initial azimuth, azimuth step per frame, elevation.
    pub view: [f64; 3],
}

impl Scene {
    pub fn num_instance_points(&self) -> usize {
        self.instances.iter().map(|i| i.points.len()).sum()
    }
}

/// Streamed observation of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub t: usize,
    /// Global ids in the sequence's point universe, one per point.
    pub point_ids: Vec<u32>,
    pub points: Vec<Vec3>,
    pub feature_dim: usize,
    /// Row-major `points.len() x feature_dim`.
    pub features: Vec<f64>,
    /// Disjoint, non-empty sets of local point indices.
    pub fragments: Vec<Vec<usize>>,
    /// Instance id per point, `None` for background.
    pub gt_labels: Vec<Option<u32>>,
}

impl FrameObservation {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn feature(&self, p: usize) -> &[f64] {
        &self.features[p * self.feature_dim..(p + 1) * self.feature_dim]
    }

    /// Visible point indices per instance.
    pub fn instance_points(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, l) in self.gt_labels.iter().enumerate() {
            if let Some(id) = l {
                map.entry(*id).or_default().push(p);
            }
        }
        map
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub fn gen_scene(cfg: &SimConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0);
    let margin = 2.0 * cfg.blob_sigma;
    if cfg.extent <= 2.0 * margin {
        return Err(Error::InfeasiblePacking("extent too small for one blob".into()));
    }
    let mut centers: Vec<Vec3> = Vec::with_capacity(cfg.num_instances);
    for k in 0..cfg.num_instances {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let c: Vec3 = [
                rng.random_range(margin..cfg.extent - margin),
                rng.random_range(margin..cfg.extent - margin),
                rng.random_range(margin..cfg.extent - margin),
            ];
            if centers.iter().all(|o| distance(*o, c) >= cfg.min_separation) {
                placed = Some(c);
                break;
            }
        }
        match placed {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::InfeasiblePacking(format!(
                    "could not place instance {k} of {} with separation {}",
                    cfg.num_instances, cfg.min_separation
                )))
            }
        }
    }
    let mut instances = Vec::with_capacity(cfg.num_instances);
    let mut offset = 0u32;
    for (k, c) in centers.into_iter().enumerate() {
        let scale: Vec3 = [
            cfg.blob_sigma * rng.random_range(0.7..1.3),
            cfg.blob_sigma * rng.random_range(0.7..1.3),
            cfg.blob_sigma * rng.random_range(0.7..1.3),
        ];
        let points: Vec<Vec3> = (0..cfg.points_per_instance)
            .map(|_| {
                [
                    c[0] + scale[0] * normal(&mut rng),
                    c[1] + scale[1] * normal(&mut rng),
                    c[2] + scale[2] * normal(&mut rng),
                ]
            })
            .collect();
        let signature = unit_vector(cfg.feature_dim, &mut rng);
        instances.push(Instance {
            id: k as u32,
            center: c,
            points,
            signature,
            point_offset: offset,
        });
        offset += cfg.points_per_instance as u32;
    }
    let view = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.05..0.15),
        rng.random_range(-0.4..0.4),
    ];
    Ok(Scene {
        instances,
        bounds: Aabb::new([0.0; 3], [cfg.extent; 3])?,
        seed: cfg.seed,
        view,
    })
}

/// Splits `members` into `k` contiguous parts by repeatedly bisecting the
/// largest part along its widest axis at a jittered quantile.
fn bisect(points: &[Vec3], members: Vec<usize>, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut parts = vec![members];
    while parts.len() < k {
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .unwrap();
        let part = parts.remove(idx);
        if part.len() < 2 {
            parts.insert(idx, part);
            break;
        }
        let bb = Aabb::around(part.iter().map(|&p| points[p])).unwrap();
        let e = bb.extent();
        let axis = (0..3).fold(0, |best, a| if e[a] > e[best] { a } else { best });
        let mut sorted = part;
        sorted.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let q: f64 = rng.random_range(0.35..0.65);
        let cut = ((q * sorted.len() as f64).round() as usize).clamp(1, sorted.len() - 1);
        let mut right = sorted.split_off(cut);
        let mut left = sorted;
        left.sort_unstable();
        right.sort_unstable();
        parts.insert(idx, right);
        parts.insert(idx, left);
    }
    parts
}

pub fn render_frame(scene: &Scene, t: usize, cfg: &SimConfig) -> FrameObservation {
    let mut rng = rng_for(cfg.seed, 1 + t as u64);
    let [az0, step, elev] = scene.view;
    let az = az0 + step * t as f64;
    let dir: Vec3 = [az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()];
    let f = cfg.feature_dim;

    let mut obs = FrameObservation {
        t,
        point_ids: Vec::new(),
        points: Vec::new(),
        feature_dim: f,
        features: Vec::new(),
        fragments: Vec::new(),
        gt_labels: Vec::new(),
    };
    let visible_n = cfg.visible_count();
    for inst in &scene.instances {
        // Draws happen for every instance so occlusion does not shift the stream.
        let k = rng.random_range(cfg.min_fragments..=cfg.max_fragments);
        let view_offset: Vec<f64> = (0..f).map(|_| cfg.view_noise * normal(&mut rng)).collect();
        let mut frag_rng = rng_for(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, ((t as u64) << 20) | inst.id as u64);
        if cfg.is_occluded(inst.id, t) {
            continue;
        }
        let mut order: Vec<usize> = (0..inst.points.len()).collect();
        if visible_n < inst.points.len() {
            let depth: Vec<f64> = inst
                .points
                .iter()
                .map(|p| crate::geom::dot(crate::geom::sub(*p, inst.center), dir))
                .collect();
            order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
            order.truncate(visible_n);
            order.sort_unstable();
        }
        let base = obs.points.len();
        for &p in &order {
            obs.point_ids.push(inst.point_offset + p as u32);
            obs.points.push(inst.points[p]);
            obs.gt_labels.push(Some(inst.id));
            for d in 0..f {
                let noise = cfg.feature_noise * normal(&mut frag_rng);
                obs.features.push(inst.signature[d] + view_offset[d] + noise);
            }
        }
        let local: Vec<usize> = (base..base + order.len()).collect();
        let k = k.min(local.len());
        obs.fragments.extend(bisect(&obs.points, local, k, &mut frag_rng));
    }
    let bg_base = scene.num_instance_points() as u32
        + (t * cfg.background_fragments * cfg.background_points) as u32;
    let mut bg_rng = rng_for(cfg.seed ^ 0x5851_f42d_4c95_7f2d, t as u64);
    for j in 0..cfg.background_fragments {
        let lo = scene.bounds.min[0];
        let hi = scene.bounds.max[0];
        let c: Vec3 = [
            bg_rng.random_range(lo..hi),
            bg_rng.random_range(lo..hi),
            bg_rng.random_range(lo..hi),
        ];
        let sig = unit_vector(f, &mut bg_rng);
        let start = obs.points.len();
        for q in 0..cfg.background_points {
            obs.point_ids
                .push(bg_base + (j * cfg.background_points + q) as u32);
            obs.points.push([
                c[0] + 0.5 * cfg.blob_sigma * normal(&mut bg_rng),
                c[1] + 0.5 * cfg.blob_sigma * normal(&mut bg_rng),
                c[2] + 0.5 * cfg.blob_sigma * normal(&mut bg_rng),
            ]);
            obs.gt_labels.push(None);
            for s in &sig {
                obs.features.push(s + cfg.feature_noise * normal(&mut bg_rng));
            }
        }
        obs.fragments.push((start..obs.points.len()).collect());
    }
    obs
}

/// Tight box over each instance's visible points.
pub fn gt_boxes(obs: &FrameObservation) -> BTreeMap<u32, Aabb> {
    obs.instance_points()
        .into_iter()
        .filter_map(|(id, pts)| Aabb::around(pts.iter().map(|&p| obs.points[p])).map(|b| (id, b)))
        .collect()
}

/// Serialized sequence: header plus per-frame records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub format_version: u32,
    pub sequence_id: String,
    pub config: SimConfig,
    pub frames: Vec<FrameObservation>,
}

impl SequenceFile {
    pub fn generate(sequence_id: impl Into<String>, cfg: &SimConfig) -> Result<Self> {
        let scene = gen_scene(cfg)?;
        let frames = (0..cfg.frames).map(|t| render_frame(&scene, t, cfg)).collect();
        Ok(Self {
            format_version: SEQUENCE_FORMAT_VERSION,
            sequence_id: sequence_id.into(),
            config: cfg.clone(),
            frames,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, SEQUENCE_FORMAT_VERSION)?;
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

pub(crate) fn check_version(v: &serde_json::Value, expected: u32) -> Result<()> {
    let found = v
        .get("format_version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::InvalidInput("missing format_version".into()))? as u32;
    if found != expected {
        return Err(Error::FormatVersion { expected, found });
    }
    Ok(())
}

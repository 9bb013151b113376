//! Synthetic rooms, referring utterances and detector-free proposal sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::vocab::{ATTRIBUTES, CLASSES};

/// Axis-aligned box: center and full side lengths in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Self {
        Self { center, size }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0) && self.center.iter().chain(&self.size).all(|v| v.is_finite())
    }

    pub fn within(&self, extent: &[f64; 3]) -> bool {
        let eps = 1e-9;
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| lo[i] >= -eps && hi[i] <= extent[i] + eps)
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    for i in 0..3 {
        let overlap = ahi[i].min(bhi[i]) - alo[i].max(blo[i]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: i64,
    pub class_id: usize,
    pub attribute_id: usize,
    #[serde(rename = "box")]
    pub bbox: Box3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    /// Seed for point sampling.
    pub seed: u64,
    pub room_extent: [f64; 3],
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn object(&self, instance_id: i64) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.objects.iter().filter(|o| o.class_id == class_id).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetTag {
    Unique,
    Multiple,
}

impl SubsetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetTag::Unique => "unique",
            SubsetTag::Multiple => "multiple",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub scene_id: String,
    pub target_instance_id: i64,
    pub tokens: Vec<String>,
    pub subset_tag: SubsetTag,
    pub corruption_seed: u64,
}

/// `n × (3 + K)` points: xyz then K=3 pseudo-color channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Mat,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.rows
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Box3D>,
    /// Instance the box was jittered from, or -1 for a distractor.
    pub source_instance: Vec<i64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub room_extent: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub placement_attempts: usize,
    pub max_pair_iou: f64,
    /// Probability that an utterance carries a "<relation> the <anchor>" tail.
    pub relation_prob: f64,
    pub floor_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            room_extent: [6.0, 6.0, 3.0],
            min_objects: 4,
            max_objects: 9,
            placement_attempts: 500,
            max_pair_iou: 0.05,
            relation_prob: 0.5,
            floor_fraction: 0.15,
        }
    }
}

/// Nominal footprint and height per class, meters.
pub const CLASS_SIZES: [[f64; 3]; 8] = [
    [0.55, 0.55, 0.90], // chair
    [1.60, 0.90, 0.75], // table
    [2.00, 1.50, 0.55], // bed
    [2.00, 0.90, 0.85], // sofa
    [1.00, 0.55, 0.75], // desk
    [0.35, 0.35, 1.60], // lamp
    [0.90, 0.35, 1.90], // shelf
    [0.90, 0.15, 2.05], // door
];

/// Pseudo-color per attribute.
pub const ATTRIBUTE_COLORS: [[f64; 3]; 6] = [
    [0.50, 0.50, 0.50], // grey
    [0.95, 0.95, 0.95], // white
    [0.45, 0.30, 0.15], // brown
    [0.05, 0.05, 0.05], // black
    [0.85, 0.10, 0.10], // red
    [0.10, 0.20, 0.85], // blue
];

pub const FLOOR_COLOR: [f64; 3] = [0.60, 0.65, 0.40];

const COLOR_NOISE: f64 = 0.03;

/// SplitMix64 finalizer over a (base, stream, index) triple.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut z = base ^ crate::nn::fnv1a(stream.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    generate_scene_with_id(seed, cfg, format!("scene_{seed:016x}"))
}

pub fn generate_scene_with_id(seed: u64, cfg: &GenConfig, scene_id: String) -> Result<Scene> {
    assert!(cfg.min_objects >= 1 && cfg.min_objects <= cfg.max_objects, "bad object range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let ext = cfg.room_extent;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for index in 0..count {
        let class_id = rng.gen_range(0..CLASSES.len());
        let free: Vec<usize> = (0..ATTRIBUTES.len())
            .filter(|&a| !objects.iter().any(|o| o.class_id == class_id && o.attribute_id == a))
            .collect();
        let attribute_id = *free.choose(&mut rng).expect("6 attributes outnumber repeats");
        let nominal = CLASS_SIZES[class_id];
        let mut size: [f64; 3] = std::array::from_fn(|i| nominal[i] * rng.gen_range(0.9..1.1));
        if rng.gen_bool(0.5) {
            size.swap(0, 1);
        }
        for s in size.iter_mut().take(2) {
            *s = s.min(ext[0].min(ext[1]));
        }
        size[2] = size[2].min(ext[2]);
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let cx = rng.gen_range(0.5 * size[0]..=ext[0] - 0.5 * size[0]);
            let cy = rng.gen_range(0.5 * size[1]..=ext[1] - 0.5 * size[1]);
            let candidate = Box3D::new([cx, cy, 0.5 * size[2]], size);
            if objects.iter().all(|o| iou(&o.bbox, &candidate) <= cfg.max_pair_iou) {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or(Error::PlacementFailed { object: index, attempts: cfg.placement_attempts })?;
        objects.push(SceneObject { instance_id: index as i64, class_id, attribute_id, bbox });
    }
    Ok(Scene { scene_id, seed: derive_seed(seed, "points", 0), room_extent: ext, objects })
}

pub fn subset_label(scene: &Scene, target_class: usize) -> SubsetTag {
    if scene.class_count(target_class) == 1 {
        SubsetTag::Unique
    } else {
        SubsetTag::Multiple
    }
}

const RELATIONS: [&[&str]; 4] = [&["next", "to"], &["near"], &["beside"], &["close", "to"]];

/// "the <attribute> <class> [<relation> the <anchor class>]"
pub fn generate_utterance(scene: &Scene, target: i64, seed: u64) -> Result<Utterance> {
    generate_utterance_with(scene, target, seed, GenConfig::default().relation_prob)
}

pub fn generate_utterance_with(scene: &Scene, target: i64, seed: u64, relation_prob: f64) -> Result<Utterance> {
    let obj = scene.object(target).ok_or(Error::UnknownTarget(target))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<String> =
        ["the", ATTRIBUTES[obj.attribute_id], CLASSES[obj.class_id]].iter().map(|s| s.to_string()).collect();
    let anchor = scene
        .objects
        .iter()
        .filter(|o| o.instance_id != target)
        .min_by(|a, b| {
            let da = dist2(&a.bbox.center, &obj.bbox.center);
            let db = dist2(&b.bbox.center, &obj.bbox.center);
            da.total_cmp(&db)
        });
    let with_relation = rng.gen_bool(relation_prob);
    if let (Some(anchor), true) = (anchor, with_relation) {
        let rel = RELATIONS[rng.gen_range(0..RELATIONS.len())];
        tokens.extend(rel.iter().map(|s| s.to_string()));
        tokens.push("the".into());
        tokens.push(CLASSES[anchor.class_id].into());
    }
    Ok(Utterance {
        scene_id: scene.scene_id.clone(),
        target_instance_id: target,
        tokens,
        subset_tag: subset_label(scene, obj.class_id),
        corruption_seed: derive_seed(seed, "corruption", 0),
    })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Points split between the floor and object volumes (by box volume).
pub fn sample_points(scene: &Scene, n: usize, seed: u64) -> PointCloud {
    sample_points_with(scene, n, seed, GenConfig::default().floor_fraction)
}

pub fn sample_points_with(scene: &Scene, n: usize, seed: u64, floor_fraction: f64) -> PointCloud {
    assert!(n > 0, "need at least one point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, COLOR_NOISE).expect("valid std");
    let n_floor = if scene.objects.is_empty() { n } else { (n as f64 * floor_fraction).round() as usize };
    let n_objects = n - n_floor;
    // largest-remainder allocation over box volumes
    let total: f64 = scene.objects.iter().map(|o| o.bbox.volume()).sum();
    let quotas: Vec<f64> = scene.objects.iter().map(|o| n_objects as f64 * o.bbox.volume() / total).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut missing = n_objects - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        alloc[i] += 1;
        missing -= 1;
    }
    let mut data = Vec::with_capacity(n * 6);
    for (obj, &count) in scene.objects.iter().zip(&alloc) {
        let (lo, hi) = (obj.bbox.min(), obj.bbox.max());
        let color = ATTRIBUTE_COLORS[obj.attribute_id];
        for _ in 0..count {
            for i in 0..3 {
                data.push(rng.gen_range(lo[i]..=hi[i]));
            }
            for c in color {
                data.push(c + noise.sample(&mut rng));
            }
        }
    }
    let ext = scene.room_extent;
    for _ in 0..n_floor {
        data.push(rng.gen_range(0.0..=ext[0]));
        data.push(rng.gen_range(0.0..=ext[1]));
        data.push(0.0);
        for c in FLOOR_COLOR {
            data.push(c + noise.sample(&mut rng));
        }
    }
    PointCloud { points: Mat::from_vec(n, 6, data) }
}

fn jitter_box(b: &Box3D, jitter: f64, ext: &[f64; 3], rng: &mut ChaCha8Rng) -> Box3D {
    let mut size = b.size;
    let mut center = b.center;
    if jitter > 0.0 {
        for i in 0..3 {
            size[i] = (size[i] + rng.gen_range(-jitter..=jitter)).max(0.05);
            center[i] += rng.gen_range(-jitter..=jitter);
        }
    }
    fit_in_room(center, size, ext)
}

fn fit_in_room(mut center: [f64; 3], mut size: [f64; 3], ext: &[f64; 3]) -> Box3D {
    for i in 0..3 {
        size[i] = size[i].min(ext[i]);
        center[i] = center[i].clamp(0.5 * size[i], ext[i] - 0.5 * size[i]);
    }
    Box3D::new(center, size)
}

/// One jittered box per object plus random distractors, shuffled.
pub fn propose_boxes(scene: &Scene, target: i64, m: usize, jitter: f64, seed: u64) -> Result<ProposalSet> {
    let target_box = scene.object(target).ok_or(Error::UnknownTarget(target))?.bbox;
    assert!(m >= scene.objects.len(), "M={m} smaller than object count {}", scene.objects.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = scene.room_extent;
    let mut boxes = Vec::with_capacity(m);
    let mut sources = Vec::with_capacity(m);
    for obj in &scene.objects {
        let mut jittered = jitter_box(&obj.bbox, jitter, &ext, &mut rng);
        if obj.instance_id == target {
            let mut attempts = 0;
            while iou(&jittered, &target_box) < 0.5 {
                attempts += 1;
                jittered = if attempts < 1000 { jitter_box(&obj.bbox, jitter, &ext, &mut rng) } else { obj.bbox };
            }
        }
        boxes.push(jittered);
        sources.push(obj.instance_id);
    }
    while boxes.len() < m {
        let nominal = CLASS_SIZES[rng.gen_range(0..CLASS_SIZES.len())];
        let size: [f64; 3] = std::array::from_fn(|i| nominal[i] * rng.gen_range(0.8..1.2));
        let center = [rng.gen_range(0.0..ext[0]), rng.gen_range(0.0..ext[1]), 0.5 * size[2]];
        boxes.push(fit_in_room(center, size, &ext));
        sources.push(-1);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    Ok(ProposalSet {
        boxes: order.iter().map(|&i| boxes[i]).collect(),
        source_instance: order.iter().map(|&i| sources[i]).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Fraction of utterances tagged `unique`.
    pub fn unique_fraction(&self) -> f64 {
        if self.utterances.is_empty() {
            return 0.0;
        }
        let u = self.utterances.iter().filter(|u| u.subset_tag == SubsetTag::Unique).count();
        u as f64 / self.utterances.len() as f64
    }
}

/// `scenes` scenes with `per_scene` utterances each, all derived from `seed`.
pub fn generate_dataset(seed: u64, scenes: usize, per_scene: usize, cfg: &GenConfig, prefix: &str) -> Result<Dataset> {
    let mut out = Dataset::default();
    for s in 0..scenes {
        let scene_seed = derive_seed(seed, prefix, s as u64);
        let scene = generate_scene_with_id(scene_seed, cfg, format!("{prefix}_{s:05}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, "targets", 0));
        for u in 0..per_scene {
            let target = scene.objects[rng.gen_range(0..scene.objects.len())].instance_id;
            let useed = derive_seed(scene_seed, "utterance", u as u64);
            out.utterances.push(generate_utterance_with(&scene, target, useed, cfg.relation_prob)?);
        }
        out.scenes.push(scene);
    }
    Ok(out)
}

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(SCENES_FILE), &dataset.scenes)?;
    write_jsonl(&dir.join(UTTERANCES_FILE), &dataset.utterances)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        scenes: read_jsonl(&dir.join(SCENES_FILE))?,
        utterances: read_jsonl(&dir.join(UTTERANCES_FILE))?,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

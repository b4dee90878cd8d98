//! Deterministic procedural generator of (image, scene graph) pairs. The
//! person-like categories carry per-identity appearance (hue modulation
//! plus a stripe pattern keyed by `identity_key`), standing in for the
//! PII-bearing objects of a natural dataset. Generation is a pure function
//! of the config: sample i's RNG stream is derived solely from (seed, i).

use crate::img::{write_ppm, Image};
use crate::util::{hash_str, splitmix64};
use crate::scene_graph::{
    pad_graph, roi_of, validate_graph, BBox, GraphError, ObjectNode, PixelRect,
    RelationshipTriple, SceneGraph, Vocabulary,
};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Fixed scene-graph size after padding.
pub const PAD_TARGET: usize = 10;

pub const PERSON_LIKE: [&str; 5] = ["man", "woman", "boy", "girl", "person"];

const OTHER_CATEGORIES: [&str; 5] = ["tree", "car", "ball", "house", "sun"];

/// Identity pool size for non-person categories.
const OBJECT_IDENTITY_POOL: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset io: {0}")]
    Manifest(String),
}

pub fn is_person_like(category: &str) -> bool {
    PERSON_LIKE.contains(&category)
}

/// The closed vocabulary used by every synthetic dataset.
pub fn default_vocabulary() -> Vocabulary {
    let categories: Vec<String> = PERSON_LIKE
        .iter()
        .chain(OTHER_CATEGORIES.iter())
        .map(|s| s.to_string())
        .collect();
    let generalization_map: BTreeMap<String, String> = [
        ("man", "person"),
        ("woman", "person"),
        ("boy", "person"),
        ("girl", "person"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    Vocabulary {
        categories,
        attributes: ["small", "large", "bright", "dark"]
            .map(String::from)
            .to_vec(),
        predicates: ["left-of", "above", "inside", "overlaps"]
            .map(String::from)
            .to_vec(),
        generalization_map,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Sampling weight per category; unlisted categories get weight 1.
    #[serde(default)]
    pub category_weights: BTreeMap<String, f64>,
    /// Distinct identity keys per person-like category.
    pub identity_pool: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 200,
            image_size: 32,
            objects_min: 3,
            objects_max: 6,
            category_weights: BTreeMap::new(),
            identity_pool: 3,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_samples == 0 {
            return Err(SynthError::ConfigError("n_samples must be positive".into()));
        }
        if ![16, 32, 64].contains(&self.image_size) {
            return Err(SynthError::ConfigError(format!(
                "image_size {} not in {{16, 32, 64}}",
                self.image_size
            )));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(SynthError::ConfigError(
                "objects_per_scene range is empty".into(),
            ));
        }
        if self.objects_max > PAD_TARGET {
            return Err(SynthError::ConfigError(format!(
                "objects_max {} exceeds pad target {PAD_TARGET}",
                self.objects_max
            )));
        }
        if self.identity_pool == 0 {
            return Err(SynthError::ConfigError("identity_pool must be positive".into()));
        }
        let vocab = default_vocabulary();
        for cat in self.category_weights.keys() {
            if !vocab.has_category(cat) {
                return Err(SynthError::ConfigError(format!(
                    "weight for unknown category {cat:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One (image, padded scene graph) training pair plus its provenance seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: Image,
    pub graph: SceneGraph,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    pub samples: Vec<RenderedSample>,
    /// First `train_count` samples (by index) are the training split.
    pub train_count: usize,
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_count
    }

    /// (sample index, node index) of a dataset-unique object id.
    pub fn find_object(&self, object_id: &str) -> Option<(usize, usize)> {
        for (si, s) in self.samples.iter().enumerate() {
            if let Some(ni) = s.graph.nodes.iter().position(|n| n.id == object_id) {
                return Some((si, ni));
            }
        }
        None
    }

    /// All non-pad object ids of a category in the training split.
    pub fn train_objects_of_category(&self, category: &str) -> Vec<String> {
        self.samples[self.train_indices()]
            .iter()
            .flat_map(|s| s.graph.non_pad_nodes())
            .filter(|n| n.category == category)
            .map(|n| n.id.clone())
            .collect()
    }
}

/// Per-sample stream seed derived solely from (seed, index).
pub fn sample_stream_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

/// Generates the full dataset. Bit-identical output for identical config;
/// per-sample work is independent and runs in parallel.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, SynthError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let vocab = default_vocabulary();
    let samples: Result<Vec<RenderedSample>, SynthError> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, &vocab, i))
        .collect();
    let samples = samples?;
    let train_count = cfg.n_samples - cfg.n_samples / 10;
    Ok(Dataset {
        config: cfg.clone(),
        vocab,
        samples,
        train_count,
    })
}

fn weight_of(cfg: &DatasetConfig, category: &str) -> f64 {
    cfg.category_weights.get(category).copied().unwrap_or(1.0)
}

fn generate_sample(
    cfg: &DatasetConfig,
    vocab: &Vocabulary,
    index: usize,
) -> Result<RenderedSample, SynthError> {
    let seed = sample_stream_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);

    let person_weights: Vec<f64> = PERSON_LIKE.iter().map(|c| weight_of(cfg, c)).collect();
    let all_weights: Vec<f64> = vocab
        .categories
        .iter()
        .map(|c| weight_of(cfg, c))
        .collect();
    if person_weights.iter().sum::<f64>() <= 0.0 {
        return Err(SynthError::ConfigError(
            "person-like categories must have positive total weight".into(),
        ));
    }
    let person_dist = WeightedIndex::new(&person_weights)
        .map_err(|e| SynthError::ConfigError(e.to_string()))?;
    let all_dist =
        WeightedIndex::new(&all_weights).map_err(|e| SynthError::ConfigError(e.to_string()))?;

    let mut nodes = Vec::with_capacity(n_objects);
    for j in 0..n_objects {
        // Every sample carries at least one person-like object.
        let category = if j == 0 {
            PERSON_LIKE[person_dist.sample(&mut rng)].to_string()
        } else {
            vocab.categories[all_dist.sample(&mut rng)].clone()
        };
        let pool = if is_person_like(&category) {
            cfg.identity_pool
        } else {
            OBJECT_IDENTITY_POOL
        };
        let identity_key = rng.gen_range(0..pool) as u64 + 1;
        // Bounded rejection sampling: person-like objects (the potential
        // unlearning targets) keep a pixel margin from everything, other
        // pairs may overlap mildly. The last try is accepted regardless
        // so object count never depends on luck.
        let person = is_person_like(&category);
        let mut bbox = BBox::new(0.0, 0.0, 0.1, 0.1);
        for _try in 0..24 {
            let bw = rng.gen_range(0.15..0.3);
            let bh = rng.gen_range(0.15..0.3);
            let x0 = rng.gen_range(0.02..0.96 - bw);
            let y0 = rng.gen_range(0.02..0.96 - bh);
            bbox = BBox::new(x0, y0, x0 + bw, y0 + bh);
            let ok = nodes.iter().all(|n: &ObjectNode| {
                let hard = person || is_person_like(&n.category);
                if hard {
                    !boxes_touch(&n.bbox, &bbox, 0.07)
                } else {
                    iou(&n.bbox, &bbox) <= 0.3
                }
            });
            if ok {
                break;
            }
        }
        let n_attrs = rng.gen_range(0..=2usize);
        let mut attributes = Vec::new();
        for _ in 0..n_attrs {
            let a = vocab.attributes[rng.gen_range(0..vocab.attributes.len())].clone();
            if !attributes.contains(&a) {
                attributes.push(a);
            }
        }
        nodes.push(ObjectNode {
            id: format!("s{index:04}_o{j}"),
            category,
            attributes,
            identity_key,
            bbox,
        });
    }

    let size = cfg.image_size;
    let rois: Vec<PixelRect> = nodes
        .iter()
        .map(|n| roi_of(n, size, size))
        .collect::<Result<_, _>>()?;

    let mut edges = Vec::new();
    for i in 0..n_objects {
        for j in (i + 1)..n_objects {
            if rng.gen_range(0.0..1.0) >= 0.4 {
                continue;
            }
            let candidates = true_predicates(&nodes[i].id, &rois[i], &nodes[j].id, &rois[j]);
            if candidates.is_empty() {
                continue;
            }
            let pick = rng.gen_range(0..candidates.len());
            let (s, p, o) = candidates[pick].clone();
            edges.push(RelationshipTriple { s, p, o });
        }
    }

    let graph = SceneGraph::new(nodes, edges);
    validate_graph(&graph, vocab)?;
    let graph = pad_graph(&graph, PAD_TARGET)?;
    let image = render_scene(&graph, size, seed)?;
    Ok(RenderedSample { image, graph, seed })
}

/// Relation semantics over pixel ROIs:
/// left-of / above compare continuous rect centers strictly; inside is
/// (non-strict) containment of distinct rects; overlaps is positive-area
/// intersection.
fn true_predicates(
    id_a: &str,
    a: &PixelRect,
    id_b: &str,
    b: &PixelRect,
) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let mut push = |s: &str, p: &str, o: &str| {
        out.push((s.to_string(), p.to_string(), o.to_string()));
    };
    if acx < bcx {
        push(id_a, "left-of", id_b);
    }
    if bcx < acx {
        push(id_b, "left-of", id_a);
    }
    if acy < bcy {
        push(id_a, "above", id_b);
    }
    if bcy < acy {
        push(id_b, "above", id_a);
    }
    let contains = |outer: &PixelRect, inner: &PixelRect| {
        inner.x0 >= outer.x0 && inner.x1 <= outer.x1 && inner.y0 >= outer.y0 && inner.y1 <= outer.y1
    };
    if a != b {
        if contains(b, a) {
            push(id_a, "inside", id_b);
        }
        if contains(a, b) {
            push(id_b, "inside", id_a);
        }
    }
    if a.intersects(b) {
        push(id_a, "overlaps", id_b);
    }
    out
}

/// True when the margin-expanded boxes intersect.
fn boxes_touch(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x_left - margin < b.x_right
        && b.x_left - margin < a.x_right
        && a.y_top - margin < b.y_bottom
        && b.y_top - margin < a.y_bottom
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_right.min(b.x_right) - a.x_left.max(b.x_left)).max(0.0);
    let iy = (a.y_bottom.min(b.y_bottom) - a.y_top.max(b.y_top)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x_right - a.x_left) * (a.y_bottom - a.y_top);
    let area_b = (b.x_right - b.x_left) * (b.y_bottom - b.y_top);
    inter / (area_a + area_b - inter).max(1e-12)
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Triangle,
    Square,
    Ring,
}

fn shape_of(category: &str) -> Shape {
    match category {
        c if is_person_like(c) => Shape::Disc,
        "tree" => Shape::Triangle,
        "car" | "house" => Shape::Square,
        "ball" | "sun" => Shape::Ring,
        _ => Shape::Square,
    }
}

fn base_color(category: &str) -> [f64; 3] {
    // Person-like categories share one appearance distribution so that a
    // generalized label (girl -> person) is visually consistent; identity
    // keys carry all per-person variation.
    match category {
        c if is_person_like(c) => [208.0, 168.0, 134.0],
        "tree" => [70.0, 150.0, 70.0],
        "car" => [180.0, 70.0, 60.0],
        "ball" => [215.0, 205.0, 80.0],
        "house" => [160.0, 120.0, 80.0],
        "sun" => [245.0, 225.0, 120.0],
        _ => [128.0, 128.0, 128.0],
    }
}

struct IdentityStyle {
    mult: [f64; 3],
    stripe_angle: f64,
    stripe_period: f64,
    stripe_phase: f64,
}

/// Appearance is a pure function of (category, identity_key): a hue
/// modulation plus a stripe pattern. Stable across scenes — this is the
/// visual identity the unlearning methods must erase. All person-like
/// categories draw from one shared identity pool, so the same key means
/// the same individual whatever the label says.
fn identity_style(category: &str, identity_key: u64) -> IdentityStyle {
    let family = if is_person_like(category) {
        "__person_family__"
    } else {
        category
    };
    let h = splitmix64(splitmix64(hash_str(family)) ^ identity_key.wrapping_mul(0x9E37));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mult = [
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
    ];
    IdentityStyle {
        mult,
        stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
        stripe_period: rng.gen_range(3.0..6.5),
        stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Renders a padded graph: seeded background gradient, then each non-pad
/// node's primitive painted inside its ROI in node order (painter's
/// algorithm), textured by its identity style.
pub fn render_scene(graph: &SceneGraph, size: usize, palette_seed: u64) -> Result<Image, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(palette_seed ^ 0xBAC6_6D0D));
    let c0: [f64; 3] = [
        rng.gen_range(30.0..52.0),
        rng.gen_range(30.0..52.0),
        rng.gen_range(40.0..66.0),
    ];
    let c1: [f64; 3] = [
        rng.gen_range(58.0..92.0),
        rng.gen_range(58.0..92.0),
        rng.gen_range(68.0..104.0),
    ];
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 + y as f64) / (2.0 * (size - 1) as f64);
            let px = [
                (c0[0] + (c1[0] - c0[0]) * t) as u8,
                (c0[1] + (c1[1] - c0[1]) * t) as u8,
                (c0[2] + (c1[2] - c0[2]) * t) as u8,
            ];
            img.set(x, y, px);
        }
    }

    for node in graph.non_pad_nodes() {
        let rect = roi_of(node, size, size)?;
        paint_object(&mut img, node, &rect);
    }
    Ok(img)
}

fn paint_object(img: &mut Image, node: &ObjectNode, rect: &PixelRect) {
    let style = identity_style(&node.category, node.identity_key);
    let base = base_color(&node.category);
    let shape = shape_of(&node.category);
    let (w, h) = (rect.width() as f64, rect.height() as f64);
    let (cx, cy) = (
        rect.x0 as f64 + w / 2.0,
        rect.y0 as f64 + h / 2.0,
    );
    let (dir_x, dir_y) = (style.stripe_angle.cos(), style.stripe_angle.sin());

    // Signed distances are scaled to ~pixels so shape boundaries blend
    // over roughly one pixel (soft edges render small objects cleanly).
    let half = (w.min(h)) / 2.0;
    let stripe_amp = if is_person_like(&node.category) { 5.0 } else { 9.0 };
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let nx = (fx - cx) / (w / 2.0);
            let ny = (fy - cy) / (h / 2.0);
            let r = (nx * nx + ny * ny).sqrt();
            let dist_px = match shape {
                Shape::Disc => (1.0 - r) * half,
                Shape::Square => 1.0,
                Shape::Triangle => {
                    // Apex at top-center, base along the bottom edge.
                    let ty = (fy - rect.y0 as f64) / h;
                    (ty - nx.abs()) * half
                }
                Shape::Ring => {
                    let inner = 0.3f64.sqrt();
                    (1.0 - r).min(r - inner) * half
                }
            };
            let alpha = (dist_px + 0.5).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            let stripe = ((fx * dir_x + fy * dir_y) * std::f64::consts::TAU
                / style.stripe_period
                + style.stripe_phase)
                .sin()
                * stripe_amp;
            let bg = img.get(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let obj = (base[c] * style.mult[c] + stripe).clamp(0.0, 255.0);
                px[c] = (alpha * obj + (1.0 - alpha) * bg[c] as f64).round() as u8;
            }
            img.set(x, y, px);
        }
    }
}

// ---- manifest io ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub graph: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub train_count: usize,
    pub samples: Vec<SampleEntry>,
}

/// Writes manifest.json plus one PPM and one graph JSON per sample.
pub fn save_dataset<P: AsRef<Path>>(dataset: &Dataset, dir: P) -> Result<DatasetManifest, SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("sample_{i:04}.ppm");
        let graph = format!("sample_{i:04}.json");
        write_ppm(dir.join(&image), &s.image)?;
        std::fs::write(
            dir.join(&graph),
            crate::scene_graph::serialize_graph(&s.graph),
        )?;
        entries.push(SampleEntry {
            index: i,
            seed: s.seed,
            image,
            graph,
        });
    }
    let manifest = DatasetManifest {
        config: dataset.config.clone(),
        train_count: dataset.train_count,
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SynthError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<Dataset, SynthError> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = crate::img::read_ppm(dir.join(&entry.image))?;
        let graph_text = std::fs::read_to_string(dir.join(&entry.graph))?;
        let graph = crate::scene_graph::deserialize_graph(&graph_text)?;
        samples.push(RenderedSample {
            image,
            graph,
            seed: entry.seed,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        vocab: default_vocabulary(),
        samples,
        train_count: manifest.train_count,
    })
}

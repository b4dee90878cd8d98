//! Indirect-leakage query attacks: probe an unlearned model with a
//! minimally altered scene graph (fuzzy / neighbor / singleton label
//! change) and measure whether the forgotten object reappears in the
//! synthesized output.

use crate::img::{resize_bilinear_f64, Image};
use crate::metrics::{ssim, MetricError, ROI_RESIZE};
use crate::model::{synthesize, GeneratorModel, ModelError};
use crate::scene_graph::{mutate_label, roi_of, GraphError, SceneGraph, Vocabulary};
use crate::synth::Dataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Robustness slack: an attack leaks only if it recovers more than the
/// unattacked query by at least this margin.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("attack not applicable: {0}")]
    NotApplicable(String),
    #[error("target object {0:?} not found")]
    UnknownTarget(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Replace the unlearned object's category with a more general label.
    Fuzzy,
    /// Relabel a node at graph distance exactly 2 from the target.
    Neighbor,
    /// Relabel an isolated (edge-free) node.
    Singleton,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fuzzy => "fuzzy",
            AttackKind::Neighbor => "neighbor",
            AttackKind::Singleton => "singleton",
        }
    }
}

/// One attack instance against a specific unlearned object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub target_object_id: String,
    /// Candidate replacement labels for neighbor/singleton relabeling;
    /// the first entry differing from the node's current category is used.
    pub label_pool: Vec<String>,
}

impl AttackSpec {
    pub fn standard_three(target: &str, vocab: &Vocabulary) -> Vec<AttackSpec> {
        [AttackKind::Fuzzy, AttackKind::Neighbor, AttackKind::Singleton]
            .into_iter()
            .map(|kind| AttackSpec {
                kind,
                target_object_id: target.to_string(),
                label_pool: vocab.categories.clone(),
            })
            .collect()
    }
}

/// Builds the attacked graph G' for a spec: exactly one node's category
/// changes, everything else is untouched.
pub fn build_attack_graph(
    graph: &SceneGraph,
    spec: &AttackSpec,
    vocab: &Vocabulary,
) -> Result<SceneGraph, LeakageError> {
    let target = graph
        .node_by_id(&spec.target_object_id)
        .filter(|n| !n.is_pad())
        .ok_or_else(|| LeakageError::UnknownTarget(spec.target_object_id.clone()))?;

    match spec.kind {
        AttackKind::Fuzzy => {
            let general = vocab
                .generalization_map
                .get(&target.category)
                .ok_or_else(|| {
                    LeakageError::NotApplicable(format!(
                        "no generalization for category {:?}",
                        target.category
                    ))
                })?;
            Ok(mutate_label(graph, &target.id, general, vocab)?)
        }
        AttackKind::Neighbor => {
            let distances = graph.hop_distances(&target.id);
            let mut candidates: Vec<&str> = graph
                .non_pad_nodes()
                .filter(|n| distances.get(&n.id).copied() == Some(2))
                .map(|n| n.id.as_str())
                .collect();
            candidates.sort_unstable();
            let Some(node_id) = candidates.first() else {
                return Err(LeakageError::NotApplicable(
                    "no node at graph distance exactly 2 from the target".into(),
                ));
            };
            let node = graph.node_by_id(node_id).unwrap();
            let new_label = pick_label(&spec.label_pool, &node.category)?;
            Ok(mutate_label(graph, node_id, &new_label, vocab)?)
        }
        AttackKind::Singleton => {
            let mut isolated = graph.isolated_node_ids();
            isolated.retain(|id| *id != spec.target_object_id);
            isolated.sort_unstable();
            let Some(node_id) = isolated.first() else {
                return Err(LeakageError::NotApplicable(
                    "no isolated node distinct from the target".into(),
                ));
            };
            let node = graph.node_by_id(node_id).unwrap();
            let new_label = pick_label(&spec.label_pool, &node.category)?;
            Ok(mutate_label(graph, node_id, &new_label, vocab)?)
        }
    }
}

fn pick_label(pool: &[String], current: &str) -> Result<String, LeakageError> {
    pool.iter()
        .find(|l| l.as_str() != current)
        .cloned()
        .ok_or_else(|| LeakageError::NotApplicable("label pool exhausted".into()))
}

/// Recovery score: SSIM between the resized target-object ROI of a
/// generated image and the same ROI of the ground-truth render. One code
/// path for every attack.
pub fn recovery_score(
    generated: &Image,
    ground_truth: &Image,
    graph: &SceneGraph,
    target_id: &str,
) -> Result<f64, LeakageError> {
    let node = graph
        .node_by_id(target_id)
        .ok_or_else(|| LeakageError::UnknownTarget(target_id.to_string()))?;
    let rect = roi_of(node, generated.width, generated.height)?;
    let resize = |img: &Image| {
        let crop = img.crop(&rect);
        let f = resize_bilinear_f64(
            &crop.to_f64_chw(),
            3,
            crop.height,
            crop.width,
            ROI_RESIZE,
            ROI_RESIZE,
        );
        Image::from_f64_chw(&f, ROI_RESIZE, ROI_RESIZE)
    };
    Ok(ssim(&resize(generated), &resize(ground_truth))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Robust,
    NotRobust,
    Vacuous,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Robust => "ROBUST",
            Verdict::NotRobust => "NOT_ROBUST",
            Verdict::Vacuous => "VACUOUS",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub target_object_id: String,
    pub applicable: bool,
    /// NotApplicable reason when `applicable` is false.
    pub note: String,
    pub recovery_unl: f64,
    pub recovery_unl_unattacked: f64,
    pub recovery_orig: f64,
    pub attacked_graph: Option<SceneGraph>,
    pub attacked_output_unl: Option<Image>,
}

#[derive(Debug, Clone)]
pub struct LeakageReport {
    pub results: Vec<AttackResult>,
    pub tau: f64,
    pub verdict: Verdict,
}

impl LeakageReport {
    /// attack,applicable,recovery_unl,recovery_unl_unattacked,recovery_orig,verdict
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("attack,applicable,recovery_unl,recovery_unl_unattacked,recovery_orig,verdict\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kind.name(),
                r.applicable,
                r.recovery_unl,
                r.recovery_unl_unattacked,
                r.recovery_orig,
                self.verdict.name()
            ));
        }
        out
    }
}

/// Runs every attack against the unlearned model (the original model is
/// scored on the same attacked graphs for reference). The verdict is
/// ROBUST iff no applicable attack recovers more than the unattacked
/// query plus tau; with no applicable attacks it is VACUOUS.
pub fn run_leakage_test(
    model_unl: &GeneratorModel,
    model_orig: &GeneratorModel,
    dataset: &Dataset,
    specs: &[AttackSpec],
    tau: f64,
) -> Result<LeakageReport, LeakageError> {
    let mut results = Vec::with_capacity(specs.len());
    let mut any_applicable = false;
    let mut robust = true;

    for spec in specs {
        let (si, _) = dataset
            .find_object(&spec.target_object_id)
            .ok_or_else(|| LeakageError::UnknownTarget(spec.target_object_id.clone()))?;
        let sample = &dataset.samples[si];
        match build_attack_graph(&sample.graph, spec, &dataset.vocab) {
            Ok(attacked) => {
                let out_unl = synthesize(model_unl, &attacked)?;
                let out_unl_plain = synthesize(model_unl, &sample.graph)?;
                let out_orig = synthesize(model_orig, &attacked)?;
                let rec_unl =
                    recovery_score(&out_unl, &sample.image, &attacked, &spec.target_object_id)?;
                let rec_plain = recovery_score(
                    &out_unl_plain,
                    &sample.image,
                    &sample.graph,
                    &spec.target_object_id,
                )?;
                let rec_orig =
                    recovery_score(&out_orig, &sample.image, &attacked, &spec.target_object_id)?;
                any_applicable = true;
                if rec_unl > rec_plain + tau {
                    robust = false;
                }
                results.push(AttackResult {
                    kind: spec.kind,
                    target_object_id: spec.target_object_id.clone(),
                    applicable: true,
                    note: String::new(),
                    recovery_unl: rec_unl,
                    recovery_unl_unattacked: rec_plain,
                    recovery_orig: rec_orig,
                    attacked_graph: Some(attacked),
                    attacked_output_unl: Some(out_unl),
                });
            }
            Err(LeakageError::NotApplicable(reason)) => {
                results.push(AttackResult {
                    kind: spec.kind,
                    target_object_id: spec.target_object_id.clone(),
                    applicable: false,
                    note: reason,
                    recovery_unl: f64::NAN,
                    recovery_unl_unattacked: f64::NAN,
                    recovery_orig: f64::NAN,
                    attacked_graph: None,
                    attacked_output_unl: None,
                });
            }
            Err(other) => return Err(other),
        }
    }

    let verdict = if !any_applicable {
        Verdict::Vacuous
    } else if robust {
        Verdict::Robust
    } else {
        Verdict::NotRobust
    };
    Ok(LeakageReport {
        results,
        tau,
        verdict,
    })
}

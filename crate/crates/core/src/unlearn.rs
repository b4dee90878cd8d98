//! Resolves unlearning requests into removal sets and executes the nine
//! unlearning methods: fine-tuning with sample exclusion, negative
//! guidance, patch/noise mask fine-tuning, and influence-function partial
//! model redaction, plus the from-scratch retrain oracle.

use crate::autodiff::{
    conjugate_gradient_solve, default_hvp_epsilon, hessian_vector_product, Partition, Tape, Var,
};
use crate::img::Image;
use crate::model::{
    finetune, forward_scene, recon_loss, run_training, GeneratorModel, ModelError,
    NgRegion, RunSpec, ScenePlan, TrainConfig, TrainItem, TrainLog,
};
use crate::autodiff::Tensor;
use crate::scene_graph::{roi_of, GraphError, PixelRect};
use crate::synth::Dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("unknown object id {0:?} (not in the training split)")]
    UnknownObjectId(String),
    #[error("method {method} is incompatible with scope {scope:?}")]
    IncompatibleScope { method: String, scope: Scope },
    #[error("roi {0:?} out of bounds for {1}x{2} image")]
    RoiOutOfBounds(PixelRect, usize, usize),
    #[error("unlearning request must be non-empty")]
    EmptyRequest,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Unlearning granularity (Definitions 1-3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Sample,
    Feature,
    Object,
}

/// The requested object identities q_unl plus the granularity to resolve
/// them at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub object_ids: BTreeSet<String>,
    pub scope: Scope,
}

impl UnlearnRequest {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(ids: I, scope: Scope) -> Self {
        UnlearnRequest {
            object_ids: ids.into_iter().map(Into::into).collect(),
            scope,
        }
    }

    pub fn with_scope(&self, scope: Scope) -> Self {
        UnlearnRequest {
            object_ids: self.object_ids.clone(),
            scope,
        }
    }
}

/// Resolved removal set; exactly the field matching `scope` is populated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalSet {
    pub scope: Scope,
    /// Sample scope: indices of training samples to remove.
    pub sample_indices: BTreeSet<usize>,
    /// Feature scope: categories to remove.
    pub categories: BTreeSet<String>,
    /// Object scope: exact object ids to remove.
    pub object_ids: BTreeSet<String>,
}

impl RemovalSet {
    pub fn is_empty(&self) -> bool {
        match self.scope {
            Scope::Sample => self.sample_indices.is_empty(),
            Scope::Feature => self.categories.is_empty(),
            Scope::Object => self.object_ids.is_empty(),
        }
    }

    /// The concrete object ids this removal touches, expanded per scope:
    /// object scope is exact, feature scope covers every same-category
    /// object in the training split, sample scope covers every object of
    /// the removed samples.
    pub fn expanded_object_ids(&self, dataset: &Dataset) -> BTreeSet<String> {
        match self.scope {
            Scope::Object => self.object_ids.clone(),
            Scope::Feature => self
                .categories
                .iter()
                .flat_map(|c| dataset.train_objects_of_category(c))
                .collect(),
            Scope::Sample => self
                .sample_indices
                .iter()
                .flat_map(|&si| {
                    dataset.samples[si]
                        .graph
                        .non_pad_nodes()
                        .map(|n| n.id.clone())
                })
                .collect(),
        }
    }
}

/// Resolves a request against the training split (Definitions 1-3):
/// sample scope collects every image containing a requested object,
/// feature scope collects the requested objects' categories, object scope
/// keeps exactly the requested ids.
pub fn select_removal(
    request: &UnlearnRequest,
    dataset: &Dataset,
) -> Result<RemovalSet, UnlearnError> {
    if request.object_ids.is_empty() {
        return Err(UnlearnError::EmptyRequest);
    }
    let mut home_samples = BTreeSet::new();
    let mut categories = BTreeSet::new();
    for id in &request.object_ids {
        let (si, ni) = dataset
            .find_object(id)
            .filter(|(si, _)| *si < dataset.train_count)
            .ok_or_else(|| UnlearnError::UnknownObjectId(id.clone()))?;
        home_samples.insert(si);
        categories.insert(dataset.samples[si].graph.nodes[ni].category.clone());
    }
    let mut removal = RemovalSet {
        scope: request.scope,
        sample_indices: BTreeSet::new(),
        categories: BTreeSet::new(),
        object_ids: BTreeSet::new(),
    };
    match request.scope {
        Scope::Sample => removal.sample_indices = home_samples,
        Scope::Feature => removal.categories = categories,
        Scope::Object => removal.object_ids = request.object_ids.clone(),
    }
    Ok(removal)
}

// ---- masking primitives ----

fn check_roi(image: &Image, roi: &PixelRect) -> Result<(), UnlearnError> {
    if roi.x1 > image.width || roi.y1 > image.height || roi.area() == 0 {
        return Err(UnlearnError::RoiOutOfBounds(*roi, image.width, image.height));
    }
    Ok(())
}

/// Zeroes every pixel inside `roi`; everything outside is bit-identical.
pub fn apply_patch_mask(image: &Image, roi: &PixelRect) -> Result<Image, UnlearnError> {
    check_roi(image, roi)?;
    let mut out = image.clone();
    for y in roi.y0..roi.y1 {
        for x in roi.x0..roi.x1 {
            out.set(x, y, [0, 0, 0]);
        }
    }
    Ok(out)
}

/// Gaussian noise samples with std `sigma` (in dynamic-range units, i.e.
/// 1.0 = full 8-bit range), from a seeded stream. Exposed so the pre-clamp
/// statistics are testable.
pub fn sample_gaussian(sigma: f64, seed: u64, count: usize) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    if sigma == 0.0 {
        return vec![0.0; count];
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    (0..count).map(|_| normal.sample(&mut rng)).collect()
}

/// Adds clamped Gaussian noise (std `sigma` of the dynamic range) to every
/// channel inside `roi`; outside pixels are untouched. Deterministic given
/// the seed.
pub fn apply_noise_mask(
    image: &Image,
    roi: &PixelRect,
    sigma: f64,
    seed: u64,
) -> Result<Image, UnlearnError> {
    check_roi(image, roi)?;
    let mut out = image.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let noise = sample_gaussian(sigma, seed, roi.area() * 3);
    let mut k = 0;
    for y in roi.y0..roi.y1 {
        for x in roi.x0..roi.x1 {
            let mut px = out.get(x, y);
            for channel in px.iter_mut() {
                let v = *channel as f64 + noise[k] * 255.0;
                *channel = v.round().clamp(0.0, 255.0) as u8;
                k += 1;
            }
            out.set(x, y, px);
        }
    }
    Ok(out)
}

// ---- method configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    /// Negative-guidance weight.
    pub lambda_ng: f64,
    /// Noise-mask std as a fraction of the dynamic range.
    pub sigma_noise: f64,
    /// Redaction scalar applied to the influence delta.
    pub lambda_redact: f64,
    /// Fine-tuning epochs for every fine-tune-class method.
    pub epochs_ft: usize,
    pub cg_damping: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Parameter partitions targeted by redaction.
    pub target_partitions: Vec<Partition>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            lambda_ng: 0.5,
            sigma_noise: 0.2,
            lambda_redact: 1e-3,
            epochs_ft: 200,
            cg_damping: 0.01,
            cg_tol: 1e-6,
            cg_max_iter: 200,
            target_partitions: vec![Partition::Grl],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

// ---- fine-tuning methods ----

fn plain_items(dataset: &Dataset, exclude: &BTreeSet<usize>) -> Vec<TrainItem> {
    dataset.train_indices()
        .filter(|si| !exclude.contains(si))
        .map(|si| {
            let s = &dataset.samples[si];
            TrainItem::plain(&s.graph, &s.image)
        })
        .collect()
}

fn ft_spec(mcfg: &MethodConfig, tcfg: &TrainConfig, lambda_ng: f64) -> RunSpec {
    RunSpec {
        epochs: mcfg.epochs_ft,
        lr: tcfg.lr,
        seed: tcfg.seed,
        batch_size: tcfg.batch_size,
        zv_dropout: tcfg.zv_dropout,
        lambda_ng,
    }
}

/// Fine-tunes on the training set minus the removed samples (Sample-FT).
pub fn exclusion_finetune(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
    mcfg: &MethodConfig,
    tcfg: &TrainConfig,
) -> Result<(GeneratorModel, TrainLog), UnlearnError> {
    let items = plain_items(dataset, &removal.sample_indices);
    let mut out = model.clone();
    let log = finetune(&mut out, &items, &ft_spec(mcfg, tcfg, 0.0))?;
    Ok((out, log))
}

/// Negative-guidance regions per scope: the requested objects' ROIs
/// (object), every removed-category object's ROI (feature), or the whole
/// image of each removed sample (sample).
fn ng_regions_for(
    dataset: &Dataset,
    removal: &RemovalSet,
) -> Result<Vec<(usize, PixelRect)>, UnlearnError> {
    let size = dataset.image_size();
    let mut out = Vec::new();
    match removal.scope {
        Scope::Sample => {
            for &si in &removal.sample_indices {
                out.push((
                    si,
                    PixelRect {
                        x0: 0,
                        y0: 0,
                        x1: size,
                        y1: size,
                    },
                ));
            }
        }
        Scope::Object | Scope::Feature => {
            for id in removal.expanded_object_ids(dataset) {
                let (si, ni) = dataset
                    .find_object(&id)
                    .ok_or_else(|| UnlearnError::UnknownObjectId(id.clone()))?;
                let node = &dataset.samples[si].graph.nodes[ni];
                out.push((si, roi_of(node, size, size)?));
            }
        }
    }
    Ok(out)
}

/// Fine-tunes with L_total = L_gen + L_ng, where L_ng is the negated ROI
/// reconstruction loss over the removal regions.
pub fn negative_guidance_finetune(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
    mcfg: &MethodConfig,
    tcfg: &TrainConfig,
) -> Result<(GeneratorModel, TrainLog), UnlearnError> {
    let mut items = plain_items(dataset, &BTreeSet::new());
    for (si, rect) in ng_regions_for(dataset, removal)? {
        items[si].ng.push(NgRegion { rect });
    }
    let mut out = model.clone();
    let log = finetune(&mut out, &items, &ft_spec(mcfg, tcfg, mcfg.lambda_ng))?;
    Ok((out, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Patch,
    Noise,
}

/// Builds the masked training images for a removal: each removed object's
/// ROI is masked in its home sample. Untouched samples are shared as-is.
fn masked_images(
    dataset: &Dataset,
    removal: &RemovalSet,
    kind: MaskKind,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Image>, UnlearnError> {
    let size = dataset.image_size();
    let mut images: Vec<Image> = dataset.train_indices()
        .map(|si| dataset.samples[si].image.clone())
        .collect();
    for id in removal.expanded_object_ids(dataset) {
        let (si, ni) = dataset
            .find_object(&id)
            .ok_or_else(|| UnlearnError::UnknownObjectId(id.clone()))?;
        if si >= dataset.train_count {
            continue;
        }
        let node = &dataset.samples[si].graph.nodes[ni];
        let roi = roi_of(node, size, size)?;
        images[si] = match kind {
            MaskKind::Patch => apply_patch_mask(&images[si], &roi)?,
            MaskKind::Noise => {
                let noise_seed =
                    crate::util::splitmix64(seed ^ crate::util::hash_str(&id) ^ 0x4015E);
                apply_noise_mask(&images[si], &roi, sigma, noise_seed)?
            }
        };
    }
    Ok(images)
}

/// Mask-based fine-tuning: the masked image is both condition and target.
/// Object scope masks the requested objects' home-ROI, feature scope
/// masks every same-category ROI across the training split. Sample scope
/// is handled by the sample methods instead.
pub fn masked_finetune(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
    kind: MaskKind,
    mcfg: &MethodConfig,
    tcfg: &TrainConfig,
) -> Result<(GeneratorModel, TrainLog), UnlearnError> {
    if removal.scope == Scope::Sample {
        return Err(UnlearnError::IncompatibleScope {
            method: "masked_finetune".into(),
            scope: removal.scope,
        });
    }
    let images = masked_images(dataset, removal, kind, mcfg.sigma_noise, tcfg.seed)?;
    let items: Vec<TrainItem> = dataset.train_indices()
        .map(|si| {
            let img = &images[si];
            TrainItem {
                graph: dataset.samples[si].graph.clone(),
                cond: img.clone(),
                target: img.clone(),
                ng: Vec::new(),
            }
        })
        .collect();
    let mut out = model.clone();
    let log = finetune(&mut out, &items, &ft_spec(mcfg, tcfg, 0.0))?;
    Ok((out, log))
}

// ---- influence-function redaction ----

/// ROI-restricted reconstruction loss: the sum of l over the removed
/// objects' regions. Pixels outside the regions contribute nothing.
pub fn roi_restricted_loss(
    tape: &mut Tape,
    output: Var,
    target: Var,
    rois: &[PixelRect],
) -> Result<Var, UnlearnError> {
    assert!(!rois.is_empty(), "roi_restricted_loss needs regions");
    let mut acc: Option<Var> = None;
    for r in rois {
        let ranges = [(0, 3), (r.y0, r.y1), (r.x0, r.x1)];
        let o = tape.slice(output, &ranges)?;
        let t = tape.slice(target, &ranges)?;
        let l = recon_loss(tape, o, t)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(acc.unwrap())
}

/// The two terms of the influence estimate: the removal loss evaluated
/// with z_v zeroed on the removed objects, and with the unmodified
/// forward, both restricted to the removed objects' ROIs and summed over
/// the samples containing them. Gradients are in flat parameter order.
pub struct RemovalLossParts {
    pub loss_zeroed: f64,
    pub loss_orig: f64,
    pub grad_zeroed: Vec<f64>,
    pub grad_orig: Vec<f64>,
}

impl RemovalLossParts {
    /// g = grad(zeroed) - grad(orig), the right-hand side of the solve.
    pub fn gradient_difference(&self) -> Vec<f64> {
        self.grad_zeroed
            .iter()
            .zip(&self.grad_orig)
            .map(|(a, b)| a - b)
            .collect()
    }
}

pub fn influence_removal_loss(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
) -> Result<RemovalLossParts, UnlearnError> {
    if removal.scope == Scope::Sample {
        return Err(UnlearnError::IncompatibleScope {
            method: "influence_removal_loss".into(),
            scope: removal.scope,
        });
    }
    let ids = removal.expanded_object_ids(dataset);
    let n_params = model.params.len();
    let mut parts = RemovalLossParts {
        loss_zeroed: 0.0,
        loss_orig: 0.0,
        grad_zeroed: vec![0.0; n_params],
        grad_orig: vec![0.0; n_params],
    };
    if ids.is_empty() {
        return Ok(parts);
    }
    let size = dataset.image_size();

    // Home samples and their removed-object ROI lists.
    let mut per_sample: std::collections::BTreeMap<usize, (Vec<String>, Vec<PixelRect>)> =
        Default::default();
    for id in &ids {
        let (si, ni) = dataset
            .find_object(id)
            .ok_or_else(|| UnlearnError::UnknownObjectId(id.clone()))?;
        if si >= dataset.train_count {
            continue;
        }
        let node = &dataset.samples[si].graph.nodes[ni];
        let entry = per_sample.entry(si).or_default();
        entry.0.push(id.clone());
        entry.1.push(roi_of(node, size, size)?);
    }

    for (si, (sample_ids, rois)) in &per_sample {
        let sample = &dataset.samples[*si];
        for zeroed in [true, false] {
            let mut tape = Tape::new();
            let plan = if zeroed {
                ScenePlan::zeroed(&sample.graph, sample_ids.iter().map(|s| s.as_str()))
            } else {
                ScenePlan::reconstruction(&sample.graph)
            };
            let fwd = forward_scene(model, &mut tape, &sample.graph, Some(&sample.image), &plan)?;
            let target = tape.constant(Tensor::new(
                vec![3, size, size],
                sample.image.to_f64_chw(),
            ));
            let loss = roi_restricted_loss(&mut tape, fwd.output, target, rois)?;
            let lval = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let flat = model.params.flat_gradient(&tape, &grads);
            if zeroed {
                parts.loss_zeroed += lval;
                for (a, b) in parts.grad_zeroed.iter_mut().zip(&flat) {
                    *a += b;
                }
            } else {
                parts.loss_orig += lval;
                for (a, b) in parts.grad_orig.iter_mut().zip(&flat) {
                    *a += b;
                }
            }
        }
    }
    Ok(parts)
}

/// Gradient of the full training loss L_D (no dropout, no guidance) at an
/// arbitrary flat parameter vector, summed over the training split.
fn training_loss_gradient(
    model: &GeneratorModel,
    dataset: &Dataset,
    theta: &[f64],
) -> Vec<f64> {
    let mut probe = model.clone();
    probe.params.unflatten(theta);
    let size = dataset.image_size();
    let grads: Vec<Vec<f64>> = dataset.train_indices()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&si| {
            let sample = &dataset.samples[si];
            let mut tape = Tape::new();
            let plan = ScenePlan::reconstruction(&sample.graph);
            let fwd =
                forward_scene(&probe, &mut tape, &sample.graph, Some(&sample.image), &plan)
                    .expect("forward failed during HVP probe");
            let target = tape.constant(Tensor::new(
                vec![3, size, size],
                sample.image.to_f64_chw(),
            ));
            let loss = recon_loss(&mut tape, fwd.output, target)
                .expect("loss failed during HVP probe");
            let g = tape.backward(loss).expect("backward failed during HVP probe");
            probe.params.flat_gradient(&tape, &g)
        })
        .collect();
    let mut out = vec![0.0; theta.len()];
    for g in grads {
        for (o, v) in out.iter_mut().zip(&g) {
            *o += v;
        }
    }
    out
}

/// The influence direction: CG-solves (H + damping I) dtheta = g over
/// HVPs of the training loss, restricted to the target partitions.
/// Returns dtheta in the full flat layout (zeros outside the targets) so
/// one solve can serve a whole lambda sweep.
pub fn influence_delta(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
    mcfg: &MethodConfig,
) -> Result<(Vec<f64>, CgDiagnostics), UnlearnError> {
    let noop = CgDiagnostics {
        iterations: 0,
        residual: 0.0,
        converged: true,
    };
    let n = model.params.len();
    if removal.is_empty() {
        return Ok((vec![0.0; n], noop));
    }
    let parts = influence_removal_loss(model, dataset, removal)?;
    let g_full = parts.gradient_difference();

    let mask = model.params.partition_mask(&mcfg.target_partitions);
    let selected: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    let g_sub: Vec<f64> = selected.iter().map(|&i| g_full[i]).collect();
    if g_sub.iter().all(|v| *v == 0.0) {
        return Ok((vec![0.0; n], noop));
    }

    let theta = model.params.flatten();
    let eps = default_hvp_epsilon(&theta);
    let theta_ref = &theta;
    let selected_ref = &selected;
    let apply_h = |v_sub: &[f64]| -> Vec<f64> {
        let mut v_full = vec![0.0; theta_ref.len()];
        for (k, &i) in selected_ref.iter().enumerate() {
            v_full[i] = v_sub[k];
        }
        let grad_fn = |t: &[f64]| training_loss_gradient(model, dataset, t);
        let hv = hessian_vector_product(grad_fn, theta_ref, &v_full, eps)
            .expect("hvp dimension mismatch is impossible here");
        selected_ref.iter().map(|&i| hv[i]).collect()
    };

    let sol = conjugate_gradient_solve(
        apply_h,
        &g_sub,
        mcfg.cg_damping,
        mcfg.cg_tol,
        mcfg.cg_max_iter,
    )?;
    let mut delta = vec![0.0; n];
    for (k, &i) in selected.iter().enumerate() {
        delta[i] = sol.x[k];
    }
    Ok((
        delta,
        CgDiagnostics {
            iterations: sol.iterations,
            residual: sol.residual,
            converged: sol.converged,
        },
    ))
}

/// Applies theta' = theta* + lambda * dtheta.
pub fn apply_redaction(model: &GeneratorModel, delta: &[f64], lambda: f64) -> GeneratorModel {
    let mut theta = model.params.flatten();
    for (t, d) in theta.iter_mut().zip(delta) {
        *t += lambda * d;
    }
    let mut out = model.clone();
    out.params.unflatten(&theta);
    out
}

/// Influence-function partial redaction: theta' = theta* + lambda_redact
/// times the solved influence direction, applied only inside the target
/// partitions; every other partition is byte-identical. lambda_redact = 0
/// and an empty removal both return theta* bit-exact.
pub fn influence_redact(
    model: &GeneratorModel,
    dataset: &Dataset,
    removal: &RemovalSet,
    mcfg: &MethodConfig,
) -> Result<(GeneratorModel, CgDiagnostics), UnlearnError> {
    if mcfg.lambda_redact == 0.0 || removal.is_empty() {
        let noop = CgDiagnostics {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
        return Ok((model.clone(), noop));
    }
    let (delta, diag) = influence_delta(model, dataset, removal, mcfg)?;
    if delta.iter().all(|v| *v == 0.0) {
        return Ok((model.clone(), diag));
    }
    Ok((apply_redaction(model, &delta, mcfg.lambda_redact), diag))
}

// ---- retrain oracle ----

/// Gold-standard exact unlearning: train from scratch with the removal
/// applied at the data level (samples dropped, or object/category ROIs
/// patch-masked at the source), same seed and protocol as `train`.
pub fn retrain_exact(
    dataset: &Dataset,
    removal: &RemovalSet,
    tcfg: &TrainConfig,
) -> Result<(GeneratorModel, TrainLog), UnlearnError> {
    let mut model = GeneratorModel::init(dataset.image_size(), &dataset.vocab, tcfg.seed);
    let items: Vec<TrainItem> = match removal.scope {
        Scope::Sample => plain_items(dataset, &removal.sample_indices),
        Scope::Object | Scope::Feature => {
            let images = masked_images(dataset, removal, MaskKind::Patch, 0.0, tcfg.seed)?;
            dataset.train_indices()
                .map(|si| TrainItem {
                    graph: dataset.samples[si].graph.clone(),
                    cond: images[si].clone(),
                    target: images[si].clone(),
                    ng: Vec::new(),
                })
                .collect()
        }
    };
    let log = run_training(&mut model, &items, &RunSpec::from_train(tcfg))?;
    Ok((model, log))
}

// ---- method dispatch ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodId {
    SampleFt,
    SampleNg,
    FeatIf,
    FeatNg,
    FeatMk,
    ObjIf,
    ObjNg,
    ObjMkPa,
    ObjMkNs,
}

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        MethodId::SampleFt,
        MethodId::SampleNg,
        MethodId::FeatIf,
        MethodId::FeatNg,
        MethodId::FeatMk,
        MethodId::ObjIf,
        MethodId::ObjNg,
        MethodId::ObjMkPa,
        MethodId::ObjMkNs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodId::SampleFt => "Sample-FT",
            MethodId::SampleNg => "Sample-NG",
            MethodId::FeatIf => "Feat-IF",
            MethodId::FeatNg => "Feat-NG",
            MethodId::FeatMk => "Feat-MK",
            MethodId::ObjIf => "Obj-IF",
            MethodId::ObjNg => "Obj-NG",
            MethodId::ObjMkPa => "Obj-MK-PA",
            MethodId::ObjMkNs => "Obj-MK-NS",
        }
    }

    pub fn parse(s: &str) -> Option<MethodId> {
        MethodId::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// The scope this method forces.
    pub fn scope(&self) -> Scope {
        match self {
            MethodId::SampleFt | MethodId::SampleNg => Scope::Sample,
            MethodId::FeatIf | MethodId::FeatNg | MethodId::FeatMk => Scope::Feature,
            MethodId::ObjIf | MethodId::ObjNg | MethodId::ObjMkPa | MethodId::ObjMkNs => {
                Scope::Object
            }
        }
    }

    /// Method class for the runtime comparison table.
    pub fn class(&self) -> &'static str {
        match self {
            MethodId::FeatIf | MethodId::ObjIf => "Redaction",
            _ => "Fine-tune",
        }
    }
}

/// Outcome of one method run.
pub struct MethodRun {
    pub method: MethodId,
    pub model: GeneratorModel,
    pub removal: RemovalSet,
    /// Wall time of the unlearning call only.
    pub wall_ms: u64,
    pub cg: Option<CgDiagnostics>,
    pub log: Option<TrainLog>,
}

/// Dispatches one of the nine methods. The request's scope must match the
/// scope the method forces.
pub fn run_method(
    method: MethodId,
    model: &GeneratorModel,
    dataset: &Dataset,
    request: &UnlearnRequest,
    mcfg: &MethodConfig,
    tcfg: &TrainConfig,
) -> Result<MethodRun, UnlearnError> {
    if request.scope != method.scope() {
        return Err(UnlearnError::IncompatibleScope {
            method: method.name().into(),
            scope: request.scope,
        });
    }
    let removal = select_removal(request, dataset)?;
    let t0 = std::time::Instant::now();
    let (out, cg, log) = match method {
        MethodId::SampleFt => {
            let (m, log) = exclusion_finetune(model, dataset, &removal, mcfg, tcfg)?;
            (m, None, Some(log))
        }
        MethodId::SampleNg | MethodId::FeatNg | MethodId::ObjNg => {
            let (m, log) = negative_guidance_finetune(model, dataset, &removal, mcfg, tcfg)?;
            (m, None, Some(log))
        }
        MethodId::FeatMk | MethodId::ObjMkPa => {
            let (m, log) = masked_finetune(model, dataset, &removal, MaskKind::Patch, mcfg, tcfg)?;
            (m, None, Some(log))
        }
        MethodId::ObjMkNs => {
            let (m, log) = masked_finetune(model, dataset, &removal, MaskKind::Noise, mcfg, tcfg)?;
            (m, None, Some(log))
        }
        MethodId::FeatIf | MethodId::ObjIf => {
            let (m, cg) = influence_redact(model, dataset, &removal, mcfg)?;
            (m, Some(cg), None)
        }
    };
    Ok(MethodRun {
        method,
        model: out,
        removal,
        wall_ms: t0.elapsed().as_millis() as u64,
        cg,
        log,
    })
}

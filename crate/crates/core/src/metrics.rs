//! Image-similarity primitives (MAE, windowed SSIM, a fixed-random-feature
//! perceptual proxy) and the A1/A2/A3 evaluation grid: divergence on the
//! unlearned objects, preservation of retained objects in the same
//! samples, and preservation of same-category objects in other samples.
//!
//! True LPIPS needs pretrained perceptual weights; the proxy keeps the
//! "perceptual distance" role with a frozen orthogonal-initialized conv
//! feature stack, so every value is reproducible forever. Outputs label
//! the column LP(proxy).

use crate::img::{crop_resize_f64, resize_bilinear_f64, Image};
use crate::model::{reconstruct, synthesize, GeneratorModel, ModelError, Task};
use crate::scene_graph::{roi_of, GraphError};
use crate::synth::Dataset;
use crate::unlearn::UnlearnRequest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 6.5025; // (0.01 * 255)^2
pub const SSIM_C2: f64 = 58.5225; // (0.03 * 255)^2

/// Patch side for resize-before-SSIM/proxy comparisons.
pub const ROI_RESIZE: usize = 16;

const PROXY_SEED: u64 = 0xC0FFEE;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image too small: {0}x{1}, need at least {2}")]
    TooSmall(usize, usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean absolute difference over all channels, in 8-bit units.
pub fn mae(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::ShapeMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(a.mae_u8(b))
}

fn to_gray(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
        .collect()
}

/// Mean local SSIM over sliding 8x8 windows (stride 1) on the channel-mean
/// grayscale image, standard constants, luminance-contrast-structure
/// product form.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::ShapeMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.width, a.height, SSIM_WINDOW));
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    Ok(ssim_gray(&ga, &gb, a.width, a.height))
}

fn ssim_gray(ga: &[f64], gb: &[f64], w: usize, h: usize) -> f64 {
    let win = SSIM_WINDOW;
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let va = ga[y * w + x];
                    let vb = gb[y * w + x];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Frozen random conv features for the perceptual proxy: three stride-2
/// 3x3 layers with relu, orthogonal-initialized from a fixed seed.
/// (plane data, channels, height, width) per proxy layer.
type FeatureMap = (Vec<f64>, usize, usize, usize);

struct ProxyNet {
    kernels: Vec<Vec<f64>>,
    channels: Vec<(usize, usize)>,
}

impl ProxyNet {
    fn new() -> Self {
        let channels = vec![(3usize, 8usize), (8, 16), (16, 32)];
        let mut rng = ChaCha8Rng::seed_from_u64(PROXY_SEED);
        let kernels = channels
            .iter()
            .map(|&(c_in, c_out)| orthogonal_rows(c_out, c_in * 9, &mut rng))
            .collect();
        ProxyNet { kernels, channels }
    }

    /// Feature maps after each layer; input planar [3, H, W] in [0, 1].
    fn features(&self, mut x: Vec<f64>, mut h: usize, mut w: usize) -> Vec<FeatureMap> {
        let mut out = Vec::new();
        for (layer, &(c_in, c_out)) in self.channels.iter().enumerate() {
            let (oh, ow) = (h / 2, w / 2);
            let mut y = vec![0.0; c_out * oh * ow];
            let k = &self.kernels[layer];
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (cy, cx) = (oy * 2, ox * 2);
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let sy = cy as isize + ky as isize - 1;
                                    let sx = cx as isize + kx as isize - 1;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        acc += x[ci * h * w + sy as usize * w + sx as usize]
                                            * k[(co * c_in + ci) * 9 + ky * 3 + kx];
                                    }
                                }
                            }
                        }
                        y[co * oh * ow + oy * ow + ox] = acc.max(0.0);
                    }
                }
            }
            out.push((y.clone(), c_out, oh, ow));
            x = y;
            h = oh;
            w = ow;
        }
        out
    }
}

fn orthogonal_rows<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    assert!(rows <= cols);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect();
    for i in 0..rows {
        for j in 0..i {
            let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let mj = m[j].clone();
            for (vi, vj) in m[i].iter_mut().zip(&mj) {
                *vi -= d * vj;
            }
        }
        let norm: f64 = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m[i].iter_mut() {
            *v /= norm.max(1e-12);
        }
    }
    m.into_iter().flatten().collect()
}

fn proxy_net() -> &'static ProxyNet {
    use std::sync::OnceLock;
    static NET: OnceLock<ProxyNet> = OnceLock::new();
    NET.get_or_init(ProxyNet::new)
}

/// Perceptual distance proxy in [0, 1]: per layer, unit-normalize the
/// channel vector at each spatial position, take the mean squared distance
/// (maximum 4) over positions, then average the three layers.
pub fn perceptual_proxy(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::ShapeMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    if a.width < 16 || a.height < 16 {
        return Err(MetricError::TooSmall(a.width, a.height, 16));
    }
    let net = proxy_net();
    let fa = net.features(a.to_f64_chw(), a.height, a.width);
    let fb = net.features(b.to_f64_chw(), b.height, b.width);
    let mut layer_sum = 0.0;
    for ((ya, c, h, w), (yb, _, _, _)) in fa.iter().zip(&fb) {
        let mut pos_sum = 0.0;
        for y in 0..*h {
            for x in 0..*w {
                let idx = |ch: usize| ch * h * w + y * w + x;
                let na: f64 = (0..*c).map(|ch| ya[idx(ch)] * ya[idx(ch)]).sum::<f64>().sqrt();
                let nb: f64 = (0..*c).map(|ch| yb[idx(ch)] * yb[idx(ch)]).sum::<f64>().sqrt();
                let mut d2 = 0.0;
                for ch in 0..*c {
                    let ua = ya[idx(ch)] / na.max(1e-12);
                    let ub = yb[idx(ch)] / nb.max(1e-12);
                    d2 += (ua - ub) * (ua - ub);
                }
                pos_sum += d2;
            }
        }
        layer_sum += pos_sum / (h * w) as f64 / 4.0;
    }
    Ok(layer_sum / fa.len() as f64)
}

/// Crop the node's ROI and bilinearly resize to out x out.
pub fn extract_roi_resized(
    image: &Image,
    node: &crate::scene_graph::ObjectNode,
    out_size: usize,
) -> Result<Image, MetricError> {
    let rect = roi_of(node, image.width, image.height)?;
    let f = crop_resize_f64(image, &rect, out_size);
    Ok(Image::from_f64_chw(&f, out_size, out_size))
}

fn resize_image(img: &Image, out: usize) -> Image {
    let f = resize_bilinear_f64(&img.to_f64_chw(), 3, img.height, img.width, out, out);
    Image::from_f64_chw(&f, out, out)
}

/// One A-dimension: mean SSIM / LP(proxy) / MAE over qualifying objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionScores {
    pub ssim: f64,
    pub lp: f64,
    pub mae: f64,
    pub count: usize,
}

impl DimensionScores {
    pub const EMPTY: DimensionScores = DimensionScores {
        ssim: f64::NAN,
        lp: f64::NAN,
        mae: f64::NAN,
        count: 0,
    };

    /// EmptyDimension: no qualifying objects (reported, not fatal).
    pub fn is_empty_dimension(&self) -> bool {
        self.count == 0
    }
}

/// The full metric grid for one (method, task) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub task: Task,
    pub a1: DimensionScores,
    pub a2: DimensionScores,
    pub a3: DimensionScores,
    /// Wall time of the evaluation itself.
    pub wall_ms: u64,
}

impl MetricReport {
    pub fn c_a1_ssim(&self) -> f64 {
        1.0 - self.a1.ssim
    }
    pub fn c_a2_lp(&self) -> f64 {
        1.0 - self.a2.lp
    }
    pub fn c_a2_mae(&self) -> f64 {
        255.0 - self.a2.mae
    }
    pub fn c_a3_lp(&self) -> f64 {
        1.0 - self.a3.lp
    }
    pub fn c_a3_mae(&self) -> f64 {
        255.0 - self.a3.mae
    }

    pub fn csv_header() -> &'static str {
        "method,task,A1_SSIM,A1_LP,A1_MAE,A2_SSIM,A2_LP,A2_MAE,A3_SSIM,A3_LP,A3_MAE,cA1_SSIM,cA2_LP,cA2_MAE,cA3_LP,cA3_MAE,n_A1,n_A2,n_A3,wall_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.task.name(),
            self.a1.ssim,
            self.a1.lp,
            self.a1.mae,
            self.a2.ssim,
            self.a2.lp,
            self.a2.mae,
            self.a3.ssim,
            self.a3.lp,
            self.a3.mae,
            self.c_a1_ssim(),
            self.c_a2_lp(),
            self.c_a2_mae(),
            self.c_a3_lp(),
            self.c_a3_mae(),
            self.a1.count,
            self.a2.count,
            self.a3.count,
            self.wall_ms
        )
    }
}

/// (sample index, node index) pairs of one metric dimension.
pub type ObjectRefs = Vec<(usize, usize)>;

/// Object populations at object scope: A1 = the requested objects; A2 =
/// retained (non-pad, non-requested) objects of the same samples; A3 =
/// same-category objects in samples not containing any requested object.
pub fn grid_populations(
    dataset: &Dataset,
    sample_indices: &[usize],
    request: &UnlearnRequest,
) -> (ObjectRefs, ObjectRefs, ObjectRefs) {
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    let mut a3 = Vec::new();
    let requested_cats: std::collections::BTreeSet<String> = request
        .object_ids
        .iter()
        .filter_map(|id| {
            dataset
                .find_object(id)
                .map(|(si, ni)| dataset.samples[si].graph.nodes[ni].category.clone())
        })
        .collect();
    for &si in sample_indices {
        let graph = &dataset.samples[si].graph;
        let has_requested = graph
            .non_pad_nodes()
            .any(|n| request.object_ids.contains(&n.id));
        for (ni, node) in graph.nodes.iter().enumerate() {
            if node.is_pad() {
                continue;
            }
            if request.object_ids.contains(&node.id) {
                a1.push((si, ni));
            } else if has_requested {
                a2.push((si, ni));
            } else if requested_cats.contains(node.category.as_str()) {
                a3.push((si, ni));
            }
        }
    }
    (a1, a2, a3)
}

fn generate_for_task(
    model: &GeneratorModel,
    dataset: &Dataset,
    si: usize,
    task: Task,
) -> Result<Image, ModelError> {
    let s = &dataset.samples[si];
    match task {
        Task::Reconstruction => reconstruct(model, &s.image, &s.graph),
        Task::Synthesis => synthesize(model, &s.graph),
    }
}

/// Compares the two models' outputs object-by-object over the metric
/// grid. SSIM and the proxy score resized patches, MAE scores the raw
/// ROI. A3 is averaged within each sample first, then across samples.
pub fn evaluate_a1a2a3(
    model_orig: &GeneratorModel,
    model_unl: &GeneratorModel,
    dataset: &Dataset,
    sample_indices: &[usize],
    request: &UnlearnRequest,
    task: Task,
    method: &str,
) -> Result<MetricReport, MetricError> {
    use rayon::prelude::*;
    let t0 = std::time::Instant::now();
    let (a1_pop, a2_pop, a3_pop) = grid_populations(dataset, sample_indices, request);

    let mut needed: Vec<usize> = a1_pop
        .iter()
        .chain(&a2_pop)
        .chain(&a3_pop)
        .map(|(si, _)| *si)
        .collect();
    needed.sort_unstable();
    needed.dedup();

    let outputs: Result<Vec<(usize, Image, Image)>, MetricError> = needed
        .par_iter()
        .map(|&si| {
            let orig = generate_for_task(model_orig, dataset, si, task)?;
            let unl = generate_for_task(model_unl, dataset, si, task)?;
            Ok((si, orig, unl))
        })
        .collect();
    let outputs = outputs?;
    let of = |si: usize| -> &(usize, Image, Image) {
        &outputs[outputs.binary_search_by_key(&si, |o| o.0).unwrap()]
    };

    let score_object = |si: usize, ni: usize| -> Result<(f64, f64, f64), MetricError> {
        let node = &dataset.samples[si].graph.nodes[ni];
        let (_, orig, unl) = of(si);
        let rect = roi_of(node, orig.width, orig.height)?;
        let patch_o = resize_image(&orig.crop(&rect), ROI_RESIZE);
        let patch_u = resize_image(&unl.crop(&rect), ROI_RESIZE);
        let s = ssim(&patch_o, &patch_u)?;
        let lp = perceptual_proxy(&patch_o, &patch_u)?;
        let m = mae(&orig.crop(&rect), &unl.crop(&rect))?;
        Ok((s, lp, m))
    };

    let mean_flat = |pop: &[(usize, usize)]| -> Result<DimensionScores, MetricError> {
        if pop.is_empty() {
            return Ok(DimensionScores::EMPTY);
        }
        let mut acc = (0.0, 0.0, 0.0);
        for &(si, ni) in pop {
            let (s, lp, m) = score_object(si, ni)?;
            acc = (acc.0 + s, acc.1 + lp, acc.2 + m);
        }
        let n = pop.len() as f64;
        Ok(DimensionScores {
            ssim: acc.0 / n,
            lp: acc.1 / n,
            mae: acc.2 / n,
            count: pop.len(),
        })
    };

    // A3: mean of per-sample means, so samples weigh equally.
    let mean_per_sample = |pop: &[(usize, usize)]| -> Result<DimensionScores, MetricError> {
        if pop.is_empty() {
            return Ok(DimensionScores::EMPTY);
        }
        let mut by_sample: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &(si, ni) in pop {
            by_sample.entry(si).or_default().push(ni);
        }
        let mut acc = (0.0, 0.0, 0.0);
        for (si, nis) in &by_sample {
            let mut s_acc = (0.0, 0.0, 0.0);
            for &ni in nis {
                let (s, lp, m) = score_object(*si, ni)?;
                s_acc = (s_acc.0 + s, s_acc.1 + lp, s_acc.2 + m);
            }
            let k = nis.len() as f64;
            acc = (
                acc.0 + s_acc.0 / k,
                acc.1 + s_acc.1 / k,
                acc.2 + s_acc.2 / k,
            );
        }
        let n = by_sample.len() as f64;
        Ok(DimensionScores {
            ssim: acc.0 / n,
            lp: acc.1 / n,
            mae: acc.2 / n,
            count: pop.len(),
        })
    };

    let a1 = mean_flat(&a1_pop)?;
    let a2 = mean_flat(&a2_pop)?;
    let a3 = mean_per_sample(&a3_pop)?;
    Ok(MetricReport {
        method: method.to_string(),
        task,
        a1,
        a2,
        a3,
        wall_ms: t0.elapsed().as_millis() as u64,
    })
}

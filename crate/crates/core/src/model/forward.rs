//! Generator forward pass: per-object embeddings, GRL message passing,
//! layout composition, and image decoding, all recorded on a tape so the
//! same code path serves evaluation and training.

use super::{GeneratorModel, ModelError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::img::{crop_resize_f64, Image};
use crate::scene_graph::{roi_of, BBox, GraphError, ObjectNode, PixelRect, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// The two generation pathways used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Synthesis,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Synthesis => "synthesis",
        }
    }
}

/// Where each node's visual embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZvSource {
    /// Encode the ROI crop of the conditioning image.
    FromImage,
    /// The learned per-category unknown vector (synthesis pathway).
    Unknown,
    /// A zero vector (influence-function removal surrogate).
    Zero,
    /// NaN vector; proves a pathway never consumes z_v.
    Poison,
}

/// Per-node z_v source plan. Pad nodes are skipped regardless.
#[derive(Debug, Clone)]
pub struct ScenePlan {
    sources: Vec<ZvSource>,
}

impl ScenePlan {
    pub fn reconstruction(graph: &SceneGraph) -> Self {
        ScenePlan {
            sources: vec![ZvSource::FromImage; graph.nodes.len()],
        }
    }

    pub fn synthesis(graph: &SceneGraph) -> Self {
        ScenePlan {
            sources: vec![ZvSource::Unknown; graph.nodes.len()],
        }
    }

    /// Reconstruction with z_v zeroed for the given object ids.
    pub fn zeroed<'a, I: IntoIterator<Item = &'a str>>(graph: &SceneGraph, ids: I) -> Self {
        let ids: std::collections::HashSet<&str> = ids.into_iter().collect();
        ScenePlan {
            sources: graph
                .nodes
                .iter()
                .map(|n| {
                    if ids.contains(n.id.as_str()) {
                        ZvSource::Zero
                    } else {
                        ZvSource::FromImage
                    }
                })
                .collect(),
        }
    }

    /// Training plan: each non-pad node falls back to the unknown vector
    /// with probability `rate` (this is what trains synthesis).
    pub fn dropout<R: rand::Rng>(graph: &SceneGraph, rate: f64, rng: &mut R) -> Self {
        ScenePlan {
            sources: graph
                .nodes
                .iter()
                .map(|n| {
                    if !n.is_pad() && rng.gen_range(0.0..1.0) < rate {
                        ZvSource::Unknown
                    } else {
                        ZvSource::FromImage
                    }
                })
                .collect(),
        }
    }

    /// Every non-pad node gets a NaN z_v; a pathway that reads z_v cannot
    /// produce finite output under this plan.
    pub fn poisoned(graph: &SceneGraph) -> Self {
        ScenePlan {
            sources: vec![ZvSource::Poison; graph.nodes.len()],
        }
    }

    pub fn source(&self, node_index: usize) -> ZvSource {
        self.sources[node_index]
    }
}

pub struct SceneForward {
    /// Decoded image tensor [3, H, W] in [0, 1].
    pub output: Var,
    /// Refined per-node embeddings after the GRL; None for pad nodes.
    pub refined: Vec<Option<Var>>,
}

fn col(tape: &mut Tape, v: Var) -> Var {
    let n = tape.value(v).len();
    tape.reshape(v, vec![n, 1]).expect("column reshape")
}

fn linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var, ModelError> {
    let wx = tape.matmul(w, x)?;
    let bc = col(tape, b);
    Ok(tape.add(wx, bc)?)
}

fn p(tape: &Tape, name: &str) -> Var {
    tape.param_var(name)
        .unwrap_or_else(|| panic!("parameter {name} not bound"))
}

fn ensure_bound(model: &GeneratorModel, tape: &mut Tape) {
    if tape.param_var("enc.fc.w").is_none() {
        model.params.bind(tape);
    }
}

/// Crops the node's ROI, resizes to the encoder patch, and applies the
/// 2-conv + linear visual extractor. Deterministic given parameters.
pub fn encode_object_visual(
    model: &GeneratorModel,
    tape: &mut Tape,
    image: &Image,
    node: &ObjectNode,
) -> Result<Var, ModelError> {
    ensure_bound(model, tape);
    let d = &model.dims;
    let rect = roi_of(node, image.width, image.height)?;
    let patch = crop_resize_f64(image, &rect, d.enc_patch);
    let x = tape.constant(Tensor::new(vec![3, d.enc_patch, d.enc_patch], patch));
    let c1 = tape.conv2d(x, p(tape, "enc.conv1.w"), Some(p(tape, "enc.conv1.b")))?;
    let a1 = tape.leaky_relu(c1, 0.1);
    let c2 = tape.conv2d(a1, p(tape, "enc.conv2.w"), Some(p(tape, "enc.conv2.b")))?;
    let a2 = tape.leaky_relu(c2, 0.1);
    let flat_len = d.enc_channels * d.enc_patch * d.enc_patch;
    let flat = tape.reshape(a2, vec![flat_len, 1])?;
    linear(tape, p(tape, "enc.fc.w"), p(tape, "enc.fc.b"), flat)
}

/// Row `index` of an embedding table, as a column vector.
fn table_row(tape: &mut Tape, table: Var, index: usize) -> Result<Var, ModelError> {
    let cols = tape.value(table).shape()[1];
    let row = tape.slice(table, &[(index, index + 1), (0, cols)])?;
    Ok(col(tape, row))
}

/// Fused per-node embedding z_s = [z_v | z_b | z_o]; None for pads.
fn embed_scene(
    model: &GeneratorModel,
    tape: &mut Tape,
    graph: &SceneGraph,
    image: Option<&Image>,
    plan: &ScenePlan,
) -> Result<Vec<Option<Var>>, ModelError> {
    let d = &model.dims;
    let mut out = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.is_pad() {
            out.push(None);
            continue;
        }
        let cat = model
            .vocab
            .category_index(&node.category)
            .ok_or_else(|| GraphError::UnknownLabel {
                kind: "category",
                label: node.category.clone(),
            })?;
        let z_v = match plan.source(i) {
            ZvSource::FromImage => {
                let img = image.ok_or(ModelError::MissingImage)?;
                encode_object_visual(model, tape, img, node)?
            }
            ZvSource::Unknown => table_row(tape, p(tape, "emb.unknown_v"), cat)?,
            ZvSource::Zero => tape.constant(Tensor::zeros(vec![d.d_v, 1])),
            ZvSource::Poison => {
                tape.constant(Tensor::new(vec![d.d_v, 1], vec![f64::NAN; d.d_v]))
            }
        };
        let b = node.bbox;
        let bbox_in = tape.constant(Tensor::column(vec![
            b.x_left, b.y_top, b.x_right, b.y_bottom,
        ]));
        let z_b = linear(tape, p(tape, "emb.bbox.w"), p(tape, "emb.bbox.b"), bbox_in)?;
        let z_o = table_row(tape, p(tape, "emb.category"), cat)?;
        let z_s = tape.concat(&[z_v, z_b, z_o], 0)?;
        out.push(Some(z_s));
    }
    Ok(out)
}

/// Two rounds of message passing. Per edge an MLP consumes
/// [z_s(subject) | predicate embedding | z_s(object)] and emits one message
/// for each endpoint; node updates see [own | mean incoming], with a zero
/// message vector for isolated nodes.
fn grl_forward(
    model: &GeneratorModel,
    tape: &mut Tape,
    graph: &SceneGraph,
    embeddings: Vec<Option<Var>>,
) -> Result<Vec<Option<Var>>, ModelError> {
    let d = &model.dims;
    let index_of: HashMap<&str, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();

    let mut current = embeddings;
    for r in 0..d.grl_rounds {
        let w_e1 = p(tape, &format!("grl.r{r}.edge.l1.w"));
        let b_e1 = p(tape, &format!("grl.r{r}.edge.l1.b"));
        let w_e2 = p(tape, &format!("grl.r{r}.edge.l2.w"));
        let b_e2 = p(tape, &format!("grl.r{r}.edge.l2.b"));
        let w_n1 = p(tape, &format!("grl.r{r}.node.l1.w"));
        let b_n1 = p(tape, &format!("grl.r{r}.node.l1.b"));
        let w_n2 = p(tape, &format!("grl.r{r}.node.l2.w"));
        let b_n2 = p(tape, &format!("grl.r{r}.node.l2.b"));

        let mut incoming: Vec<Vec<Var>> = vec![Vec::new(); graph.nodes.len()];
        for edge in &graph.edges {
            let (si, oi) = (index_of[edge.s.as_str()], index_of[edge.o.as_str()]);
            let pred = model
                .vocab
                .predicate_index(&edge.p)
                .ok_or_else(|| GraphError::UnknownLabel {
                    kind: "predicate",
                    label: edge.p.clone(),
                })?;
            let zs_s = current[si].expect("edge endpoint is a pad node");
            let zs_o = current[oi].expect("edge endpoint is a pad node");
            let z_p = table_row(tape, p(tape, "emb.predicate"), pred)?;
            let joint = tape.concat(&[zs_s, z_p, zs_o], 0)?;
            let h = linear(tape, w_e1, b_e1, joint)?;
            let h = tape.relu(h);
            let msgs = linear(tape, w_e2, b_e2, h)?;
            let msg_s = tape.slice(msgs, &[(0, d.d_msg), (0, 1)])?;
            let msg_o = tape.slice(msgs, &[(d.d_msg, 2 * d.d_msg), (0, 1)])?;
            incoming[si].push(msg_s);
            incoming[oi].push(msg_o);
        }

        let mut next = Vec::with_capacity(current.len());
        for (i, zs) in current.iter().enumerate() {
            let Some(zs) = *zs else {
                next.push(None);
                continue;
            };
            let agg = if incoming[i].is_empty() {
                tape.constant(Tensor::zeros(vec![d.d_msg, 1]))
            } else {
                let mut acc = incoming[i][0];
                for m in &incoming[i][1..] {
                    acc = tape.add(acc, *m)?;
                }
                tape.scale(acc, 1.0 / incoming[i].len() as f64)
            };
            let joint = tape.concat(&[zs, agg], 0)?;
            let h = linear(tape, w_n1, b_n1, joint)?;
            let h = tape.relu(h);
            let updated = linear(tape, w_n2, b_n2, h)?;
            next.push(Some(updated));
        }
        current = next;
    }
    Ok(current)
}

/// Snaps a normalized bbox onto the layout grid, never degenerate: at
/// least one cell in each direction.
pub fn grid_rect(bbox: &BBox, map_size: usize) -> PixelRect {
    let m = map_size as f64;
    let x0 = ((bbox.x_left * m).floor().max(0.0) as usize).min(map_size - 1);
    let y0 = ((bbox.y_top * m).floor().max(0.0) as usize).min(map_size - 1);
    let x1 = ((bbox.x_right * m).ceil() as usize).clamp(x0 + 1, map_size);
    let y1 = ((bbox.y_bottom * m).ceil() as usize).clamp(y0 + 1, map_size);
    PixelRect { x0, y0, x1, y1 }
}

/// Projects each refined embedding to the layout channels and broadcasts
/// it into the node's grid rect; overlaps sum. A final channel carries the
/// background indicator: 1 outside every object rect.
fn layout_compose(
    model: &GeneratorModel,
    tape: &mut Tape,
    graph: &SceneGraph,
    refined: &[Option<Var>],
) -> Result<Var, ModelError> {
    let d = &model.dims;
    let m = d.map_size;
    let mut canvas: Option<Var> = None;
    let mut background = vec![1.0; m * m];
    for (node, var) in graph.nodes.iter().zip(refined) {
        let Some(var) = *var else {
            continue;
        };
        let proj = linear(tape, p(tape, "layout.proj.w"), p(tape, "layout.proj.b"), var)?;
        let rect = grid_rect(&node.bbox, m);
        let placed = tape.place_roi(proj, m, m, rect)?;
        canvas = Some(match canvas {
            None => placed,
            Some(c) => tape.add(c, placed)?,
        });
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                background[y * m + x] = 0.0;
            }
        }
    }
    let canvas = match canvas {
        Some(c) => c,
        None => tape.constant(Tensor::zeros(vec![d.layout_channels, m, m])),
    };
    let bg = tape.constant(Tensor::new(vec![1, m, m], background));
    Ok(tape.concat(&[canvas, bg], 0)?)
}

/// Conv stack with x2 nearest upsampling from the layout map to the image
/// resolution; output squashed into [0, 1] via 0.5 * (tanh + 1).
pub fn decode_feature_map(
    model: &GeneratorModel,
    tape: &mut Tape,
    canvas: Var,
) -> Result<Var, ModelError> {
    ensure_bound(model, tape);
    let d = &model.dims;
    let stages = d.upsample_stages();
    let mut x = tape.conv2d(canvas, p(tape, "dec.conv_in.w"), Some(p(tape, "dec.conv_in.b")))?;
    x = tape.relu(x);
    for s in 0..stages {
        x = tape.upsample2x(x)?;
        if s + 1 < stages {
            let w = p(tape, &format!("dec.stage{s}.w"));
            let b = p(tape, &format!("dec.stage{s}.b"));
            x = tape.conv2d(x, w, Some(b))?;
            x = tape.relu(x);
        }
    }
    x = tape.conv2d(x, p(tape, "dec.conv_out.w"), Some(p(tape, "dec.conv_out.b")))?;
    let t = tape.tanh(x);
    Ok(tape.affine(t, 0.5, 0.5))
}

/// Full pathway: embed, GRL, layout, decode.
pub fn forward_scene(
    model: &GeneratorModel,
    tape: &mut Tape,
    graph: &SceneGraph,
    image: Option<&Image>,
    plan: &ScenePlan,
) -> Result<SceneForward, ModelError> {
    ensure_bound(model, tape);
    let embeddings = embed_scene(model, tape, graph, image, plan)?;
    let refined = grl_forward(model, tape, graph, embeddings)?;
    let canvas = layout_compose(model, tape, graph, &refined)?;
    let output = decode_feature_map(model, tape, canvas)?;
    Ok(SceneForward { output, refined })
}

/// Reconstruction pathway: true z_v from the input image.
pub fn reconstruct(
    model: &GeneratorModel,
    image: &Image,
    graph: &SceneGraph,
) -> Result<Image, ModelError> {
    let mut tape = Tape::new();
    let plan = ScenePlan::reconstruction(graph);
    let fwd = forward_scene(model, &mut tape, graph, Some(image), &plan)?;
    let out = tape.value(fwd.output);
    Ok(Image::from_f64_chw(
        out.data(),
        model.dims.image_size,
        model.dims.image_size,
    ))
}

/// Synthesis pathway: z_v replaced by the learned per-category unknown
/// vector; the input image is never read.
pub fn synthesize(model: &GeneratorModel, graph: &SceneGraph) -> Result<Image, ModelError> {
    let mut tape = Tape::new();
    let plan = ScenePlan::synthesis(graph);
    let fwd = forward_scene(model, &mut tape, graph, None, &plan)?;
    let out = tape.value(fwd.output);
    Ok(Image::from_f64_chw(
        out.data(),
        model.dims.image_size,
        model.dims.image_size,
    ))
}

/// Negative-guidance region: the ROI reconstruction loss inside `rect` is
/// negated and weighted into the total loss.
#[derive(Debug, Clone, Copy)]
pub struct NgRegion {
    pub rect: PixelRect,
}

/// Reconstruction objective l = MSE + 0.1 * L1.
pub fn recon_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var, ModelError> {
    let mse = tape.mse_loss(a, b)?;
    let l1 = tape.l1_loss(a, b)?;
    let l1s = tape.scale(l1, 0.1);
    Ok(tape.add(mse, l1s)?)
}

/// Per-sample training loss: reconstruction of `target` conditioned on
/// `cond`, plus the negative-guidance term over `ng` regions. Returns the
/// loss Var and the (generator, negative-guidance) component values.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    model: &GeneratorModel,
    tape: &mut Tape,
    graph: &SceneGraph,
    cond: &Image,
    target: &Image,
    plan: &ScenePlan,
    ng: &[NgRegion],
    lambda_ng: f64,
) -> Result<(Var, f64, f64), ModelError> {
    let fwd = forward_scene(model, tape, graph, Some(cond), plan)?;
    let size = model.dims.image_size;
    let target_t = tape.constant(Tensor::new(vec![3, size, size], target.to_f64_chw()));
    let gen = recon_loss(tape, fwd.output, target_t)?;
    let gen_val = tape.value(gen).item();
    if ng.is_empty() || lambda_ng == 0.0 {
        return Ok((gen, gen_val, 0.0));
    }
    let mut ng_sum: Option<Var> = None;
    for region in ng {
        let r = region.rect;
        let ranges = [(0, 3), (r.y0, r.y1), (r.x0, r.x1)];
        let out_roi = tape.slice(fwd.output, &ranges)?;
        let tgt_roi = tape.slice(target_t, &ranges)?;
        let l = recon_loss(tape, out_roi, tgt_roi)?;
        ng_sum = Some(match ng_sum {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let ng_term = tape.scale(ng_sum.expect("nonempty ng"), -lambda_ng);
    let ng_val = tape.value(ng_term).item();
    let total = tape.add(gen, ng_term)?;
    Ok((total, gen_val, ng_val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{pad_graph, ObjectNode, RelationshipTriple};
    use crate::synth::{default_vocabulary, PAD_TARGET};

    fn test_model() -> GeneratorModel {
        GeneratorModel::init(16, &default_vocabulary(), 42)
    }

    fn node(id: &str, category: &str, bbox: [f64; 4]) -> ObjectNode {
        ObjectNode {
            id: id.into(),
            category: category.into(),
            attributes: vec![],
            identity_key: 1,
            bbox: bbox.into(),
        }
    }

    fn scene(nodes: Vec<ObjectNode>, edges: Vec<RelationshipTriple>) -> SceneGraph {
        pad_graph(&SceneGraph::new(nodes, edges), PAD_TARGET).unwrap()
    }

    fn edge(s: &str, p: &str, o: &str) -> RelationshipTriple {
        RelationshipTriple {
            s: s.into(),
            p: p.into(),
            o: o.into(),
        }
    }

    fn checker_image(size: usize) -> Image {
        let mut img = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let v = if (x / 2 + y / 2) % 2 == 0 { 200 } else { 40 };
                img.set(x, y, [v, (x * 9) as u8, (y * 9) as u8]);
            }
        }
        img
    }

    #[test]
    fn encoder_is_deterministic() {
        let m = test_model();
        let img = checker_image(16);
        let n = node("o0", "girl", [0.1, 0.1, 0.6, 0.6]);
        let run = || {
            let mut tape = Tape::new();
            let v = encode_object_visual(&m, &mut tape, &img, &n).unwrap();
            tape.value(v).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_on_zero_image_matches_direct_evaluation() {
        // Independent oracle: hand-rolled conv/leaky/linear over the same
        // parameters, nested loops only.
        let m = test_model();
        let img = Image::new(16, 16); // all zeros
        let n = node("o0", "girl", [0.0, 0.0, 1.0, 1.0]);
        let mut tape = Tape::new();
        let got = encode_object_visual(&m, &mut tape, &img, &n).unwrap();
        let got = tape.value(got).data().to_vec();

        let d = &m.dims;
        let (ec, ep) = (d.enc_channels, d.enc_patch);
        let conv = |input: &[f64], c_in: usize, w: &[f64], b: &[f64], c_out: usize| -> Vec<f64> {
            let mut out = vec![0.0; c_out * ep * ep];
            for co in 0..c_out {
                for y in 0..ep as isize {
                    for x in 0..ep as isize {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for ky in -1isize..=1 {
                                for kx in -1isize..=1 {
                                    let (sy, sx) = (y + ky, x + kx);
                                    if sy >= 0 && sy < ep as isize && sx >= 0 && sx < ep as isize {
                                        acc += input[ci * ep * ep
                                            + sy as usize * ep
                                            + sx as usize]
                                            * w[(co * c_in + ci) * 9
                                                + (ky + 1) as usize * 3
                                                + (kx + 1) as usize];
                                    }
                                }
                            }
                        }
                        out[co * ep * ep + y as usize * ep + x as usize] = acc;
                    }
                }
            }
            out
        };
        let leaky = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x *= 0.1;
                }
            }
        };
        let zeros = vec![0.0; 3 * ep * ep];
        let w1 = m.params.get("enc.conv1.w").unwrap().data();
        let b1 = m.params.get("enc.conv1.b").unwrap().data();
        let mut h = conv(&zeros, 3, w1, b1, ec);
        leaky(&mut h);
        let w2 = m.params.get("enc.conv2.w").unwrap().data();
        let b2 = m.params.get("enc.conv2.b").unwrap().data();
        let mut h2 = conv(&h, ec, w2, b2, ec);
        leaky(&mut h2);
        let wf = m.params.get("enc.fc.w").unwrap().data();
        let bf = m.params.get("enc.fc.b").unwrap().data();
        let flat_len = ec * ep * ep;
        let expect: Vec<f64> = (0..d.d_v)
            .map(|o| {
                bf[o]
                    + (0..flat_len)
                        .map(|i| wf[o * flat_len + i] * h2[i])
                        .sum::<f64>()
            })
            .collect();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn pad_nodes_are_skipped_entirely() {
        // A pad-only scene forwards with no image at all: the encoder is
        // never invoked and the output is finite.
        let m = test_model();
        let g = scene(vec![], vec![]);
        let mut tape = Tape::new();
        let plan = ScenePlan::reconstruction(&g);
        let fwd = forward_scene(&m, &mut tape, &g, None, &plan).unwrap();
        assert!(fwd.refined.iter().all(|r| r.is_none()));
        assert!(tape.value(fwd.output).all_finite());
    }

    #[test]
    fn grl_without_edges_is_local() {
        // Perturbing the image inside node B's ROI must not change node A's
        // refined embedding when there are no edges.
        let m = test_model();
        let g = scene(
            vec![
                node("a", "girl", [0.05, 0.05, 0.4, 0.4]),
                node("b", "tree", [0.6, 0.6, 0.95, 0.95]),
            ],
            vec![],
        );
        let img1 = checker_image(16);
        let mut img2 = img1.clone();
        for y in 11..15 {
            for x in 11..15 {
                img2.set(x, y, [255, 0, 255]);
            }
        }
        let plan = ScenePlan::reconstruction(&g);
        let refined_a = |img: &Image| {
            let mut tape = Tape::new();
            let fwd = forward_scene(&m, &mut tape, &g, Some(img), &plan).unwrap();
            tape.value(fwd.refined[0].unwrap()).data().to_vec()
        };
        assert_eq!(refined_a(&img1), refined_a(&img2));
    }

    #[test]
    fn grl_is_permutation_equivariant() {
        let m = test_model();
        let nodes = vec![
            node("a", "girl", [0.05, 0.05, 0.4, 0.4]),
            node("b", "tree", [0.55, 0.1, 0.9, 0.45]),
            node("c", "car", [0.1, 0.55, 0.45, 0.9]),
        ];
        let edges = vec![edge("a", "left-of", "b"), edge("a", "above", "c")];
        let g1 = scene(nodes.clone(), edges.clone());
        let g2 = scene(vec![nodes[2].clone(), nodes[0].clone(), nodes[1].clone()], edges);
        let img = checker_image(16);
        let by_id = |g: &SceneGraph| -> HashMap<String, Vec<f64>> {
            let mut tape = Tape::new();
            let plan = ScenePlan::reconstruction(g);
            let fwd = forward_scene(&m, &mut tape, g, Some(&img), &plan).unwrap();
            g.nodes
                .iter()
                .zip(&fwd.refined)
                .filter_map(|(n, r)| r.map(|r| (n.id.clone(), tape.value(r).data().to_vec())))
                .collect()
        };
        let r1 = by_id(&g1);
        let r2 = by_id(&g2);
        assert_eq!(r1.len(), 3);
        for (id, v) in &r1 {
            let w = &r2[id];
            assert!(
                v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()),
                "embedding for {id} changed under permutation"
            );
        }
    }

    #[test]
    fn zeroing_z_v_changes_the_refined_embedding() {
        let m = test_model();
        let g = scene(vec![node("a", "girl", [0.1, 0.1, 0.7, 0.7])], vec![]);
        let img = checker_image(16);
        let run = |plan: &ScenePlan| {
            let mut tape = Tape::new();
            let fwd = forward_scene(&m, &mut tape, &g, Some(&img), plan).unwrap();
            tape.value(fwd.refined[0].unwrap()).data().to_vec()
        };
        let normal = run(&ScenePlan::reconstruction(&g));
        let zeroed = run(&ScenePlan::zeroed(&g, ["a"]));
        assert_ne!(normal, zeroed);
    }

    #[test]
    fn layout_empty_scene_is_pure_background() {
        let m = test_model();
        let g = scene(vec![], vec![]);
        let mut tape = Tape::new();
        m.params.bind(&mut tape);
        let refined = vec![None; g.nodes.len()];
        let canvas = layout_compose(&m, &mut tape, &g, &refined).unwrap();
        let v = tape.value(canvas);
        let (c, mm) = (m.dims.layout_channels, m.dims.map_size * m.dims.map_size);
        assert_eq!(v.shape(), &[c + 1, m.dims.map_size, m.dims.map_size]);
        assert!(v.data()[..c * mm].iter().all(|x| *x == 0.0));
        assert!(v.data()[c * mm..].iter().all(|x| *x == 1.0));
    }

    #[test]
    fn layout_overlap_sums_embeddings() {
        // Direct scatter oracle: project each refined embedding by hand and
        // scatter into rects; overlaps must equal the sum of both.
        let m = test_model();
        let g = scene(
            vec![
                node("a", "girl", [0.0, 0.0, 0.75, 0.75]),
                node("b", "tree", [0.25, 0.25, 1.0, 1.0]),
            ],
            vec![],
        );
        let img = checker_image(16);
        let mut tape = Tape::new();
        let plan = ScenePlan::reconstruction(&g);
        let fwd = forward_scene(&m, &mut tape, &g, Some(&img), &plan).unwrap();

        // Rebuild the canvas independently.
        let wp = m.params.get("layout.proj.w").unwrap().data();
        let bp = m.params.get("layout.proj.b").unwrap().data();
        let d_s = m.dims.d_s();
        let c_l = m.dims.layout_channels;
        let msize = m.dims.map_size;
        let proj = |r: &[f64]| -> Vec<f64> {
            (0..c_l)
                .map(|o| bp[o] + (0..d_s).map(|i| wp[o * d_s + i] * r[i]).sum::<f64>())
                .collect()
        };
        let mut expect = vec![0.0; (c_l + 1) * msize * msize];
        for cell in expect[c_l * msize * msize..].iter_mut() {
            *cell = 1.0;
        }
        for (n, r) in g.nodes.iter().zip(&fwd.refined) {
            let Some(r) = *r else { continue };
            let rv = proj(tape.value(r).data());
            let rect = grid_rect(&n.bbox, msize);
            for ch in 0..c_l {
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        expect[ch * msize * msize + y * msize + x] += rv[ch];
                    }
                }
            }
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    expect[c_l * msize * msize + y * msize + x] = 0.0;
                }
            }
        }
        let canvas = layout_compose(&m, &mut tape, &g, &fwd.refined).unwrap();
        for (got, want) in tape.value(canvas).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn decoder_output_is_in_unit_range_and_deterministic() {
        let m = test_model();
        let mut tape = Tape::new();
        let d = &m.dims;
        let data: Vec<f64> = (0..(d.layout_channels + 1) * d.map_size * d.map_size)
            .map(|i| ((i * 31 % 17) as f64 - 8.0) * 0.37)
            .collect();
        let canvas = tape.constant(Tensor::new(
            vec![d.layout_channels + 1, d.map_size, d.map_size],
            data.clone(),
        ));
        let out = decode_feature_map(&m, &mut tape, canvas).unwrap();
        let v1 = tape.value(out).data().to_vec();
        assert!(v1.iter().all(|x| (0.0..=1.0).contains(x)));

        let mut tape2 = Tape::new();
        let canvas2 = tape2.constant(Tensor::new(
            vec![d.layout_channels + 1, d.map_size, d.map_size],
            data,
        ));
        let out2 = decode_feature_map(&m, &mut tape2, canvas2).unwrap();
        assert_eq!(v1, tape2.value(out2).data());
    }

    #[test]
    fn decoder_gradient_wrt_map_passes_fd_check() {
        let m = test_model();
        let d = m.dims.clone();
        let n_map = (d.layout_channels + 1) * d.map_size * d.map_size;
        let map0: Vec<f64> = (0..n_map).map(|i| ((i * 13 % 23) as f64 - 11.0) * 0.1).collect();
        let target: Vec<f64> = (0..3 * d.image_size * d.image_size)
            .map(|i| ((i * 7 % 10) as f64) / 10.0)
            .collect();
        let f = |map: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let canvas = tape.constant(Tensor::new(
                vec![d.layout_channels + 1, d.map_size, d.map_size],
                map.to_vec(),
            ));
            let out = decode_feature_map(&m, &mut tape, canvas).unwrap();
            let t = tape.constant(Tensor::new(
                vec![3, d.image_size, d.image_size],
                target.clone(),
            ));
            let loss = tape.mse_loss(out, t).unwrap();
            tape.value(loss).item()
        };
        // Analytic gradient through the tape.
        let mut tape = Tape::new();
        let canvas = tape.param(
            "map",
            Tensor::new(
                vec![d.layout_channels + 1, d.map_size, d.map_size],
                map0.clone(),
            ),
        );
        let out = decode_feature_map(&m, &mut tape, canvas).unwrap();
        let t = tape.constant(Tensor::new(
            vec![3, d.image_size, d.image_size],
            target.clone(),
        ));
        let loss = tape.mse_loss(out, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(canvas).unwrap().data().to_vec();
        let report = crate::autodiff::gradient_check(f, &map0, &analytic, 1e-5, 1e-3);
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn reconstruct_and_synthesize_basics() {
        let m = test_model();
        let g = scene(
            vec![
                node("a", "girl", [0.1, 0.1, 0.5, 0.5]),
                node("b", "tree", [0.5, 0.5, 0.9, 0.9]),
            ],
            vec![edge("a", "left-of", "b")],
        );
        let img = checker_image(16);
        let r1 = reconstruct(&m, &img, &g).unwrap();
        let r2 = reconstruct(&m, &img, &g).unwrap();
        assert_eq!(r1, r2);
        let s1 = synthesize(&m, &g).unwrap();
        let s2 = synthesize(&m, &g).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, r1, "synthesis must not follow the z_v pathway");
    }

    #[test]
    fn synthesis_never_reads_z_v() {
        // Poisoned z_v makes any pathway that consumes it non-finite; the
        // synthesis plan on the same graph stays finite.
        let m = test_model();
        let g = scene(vec![node("a", "girl", [0.1, 0.1, 0.5, 0.5])], vec![]);
        let run = |plan: &ScenePlan| {
            let mut tape = Tape::new();
            let fwd = forward_scene(&m, &mut tape, &g, None, plan).unwrap();
            tape.value(fwd.output).all_finite()
        };
        assert!(!run(&ScenePlan::poisoned(&g)), "poison must reach the output");
        assert!(run(&ScenePlan::synthesis(&g)), "synthesis must ignore z_v");
    }

    #[test]
    fn missing_image_is_an_error_for_reconstruction() {
        let m = test_model();
        let g = scene(vec![node("a", "girl", [0.1, 0.1, 0.5, 0.5])], vec![]);
        let mut tape = Tape::new();
        let plan = ScenePlan::reconstruction(&g);
        assert!(matches!(
            forward_scene(&m, &mut tape, &g, None, &plan),
            Err(ModelError::MissingImage)
        ));
    }

    #[test]
    fn scene_loss_ng_term_is_zero_on_perfect_roi() {
        // When the generated ROI equals the target ROI the guidance term
        // vanishes; emulate by measuring the loss parts on rect where the
        // output is compared against itself.
        let m = test_model();
        let g = scene(vec![node("a", "girl", [0.0, 0.0, 1.0, 1.0])], vec![]);
        let img = checker_image(16);
        let mut tape = Tape::new();
        let plan = ScenePlan::reconstruction(&g);
        let fwd = forward_scene(&m, &mut tape, &g, Some(&img), &plan).unwrap();
        // NG of output against output: exactly zero.
        let rect = PixelRect {
            x0: 2,
            y0: 2,
            x1: 10,
            y1: 10,
        };
        let ranges = [(0, 3), (rect.y0, rect.y1), (rect.x0, rect.x1)];
        let a = tape.slice(fwd.output, &ranges).unwrap();
        let l = recon_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn grid_rect_never_degenerates() {
        let b = BBox::new(0.49, 0.49, 0.495, 0.495);
        let r = grid_rect(&b, 8);
        assert!(r.area() >= 1);
        assert!(r.x1 <= 8 && r.y1 <= 8);
        let full = grid_rect(&BBox::new(0.0, 0.0, 1.0, 1.0), 8);
        assert_eq!(full.area(), 64);
    }
}

//! The scene-graph-to-image generator: visual encoder, object/bbox/
//! predicate embedders, a message-passing graph representation learner
//! (GRL), a layout composer, and a convolutional image decoder. The
//! parameter partitions match the redaction targets of the unlearning
//! methods.

mod forward;
mod train;

pub use forward::{
    decode_feature_map, encode_object_visual, forward_scene, grid_rect, recon_loss, reconstruct,
    scene_loss, synthesize, NgRegion, SceneForward, ScenePlan, Task, ZvSource,
};
pub use train::{finetune, run_training, train, EpochLog, RunSpec, TrainConfig, TrainItem, TrainLog};

use crate::autodiff::{AutodiffError, ParamError, ParameterStore, Partition, Tensor};
use crate::scene_graph::{GraphError, Vocabulary};
use crate::synth::Dataset;
use crate::util::{hash_str, splitmix64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("reconstruction requires an input image")]
    MissingImage,
    #[error("checkpoint does not match the model architecture: {0}")]
    ArchitectureMismatch(String),
}

/// Architecture hyperparameters. Derived from the image size and the
/// vocabulary; everything else is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub image_size: usize,
    /// Visual embedding width (z_v).
    pub d_v: usize,
    /// Category embedding width (z_o).
    pub d_o: usize,
    /// BBox embedding width (z_b).
    pub d_b: usize,
    /// Predicate embedding width.
    pub d_p: usize,
    /// Message width in the GRL.
    pub d_msg: usize,
    pub grl_hidden: usize,
    pub grl_rounds: usize,
    pub layout_channels: usize,
    /// Layout feature map is map_size x map_size.
    pub map_size: usize,
    /// Encoder input patch side (ROI crops are resized to this).
    pub enc_patch: usize,
    pub enc_channels: usize,
    pub n_categories: usize,
    pub n_predicates: usize,
}

impl ModelDims {
    pub fn new(image_size: usize, vocab: &Vocabulary) -> Self {
        ModelDims {
            image_size,
            d_v: 32,
            d_o: 16,
            d_b: 8,
            d_p: 8,
            d_msg: 32,
            grl_hidden: 64,
            grl_rounds: 2,
            layout_channels: 8,
            map_size: 16,
            enc_patch: 8,
            enc_channels: 8,
            n_categories: vocab.categories.len(),
            n_predicates: vocab.predicates.len(),
        }
    }

    /// Fused embedding width: |z_s| = d_v + d_b + d_o.
    pub fn d_s(&self) -> usize {
        self.d_v + self.d_b + self.d_o
    }

    /// Number of x2 upsampling stages from map_size to image_size.
    pub fn upsample_stages(&self) -> usize {
        assert!(
            self.image_size.is_multiple_of(self.map_size)
                && (self.image_size / self.map_size).is_power_of_two(),
            "image size must be map_size * 2^k"
        );
        (self.image_size / self.map_size).trailing_zeros() as usize
    }

    /// Channel widths after conv_in and after each intermediate stage conv.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let stages = self.upsample_stages();
        let mut ch = vec![12];
        let taper = [8usize, 6];
        for s in 0..stages.saturating_sub(1) {
            ch.push(taper[s.min(taper.len() - 1)]);
        }
        ch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
}

impl GeneratorModel {
    /// Seeded initialization; weights are He-scaled normals keyed by
    /// parameter name so the layout is independent of insertion order.
    pub fn init(image_size: usize, vocab: &Vocabulary, seed: u64) -> Self {
        let dims = ModelDims::new(image_size, vocab);
        let mut params = ParameterStore::new();
        let d_s = dims.d_s();
        let enc_flat = dims.enc_channels * dims.enc_patch * dims.enc_patch;

        let mut add = |name: &str, partition: Partition, shape: Vec<usize>, fan_in: usize| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ hash_str(name)));
                let normal = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, partition, Tensor::new(shape, data));
        };

        // Encoder partition: visual extractor plus all embedders.
        add(
            "enc.conv1.w",
            Partition::Encoder,
            vec![dims.enc_channels, 3, 3, 3],
            3 * 9,
        );
        add("enc.conv1.b", Partition::Encoder, vec![dims.enc_channels], 1);
        add(
            "enc.conv2.w",
            Partition::Encoder,
            vec![dims.enc_channels, dims.enc_channels, 3, 3],
            dims.enc_channels * 9,
        );
        add("enc.conv2.b", Partition::Encoder, vec![dims.enc_channels], 1);
        add(
            "enc.fc.w",
            Partition::Encoder,
            vec![dims.d_v, enc_flat],
            enc_flat,
        );
        add("enc.fc.b", Partition::Encoder, vec![dims.d_v], 1);
        add(
            "emb.category",
            Partition::Encoder,
            vec![dims.n_categories, dims.d_o],
            dims.d_o,
        );
        add(
            "emb.predicate",
            Partition::Encoder,
            vec![dims.n_predicates, dims.d_p],
            dims.d_p,
        );
        add(
            "emb.unknown_v",
            Partition::Encoder,
            vec![dims.n_categories, dims.d_v],
            dims.d_v,
        );
        add("emb.bbox.w", Partition::Encoder, vec![dims.d_b, 4], 4);
        add("emb.bbox.b", Partition::Encoder, vec![dims.d_b], 1);

        // GRL partition: message passing MLPs, one pair per round.
        for r in 0..dims.grl_rounds {
            let edge_in = 2 * d_s + dims.d_p;
            add(
                &format!("grl.r{r}.edge.l1.w"),
                Partition::Grl,
                vec![dims.grl_hidden, edge_in],
                edge_in,
            );
            add(
                &format!("grl.r{r}.edge.l1.b"),
                Partition::Grl,
                vec![dims.grl_hidden],
                1,
            );
            add(
                &format!("grl.r{r}.edge.l2.w"),
                Partition::Grl,
                vec![2 * dims.d_msg, dims.grl_hidden],
                dims.grl_hidden,
            );
            add(
                &format!("grl.r{r}.edge.l2.b"),
                Partition::Grl,
                vec![2 * dims.d_msg],
                1,
            );
            let node_in = d_s + dims.d_msg;
            add(
                &format!("grl.r{r}.node.l1.w"),
                Partition::Grl,
                vec![dims.grl_hidden, node_in],
                node_in,
            );
            add(
                &format!("grl.r{r}.node.l1.b"),
                Partition::Grl,
                vec![dims.grl_hidden],
                1,
            );
            add(
                &format!("grl.r{r}.node.l2.w"),
                Partition::Grl,
                vec![d_s, dims.grl_hidden],
                dims.grl_hidden,
            );
            add(
                &format!("grl.r{r}.node.l2.b"),
                Partition::Grl,
                vec![d_s],
                1,
            );
        }

        // Layout partition: refined embedding -> layout channels.
        add(
            "layout.proj.w",
            Partition::Layout,
            vec![dims.layout_channels, d_s],
            d_s,
        );
        add(
            "layout.proj.b",
            Partition::Layout,
            vec![dims.layout_channels],
            1,
        );

        // Decoder partition.
        let dec_ch = dims.decoder_channels();
        add(
            "dec.conv_in.w",
            Partition::Decoder,
            vec![dec_ch[0], dims.layout_channels + 1, 3, 3],
            (dims.layout_channels + 1) * 9,
        );
        add("dec.conv_in.b", Partition::Decoder, vec![dec_ch[0]], 1);
        for s in 1..dec_ch.len() {
            add(
                &format!("dec.stage{}.w", s - 1),
                Partition::Decoder,
                vec![dec_ch[s], dec_ch[s - 1], 3, 3],
                dec_ch[s - 1] * 9,
            );
            add(
                &format!("dec.stage{}.b", s - 1),
                Partition::Decoder,
                vec![dec_ch[s]],
                1,
            );
        }
        let last = *dec_ch.last().unwrap();
        add(
            "dec.conv_out.w",
            Partition::Decoder,
            vec![3, last, 3, 3],
            last * 9,
        );
        add("dec.conv_out.b", Partition::Decoder, vec![3], 1);

        GeneratorModel {
            dims,
            vocab: vocab.clone(),
            params,
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ModelError> {
        self.params.save(path)?;
        Ok(())
    }

    /// Loads a checkpoint and verifies it matches this architecture.
    pub fn load<P: AsRef<Path>>(
        path: P,
        image_size: usize,
        vocab: &Vocabulary,
    ) -> Result<Self, ModelError> {
        let params = ParameterStore::load(path)?;
        let skeleton = GeneratorModel::init(image_size, vocab, 0);
        let expect: Vec<_> = skeleton
            .params
            .iter()
            .map(|(n, p, t)| (n.to_string(), p, t.shape().to_vec()))
            .collect();
        let got: Vec<_> = params
            .iter()
            .map(|(n, p, t)| (n.to_string(), p, t.shape().to_vec()))
            .collect();
        if expect != got {
            return Err(ModelError::ArchitectureMismatch(format!(
                "expected {} tensors, found {}",
                expect.len(),
                got.len()
            )));
        }
        Ok(GeneratorModel {
            dims: skeleton.dims,
            vocab: vocab.clone(),
            params,
        })
    }

    /// Per-object refined embeddings (reconstruction pathway) as CSV:
    /// sample, object, category, then the embedding components.
    pub fn export_latents(&self, dataset: &Dataset) -> Result<String, ModelError> {
        use crate::autodiff::Tape;
        let mut out = String::from("sample,object,category");
        for i in 0..self.dims.d_s() {
            out.push_str(&format!(",e{i}"));
        }
        out.push('\n');
        for (si, sample) in dataset.samples.iter().enumerate() {
            let mut tape = Tape::new();
            let plan = ScenePlan::reconstruction(&sample.graph);
            let fwd = forward_scene(self, &mut tape, &sample.graph, Some(&sample.image), &plan)?;
            for (ni, node) in sample.graph.nodes.iter().enumerate() {
                let Some(var) = fwd.refined[ni] else {
                    continue;
                };
                out.push_str(&format!("{si},{},{}", node.id, node.category));
                for v in tape.value(var).data() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

//! The two-branch architecture at toy scale: a small convolutional backbone
//! produces an `h×w` grid of `c`-dimensional deep features; the main branch
//! pools them (spatial mean) and embeds; the regularizer branch sketches
//! per-order moments, pools each order, and embeds those. Checkpoints store
//! every registered parameter as little-endian `f64` with a JSON manifest.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::losses::{dml_loss_node, horde_loss_node, total_loss_node, LossConfig, LossError};
use crate::scalar::{derive_seed, Real};
use crate::sketch::{
    cascade_nodes, cascade_sketches, stack_const_nodes, stack_param_nodes, uncascaded_nodes,
    ProjectorStack, SketchError, UncascadedStacks,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("backbone produces {h}×{w} spatial grid; need h·w ≥ 6")]
    GridTooSmall { h: usize, w: usize },
    #[error("embedding dimension must be ≥ 2, got {0}")]
    EmbedDimTooSmall(usize),
    #[error("sketch orders must be ≥ 2 when the moment branch is enabled, got {0}")]
    OrdersTooSmall(usize),
    #[error("feature map has channel dim {got}, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("head weight shape {shape:?} does not match input {cin} / bias {bias}")]
    HeadShape {
        shape: Vec<usize>,
        cin: usize,
        bias: usize,
    },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint blob holds {got} bytes, manifest expects {expected}")]
    BlobLength { expected: u64, got: u64 },
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub filters: usize,
    pub stride: usize,
}

/// 3×3 convolutions with unit padding, ReLU after each stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input image shape `[H, W, channels]`.
    pub input: [usize; 3],
    pub stages: Vec<ConvStage>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: [28, 28, 1],
            stages: vec![
                ConvStage {
                    filters: 16,
                    stride: 2,
                },
                ConvStage {
                    filters: 32,
                    stride: 2,
                },
                ConvStage {
                    filters: 64,
                    stride: 1,
                },
            ],
        }
    }
}

impl BackboneConfig {
    /// Spatial and channel shape `(h, w, c)` of the deep features.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input[0], self.input[1]);
        let mut c = self.input[2];
        for stage in &self.stages {
            h = (h + 2 - 3) / stage.stride + 1;
            w = (w + 2 - 3) / stage.stride + 1;
            c = stage.filters;
        }
        (h, w, c)
    }

    /// The ρ = 1/6 subsampling probe needs at least 6 spatial positions.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w, _) = self.feature_shape();
        if h * w < 6 || h < 2 || w < 2 {
            return Err(ModelError::GridTooSmall { h, w });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// Sampled once, never updated; matrices are graph constants.
    Frozen,
    /// One independent set of matrices per order, all trained.
    TrainableUncascaded,
    /// Shared matrices through the recursion, all trained.
    TrainableCascaded,
}

impl StackMode {
    pub fn trainable(self) -> bool {
        !matches!(self, StackMode::Frozen)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Enables the moment-regularizer branch.
    #[serde(default = "ModelConfig::default_horde")]
    pub horde: bool,
    /// Max sketch order K.
    pub orders: usize,
    /// Sketch width d.
    pub sketch_dim: usize,
    /// Embedding dimension E for the main branch and the per-order heads.
    pub embed_dim: usize,
    #[serde(default = "ModelConfig::default_stack_mode")]
    pub stack_mode: StackMode,
    /// Per-order embedding heads. Frozen-stack runs follow the ablation
    /// protocol of applying losses to the raw moment means, so this
    /// defaults to `stack_mode != Frozen`; set explicitly to override.
    #[serde(default)]
    pub order_heads: Option<bool>,
    pub loss: LossConfig,
}

impl ModelConfig {
    fn default_horde() -> bool {
        true
    }
    fn default_stack_mode() -> StackMode {
        StackMode::TrainableCascaded
    }

    pub fn order_heads_enabled(&self) -> bool {
        self.order_heads.unwrap_or(self.stack_mode.trainable())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.embed_dim < 2 {
            return Err(ModelError::EmbedDimTooSmall(self.embed_dim));
        }
        if self.horde && self.orders < 2 {
            return Err(ModelError::OrdersTooSmall(self.orders));
        }
        Ok(())
    }
}

// ── parameter initialization ────────────────────────────────────────

fn normals<T: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(T::cast(r * theta.cos() * std));
        if out.len() < n {
            out.push(T::cast(r * theta.sin() * std));
        }
    }
    out
}

/// He-normal tensor seeded from `(master, name)`, so adding unrelated
/// parameters never shifts this one's draw.
fn init_weight<T: Real>(master: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, name));
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normals(&mut rng, n, std)).expect("init shape")
}

fn init_head_weight<T: Real>(master: u64, name: &str, cin: usize, e: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, name));
    let std = (1.0 / cin as f64).sqrt();
    Tensor::new(vec![cin, e], normals(&mut rng, cin * e, std)).expect("init shape")
}

/// Add the backbone stages to a graph: conv → bias → relu per stage.
/// Parameter names are `backbone.conv{i}.weight` / `.bias`.
fn backbone_nodes<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    images: NodeId,
    seed: u64,
) -> Result<NodeId, ModelError> {
    let mut x = images;
    let mut cin = cfg.input[2];
    for (i, stage) in cfg.stages.iter().enumerate() {
        let wname = format!("backbone.conv{i}.weight");
        let bname = format!("backbone.conv{i}.bias");
        let w = g.param(
            &wname,
            init_weight(seed, &wname, &[3, 3, cin, stage.filters], 9 * cin),
        )?;
        let b = g.param(&bname, Tensor::zeros(&[stage.filters]))?;
        let conv = g.conv2d(x, w, stage.stride, 1)?;
        let biased = g.add(conv, b)?;
        x = g.relu(biased);
        cin = stage.filters;
    }
    Ok(x)
}

// ── value-level branch operations ───────────────────────────────────

/// Spatial mean of an `[..., c]` feature map: the order-1 representation.
/// Accumulates positions in row-major order (matches the graph's mean op).
pub fn first_order_representation<T: Real>(fmap: &Tensor<T>) -> Vec<T> {
    let c = *fmap.shape().last().expect("feature map has channels");
    let positions = fmap.len() / c;
    let mut acc = vec![T::zero(); c];
    for row in fmap.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = T::one() / T::cast(positions as f64);
    for a in &mut acc {
        *a = *a * inv;
    }
    acc
}

/// Linear map to the embedding space with optional l2 normalization.
#[derive(Debug, Clone)]
pub struct EmbeddingHead<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub normalize: bool,
}

impl<T: Real> EmbeddingHead<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, normalize: bool) -> Result<Self, ModelError> {
        if weight.shape().len() != 2 || weight.shape()[1] != bias.len() || bias.len() < 2 {
            return Err(ModelError::HeadShape {
                shape: weight.shape().to_vec(),
                cin: weight.shape().first().copied().unwrap_or(0),
                bias: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            normalize,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    /// Apply to a single pooled vector.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let row = Tensor::from_rows(1, x.len(), x).expect("row");
        self.apply_rows(&row).into_data()
    }

    /// Apply to `(n, cin)` rows; returns `(n, E)`.
    pub fn apply_rows(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.matmul(&self.weight, false, false).expect("head shapes");
        let e = self.output_dim();
        for row in out.data_mut().chunks_mut(e) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        if self.normalize {
            let guard = T::cast(1e-12);
            for row in out.data_mut().chunks_mut(e) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(guard);
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        out
    }
}

/// Per-order branch representations of one feature map: for each order
/// `k = 2..=max_order`, the spatial mean of the order-k sketches, passed
/// through the order's head when heads are present (l2-normalized raw
/// means otherwise). The branch is skippable at inference: nothing here
/// is needed to compute the order-1 embedding.
pub fn horde_branch<T: Real>(
    fmap: &Tensor<T>,
    stack: &ProjectorStack<T>,
    heads: Option<&[EmbeddingHead<T>]>,
    max_order: usize,
) -> Result<Vec<Vec<T>>, ModelError> {
    let c = *fmap.shape().last().expect("feature map has channels");
    if c != stack.feature_dim() {
        return Err(ModelError::ChannelMismatch {
            expected: stack.feature_dim(),
            got: c,
        });
    }
    let positions = fmap.len() / c;
    let d = stack.sketch_dim();
    let mut means = vec![vec![T::zero(); d]; max_order - 1];
    for row in fmap.data().chunks(c) {
        let sketches = cascade_sketches(row, stack, max_order)?;
        for (mean, sketch) in means.iter_mut().zip(&sketches) {
            for (m, &s) in mean.iter_mut().zip(sketch) {
                *m += s;
            }
        }
    }
    let inv = T::one() / T::cast(positions as f64);
    for mean in &mut means {
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
    }
    let guard = T::cast(1e-12);
    means
        .into_iter()
        .enumerate()
        .map(|(idx, mean)| {
            if let Some(heads) = heads {
                Ok(heads[idx].apply(&mean))
            } else {
                let norm = mean.iter().map(|&v| v * v).sum::<T>().sqrt().max(guard);
                Ok(mean.into_iter().map(|v| v / norm).collect())
            }
        })
        .collect()
}

// ── training graph ──────────────────────────────────────────────────

/// A built training graph plus the sampled stacks that seeded it.
pub struct TrainModel<T: Real> {
    pub graph: Graph<T>,
    pub batch: usize,
    /// Initial stack for frozen/cascaded modes.
    pub stack: Option<ProjectorStack<T>>,
    /// Initial per-order stacks for the uncascaded mode.
    pub uncascaded: Option<UncascadedStacks<T>>,
    /// Output names of the per-order losses, lowest order first.
    pub order_loss_names: Vec<String>,
}

/// Build the full training graph for one batch layout. `labels` fixes the
/// pair structure (P×Q batches keep it constant across steps).
pub fn build_train_graph<T: Real>(
    cfg: &ModelConfig,
    labels: &[usize],
    seed: u64,
) -> Result<TrainModel<T>, ModelError> {
    cfg.validate()?;
    let batch = labels.len();
    let (h, w, c) = cfg.backbone.feature_shape();
    let mut g = Graph::new();
    let images = g.input(
        "images",
        &[batch, cfg.backbone.input[0], cfg.backbone.input[1], cfg.backbone.input[2]],
    )?;
    let features = backbone_nodes(&mut g, &cfg.backbone, images, seed)?;
    g.mark_output("features", features);

    // main branch: spatial mean → embedding → l2 normalize
    let pooled = g.mean_axes(features, &[1, 2])?;
    let w1 = g.param(
        "head.order1.weight",
        init_head_weight(seed, "head.order1.weight", c, cfg.embed_dim),
    )?;
    let b1 = g.param("head.order1.bias", Tensor::zeros(&[cfg.embed_dim]))?;
    let projected = g.matmul(pooled, w1, false, false)?;
    let biased = g.add(projected, b1)?;
    let embedding = g.l2_normalize(biased)?;
    g.mark_output("embedding", embedding);
    let dml = dml_loss_node(&mut g, &cfg.loss, embedding, labels)?;
    g.mark_output("loss_dml", dml);

    let mut stack = None;
    let mut uncascaded = None;
    let mut order_loss_names = Vec::new();
    let horde_total = if cfg.horde {
        let flat = g.reshape(features, &[batch * h * w, c])?;
        let order_nodes: Vec<NodeId> = match cfg.stack_mode {
            StackMode::Frozen => {
                let s = ProjectorStack::sample_rademacher(
                    c,
                    cfg.sketch_dim,
                    cfg.orders,
                    derive_seed(seed, "sketch.stack"),
                )?;
                let mats = stack_const_nodes(&mut g, &s);
                stack = Some(s);
                cascade_nodes(&mut g, flat, &mats, cfg.sketch_dim)?
            }
            StackMode::TrainableCascaded => {
                let mut s = ProjectorStack::sample_rademacher(
                    c,
                    cfg.sketch_dim,
                    cfg.orders,
                    derive_seed(seed, "sketch.stack"),
                )?;
                s.set_trainable(true);
                let mats = stack_param_nodes(&mut g, &s, "sketch")?;
                stack = Some(s);
                cascade_nodes(&mut g, flat, &mats, cfg.sketch_dim)?
            }
            StackMode::TrainableUncascaded => {
                let stacks = UncascadedStacks::sample_rademacher(
                    c,
                    cfg.sketch_dim,
                    cfg.orders,
                    derive_seed(seed, "sketch.stack"),
                )?;
                let mut mats_per_order = Vec::new();
                for k in 2..=cfg.orders {
                    mats_per_order.push(stack_param_nodes(
                        &mut g,
                        stacks.stack_for_order(k),
                        &format!("sketch.order{k}"),
                    )?);
                }
                uncascaded = Some(stacks);
                uncascaded_nodes(&mut g, flat, &mats_per_order, cfg.sketch_dim)?
            }
        };
        let heads = cfg.order_heads_enabled();
        let mut order_embeddings = Vec::with_capacity(order_nodes.len());
        for (idx, &node) in order_nodes.iter().enumerate() {
            let k = idx + 2;
            let grid = g.reshape(node, &[batch, h * w, cfg.sketch_dim])?;
            let mean = g.mean_axes(grid, &[1])?;
            let emb = if heads {
                let wname = format!("head.order{k}.weight");
                let bname = format!("head.order{k}.bias");
                let wk = g.param(
                    &wname,
                    init_head_weight(seed, &wname, cfg.sketch_dim, cfg.embed_dim),
                )?;
                let bk = g.param(&bname, Tensor::zeros(&[cfg.embed_dim]))?;
                let p = g.matmul(mean, wk, false, false)?;
                let pb = g.add(p, bk)?;
                g.l2_normalize(pb)?
            } else {
                g.l2_normalize(mean)?
            };
            order_embeddings.push(emb);
        }
        let horde = horde_loss_node(&mut g, &cfg.loss, &order_embeddings, labels)?;
        for (idx, &node) in horde.per_order.iter().enumerate() {
            let name = format!("loss_order{}", idx + 2);
            g.mark_output(&name, node);
            order_loss_names.push(name);
        }
        g.mark_output("loss_horde", horde.total);
        Some(horde.total)
    } else {
        None
    };

    let total = total_loss_node(&mut g, dml, horde_total)?;
    g.mark_output("loss_total", total);
    Ok(TrainModel {
        graph: g,
        batch,
        stack,
        uncascaded,
        order_loss_names,
    })
}

/// Backbone-only inference graph: images → `features` (no sketch machinery,
/// no loss nodes). Parameter names match [`build_train_graph`] so weights
/// load straight from a checkpoint.
pub fn build_feature_graph<T: Real>(
    backbone: &BackboneConfig,
    batch: usize,
    seed: u64,
) -> Result<Graph<T>, ModelError> {
    backbone.validate()?;
    let mut g = Graph::new();
    let images = g.input(
        "images",
        &[batch, backbone.input[0], backbone.input[1], backbone.input[2]],
    )?;
    let features = backbone_nodes(&mut g, backbone, images, seed)?;
    g.mark_output("features", features);
    Ok(g)
}

/// Run the backbone over a dataset in chunks; returns `(n, h, w, c)`.
pub fn extract_features<T: Real>(
    backbone: &BackboneConfig,
    params: &HashMap<String, Tensor<T>>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>, ModelError> {
    let n = images.shape()[0];
    let (h, w, c) = backbone.feature_shape();
    let img_len = images.len() / n;
    let mut out = Vec::with_capacity(n * h * w * c);
    let mut built: HashMap<usize, Graph<T>> = HashMap::new();
    let mut start = 0;
    while start < n {
        let size = chunk.min(n - start);
        let g = match built.entry(size) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let mut g = build_feature_graph(backbone, size, 0)?;
                for name in g.param_names() {
                    let tensor = params
                        .get(&name)
                        .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                    g.set_param_value(&name, tensor.clone())?;
                }
                e.insert(g)
            }
        };
        let slice = Tensor::new(
            {
                let mut shape = images.shape().to_vec();
                shape[0] = size;
                shape
            },
            images.data()[start * img_len..(start + size) * img_len].to_vec(),
        )
        .expect("chunk shape");
        let result = g.forward(&[("images", &slice)])?;
        out.extend_from_slice(result["features"].data());
        start += size;
    }
    Ok(Tensor::new(vec![n, h, w, c], out).expect("feature shape"))
}

/// The main-branch head reconstructed from checkpoint tensors.
pub fn order1_head<T: Real>(
    params: &HashMap<String, Tensor<T>>,
) -> Result<EmbeddingHead<T>, ModelError> {
    let weight = params
        .get("head.order1.weight")
        .ok_or_else(|| ModelError::MissingTensor("head.order1.weight".into()))?;
    let bias = params
        .get("head.order1.bias")
        .ok_or_else(|| ModelError::MissingTensor("head.order1.bias".into()))?;
    EmbeddingHead::new(weight.clone(), bias.data().to_vec(), true)
}

// ── checkpointing ───────────────────────────────────────────────────

pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";
const CHECKPOINT_FORMAT: &str = "horde-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub seed: u64,
    /// Echo of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Write `model.json` + `model.bin` (little-endian f64, row-major).
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    config_echo: &serde_json::Value,
    step: u64,
    seed: u64,
    params: &[(String, Tensor<T>)],
) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        records.push(TensorRecord {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: tensor.len() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_f64().expect("finite parameter").to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: "f64".to_string(),
        step,
        seed,
        config: config_echo.clone(),
        tensors: records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut f = fs::File::create(dir.join(BLOB_FILE))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Read a checkpoint back; offsets must partition the blob exactly.
pub fn load_checkpoint<T: Real>(
    dir: &Path,
) -> Result<(CheckpointManifest, HashMap<String, Tensor<T>>), ModelError> {
    let json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&json).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Manifest(format!(
            "unknown format `{}`",
            manifest.format
        )));
    }
    if manifest.dtype != "f64" {
        return Err(ModelError::Manifest(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut expected_offset = 0u64;
    for rec in &manifest.tensors {
        if rec.offset != expected_offset {
            return Err(ModelError::Manifest(format!(
                "tensor `{}` at offset {} leaves a gap (expected {})",
                rec.name, rec.offset, expected_offset
            )));
        }
        let volume: usize = rec.shape.iter().product();
        if volume as u64 != rec.len {
            return Err(ModelError::Manifest(format!(
                "tensor `{}` length {} does not match shape {:?}",
                rec.name, rec.len, rec.shape
            )));
        }
        expected_offset += rec.len * 8;
    }
    if blob.len() as u64 != expected_offset {
        return Err(ModelError::BlobLength {
            expected: expected_offset,
            got: blob.len() as u64,
        });
    }
    let mut tensors = HashMap::new();
    for rec in &manifest.tensors {
        let start = rec.offset as usize;
        let data: Vec<T> = blob[start..start + rec.len as usize * 8]
            .chunks_exact(8)
            .map(|b| T::cast(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        tensors.insert(
            rec.name.clone(),
            Tensor::new(rec.shape.clone(), data).map_err(|e| ModelError::Manifest(e.to_string()))?,
        );
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_backbone_feature_shape() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_shape(), (7, 7, 64));
        cfg.validate().unwrap();
    }

    #[test]
    fn stride2_twice_on_28_gives_7() {
        let cfg = BackboneConfig {
            input: [28, 28, 1],
            stages: vec![
                ConvStage {
                    filters: 4,
                    stride: 2,
                },
                ConvStage {
                    filters: 8,
                    stride: 2,
                },
            ],
        };
        let (h, w, c) = cfg.feature_shape();
        assert_eq!((h, w, c), (7, 7, 8));
    }

    #[test]
    fn tiny_grid_rejected() {
        let cfg = BackboneConfig {
            input: [4, 4, 1],
            stages: vec![
                ConvStage {
                    filters: 4,
                    stride: 2,
                },
                ConvStage {
                    filters: 4,
                    stride: 2,
                },
            ],
        };
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn zero_images_with_zero_final_conv_give_zero_features() {
        let backbone = BackboneConfig {
            input: [8, 8, 1],
            stages: vec![
                ConvStage {
                    filters: 4,
                    stride: 2,
                },
                ConvStage {
                    filters: 6,
                    stride: 1,
                },
            ],
        };
        let mut g = build_feature_graph::<f64>(&backbone, 2, 3).unwrap();
        g.set_param_value("backbone.conv1.weight", Tensor::zeros(&[3, 3, 4, 6]))
            .unwrap();
        g.set_param_value("backbone.conv1.bias", Tensor::zeros(&[6]))
            .unwrap();
        let images = Tensor::zeros(&[2, 8, 8, 1]);
        let out = g.forward(&[("images", &images)]).unwrap();
        assert!(out["features"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_order_is_spatial_mean() {
        let v = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(first_order_representation(&v), vec![1.0, 0.0]);
        let two = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(first_order_representation(&two), vec![0.5, 0.5]);
    }

    #[test]
    fn spatial_mean_is_translation_invariant() {
        // dyadic values make the sum exact under any cyclic shift
        let base: Vec<f64> = (0..12).map(|i| (i as f64) / 64.0).collect();
        let fmap = Tensor::new(vec![2, 3, 2], base.clone()).unwrap();
        let reference = first_order_representation(&fmap);
        for shift in 1..6 {
            let mut rotated = Vec::with_capacity(12);
            for pos in 0..6 {
                let src = (pos + shift) % 6;
                rotated.extend_from_slice(&base[src * 2..src * 2 + 2]);
            }
            let shifted = Tensor::new(vec![2, 3, 2], rotated).unwrap();
            assert_eq!(first_order_representation(&shifted), reference);
        }
    }

    #[test]
    fn branch_on_zero_features_yields_normalized_bias() {
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 3, 5).unwrap();
        let head_w = Tensor::zeros(&[8, 4]);
        let mut bias = vec![0.0; 4];
        bias[0] = 3.0;
        bias[2] = 4.0;
        let heads: Vec<EmbeddingHead<f64>> = (0..2)
            .map(|_| EmbeddingHead::new(head_w.clone(), bias.clone(), true).unwrap())
            .collect();
        let fmap = Tensor::zeros(&[2, 2, 4]);
        let out = horde_branch(&fmap, &stack, Some(&heads), 3).unwrap();
        assert_eq!(out.len(), 2);
        for emb in out {
            assert!((emb[0] - 0.6).abs() < 1e-12);
            assert!((emb[2] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_order_count_and_mean_match_sketch_module() {
        use crate::sketch::empirical_moment_sketch;
        let stack = ProjectorStack::<f64>::sample_rademacher(3, 8, 2, 5).unwrap();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.13).sin()).collect();
        let fmap = Tensor::new(vec![2, 2, 3], data.clone()).unwrap();
        let out = horde_branch(&fmap, &stack, None, 2).unwrap();
        assert_eq!(out.len(), 1); // K = 2 → single order
        let rows: Vec<Vec<f64>> = data.chunks(3).map(|r| r.to_vec()).collect();
        let mean = empirical_moment_sketch(&rows, &stack, 2).unwrap();
        let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (a, m) in out[0].iter().zip(&mean) {
            assert!((a - m / norm).abs() <= 1e-12);
        }
    }

    #[test]
    fn branch_rejects_channel_mismatch() {
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 2, 5).unwrap();
        let fmap = Tensor::zeros(&[2, 2, 3]);
        assert!(matches!(
            horde_branch(&fmap, &stack, None, 2),
            Err(ModelError::ChannelMismatch { .. })
        ));
    }

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input: [8, 8, 1],
                stages: vec![
                    ConvStage {
                        filters: 4,
                        stride: 2,
                    },
                    ConvStage {
                        filters: 6,
                        stride: 1,
                    },
                ],
            },
            horde: true,
            orders: 3,
            sketch_dim: 8,
            embed_dim: 4,
            stack_mode: StackMode::TrainableCascaded,
            order_heads: None,
            loss: LossConfig::contrastive(0.5),
        }
    }

    #[test]
    fn train_graph_builds_and_runs() {
        let cfg = toy_model_config();
        let labels = vec![0, 0, 1, 1];
        let mut model = build_train_graph::<f64>(&cfg, &labels, 11).unwrap();
        let images = Tensor::full(&[4, 8, 8, 1], 0.5);
        let out = model.graph.forward(&[("images", &images)]).unwrap();
        assert!(out["loss_total"].item().is_finite());
        assert!(out.contains_key("loss_dml"));
        assert!(out.contains_key("loss_order2"));
        assert!(out.contains_key("loss_order3"));
        model.graph.zero_grads();
        model.graph.backward_scalar("loss_total").unwrap();
        let g = model.graph.param_grad("sketch.w1").unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_mode_registers_no_sketch_parameters() {
        let mut cfg = toy_model_config();
        cfg.stack_mode = StackMode::Frozen;
        let model = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 11).unwrap();
        assert!(model
            .graph
            .param_names()
            .iter()
            .all(|n| !n.starts_with("sketch.")));
        // and the order heads default off in frozen mode
        assert!(model
            .graph
            .param_names()
            .iter()
            .all(|n| !n.starts_with("head.order2")));
    }

    #[test]
    fn registry_sizes_cascaded_vs_uncascaded() {
        let mut cfg = toy_model_config();
        cfg.orders = 4;
        let cascaded = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 11).unwrap();
        cfg.stack_mode = StackMode::TrainableUncascaded;
        let uncascaded = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 11).unwrap();
        let count = |m: &TrainModel<f64>| -> usize {
            m.graph
                .param_names()
                .iter()
                .filter(|n| n.starts_with("sketch."))
                .map(|n| m.graph.param_value(n).unwrap().len())
                .sum()
        };
        let c = 6; // feature channels of the toy backbone
        assert_eq!(count(&cascaded), 4 * c * cfg.sketch_dim);
        let expected: usize = (2..=4).map(|k| k * c * cfg.sketch_dim).sum();
        assert_eq!(count(&uncascaded), expected);
        assert!(count(&cascaded) < count(&uncascaded));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_model_config();
        let model = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 7).unwrap();
        let params: Vec<(String, Tensor<f64>)> = model
            .graph
            .param_values()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let echo = serde_json::json!({"orders": 3});
        save_checkpoint(dir.path(), &echo, 42, 7, &params).unwrap();
        let (manifest, tensors) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.config["orders"], 3);
        for (name, tensor) in &params {
            let loaded = &tensors[name];
            assert_eq!(loaded.shape(), tensor.shape());
            // bitwise: compare the raw bits, not just values
            for (a, b) in loaded.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = vec![(
            "w".to_string(),
            Tensor::<f64>::from_slice(&[1.0, 2.0, 3.0]),
        )];
        save_checkpoint(dir.path(), &serde_json::json!({}), 0, 0, &params).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(ModelError::BlobLength { .. })
        ));
    }

    #[test]
    fn shared_seed_shares_backbone_init_across_branch_settings() {
        let mut cfg = toy_model_config();
        let with = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 13).unwrap();
        cfg.horde = false;
        let without = build_train_graph::<f64>(&cfg, &[0, 0, 1, 1], 13).unwrap();
        for name in ["backbone.conv0.weight", "head.order1.weight"] {
            assert_eq!(
                with.graph.param_value(name).unwrap().data(),
                without.graph.param_value(name).unwrap().data(),
            );
        }
    }
}

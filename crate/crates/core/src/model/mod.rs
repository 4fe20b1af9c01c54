//! Micro densely-connected CNN, its training loop, metrics and checkpoints.

mod checkpoint;
mod metrics;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use metrics::{evaluate, ConfusionMatrix, Evaluation};
pub(crate) use train::check_training_set;
pub use train::{train, Adam, EpochRecord, TrainConfig, TrainingTrace};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_pixels, ClassLabel, LabelSet, LabeledImage, NormalizationStats};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{kernels, Graph, Reduction, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub growth: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            num_classes: 3,
            stem_channels: 24,
            growth: 12,
            blocks: 2,
            layers_per_block: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("growth", self.growth),
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("model {name} must be positive")));
        }
        // One pool after the stem and one per transition.
        let min = 1usize << self.blocks;
        if self.image_size < min || self.image_size % min != 0 {
            return Err(Error::validation(format!(
                "image size {} must be a positive multiple of {min}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Input channels of dense layer `layer` in block `block`.
    pub fn layer_in_channels(&self, block: usize, layer: usize) -> usize {
        self.block_in_channels(block) + layer * self.growth
    }

    pub fn block_in_channels(&self, block: usize) -> usize {
        self.stem_channels + block * self.layers_per_block * self.growth
    }

    pub fn feature_channels(&self) -> usize {
        self.block_in_channels(self.blocks)
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Stem conv, dense blocks with average-pool transitions, global pooling and
/// a linear head. Inputs are pixels in `[0, 1]`; normalization happens
/// inside the forward pass so input gradients are in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroDenseNet {
    config: ModelConfig,
    labels: LabelSet,
    normalization: NormalizationStats,
    params: Vec<Param>,
    trained: bool,
}

/// Result of [`MicroDenseNet::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<ClassLabel>,
    /// `[N, K]` softmax rows.
    pub probabilities: Vec<Vec<f32>>,
}

const PREDICT_CHUNK: usize = 50;

impl MicroDenseNet {
    /// Fan-in scaled uniform init from a seeded generator; zero biases.
    pub fn new(config: ModelConfig, labels: LabelSet, normalization: NormalizationStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.num_classes {
            return Err(Error::validation(format!(
                "{} labels for a {}-class model",
                labels.len(),
                config.num_classes
            )));
        }
        if normalization.channels() != config.in_channels {
            return Err(Error::validation(format!(
                "normalization has {} channels, model expects {}",
                normalization.channels(),
                config.in_channels
            )));
        }
        let mut rng = SplitMix64::derive(seed, 0x1417);
        let mut params = Vec::new();
        let mut conv = |name: String, out_c: usize, in_c: usize, rng: &mut SplitMix64| {
            let fan_in = in_c * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f32> = (0..out_c * fan_in).map(|_| rng.uniform(-bound, bound) as f32).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                tensor: Tensor::new(vec![out_c, in_c, 3, 3], w).expect("sized"),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(&[out_c]),
            });
        };
        conv("stem".into(), config.stem_channels, config.in_channels, &mut rng);
        for b in 0..config.blocks {
            for l in 0..config.layers_per_block {
                conv(format!("block{b}.layer{l}"), config.growth, config.layer_in_channels(b, l), &mut rng);
            }
        }
        let fan_in = config.feature_channels();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f32> = (0..config.num_classes * fan_in)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        params.push(Param {
            name: "head.weight".into(),
            tensor: Tensor::new(vec![config.num_classes, fan_in], w)?,
        });
        params.push(Param {
            name: "head.bias".into(),
            tensor: Tensor::zeros(&[config.num_classes]),
        });
        Ok(Self {
            config,
            labels,
            normalization,
            params,
            trained: false,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        labels: LabelSet,
        normalization: NormalizationStats,
        params: Vec<Param>,
        trained: bool,
    ) -> Result<Self> {
        let reference = Self::new(config, labels.clone(), normalization.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(&params) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::validation(format!(
                    "parameter {} has shape {:?}, expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config,
            labels,
            normalization,
            params,
            trained,
        })
    }

    /// Whether the weights came out of training (or a checkpoint of a
    /// trained model) rather than fresh initialization.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Declare externally obtained weights as trained.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn normalization(&self) -> &NormalizationStats {
        &self.normalization
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, pixels: &Tensor) -> Result<()> {
        let [_, c, h, w] = pixels.dims4("model input")?;
        let expect = [
            ("channel", self.config.in_channels, c),
            ("height", self.config.image_size, h),
            ("width", self.config.image_size, w),
        ];
        for (axis, expected, found) in expect {
            if expected != found {
                return Err(Error::Dimension {
                    op: "model input",
                    axis,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Record the forward pass on `g`. `param_vars` must be the parameters'
    /// vars in [`Self::params`] order. When `probe` is set, the input of
    /// every dense layer is copied into it; `ablate` replaces one layer's
    /// output with zeros.
    fn forward_graph(
        &self,
        g: &mut Graph,
        input: Var,
        param_vars: &[Var],
        mut probe: Option<&mut Vec<Vec<Tensor>>>,
        ablate: Option<(usize, usize)>,
    ) -> Result<Var> {
        let mut p = param_vars.iter().copied();
        let mut next = || p.next().expect("parameter layout");
        let x = g.normalize(input, &self.normalization.mean, &self.normalization.std)?;
        let (w, b) = (next(), next());
        let x = g.conv2d(x, w, b, 1, 1)?;
        let x = g.relu(x);
        let mut features = g.avgpool2d(x, 2)?;
        for block in 0..self.config.blocks {
            if block > 0 {
                features = g.avgpool2d(features, 2)?;
            }
            let mut inputs = Vec::new();
            for layer in 0..self.config.layers_per_block {
                if probe.is_some() {
                    inputs.push(g.value(features).clone());
                }
                let (w, b) = (next(), next());
                let y = g.conv2d(features, w, b, 1, 1)?;
                let mut y = g.relu(y);
                if ablate == Some((block, layer)) {
                    y = g.constant(Tensor::zeros(g.value(y).shape()));
                }
                features = g.concat_channels(features, y)?;
            }
            if let Some(probe) = probe.as_deref_mut() {
                probe.push(inputs);
            }
        }
        let pooled = g.global_avgpool(features)?;
        let flat = g.flatten(pooled);
        let (w, b) = (next(), next());
        g.linear(flat, w, b)
    }

    fn constant_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.tensor.clone())).collect()
    }

    /// Raw `[N, K]` logits for an `[N, C, H, W]` pixel batch.
    pub fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let vars = self.constant_params(&mut g);
        let x = g.constant(pixels.clone());
        let out = self.forward_graph(&mut g, x, &vars, None, None)?;
        Ok(g.value(out).clone())
    }

    /// Softmax rows for a pixel batch. Rows are computed independently, so a
    /// row does not depend on what else is in the batch.
    pub fn predict_proba(&self, pixels: &Tensor) -> Result<Vec<Vec<f32>>> {
        let logits = self.logits(pixels)?;
        let [n, k] = logits.dims2("predict")?;
        let probs = kernels::softmax_rows(n, k, logits.data());
        Ok(probs.chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Labels and probabilities for a set of images, evaluated in parallel
    /// fixed-size chunks.
    pub fn predict(&self, images: &[LabeledImage]) -> Result<Prediction> {
        if images.is_empty() {
            return Ok(Prediction {
                labels: Vec::new(),
                probabilities: Vec::new(),
            });
        }
        let chunks: Vec<Vec<Vec<f32>>> = images
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let refs: Vec<&LabeledImage> = chunk.iter().collect();
                self.predict_proba(&batch_pixels(&refs)?)
            })
            .collect::<Result<_>>()?;
        let probabilities: Vec<Vec<f32>> = chunks.into_iter().flatten().collect();
        let labels = probabilities
            .iter()
            .map(|row| self.labels.get(argmax(row)).expect("k classes"))
            .collect();
        Ok(Prediction { labels, probabilities })
    }

    /// Gradient of the cross-entropy loss with respect to the input pixels,
    /// plus the loss itself.
    pub fn input_gradient(&self, pixels: &Tensor, labels: &[usize], reduction: Reduction) -> Result<(Tensor, f32)> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let vars = self.constant_params(&mut g);
        let x = g.leaf(pixels.clone().with_requires_grad(true));
        let logits = self.forward_graph(&mut g, x, &vars, None, None)?;
        let loss = g.cross_entropy(logits, labels, reduction)?;
        let loss_value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let grad = grads.take(x).expect("input requires grad");
        Ok((Tensor::new(pixels.shape().to_vec(), grad)?, loss_value))
    }

    /// Per-example cross-entropy losses.
    pub fn losses(&self, pixels: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
        let logits = self.logits(pixels)?;
        let [_, k] = logits.dims2("losses")?;
        kernels::check_labels(k, labels)?;
        Ok(kernels::cross_entropy_rows(k, logits.data(), labels))
    }

    /// Mean loss and parameter gradients for one batch, in parameter order.
    pub(crate) fn loss_and_param_grads(&self, pixels: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Vec<f32>>, Tensor)> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(true)))
            .collect();
        let x = g.constant(pixels.clone());
        let logits = self.forward_graph(&mut g, x, &vars, None, None)?;
        let logits_value = g.value(logits).clone();
        let loss = g.cross_entropy(logits, labels, Reduction::Mean)?;
        let loss_value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let pg = vars
            .iter()
            .map(|&v| grads.take(v).expect("params require grad"))
            .collect();
        Ok((loss_value, pg, logits_value))
    }

    /// Inputs of every dense layer, `[block][layer]`, optionally with one
    /// layer's output zeroed.
    pub fn dense_layer_inputs(&self, pixels: &Tensor, ablate: Option<(usize, usize)>) -> Result<Vec<Vec<Tensor>>> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let vars = self.constant_params(&mut g);
        let x = g.constant(pixels.clone());
        let mut probe = Vec::new();
        self.forward_graph(&mut g, x, &vars, Some(&mut probe), ablate)?;
        Ok(probe)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

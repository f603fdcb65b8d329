//! Model architectures: the two-branch transformation network, the dense
//! embedder, and the dense autoencoder used for side information.
//!
//! Hidden sizes of the transformation follow a fixed skeleton (256 and 2048
//! units at width 1) scaled by a width multiplier; the multiplier is valid
//! whenever both scaled sizes come out integral. Parameter and MAC counts
//! are exact closed-form properties of the layer stack: an affine layer
//! contributes `in * out + out` parameters and `in * out` multiply
//! accumulates, batch normalization contributes `2 * features` parameters
//! and no MACs.

use serde::{Deserialize, Serialize};

use crate::numerics::rng::rng_from_seed;
use crate::numerics::{
    l2_normalize_backward, l2_normalize_rows, AffineLayer, BatchNormLayer, Layer, Matrix, Mode,
    ParamSlot, ReluLayer, Sequential,
};
use crate::{Error, Result};

/// Base hidden width of each projection branch (scaled by the multiplier).
pub const PROJ_BASE_WIDTH: usize = 256;
/// Base hidden width of the mixer trunk (scaled by the multiplier).
pub const MIXER_BASE_WIDTH: usize = 2048;

fn scaled_width(base: usize, multiplier: f64) -> Result<usize> {
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(Error::Config(format!(
            "width multiplier must be positive and finite, got {multiplier}"
        )));
    }
    let exact = base as f64 * multiplier;
    if exact.fract() != 0.0 || exact < 1.0 {
        return Err(Error::Config(format!(
            "width multiplier {multiplier} scales {base} to non-integral {exact}"
        )));
    }
    Ok(exact as usize)
}

fn projection_branch(in_dim: usize, width: usize, rng: &mut crate::numerics::rng::SeededRng) -> Sequential {
    Sequential::new(vec![
        Layer::Affine(AffineLayer::init(in_dim, width, rng)),
        Layer::BatchNorm(BatchNormLayer::new(width)),
        Layer::Relu(ReluLayer::new()),
        Layer::Affine(AffineLayer::init(width, width, rng)),
        Layer::BatchNorm(BatchNormLayer::new(width)),
        Layer::Relu(ReluLayer::new()),
    ])
}

/// Transformation mapping (old embedding, side information) into the new
/// model's embedding space.
///
/// Two projection branches lift the old embedding and the side-information
/// vector separately; their outputs are concatenated and fed through a
/// mixer MLP that emits the new-space vector, optionally L2-normalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformationNet {
    d_old: usize,
    d_side: usize,
    d_new: usize,
    width_multiplier: f64,
    normalize_output: bool,
    proj_old: Sequential,
    proj_side: Sequential,
    mixer: Sequential,
    #[serde(skip)]
    norm_cache: Option<(Matrix, Vec<f64>)>,
}

/// Builds a transformation with freshly initialized weights.
///
/// The projection branches have two `Affine -> BatchNorm -> ReLU` blocks of
/// width `256 * w`; the mixer runs two such blocks of width `2048 * w` and
/// a final affine onto `d_new`. Initialization order is fixed: old branch,
/// side branch, mixer, each layer drawing weights row-major then bias.
pub fn build_transformation(
    d_old: usize,
    d_side: usize,
    d_new: usize,
    width_multiplier: f64,
    normalize_output: bool,
    seed: u64,
) -> Result<TransformationNet> {
    if d_old == 0 || d_side == 0 || d_new == 0 {
        return Err(Error::Config(format!(
            "transformation dimensions must be at least 1, got ({d_old}, {d_side}, {d_new})"
        )));
    }
    let proj_width = scaled_width(PROJ_BASE_WIDTH, width_multiplier)?;
    let mixer_width = scaled_width(MIXER_BASE_WIDTH, width_multiplier)?;
    let mut rng = rng_from_seed(seed);
    let proj_old = projection_branch(d_old, proj_width, &mut rng);
    let proj_side = projection_branch(d_side, proj_width, &mut rng);
    let mixer = Sequential::new(vec![
        Layer::Affine(AffineLayer::init(2 * proj_width, mixer_width, &mut rng)),
        Layer::BatchNorm(BatchNormLayer::new(mixer_width)),
        Layer::Relu(ReluLayer::new()),
        Layer::Affine(AffineLayer::init(mixer_width, mixer_width, &mut rng)),
        Layer::BatchNorm(BatchNormLayer::new(mixer_width)),
        Layer::Relu(ReluLayer::new()),
        Layer::Affine(AffineLayer::init(mixer_width, d_new, &mut rng)),
    ]);
    Ok(TransformationNet {
        d_old,
        d_side,
        d_new,
        width_multiplier,
        normalize_output,
        proj_old,
        proj_side,
        mixer,
        norm_cache: None,
    })
}

impl TransformationNet {
    pub fn d_old(&self) -> usize {
        self.d_old
    }

    pub fn d_side(&self) -> usize {
        self.d_side
    }

    pub fn d_new(&self) -> usize {
        self.d_new
    }

    pub fn width_multiplier(&self) -> f64 {
        self.width_multiplier
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    fn check_inputs(&self, old_emb: &Matrix, side_info: &Matrix) -> Result<()> {
        if old_emb.cols() != self.d_old {
            return Err(Error::Shape(format!(
                "old embeddings have {} columns, transformation expects {}",
                old_emb.cols(),
                self.d_old
            )));
        }
        if side_info.cols() != self.d_side {
            return Err(Error::Shape(format!(
                "side information has {} columns, transformation expects {}",
                side_info.cols(),
                self.d_side
            )));
        }
        if old_emb.rows() != side_info.rows() {
            return Err(Error::Shape(format!(
                "{} embedding rows vs {} side-information rows",
                old_emb.rows(),
                side_info.rows()
            )));
        }
        Ok(())
    }

    /// Training forward pass; honors each batch-norm layer's mode and
    /// caches everything `backward` needs.
    pub fn forward_train(&mut self, old_emb: &Matrix, side_info: &Matrix) -> Result<Matrix> {
        self.check_inputs(old_emb, side_info)?;
        let a = self.proj_old.forward_train(old_emb)?;
        let b = self.proj_side.forward_train(side_info)?;
        let joint = Matrix::hcat(&a, &b)?;
        let out = self.mixer.forward_train(&joint)?;
        if self.normalize_output {
            let (normalized, norms) = l2_normalize_rows(&out)?;
            self.norm_cache = Some((normalized.clone(), norms));
            Ok(normalized)
        } else {
            self.norm_cache = None;
            Ok(out)
        }
    }

    /// Inference pass over shared references: running statistics only, no
    /// caching, per-row deterministic.
    pub fn forward_infer(&self, old_emb: &Matrix, side_info: &Matrix) -> Result<Matrix> {
        self.check_inputs(old_emb, side_info)?;
        let a = self.proj_old.forward_infer(old_emb)?;
        let b = self.proj_side.forward_infer(side_info)?;
        let out = self.mixer.forward_infer(&Matrix::hcat(&a, &b)?)?;
        if self.normalize_output {
            Ok(l2_normalize_rows(&out)?.0)
        } else {
            Ok(out)
        }
    }

    /// Backward pass matching the last `forward_train`; accumulates layer
    /// gradients and returns gradients for both inputs.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<(Matrix, Matrix)> {
        let grad_mixer_out = if self.normalize_output {
            let (normalized, norms) = self
                .norm_cache
                .take()
                .ok_or_else(|| Error::State("transformation backward without forward".into()))?;
            l2_normalize_backward(&normalized, &norms, grad_out)?
        } else {
            grad_out.clone()
        };
        let grad_joint = self.mixer.backward(&grad_mixer_out)?;
        let proj_width = grad_joint.cols() / 2;
        let (ga, gb) = grad_joint.hsplit(proj_width)?;
        let grad_old = self.proj_old.backward(&ga)?;
        let grad_side = self.proj_side.backward(&gb)?;
        Ok((grad_old, grad_side))
    }

    pub fn zero_grads(&mut self) {
        self.proj_old.zero_grads();
        self.proj_side.zero_grads();
        self.mixer.zero_grads();
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.proj_old.set_mode(mode);
        self.proj_side.set_mode(mode);
        self.mixer.set_mode(mode);
    }

    /// Freezes batch-norm statistics while scale and shift keep training.
    pub fn freeze_bn_stats(&mut self) {
        self.set_mode(Mode::FrozenStats);
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = self.proj_old.param_slots();
        slots.extend(self.proj_side.param_slots());
        slots.extend(self.mixer.param_slots());
        slots
    }

    /// Bit patterns of every batch-norm running statistic, for freeze tests.
    pub fn bn_stats_bits(&self) -> Vec<(Vec<u64>, Vec<u64>)> {
        let mut stats = self.proj_old.bn_running_stats();
        stats.extend(self.proj_side.bn_running_stats());
        stats.extend(self.mixer.bn_running_stats());
        stats
    }

    pub fn param_count(&self) -> usize {
        self.proj_old.param_count() + self.proj_side.param_count() + self.mixer.param_count()
    }

    /// Multiply-accumulates per transformed record (affine layers only).
    pub fn mac_count(&self) -> usize {
        self.proj_old.mac_count() + self.proj_side.mac_count() + self.mixer.mac_count()
    }
}

/// Dense classifier whose penultimate activations serve as embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedderNet {
    input_dim: usize,
    embed_dim: usize,
    classes: usize,
    pub(crate) trunk: Sequential,
    pub(crate) head: AffineLayer,
}

/// Builds an embedder: `depth` blocks of `Affine -> BatchNorm -> ReLU` of
/// the given hidden width, an affine projection onto `embed_dim`, and a
/// linear classifier head.
pub fn build_embedder(
    input_dim: usize,
    hidden: usize,
    depth: usize,
    embed_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<EmbedderNet> {
    if input_dim == 0 || embed_dim == 0 || classes == 0 || (depth > 0 && hidden == 0) {
        return Err(Error::Config(format!(
            "embedder dimensions must be positive, got input {input_dim}, hidden {hidden}, embed {embed_dim}, classes {classes}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut layers = Vec::new();
    let mut width = input_dim;
    for _ in 0..depth {
        layers.push(Layer::Affine(AffineLayer::init(width, hidden, &mut rng)));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(hidden)));
        layers.push(Layer::Relu(ReluLayer::new()));
        width = hidden;
    }
    layers.push(Layer::Affine(AffineLayer::init(width, embed_dim, &mut rng)));
    let head = AffineLayer::init(embed_dim, classes, &mut rng);
    Ok(EmbedderNet {
        input_dim,
        embed_dim,
        classes,
        trunk: Sequential::new(layers),
        head,
    })
}

impl EmbedderNet {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Embeds inputs with running statistics; safe on shared references.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.trunk.forward_infer(inputs)
    }

    /// Classifier logits in inference mode.
    pub fn infer_logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.head.forward_infer(&self.embed(inputs)?)
    }

    /// The frozen linear head, e.g. for distillation losses.
    pub fn head(&self) -> &AffineLayer {
        &self.head
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.head.param_count()
    }

    /// Multiply-accumulates for one embedding plus classification.
    pub fn mac_count(&self) -> usize {
        self.trunk.mac_count() + self.head.mac_count()
    }

    /// Multiply-accumulates for one embedding only (no classifier head),
    /// which is what gallery backfills pay per record.
    pub fn embed_mac_count(&self) -> usize {
        self.trunk.mac_count()
    }
}

/// Dense autoencoder; the encoder output is the side-information vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseAutoencoder {
    input_dim: usize,
    code_dim: usize,
    pub(crate) encoder: Sequential,
    pub(crate) decoder: Sequential,
}

/// Builds a single-hidden-layer autoencoder `D -> hidden -> code -> hidden
/// -> D` with ReLU activations after each hidden affine.
pub fn build_autoencoder(
    input_dim: usize,
    hidden: usize,
    code_dim: usize,
    seed: u64,
) -> Result<DenseAutoencoder> {
    if input_dim == 0 || hidden == 0 || code_dim == 0 {
        return Err(Error::Config(format!(
            "autoencoder dimensions must be positive, got input {input_dim}, hidden {hidden}, code {code_dim}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let encoder = Sequential::new(vec![
        Layer::Affine(AffineLayer::init(input_dim, hidden, &mut rng)),
        Layer::Relu(ReluLayer::new()),
        Layer::Affine(AffineLayer::init(hidden, code_dim, &mut rng)),
    ]);
    let decoder = Sequential::new(vec![
        Layer::Affine(AffineLayer::init(code_dim, hidden, &mut rng)),
        Layer::Relu(ReluLayer::new()),
        Layer::Affine(AffineLayer::init(hidden, input_dim, &mut rng)),
    ]);
    Ok(DenseAutoencoder { input_dim, code_dim, encoder, decoder })
}

impl DenseAutoencoder {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    /// Encodes inputs to the side-information space.
    pub fn encode(&self, inputs: &Matrix) -> Result<Matrix> {
        self.encoder.forward_infer(inputs)
    }

    /// Full reconstruction in inference mode.
    pub fn reconstruct(&self, inputs: &Matrix) -> Result<Matrix> {
        self.decoder.forward_infer(&self.encoder.forward_infer(inputs)?)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn mac_count(&self) -> usize {
        self.encoder.mac_count() + self.decoder.mac_count()
    }

    /// Multiply-accumulates for encoding only.
    pub fn encode_mac_count(&self) -> usize {
        self.encoder.mac_count()
    }
}

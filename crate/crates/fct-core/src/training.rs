//! Training loops for the embedders, the side-information producers, and
//! the embedding transformation.
//!
//! Every loop follows the same discipline: one seeded RNG stream drives all
//! stochastic choices (shuffles, mixing coefficients, view noise) in a fixed
//! order, each epoch visits whole batches only (a trailing partial batch is
//! dropped), and the learning rate follows linear warmup into cosine decay.
//! The transformation trainer consumes precomputed feature matrices, so the
//! models that produced them cannot be touched by it.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::models::{
    build_autoencoder, build_embedder, DenseAutoencoder, EmbedderNet, TransformationNet,
};
use crate::numerics::rng::{fill_gaussian, rng_from_seed, SeededRng};
use crate::numerics::{
    info_nce_loss, kl_distillation_loss, l2_normalize_rows, lr_at_epoch, mse_loss,
    soft_cross_entropy, softmax_cross_entropy, AdamState, AffineLayer, LrSchedule, Matrix,
};
use crate::{Error, Result};

/// Hyperparameters shared by all training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Epoch index at which batch-norm running statistics stop updating
    /// (scale and shift keep training). `None` never freezes them.
    pub bn_freeze_epoch: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for batch statistics".into(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(freeze) = self.bn_freeze_epoch {
            if freeze >= self.epochs {
                return Err(Error::Config(format!(
                    "batch-norm freeze epoch {} is outside {} training epochs",
                    freeze, self.epochs
                )));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} is invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.warmup_epochs, self.epochs)
    }
}

/// Objective used to fit the transformation to the new embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error against the new embedding.
    Mse,
    /// Forward KL between class distributions induced by a frozen head.
    Kl,
    /// Reversed KL through the same head.
    KlReversed,
}

/// How the side-information vector stored alongside each old embedding is
/// produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SideInfoKind {
    /// A constant zero vector; the no-side-information baseline.
    Zero { dim: usize },
    /// Code of an unsupervised reconstruction autoencoder.
    Autoencoder { hidden: usize, code_dim: usize },
    /// Embedding of an independently initialized classifier trained on the
    /// same data and labels as the old model.
    AlternateClassifier { hidden: usize, depth: usize, embed_dim: usize },
    /// Like the alternate classifier, but trained on convexly mixed inputs
    /// with matching soft labels.
    Mixup { hidden: usize, depth: usize, embed_dim: usize, alpha: f64 },
    /// Label-free contrastive encoder over noise-perturbed views.
    Contrastive {
        hidden: usize,
        depth: usize,
        embed_dim: usize,
        temperature: f64,
        noise_std: f64,
    },
}

impl SideInfoKind {
    /// Dimension of the side-information vectors this producer emits.
    pub fn dim(&self) -> usize {
        match self {
            SideInfoKind::Zero { dim } => *dim,
            SideInfoKind::Autoencoder { code_dim, .. } => *code_dim,
            SideInfoKind::AlternateClassifier { embed_dim, .. }
            | SideInfoKind::Mixup { embed_dim, .. }
            | SideInfoKind::Contrastive { embed_dim, .. } => *embed_dim,
        }
    }
}

/// A trained side-information producer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SideInfoModel {
    Zero { dim: usize },
    Autoencoder(DenseAutoencoder),
    Embedder(EmbedderNet),
}

impl SideInfoModel {
    /// Side-information vectors for a batch of raw inputs, row per sample.
    pub fn apply(&self, inputs: &Matrix) -> Result<Matrix> {
        match self {
            SideInfoModel::Zero { dim } => Ok(Matrix::zeros(inputs.rows(), *dim)),
            SideInfoModel::Autoencoder(ae) => ae.encode(inputs),
            SideInfoModel::Embedder(net) => net.embed(inputs),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SideInfoModel::Zero { dim } => *dim,
            SideInfoModel::Autoencoder(ae) => ae.code_dim(),
            SideInfoModel::Embedder(net) => net.embed_dim(),
        }
    }
}

/// Shuffled whole batches for one epoch: a fresh permutation of all row
/// indices, chopped into `batch_size` slices, trailing remainder dropped.
fn epoch_batches(count: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

fn check_rows(inputs: &Matrix, labels: &[u32], batch_size: usize) -> Result<()> {
    if labels.len() != inputs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} input rows",
            labels.len(),
            inputs.rows()
        )));
    }
    if inputs.rows() < batch_size {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            inputs.rows(),
            batch_size
        )));
    }
    Ok(())
}

/// Trains a classifier embedder (trunk and head jointly) with softmax cross
/// entropy. Returns the mean batch loss per epoch.
pub fn train_embedder(
    net: &mut EmbedderNet,
    inputs: &Matrix,
    labels: &[u32],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_rows(inputs, labels, cfg.batch_size)?;
    let schedule = cfg.schedule()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at_epoch(&schedule, epoch)?;
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(inputs.rows(), cfg.batch_size, &mut rng);
        let batch_count = batches.len();
        for batch in batches {
            let x = inputs.select_rows(&batch);
            let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            net.trunk.zero_grads();
            net.head.zero_grads();
            let emb = net.trunk.forward_train(&x)?;
            let logits = net.head.forward_train(&emb)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &y)?;
            let grad_emb = net.head.backward(&grad_logits)?;
            net.trunk.backward(&grad_emb)?;
            let mut slots = net.trunk.param_slots();
            slots.extend(net.head.param_slots());
            adam.update(&mut slots)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batch_count as f64);
    }
    Ok(history)
}

/// Trains an embedder on mixup batches: inputs are convex combinations of
/// a batch with a shuffled copy of itself, targets are the matching
/// combination of one-hot labels. The mixing weight is drawn per batch.
fn train_embedder_mixup(
    net: &mut EmbedderNet,
    inputs: &Matrix,
    labels: &[u32],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_rows(inputs, labels, cfg.batch_size)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("mixup alpha {alpha} must be positive")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    let classes = net.classes();
    let schedule = cfg.schedule()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at_epoch(&schedule, epoch)?;
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(inputs.rows(), cfg.batch_size, &mut rng);
        let batch_count = batches.len();
        for batch in batches {
            let lambda: f64 = beta.sample(&mut rng);
            let mut partner = batch.clone();
            partner.shuffle(&mut rng);
            let x_a = inputs.select_rows(&batch);
            let x_b = inputs.select_rows(&partner);
            let mut x = x_a;
            for (v, w) in x.data_mut().iter_mut().zip(x_b.data()) {
                *v = lambda * *v + (1.0 - lambda) * w;
            }
            let mut targets = Matrix::zeros(batch.len(), classes);
            for (r, (&ia, &ib)) in batch.iter().zip(&partner).enumerate() {
                let row = targets.row_mut(r);
                row[labels[ia] as usize] += lambda;
                row[labels[ib] as usize] += 1.0 - lambda;
            }
            net.trunk.zero_grads();
            net.head.zero_grads();
            let emb = net.trunk.forward_train(&x)?;
            let logits = net.head.forward_train(&emb)?;
            let (loss, grad_logits) = soft_cross_entropy(&logits, &targets)?;
            let grad_emb = net.head.backward(&grad_logits)?;
            net.trunk.backward(&grad_emb)?;
            let mut slots = net.trunk.param_slots();
            slots.extend(net.head.param_slots());
            adam.update(&mut slots)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batch_count as f64);
    }
    Ok(history)
}

/// Trains only the trunk of an embedder with a contrastive objective over
/// two Gaussian-noise views of each batch. The classifier head is left at
/// its initialization and unused.
fn train_embedder_contrastive(
    net: &mut EmbedderNet,
    inputs: &Matrix,
    temperature: f64,
    noise_std: f64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.rows() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            inputs.rows(),
            cfg.batch_size
        )));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config(format!("view noise {noise_std} is invalid")));
    }
    let schedule = cfg.schedule()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at_epoch(&schedule, epoch)?;
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(inputs.rows(), cfg.batch_size, &mut rng);
        let batch_count = batches.len();
        for batch in batches {
            let clean = inputs.select_rows(&batch);
            // Both views of sample i sit at rows i and i + batch.
            let mut views = Matrix::zeros(2 * batch.len(), inputs.cols());
            let mut noise = vec![0.0; inputs.cols()];
            for half in 0..2 {
                for (r, _) in batch.iter().enumerate() {
                    fill_gaussian(&mut rng, &mut noise, noise_std);
                    let dst = views.row_mut(half * batch.len() + r);
                    for ((d, &c), n) in dst.iter_mut().zip(clean.row(r)).zip(&noise) {
                        *d = c + n;
                    }
                }
            }
            net.trunk.zero_grads();
            let emb = net.trunk.forward_train(&views)?;
            let (loss, grad_emb) = info_nce_loss(&emb, temperature)?;
            net.trunk.backward(&grad_emb)?;
            adam.update(&mut net.trunk.param_slots())?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batch_count as f64);
    }
    Ok(history)
}

/// Trains a reconstruction autoencoder with mean squared error.
pub fn train_autoencoder(
    ae: &mut DenseAutoencoder,
    inputs: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.rows() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            inputs.rows(),
            cfg.batch_size
        )));
    }
    let schedule = cfg.schedule()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at_epoch(&schedule, epoch)?;
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(inputs.rows(), cfg.batch_size, &mut rng);
        let batch_count = batches.len();
        for batch in batches {
            let x = inputs.select_rows(&batch);
            ae.encoder.zero_grads();
            ae.decoder.zero_grads();
            let code = ae.encoder.forward_train(&x)?;
            let recon = ae.decoder.forward_train(&code)?;
            let (loss, grad) = mse_loss(&recon, &x)?;
            let grad_code = ae.decoder.backward(&grad)?;
            ae.encoder.backward(&grad_code)?;
            let mut slots = ae.encoder.param_slots();
            slots.extend(ae.decoder.param_slots());
            adam.update(&mut slots)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batch_count as f64);
    }
    Ok(history)
}

/// Builds and trains the requested side-information producer on the old
/// model's training data. `input_dim` is the raw input dimension and
/// `classes` the label count (used by the classifier variants).
pub fn train_side_info(
    kind: &SideInfoKind,
    inputs: &Matrix,
    labels: &[u32],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(SideInfoModel, Vec<f64>)> {
    match kind {
        SideInfoKind::Zero { dim } => {
            if *dim == 0 {
                return Err(Error::Config("side information needs a positive dimension".into()));
            }
            Ok((SideInfoModel::Zero { dim: *dim }, Vec::new()))
        }
        SideInfoKind::Autoencoder { hidden, code_dim } => {
            let mut ae = build_autoencoder(inputs.cols(), *hidden, *code_dim, cfg.seed)?;
            let history = train_autoencoder(&mut ae, inputs, cfg)?;
            Ok((SideInfoModel::Autoencoder(ae), history))
        }
        SideInfoKind::AlternateClassifier { hidden, depth, embed_dim } => {
            let mut net =
                build_embedder(inputs.cols(), *hidden, *depth, *embed_dim, classes, cfg.seed)?;
            let history = train_embedder(&mut net, inputs, labels, cfg)?;
            Ok((SideInfoModel::Embedder(net), history))
        }
        SideInfoKind::Mixup { hidden, depth, embed_dim, alpha } => {
            let mut net =
                build_embedder(inputs.cols(), *hidden, *depth, *embed_dim, classes, cfg.seed)?;
            let history = train_embedder_mixup(&mut net, inputs, labels, *alpha, cfg)?;
            Ok((SideInfoModel::Embedder(net), history))
        }
        SideInfoKind::Contrastive { hidden, depth, embed_dim, temperature, noise_std } => {
            let mut net =
                build_embedder(inputs.cols(), *hidden, *depth, *embed_dim, classes, cfg.seed)?;
            let history =
                train_embedder_contrastive(&mut net, inputs, *temperature, *noise_std, cfg)?;
            Ok((SideInfoModel::Embedder(net), history))
        }
    }
}

/// Trains a transformation to map `(old_emb, side_info)` rows onto `target`
/// rows. All three matrices are precomputed by frozen models, so those
/// models cannot drift during this loop.
///
/// With [`LossKind::Mse`] and a normalizing network, targets are normalized
/// once up front so the objective is attainable. The KL variants project
/// prediction and raw target through `head` (the new model's frozen
/// classifier) and match the induced class distributions.
pub fn train_transformation(
    net: &mut TransformationNet,
    old_emb: &Matrix,
    side_info: &Matrix,
    target: &Matrix,
    cfg: &TrainConfig,
    loss: LossKind,
    head: Option<&AffineLayer>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let rows = old_emb.rows();
    if side_info.rows() != rows || target.rows() != rows {
        return Err(Error::Shape(format!(
            "feature row counts disagree: {} old, {} side, {} target",
            rows,
            side_info.rows(),
            target.rows()
        )));
    }
    if old_emb.cols() != net.d_old()
        || side_info.cols() != net.d_side()
        || target.cols() != net.d_new()
    {
        return Err(Error::Shape(format!(
            "feature dims ({}, {}, {}) do not match the transformation ({}, {}, {})",
            old_emb.cols(),
            side_info.cols(),
            target.cols(),
            net.d_old(),
            net.d_side(),
            net.d_new()
        )));
    }
    if rows < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            rows, cfg.batch_size
        )));
    }
    let head = match loss {
        LossKind::Mse => None,
        LossKind::Kl | LossKind::KlReversed => Some(head.ok_or_else(|| {
            Error::Config("distillation losses need the new model's classifier head".into())
        })?),
    };
    let target = if matches!(loss, LossKind::Mse) && net.normalize_output() {
        l2_normalize_rows(target)?.0
    } else {
        target.clone()
    };
    let schedule = cfg.schedule()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.bn_freeze_epoch == Some(epoch) {
            net.freeze_bn_stats();
        }
        adam.lr = lr_at_epoch(&schedule, epoch)?;
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(rows, cfg.batch_size, &mut rng);
        let batch_count = batches.len();
        for batch in batches {
            let x_old = old_emb.select_rows(&batch);
            let x_side = side_info.select_rows(&batch);
            let t = target.select_rows(&batch);
            net.zero_grads();
            let pred = net.forward_train(&x_old, &x_side)?;
            let (loss_value, grad) = match (loss, head) {
                (LossKind::Mse, _) => mse_loss(&pred, &t)?,
                (LossKind::Kl, Some(h)) => kl_distillation_loss(&pred, &t, h, false)?,
                (LossKind::KlReversed, Some(h)) => kl_distillation_loss(&pred, &t, h, true)?,
                _ => unreachable!("head presence checked above"),
            };
            net.backward(&grad)?;
            adam.update(&mut net.param_slots())?;
            epoch_loss += loss_value;
        }
        history.push(epoch_loss / batch_count as f64);
    }
    Ok(history)
}

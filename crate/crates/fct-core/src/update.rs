//! Gallery version migration and deployment cost accounting.
//!
//! Applying a transformation to a gallery is a pure per-record function
//! (inference mode only), so the result is independent of how records are
//! batched. The cost model compares strategies for moving a deployed
//! gallery to a new embedding model: recomputing everything centrally,
//! shipping raw data back to devices for recomputation, or broadcasting a
//! small transformation and converting records in place. Only affine
//! multiply-accumulates and 4-byte float storage are counted.

use serde::{Deserialize, Serialize};

use crate::models::{EmbedderNet, TransformationNet};
use crate::numerics::Matrix;
use crate::retrieval::{GalleryRecord, GalleryStore};
use crate::{Error, Result};

/// How a deployment moves its gallery to the new model version.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    /// Recompute every embedding on the server from centrally stored raw
    /// data, then push the new embeddings to devices.
    FullBackfillCentral,
    /// Ship raw data to each device and recompute there.
    FullBackfillDownload,
    /// Broadcast the transformation weights; devices convert records.
    FctTransform,
    /// Keep the old gallery as is.
    NoUpdate,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 4] = [
        UpdateStrategy::FullBackfillCentral,
        UpdateStrategy::FullBackfillDownload,
        UpdateStrategy::FctTransform,
        UpdateStrategy::NoUpdate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UpdateStrategy::FullBackfillCentral => "full_backfill_central",
            UpdateStrategy::FullBackfillDownload => "full_backfill_download",
            UpdateStrategy::FctTransform => "fct_transform",
            UpdateStrategy::NoUpdate => "no_update",
        }
    }
}

/// One planned version migration.
#[derive(Clone, Copy, Debug)]
pub struct UpdatePlan<'a> {
    pub strategy: UpdateStrategy,
    pub from_version: u32,
    pub to_version: u32,
    /// Embedding transformation, required for [`UpdateStrategy::FctTransform`].
    pub h: Option<&'a TransformationNet>,
    /// Side-information transformation; absent for terminal updates.
    pub g: Option<&'a TransformationNet>,
}

impl UpdatePlan<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.to_version <= self.from_version {
            return Err(Error::Config(format!(
                "update must advance the version, got {} -> {}",
                self.from_version, self.to_version
            )));
        }
        if self.strategy == UpdateStrategy::FctTransform && self.h.is_none() {
            return Err(Error::Config(
                "transformation strategy needs an embedding transformation".into(),
            ));
        }
        Ok(())
    }
}

fn check_transform_dims(
    gallery: &GalleryStore,
    h: &TransformationNet,
    g: Option<&TransformationNet>,
) -> Result<()> {
    if gallery.d_emb() != h.d_old() || gallery.d_side() != h.d_side() {
        return Err(Error::Shape(format!(
            "gallery stores ({}, {}) dims but the transformation expects ({}, {})",
            gallery.d_emb(),
            gallery.d_side(),
            h.d_old(),
            h.d_side()
        )));
    }
    if let Some(g) = g {
        if g.d_old() != h.d_old() || g.d_side() != h.d_side() {
            return Err(Error::Shape(format!(
                "side transformation expects ({}, {}) dims but records hold ({}, {})",
                g.d_old(),
                g.d_side(),
                gallery.d_emb(),
                gallery.d_side()
            )));
        }
    }
    Ok(())
}

fn transform_to_version(
    gallery: &GalleryStore,
    h: &TransformationNet,
    g: Option<&TransformationNet>,
    batch_size: usize,
    new_version: u32,
) -> Result<GalleryStore> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    check_transform_dims(gallery, h, g)?;
    let new_side = g.map(|g| g.d_new()).unwrap_or(0);
    let mut out = GalleryStore::new(h.d_new(), new_side, new_version, h.normalize_output())?;
    for chunk in gallery.records().chunks(batch_size) {
        let mut old = Matrix::zeros(chunk.len(), gallery.d_emb());
        let mut side = Matrix::zeros(chunk.len(), gallery.d_side());
        for (r, rec) in chunk.iter().enumerate() {
            old.row_mut(r).copy_from_slice(&rec.embedding);
            side.row_mut(r).copy_from_slice(&rec.side_info);
        }
        let emb = h.forward_infer(&old, &side)?;
        let side_new = match g {
            Some(g) => Some(g.forward_infer(&old, &side)?),
            None => None,
        };
        for (r, rec) in chunk.iter().enumerate() {
            out.push(GalleryRecord {
                id: rec.id,
                class_label: rec.class_label,
                embedding: emb.row(r).to_vec(),
                side_info: side_new.as_ref().map(|m| m.row(r).to_vec()).unwrap_or_default(),
            })?;
        }
    }
    Ok(out)
}

/// Replaces every record's embedding with `h(embedding, side_info)` and,
/// when `g` is given, its side information with `g(embedding, side_info)`;
/// without `g` the result stores no side information (a terminal update).
/// Ids and labels are preserved and the version advances by one.
pub fn apply_fct_update(
    gallery: &GalleryStore,
    h: &TransformationNet,
    g: Option<&TransformationNet>,
    batch_size: usize,
) -> Result<GalleryStore> {
    let next = gallery
        .model_version()
        .checked_add(1)
        .ok_or_else(|| Error::State("gallery version counter exhausted".into()))?;
    transform_to_version(gallery, h, g, batch_size, next)
}

/// Executes a plan against a gallery, refusing it when the stored version
/// does not match the plan's source version. Backfill strategies recompute
/// from raw data, which a gallery of embeddings cannot provide; they exist
/// in the cost model only.
pub fn apply_plan(
    gallery: &GalleryStore,
    plan: &UpdatePlan<'_>,
    batch_size: usize,
) -> Result<GalleryStore> {
    plan.validate()?;
    if gallery.model_version() != plan.from_version {
        return Err(Error::VersionRegression {
            gallery: gallery.model_version(),
            expected: plan.from_version,
        });
    }
    match plan.strategy {
        UpdateStrategy::NoUpdate => Ok(gallery.clone()),
        UpdateStrategy::FctTransform => {
            let h = plan.h.expect("validated above");
            transform_to_version(gallery, h, plan.g, batch_size, plan.to_version)
        }
        UpdateStrategy::FullBackfillCentral | UpdateStrategy::FullBackfillDownload => {
            Err(Error::Config(
                "backfill strategies recompute embeddings from raw data; \
                 only their costs are modeled here"
                    .into(),
            ))
        }
    }
}

/// One hop of a sequential update chain.
#[derive(Clone, Copy, Debug)]
pub struct UpdateStep<'a> {
    pub h: &'a TransformationNet,
    pub g: Option<&'a TransformationNet>,
}

/// Applies a chain of updates in order. Every hop except the last must
/// carry a side transformation, otherwise the following hop would have no
/// side information to consume.
pub fn apply_sequence(
    gallery: &GalleryStore,
    steps: &[UpdateStep<'_>],
    batch_size: usize,
) -> Result<GalleryStore> {
    if steps.is_empty() {
        return Err(Error::Config("update chain is empty".into()));
    }
    for (i, step) in steps.iter().enumerate() {
        if i + 1 < steps.len() && step.g.is_none() {
            return Err(Error::Config(format!(
                "chain hop {i} drops side information that hop {} needs",
                i + 1
            )));
        }
    }
    let mut current = apply_fct_update(gallery, steps[0].h, steps[0].g, batch_size)?;
    for step in &steps[1..] {
        current = apply_fct_update(&current, step.h, step.g, batch_size)?;
    }
    Ok(current)
}

/// Applies one long-hop transformation that jumps several versions at once,
/// landing directly on `to_version`.
pub fn apply_direct(
    gallery: &GalleryStore,
    h: &TransformationNet,
    to_version: u32,
    batch_size: usize,
) -> Result<GalleryStore> {
    if to_version <= gallery.model_version() {
        return Err(Error::VersionRegression {
            gallery: gallery.model_version(),
            expected: to_version,
        });
    }
    transform_to_version(gallery, h, None, batch_size, to_version)
}

/// Fleet shape and raw-data size for the cost simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentModel {
    pub device_count: u64,
    pub records_per_device: u64,
    /// Bytes of one raw gallery item; defaults to an uncompressed
    /// 3 x 224 x 224 image.
    pub image_bytes: u64,
}

impl DeploymentModel {
    pub const DEFAULT_IMAGE_BYTES: u64 = 3 * 224 * 224;

    pub fn total_records(&self) -> Result<u64> {
        mul(self.device_count, self.records_per_device)
    }
}

/// Per-record compute and per-network weight sizes that the strategies
/// trade against each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCosts {
    /// Affine MACs of one new-model embedding forward.
    pub new_embedder_macs: u64,
    pub h_macs: u64,
    pub g_macs: u64,
    pub h_weight_bytes: u64,
    pub g_weight_bytes: u64,
    pub d_emb_new: u64,
    pub d_side_new: u64,
}

const F32_BYTES: u64 = 4;

impl ModelCosts {
    pub fn from_models(
        new_embedder: &EmbedderNet,
        h: &TransformationNet,
        g: Option<&TransformationNet>,
    ) -> Self {
        ModelCosts {
            new_embedder_macs: new_embedder.embed_mac_count() as u64,
            h_macs: h.mac_count() as u64,
            g_macs: g.map(|g| g.mac_count() as u64).unwrap_or(0),
            h_weight_bytes: h.param_count() as u64 * F32_BYTES,
            g_weight_bytes: g.map(|g| g.param_count() as u64 * F32_BYTES).unwrap_or(0),
            d_emb_new: h.d_new() as u64,
            d_side_new: g.map(|g| g.d_new() as u64).unwrap_or(0),
        }
    }
}

/// Cost of one strategy, totalled over the whole fleet except for the
/// per-record storage column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCost {
    pub strategy: UpdateStrategy,
    pub server_macs: u64,
    pub device_macs: u64,
    pub bytes_transferred_server_to_device: u64,
    /// Extra bytes each record costs beyond its embedding: retained raw
    /// data for the backfill strategies, side information for the
    /// transformation strategy.
    pub bytes_stored_per_record: u64,
}

/// Cost comparison across all strategies for one deployment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCostReport {
    pub strategies: Vec<StrategyCost>,
}

impl UpdateCostReport {
    pub fn get(&self, strategy: UpdateStrategy) -> Option<&StrategyCost> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Config("cost arithmetic exceeds 64 bits".into()))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b)
        .ok_or_else(|| Error::Config("cost arithmetic exceeds 64 bits".into()))
}

/// Costs one strategy for a deployment.
pub fn strategy_cost(
    deployment: &DeploymentModel,
    costs: &ModelCosts,
    strategy: UpdateStrategy,
) -> Result<StrategyCost> {
    let records = deployment.total_records()?;
    let (server_macs, device_macs, transferred, stored) = match strategy {
        UpdateStrategy::FullBackfillCentral => (
            mul(costs.new_embedder_macs, records)?,
            0,
            mul(mul(costs.d_emb_new, F32_BYTES)?, records)?,
            deployment.image_bytes,
        ),
        UpdateStrategy::FullBackfillDownload => (
            0,
            mul(costs.new_embedder_macs, records)?,
            mul(deployment.image_bytes, records)?,
            deployment.image_bytes,
        ),
        UpdateStrategy::FctTransform => (
            0,
            mul(add(costs.h_macs, costs.g_macs)?, records)?,
            mul(
                add(costs.h_weight_bytes, costs.g_weight_bytes)?,
                deployment.device_count,
            )?,
            mul(costs.d_side_new, F32_BYTES)?,
        ),
        UpdateStrategy::NoUpdate => (0, 0, 0, 0),
    };
    Ok(StrategyCost {
        strategy,
        server_macs,
        device_macs,
        bytes_transferred_server_to_device: transferred,
        bytes_stored_per_record: stored,
    })
}

/// Costs every strategy for one deployment, in a fixed row order.
pub fn cost_report(deployment: &DeploymentModel, costs: &ModelCosts) -> Result<UpdateCostReport> {
    let strategies = UpdateStrategy::ALL
        .iter()
        .map(|&s| strategy_cost(deployment, costs, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(UpdateCostReport { strategies })
}

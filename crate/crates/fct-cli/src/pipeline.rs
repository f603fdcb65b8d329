//! Experiment stages and the end-to-end pipeline.
//!
//! Every stage reads its inputs from the artifact directory and writes its
//! outputs back there atomically, so stages can run individually or chained
//! by `run`. The flow: generate labeled data, train the old embedder on the
//! reduced shape set with color labels, train the side-information producer
//! on the same data, train the new embedder on everything with joint
//! labels, fit the transformation, then evaluate the five query/gallery
//! pairings and the update cost table.
//!
//! Galleries are written to disk (f32) and reloaded before evaluation, so
//! reports reflect exactly what the persisted format stores.

use std::path::{Path, PathBuf};

use fct_core::models::{build_embedder, build_transformation, EmbedderNet};
use fct_core::numerics::Matrix;
use fct_core::retrieval::{
    evaluate_pairing, GalleryRecord, GalleryStore, GroupSpec, QuerySet, RetrievalReport,
};
use fct_core::synthdata::{make_domain, sample_per_cell, LabeledSet, LabelMode, SyntheticDomain};
use fct_core::training::{
    train_embedder, train_side_info, train_transformation, SideInfoModel,
};
use fct_core::update::{apply_plan, cost_report, DeploymentModel, ModelCosts, UpdatePlan, UpdateStrategy};
use fct_core::{Error, Result};

use crate::checkpoint::{
    load_embedder, load_side_info, load_transform, save_embedder, save_side_info,
    save_transform, TransformCheckpoint,
};
use crate::config::ExperimentConfig;
use crate::gallery::{load_gallery, save_gallery};
use crate::io::{atomic_write, read_text};
use crate::report::{
    write_costs_csv, write_costs_json, write_groups_csv, write_loss_csv, write_reports_json,
    write_summary_csv,
};

/// Which embedder a training stage produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Old,
    New,
}

/// Well-known artifact locations under one output directory.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Paths { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.json"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn gallery(&self, name: &str) -> PathBuf {
        self.root.join("galleries").join(format!("{name}.fctg"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name.to_string())
    }
}

fn save_set(path: &Path, set: &LabeledSet) -> Result<()> {
    let text = serde_json::to_string(set)
        .map_err(|e| Error::Data(format!("cannot serialize dataset: {e}")))?;
    atomic_write(path, text.as_bytes())
}

fn load_set(path: &Path) -> Result<LabeledSet> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Data(format!("{} is not a dataset: {e}", path.display())))
}

fn build_domain(cfg: &ExperimentConfig) -> Result<SyntheticDomain> {
    let d = &cfg.domain;
    make_domain(d.colors, d.shapes, d.ambient_dim, d.sigma, d.seed)
}

/// Samples the four datasets: old training (reduced shapes, color labels),
/// new training (all cells, joint labels), and the balanced gallery and
/// query evaluation sets.
pub fn stage_gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let domain = build_domain(cfg)?;
    let colors = cfg.all_colors();
    let shapes = cfg.all_shapes();
    let train_old = sample_per_cell(
        &domain,
        cfg.splits.train_per_cell,
        &colors,
        &cfg.splits.old_shapes,
        LabelMode::Color,
        cfg.splits.seed_train_old,
    )?;
    let train_new = sample_per_cell(
        &domain,
        cfg.splits.train_per_cell,
        &colors,
        &shapes,
        LabelMode::Joint,
        cfg.splits.seed_train_new,
    )?;
    let gallery = sample_per_cell(
        &domain,
        cfg.splits.eval_per_cell,
        &colors,
        &shapes,
        LabelMode::Joint,
        cfg.splits.seed_gallery,
    )?;
    let query = sample_per_cell(
        &domain,
        cfg.splits.eval_per_cell,
        &colors,
        &shapes,
        LabelMode::Joint,
        cfg.splits.seed_query,
    )?;
    save_set(&paths.data("train_old"), &train_old)?;
    save_set(&paths.data("train_new"), &train_new)?;
    save_set(&paths.data("gallery"), &gallery)?;
    save_set(&paths.data("query"), &query)?;
    println!(
        "generated data: train_old {} rows, train_new {} rows, gallery {} rows, query {} rows",
        train_old.len(),
        train_new.len(),
        gallery.len(),
        query.len()
    );
    Ok(())
}

/// Trains the old or new embedder on its dataset and checkpoints it.
pub fn stage_train_embedder(cfg: &ExperimentConfig, paths: &Paths, role: Role) -> Result<()> {
    let (data_name, ckpt_name, section, embed_dim) = match role {
        Role::Old => ("train_old", "old_embedder", &cfg.train_old, cfg.models.d_old),
        Role::New => ("train_new", "new_embedder", &cfg.train_new, cfg.models.d_new),
    };
    let set = load_set(&paths.data(data_name))?;
    let labels = set.active_labels();
    let mut net = build_embedder(
        cfg.domain.ambient_dim,
        cfg.models.embedder_hidden,
        cfg.models.embedder_depth,
        embed_dim,
        set.class_count(),
        section.seed,
    )?;
    let history = train_embedder(&mut net, &set.inputs, &labels, &section.to_train_config())?;
    save_embedder(&paths.checkpoint(ckpt_name), &net)?;
    write_loss_csv(&paths.report(&format!("loss_{ckpt_name}.csv")), &history)?;
    println!(
        "trained {ckpt_name}: {} epochs, final loss {:.6}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Trains the configured side-information producer on the old model's data.
pub fn stage_train_side_info(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let set = load_set(&paths.data("train_old"))?;
    let labels = set.active_labels();
    let kind = cfg.side_info.to_kind(cfg.models.d_side);
    let (model, history) = train_side_info(
        &kind,
        &set.inputs,
        &labels,
        set.class_count(),
        &cfg.train_side.to_train_config(),
    )?;
    save_side_info(&paths.checkpoint("side_info"), &model)?;
    write_loss_csv(&paths.report("loss_side_info.csv"), &history)?;
    println!("trained side info ({} dims)", model.dim());
    Ok(())
}

/// Fits the transformation from (old embedding, side info) to the new
/// embedding on the new model's training data, with all three producers
/// frozen as checkpoints.
pub fn stage_train_transform(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let set = load_set(&paths.data("train_new"))?;
    let old = load_embedder(&paths.checkpoint("old_embedder"))?;
    let new = load_embedder(&paths.checkpoint("new_embedder"))?;
    let side = load_side_info(&paths.checkpoint("side_info"))?;
    let old_emb = old.embed(&set.inputs)?;
    let side_info = side.apply(&set.inputs)?;
    let target = new.embed(&set.inputs)?;
    let mut net = build_transformation(
        cfg.models.d_old,
        cfg.models.d_side,
        cfg.models.d_new,
        cfg.models.width_multiplier,
        cfg.models.normalize_output,
        cfg.train_transform.seed,
    )?;
    let history = train_transformation(
        &mut net,
        &old_emb,
        &side_info,
        &target,
        &cfg.train_transform.to_train_config(),
        cfg.loss_kind,
        Some(new.head()),
    )?;
    let ckpt = TransformCheckpoint { from_version: 1, to_version: 2, net, side_net: None };
    save_transform(&paths.checkpoint("transformation"), &ckpt)?;
    write_loss_csv(&paths.report("loss_transformation.csv"), &history)?;
    println!(
        "trained transformation: {} epochs, final loss {:.6}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn gallery_from_embeddings(
    embeddings: &Matrix,
    side_info: Option<&Matrix>,
    labels: &[u32],
    version: u32,
    normalized: bool,
) -> Result<GalleryStore> {
    let d_side = side_info.map(|m| m.cols()).unwrap_or(0);
    let mut store = GalleryStore::new(embeddings.cols(), d_side, version, normalized)?;
    for i in 0..embeddings.rows() {
        store.push(GalleryRecord {
            id: i as u64,
            class_label: labels[i],
            embedding: embeddings.row(i).to_vec(),
            side_info: side_info.map(|m| m.row(i).to_vec()).unwrap_or_default(),
        })?;
    }
    Ok(store)
}

fn save_and_reload(store: &GalleryStore, path: &Path) -> Result<GalleryStore> {
    save_gallery(store, path)?;
    load_gallery(path)
}

/// Joint classes split into shapes the old model saw and shapes it did not.
fn shape_groups(cfg: &ExperimentConfig) -> Vec<GroupSpec> {
    let shapes = cfg.domain.shapes as u32;
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for c in 0..cfg.domain.colors as u32 {
        for s in 0..shapes {
            let label = c * shapes + s;
            if cfg.splits.old_shapes.contains(&(s as usize)) {
                seen.push(label);
            } else {
                unseen.push(label);
            }
        }
    }
    let mut groups = vec![GroupSpec { name: "seen_shapes".into(), classes: seen }];
    if !unseen.is_empty() {
        groups.push(GroupSpec { name: "unseen_shapes".into(), classes: unseen });
    }
    groups
}

/// Builds the galleries (persisting each one and evaluating the reloaded
/// f32 values), runs the five pairings, and writes the report files.
pub fn stage_eval(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<RetrievalReport>> {
    let gallery_set = load_set(&paths.data("gallery"))?;
    let query_set = load_set(&paths.data("query"))?;
    let old = load_embedder(&paths.checkpoint("old_embedder"))?;
    let new = load_embedder(&paths.checkpoint("new_embedder"))?;
    let side = load_side_info(&paths.checkpoint("side_info"))?;
    let transform = load_transform(&paths.checkpoint("transformation"))?;

    let gallery_labels: Vec<u32> =
        (0..gallery_set.len()).map(|i| gallery_set.joint_label(i)).collect();
    let query_labels: Vec<u32> =
        (0..query_set.len()).map(|i| query_set.joint_label(i)).collect();

    let g_old_emb = old.embed(&gallery_set.inputs)?;
    let g_old_side = side.apply(&gallery_set.inputs)?;
    let g_old = save_and_reload(
        &gallery_from_embeddings(&g_old_emb, Some(&g_old_side), &gallery_labels, 1, false)?,
        &paths.gallery("gallery_old"),
    )?;

    let g_new_emb = new.embed(&gallery_set.inputs)?;
    let g_new = save_and_reload(
        &gallery_from_embeddings(&g_new_emb, None, &gallery_labels, 2, false)?,
        &paths.gallery("gallery_new"),
    )?;

    let plan = UpdatePlan {
        strategy: UpdateStrategy::FctTransform,
        from_version: transform.from_version,
        to_version: transform.to_version,
        h: Some(&transform.net),
        g: transform.side_net.as_ref(),
    };
    let g_transformed = save_and_reload(
        &apply_plan(&g_old, &plan, cfg.eval.update_batch_size)?,
        &paths.gallery("gallery_transformed"),
    )?;

    let q_old = old.embed(&query_set.inputs)?;
    let q_new = new.embed(&query_set.inputs)?;
    let q_side = side.apply(&query_set.inputs)?;
    let q_transformed = transform.net.forward_infer(&q_old, &q_side)?;

    let groups = shape_groups(cfg);
    let ks = &cfg.eval.cmc_ks;
    let queries_of = |emb: &Matrix| QuerySet::new(emb.clone(), query_labels.clone(), None);

    let mut reports = Vec::new();
    reports.push(evaluate_pairing(
        "old/old",
        &queries_of(&q_old)?,
        &g_old,
        &groups,
        ks,
        true,
    )?);
    reports.push(evaluate_pairing(
        "new/new",
        &queries_of(&q_new)?,
        &g_new,
        &groups,
        ks,
        true,
    )?);
    if cfg.models.d_old == cfg.models.d_new {
        reports.push(evaluate_pairing(
            "new/old",
            &queries_of(&q_new)?,
            &g_old,
            &groups,
            ks,
            true,
        )?);
    }
    reports.push(evaluate_pairing(
        "new/h(old,side)",
        &queries_of(&q_new)?,
        &g_transformed,
        &groups,
        ks,
        true,
    )?);
    reports.push(evaluate_pairing(
        "h(old,side)/h(old,side)",
        &queries_of(&q_transformed)?,
        &g_transformed,
        &groups,
        ks,
        true,
    )?);

    write_summary_csv(&paths.report("summary.csv"), &reports)?;
    write_groups_csv(&paths.report("groups.csv"), &reports)?;
    write_reports_json(&paths.report("reports.json"), &reports)?;
    for r in &reports {
        let top1 = r.cmc.get(&1).copied().unwrap_or(0.0);
        println!("{:<26} top-1 {:.4}  map {:.4}", r.case, top1, r.map);
    }
    Ok(reports)
}

/// Applies the trained transformation to a persisted gallery, enforcing
/// that the stored version matches the checkpoint's source version.
pub fn stage_update(cfg: &ExperimentConfig, paths: &Paths, gallery: Option<&Path>) -> Result<()> {
    let transform = load_transform(&paths.checkpoint("transformation"))?;
    let source = gallery.map(Path::to_path_buf).unwrap_or_else(|| paths.gallery("gallery_old"));
    let store = load_gallery(&source)?;
    let plan = UpdatePlan {
        strategy: UpdateStrategy::FctTransform,
        from_version: transform.from_version,
        to_version: transform.to_version,
        h: Some(&transform.net),
        g: transform.side_net.as_ref(),
    };
    let updated = apply_plan(&store, &plan, cfg.eval.update_batch_size)?;
    save_gallery(&updated, &paths.gallery("gallery_updated"))?;
    println!(
        "updated {} records from version {} to {}",
        updated.len(),
        transform.from_version,
        updated.model_version()
    );
    Ok(())
}

/// Writes the strategy cost table for the configured deployment.
pub fn stage_simulate_costs(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let new = load_embedder(&paths.checkpoint("new_embedder"))?;
    let transform = load_transform(&paths.checkpoint("transformation"))?;
    let costs = ModelCosts::from_models(&new, &transform.net, transform.side_net.as_ref());
    let deployment = DeploymentModel {
        device_count: cfg.deployment.device_count,
        records_per_device: cfg.deployment.records_per_device,
        image_bytes: cfg.deployment.image_bytes,
    };
    let report = cost_report(&deployment, &costs)?;
    write_costs_csv(&paths.report("costs.csv"), &report)?;
    write_costs_json(&paths.report("costs.json"), &report)?;
    println!("cost table written for {} devices", deployment.device_count);
    Ok(())
}

/// Human-readable resolved plan, printed by `run --dry-run`.
pub fn describe_plan(cfg: &ExperimentConfig, paths: &Paths) -> String {
    let d = &cfg.domain;
    let m = &cfg.models;
    format!(
        "plan (out: {root}):\n\
         1. gen-data: {c}x{s} cells, ambient {amb}, sigma {sig}, {tpc}/cell train, {epc}/cell eval, old shapes {os:?}\n\
         2. train-embedder --role old: {amb} -> {hid}x{dep} -> {dold} dims, color labels, {eo} epochs\n\
         3. train-side-info: {side:?} -> {dside} dims, {es} epochs\n\
         4. train-embedder --role new: {amb} -> {hid}x{dep} -> {dnew} dims, joint labels, {en} epochs\n\
         5. train-transform: ({dold}+{dside}) -> {dnew}, width x{w}, loss {loss:?}, {et} epochs, bn freeze {bnf:?}\n\
         6. eval: pairings old/old, new/new{cross}, new/h(old,side), h/h at ks {ks:?}\n\
         7. simulate-costs: {dev} devices x {rpd} records, {img} image bytes",
        root = paths.root().display(),
        c = d.colors,
        s = d.shapes,
        amb = d.ambient_dim,
        sig = d.sigma,
        tpc = cfg.splits.train_per_cell,
        epc = cfg.splits.eval_per_cell,
        os = cfg.splits.old_shapes,
        hid = m.embedder_hidden,
        dep = m.embedder_depth,
        dold = m.d_old,
        dnew = m.d_new,
        dside = m.d_side,
        eo = cfg.train_old.epochs,
        es = cfg.train_side.epochs,
        en = cfg.train_new.epochs,
        et = cfg.train_transform.epochs,
        w = m.width_multiplier,
        loss = cfg.loss_kind,
        bnf = cfg.train_transform.bn_freeze_epoch,
        side = cfg.side_info,
        cross = if m.d_old == m.d_new { ", new/old" } else { "" },
        ks = cfg.eval.cmc_ks,
        dev = cfg.deployment.device_count,
        rpd = cfg.deployment.records_per_device,
        img = cfg.deployment.image_bytes,
    )
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    stage_gen_data(cfg, paths)?;
    stage_train_embedder(cfg, paths, Role::Old)?;
    stage_train_side_info(cfg, paths)?;
    stage_train_embedder(cfg, paths, Role::New)?;
    stage_train_transform(cfg, paths)?;
    stage_eval(cfg, paths)?;
    stage_simulate_costs(cfg, paths)?;
    Ok(())
}

/// Loads datasets, checkpoints, and a trained side model for reuse by
/// callers outside the stage flow (the acceptance experiments use this to
/// compose chains).
pub fn load_trained_embedder(paths: &Paths, role: Role) -> Result<EmbedderNet> {
    let name = match role {
        Role::Old => "old_embedder",
        Role::New => "new_embedder",
    };
    load_embedder(&paths.checkpoint(name))
}

pub fn load_trained_side(paths: &Paths) -> Result<SideInfoModel> {
    load_side_info(&paths.checkpoint("side_info"))
}

//! Gallery storage and retrieval evaluation: exact k-NN ranking, CMC,
//! mean average precision, and linear CKA.
//!
//! Ranking is brute-force L2 over the whole gallery with ties broken by
//! ascending record id, so results are exactly reproducible. Queries whose
//! class has no gallery representative (after self-exclusion) are skipped
//! and counted rather than failing the evaluation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

/// One stored gallery entry: the embedding under some model version plus
/// the side-information vector captured when the record was inserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub id: u64,
    pub class_label: u32,
    pub embedding: Vec<f64>,
    pub side_info: Vec<f64>,
}

/// A gallery of records embedded under a single model version.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryStore {
    d_emb: usize,
    d_side: usize,
    model_version: u32,
    normalized: bool,
    records: Vec<GalleryRecord>,
    ids: HashSet<u64>,
}

impl GalleryStore {
    pub fn new(d_emb: usize, d_side: usize, model_version: u32, normalized: bool) -> Result<Self> {
        if d_emb == 0 {
            return Err(Error::Config("gallery embedding dimension must be positive".into()));
        }
        Ok(GalleryStore {
            d_emb,
            d_side,
            model_version,
            normalized,
            records: Vec::new(),
            ids: HashSet::new(),
        })
    }

    /// Appends a record, enforcing dimensions, id uniqueness, finiteness,
    /// and (for normalized galleries) unit-norm embeddings within 1e-6.
    pub fn push(&mut self, record: GalleryRecord) -> Result<()> {
        if record.embedding.len() != self.d_emb {
            return Err(Error::Shape(format!(
                "record {} embedding has {} dims, gallery stores {}",
                record.id,
                record.embedding.len(),
                self.d_emb
            )));
        }
        if record.side_info.len() != self.d_side {
            return Err(Error::Shape(format!(
                "record {} side info has {} dims, gallery stores {}",
                record.id,
                record.side_info.len(),
                self.d_side
            )));
        }
        if record
            .embedding
            .iter()
            .chain(&record.side_info)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("record {}", record.id)));
        }
        if self.ids.contains(&record.id) {
            return Err(Error::Data(format!("duplicate record id {}", record.id)));
        }
        if self.normalized {
            let norm: f64 = record.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "record {} has norm {norm} in a normalized gallery",
                    record.id
                )));
            }
        }
        self.ids.insert(record.id);
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn d_side(&self) -> usize {
        self.d_side
    }

    pub fn model_version(&self) -> u32 {
        self.model_version
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    /// All embeddings stacked row-wise, in record order.
    pub fn embedding_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.records.len(), self.d_emb);
        for (i, rec) in self.records.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&rec.embedding);
        }
        m
    }

    /// All side-information vectors stacked row-wise, in record order.
    pub fn side_info_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.records.len(), self.d_side);
        for (i, rec) in self.records.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&rec.side_info);
        }
        m
    }

    /// Rounds every stored value through `f32`, matching what persistence
    /// keeps, so evaluation before and after a save/load cycle agrees.
    pub fn quantize_to_f32(&mut self) {
        for rec in &mut self.records {
            for v in rec.embedding.iter_mut().chain(rec.side_info.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Queries for a retrieval evaluation. `exclude_ids[i]`, when present, is a
/// gallery id hidden from query `i` (the leave-one-out convention for
/// galleries that contain the queries themselves).
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub embeddings: Matrix,
    pub labels: Vec<u32>,
    pub exclude_ids: Option<Vec<u64>>,
}

impl QuerySet {
    pub fn new(embeddings: Matrix, labels: Vec<u32>, exclude_ids: Option<Vec<u64>>) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} query embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        if let Some(ex) = &exclude_ids {
            if ex.len() != embeddings.rows() {
                return Err(Error::Shape(format!(
                    "{} exclusion ids for {} queries",
                    ex.len(),
                    embeddings.rows()
                )));
            }
        }
        Ok(QuerySet { embeddings, labels, exclude_ids })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn exclude_for(&self, i: usize) -> Option<u64> {
        self.exclude_ids.as_ref().map(|e| e[i])
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Indices of gallery records sorted by ascending L2 distance to `query`,
/// ties by ascending record id, with `exclude_id` removed.
fn rank_indices(query: &[f64], gallery: &GalleryStore, exclude_id: Option<u64>) -> Vec<usize> {
    let mut order: Vec<(f64, u64, usize)> = gallery
        .records
        .iter()
        .enumerate()
        .filter(|(_, rec)| Some(rec.id) != exclude_id)
        .map(|(i, rec)| (squared_distance(query, &rec.embedding), rec.id, i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, _, i)| i).collect()
}

/// Full retrieval ranking for one query: record ids from nearest to
/// farthest by L2 distance, ties broken by ascending id.
pub fn knn_rank(query: &[f64], gallery: &GalleryStore, exclude_id: Option<u64>) -> Result<Vec<u64>> {
    if query.len() != gallery.d_emb {
        return Err(Error::Shape(format!(
            "query has {} dims, gallery stores {}",
            query.len(),
            gallery.d_emb
        )));
    }
    let ranked = rank_indices(query, gallery, exclude_id);
    if ranked.is_empty() {
        return Err(Error::EmptyGallery);
    }
    Ok(ranked.into_iter().map(|i| gallery.records[i].id).collect())
}

/// Per-query outcome shared by the metric computations.
struct RankedQuery {
    /// 1-based rank of the first same-class record.
    first_hit: usize,
    /// Average precision over the full ranking.
    average_precision: f64,
    group_label: u32,
}

fn rank_queries(queries: &QuerySet, gallery: &GalleryStore) -> Result<(Vec<RankedQuery>, usize)> {
    if queries.embeddings.cols() != gallery.d_emb {
        return Err(Error::Shape(format!(
            "queries have {} dims, gallery stores {}",
            queries.embeddings.cols(),
            gallery.d_emb
        )));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut ranked = Vec::with_capacity(queries.len());
    let mut skipped = 0usize;
    for qi in 0..queries.len() {
        let exclude = queries.exclude_for(qi);
        let label = queries.labels[qi];
        let order = rank_indices(queries.embeddings.row(qi), gallery, exclude);
        let relevant_total = order
            .iter()
            .filter(|&&gi| gallery.records[gi].class_label == label)
            .count();
        if relevant_total == 0 {
            skipped += 1;
            continue;
        }
        let mut first_hit = 0usize;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery.records[gi].class_label == label {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_hit == 0 {
                    first_hit = pos + 1;
                }
            }
        }
        ranked.push(RankedQuery {
            first_hit,
            average_precision: precision_sum / relevant_total as f64,
            group_label: label,
        });
    }
    if ranked.is_empty() {
        return Err(Error::DegenerateInput(
            "no query has a same-class gallery record".into(),
        ));
    }
    Ok((ranked, skipped))
}

fn cmc_from_ranked(ranked: &[RankedQuery], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = ranked.len() as f64;
    ks.iter()
        .map(|&k| {
            let hits = ranked.iter().filter(|r| r.first_hit <= k).count();
            (k, hits as f64 / n)
        })
        .collect()
}

/// Cumulative match characteristic: for each `k`, the fraction of queries
/// whose nearest same-class record appears within the top `k`.
///
/// Returns the curve and the number of skipped queries.
pub fn cmc(
    queries: &QuerySet,
    gallery: &GalleryStore,
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, usize)> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("CMC needs positive rank cutoffs".into()));
    }
    let (ranked, skipped) = rank_queries(queries, gallery)?;
    Ok((cmc_from_ranked(&ranked, ks), skipped))
}

/// Non-interpolated mean average precision over the full ranking: each
/// query's AP is the mean of precision-at-rank over the positions of its
/// same-class records, using all of them (recall 1.0).
///
/// Returns the mAP and the number of skipped queries.
pub fn map_at_1(queries: &QuerySet, gallery: &GalleryStore) -> Result<(f64, usize)> {
    let (ranked, skipped) = rank_queries(queries, gallery)?;
    let sum: f64 = ranked.iter().map(|r| r.average_precision).sum();
    Ok((sum / ranked.len() as f64, skipped))
}

/// Linear centered kernel alignment between two representations of the
/// same records (rows aligned): `|Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)`
/// after column centering. Returns 0 when either input has no variance,
/// so a CKA against an all-zero representation is 0 by convention.
pub fn cka_linear(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Shape(format!(
            "CKA inputs must align rows, got {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::DegenerateInput("CKA needs at least two rows".into()));
    }
    let center = |m: &Matrix| {
        let means: Vec<f64> = m.col_sums().iter().map(|s| s / m.rows() as f64).collect();
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (v, mean) in out.row_mut(r).iter_mut().zip(&means) {
                *v -= mean;
            }
        }
        out
    };
    let xc = center(x);
    let yc = center(y);
    let fro_sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
    let cross = fro_sq(&yc.matmul_tn(&xc)?);
    let denom = fro_sq(&xc.matmul_tn(&xc)?).sqrt() * fro_sq(&yc.matmul_tn(&yc)?).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / denom)
}

/// Named class subset for per-group metric breakdowns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub classes: Vec<u32>,
}

/// Per-group CMC slice of a report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub query_count: usize,
    pub cmc: BTreeMap<usize, f64>,
}

/// Everything measured for one (query model, gallery representation) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub case: String,
    pub query_count: usize,
    pub skipped_queries: usize,
    pub cmc: BTreeMap<usize, f64>,
    pub map: f64,
    /// Alignment between the gallery's embeddings and its side information,
    /// when requested.
    pub cka: Option<f64>,
    pub groups: Vec<GroupReport>,
}

/// Evaluates one pairing of query embeddings against a gallery: CMC at the
/// given cutoffs, mean average precision, optional embedding/side-info CKA,
/// and per-group CMC over the provided class subsets.
pub fn evaluate_pairing(
    case: &str,
    queries: &QuerySet,
    gallery: &GalleryStore,
    groups: &[GroupSpec],
    ks: &[usize],
    side_info_cka: bool,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("evaluation needs positive rank cutoffs".into()));
    }
    let (ranked, skipped) = rank_queries(queries, gallery)?;
    let cmc = cmc_from_ranked(&ranked, ks);
    let map = ranked.iter().map(|r| r.average_precision).sum::<f64>() / ranked.len() as f64;
    let cka = if side_info_cka {
        Some(cka_linear(&gallery.embedding_matrix(), &gallery.side_info_matrix())?)
    } else {
        None
    };
    let group_reports = groups
        .iter()
        .map(|spec| {
            let members: Vec<&RankedQuery> = ranked
                .iter()
                .filter(|r| spec.classes.contains(&r.group_label))
                .collect();
            let cmc = if members.is_empty() {
                ks.iter().map(|&k| (k, 0.0)).collect()
            } else {
                let n = members.len() as f64;
                ks.iter()
                    .map(|&k| {
                        let hits = members.iter().filter(|r| r.first_hit <= k).count();
                        (k, hits as f64 / n)
                    })
                    .collect()
            };
            GroupReport { name: spec.name.clone(), query_count: members.len(), cmc }
        })
        .collect();
    Ok(RetrievalReport {
        case: case.to_string(),
        query_count: ranked.len(),
        skipped_queries: skipped,
        cmc,
        map,
        cka,
        groups: group_reports,
    })
}

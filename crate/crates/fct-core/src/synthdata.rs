//! The ColorShape synthetic domain: a factorized Gaussian lattice that
//! stands in for an image corpus when studying embedding-model updates.
//!
//! Every sample is `x = W_color e_c + W_shape e_s + sigma * noise` in an
//! ambient space of dimension `D`, where the columns of `W_color` and
//! `W_shape` are a jointly orthonormal basis drawn from a seeded Gaussian.
//! A (color, shape) pair is the sample's joint class, so restricted shape
//! subsets model the "old training corpus with fewer classes" situation,
//! and the closed-form generative model yields an exact Bayes oracle for
//! how well any retrieval system could possibly do.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::{fill_gaussian, rng_from_seed};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Which label a training consumer should read from a [`LabeledSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// Color index only; the coarse "old task".
    Color,
    /// Flattened `(color, shape)` index; the fine "new task".
    Joint,
}

/// A fixed ColorShape generative model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticDomain {
    colors: usize,
    shapes: usize,
    ambient_dim: usize,
    sigma: f64,
    seed: u64,
    /// `ambient_dim x colors`; column `c` is the color-`c` direction.
    w_color: Matrix,
    /// `ambient_dim x shapes`; column `s` is the shape-`s` direction.
    w_shape: Matrix,
}

/// Orthonormalizes the columns of `m` in place by modified Gram-Schmidt.
fn orthonormalize_columns(m: &mut Matrix) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        for k in 0..j {
            let mut proj = 0.0;
            for r in 0..rows {
                proj += m.get(r, k) * m.get(r, j);
            }
            for r in 0..rows {
                let v = m.get(r, j) - proj * m.get(r, k);
                m.set(r, j, v);
            }
        }
        let norm: f64 = (0..rows).map(|r| m.get(r, j) * m.get(r, j)).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::DegenerateInput(format!(
                "factor directions are linearly dependent at column {j}"
            )));
        }
        for r in 0..rows {
            m.set(r, j, m.get(r, j) / norm);
        }
    }
    Ok(())
}

/// Creates a domain with jointly orthonormal color and shape directions.
pub fn make_domain(
    colors: usize,
    shapes: usize,
    ambient_dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SyntheticDomain> {
    if colors == 0 || shapes == 0 || colors * shapes < 2 {
        return Err(Error::Config(format!(
            "need at least two joint classes, got {colors} colors x {shapes} shapes"
        )));
    }
    if ambient_dim < colors + shapes {
        return Err(Error::Config(format!(
            "ambient dimension {ambient_dim} cannot hold {} orthonormal factor directions",
            colors + shapes
        )));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("noise level {sigma} invalid")));
    }
    let mut rng = rng_from_seed(seed);
    let mut basis = Matrix::zeros(ambient_dim, colors + shapes);
    fill_gaussian(&mut rng, basis.data_mut(), 1.0);
    orthonormalize_columns(&mut basis)?;
    let mut w_color = Matrix::zeros(ambient_dim, colors);
    let mut w_shape = Matrix::zeros(ambient_dim, shapes);
    for r in 0..ambient_dim {
        for c in 0..colors {
            w_color.set(r, c, basis.get(r, c));
        }
        for s in 0..shapes {
            w_shape.set(r, s, basis.get(r, colors + s));
        }
    }
    Ok(SyntheticDomain {
        colors,
        shapes,
        ambient_dim,
        sigma,
        seed,
        w_color,
        w_shape,
    })
}

impl SyntheticDomain {
    pub fn colors(&self) -> usize {
        self.colors
    }

    pub fn shapes(&self) -> usize {
        self.shapes
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn joint_classes(&self) -> usize {
        self.colors * self.shapes
    }

    /// Noise-free lattice point for a (color, shape) cell.
    pub fn cell_mean(&self, color: usize, shape: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.ambient_dim];
        for (r, m) in mean.iter_mut().enumerate() {
            *m = self.w_color.get(r, color) + self.w_shape.get(r, shape);
        }
        mean
    }

    /// The concatenated factor basis, for orthonormality checks.
    pub fn factor_basis(&self) -> Result<Matrix> {
        Matrix::hcat(&self.w_color, &self.w_shape)
    }

    fn check_subsets(&self, colors: &[usize], shapes: &[usize]) -> Result<()> {
        if colors.is_empty() || shapes.is_empty() {
            return Err(Error::Config("factor subsets must be non-empty".into()));
        }
        if let Some(&c) = colors.iter().find(|&&c| c >= self.colors) {
            return Err(Error::Config(format!(
                "color {c} outside domain of {} colors",
                self.colors
            )));
        }
        if let Some(&s) = shapes.iter().find(|&&s| s >= self.shapes) {
            return Err(Error::Config(format!(
                "shape {s} outside domain of {} shapes",
                self.shapes
            )));
        }
        Ok(())
    }
}

/// Samples with their factor labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub colors: Vec<u32>,
    pub shapes: Vec<u32>,
    pub label_mode: LabelMode,
    color_count: u32,
    shape_count: u32,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened `(color, shape)` class of one sample: `c * shapes + s`.
    pub fn joint_label(&self, i: usize) -> u32 {
        self.colors[i] * self.shape_count + self.shapes[i]
    }

    /// The label selected by the set's mode, for every sample.
    pub fn active_labels(&self) -> Vec<u32> {
        match self.label_mode {
            LabelMode::Color => self.colors.clone(),
            LabelMode::Joint => (0..self.len()).map(|i| self.joint_label(i)).collect(),
        }
    }

    /// Number of classes the active label ranges over (the full domain
    /// count, independent of which cells are present in this set).
    pub fn class_count(&self) -> usize {
        match self.label_mode {
            LabelMode::Color => self.color_count as usize,
            LabelMode::Joint => (self.color_count * self.shape_count) as usize,
        }
    }

    pub fn joint_class_count(&self) -> usize {
        (self.color_count * self.shape_count) as usize
    }
}

fn sample_cells(
    domain: &SyntheticDomain,
    cells: &[(usize, usize)],
    label_mode: LabelMode,
    rng: &mut crate::numerics::rng::SeededRng,
) -> LabeledSet {
    let n = cells.len();
    let mut inputs = Matrix::zeros(n, domain.ambient_dim);
    let mut colors = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(n);
    let mut noise = vec![0.0; domain.ambient_dim];
    for (i, &(c, s)) in cells.iter().enumerate() {
        fill_gaussian(rng, &mut noise, domain.sigma);
        let mean = domain.cell_mean(c, s);
        let row = inputs.row_mut(i);
        for d in 0..domain.ambient_dim {
            row[d] = mean[d] + noise[d];
        }
        colors.push(c as u32);
        shapes.push(s as u32);
    }
    LabeledSet {
        inputs,
        colors,
        shapes,
        label_mode,
        color_count: domain.colors as u32,
        shape_count: domain.shapes as u32,
    }
}

/// Draws `n` samples whose (color, shape) cells are uniform over the
/// product of the given subsets.
pub fn sample_set(
    domain: &SyntheticDomain,
    n: usize,
    colors: &[usize],
    shapes: &[usize],
    label_mode: LabelMode,
    seed: u64,
) -> Result<LabeledSet> {
    domain.check_subsets(colors, shapes)?;
    if n == 0 {
        return Err(Error::Config("cannot sample an empty set".into()));
    }
    let mut rng = rng_from_seed(seed);
    let cells: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let c = colors[rng.gen_range(0..colors.len())];
            let s = shapes[rng.gen_range(0..shapes.len())];
            (c, s)
        })
        .collect();
    Ok(sample_cells(domain, &cells, label_mode, &mut rng))
}

/// Draws exactly `per_cell` samples for every cell in the subset product,
/// cells in lexicographic `(color, shape)` order. This keeps evaluation
/// sets class-balanced, so chance-level top-1 is one over the class count.
pub fn sample_per_cell(
    domain: &SyntheticDomain,
    per_cell: usize,
    colors: &[usize],
    shapes: &[usize],
    label_mode: LabelMode,
    seed: u64,
) -> Result<LabeledSet> {
    domain.check_subsets(colors, shapes)?;
    if per_cell == 0 {
        return Err(Error::Config("cannot sample an empty set".into()));
    }
    let mut cells = Vec::with_capacity(per_cell * colors.len() * shapes.len());
    for &c in colors {
        for &s in shapes {
            for _ in 0..per_cell {
                cells.push((c, s));
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    Ok(sample_cells(domain, &cells, label_mode, &mut rng))
}

/// Log-space class posterior over all joint cells for one input.
fn log_posterior(domain: &SyntheticDomain, x: &[f64]) -> Vec<f64> {
    let cells = domain.joint_classes();
    let mut logits = Vec::with_capacity(cells);
    for c in 0..domain.colors {
        for s in 0..domain.shapes {
            let mean = domain.cell_mean(c, s);
            let dist_sq: f64 = x.iter().zip(&mean).map(|(&a, &b)| (a - b) * (a - b)).sum();
            logits.push(-dist_sq);
        }
    }
    // With sigma = 0 the posterior is a point mass on the nearest cell.
    if domain.sigma == 0.0 {
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        return (0..cells)
            .map(|i| if i == best { 0.0 } else { f64::NEG_INFINITY })
            .collect();
    }
    let scale = 1.0 / (2.0 * domain.sigma * domain.sigma);
    let max = logits
        .iter()
        .map(|&l| l * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let log_sum = max
        + logits
            .iter()
            .map(|&l| (l * scale - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&l| l * scale - log_sum).collect()
}

/// Ranks gallery indices for each query by the posterior probability that
/// query and gallery item share a joint class under the true generative
/// model, ties broken by ascending gallery index.
///
/// This is the Bayes-optimal use of the raw inputs, so it upper-bounds (up
/// to sampling error) what any learned embedding can reach on this data.
pub fn bayes_retrieval_oracle(
    domain: &SyntheticDomain,
    queries: &LabeledSet,
    gallery: &LabeledSet,
) -> Result<Vec<Vec<usize>>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if queries.inputs.cols() != domain.ambient_dim || gallery.inputs.cols() != domain.ambient_dim {
        return Err(Error::Shape("inputs do not match the domain's ambient dimension".into()));
    }
    let gallery_posteriors: Vec<Vec<f64>> = (0..gallery.len())
        .map(|i| log_posterior(domain, gallery.inputs.row(i)))
        .collect();
    let mut rankings = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let q_post = log_posterior(domain, queries.inputs.row(qi));
        let mut scored: Vec<(f64, usize)> = gallery_posteriors
            .iter()
            .enumerate()
            .map(|(gi, g_post)| {
                // P(same class) = sum_z p_q(z) p_g(z), computed in log space.
                let max = q_post
                    .iter()
                    .zip(g_post)
                    .map(|(&a, &b)| a + b)
                    .fold(f64::NEG_INFINITY, f64::max);
                let score = if max == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    q_post
                        .iter()
                        .zip(g_post)
                        .map(|(&a, &b)| (a + b - max).exp())
                        .sum::<f64>()
                        .ln()
                        + max
                };
                (score, gi)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        rankings.push(scored.into_iter().map(|(_, gi)| gi).collect());
    }
    Ok(rankings)
}

/// Fraction of queries whose top-ranked gallery item shares their joint
/// class, given oracle rankings.
pub fn oracle_top1(
    rankings: &[Vec<usize>],
    queries: &LabeledSet,
    gallery: &LabeledSet,
) -> f64 {
    let hits = rankings
        .iter()
        .enumerate()
        .filter(|(qi, ranking)| {
            ranking
                .first()
                .is_some_and(|&gi| gallery.joint_label(gi) == queries.joint_label(*qi))
        })
        .count();
    hits as f64 / rankings.len().max(1) as f64
}

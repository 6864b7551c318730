//! Token sequences for the two modalities.
//!
//! Image stream: a learnable class token followed by one row per patch,
//! `[patch features ‖ 2-D sinusoidal position]`. Gene stream: standardized
//! genes cut into `m` contiguous groups, each group tiled to the patch
//! feature width, zero-padded to the token width, then mapped through one
//! learnable affine layer and a ReLU.

pub mod io;
pub mod synth;

use std::f64::consts::PI;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Real, Tape, Var};

/// Precomputed features for the patches of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub slide_id: String,
    /// n×d1 patch features.
    pub features: Matrix,
    /// Patch centers, each coordinate in [0, 1].
    pub positions: Vec<[f64; 2]>,
}

impl PatchSequence {
    pub fn new(slide_id: impl Into<String>, features: Matrix, positions: Vec<[f64; 2]>) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.rows() == 0 {
            return Err(Error::InvalidArgument(format!("slide {slide_id} has no patches")));
        }
        if positions.len() != features.rows() {
            return Err(Error::shape("patch positions", &[features.rows()], &[positions.len()]));
        }
        if let Some(p) = positions.iter().find(|p| !p.iter().all(|c| (0.0..=1.0).contains(c))) {
            return Err(Error::InvalidArgument(format!(
                "slide {slide_id}: position {p:?} outside [0, 1]^2"
            )));
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("slide {slide_id}: non-finite feature")));
        }
        Ok(PatchSequence {
            slide_id,
            features,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// One patient's raw expression vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneRaw {
    pub patient_id: String,
    pub gene_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl GeneRaw {
    pub fn new(patient_id: impl Into<String>, gene_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let patient_id = patient_id.into();
        if gene_ids.len() != values.len() {
            return Err(Error::shape("gene ids", &[gene_ids.len()], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "patient {patient_id}: non-finite gene value"
            )));
        }
        Ok(GeneRaw {
            patient_id,
            gene_ids,
            values,
        })
    }
}

/// Per-gene mean and population standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GeneStats {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a GeneRaw>) -> Result<Self> {
        let rows: Vec<&[f64]> = train.into_iter().map(|g| g.values.as_slice()).collect();
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("gene statistics need at least one patient".into()))?;
        let n_genes = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n_genes) {
            return Err(Error::shape("gene statistics", &[n_genes], &[bad.len()]));
        }
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n_genes];
        for r in &rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n_genes];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / count).sqrt()).collect();
        Ok(GeneStats { mean, std })
    }
}

/// `(x - mean) / std` per gene; zero-variance genes map to 0.
pub fn standardize_genes(raw: &GeneRaw, stats: &GeneStats) -> Result<Vec<f64>> {
    if raw.values.len() != stats.mean.len() {
        return Err(Error::shape(
            "standardize_genes",
            &[raw.values.len()],
            &[stats.mean.len()],
        ));
    }
    Ok(raw
        .values
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
        .collect())
}

/// Fixed 2-D sinusoidal encoding. Per axis, `d_pos / 4` (sin, cos) pairs
/// at angular frequencies `pi * 2^k`; the lowest frequency keeps distinct
/// coordinates in [0, 1] distinct.
pub fn positional_embedding(positions: &[[f64; 2]], d_pos: usize) -> Result<Matrix> {
    if d_pos == 0 || !d_pos.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "positional width {d_pos} must be a positive multiple of 4"
        )));
    }
    let pairs = d_pos / 4;
    let mut out = Matrix::zeros(positions.len(), d_pos);
    for (i, pos) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for (axis, &coord) in pos.iter().enumerate() {
            for k in 0..pairs {
                let angle = PI * (1u64 << k) as f64 * coord;
                row[axis * 2 * pairs + 2 * k] = angle.sin();
                row[axis * 2 * pairs + 2 * k + 1] = angle.cos();
            }
        }
    }
    Ok(out)
}

/// Patch rows `[features ‖ positional]` without the class token: n×d.
pub fn image_token_rows(p: &PatchSequence, cfg: &EncoderConfig) -> Result<Matrix> {
    if p.features.cols() != cfg.feature_dim {
        return Err(Error::shape(
            "build_image_tokens",
            &[p.len(), p.features.cols()],
            &[p.len(), cfg.feature_dim],
        ));
    }
    let pos = positional_embedding(&p.positions, cfg.pos_dim)?;
    let d = cfg.model_dim();
    let mut out = Matrix::zeros(p.len(), d);
    for i in 0..p.len() {
        let row = out.row_mut(i);
        row[..cfg.feature_dim].copy_from_slice(p.features.row(i));
        row[cfg.feature_dim..].copy_from_slice(pos.row(i));
    }
    Ok(out)
}

/// Prepends the class token to precomputed patch rows: (n+1)×d.
pub fn image_tokens_from_rows<T: Real>(tape: &mut Tape<T>, rows: &Matrix, class_token: Var) -> Result<Var> {
    let patches = tape.constant_f64(rows.shape(), rows.data())?;
    tape.concat_rows(&[class_token, patches])
}

/// Z1 = [class token; Z0] for one slide.
pub fn build_image_tokens<T: Real>(
    tape: &mut Tape<T>,
    p: &PatchSequence,
    class_token: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let rows = image_token_rows(p, cfg)?;
    image_tokens_from_rows(tape, &rows, class_token)
}

/// Contiguous groups of `floor(N / m)` genes (trailing remainder dropped),
/// each tiled cyclically to width d1, then `d_pos` zeros: m×d.
pub fn group_and_expand(values: &[f64], cfg: &EncoderConfig) -> Result<Matrix> {
    let m = cfg.groups;
    if m == 0 || values.len() < m {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} genes into {m} groups",
            values.len()
        )));
    }
    let width = values.len() / m;
    let mut out = Matrix::zeros(m, cfg.model_dim());
    for g in 0..m {
        let group = &values[g * width..(g + 1) * width];
        let row = out.row_mut(g);
        for (j, slot) in row[..cfg.feature_dim].iter_mut().enumerate() {
            *slot = group[j % width];
        }
    }
    Ok(out)
}

/// Z2 = ReLU(F_g' W + b).
pub fn gene_tokens<T: Real>(tape: &mut Tape<T>, fg_prime: &Matrix, weight: Var, bias: Var) -> Result<Var> {
    let x = tape.constant_f64(fg_prime.shape(), fg_prime.data())?;
    let h = tape.matmul(x, weight)?;
    let h = tape.add_row(h, bias)?;
    tape.relu(h)
}

//! Synthetic cohorts with a planted survival signal.
//!
//! Each patient draws two independent latents, `z_img` and `z_gene`.
//! Every patch of every slide carries `z_img` along one fixed feature
//! direction plus isotropic noise. A fixed subset of genes carries
//! `z_gene` with positive per-gene loadings in [0.5, 1.5]; the rest are
//! noise around per-gene baselines. Event times are exponential with log-hazard
//! `image_signal * z_img + gene_signal * z_gene`, censored by an
//! independent uniform cutoff whose scale is solved for the requested
//! censored fraction.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::config::{EncoderConfig, GeneratorParams};
use crate::error::{Error, Result};
use crate::featurize::{GeneRaw, PatchSequence};
use crate::matrix::Matrix;
use crate::rng;
use crate::survival::{c_index, SurvivalRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub patients: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub genes: usize,
    pub params: GeneratorParams,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(enc: &EncoderConfig, params: &GeneratorParams, seed: u64) -> Self {
        GeneratorSpec {
            patients: params.patients,
            patches: enc.patches,
            feature_dim: enc.feature_dim,
            genes: enc.genes,
            params: params.clone(),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub records: Vec<SurvivalRecord>,
    /// True log-hazard per patient, in record order.
    pub log_hazard: Vec<f64>,
}

impl SyntheticCohort {
    pub fn censored_fraction(&self) -> f64 {
        let c = self.records.iter().filter(|r| !r.event).count();
        c as f64 / self.records.len() as f64
    }

    /// C-index of the true log-hazard on a subset of patients.
    pub fn oracle_c_index(&self, subset: &[usize]) -> Result<f64> {
        let risks: Vec<f64> = subset.iter().map(|&i| self.log_hazard[i]).collect();
        let times: Vec<f64> = subset.iter().map(|&i| self.records[i].time).collect();
        let events: Vec<bool> = subset.iter().map(|&i| self.records[i].event).collect();
        c_index(&risks, &times, &events)
    }
}

struct Globals {
    direction: Vec<f64>,
    gene_mean: Vec<f64>,
    gene_scale: Vec<f64>,
    loading: Vec<f64>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn globals(spec: &GeneratorSpec) -> Globals {
    let mut r = rng::stream(spec.seed, "synth.globals", 0);
    let direction = (0..spec.feature_dim).map(|_| normal(&mut r)).collect();
    let gene_mean = (0..spec.genes).map(|_| 5.0 + 2.0 * normal(&mut r)).collect();
    let gene_scale = (0..spec.genes).map(|_| r.random_range(0.5..2.0)).collect();
    let mut loading = vec![0.0; spec.genes];
    let k = spec.params.informative_genes.min(spec.genes);
    for g in index::sample(&mut r, spec.genes, k) {
        loading[g] = r.random_range(0.5..1.5);
    }
    Globals {
        direction,
        gene_mean,
        gene_scale,
        loading,
    }
}

struct Latent {
    log_hazard: f64,
    event_time: f64,
    cutoff_unit: f64,
}

fn positive_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn patient(spec: &GeneratorSpec, g: &Globals, i: usize) -> Result<(SurvivalRecord, Latent)> {
    let p = &spec.params;
    let mut r = rng::stream(spec.seed, "synth.patient", i as u64);
    let z_img = normal(&mut r);
    let z_gene = normal(&mut r);
    let log_hazard = p.image_signal * z_img + p.gene_signal * z_gene;
    let e: f64 = Exp1.sample(&mut r);
    let event_time = (e / log_hazard.exp()).max(f64::MIN_POSITIVE);
    let cutoff_unit = positive_unit(&mut r);

    let id = format!("P{i:04}");
    let n_slides = if r.random::<f64>() < p.multi_slide_fraction {
        2
    } else {
        1
    };
    let mut slides = Vec::with_capacity(n_slides);
    for s in 0..n_slides {
        let mut data = Vec::with_capacity(spec.patches * spec.feature_dim);
        let mut positions = Vec::with_capacity(spec.patches);
        for _ in 0..spec.patches {
            positions.push([r.random::<f64>(), r.random::<f64>()]);
            for a in &g.direction {
                data.push(z_img * a + p.patch_noise * normal(&mut r));
            }
        }
        let features = Matrix::new(spec.patches, spec.feature_dim, data)?;
        slides.push(PatchSequence::new(format!("{id}_{s}"), features, positions)?);
    }

    let mut values = Vec::with_capacity(spec.genes);
    for j in 0..spec.genes {
        let latent = z_gene * g.loading[j] + p.gene_noise * normal(&mut r);
        values.push(g.gene_mean[j] + g.gene_scale[j] * latent);
    }
    let ids = (0..spec.genes).map(|j| format!("G{j:04}")).collect();
    let gene = GeneRaw::new(id.clone(), ids, values)?;
    // Time is filled in once the censoring scale is known.
    let record = SurvivalRecord::new(id, 1.0, true, slides, gene)?;
    Ok((
        record,
        Latent {
            log_hazard,
            event_time,
            cutoff_unit,
        },
    ))
}

fn censored_at(latents: &[Latent], scale: f64) -> f64 {
    let c = latents.iter().filter(|l| l.event_time > scale * l.cutoff_unit).count();
    c as f64 / latents.len() as f64
}

/// Cutoff scale whose realized censored fraction is closest to `target`.
fn solve_scale(latents: &[Latent], target: f64) -> f64 {
    // Censored fraction falls monotonically as the scale grows.
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if censored_at(latents, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (lo.exp(), hi.exp());
    if (censored_at(latents, a) - target).abs() < (censored_at(latents, b) - target).abs() {
        a
    } else {
        b
    }
}

pub fn synth_dataset(spec: &GeneratorSpec) -> Result<SyntheticCohort> {
    let p = &spec.params;
    if !(p.censoring > 0.0 && p.censoring < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "censoring fraction {} is infeasible; it must lie strictly between 0 and 1",
            p.censoring
        )));
    }
    if spec.patients < 2 || spec.patches == 0 || spec.feature_dim == 0 || spec.genes == 0 {
        return Err(Error::InvalidArgument(
            "generator needs at least 2 patients and positive patch, feature and gene counts".into(),
        ));
    }
    let g = globals(spec);
    let mut records = Vec::with_capacity(spec.patients);
    let mut latents = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let (rec, lat) = patient(spec, &g, i)?;
        records.push(rec);
        latents.push(lat);
    }
    let scale = solve_scale(&latents, p.censoring);
    for (rec, lat) in records.iter_mut().zip(&latents) {
        let cutoff = (scale * lat.cutoff_unit).max(f64::MIN_POSITIVE);
        rec.event = lat.event_time <= cutoff;
        rec.time = lat.event_time.min(cutoff);
    }
    let log_hazard = latents.iter().map(|l| l.log_hazard).collect();
    Ok(SyntheticCohort { records, log_hazard })
}

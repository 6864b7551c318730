//! Patient-level split, minibatch Adam on the partial likelihood, and
//! best-validation model selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attention::AttentionOptions;
use crate::config::{AblationMode, EncoderConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::featurize::GeneStats;
use crate::model::{forward_patient, init_params, predict, prepare_patient, ModelWeights, PreparedPatient};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng;
use crate::survival::{c_index, cox_gradient, cox_nll, SurvivalRecord};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles patient indices with the `split` stream and cuts them by the
/// configured fractions.
pub fn split_patients(n: usize, cfg: &TrainConfig, seed: u64) -> Result<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} patients give an empty split at fractions {} / {}",
            cfg.train_fraction, cfg.val_fraction
        )));
    }
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

/// Minibatches for one epoch. A trailing batch of one is folded into the
/// previous batch.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng::stream(seed, "batch", epoch as u64));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Parameter-free inputs for every patient plus the split they belong to.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub patients: Vec<PreparedPatient>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub stats: GeneStats,
    pub split: Split,
}

impl Cohort {
    pub fn prepare(
        records: &[SurvivalRecord],
        enc: &EncoderConfig,
        train: &TrainConfig,
        mode: AblationMode,
        seed: u64,
    ) -> Result<Self> {
        for r in records {
            if r.gene.values.len() != enc.genes {
                return Err(Error::Config(format!(
                    "patient {} has {} genes but genes = {}",
                    r.patient_id,
                    r.gene.values.len(),
                    enc.genes
                )));
            }
        }
        let split = split_patients(records.len(), train, seed)?;
        // Standardization statistics see the training split only.
        let stats = GeneStats::fit(split.train.iter().map(|&i| &records[i].gene))?;
        Cohort::prepare_with_stats(records, enc, train, mode, seed, stats)
    }

    /// As [`Cohort::prepare`] with statistics supplied, e.g. from a
    /// checkpoint.
    pub fn prepare_with_stats(
        records: &[SurvivalRecord],
        enc: &EncoderConfig,
        train: &TrainConfig,
        mode: AblationMode,
        seed: u64,
        stats: GeneStats,
    ) -> Result<Self> {
        let split = split_patients(records.len(), train, seed)?;
        let patients = records
            .iter()
            .enumerate()
            .map(|(i, r)| prepare_patient(r, &stats, enc, mode, seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort {
            patients,
            times: records.iter().map(|r| r.time).collect(),
            events: records.iter().map(|r| r.event).collect(),
            stats,
            split,
        })
    }

    fn gather<V: Copy>(&self, v: &[V], subset: &[usize]) -> Vec<V> {
        subset.iter().map(|&i| v[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cindex: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    pub test_cindex: Option<f64>,
}

impl MetricsLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_cindex\n");
        for e in &self.epochs {
            writeln!(s, "{}\t{}\t{}", e.epoch, e.train_loss, e.val_cindex).unwrap();
        }
        if let Some(t) = self.test_cindex {
            writeln!(s, "test_cindex\t{t}").unwrap();
        }
        s
    }
}

/// C-index of model risks on a subset of the cohort.
pub fn evaluate(
    params: &ParamStore<f32>,
    enc: &EncoderConfig,
    cohort: &Cohort,
    subset: &[usize],
    mode: AblationMode,
) -> Result<f64> {
    let risks = subset
        .par_iter()
        .map(|&i| predict(params, enc, &cohort.patients[i], mode))
        .collect::<Result<Vec<_>>>()?;
    c_index(
        &risks,
        &cohort.gather(&cohort.times, subset),
        &cohort.gather(&cohort.events, subset),
    )
}

struct BatchResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

struct Step<'a> {
    enc: &'a EncoderConfig,
    cohort: &'a Cohort,
    mode: AblationMode,
    seed: u64,
}

impl Step<'_> {
    /// Loss and summed parameter gradients for one batch, or `None` when the
    /// batch holds no events.
    fn run(&self, params: &ParamStore<f32>, batch: &[usize], epoch: usize) -> Result<Option<BatchResult>> {
        let times = self.cohort.gather(&self.cohort.times, batch);
        let events = self.cohort.gather(&self.cohort.events, batch);
        if !events.iter().any(|&e| e) {
            return Ok(None);
        }
        let opts = AttentionOptions {
            dropout: self.enc.dropout,
            trace: false,
        };
        let n_patients = self.cohort.patients.len() as u64;
        let mut passes = batch
            .par_iter()
            .map(|&i| {
                let tape_seed = rng::derive_seed(self.seed, "dropout", epoch as u64 * n_patients + i as u64);
                let mut tape = Tape::<f32>::new(tape_seed).with_validation(true);
                let bound = params.bind(&mut tape, true)?;
                let w = ModelWeights::from_bound(&bound, self.enc)?;
                let f = forward_patient(&mut tape, &w, &self.cohort.patients[i], self.mode, opts)?;
                Ok((tape, bound, f.risk))
            })
            .collect::<Result<Vec<_>>>()?;
        let risks: Vec<f64> = passes.iter().map(|(t, _, r)| t.scalar(*r)).collect();
        let loss = cox_nll(&risks, &times, &events)?;
        let dl_dr = cox_gradient(&risks, &times, &events)?;
        passes
            .par_iter_mut()
            .zip(dl_dr.par_iter())
            .try_for_each(|((tape, _, r), g)| tape.backward_with_seed(*r, &[*g]))?;

        let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        for (tape, bound, _) in &passes {
            for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(g) = tape.grad(v) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(Some(BatchResult { loss, grads }))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation C-index.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub log: MetricsLog,
    pub cohort: Cohort,
}

pub fn train(records: &[SurvivalRecord], run: &RunConfig) -> Result<TrainOutcome> {
    run.validate()?;
    let enc = &run.encoder;
    let tc = &run.train;
    let cohort = Cohort::prepare(records, enc, tc, run.mode, run.seed)?;
    let mut params = init_params(enc, run.seed)?;
    let mut opt = Adam::new(&params, tc.lr);
    let step = Step {
        enc,
        cohort: &cohort,
        mode: run.mode,
        seed: run.seed,
    };

    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=tc.epochs {
        let mut losses = Vec::new();
        for (b, batch) in epoch_batches(&cohort.split.train, tc.batch_size, run.seed, epoch)
            .iter()
            .enumerate()
        {
            let Some(res) = step.run(&params, batch, epoch)? else {
                continue;
            };
            if !res.loss.is_finite() || res.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            losses.push(res.loss);
            opt.step(&mut params, &res.grads)?;
        }
        if losses.is_empty() {
            return Err(Error::NoEvents);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_cindex = evaluate(&params, enc, &cohort, &cohort.split.val, run.mode)?;
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_cindex,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_cindex > *v) {
            best = Some((val_cindex, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    log.test_cindex = Some(evaluate(&best, enc, &cohort, &cohort.split.test, run.mode)?);
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        cohort,
    })
}

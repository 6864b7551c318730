//! Run orchestration behind the command-line subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionOptions;
use crate::checkpoint::Checkpoint;
use crate::config::{AblationMode, DataSource, EncoderConfig, GeneratorParams, RunConfig};
use crate::error::{Error, Result};
use crate::featurize::io::{load_dataset, write_dataset};
use crate::featurize::synth::{synth_dataset, GeneratorSpec};
use crate::featurize::GeneStats;
use crate::gradcheck::{check_function, primitive_suite, GradCheck};
use crate::matrix::Matrix;
use crate::model::{forward_patient, init_params, prepare_patient, ModelWeights, PreparedPatient};
use crate::params::ParamStore;
use crate::survival::train::{evaluate, train, Cohort, TrainOutcome};
use crate::survival::{cox_loss, risk_head, SurvivalRecord};
use crate::tensor::{Shape, Tape};

pub const CONFIG_ECHO: &str = "config.txt";
pub const METRICS: &str = "metrics.tsv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const ABLATION_TABLE: &str = "ablation.tsv";

pub struct Dataset {
    pub records: Vec<SurvivalRecord>,
    /// True log-hazards when the data are synthetic.
    pub log_hazard: Option<Vec<f64>>,
}

pub fn load_data(run: &RunConfig) -> Result<Dataset> {
    match &run.data {
        DataSource::Manifest(p) => Ok(Dataset {
            records: load_dataset(p)?,
            log_hazard: None,
        }),
        DataSource::Generator(g) => {
            let c = synth_dataset(&GeneratorSpec::new(&run.encoder, g, run.seed))?;
            Ok(Dataset {
                records: c.records,
                log_hazard: Some(c.log_hazard),
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset and the config echo under `dir`.
pub fn generate(run: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let DataSource::Generator(g) = &run.data else {
        return Err(Error::Config(
            "generate needs generator settings, not a manifest".into(),
        ));
    };
    let cohort = synth_dataset(&GeneratorSpec::new(&run.encoder, g, run.seed))?;
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_ECHO), &run.echo())?;
    write_dataset(dir, &cohort.records)
}

pub struct TrainReport {
    pub outcome: TrainOutcome,
    /// Test-split C-index of the true log-hazard, for synthetic data.
    pub oracle_test_cindex: Option<f64>,
}

impl TrainReport {
    pub fn test_cindex(&self) -> f64 {
        self.outcome.log.test_cindex.expect("set by train")
    }

    pub fn checkpoint(&self, run: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: run.clone(),
            params: self.outcome.best.clone(),
            stats: self.outcome.cohort.stats.clone(),
            best_epoch: self.outcome.best_epoch,
        }
    }
}

pub fn train_on(data: &Dataset, run: &RunConfig) -> Result<TrainReport> {
    let outcome = train(&data.records, run)?;
    let oracle_test_cindex = match &data.log_hazard {
        Some(h) => {
            let test = &outcome.cohort.split.test;
            let risks: Vec<f64> = test.iter().map(|&i| h[i]).collect();
            let times: Vec<f64> = test.iter().map(|&i| data.records[i].time).collect();
            let events: Vec<bool> = test.iter().map(|&i| data.records[i].event).collect();
            Some(crate::survival::c_index(&risks, &times, &events)?)
        }
        None => None,
    };
    Ok(TrainReport {
        outcome,
        oracle_test_cindex,
    })
}

/// Trains and writes the config echo, metrics log and checkpoint.
pub fn train_run(run: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainReport> {
    let data = load_data(run)?;
    let report = train_on(&data, run)?;
    create_dir(&run.out)?;
    write_file(&run.out.join(CONFIG_ECHO), &run.echo())?;
    write_file(&run.out.join(METRICS), &report.outcome.log.to_tsv())?;
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out.join(CHECKPOINT));
    report.checkpoint(run).save(&ck_path)?;
    Ok(report)
}

/// Test-split C-index of a saved model on the data its config names.
pub fn evaluate_checkpoint(ck: &Checkpoint) -> Result<f64> {
    let data = load_data(&ck.config)?;
    let cohort = Cohort::prepare_with_stats(
        &data.records,
        &ck.config.encoder,
        &ck.config.train,
        ck.config.mode,
        ck.config.seed,
        ck.stats.clone(),
    )?;
    evaluate(
        &ck.params,
        &ck.config.encoder,
        &cohort,
        &cohort.split.test,
        ck.config.mode,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub test_cindex: f64,
    pub best_epoch: usize,
}

/// All four modes on one dataset and seed.
pub fn ablate(run: &RunConfig) -> Result<Vec<AblationRow>> {
    let data = load_data(run)?;
    AblationMode::ALL
        .iter()
        .map(|&mode| {
            let r = RunConfig { mode, ..run.clone() };
            let rep = train_on(&data, &r)?;
            Ok(AblationRow {
                mode,
                test_cindex: rep.test_cindex(),
                best_epoch: rep.outcome.best_epoch,
            })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode\ttest_cindex\tbest_epoch\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}", r.mode, r.test_cindex, r.best_epoch).unwrap();
    }
    s
}

fn format_matrix(m: &Matrix) -> String {
    let mut s = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Writes the attention weights of every layer and head for one patient's
/// first slide as text matrices.
pub fn dump_traces(
    params: &ParamStore<f32>,
    cfg: &EncoderConfig,
    patient: &PreparedPatient,
    mode: AblationMode,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut tape = Tape::<f32>::new(0);
    let bound = params.bind(&mut tape, false)?;
    let w = ModelWeights::from_bound(&bound, cfg)?;
    let opts = AttentionOptions {
        trace: true,
        ..AttentionOptions::default()
    };
    let f = forward_patient(&mut tape, &w, patient, mode, opts)?;
    create_dir(dir)?;
    let mut written = Vec::new();
    for (l, trace) in f.encodings[0].traces.iter().enumerate() {
        for (kind, mats) in [("image", &trace.image), ("gene", &trace.gene)] {
            for (h, m) in mats.iter().enumerate() {
                let path = dir.join(format!("layer{l}_head{h}_{kind}.txt"));
                write_file(&path, &format_matrix(m))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// One finite-difference check and the tolerance it must meet.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub check: GradCheck,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.check.passes(self.tolerance)
    }
}

pub const OP_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;

/// n = 2, m = 1, d = 8, one layer, one head.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        patches: 2,
        groups: 1,
        feature_dim: 4,
        pos_dim: 4,
        genes: 3,
        layers: 1,
        heads: 1,
        mlp_width: 4,
        head_hidden: 4,
        dropout: 0.0,
        share_mlp: true,
    }
}

/// Loss of a two-patient batch on the tiny config, every parameter a
/// checked input.
fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let cfg = tiny_config();
    let gen = GeneratorParams {
        patients: 10,
        informative_genes: 2,
        multi_slide_fraction: 0.5,
        ..GeneratorParams::default()
    };
    let cohort = synth_dataset(&GeneratorSpec::new(&cfg, &gen, seed))?;
    let records = &cohort.records[..2];
    let stats = GeneStats::fit(cohort.records.iter().map(|r| &r.gene))?;
    let patients = records
        .iter()
        .enumerate()
        .map(|(i, r)| prepare_patient(r, &stats, &cfg, AblationMode::Default, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let times = [1.0, 2.0];
    let events = [true, true];

    // Re-draw every parameter at a larger scale so the check point is not
    // near the degenerate initialization.
    let store = init_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let inputs: Vec<(Shape, Vec<f64>)> = store
        .iter()
        .map(|(name, p)| {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            let v = (0..p.data.len()).map(|_| base + rng.random_range(-0.6..0.6)).collect();
            (p.shape.clone(), v)
        })
        .collect();
    check_function("end_to_end_tiny", &inputs, |tape, vars| {
        let bound = store.names_with(vars.to_vec())?;
        let w = ModelWeights::from_bound(&bound, &cfg)?;
        let mut risks = Vec::new();
        for p in &patients {
            let f = forward_patient(tape, &w, p, AblationMode::Default, AttentionOptions::default())?;
            risks.push(tape.reshape(f.risk, Shape::matrix(1, 1))?);
        }
        let r = tape.concat_rows(&risks)?;
        cox_loss(tape, r, &times, &events)
    })
}

/// Every primitive plus the composite pieces of the model.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let op = |check| SuiteEntry {
        check,
        tolerance: OP_TOLERANCE,
    };
    let mut out: Vec<SuiteEntry> = primitive_suite(seed)?.into_iter().map(op).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut draw = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };

    let risks = draw(5, 1.5);
    let times = [3.0, 1.0, 4.0, 1.0, 5.0];
    let events = [true, false, true, true, false];
    out.push(op(check_function("cox_loss", &[(Shape::new([5]), risks)], |t, v| {
        cox_loss(t, v[0], &times, &events)
    })?));

    // Redraw until the hidden units are clear of the ReLU kink, with at
    // least two of them active.
    let (y, w1) = loop {
        let y = draw(6, 1.0);
        let w1 = draw(18, 1.0);
        let pre: Vec<f64> = (0..3).map(|h| (0..6).map(|i| y[i] * w1[i * 3 + h]).sum()).collect();
        if pre.iter().all(|p| p.abs() > 0.05) && pre.iter().filter(|&&p| p > 0.0).count() >= 2 {
            break (y, w1);
        }
    };
    let w2 = draw(3, 1.0);
    out.push(op(check_function(
        "risk_head",
        &[
            (Shape::matrix(1, 6), y),
            (Shape::matrix(6, 3), w1),
            (Shape::matrix(3, 1), w2),
        ],
        |t, v| risk_head(t, v[0], v[1], v[2]),
    )?));

    let fg = Matrix::new(2, 4, draw(8, 1.0))?;
    let weight = draw(16, 1.0);
    let bias = draw(4, 0.5);
    out.push(op(check_function(
        "gene_tokens",
        &[(Shape::matrix(4, 4), weight), (Shape::new([4]), bias)],
        |t, v| crate::featurize::gene_tokens(t, &fg, v[0], v[1]),
    )?));

    let d = 4;
    let mut attn_inputs = vec![
        (Shape::matrix(3, d), draw(12, 1.0)),
        (Shape::matrix(2, d), draw(8, 1.0)),
    ];
    for _ in 0..4 {
        attn_inputs.push((Shape::matrix(d, d), draw(16, 0.8)));
    }
    attn_inputs.push((Shape::new([d]), draw(d, 0.3)));
    for (mode, name) in [(false, "amma"), (true, "symmetric_attention")] {
        out.push(op(check_function(name, &attn_inputs, |t, v| {
            let w = crate::attention::AmmaWeights {
                query: v[2],
                key: v[3],
                value: v[4],
                out_weight: v[5],
                out_bias: v[6],
                heads: 2,
            };
            if mode {
                let all = t.concat_rows(&[v[0], v[1]])?;
                Ok(crate::attention::symmetric_attention(t, all, &w, AttentionOptions::default())?.0)
            } else {
                let o = crate::attention::amma(t, v[0], v[1], &w, AttentionOptions::default())?;
                t.concat_rows(&[o.image, o.gene])
            }
        })?));
    }

    out.push(SuiteEntry {
        check: end_to_end_check(seed)?,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(out)
}

pub fn format_gradcheck(entries: &[SuiteEntry]) -> String {
    let mut s = String::from("check\tmax_rel_error\ttolerance\tchecked\tstatus\n");
    for e in entries {
        writeln!(
            s,
            "{}\t{:.3e}\t{:.0e}\t{}\t{}",
            e.check.name,
            e.check.max_rel_error,
            e.tolerance,
            e.check.checked,
            if e.passes() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    let worst = entries.iter().map(|e| e.check.max_rel_error).fold(0.0, f64::max);
    writeln!(s, "max_rel_error\t{worst:.3e}").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_its_tolerances() {
        let entries = gradcheck_suite(0).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.check.name.as_str()).collect();
        assert!(names.contains(&"end_to_end_tiny"));
        for e in &entries {
            assert!(e.passes(), "{e:?}");
        }
        assert!(format_gradcheck(&entries).contains("max_rel_error"));
    }
}

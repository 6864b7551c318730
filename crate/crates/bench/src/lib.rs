//! Shared fixtures for the benchmarks.

use ammasurv_core::attention::AttentionOptions;
use ammasurv_core::config::{AblationMode, GeneratorParams, RunConfig};
use ammasurv_core::featurize::synth::{synth_dataset, GeneratorSpec};
use ammasurv_core::model::{forward_patient, init_params, ModelWeights};
use ammasurv_core::params::ParamStore;
use ammasurv_core::survival::train::Cohort;
use ammasurv_core::{EncoderConfig, Result, Tape};

pub struct Fixture {
    pub encoder: EncoderConfig,
    pub params: ParamStore<f32>,
    pub cohort: Cohort,
}

/// Default architecture on a small synthetic cohort.
pub fn fixture(patients: usize, mode: AblationMode) -> Result<Fixture> {
    let run = RunConfig::default();
    let g = GeneratorParams {
        patients,
        ..GeneratorParams::default()
    };
    let data = synth_dataset(&GeneratorSpec::new(&run.encoder, &g, 0))?;
    let cohort = Cohort::prepare(&data.records, &run.encoder, &run.train, mode, 0)?;
    let params = init_params(&run.encoder, 0)?;
    Ok(Fixture {
        encoder: run.encoder,
        params,
        cohort,
    })
}

/// One patient forward and, when `backward` is set, a unit-seeded backward
/// pass. Returns the risk.
pub fn step_patient(f: &Fixture, index: usize, mode: AblationMode, backward: bool) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new(0);
    let bound = f.params.bind(&mut tape, backward)?;
    let w = ModelWeights::from_bound(&bound, &f.encoder)?;
    let out = forward_patient(
        &mut tape,
        &w,
        &f.cohort.patients[index],
        mode,
        AttentionOptions::default(),
    )?;
    if backward {
        tape.backward_with_seed(out.risk, &[1.0])?;
    }
    Ok(tape.scalar(out.risk))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_runs_every_mode() {
        for mode in AblationMode::ALL {
            let f = fixture(8, mode).unwrap();
            assert!(step_patient(&f, 0, mode, true).unwrap().is_finite());
        }
    }
}

//! Risk prediction, partial-likelihood loss, concordance, and training.

mod cindex;
mod cox;
mod head;
pub mod train;

pub use cindex::{c_index, concordance_counts, ConcordanceCounts};
pub use cox::{cox_gradient, cox_loss, cox_nll};
pub use head::{mean_risk, patient_risk, risk_head};

use crate::error::{Error, Result};
use crate::featurize::{GeneRaw, PatchSequence};

/// One patient: follow-up, event indicator, and both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub time: f64,
    /// `true` when death was observed, `false` when censored.
    pub event: bool,
    pub slides: Vec<PatchSequence>,
    pub gene: GeneRaw,
}

impl SurvivalRecord {
    pub fn new(
        patient_id: impl Into<String>,
        time: f64,
        event: bool,
        slides: Vec<PatchSequence>,
        gene: GeneRaw,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "patient {patient_id}: time {time} must be positive"
            )));
        }
        if slides.is_empty() {
            return Err(Error::InvalidArgument(format!("patient {patient_id} has no slides")));
        }
        Ok(SurvivalRecord {
            patient_id,
            time,
            event,
            slides,
            gene,
        })
    }
}

/// Risks for each (slide, gene) pairing of a patient and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskOutput {
    pub per_pair_risks: Vec<f64>,
    pub patient_risk: f64,
}

impl RiskOutput {
    pub fn new(per_pair_risks: Vec<f64>) -> Result<Self> {
        let patient_risk = patient_risk(&per_pair_risks)?;
        Ok(RiskOutput {
            per_pair_risks,
            patient_risk,
        })
    }
}

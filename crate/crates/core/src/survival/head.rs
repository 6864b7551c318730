use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tape, Var};

/// R = ReLU(y W1) W2 for a joint representation `y` of width 2d.
pub fn risk_head<T: Real>(tape: &mut Tape<T>, y: Var, w1: Var, w2: Var) -> Result<Var> {
    let y = match tape.shape(y).rank() {
        1 => {
            let n = tape.shape(y).numel();
            tape.reshape(y, Shape::matrix(1, n))?
        }
        _ => y,
    };
    let h = tape.matmul(y, w1)?;
    let h = tape.relu(h)?;
    let r = tape.matmul(h, w2)?;
    if tape.shape(r).numel() != 1 {
        return Err(Error::shape("risk_head", tape.shape(r).dims(), &[1, 1]));
    }
    Ok(r)
}

/// Arithmetic mean of per-slide risks.
pub fn patient_risk(per_slide: &[f64]) -> Result<f64> {
    if per_slide.is_empty() {
        return Err(Error::InvalidArgument("patient_risk of no slides".into()));
    }
    Ok(per_slide.iter().sum::<f64>() / per_slide.len() as f64)
}

/// On-tape mean of scalar risks, keeping gradients to every slide.
pub fn mean_risk<T: Real>(tape: &mut Tape<T>, risks: &[Var]) -> Result<Var> {
    match risks {
        [] => Err(Error::InvalidArgument("mean_risk of no slides".into())),
        [single] => Ok(*single),
        many => {
            let stacked = many
                .iter()
                .map(|&r| tape.reshape(r, Shape::matrix(1, 1)))
                .collect::<Result<Vec<_>>>()?;
            let col = tape.concat_rows(&stacked)?;
            tape.mean(col)
        }
    }
}

//! Central finite-difference checking of tape gradients.
//!
//! Checks always run on an f64 tape. A non-scalar output is reduced to a
//! scalar with fixed pseudo-random weights so every output element
//! contributes with a distinct coefficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tape, Var};

pub const FD_STEP: f64 = 1e-4;

/// Relative error with an absolute floor so vanishing gradients compare by
/// absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn reduction_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5_eed0_f9ad);
    (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                w
            } else {
                -w
            }
        })
        .collect()
}

fn weighted_output<F>(inputs: &[(Shape, Vec<f64>)], f: &F) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(0).with_validation(true);
    let vars = inputs
        .iter()
        .map(|(shape, data)| tape.param_f64(shape.clone(), data))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).clone();
    let loss = if shape.numel() == 1 {
        out
    } else {
        let weights = tape.constant_f64(shape.clone(), &reduction_weights(shape.numel()))?;
        let prod = tape.mul(out, weights)?;
        tape.sum(prod)?
    };
    Ok((tape, vars, loss))
}

/// Compares the tape gradient of `f` with respect to every input element
/// against central differences.
pub fn check_function<F>(name: &str, inputs: &[(Shape, Vec<f64>)], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = weighted_output(inputs, &f)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, data))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; data.len()]))
        .collect();

    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let original = probe[which].1[idx];
            probe[which].1[idx] = original + FD_STEP;
            let (t, _, l) = weighted_output(&probe, &f)?;
            let plus = t.scalar(l);
            probe[which].1[idx] = original - FD_STEP;
            let (t, _, l) = weighted_output(&probe, &f)?;
            let minus = t.scalar(l);
            probe[which].1[idx] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel_error = max_rel_error.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error,
        checked,
    })
}

pub(crate) fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for checks through kinked ops.
pub(crate) fn random_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Finite-difference checks for every primitive tape op.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m34 = Shape::matrix(3, 4);
    let m45 = Shape::matrix(4, 5);
    let mut out = Vec::new();

    let a = random_values(&mut rng, 12, -1.0, 1.0);
    let b = random_values(&mut rng, 20, -1.0, 1.0);
    out.push(check_function(
        "matmul",
        &[(m34.clone(), a.clone()), (m45.clone(), b)],
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(check_function("transpose", &[(m34.clone(), a.clone())], |t, v| {
        t.transpose(v[0])
    })?);
    let b = random_values(&mut rng, 12, -1.0, 1.0);
    out.push(check_function(
        "add",
        &[(m34.clone(), a.clone()), (m34.clone(), b.clone())],
        |t, v| t.add(v[0], v[1]),
    )?);
    out.push(check_function(
        "mul",
        &[(m34.clone(), a.clone()), (m34.clone(), b)],
        |t, v| t.mul(v[0], v[1]),
    )?);
    let row = random_values(&mut rng, 4, -1.0, 1.0);
    out.push(check_function(
        "add_row",
        &[(m34.clone(), a.clone()), (Shape::new([4]), row)],
        |t, v| t.add_row(v[0], v[1]),
    )?);
    out.push(check_function("scale", &[(m34.clone(), a.clone())], |t, v| {
        t.scale(v[0], -0.7)
    })?);
    out.push(check_function("sum", &[(m34.clone(), a.clone())], |t, v| t.sum(v[0]))?);
    out.push(check_function("mean", &[(m34.clone(), a.clone())], |t, v| {
        t.mean(v[0])
    })?);
    out.push(check_function("mean_rows", &[(m34.clone(), a.clone())], |t, v| {
        t.mean_rows(v[0])
    })?);
    let s = random_values(&mut rng, 12, -3.0, 3.0);
    out.push(check_function("softmax_rows", &[(m34.clone(), s)], |t, v| {
        t.softmax_rows(v[0])
    })?);
    let x = random_values(&mut rng, 12, -2.0, 2.0);
    let gain = random_values(&mut rng, 4, 0.5, 1.5);
    let bias = random_values(&mut rng, 4, -0.5, 0.5);
    out.push(check_function(
        "layer_norm",
        &[(m34.clone(), x), (Shape::new([4]), gain), (Shape::new([4]), bias)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    )?);
    let x = random_values(&mut rng, 12, -3.0, 3.0);
    out.push(check_function("gelu", &[(m34.clone(), x)], |t, v| t.gelu(v[0]))?);
    let x = random_away_from_zero(&mut rng, 12);
    out.push(check_function("relu", &[(m34.clone(), x)], |t, v| t.relu(v[0]))?);
    let c = random_values(&mut rng, 8, -1.0, 1.0);
    out.push(check_function(
        "concat_rows",
        &[(m34.clone(), a.clone()), (Shape::matrix(2, 4), c.clone())],
        |t, v| t.concat_rows(&[v[0], v[1]]),
    )?);
    let c = random_values(&mut rng, 6, -1.0, 1.0);
    out.push(check_function(
        "concat_cols",
        &[(m34.clone(), a.clone()), (Shape::matrix(3, 2), c)],
        |t, v| t.concat_cols(&[v[0], v[1]]),
    )?);
    out.push(check_function("slice_rows", &[(m34.clone(), a.clone())], |t, v| {
        t.slice_rows(v[0], 1, 3)
    })?);
    out.push(check_function("slice_cols", &[(m34.clone(), a.clone())], |t, v| {
        t.slice_cols(v[0], 1, 3)
    })?);
    out.push(check_function("reshape", &[(m34, a)], |t, v| {
        t.reshape(v[0], Shape::matrix(2, 6))
    })?);
    Ok(out)
}

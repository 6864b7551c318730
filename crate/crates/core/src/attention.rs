//! Asymmetric multi-modal attention.
//!
//! Image tokens (class token included) supply every key and value. Image
//! queries attend over image keys; gene queries attend over the same image
//! keys. Nothing reads from gene tokens, so the image output is a function
//! of the image input alone. The symmetric variant used for ablation is
//! ordinary self-attention over the concatenated sequence.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Real, Tape, Var};

/// Projections shared by both query streams. Each of query/key/value is a
/// d×d matrix whose column block `h*(d/heads)..(h+1)*(d/heads)` is head `h`.
#[derive(Clone, Copy, Debug)]
pub struct AmmaWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub heads: usize,
}

/// Per-head attention weights, one matrix per head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    /// (n+1)×(n+1), image queries over image keys.
    pub image: Vec<Matrix>,
    /// m×(n+1), gene queries over image keys.
    pub gene: Vec<Matrix>,
}

impl AttentionTrace {
    /// Largest |row sum - 1| across every captured matrix.
    pub fn max_row_sum_error(&self) -> f64 {
        self.image
            .iter()
            .chain(&self.gene)
            .flat_map(|m| (0..m.rows()).map(move |i| (m.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionOptions {
    pub dropout: f64,
    pub trace: bool,
}

#[derive(Debug)]
pub struct AmmaOutput {
    pub image: Var,
    pub gene: Var,
    pub trace: Option<AttentionTrace>,
}

struct HeadKv {
    keys_t: Var,
    values: Var,
}

fn check_width<T: Real>(tape: &Tape<T>, x: Var, w: &AmmaWeights) -> Result<usize> {
    let (_, d) = tape
        .shape(x)
        .as_matrix()
        .ok_or_else(|| Error::shape("attention", tape.shape(x).dims(), &[0, 0]))?;
    let (qd, _) = tape.shape(w.query).as_matrix().unwrap_or((0, 0));
    if qd != d {
        return Err(Error::shape(
            "attention",
            tape.shape(x).dims(),
            tape.shape(w.query).dims(),
        ));
    }
    if w.heads == 0 || d % w.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} heads do not divide width {d}",
            w.heads
        )));
    }
    Ok(d)
}

fn project_kv<T: Real>(tape: &mut Tape<T>, x: Var, w: &AmmaWeights, d: usize) -> Result<Vec<HeadKv>> {
    let k = tape.matmul(x, w.key)?;
    let v = tape.matmul(x, w.value)?;
    let dh = d / w.heads;
    (0..w.heads)
        .map(|h| {
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let keys_t = tape.transpose(kh)?;
            let values = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            Ok(HeadKv { keys_t, values })
        })
        .collect()
}

/// Concatenated per-head outputs before the output projection.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    x_query: Var,
    kv: &[HeadKv],
    w: &AmmaWeights,
    d: usize,
    opts: AttentionOptions,
    mut trace: Option<&mut Vec<Matrix>>,
) -> Result<Var> {
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(x_query, w.query)?;
    let mut heads = Vec::with_capacity(w.heads);
    for (h, head) in kv.iter().enumerate() {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul(qh, head.keys_t)?;
        let scores = tape.scale(scores, scale)?;
        let alpha = tape.softmax_rows(scores)?;
        if let Some(t) = trace.as_deref_mut() {
            let (r, c) = tape.shape(alpha).as_matrix().unwrap();
            t.push(Matrix::new(r, c, tape.value_f64(alpha))?);
        }
        let alpha = tape.dropout(alpha, opts.dropout)?;
        heads.push(tape.matmul(alpha, head.values)?);
    }
    tape.concat_cols(&heads)
}

fn project_out<T: Real>(tape: &mut Tape<T>, heads: Var, w: &AmmaWeights) -> Result<Var> {
    let o = tape.matmul(heads, w.out_weight)?;
    tape.add_row(o, w.out_bias)
}

/// AMMA over `x_img` ((n+1)×d) and `x_gene` (m×d, m may be 0).
pub fn amma<T: Real>(
    tape: &mut Tape<T>,
    x_img: Var,
    x_gene: Var,
    w: &AmmaWeights,
    opts: AttentionOptions,
) -> Result<AmmaOutput> {
    let d = check_width(tape, x_img, w)?;
    if check_width(tape, x_gene, w)? != d {
        return Err(Error::shape(
            "amma",
            tape.shape(x_img).dims(),
            tape.shape(x_gene).dims(),
        ));
    }
    let mut img_trace = opts.trace.then(Vec::new);
    let mut gene_trace = opts.trace.then(Vec::new);

    let kv = project_kv(tape, x_img, w, d)?;
    let img_heads = attend(tape, x_img, &kv, w, d, opts, img_trace.as_mut())?;
    let image = project_out(tape, img_heads, w)?;
    let gene_heads = attend(tape, x_gene, &kv, w, d, opts, gene_trace.as_mut())?;
    let gene = project_out(tape, gene_heads, w)?;

    let trace = match (img_trace, gene_trace) {
        (Some(image), Some(gene)) => Some(AttentionTrace { image, gene }),
        _ => None,
    };
    Ok(AmmaOutput { image, gene, trace })
}

/// Full self-attention over every token, for the symmetric ablation.
/// Returns the output and, when tracing, per-head weight matrices.
pub fn symmetric_attention<T: Real>(
    tape: &mut Tape<T>,
    x_all: Var,
    w: &AmmaWeights,
    opts: AttentionOptions,
) -> Result<(Var, Option<Vec<Matrix>>)> {
    let d = check_width(tape, x_all, w)?;
    let mut trace = opts.trace.then(Vec::new);
    let kv = project_kv(tape, x_all, w, d)?;
    let heads = attend(tape, x_all, &kv, w, d, opts, trace.as_mut())?;
    Ok((project_out(tape, heads, w)?, trace))
}

//! Stacked pre-norm AMMA blocks and the joint readout.
//!
//! Per block and per stream: `Z' = Attn(LN(Z)) + Z`, then
//! `Z = MLP(LN(Z')) + Z'`. The readout normalizes the final class token
//! (`y1`) and the mean of the gene rows (`y2`), and concatenates them.

use rand_distr::{Distribution, StandardNormal};

use crate::attention::{amma, symmetric_attention, AmmaWeights, AttentionOptions, AttentionTrace};
use crate::config::AblationMode;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::tensor::{Real, Shape, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// d -> width -> d with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, self.w2)?;
        tape.add_row(o, self.b2)
    }
}

/// With a shared MLP, `mlp_img` and `mlp_gene` hold the same handles.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub attn: AmmaWeights,
    pub norm_attn_img: Norm,
    pub norm_attn_gene: Norm,
    pub norm_mlp_img: Norm,
    pub norm_mlp_gene: Norm,
    pub mlp_img: Mlp,
    pub mlp_gene: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct Readout {
    pub token_norm: Norm,
    pub gene_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub blocks: Vec<BlockWeights>,
    pub readout: Readout,
}

/// `y1`, `y2` are 1×d; `y` is 1×2d.
#[derive(Clone, Copy, Debug)]
pub struct JointRepresentation {
    pub y1: Var,
    pub y2: Var,
    pub y: Var,
}

#[derive(Debug)]
pub struct EncodeOutput {
    pub repr: JointRepresentation,
    /// Every intermediate of the image stream, in evaluation order, ending
    /// with `y1`.
    pub image_activations: Vec<Var>,
    /// One trace per layer when tracing is on. In symmetric mode the
    /// whole (n+1+m)-row matrix is stored under `image`.
    pub traces: Vec<AttentionTrace>,
}

fn check_inputs<T: Real>(tape: &Tape<T>, z1: Var, z2: Var, w: &EncoderWeights) -> Result<()> {
    if w.blocks.is_empty() {
        return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
    }
    let a = tape.shape(z1).as_matrix();
    let b = tape.shape(z2).as_matrix();
    match (a, b) {
        (Some((r, c1)), Some((_, c2))) if r >= 1 && c1 == c2 => Ok(()),
        _ => Err(Error::shape("encode", tape.shape(z1).dims(), tape.shape(z2).dims())),
    }
}

fn readout<T: Real>(tape: &mut Tape<T>, z1: Var, z2: Var, r: &Readout) -> Result<JointRepresentation> {
    let token = tape.slice_rows(z1, 0, 1)?;
    let y1 = r.token_norm.apply(tape, token)?;
    let pooled = tape.mean_rows(z2)?;
    let y2 = r.gene_norm.apply(tape, pooled)?;
    let y = tape.concat_cols(&[y1, y2])?;
    Ok(JointRepresentation { y1, y2, y })
}

struct Streams {
    z1: Var,
    z2: Var,
    image_activations: Vec<Var>,
    traces: Vec<AttentionTrace>,
}

fn mlp_step<T: Real>(tape: &mut Tape<T>, b: &BlockWeights, s: &mut Streams) -> Result<()> {
    let h = b.norm_mlp_img.apply(tape, s.z1)?;
    let h = b.mlp_img.apply(tape, h)?;
    s.z1 = tape.add(h, s.z1)?;
    s.image_activations.push(s.z1);
    let g = b.norm_mlp_gene.apply(tape, s.z2)?;
    let g = b.mlp_gene.apply(tape, g)?;
    s.z2 = tape.add(g, s.z2)?;
    Ok(())
}

fn run_amma<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    w: &EncoderWeights,
    opts: AttentionOptions,
) -> Result<Streams> {
    let mut s = Streams {
        z1,
        z2,
        image_activations: vec![z1],
        traces: Vec::new(),
    };
    for b in &w.blocks {
        let x1 = b.norm_attn_img.apply(tape, s.z1)?;
        let x2 = b.norm_attn_gene.apply(tape, s.z2)?;
        let out = amma(tape, x1, x2, &b.attn, opts)?;
        // The image residual is built before anything touches the gene
        // stream's output.
        s.z1 = tape.add(out.image, s.z1)?;
        s.image_activations.push(s.z1);
        s.z2 = tape.add(out.gene, s.z2)?;
        if let Some(t) = out.trace {
            s.traces.push(t);
        }
        mlp_step(tape, b, &mut s)?;
    }
    Ok(s)
}

fn run_symmetric<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    w: &EncoderWeights,
    opts: AttentionOptions,
) -> Result<Streams> {
    let n1 = tape.shape(z1).dims()[0];
    let m = tape.shape(z2).dims()[0];
    let mut s = Streams {
        z1,
        z2,
        image_activations: vec![z1],
        traces: Vec::new(),
    };
    for b in &w.blocks {
        let x1 = b.norm_attn_img.apply(tape, s.z1)?;
        let x2 = b.norm_attn_gene.apply(tape, s.z2)?;
        let all = tape.concat_rows(&[x1, x2])?;
        let (o, trace) = symmetric_attention(tape, all, &b.attn, opts)?;
        let o1 = tape.slice_rows(o, 0, n1)?;
        let o2 = tape.slice_rows(o, n1, n1 + m)?;
        s.z1 = tape.add(o1, s.z1)?;
        s.image_activations.push(s.z1);
        s.z2 = tape.add(o2, s.z2)?;
        if let Some(t) = trace {
            s.traces.push(AttentionTrace {
                image: t,
                gene: Vec::new(),
            });
        }
        mlp_step(tape, b, &mut s)?;
    }
    Ok(s)
}

fn finish<T: Real>(tape: &mut Tape<T>, mut s: Streams, gene_final: Var, r: &Readout) -> Result<EncodeOutput> {
    let repr = readout(tape, s.z1, gene_final, r)?;
    s.image_activations.push(repr.y1);
    Ok(EncodeOutput {
        repr,
        image_activations: s.image_activations,
        traces: s.traces,
    })
}

/// Default AMMA encoder over `z1` ((n+1)×d) and `z2` (m×d).
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    w: &EncoderWeights,
    opts: AttentionOptions,
) -> Result<EncodeOutput> {
    check_inputs(tape, z1, z2, w)?;
    let s = run_amma(tape, z1, z2, w, opts)?;
    let z2_final = s.z2;
    finish(tape, s, z2_final, &w.readout)
}

/// Encoder variants. For `RandomGene` the caller supplies the noise tokens
/// from [`random_gene_tokens`] as `z2`; the network is then the default one.
pub fn encode_ablation<T: Real>(
    tape: &mut Tape<T>,
    mode: AblationMode,
    z1: Var,
    z2: Var,
    w: &EncoderWeights,
    opts: AttentionOptions,
) -> Result<EncodeOutput> {
    check_inputs(tape, z1, z2, w)?;
    match mode {
        AblationMode::Default | AblationMode::RandomGene => encode(tape, z1, z2, w, opts),
        AblationMode::Symmetric => {
            let s = run_symmetric(tape, z1, z2, w, opts)?;
            let z2_final = s.z2;
            finish(tape, s, z2_final, &w.readout)
        }
        AblationMode::UninducedConcat => {
            let d = tape.shape(z1).dims()[1];
            let empty = tape.constant_f64(Shape::matrix(0, d), &[])?;
            let s = run_amma(tape, z1, empty, w, opts)?;
            finish(tape, s, z2, &w.readout)
        }
    }
}

/// Standard-normal m×d gene tokens for one patient, fixed for the run.
pub fn random_gene_tokens(root_seed: u64, patient_index: usize, m: usize, d: usize) -> Matrix {
    let mut r = rng::stream(root_seed, "random_gene", patient_index as u64);
    let data = (0..m * d).map(|_| StandardNormal.sample(&mut r)).collect();
    Matrix::new(m, d, data).expect("m*d values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_function;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Dims {
        d: usize,
        heads: usize,
        mlp: usize,
        layers: usize,
        shared: bool,
    }

    fn param(t: &mut Tape<f64>, r: &mut ChaCha8Rng, shape: Shape, scale: f64, offset: f64) -> Var {
        let data: Vec<f64> = (0..shape.numel())
            .map(|_| {
                if scale > 0.0 {
                    offset + r.random_range(-scale..scale)
                } else {
                    0.0
                }
            })
            .collect();
        t.param_f64(shape, &data).unwrap()
    }

    fn norm(t: &mut Tape<f64>, r: &mut ChaCha8Rng, d: usize) -> Norm {
        Norm {
            gain: param(t, r, Shape::new([d]), 0.3, 1.0),
            bias: param(t, r, Shape::new([d]), 0.3, 0.0),
        }
    }

    fn mlp(t: &mut Tape<f64>, r: &mut ChaCha8Rng, d: usize, width: usize, scale: f64) -> Mlp {
        Mlp {
            w1: param(t, r, Shape::matrix(d, width), scale, 0.0),
            b1: param(t, r, Shape::new([width]), scale, 0.0),
            w2: param(t, r, Shape::matrix(width, d), scale, 0.0),
            b2: param(t, r, Shape::new([d]), scale, 0.0),
        }
    }

    fn weights(t: &mut Tape<f64>, seed: u64, dims: &Dims, scale: f64) -> EncoderWeights {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let blocks = (0..dims.layers)
            .map(|_| {
                let attn = AmmaWeights {
                    query: param(t, &mut r, Shape::matrix(d, d), scale, 0.0),
                    key: param(t, &mut r, Shape::matrix(d, d), scale, 0.0),
                    value: param(t, &mut r, Shape::matrix(d, d), scale, 0.0),
                    out_weight: param(t, &mut r, Shape::matrix(d, d), scale, 0.0),
                    out_bias: param(t, &mut r, Shape::new([d]), scale, 0.0),
                    heads: dims.heads,
                };
                let mlp_img = mlp(t, &mut r, d, dims.mlp, scale);
                let mlp_gene = if dims.shared {
                    mlp_img
                } else {
                    mlp(t, &mut r, d, dims.mlp, scale)
                };
                BlockWeights {
                    attn,
                    norm_attn_img: norm(t, &mut r, d),
                    norm_attn_gene: norm(t, &mut r, d),
                    norm_mlp_img: norm(t, &mut r, d),
                    norm_mlp_gene: norm(t, &mut r, d),
                    mlp_img,
                    mlp_gene,
                }
            })
            .collect();
        EncoderWeights {
            blocks,
            readout: Readout {
                token_norm: norm(t, &mut r, d),
                gene_norm: norm(t, &mut r, d),
            },
        }
    }

    fn zeroed(t: &mut Tape<f64>, dims: &Dims) -> EncoderWeights {
        weights(t, 0, dims, 0.0)
    }

    fn tokens(t: &mut Tape<f64>, r: &mut ChaCha8Rng, rows: usize, d: usize, scale: f64) -> Var {
        let data: Vec<f64> = (0..rows * d).map(|_| r.random_range(-scale..scale)).collect();
        t.constant_f64(Shape::matrix(rows, d), &data).unwrap()
    }

    const SMALL: Dims = Dims {
        d: 8,
        heads: 2,
        mlp: 12,
        layers: 2,
        shared: true,
    };

    #[test]
    fn output_widths() {
        let mut t = Tape::<f64>::new(0);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut t, 2, &SMALL, 0.3);
        let z1 = tokens(&mut t, &mut r, 5, 8, 1.0);
        let z2 = tokens(&mut t, &mut r, 2, 8, 1.0);
        let out = encode(&mut t, z1, z2, &w, AttentionOptions::default()).unwrap();
        assert_eq!(t.shape(out.repr.y), &Shape::matrix(1, 16));
        assert_eq!(t.shape(out.repr.y1), &Shape::matrix(1, 8));
        let y = t.value(out.repr.y).to_vec();
        assert_eq!(&y[..8], t.value(out.repr.y1));
        assert_eq!(&y[8..], t.value(out.repr.y2));
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        for shared in [true, false] {
            let dims = Dims { shared, ..SMALL };
            let mut t = Tape::<f64>::new(0);
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let w = zeroed(&mut t, &dims);
            let z1 = tokens(&mut t, &mut r, 4, 8, 2.0);
            let z2 = tokens(&mut t, &mut r, 3, 8, 2.0);
            let s = run_amma(&mut t, z1, z2, &w, AttentionOptions::default()).unwrap();
            assert_eq!(t.value(s.z1), t.value(z1));
            assert_eq!(t.value(s.z2), t.value(z2));
        }
    }

    #[test]
    fn image_stream_is_blind_to_genes() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let z1: Vec<f64> = (0..5 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut reference: Option<Vec<Vec<f64>>> = None;
        for _ in 0..10 {
            let mut t = Tape::<f64>::new(0);
            let w = weights(&mut t, 9, &Dims { shared: false, ..SMALL }, 0.5);
            let a = t.constant_f64(Shape::matrix(5, 8), &z1).unwrap();
            let b = tokens(&mut t, &mut r, 3, 8, 100.0);
            let out = encode(&mut t, a, b, &w, AttentionOptions::default()).unwrap();
            let acts: Vec<Vec<f64>> = out.image_activations.iter().map(|&v| t.value(v).to_vec()).collect();
            match &reference {
                None => reference = Some(acts),
                Some(r) => assert_eq!(r, &acts),
            }
        }
    }

    #[test]
    fn symmetric_mode_leaks_genes_into_y1() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let z1: Vec<f64> = (0..4 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut y1s = Vec::new();
        for _ in 0..2 {
            let mut t = Tape::<f64>::new(0);
            let w = weights(&mut t, 10, &SMALL, 0.5);
            let a = t.constant_f64(Shape::matrix(4, 8), &z1).unwrap();
            let b = tokens(&mut t, &mut r, 2, 8, 1.0);
            let out = encode_ablation(&mut t, AblationMode::Symmetric, a, b, &w, AttentionOptions::default()).unwrap();
            y1s.push(t.value(out.repr.y1).to_vec());
        }
        assert_ne!(y1s[0], y1s[1]);
    }

    #[test]
    fn uninduced_y2_ignores_encoder_parameters() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let z1: Vec<f64> = (0..4 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..3 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut y2s = Vec::new();
        for seed in [1, 2] {
            let mut t = Tape::<f64>::new(0);
            let mut w = weights(&mut t, seed, &SMALL, 0.5);
            // readout norms fixed across trials; everything else varies
            let mut fixed = ChaCha8Rng::seed_from_u64(77);
            w.readout.gene_norm = norm(&mut t, &mut fixed, 8);
            let a = t.constant_f64(Shape::matrix(4, 8), &z1).unwrap();
            let b = t.constant_f64(Shape::matrix(3, 8), &z2).unwrap();
            let out = encode_ablation(
                &mut t,
                AblationMode::UninducedConcat,
                a,
                b,
                &w,
                AttentionOptions::default(),
            )
            .unwrap();
            y2s.push(t.value(out.repr.y2).to_vec());
            t.backward_with_seed(out.repr.y2, &[1.0; 8]).unwrap();
            for blk in &w.blocks {
                assert!(t.grad(blk.attn.query).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
                assert!(t.grad(blk.mlp_gene.w1).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
            }
        }
        assert_eq!(y2s[0], y2s[1]);
    }

    #[test]
    fn random_gene_tokens_are_reproducible() {
        let a = random_gene_tokens(3, 11, 4, 6);
        assert_eq!(a, random_gene_tokens(3, 11, 4, 6));
        assert_ne!(a, random_gene_tokens(3, 12, 4, 6));
        assert_ne!(a, random_gene_tokens(4, 11, 4, 6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut t = Tape::<f64>::new(0);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut t, 2, &SMALL, 0.3);
        let z1 = tokens(&mut t, &mut r, 3, 8, 1.0);
        let bad = tokens(&mut t, &mut r, 2, 6, 1.0);
        assert!(encode(&mut t, z1, bad, &w, AttentionOptions::default()).is_err());
        let empty = EncoderWeights {
            blocks: vec![],
            readout: w.readout,
        };
        let z2 = tokens(&mut t, &mut r, 2, 8, 1.0);
        assert!(encode(&mut t, z1, z2, &empty, AttentionOptions::default()).is_err());
    }

    #[test]
    fn encoder_jacobian_matches_finite_differences() {
        // n = 2, m = 1, d = 4, L = 1, h = 1; every parameter and input is
        // a checked leaf.
        let d = 4;
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let mut inputs: Vec<(Shape, Vec<f64>)> = Vec::new();
        let mut push = |shape: Shape, scale: f64, offset: f64, r: &mut ChaCha8Rng| {
            let v = (0..shape.numel())
                .map(|_| offset + r.random_range(-scale..scale))
                .collect();
            inputs.push((shape, v));
        };
        push(Shape::matrix(3, d), 1.0, 0.0, &mut r); // z1
        push(Shape::matrix(1, d), 1.0, 0.0, &mut r); // z2
        for _ in 0..4 {
            push(Shape::matrix(d, d), 0.6, 0.0, &mut r);
        }
        push(Shape::new([d]), 0.3, 0.0, &mut r);
        for _ in 0..6 {
            push(Shape::new([d]), 0.3, 1.0, &mut r);
            push(Shape::new([d]), 0.3, 0.0, &mut r);
        }
        push(Shape::matrix(d, 6), 0.6, 0.0, &mut r);
        push(Shape::new([6]), 0.3, 0.0, &mut r);
        push(Shape::matrix(6, d), 0.6, 0.0, &mut r);
        push(Shape::new([d]), 0.3, 0.0, &mut r);
        let res = check_function("encoder", &inputs, |t, v| {
            let n = |i: usize| Norm {
                gain: v[i],
                bias: v[i + 1],
            };
            let m = Mlp {
                w1: v[19],
                b1: v[20],
                w2: v[21],
                b2: v[22],
            };
            let w = EncoderWeights {
                blocks: vec![BlockWeights {
                    attn: AmmaWeights {
                        query: v[2],
                        key: v[3],
                        value: v[4],
                        out_weight: v[5],
                        out_bias: v[6],
                        heads: 1,
                    },
                    norm_attn_img: n(7),
                    norm_attn_gene: n(9),
                    norm_mlp_img: n(11),
                    norm_mlp_gene: n(13),
                    mlp_img: m,
                    mlp_gene: m,
                }],
                readout: Readout {
                    token_norm: n(15),
                    gene_norm: n(17),
                },
            };
            Ok(encode(t, v[0], v[1], &w, AttentionOptions::default())?.repr.y)
        })
        .unwrap();
        assert!(res.passes(1e-2), "{res:?}");
    }
}

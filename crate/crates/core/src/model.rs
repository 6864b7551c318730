//! Parameter layout, initialization, and the per-patient forward pass.

use crate::attention::{AmmaWeights, AttentionOptions};
use crate::config::{AblationMode, EncoderConfig};
use crate::encoder::{
    encode_ablation, random_gene_tokens, BlockWeights, EncodeOutput, EncoderWeights, Mlp, Norm, Readout,
};
use crate::error::Result;
use crate::featurize::{
    gene_tokens, group_and_expand, image_token_rows, image_tokens_from_rows, standardize_genes, GeneStats,
};
use crate::matrix::Matrix;
use crate::params::{truncated_normal, Bound, ParamStore};
use crate::rng;
use crate::survival::{mean_risk, risk_head, SurvivalRecord};
use crate::tensor::{Real, Shape, Tape, Var};

pub const INIT_STD: f64 = 0.02;

fn mlp_names(cfg: &EncoderConfig, l: usize) -> (String, String) {
    if cfg.share_mlp {
        (format!("block{l}.mlp"), format!("block{l}.mlp"))
    } else {
        (format!("block{l}.mlp_img"), format!("block{l}.mlp_gene"))
    }
}

/// Fresh parameters: truncated normal projections, zero biases and class
/// token, unit norm gains.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "init", 0);
    let d = cfg.model_dim();
    let mut store = ParamStore::new();
    let mut dense = |store: &mut ParamStore<f32>, name: String, rows: usize, cols: usize| {
        let data = truncated_normal(&mut r, rows * cols, INIT_STD);
        store.insert(
            name,
            Shape::matrix(rows, cols),
            data.into_iter().map(|v| v as f32).collect(),
        )
    };
    let zeros = |store: &mut ParamStore<f32>, name: String, shape: Shape| {
        let n = shape.numel();
        store.insert(name, shape, vec![0.0; n])
    };
    let norm = |store: &mut ParamStore<f32>, name: &str| -> Result<()> {
        store.insert(format!("{name}.gain"), Shape::new([d]), vec![1.0; d])?;
        store.insert(format!("{name}.bias"), Shape::new([d]), vec![0.0; d])
    };

    zeros(&mut store, "class_token".into(), Shape::matrix(1, d))?;
    dense(&mut store, "gene_map.weight".into(), d, d)?;
    zeros(&mut store, "gene_map.bias".into(), Shape::new([d]))?;
    for l in 0..cfg.layers {
        for p in ["query", "key", "value", "out_weight"] {
            dense(&mut store, format!("block{l}.attn.{p}"), d, d)?;
        }
        zeros(&mut store, format!("block{l}.attn.out_bias"), Shape::new([d]))?;
        for n in ["norm_attn_img", "norm_attn_gene", "norm_mlp_img", "norm_mlp_gene"] {
            norm(&mut store, &format!("block{l}.{n}"))?;
        }
        let (a, b) = mlp_names(cfg, l);
        let mut names = vec![a];
        if !cfg.share_mlp {
            names.push(b);
        }
        for name in names {
            dense(&mut store, format!("{name}.w1"), d, cfg.mlp_width)?;
            zeros(&mut store, format!("{name}.b1"), Shape::new([cfg.mlp_width]))?;
            dense(&mut store, format!("{name}.w2"), cfg.mlp_width, d)?;
            zeros(&mut store, format!("{name}.b2"), Shape::new([d]))?;
        }
    }
    norm(&mut store, "readout.token_norm")?;
    norm(&mut store, "readout.gene_norm")?;
    dense(&mut store, "head.w1".into(), 2 * d, cfg.head_hidden)?;
    dense(&mut store, "head.w2".into(), cfg.head_hidden, 1)?;
    Ok(store)
}

/// Tape handles for every parameter, grouped by role.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub class_token: Var,
    pub gene_map_weight: Var,
    pub gene_map_bias: Var,
    pub encoder: EncoderWeights,
    pub head_w1: Var,
    pub head_w2: Var,
}

impl ModelWeights {
    pub fn from_bound(b: &Bound, cfg: &EncoderConfig) -> Result<Self> {
        let norm = |name: &str| -> Result<Norm> {
            Ok(Norm {
                gain: b.var(&format!("{name}.gain"))?,
                bias: b.var(&format!("{name}.bias"))?,
            })
        };
        let mlp = |name: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: b.var(&format!("{name}.w1"))?,
                b1: b.var(&format!("{name}.b1"))?,
                w2: b.var(&format!("{name}.w2"))?,
                b2: b.var(&format!("{name}.b2"))?,
            })
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let a = |p: &str| b.var(&format!("block{l}.attn.{p}"));
                let (mi, mg) = mlp_names(cfg, l);
                Ok(BlockWeights {
                    attn: AmmaWeights {
                        query: a("query")?,
                        key: a("key")?,
                        value: a("value")?,
                        out_weight: a("out_weight")?,
                        out_bias: a("out_bias")?,
                        heads: cfg.heads,
                    },
                    norm_attn_img: norm(&format!("block{l}.norm_attn_img"))?,
                    norm_attn_gene: norm(&format!("block{l}.norm_attn_gene"))?,
                    norm_mlp_img: norm(&format!("block{l}.norm_mlp_img"))?,
                    norm_mlp_gene: norm(&format!("block{l}.norm_mlp_gene"))?,
                    mlp_img: mlp(&mi)?,
                    mlp_gene: mlp(&mg)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelWeights {
            class_token: b.var("class_token")?,
            gene_map_weight: b.var("gene_map.weight")?,
            gene_map_bias: b.var("gene_map.bias")?,
            encoder: EncoderWeights {
                blocks,
                readout: Readout {
                    token_norm: norm("readout.token_norm")?,
                    gene_norm: norm("readout.gene_norm")?,
                },
            },
            head_w1: b.var("head.w1")?,
            head_w2: b.var("head.w2")?,
        })
    }
}

#[derive(Clone, Debug)]
pub enum GeneInput {
    /// Grouped and expanded standardized genes, m×d, fed through the map.
    Grouped(Matrix),
    /// Ready-made tokens that replace the gene stream.
    Tokens(Matrix),
}

/// Everything about one patient that does not depend on parameters.
#[derive(Clone, Debug)]
pub struct PreparedPatient {
    /// n×d `[features ‖ positional]` rows, one matrix per slide.
    pub slides: Vec<Matrix>,
    pub gene: GeneInput,
}

pub fn prepare_patient(
    record: &SurvivalRecord,
    stats: &GeneStats,
    cfg: &EncoderConfig,
    mode: AblationMode,
    root_seed: u64,
    index: usize,
) -> Result<PreparedPatient> {
    let slides = record
        .slides
        .iter()
        .map(|s| image_token_rows(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let gene = if mode == AblationMode::RandomGene {
        GeneInput::Tokens(random_gene_tokens(root_seed, index, cfg.groups, cfg.model_dim()))
    } else {
        let z = standardize_genes(&record.gene, stats)?;
        GeneInput::Grouped(group_and_expand(&z, cfg)?)
    };
    Ok(PreparedPatient { slides, gene })
}

#[derive(Debug)]
pub struct PatientForward {
    /// Mean over slides, 1×1.
    pub risk: Var,
    pub per_slide: Vec<Var>,
    pub encodings: Vec<EncodeOutput>,
}

/// One risk per slide paired with the patient's gene tokens, then the mean.
pub fn forward_patient<T: Real>(
    tape: &mut Tape<T>,
    w: &ModelWeights,
    patient: &PreparedPatient,
    mode: AblationMode,
    opts: AttentionOptions,
) -> Result<PatientForward> {
    let z2 = match &patient.gene {
        GeneInput::Grouped(fg) => gene_tokens(tape, fg, w.gene_map_weight, w.gene_map_bias)?,
        GeneInput::Tokens(t) => tape.constant_f64(t.shape(), t.data())?,
    };
    let mut per_slide = Vec::with_capacity(patient.slides.len());
    let mut encodings = Vec::with_capacity(patient.slides.len());
    for rows in &patient.slides {
        let z1 = image_tokens_from_rows(tape, rows, w.class_token)?;
        let enc = encode_ablation(tape, mode, z1, z2, &w.encoder, opts)?;
        per_slide.push(risk_head(tape, enc.repr.y, w.head_w1, w.head_w2)?);
        encodings.push(enc);
    }
    let risk = mean_risk(tape, &per_slide)?;
    Ok(PatientForward {
        risk,
        per_slide,
        encodings,
    })
}

/// Risk of one patient without recording gradients.
pub fn predict<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    patient: &PreparedPatient,
    mode: AblationMode,
) -> Result<f64> {
    let mut tape = Tape::new(0);
    let bound = params.bind(&mut tape, false)?;
    let w = ModelWeights::from_bound(&bound, cfg)?;
    let f = forward_patient(&mut tape, &w, patient, mode, AttentionOptions::default())?;
    Ok(tape.scalar(f.risk))
}

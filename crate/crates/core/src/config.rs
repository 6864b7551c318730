//! Architecture, training, and run configuration with a fail-closed
//! `key = value` text format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Patches per slide (n).
    pub patches: usize,
    /// Gene groups (m).
    pub groups: usize,
    /// Patch feature width (d1).
    pub feature_dim: usize,
    /// Positional embedding width (d_pos).
    pub pos_dim: usize,
    /// Gene symbols per patient (N).
    pub genes: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Hidden width of the risk head.
    pub head_hidden: usize,
    /// Attention-weight dropout during training.
    pub dropout: f64,
    /// One MLP per block for both streams, or one per stream.
    pub share_mlp: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patches: 16,
            groups: 8,
            feature_dim: 64,
            pos_dim: 16,
            genes: 256,
            layers: 2,
            heads: 4,
            mlp_width: 128,
            head_hidden: 80,
            dropout: 0.0,
            share_mlp: true,
        }
    }
}

impl EncoderConfig {
    /// Token width d = d1 + d_pos.
    pub fn model_dim(&self) -> usize {
        self.feature_dim + self.pos_dim
    }

    /// Genes per group, d2 = floor(N / m).
    pub fn group_width(&self) -> usize {
        self.genes / self.groups.max(1)
    }

    /// Trailing genes dropped by grouping.
    pub fn dropped_genes(&self) -> usize {
        self.genes % self.groups.max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patches", self.patches),
            ("groups", self.groups),
            ("d1", self.feature_dim),
            ("d_pos", self.pos_dim),
            ("genes", self.genes),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_width", self.mlp_width),
            ("head_hidden", self.head_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        let d = self.model_dim();
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width d = d1 + d_pos = {d} is not divisible by heads = {}",
                self.heads
            )));
        }
        if !self.pos_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_pos = {} must be divisible by 4",
                self.pos_dim
            )));
        }
        if self.genes < self.groups {
            return Err(Error::Config(format!(
                "genes = {} is smaller than groups = {}",
                self.genes, self.groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Encoder variants: the full model and its three ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Default,
    /// Full self-attention over the concatenated token sequence.
    Symmetric,
    /// Gene tokens replaced by seeded standard-normal noise.
    RandomGene,
    /// Gene tokens bypass the encoder and are pooled directly.
    UninducedConcat,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Default,
        AblationMode::Symmetric,
        AblationMode::RandomGene,
        AblationMode::UninducedConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Default => "default",
            AblationMode::Symmetric => "symmetric",
            AblationMode::RandomGene => "random_gene",
            AblationMode::UninducedConcat => "uninduced_concat",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode {s:?}; expected one of default, symmetric, random_gene, uninduced_concat"
            ))
        })
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 64,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size = {} is below 2; partial likelihood needs risk sets",
                self.batch_size
            )));
        }
        let test = 1.0 - self.train_fraction - self.val_fraction;
        if self.train_fraction <= 0.0 || self.val_fraction <= 0.0 || test <= 1e-9 {
            return Err(Error::Config(format!(
                "train_fraction = {} and val_fraction = {} must be positive and leave a test split",
                self.train_fraction, self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Synthetic cohort settings that are not architecture-bound. Patch count,
/// feature width, and gene count come from [`EncoderConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub patients: usize,
    pub censoring: f64,
    pub image_signal: f64,
    pub gene_signal: f64,
    pub patch_noise: f64,
    pub gene_noise: f64,
    pub informative_genes: usize,
    pub multi_slide_fraction: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            patients: 500,
            censoring: 0.3,
            image_signal: 2.0,
            gene_signal: 2.0,
            patch_noise: 4.0,
            gene_noise: 0.5,
            informative_genes: 32,
            multi_slide_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generator(GeneratorParams),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub mode: AblationMode,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::Generator(GeneratorParams::default()),
            mode: AblationMode::Default,
            seed: 0,
            out: PathBuf::from("run"),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse::<V>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?} as {}", std::any::type_name::<V>())))
}

impl RunConfig {
    /// Parses `key = value` lines. Unknown or repeated keys are errors;
    /// omitted keys take defaults. `base` resolves a relative manifest path.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut gen = GeneratorParams::default();
        let mut manifest: Option<PathBuf> = None;
        let mut gen_keys = Vec::new();
        let mut head_hidden_set = false;
        let mut seen = std::collections::HashSet::new();

        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let e = &mut cfg.encoder;
            let t = &mut cfg.train;
            match key {
                "patches" => e.patches = parse_value(key, value)?,
                "groups" => e.groups = parse_value(key, value)?,
                "d1" => e.feature_dim = parse_value(key, value)?,
                "d_pos" => e.pos_dim = parse_value(key, value)?,
                "genes" => e.genes = parse_value(key, value)?,
                "layers" => e.layers = parse_value(key, value)?,
                "heads" => e.heads = parse_value(key, value)?,
                "mlp_width" => e.mlp_width = parse_value(key, value)?,
                "head_hidden" => {
                    e.head_hidden = parse_value(key, value)?;
                    head_hidden_set = true;
                }
                "dropout" => e.dropout = parse_value(key, value)?,
                "share_mlp" => e.share_mlp = parse_value(key, value)?,
                "lr" => t.lr = parse_value(key, value)?,
                "epochs" => t.epochs = parse_value(key, value)?,
                "batch_size" => t.batch_size = parse_value(key, value)?,
                "train_fraction" => t.train_fraction = parse_value(key, value)?,
                "val_fraction" => t.val_fraction = parse_value(key, value)?,
                "mode" => cfg.mode = value.parse()?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "out" => cfg.out = PathBuf::from(value),
                "manifest" => manifest = Some(PathBuf::from(value)),
                k if k.starts_with("gen.") => {
                    gen_keys.push(k.to_string());
                    match &k[4..] {
                        "patients" => gen.patients = parse_value(key, value)?,
                        "censoring" => gen.censoring = parse_value(key, value)?,
                        "image_signal" => gen.image_signal = parse_value(key, value)?,
                        "gene_signal" => gen.gene_signal = parse_value(key, value)?,
                        "patch_noise" => gen.patch_noise = parse_value(key, value)?,
                        "gene_noise" => gen.gene_noise = parse_value(key, value)?,
                        "informative_genes" => gen.informative_genes = parse_value(key, value)?,
                        "multi_slide_fraction" => gen.multi_slide_fraction = parse_value(key, value)?,
                        _ => return Err(Error::Config(format!("unknown key {key}"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        }

        if !head_hidden_set {
            cfg.encoder.head_hidden = cfg.encoder.model_dim();
        }
        cfg.data = match manifest {
            Some(path) => {
                if !gen_keys.is_empty() {
                    return Err(Error::Config(format!(
                        "manifest and generator keys are mutually exclusive (found {})",
                        gen_keys.join(", ")
                    )));
                }
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path,
                };
                if !path.exists() {
                    return Err(Error::Config(format!("manifest {} does not exist", path.display())));
                }
                DataSource::Manifest(path)
            }
            None => DataSource::Generator(gen),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if let DataSource::Generator(g) = &self.data {
            if !(g.censoring > 0.0 && g.censoring < 1.0) {
                return Err(Error::Config(format!(
                    "gen.censoring = {} must lie strictly between 0 and 1",
                    g.censoring
                )));
            }
            if g.patients < 10 {
                return Err(Error::Config("gen.patients must be at least 10".into()));
            }
            if g.informative_genes > self.encoder.genes {
                return Err(Error::Config(format!(
                    "gen.informative_genes = {} exceeds genes = {}",
                    g.informative_genes, self.encoder.genes
                )));
            }
            if !(0.0..=1.0).contains(&g.multi_slide_fraction) {
                return Err(Error::Config("gen.multi_slide_fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line. Parsing the
    /// echo yields an equal config.
    pub fn echo(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let mut lines = vec![
            format!("patches = {}", e.patches),
            format!("groups = {}", e.groups),
            format!("d1 = {}", e.feature_dim),
            format!("d_pos = {}", e.pos_dim),
            format!("genes = {}", e.genes),
            format!("layers = {}", e.layers),
            format!("heads = {}", e.heads),
            format!("mlp_width = {}", e.mlp_width),
            format!("head_hidden = {}", e.head_hidden),
            format!("dropout = {}", e.dropout),
            format!("share_mlp = {}", e.share_mlp),
            format!("lr = {}", t.lr),
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("train_fraction = {}", t.train_fraction),
            format!("val_fraction = {}", t.val_fraction),
            format!("mode = {}", self.mode),
            format!("seed = {}", self.seed),
            format!("out = {}", self.out.display()),
        ];
        match &self.data {
            DataSource::Manifest(p) => lines.push(format!("manifest = {}", p.display())),
            DataSource::Generator(g) => {
                lines.push(format!("gen.patients = {}", g.patients));
                lines.push(format!("gen.censoring = {}", g.censoring));
                lines.push(format!("gen.image_signal = {}", g.image_signal));
                lines.push(format!("gen.gene_signal = {}", g.gene_signal));
                lines.push(format!("gen.patch_noise = {}", g.patch_noise));
                lines.push(format!("gen.gene_noise = {}", g.gene_noise));
                lines.push(format!("gen.informative_genes = {}", g.informative_genes));
                lines.push(format!("gen.multi_slide_fraction = {}", g.multi_slide_fraction));
            }
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults_and_full_echo() {
        let cfg = RunConfig::parse("", None).unwrap();
        assert_eq!(cfg, RunConfig { ..RunConfig::default() });
        assert_eq!(cfg.encoder.head_hidden, cfg.encoder.model_dim());
        let echo = cfg.echo();
        for key in ["patches", "heads", "lr", "gen.patients", "mode", "seed"] {
            assert!(echo.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key}");
        }
    }

    #[test]
    fn heads_must_divide_model_width() {
        let err = RunConfig::parse("heads = 3\nd1 = 64\nd_pos = 16\n", None).unwrap_err();
        assert!(err.to_string().contains("not divisible by heads = 3"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys_fail_closed() {
        assert!(RunConfig::parse("haeds = 4", None).is_err());
        assert!(RunConfig::parse("gen.patiens = 40", None).is_err());
        assert!(RunConfig::parse("heads = 4\nheads = 4", None).is_err());
        assert!(RunConfig::parse("heads = four", None).is_err());
        assert!(RunConfig::parse("just words", None).is_err());
    }

    #[test]
    fn small_batches_and_degenerate_censoring_rejected() {
        assert!(RunConfig::parse("batch_size = 1", None).is_err());
        assert!(RunConfig::parse("gen.censoring = 0", None).is_err());
        assert!(RunConfig::parse("gen.censoring = 1", None).is_err());
    }

    #[test]
    fn manifest_excludes_generator_keys_and_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.tsv"), "").unwrap();
        let cfg = RunConfig::parse("manifest = m.tsv", Some(dir.path())).unwrap();
        assert_eq!(cfg.data, DataSource::Manifest(dir.path().join("m.tsv")));
        assert!(RunConfig::parse("manifest = m.tsv\ngen.patients = 20", Some(dir.path())).is_err());
        assert!(RunConfig::parse("manifest = missing.tsv", Some(dir.path())).is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# header\n\nlayers = 3 # three\n", None).unwrap();
        assert_eq!(cfg.encoder.layers, 3);
    }

    fn valid_config() -> impl Strategy<Value = RunConfig> {
        (
            (1usize..40, 1usize..6, 1usize..40, 1usize..5),
            (
                1usize..4,
                prop::sample::select(vec![1usize, 2, 4]),
                1usize..64,
                0.0f64..0.9,
            ),
            (any::<bool>(), 1e-5f64..1e-1, 1usize..100, 2usize..128),
            (
                0.1f64..0.6,
                0.05f64..0.3,
                any::<u64>(),
                prop::sample::select(AblationMode::ALL.to_vec()),
            ),
            (10usize..600, 0.01f64..0.99, -3.0f64..3.0, 0.0f64..8.0),
        )
            .prop_map(|(a, b, c, d, g)| {
                let (patches, groups, feature_dim, pos_quarter) = a;
                let (layers, heads, mlp_width, dropout) = b;
                let (share_mlp, lr, epochs, batch_size) = c;
                let (train_fraction, val_fraction, seed, mode) = d;
                let (patients, censoring, image_signal, patch_noise) = g;
                let pos_dim = pos_quarter * 4;
                // force divisibility by the head count
                let feature_dim = (feature_dim + pos_dim).div_ceil(heads) * heads - pos_dim;
                let encoder = EncoderConfig {
                    patches,
                    groups,
                    feature_dim,
                    pos_dim,
                    genes: groups * 5 + 3,
                    layers,
                    heads,
                    mlp_width,
                    head_hidden: mlp_width + 1,
                    dropout,
                    share_mlp,
                };
                RunConfig {
                    encoder,
                    train: TrainConfig {
                        lr,
                        epochs,
                        batch_size,
                        train_fraction,
                        val_fraction,
                    },
                    data: DataSource::Generator(GeneratorParams {
                        patients,
                        censoring,
                        image_signal,
                        gene_signal: -image_signal / 3.0,
                        patch_noise,
                        gene_noise: patch_noise / 7.0,
                        informative_genes: groups,
                        multi_slide_fraction: 0.25,
                    }),
                    mode,
                    seed,
                    out: PathBuf::from("runs/x"),
                }
            })
    }

    proptest! {
        #[test]
        fn echo_round_trips(cfg in valid_config()) {
            prop_assume!(cfg.validate().is_ok());
            let back = RunConfig::parse(&cfg.echo(), None).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}

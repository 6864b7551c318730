//! Versioned text checkpoints.
//!
//! ```text
//! ammasurv-checkpoint v1
//! best_epoch 12
//! config 21
//! <config echo, 21 lines>
//! stats 256
//! <mean bits> ...
//! <std bits> ...
//! param block0.attn.query 80 80
//! <f32 bit patterns, hex>
//! end
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns, so a save/load round
//! trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featurize::GeneStats;
use crate::params::ParamStore;
use crate::tensor::Shape;

pub const MAGIC: &str = "ammasurv-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub stats: GeneStats,
    pub best_epoch: usize,
}

fn hex_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:016x}", x.to_bits()))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nbest_epoch {}\n", self.best_epoch);
        let echo = self.config.echo();
        writeln!(s, "config {}", echo.lines().count()).unwrap();
        s.push_str(&echo);
        writeln!(s, "stats {}", self.stats.mean.len()).unwrap();
        writeln!(s, "{}", hex_f64(&self.stats.mean)).unwrap();
        writeln!(s, "{}", hex_f64(&self.stats.std)).unwrap();
        for (name, p) in self.params.iter() {
            let dims: Vec<String> = p.shape.dims().iter().map(usize::to_string).collect();
            writeln!(s, "param {name} {}", dims.join(" ")).unwrap();
            let bits: Vec<String> = p.data.iter().map(|x| format!("{:08x}", x.to_bits())).collect();
            writeln!(s, "{}", bits.join(" ")).unwrap();
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, magic) = next("header")?;
        if magic != MAGIC {
            return Err(err(ln, format!("not a checkpoint (expected {MAGIC:?})")));
        }
        let (ln, l) = next("best_epoch")?;
        let best_epoch = l
            .strip_prefix("best_epoch ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `best_epoch N`".into()))?;
        let (ln, l) = next("config")?;
        let n_cfg: usize = l
            .strip_prefix("config ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `config N`".into()))?;
        let mut echo = String::new();
        for _ in 0..n_cfg {
            let (_, l) = next("config line")?;
            echo.push_str(l);
            echo.push('\n');
        }
        let config = RunConfig::parse(&echo, None).map_err(|e| err(ln, e.to_string()))?;

        let (ln, l) = next("stats")?;
        let n_genes: usize = l
            .strip_prefix("stats ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `stats N`".into()))?;
        let mut stat_row = |what: &str| -> Result<Vec<f64>> {
            let (ln, l) = next(what)?;
            let v = l
                .split_whitespace()
                .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(ln, format!("bad {what} bits: {e}")))?;
            if v.len() != n_genes {
                return Err(err(ln, format!("{what}: expected {n_genes} values, found {}", v.len())));
            }
            Ok(v)
        };
        let mean = stat_row("gene means")?;
        let std = stat_row("gene deviations")?;

        let mut params = ParamStore::new();
        loop {
            let (ln, l) = next("param or end")?;
            if l == "end" {
                break;
            }
            let mut head = l.split_whitespace();
            if head.next() != Some("param") {
                return Err(err(ln, format!("expected `param` or `end`, found {l:?}")));
            }
            let name = head.next().ok_or_else(|| err(ln, "parameter without a name".into()))?;
            let dims = head
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(ln, format!("bad shape: {e}")))?;
            let (ln, l) = next("parameter values")?;
            let data = l
                .split_whitespace()
                .map(|h| u32::from_str_radix(h, 16).map(f32::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(ln, format!("bad value bits: {e}")))?;
            params
                .insert(name, Shape::new(dims), data)
                .map_err(|e| err(ln, e.to_string()))?;
        }
        Ok(Checkpoint {
            config,
            params,
            stats: GeneStats { mean, std },
            best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_text(&text, path)
    }
}

//! Versioned text checkpoints.
//!
//! ```text
//! metasbir-checkpoint v1
//! stage meta
//! variant ours
//! epoch 40
//! dims {"input":32,...}
//! config-lines 73
//! seed = 0
//! ...
//! tensor encoder.hidden.weight 32 256
//! <rows*cols values>
//! ...
//! adam 400
//! first encoder.hidden.weight 32 256
//! <values>
//! second ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a reload is
//! bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::optim::AdamState;
use tapegrad::Tensor;

use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};

pub const MAGIC: &str = "metasbir-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Baseline,
    Meta,
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Meta-training recipe; `None` for the pretrained baseline.
    pub variant: Option<Variant>,
    /// Completed epochs of the stage.
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub params: ModelParams<Tensor>,
    pub optimizer: Option<AdamState>,
}

fn write_tensor(out: &mut String, tag: &str, name: &str, t: &Tensor) {
    let [r, c] = t.shape();
    let _ = writeln!(out, "{tag} {name} {r} {c}");
    let mut first = true;
    for v in t.data() {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} v{VERSION}");
        let _ = writeln!(out, "stage {}", self.stage.name());
        let _ = writeln!(
            out,
            "variant {}",
            self.variant
                .map_or_else(|| "none".to_string(), |v| v.to_string())
        );
        let _ = writeln!(out, "epoch {}", self.epoch);
        let dims = serde_json::to_string(&self.params.dims()).expect("dims serialize");
        let _ = writeln!(out, "dims {dims}");
        let config = self.config.render();
        let _ = writeln!(out, "config-lines {}", config.lines().count());
        out.push_str(&config);
        let names: Vec<String> = self.params.leaves().into_iter().map(|(n, _)| n).collect();
        for (name, t) in self.params.leaves() {
            write_tensor(&mut out, "tensor", &name, t);
        }
        match &self.optimizer {
            None => out.push_str("adam none\n"),
            Some(s) => {
                let _ = writeln!(out, "adam {}", s.step);
                for (name, t) in names.iter().zip(&s.first) {
                    write_tensor(&mut out, "first", name, t);
                }
                for (name, t) in names.iter().zip(&s.second) {
                    write_tensor(&mut out, "second", name, t);
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut r = Reader {
            lines: text.lines().collect(),
            pos: 0,
            origin,
        };
        let header = r.next("header")?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().strip_prefix('v'))
            .ok_or_else(|| r.err(format!("not a checkpoint header: {header:?}")))?;
        let found: u32 = version.parse().map_err(|_| Error::Version {
            found: version.to_string(),
            expected: VERSION,
        })?;
        if found != VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION,
            });
        }
        let stage = match r.field("stage")? {
            "baseline" => Stage::Baseline,
            "meta" => Stage::Meta,
            s => return Err(r.err(format!("unknown stage {s:?}"))),
        };
        let variant = match r.field("variant")? {
            "none" => None,
            "ours" => Some(Variant::Ours),
            "maml-full" => Some(Variant::MamlFull),
            "anil" => Some(Variant::Anil),
            "fixed-margin" => Some(Variant::FixedMargin),
            s => return Err(r.err(format!("unknown variant {s:?}"))),
        };
        let epoch = r.number("epoch")?;
        let dims_text = r.field("dims")?;
        let dims: ModelDims =
            serde_json::from_str(dims_text).map_err(|e| r.err(format!("bad dims: {e}")))?;
        let n_config = r.number("config-lines")?;
        let start = r.pos;
        let mut config_text = String::new();
        for _ in 0..n_config {
            config_text.push_str(r.next("config line")?);
            config_text.push('\n');
        }
        let config = ExperimentConfig::parse(&config_text, origin).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: origin.to_path_buf(),
                line: start + line,
                msg,
            },
            other => other,
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = ModelParams::init(&dims, &mut rng, 0.0, 0.5);
        let names: Vec<(String, [usize; 2])> = template
            .leaves()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            tensors.push(r.tensor("tensor", name, *shape)?);
        }
        let params = template.from_leaves(tensors)?;
        let adam = r.field("adam")?;
        let optimizer = if adam == "none" {
            None
        } else {
            let step: u64 = adam
                .parse()
                .map_err(|_| r.err(format!("bad adam step {adam:?}")))?;
            let mut first = Vec::with_capacity(names.len());
            for (name, shape) in &names {
                first.push(r.tensor("first", name, *shape)?);
            }
            let mut second = Vec::with_capacity(names.len());
            for (name, shape) in &names {
                second.push(r.tensor("second", name, *shape)?);
            }
            Some(AdamState {
                step,
                first,
                second,
            })
        };
        let end = r.next("end marker")?;
        if end != "end" {
            return Err(r.err(format!("expected end marker, got {end:?}")));
        }
        Ok(Checkpoint {
            stage,
            variant,
            epoch,
            config,
            params,
            optimizer,
        })
    }
}

struct Reader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            line: self.pos.max(1),
            msg,
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.lines.get(self.pos) {
            Some(l) => {
                self.pos += 1;
                Ok(l)
            }
            None => {
                self.pos += 1;
                Err(self.err(format!("unexpected end of file, expected {what}")))
            }
        }
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.err(format!("expected {key:?} line, got {line:?}"))),
        }
    }

    fn number(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| self.err(format!("bad {key} value {v:?}")))
    }

    fn tensor(&mut self, tag: &str, name: &str, shape: [usize; 2]) -> Result<Tensor> {
        let head = self.next(tag)?;
        let expected = format!("{tag} {name} {} {}", shape[0], shape[1]);
        if head != expected {
            return Err(self.err(format!("expected {expected:?}, got {head:?}")));
        }
        let body = self.next("tensor values")?;
        let values = body
            .split_ascii_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| self.err(format!("bad value {v:?} in {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != shape[0] * shape[1] {
            return Err(self.err(format!(
                "{name}: expected {} values, got {}",
                shape[0] * shape[1],
                values.len()
            )));
        }
        Ok(Tensor::new(shape, values)?)
    }
}

//! Text checkpoints: `RECEMCKPT v1`, the canonical run config, run metadata,
//! then one `name;dims;base64` line per parameter (f64 little-endian).

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{ConceptModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "RECEMCKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub model: ConceptModel,
}

/// Raw contents before the parameters are bound to a model.
struct Parsed {
    config: RunConfig,
    seed: u64,
    best_epoch: Option<usize>,
    params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\n[config]\n{}[run]\n", self.config.to_text());
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "best_epoch = {}",
            self.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string())
        );
        out.push_str("[params]\n");
        for p in self.model.store.iter() {
            let dims = p.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let _ = writeln!(out, "{};{};{}", p.name, dims, STANDARD.encode(bytes));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Rebuilds the model from the embedded config.
    pub fn from_text(text: &str) -> Result<Self> {
        let parsed = parse(text)?;
        let model = ConceptModel::from_params(parsed.config.model_config(), parsed.params)?;
        Ok(Self {
            config: parsed.config,
            seed: parsed.seed,
            best_epoch: parsed.best_epoch,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Binds the stored parameters to `config` instead of the embedded one,
    /// failing on missing, extra or mis-shaped parameters.
    pub fn load_with(path: &Path, config: &ModelConfig) -> Result<ConceptModel> {
        let parsed = parse(&std::fs::read_to_string(path)?)?;
        ConceptModel::from_params(config.clone(), parsed.params)
    }
}

fn parse(text: &str) -> Result<Parsed> {
    let mut lines = text.lines();
    match lines.next() {
        Some(MAGIC) => {}
        Some(other) => return Err(Error::format(format!("unsupported checkpoint header `{other}`"))),
        None => return Err(Error::format("empty checkpoint")),
    }
    if lines.next() != Some("[config]") {
        return Err(Error::format("checkpoint is missing the [config] section"));
    }
    let mut config_text = String::new();
    let mut section = "config";
    let mut seed = None;
    let mut best_epoch = None;
    let mut params = Vec::new();
    for line in lines {
        match line {
            "[run]" if section == "config" => {
                section = "run";
                continue;
            }
            "[params]" if section == "run" => {
                section = "params";
                continue;
            }
            _ => {}
        }
        match section {
            "config" => {
                config_text.push_str(line);
                config_text.push('\n');
            }
            "run" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(format!("bad run line `{line}`")))?;
                let v = v.trim();
                match k.trim() {
                    "seed" => seed = Some(v.parse().map_err(|_| Error::format(format!("bad seed `{v}`")))?),
                    "best_epoch" => {
                        best_epoch = Some(if v == "none" {
                            None
                        } else {
                            Some(v.parse().map_err(|_| Error::format(format!("bad best_epoch `{v}`")))?)
                        })
                    }
                    other => return Err(Error::format(format!("unknown run key `{other}`"))),
                }
            }
            _ => params.push(parse_param(line)?),
        }
    }
    if section != "params" {
        return Err(Error::format("checkpoint is truncated before [params]"));
    }
    let config = RunConfig::parse(&config_text).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    Ok(Parsed {
        config,
        seed: seed.ok_or_else(|| Error::format("checkpoint has no seed"))?,
        best_epoch: best_epoch.ok_or_else(|| Error::format("checkpoint has no best_epoch"))?,
        params,
    })
}

fn parse_param(line: &str) -> Result<(String, Tensor)> {
    let mut parts = line.splitn(3, ';');
    let (name, dims, b64) = match (parts.next(), parts.next(), parts.next()) {
        (Some(n), Some(d), Some(b)) if !n.is_empty() => (n, d, b),
        _ => return Err(Error::format(format!("bad parameter line `{line}`"))),
    };
    let shape: Vec<usize> = dims
        .split('x')
        .map(|d| d.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(format!("parameter `{name}`: bad dims `{dims}`")))?;
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| Error::format(format!("parameter `{name}`: corrupted base64 ({e})")))?;
    let expect = shape.iter().product::<usize>() * 8;
    if bytes.len() != expect {
        return Err(Error::format(format!(
            "parameter `{name}`: {} bytes for dims {dims}, expected {expect}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(format!("parameter `{name}`: {e}")))?;
    Ok((name.to_string(), tensor))
}

//! Flat `key = value` configuration with section prefixes:
//!
//! ```text
//! preset = object-64          # texture | sound | object-64
//! net.latent_dim = 20         # object-64 only
//! net.latent_shape = 4        # or a full network, one net.layer per layer
//! net.layer = dense in=4 out=8x4x4 activation=leaky_relu:0.2 normalize=false
//! hyper.iterations = 600
//! infer.steps = 30
//! data.manifest = train.manifest
//! observation.kind = masked   # full | masked | projected
//! observation.pepper = 0.5
//! ```
//!
//! The same `hyper.*`, `infer.*`, `net.*` and `observation.*` lines make up
//! the header of a checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::generator::NetSpec;
use crate::inference::{InferConfig, InferMode};
use crate::learning::Hyper;
use crate::observation::SENSING_STD;

/// Split text into trimmed `(key, value)` pairs, skipping blanks and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::format(format!("line {}: expected key = value, got {l:?}", n + 1))
                })
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(format!("{key}: cannot parse {value:?}")))
}

/// Render hyper-parameters as `hyper.*` and `infer.*` lines. Reals use the
/// shortest representation that parses back to the same bits.
pub fn hyper_to_text(h: &Hyper) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "hyper.iterations = {}", h.iterations);
    let _ = writeln!(s, "hyper.learning_rate = {:?}", h.learning_rate);
    let _ = writeln!(s, "hyper.momentum = {:?}", h.momentum);
    let _ = writeln!(s, "hyper.batch_size = {}", h.batch_size);
    let _ = writeln!(s, "hyper.seed = {}", h.seed);
    let _ = writeln!(s, "hyper.init_std = {:?}", h.init_std);
    let _ = writeln!(s, "infer.steps = {}", h.infer.steps);
    let _ = writeln!(s, "infer.step_size = {:?}", h.infer.step_size);
    let _ = writeln!(s, "infer.sigma = {:?}", h.infer.sigma);
    let _ = writeln!(s, "infer.mode = {}", h.infer.mode.name());
    s
}

/// Apply one `hyper.*` / `infer.*` entry. Returns false for other keys.
pub fn apply_hyper_entry(h: &mut Hyper, key: &str, value: &str) -> Result<bool> {
    match key {
        "hyper.iterations" => h.iterations = parse_num(key, value)?,
        "hyper.learning_rate" => h.learning_rate = parse_num(key, value)?,
        "hyper.momentum" => h.momentum = parse_num(key, value)?,
        "hyper.batch_size" => h.batch_size = parse_num(key, value)?,
        "hyper.seed" => h.seed = parse_num(key, value)?,
        "hyper.init_std" => h.init_std = parse_num(key, value)?,
        "infer.steps" => h.infer.steps = parse_num(key, value)?,
        "infer.step_size" => h.infer.step_size = parse_num(key, value)?,
        "infer.sigma" => h.infer.sigma = parse_num(key, value)?,
        "infer.mode" => h.infer.mode = InferMode::parse(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    Full,
    Masked,
    Projected,
}

/// How training observations are formed from the dataset's signals.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationConfig {
    pub kind: ObservationKind,
    /// Masked, no mask files: pepper patches up to this occluded fraction.
    pub pepper: Option<f64>,
    /// Masked, no mask files: one occluded square of this side.
    pub region: Option<usize>,
    /// Projected: number of measurements K.
    pub sensing_k: Option<usize>,
    pub sensing_std: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            kind: ObservationKind::Full,
            pepper: None,
            region: None,
            sensing_k: None,
            sensing_std: SENSING_STD,
        }
    }
}

impl ObservationConfig {
    pub fn to_text(&self) -> String {
        let kind = match self.kind {
            ObservationKind::Full => "full",
            ObservationKind::Masked => "masked",
            ObservationKind::Projected => "projected",
        };
        let mut s = format!("observation.kind = {kind}\n");
        if let Some(p) = self.pepper {
            let _ = writeln!(s, "observation.pepper = {p:?}");
        }
        if let Some(r) = self.region {
            let _ = writeln!(s, "observation.region = {r}");
        }
        if let Some(k) = self.sensing_k {
            let _ = writeln!(s, "observation.sensing_k = {k}");
        }
        let _ = writeln!(s, "observation.sensing_std = {:?}", self.sensing_std);
        s
    }

    /// Apply one `observation.*` entry. Returns false for other keys.
    pub fn apply_entry(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "observation.kind" => {
                self.kind = match value {
                    "full" => ObservationKind::Full,
                    "masked" => ObservationKind::Masked,
                    "projected" => ObservationKind::Projected,
                    other => {
                        return Err(Error::format(format!("unknown observation kind {other:?}")))
                    }
                }
            }
            "observation.pepper" => self.pepper = Some(parse_num(key, value)?),
            "observation.region" => self.region = Some(parse_num(key, value)?),
            "observation.sensing_k" => self.sensing_k = Some(parse_num(key, value)?),
            "observation.sensing_std" => self.sensing_std = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ObservationKind::Projected if self.sensing_k.is_none() => Err(Error::format(
                "projected observations need observation.sensing_k",
            )),
            ObservationKind::Masked if self.pepper.is_some() && self.region.is_some() => Err(
                Error::format("observation.pepper and observation.region are exclusive"),
            ),
            _ => Ok(()),
        }
    }
}

/// Build a network from `net.*` entries (prefix already stripped) or a preset.
pub fn spec_from_entries(
    preset: Option<&str>,
    latent_dim: Option<usize>,
    net: &[(String, String)],
) -> Result<NetSpec> {
    match (preset, net.is_empty()) {
        (Some(_), false) => Err(Error::format(
            "give either a preset or net.* layers, not both",
        )),
        (Some(name), true) => {
            if latent_dim.is_some() && name != "object-64" {
                return Err(Error::format(
                    "net.latent_dim applies to the object-64 preset only",
                ));
            }
            NetSpec::preset(name, latent_dim)
        }
        (None, false) => NetSpec::from_entries(net.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
        (None, true) => Err(Error::format(
            "configuration names no network (preset or net.*)",
        )),
    }
}

/// A parsed training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: NetSpec,
    pub hyper: Hyper,
    pub manifest: Option<PathBuf>,
    pub observation: ObservationConfig,
}

impl TrainConfig {
    /// Parse configuration text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut preset = None;
        let mut latent_dim = None;
        let mut net = Vec::new();
        let mut manifest = None;
        let mut observation = ObservationConfig::default();
        let mut rest = Vec::new();
        for (key, value) in &entries {
            match key.as_str() {
                "preset" => preset = Some(value.clone()),
                "net.latent_dim" => latent_dim = Some(parse_num(key, value)?),
                "data.manifest" => manifest = Some(base_dir.join(value)),
                k if k.starts_with("net.") => {
                    net.push((k["net.".len()..].to_string(), value.clone()))
                }
                k if observation.apply_entry(k, value)? => {}
                _ => rest.push((key, value)),
            }
        }
        let spec = spec_from_entries(preset.as_deref(), latent_dim, &net)?;
        let mut hyper = Hyper {
            infer: if preset.as_deref() == Some("object-64") {
                InferConfig::object()
            } else {
                InferConfig::texture()
            },
            ..Hyper::default()
        };
        for (key, value) in rest {
            if !apply_hyper_entry(&mut hyper, key, value)? {
                return Err(Error::format(format!("unknown configuration key {key:?}")));
            }
        }
        hyper.validate()?;
        observation.validate()?;
        Ok(TrainConfig {
            spec,
            hyper,
            manifest,
            observation,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        TrainConfig::parse(&text, base)
    }

    /// Canonical text; parses back to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for line in self.spec.to_text().lines() {
            let _ = writeln!(s, "net.{line}");
        }
        s.push_str(&hyper_to_text(&self.hyper));
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "data.manifest = {}", m.display());
        }
        s.push_str(&self.observation.to_text());
        s
    }
}

//! Dataset manifests and assembly of training samples.
//!
//! ```text
//! normalize = symmetric             # bytes v/127.5 - 1, PCM s/32768
//! length = 60000                    # sounds: pad or truncate to this
//! sample = img/001.ppm kind=image
//! sample = img/002.ppm kind=image mask=masks/002.pgm
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::inference::Sample;
use crate::io::codec::{broadcast_mask, decode_image, decode_mask, decode_wav, fit_length};
use crate::io::config::{parse_entries, ObservationConfig, ObservationKind};
use crate::linalg::Matrix;
use crate::observation::{
    make_pepper_mask, make_region_mask, make_sensing_matrix, ObservationModel,
};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Image,
    Sound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub kind: SampleKind,
    pub mask: Option<PathBuf>,
}

/// How raw file values map into the model's range. Only the symmetric
/// [-1, 1] scaling is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub normalization: Normalization,
    /// Declared sound length in samples.
    pub length: Option<usize>,
}

/// Decoded signals, with per-sample masks where the manifest gives them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub signals: Vec<Tensor>,
    pub masks: Vec<Option<Tensor>>,
}

impl DatasetManifest {
    /// Parse manifest text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (key, value) in parse_entries(text)? {
            match key.as_str() {
                "normalize" => {
                    if value != "symmetric" {
                        return Err(Error::format(format!(
                            "unknown normalization rule {value:?}"
                        )));
                    }
                }
                "length" => {
                    m.length = Some(
                        value
                            .parse()
                            .map_err(|_| Error::format(format!("bad sound length {value:?}")))?,
                    )
                }
                "sample" => m.records.push(parse_record(&value, base_dir)?),
                other => return Err(Error::format(format!("unknown manifest key {other:?}"))),
            }
        }
        if m.records.is_empty() {
            return Err(Error::format("manifest lists no samples"));
        }
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read manifest {}: {e}", path.display())))?;
        DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("normalize = symmetric\n");
        if let Some(len) = self.length {
            let _ = writeln!(s, "length = {len}");
        }
        for r in &self.records {
            let kind = match r.kind {
                SampleKind::Image => "image",
                SampleKind::Sound => "sound",
            };
            let _ = write!(s, "sample = {} kind={kind}", r.path.display());
            if let Some(mask) = &r.mask {
                let _ = write!(s, " mask={}", mask.display());
            }
            s.push('\n');
        }
        s
    }

    /// Decode every sample; all must exist and share one shape.
    pub fn load(&self) -> Result<Dataset> {
        let mut signals = Vec::with_capacity(self.records.len());
        let mut masks = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let bytes = read(&r.path)?;
            let signal = match r.kind {
                SampleKind::Image => decode_image(&bytes)?,
                SampleKind::Sound => {
                    let (t, _) = decode_wav(&bytes)?;
                    match self.length {
                        Some(len) => fit_length(&t, len)?,
                        None => t,
                    }
                }
            };
            let mask = match &r.mask {
                Some(p) => {
                    let m = decode_mask(&read(p)?)?;
                    if m.shape()[1..] != signal.shape()[1..] {
                        return Err(Error::format(format!(
                            "mask {} has shape {:?}, sample has {:?}",
                            p.display(),
                            m.shape(),
                            signal.shape()
                        )));
                    }
                    Some(broadcast_mask(&m, signal.shape()[0])?)
                }
                None => None,
            };
            if let Some(first) = signals.first() {
                let first: &Tensor = first;
                if first.shape() != signal.shape() {
                    return Err(Error::format(format!(
                        "{} has shape {:?}, earlier samples have {:?}",
                        r.path.display(),
                        signal.shape(),
                        first.shape()
                    )));
                }
            }
            signals.push(signal);
            masks.push(mask);
        }
        Ok(Dataset { signals, masks })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))
}

fn parse_record(value: &str, base_dir: &Path) -> Result<SampleRecord> {
    let mut parts = value.split_whitespace();
    let path = parts
        .next()
        .ok_or_else(|| Error::format("sample record without a path"))?;
    let mut kind = None;
    let mut mask = None;
    for field in parts {
        match field.split_once('=') {
            Some(("kind", "image")) => kind = Some(SampleKind::Image),
            Some(("kind", "sound")) => kind = Some(SampleKind::Sound),
            Some(("mask", m)) => mask = Some(base_dir.join(m)),
            _ => return Err(Error::format(format!("bad sample field {field:?}"))),
        }
    }
    let path = base_dir.join(path);
    let kind = kind.unwrap_or(if crate::io::codec::is_sound_path(&path) {
        SampleKind::Sound
    } else {
        SampleKind::Image
    });
    Ok(SampleRecord { path, kind, mask })
}

/// Training samples with any generated observation data: masks drawn from
/// the `Masks` stream and a sensing matrix from the `Sensing` stream of
/// `seed`. Mask files in the dataset take precedence over generated masks.
#[derive(Debug, Clone)]
pub struct Observed {
    pub samples: Vec<Sample>,
    pub masks: Vec<Option<Tensor>>,
    pub sensing: Option<Arc<Matrix>>,
}

pub fn observe_dataset(data: &Dataset, cfg: &ObservationConfig, seed: u64) -> Result<Observed> {
    cfg.validate()?;
    let n = data.signals.len();
    match cfg.kind {
        ObservationKind::Full => Ok(Observed {
            samples: data.signals.iter().cloned().map(Sample::full).collect(),
            masks: vec![None; n],
            sensing: None,
        }),
        ObservationKind::Masked => {
            let mut samples = Vec::with_capacity(n);
            let mut masks = Vec::with_capacity(n);
            for (i, (signal, given)) in data.signals.iter().zip(&data.masks).enumerate() {
                let mask = match (given, cfg.pepper, cfg.region) {
                    (Some(m), _, _) => m.clone(),
                    (None, Some(p), _) => make_pepper_mask(signal.shape(), p, &mut stream(seed, Purpose::Masks, i, 0))?,
                    (None, None, Some(side)) => {
                        make_region_mask(signal.shape(), side, &mut stream(seed, Purpose::Masks, i, 0))?
                    }
                    (None, None, None) => {
                        return Err(Error::format(format!(
                            "sample {i} has no mask file and no observation.pepper or observation.region is set"
                        )))
                    }
                };
                samples.push(Sample::observe(
                    signal,
                    ObservationModel::masked(mask.clone())?,
                )?);
                masks.push(Some(mask));
            }
            Ok(Observed {
                samples,
                masks,
                sensing: None,
            })
        }
        ObservationKind::Projected => {
            let k = cfg.sensing_k.expect("validated");
            let d = data.signals[0].numel();
            let s = Arc::new(make_sensing_matrix(
                k,
                d,
                cfg.sensing_std,
                &mut stream(seed, Purpose::Sensing, 0, 0),
            )?);
            let model = ObservationModel::projected(s.clone())?;
            let samples = data
                .signals
                .iter()
                .map(|sig| Sample::observe(sig, model.clone()))
                .collect::<Result<_>>()?;
            Ok(Observed {
                samples,
                masks: vec![None; n],
                sensing: Some(s),
            })
        }
    }
}

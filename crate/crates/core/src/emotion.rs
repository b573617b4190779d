//! Emotion labels as points on the valence-arousal unit circle, the
//! piecewise label similarity and the weighted emotional shift (WES).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize_label;

/// Dot products within this distance of zero take the orthogonal branch.
pub const ZERO_DOT_TOLERANCE: f64 = 1e-9;

/// Default circumplex placement in degrees. Synonyms used by different
/// datasets share an angle; a wheel only ever holds one dataset's labels.
pub const DEFAULT_ANGLES: &[(&str, f64)] = &[
    ("happy", 30.0),
    ("happiness", 30.0),
    ("joy", 30.0),
    ("joyful", 30.0),
    ("powerful", 45.0),
    ("excited", 60.0),
    ("surprise", 90.0),
    ("fear", 115.0),
    ("scared", 115.0),
    ("angry", 135.0),
    ("anger", 135.0),
    ("mad", 135.0),
    ("frustrated", 150.0),
    ("disgust", 170.0),
    ("sad", 225.0),
    ("sadness", 225.0),
    ("neutral", 315.0),
    ("peaceful", 340.0),
];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("label {0:?} is not on the emotion wheel")]
    UnknownLabel(String),
    #[error("angle {angle} for label {label:?} is outside [0, 360)")]
    AngleOutOfRange { label: String, angle: f64 },
    #[error("an emotion wheel needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("duplicate label {0:?} after normalization")]
    DuplicateLabel(String),
    #[error("similarity {0} is outside [0, 1]")]
    SimilarityOutOfRange(f64),
    #[error("WES parameters must be finite and non-negative (k = {k}, b = {b})")]
    InvalidParams { k: f64, b: f64 },
    #[error("cannot read wheel config {path}: {message}")]
    Config { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WheelConfig", into = "WheelConfig")]
pub struct EmotionWheel {
    angles: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct WheelConfig {
    labels: BTreeMap<String, f64>,
}

impl TryFrom<WheelConfig> for EmotionWheel {
    type Error = GeometryError;

    fn try_from(cfg: WheelConfig) -> Result<Self, Self::Error> {
        EmotionWheel::new(cfg.labels)
    }
}

impl From<EmotionWheel> for WheelConfig {
    fn from(w: EmotionWheel) -> Self {
        WheelConfig { labels: w.angles }
    }
}

impl EmotionWheel {
    pub fn new<I, S>(angles: I) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (label, angle) in angles {
            let label = normalize_label(label.as_ref());
            if !(0.0..360.0).contains(&angle) {
                return Err(GeometryError::AngleOutOfRange { label, angle });
            }
            if map.insert(label.clone(), angle).is_some() {
                return Err(GeometryError::DuplicateLabel(label));
            }
        }
        if map.len() < 2 {
            return Err(GeometryError::TooFewLabels(map.len()));
        }
        Ok(EmotionWheel { angles: map })
    }

    /// Wheel over exactly `labels`, placed with [`DEFAULT_ANGLES`].
    pub fn circumplex<S: AsRef<str>>(labels: &[S]) -> Result<Self, GeometryError> {
        let placed = labels
            .iter()
            .map(|l| {
                let l = normalize_label(l.as_ref());
                DEFAULT_ANGLES
                    .iter()
                    .find(|(name, _)| *name == l)
                    .map(|(_, a)| (l.clone(), *a))
                    .ok_or(GeometryError::UnknownLabel(l))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EmotionWheel::new(placed)
    }

    /// Reads `{"labels": {"<label>": <degrees>, ...}}`.
    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let err = |message: String| GeometryError::Config {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let cfg: WheelConfig = serde_json::from_reader(BufReader::new(file)).map_err(|e| err(e.to_string()))?;
        EmotionWheel::new(cfg.labels)
    }

    /// Number of labels on the wheel.
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.angles.keys().map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.angles.contains_key(label)
    }

    pub fn angle(&self, label: &str) -> Result<f64, GeometryError> {
        self.angles
            .get(label)
            .copied()
            .ok_or_else(|| GeometryError::UnknownLabel(label.to_string()))
    }

    pub fn label_vector(&self, label: &str) -> Result<[f64; 2], GeometryError> {
        let theta = self.angle(label)?.to_radians();
        Ok([theta.cos(), theta.sin()])
    }

    /// Piecewise similarity: the cosine of the angle between the two labels
    /// when their vectors point the same way, 0 when they oppose, and `1/N`
    /// when they are orthogonal.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, GeometryError> {
        let delta = (self.angle(a)? - self.angle(b)?).to_radians();
        // For unit vectors the dot product is the cosine of the angle between them.
        let dot = delta.cos();
        Ok(if dot.abs() <= ZERO_DOT_TOLERANCE {
            1.0 / self.len() as f64
        } else if dot > 0.0 {
            dot.max(0.0)
        } else {
            0.0
        })
    }
}

/// Affine weights applied to a similarity to get one shift's weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WesParams {
    pub k: f64,
    pub b: f64,
}

impl Default for WesParams {
    fn default() -> Self {
        WesParams { k: 1.0, b: 1.0 }
    }
}

impl WesParams {
    pub fn new(k: f64, b: f64) -> Result<Self, GeometryError> {
        if !(k.is_finite() && b.is_finite() && k >= 0.0 && b >= 0.0) {
            return Err(GeometryError::InvalidParams { k, b });
        }
        Ok(WesParams { k, b })
    }

    /// `k * s + b` for a similarity in `[0, 1]`.
    pub fn wes(&self, s: f64) -> Result<f64, GeometryError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(GeometryError::SimilarityOutOfRange(s));
        }
        Ok(self.k * s + self.b)
    }
}

/// Free-function form of [`WesParams::wes`].
pub fn wes(params: &WesParams, s: f64) -> Result<f64, GeometryError> {
    params.wes(s)
}

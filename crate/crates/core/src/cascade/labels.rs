use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::imaging::Polygon;

/// Number of entries in a class probability vector: autosomes 1..22, X, Y.
pub const NUM_CLASSES: usize = 24;

/// Chromosome class. `Unknown` is never a probability slot; it marks a
/// detection whose classifier output was unavailable or not confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Autosome(u8),
    X,
    Y,
    Unknown,
}

impl ClassLabel {
    /// All 24 probability-bearing labels in slot order.
    pub fn all() -> impl Iterator<Item = ClassLabel> {
        (0..NUM_CLASSES).map(|i| ClassLabel::from_index(i).expect("in range"))
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        match i {
            0..=21 => Some(ClassLabel::Autosome(i as u8 + 1)),
            22 => Some(ClassLabel::X),
            23 => Some(ClassLabel::Y),
            _ => None,
        }
    }

    /// Probability slot, `None` for `Unknown`.
    pub fn index(self) -> Option<usize> {
        match self {
            ClassLabel::Autosome(n) if (1..=22).contains(&n) => Some(n as usize - 1),
            ClassLabel::Autosome(_) | ClassLabel::Unknown => None,
            ClassLabel::X => Some(22),
            ClassLabel::Y => Some(23),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Autosome(n) => write!(f, "{n}"),
            ClassLabel::X => f.write_str("X"),
            ClassLabel::Y => f.write_str("Y"),
            ClassLabel::Unknown => f.write_str("Unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid class label {0:?}")]
pub struct InvalidClassLabel(pub String);

impl FromStr for ClassLabel {
    type Err = InvalidClassLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "X" => Ok(ClassLabel::X),
            "Y" => Ok(ClassLabel::Y),
            "Unknown" => Ok(ClassLabel::Unknown),
            _ => match s.parse::<u8>() {
                Ok(n) if (1..=22).contains(&n) && !s.starts_with('0') => Ok(ClassLabel::Autosome(n)),
                _ => Err(InvalidClassLabel(s.to_string())),
            },
        }
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Orientation of the chromosome long axis as a (sin, cos) pair.
///
/// Angle 0 is vertical; positive angles lean the top of the axis to the
/// right (clockwise on screen). Axes are undirected, so angles are only
/// meaningful modulo 180°.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub sin: f64,
    pub cos: f64,
}

impl Rotation {
    pub const UPRIGHT: Rotation = Rotation { sin: 0.0, cos: 1.0 };

    pub fn from_degrees(deg: f64) -> Self {
        let (sin, cos) = deg.to_radians().sin_cos();
        Self { sin, cos }
    }

    /// Angle in (-180, 180].
    pub fn degrees(&self) -> f64 {
        self.sin.atan2(self.cos).to_degrees()
    }

    /// Rescales onto the unit circle; a zero vector becomes upright.
    pub fn normalized(&self) -> Self {
        let n = self.sin.hypot(self.cos);
        if n < 1e-12 || !n.is_finite() {
            Self::UPRIGHT
        } else {
            Self {
                sin: self.sin / n,
                cos: self.cos / n,
            }
        }
    }
}

/// Absolute difference between two axis angles, folded into [0, 90].
pub fn axis_angle_difference(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Uniform distribution over the 24 classes.
pub fn uniform_probs() -> Vec<f64> {
    vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES]
}

/// Index of the largest probability; ties resolve to the lowest slot.
pub fn argmax(probs: &[f64]) -> Option<usize> {
    probs
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((i, p)),
        })
        .map(|(i, _)| i)
}

/// Per-chromosome result in original-image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u32,
    pub polygon: Polygon,
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    #[serde(rename = "probs")]
    pub class_probs: Vec<f64>,
    pub rotation: Rotation,
    pub score: f64,
    /// Set when a reviewer chose the class and the distribution only encodes
    /// that choice.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub user_asserted: bool,
}

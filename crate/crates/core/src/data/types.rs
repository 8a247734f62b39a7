use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::substrate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Ir];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Ir => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "visible" => Ok(Modality::Rgb),
            "ir" | "thermal" => Ok(Modality::Ir),
            other => Err(Error::Parse(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`; IR is replicated over the channels.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub modality: Modality,
    pub camera: usize,
    pub keypoints: Option<Vec<Keypoint>>,
    /// Location relative to the dataset root (used for export and reporting).
    pub path: PathBuf,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.dim(1), self.image.dim(2))
    }
}

/// `2DK` training images ordered `[D*K RGB | D*K IR]`; within each modality
/// the `K` images of one identity are contiguous and identities appear in
/// the same order in both halves.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch<F: Scalar> {
    pub rgb: Tensor<F>,
    pub ir: Tensor<F>,
    /// Class indices in `[0, num_classes)`, one per image.
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub heatmaps: Tensor<F>,
    /// Dataset indices of the drawn samples.
    pub indices: Vec<usize>,
    pub d: usize,
    pub k: usize,
}

impl<F: Scalar> MiniBatch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

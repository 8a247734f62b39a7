use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Modality, Sample};
use crate::error::{Error, Result};

/// An immutable collection of samples sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub keypoint_count: usize,
}

/// Per-modality and per-camera image counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub identities: usize,
    pub per_modality: BTreeMap<Modality, usize>,
    pub per_camera: BTreeMap<usize, usize>,
    pub with_keypoints: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} identities", self.identities)?;
        for (m, n) in &self.per_modality {
            write!(f, ", {n} {m}")?;
        }
        let cams: Vec<String> = self.per_camera.iter().map(|(c, n)| format!("cam{c}={n}")).collect();
        write!(f, " [{}], {} with keypoints", cams.join(" "), self.with_keypoints)
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, keypoint_count: usize) -> Result<Self> {
        let mut hw = None;
        for s in &samples {
            if s.image.ndim() != 3 || s.image.dim(0) != 3 {
                return Err(Error::ingestion(&s.path, format!("image shape {:?} is not 3 x H x W", s.image.shape())));
            }
            match hw {
                None => hw = Some(s.hw()),
                Some(size) if size != s.hw() => {
                    return Err(Error::ingestion(&s.path, format!("image size {:?} differs from {:?}", s.hw(), size)))
                }
                _ => {}
            }
            if let Some(kps) = &s.keypoints {
                if kps.len() != keypoint_count {
                    return Err(Error::ingestion(
                        &s.path,
                        format!("{} keypoints, expected {keypoint_count}", kps.len()),
                    ));
                }
            }
        }
        Ok(Dataset { samples, keypoint_count })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(height, width)` of every image, if any.
    pub fn image_hw(&self) -> Option<(usize, usize)> {
        self.samples.first().map(Sample::hw)
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Identity -> dense class index in sorted identity order.
    pub fn class_map(&self) -> BTreeMap<usize, usize> {
        self.identities().into_iter().enumerate().map(|(c, id)| (id, c)).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut s = DatasetSummary {
            identities: self.identities().len(),
            ..Default::default()
        };
        for x in &self.samples {
            *s.per_modality.entry(x.modality).or_default() += 1;
            *s.per_camera.entry(x.camera).or_default() += 1;
            s.with_keypoints += usize::from(x.keypoints.is_some());
        }
        s
    }

    /// Samples whose identity is in `ids`, in original order.
    pub fn restrict(&self, ids: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| ids.contains(&s.identity)).cloned().collect(),
            keypoint_count: self.keypoint_count,
        }
    }

    /// Indices of samples of one modality.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].modality == modality).collect()
    }
}

/// Per-modality, per-channel mean and standard deviation used to standardize
/// images; computed once from a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [[f32; 3]; 2],
    pub std: [[f32; 3]; 2],
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            mean: [[0.5; 3]; 2],
            std: [[0.25; 3]; 2],
        }
    }
}

impl Standardization {
    pub fn from_dataset(data: &Dataset) -> Self {
        let mut out = Standardization::default();
        for m in Modality::BOTH {
            let mut sum = [0f64; 3];
            let mut sq = [0f64; 3];
            let mut count = 0usize;
            for s in data.samples.iter().filter(|s| s.modality == m) {
                let plane = s.image.len() / 3;
                for c in 0..3 {
                    for &v in &s.image.data()[c * plane..(c + 1) * plane] {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
                count += plane;
            }
            if count == 0 {
                continue;
            }
            for c in 0..3 {
                let mean = sum[c] / count as f64;
                let var = (sq[c] / count as f64 - mean * mean).max(0.0);
                out.mean[m.index()][c] = mean as f32;
                out.std[m.index()][c] = (var.sqrt() as f32).max(1e-3);
            }
        }
        out
    }
}

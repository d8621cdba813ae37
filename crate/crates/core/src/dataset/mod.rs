//! Patient studies, manifests, patient-grouped splits and the phantom generator.

mod manifest;
mod phantom;
mod probe;
mod split;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, write_manifest, ManifestEntry};
pub use phantom::{generate_phantom, generate_phantom_sized, PHANTOM_SIZE};
pub use probe::{intensity_features, IntensityProbe};
pub use split::{split_folds, Fold, SplitPlan};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Ldh,
}

impl Label {
    /// Class index: healthy 0, LDH 1.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Ldh => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Ldh
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Ldh => "ldh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "healthy" => Some(Label::Healthy),
            "ldh" => Some(Label::Ldh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    T1Sag,
    T2Sag,
    T2Ax,
}

impl Modality {
    /// Channel order of the model input.
    pub const ALL: [Modality; 3] = [Modality::T1Sag, Modality::T2Sag, Modality::T2Ax];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1Sag => "t1_sag",
            Modality::T2Sag => "t2_sag",
            Modality::T2Ax => "t2_ax",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

/// One patient's three-modality examination.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStudy {
    pub patient_id: String,
    pub group_marker: String,
    /// Indexed in [`Modality::ALL`] order.
    pub images: [GrayImage; 3],
    pub label: Label,
    pub age: Option<u32>,
}

impl PatientStudy {
    pub fn image(&self, m: Modality) -> &GrayImage {
        &self.images[m as usize]
    }

    /// `(height, width)` shared by all modalities.
    pub fn size(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.images[0].height, self.images[0].width);
        if self.images.iter().any(|i| (i.height, i.width) != (h, w)) {
            return Err(Error::Study {
                patient_id: self.patient_id.clone(),
                reason: "modalities differ in size".into(),
            });
        }
        Ok((h, w))
    }
}

/// Stacks studies into a `[B, 3, H, W]` input tensor.
pub fn stack_batch(studies: &[&PatientStudy]) -> Result<Tensor> {
    let first = studies.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = first.size()?;
    let mut data = Vec::with_capacity(studies.len() * 3 * h * w);
    for s in studies {
        if s.size()? != (h, w) {
            return Err(Error::Study {
                patient_id: s.patient_id.clone(),
                reason: format!("image size differs from the batch ({h}×{w})"),
            });
        }
        for img in &s.images {
            data.extend_from_slice(&img.pixels);
        }
    }
    Tensor::new(vec![studies.len(), 3, h, w], data)
}

/// Class indices of `studies`.
pub fn labels_of(studies: &[&PatientStudy]) -> Vec<usize> {
    studies.iter().map(|s| s.label.index()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_round_trip() {
        for l in [Label::Healthy, Label::Ldh] {
            assert_eq!(Label::parse(l.as_str()), Some(l));
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{}\"", l.as_str()));
        }
        assert_eq!(Label::parse("LDH"), None);
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let s = generate_phantom_sized(4, 0.5, 1, 16).unwrap();
        let refs: Vec<&PatientStudy> = s.iter().collect();
        let t = stack_batch(&refs).unwrap();
        assert_eq!(t.shape(), &[4, 3, 16, 16]);
        assert_eq!(&t.values()[3 * 256 + 256..3 * 256 + 512], &s[1].images[1].pixels[..]);
    }
}

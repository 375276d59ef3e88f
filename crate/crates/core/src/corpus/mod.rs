//! Labeled image corpora: annotation types, the procedural generator and
//! manifest input/output.

mod manifest;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_corpus, manifest_digest, records_digest, write_corpus, MANIFEST_FILE};
pub use render::{
    generate_corpus, render_corpus, ClassPriors, DemographicPriors, GroupShift, ProceduralSpec,
};

/// Visual attributes in their canonical order.
pub const ATTRIBUTES: [&str; 10] = [
    "sign",
    "photo",
    "fire",
    "police",
    "children",
    "group_20",
    "group_100",
    "flag",
    "night",
    "shouting",
];
pub const N_ATTRIBUTES: usize = ATTRIBUTES.len();

pub const AGE_BUCKETS: [&str; 9] = [
    "0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70+",
];
pub const GENDERS: [&str; 2] = ["Male", "Female"];
pub const RACES: [&str; 7] = [
    "White",
    "Black",
    "Latino_Hispanic",
    "East Asian",
    "Southeast Asian",
    "Indian",
    "Middle Eastern",
];

/// Sensitive attribute families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensitive {
    Age,
    Gender,
    Race,
}

impl Sensitive {
    pub const ALL: [Sensitive; 3] = [Sensitive::Age, Sensitive::Gender, Sensitive::Race];

    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Sensitive::Age => &AGE_BUCKETS,
            Sensitive::Gender => &GENDERS,
            Sensitive::Race => &RACES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sensitive::Age => "age",
            Sensitive::Gender => "gender",
            Sensitive::Race => "race",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_bucket: u8,
    pub gender: u8,
    pub race: u8,
}

impl Demographics {
    pub fn get(&self, attr: Sensitive) -> usize {
        match attr {
            Sensitive::Age => self.age_bucket as usize,
            Sensitive::Gender => self.gender as usize,
            Sensitive::Race => self.race as usize,
        }
    }
}

/// Per-image labels. Violence and attributes are only meaningful for protest
/// images; for the rest they are stored as zero and reported as masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationVector {
    pub protest: bool,
    pub violence: f64,
    pub attributes: [bool; N_ATTRIBUTES],
    pub demographics: Option<Demographics>,
}

impl AnnotationVector {
    pub fn negative(demographics: Option<Demographics>) -> Self {
        Self {
            protest: false,
            violence: 0.0,
            attributes: [false; N_ATTRIBUTES],
            demographics,
        }
    }

    pub fn positive(
        violence: f64,
        attributes: [bool; N_ATTRIBUTES],
        demographics: Option<Demographics>,
    ) -> Result<Self> {
        let a = Self {
            protest: true,
            violence,
            attributes,
            demographics,
        };
        a.validate()?;
        Ok(a)
    }

    /// Violence and attribute labels are masked out unless the image is a protest.
    pub fn masked(&self) -> bool {
        !self.protest
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.violence) {
            return Err(Error::Invalid(format!(
                "violence {} outside [0, 1]",
                self.violence
            )));
        }
        if !self.protest && (self.violence != 0.0 || self.attributes.iter().any(|&a| a)) {
            return Err(Error::Invalid(
                "violence and attributes must be 0 when protest = 0".into(),
            ));
        }
        if let Some(d) = self.demographics {
            if d.age_bucket as usize >= AGE_BUCKETS.len()
                || d.gender as usize >= GENDERS.len()
                || d.race as usize >= RACES.len()
            {
                return Err(Error::Invalid(format!(
                    "demographic code out of range: {d:?}"
                )));
            }
        }
        Ok(())
    }

    /// Target vector `[protest, violence, attributes..]` used by every model head.
    pub fn targets(&self) -> [f32; 2 + N_ATTRIBUTES] {
        let mut t = [0.0f32; 2 + N_ATTRIBUTES];
        t[0] = f32::from(u8::from(self.protest));
        t[1] = self.violence as f32;
        for (dst, &a) in t[2..].iter_mut().zip(&self.attributes) {
            *dst = f32::from(u8::from(a));
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Square RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::Invalid(format!(
                "image of side {side} needs {} values, got {}",
                side * side * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { side, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Self {
        Self {
            side,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    /// Rounds to the 8-bit grid so in-memory and on-disk values agree.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: Image,
    pub annotation: AnnotationVector,
    pub split: Split,
}

/// Records of the given split, in corpus order.
pub fn split_of(records: &[ImageRecord], split: Split) -> Vec<&ImageRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_with_labels_is_invalid() {
        let mut a = AnnotationVector::negative(None);
        a.attributes[3] = true;
        assert!(a.validate().is_err());
        assert!(AnnotationVector::positive(1.5, [false; 10], None).is_err());
    }

    #[test]
    fn targets_layout() {
        let mut attrs = [false; 10];
        attrs[9] = true;
        let a = AnnotationVector::positive(0.25, attrs, None).unwrap();
        let t = a.targets();
        assert_eq!(t[0], 1.0);
        assert_eq!(t[1], 0.25);
        assert_eq!(t[11], 1.0);
        assert!(!a.masked());
    }
}

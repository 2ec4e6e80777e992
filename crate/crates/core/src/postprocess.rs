//! Margin rule: a prediction touching the imaging-window boundary means the
//! testis is probably cut off, so the subject gets volume 0 and a flag.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::SegmentationMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMin,
        Face::XMax,
        Face::YMin,
        Face::YMax,
        Face::ZMin,
        Face::ZMax,
    ];

    pub fn axis(self) -> usize {
        self as usize / 2
    }

    pub fn is_max(self) -> bool {
        self as usize % 2 == 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::XMin => "x-min",
            Face::XMax => "x-max",
            Face::YMin => "y-min",
            Face::YMax => "y-max",
            Face::ZMin => "z-min",
            Face::ZMax => "z-max",
        }
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Face {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Face::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown face {s:?}")))
    }
}

impl TryFrom<String> for Face {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Face> for String {
    fn from(f: Face) -> String {
        f.name().to_owned()
    }
}

/// Faces to check; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Face>", into = "Vec<Face>")]
pub struct MarginPolicy {
    faces: BTreeSet<Face>,
}

impl MarginPolicy {
    pub fn new(faces: impl IntoIterator<Item = Face>) -> Result<Self> {
        let faces: BTreeSet<Face> = faces.into_iter().collect();
        if faces.is_empty() {
            return Err(Error::InvalidArgument("margin policy needs at least one face".into()));
        }
        Ok(Self { faces })
    }

    pub fn all() -> Self {
        Self {
            faces: Face::ALL.into_iter().collect(),
        }
    }

    pub fn faces(&self) -> impl Iterator<Item = Face> + '_ {
        self.faces.iter().copied()
    }
}

impl Default for MarginPolicy {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<Face>> for MarginPolicy {
    type Error = Error;
    fn try_from(v: Vec<Face>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MarginPolicy> for Vec<Face> {
    fn from(p: MarginPolicy) -> Vec<Face> {
        p.faces.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedMask {
    pub mask: SegmentationMask,
    pub margin_flagged: bool,
    pub touched_faces: Vec<Face>,
}

/// Policy faces whose boundary plane holds at least one foreground voxel.
pub fn touches_margin(mask: &SegmentationMask, policy: &MarginPolicy) -> Vec<Face> {
    let dims = mask.geometry().dims();
    let mut touched = BTreeSet::new();
    for [x, y, z] in mask.foreground() {
        let c = [x, y, z];
        for face in policy.faces() {
            let a = face.axis();
            let boundary = if face.is_max() { dims[a] - 1 } else { 0 };
            if c[a] == boundary {
                touched.insert(face);
            }
        }
        if touched.len() == policy.faces.len() {
            break;
        }
    }
    touched.into_iter().collect()
}

/// Zeroes and flags masks that touch a checked face; others pass through.
pub fn apply_margin_rule(mask: &SegmentationMask, policy: &MarginPolicy) -> FlaggedMask {
    let touched_faces = touches_margin(mask, policy);
    if touched_faces.is_empty() {
        FlaggedMask {
            mask: mask.clone(),
            margin_flagged: false,
            touched_faces,
        }
    } else {
        FlaggedMask {
            mask: mask.zeroed(),
            margin_flagged: true,
            touched_faces,
        }
    }
}

/// `x-min;z-max` style rendering used in CSV columns.
pub fn format_faces(faces: &[Face]) -> String {
    faces.iter().map(|f| f.name()).collect::<Vec<_>>().join(";")
}

pub fn parse_faces(s: &str) -> Result<Vec<Face>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

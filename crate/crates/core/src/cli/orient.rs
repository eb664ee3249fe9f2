//! Orientation JSON files: `{"h": [..]}` or `{"rotation": [[..], [..], [..]]}`
//! with an optional `"label"`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dipole::{Matrix3, Orientation};
use crate::error::{QsmError, Result};

/// Hand-written directions are renormalized when within this of unit length.
pub const H_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Matrix3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl OrientationFile {
    pub fn from_orientation(o: &Orientation, label: Option<String>) -> Self {
        match o.rotation() {
            Some(r) => OrientationFile {
                h: None,
                rotation: Some(*r),
                label,
            },
            None => OrientationFile {
                h: Some(o.h()),
                rotation: None,
                label,
            },
        }
    }

    pub fn to_orientation(&self) -> Result<Orientation> {
        match (self.h, self.rotation) {
            (Some(h), None) => {
                let norm = h.iter().map(|c| c * c).sum::<f64>().sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > H_NORM_TOL {
                    return Err(QsmError::InvalidOrientation(format!(
                        "\"h\" must be a unit vector, |h| = {norm}"
                    )));
                }
                if (norm - 1.0).abs() <= 1e-12 {
                    Orientation::new(h)
                } else {
                    Orientation::from_direction(h)
                }
            }
            (None, Some(r)) => Orientation::from_rotation(r),
            _ => Err(QsmError::InvalidOrientation(
                "exactly one of \"h\" and \"rotation\" must be given".into(),
            )),
        }
    }
}

pub fn read_orientation(path: &Path) -> Result<Orientation> {
    let file: OrientationFile = super::read_json(path)?;
    file.to_orientation()
}

pub fn write_orientation(o: &Orientation, label: Option<String>, path: &Path) -> Result<()> {
    super::write_json(path, &OrientationFile::from_orientation(o, label))
}

//! Pose solvers from point correspondences.

mod kabsch;
mod pnp;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraPoint, Pixel, ScenePoint};

pub use kabsch::{kabsch, DEGENERACY_RATIO};
pub use pnp::{pnp, reprojection_error_px};

/// A camera-frame point and the scene point it corresponds to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match3D3D {
    pub camera_point: CameraPoint,
    pub scene_point: ScenePoint,
}

/// An image point and the scene point it corresponds to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D3D {
    pub pixel: Pixel,
    pub scene_point: ScenePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Kabsch,
    Pnp,
}

impl SolverKind {
    pub fn min_points(self) -> usize {
        match self {
            SolverKind::Kabsch => 3,
            SolverKind::Pnp => 6,
        }
    }
}

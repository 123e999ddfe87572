//! Synthetic scene generation: a procedural satellite mock-up rendered
//! along deterministic approach trajectories, plus training augmentation,
//! dataset persistence, and ingestion of motion-capture labeled sets.

mod augment;
mod dataset;
mod mocap;
mod model;
mod render;
mod trajectory;

pub use augment::{augment, AugmentConfig};
pub use dataset::{
    generate_dataset, load_dataset, write_dataset, Dataset, DatasetManifest, FrameRecord, Split,
    MANIFEST_VERSION,
};
pub use mocap::{match_mocap, parse_mocap_csv, MocapMatch, MocapRecord, RigidBodySample};
pub use model::{Primitive, SatelliteModel, Triangle};
pub use render::{quantize, render_frame, Frame, AMBIENT};
pub use trajectory::{
    expand_trajectory, rotation_sequence, LateralProfile, RotationPolicy, TrajectorySpec,
    PROJECTILE_BULGE,
};

use crate::error::{Error, Result};
use crate::numerics::Real;

/// RGB raster in row-major (row, column, channel) order with values in
/// [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Real>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(
                "image",
                format!(
                    "{} values do not fill {}x{}x3",
                    data.len(),
                    height,
                    width
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> Real {
        self.data[(row * self.width + col) * 3 + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: Real) {
        self.data[(row * self.width + col) * 3 + channel] = value;
    }

    /// Repack to channel-major (channel, row, column) order for batching
    /// into network input tensors.
    pub fn to_chw(&self) -> Vec<Real> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * 3];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`].
    pub fn from_chw(height: usize, width: usize, chw: &[Real]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != hw * 3 {
            return Err(Error::dim(
                "image data",
                format!("{} values do not fill {}x{}x3", chw.len(), width, height),
            ));
        }
        let mut data = vec![0.0; hw * 3];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = chw[c * hw + i];
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Quantize to 8-bit RGB bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Rebuild from 8-bit RGB bytes.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::dim(
                "image bytes",
                format!(
                    "{} bytes do not fill {}x{}x3",
                    bytes.len(),
                    height,
                    width
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as Real / 255.0).collect(),
        })
    }

    /// True when every value lies in [0, 1] and none is NaN.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

//! Z-buffered rasterizer with flat Lambertian shading.
//!
//! Pixels are quantized to 8 bits at the end of the pass so a rendered
//! image survives a trip through the on-disk raster format bitwise.

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, CameraIntrinsics, PoseLabel, Vec3};
use crate::numerics::Real;
use crate::scenegen::model::SatelliteModel;
use crate::scenegen::Image;

/// Fraction of full illumination every surface receives regardless of the
/// light direction.
pub const AMBIENT: Real = 0.1;

/// Triangles closer than this to the camera plane are dropped.
const NEAR_PLANE: Real = 1e-3;

/// Rendered frame with its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub label: PoseLabel,
    pub frame_index: usize,
    /// Capture time in seconds, when the source provides one.
    pub timestamp: Option<Real>,
}

/// Render the model at the given pose. `light_dir` is the unit direction
/// from a surface toward the light; a face is fully lit when its normal
/// points at the light. The background stays exactly zero.
pub fn render_frame(
    model: &SatelliteModel,
    label: &PoseLabel,
    k: &CameraIntrinsics,
    light_dir: Vec3,
    height: usize,
    width: usize,
) -> Result<Frame> {
    if height == 0 || width == 0 {
        return Err(Error::param(
            "image size",
            format!("{}x{} must be nonzero", width, height),
        ));
    }
    let light_norm =
        (light_dir[0] * light_dir[0] + light_dir[1] * light_dir[1] + light_dir[2] * light_dir[2])
            .sqrt();
    if (light_norm - 1.0).abs() > 1e-6 {
        return Err(Error::param(
            "light_dir",
            format!("{:?} must be a unit vector", light_dir),
        ));
    }
    if label.position[2] <= 0.0 {
        return Err(Error::RenderBehindCamera {
            z: label.position[2] as f64,
        });
    }
    let rot = quat_to_matrix(label.attitude);
    let mut shade_buf = vec![0.0 as Real; height * width];
    let mut inv_depth = vec![0.0 as Real; height * width];

    for tri in model.triangles() {
        let cam: Vec<Vec3> = tri
            .vertices
            .iter()
            .map(|v| {
                let r = mat_vec(&rot, *v);
                [
                    r[0] + label.position[0],
                    r[1] + label.position[1],
                    r[2] + label.position[2],
                ]
            })
            .collect();
        if cam.iter().any(|v| v[2] < NEAR_PLANE) {
            continue;
        }
        let n = mat_vec(&rot, tri.normal);
        let diffuse = (n[0] * light_dir[0] + n[1] * light_dir[1] + n[2] * light_dir[2]).max(0.0);
        let shade = tri.albedo * (AMBIENT + (1.0 - AMBIENT) * diffuse);

        let px: Vec<(Real, Real, Real)> = cam
            .iter()
            .map(|v| {
                (
                    k.fx * v[0] / v[2] + k.cx,
                    k.fy * v[1] / v[2] + k.cy,
                    1.0 / v[2],
                )
            })
            .collect();
        rasterize(&px, shade, height, width, &mut shade_buf, &mut inv_depth);
    }

    let mut image = Image::zeros(height, width);
    for (i, &s) in shade_buf.iter().enumerate() {
        let q = quantize(s);
        let base = i * 3;
        image.data[base] = q;
        image.data[base + 1] = q;
        image.data[base + 2] = q;
    }
    Ok(Frame {
        image,
        label: *label,
        frame_index: 0,
        timestamp: None,
    })
}

/// Snap a shade to the nearest 8-bit level in [0, 1].
pub fn quantize(value: Real) -> Real {
    let clamped = value.clamp(0.0, 1.0);
    ((clamped * 255.0).round() as u8) as Real / 255.0
}

fn mat_vec(m: &[[Real; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rasterize(
    px: &[(Real, Real, Real)],
    shade: Real,
    height: usize,
    width: usize,
    shade_buf: &mut [Real],
    inv_depth: &mut [Real],
) {
    let (x0, y0, w0) = px[0];
    let (x1, y1, w1) = px[1];
    let (x2, y2, w2) = px[2];
    let area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = x0.min(x1).min(x2).floor().max(0.0) as usize;
    let max_x = (x0.max(x1).max(x2).ceil() as isize).min(width as isize - 1);
    let min_y = y0.min(y1).min(y2).floor().max(0.0) as usize;
    let max_y = (y0.max(y1).max(y2).ceil() as isize).min(height as isize - 1);
    if max_x < min_x as isize || max_y < min_y as isize {
        return;
    }
    for row in min_y..=max_y as usize {
        let cy = row as Real + 0.5;
        for col in min_x..=max_x as usize {
            let cx = col as Real + 0.5;
            let l0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) / area;
            let l1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) / area;
            let l2 = 1.0 - l0 - l1;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let iz = l0 * w0 + l1 * w1 + l2 * w2;
            let idx = row * width + col;
            if iz > inv_depth[idx] {
                inv_depth[idx] = iz;
                shade_buf[idx] = shade;
            }
        }
    }
}

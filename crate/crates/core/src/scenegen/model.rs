//! Procedural target model: shaded primitives triangulated for the
//! rasterizer.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::numerics::Real;

/// One flat-shaded triangle in the body frame with an outward unit normal.
#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub normal: Vec3,
    pub albedo: Real,
}

/// Body-frame primitive with a uniform albedo.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// Axis-aligned box given by center and half-extents.
    Box {
        center: Vec3,
        half_extents: Vec3,
        albedo: Real,
    },
    /// Cylinder with its axis along body y, given by center, radius,
    /// half-length, and facet count.
    Cylinder {
        center: Vec3,
        radius: Real,
        half_length: Real,
        segments: usize,
        albedo: Real,
    },
}

/// Target spacecraft as a set of shaded primitives.
#[derive(Clone, Debug)]
pub struct SatelliteModel {
    primitives: Vec<Primitive>,
    triangles: Vec<Triangle>,
    bounding_radius: Real,
}

impl SatelliteModel {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Empty("model primitives"));
        }
        let mut triangles = Vec::new();
        for p in &primitives {
            tessellate(p, &mut triangles)?;
        }
        let bounding_radius = triangles
            .iter()
            .flat_map(|t| t.vertices.iter())
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0_f64 as Real, Real::max);
        if bounding_radius <= 0.0 {
            return Err(Error::param(
                "model",
                "primitives collapse to a point".to_string(),
            ));
        }
        Ok(Self {
            primitives,
            triangles,
            bounding_radius,
        })
    }

    /// Default mock-up: central bus, two solar panels of unequal span, and an
    /// offset antenna drum. The left/right and top/bottom asymmetries make
    /// every attitude produce a distinct silhouette.
    pub fn mock_satellite() -> Self {
        Self::new(vec![
            Primitive::Box {
                center: [0.0, 0.0, 0.0],
                half_extents: [0.5, 0.5, 0.6],
                albedo: 0.7,
            },
            Primitive::Box {
                center: [-1.55, 0.0, 0.0],
                half_extents: [1.0, 0.45, 0.02],
                albedo: 0.35,
            },
            Primitive::Box {
                center: [1.25, 0.0, 0.0],
                half_extents: [0.7, 0.45, 0.02],
                albedo: 0.35,
            },
            Primitive::Cylinder {
                center: [0.0, 0.8, 0.2],
                radius: 0.12,
                half_length: 0.3,
                segments: 12,
                albedo: 0.9,
            },
        ])
        .expect("built-in model is valid")
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    /// Radius of the smallest origin-centered sphere containing the model.
    pub fn bounding_radius(&self) -> Real {
        self.bounding_radius
    }
}

fn tessellate(p: &Primitive, out: &mut Vec<Triangle>) -> Result<()> {
    match *p {
        Primitive::Box {
            center,
            half_extents,
            albedo,
        } => {
            if half_extents.iter().any(|&h| h <= 0.0) {
                return Err(Error::param(
                    "box half_extents",
                    format!("{:?} must be positive", half_extents),
                ));
            }
            check_albedo(albedo)?;
            tessellate_box(center, half_extents, albedo, out);
            Ok(())
        }
        Primitive::Cylinder {
            center,
            radius,
            half_length,
            segments,
            albedo,
        } => {
            if radius <= 0.0 || half_length <= 0.0 {
                return Err(Error::param(
                    "cylinder",
                    format!(
                        "radius {} and half_length {} must be positive",
                        radius, half_length
                    ),
                ));
            }
            if segments < 3 {
                return Err(Error::param(
                    "cylinder segments",
                    format!("{} must be at least 3", segments),
                ));
            }
            check_albedo(albedo)?;
            tessellate_cylinder(center, radius, half_length, segments, albedo, out);
            Ok(())
        }
    }
}

fn check_albedo(albedo: Real) -> Result<()> {
    if !(0.0..=1.0).contains(&albedo) {
        return Err(Error::param(
            "albedo",
            format!("{} must lie in [0, 1]", albedo),
        ));
    }
    Ok(())
}

fn tessellate_box(center: Vec3, half: Vec3, albedo: Real, out: &mut Vec<Triangle>) {
    // One quad per face; +axis then -axis for x, y, z.
    for axis in 0..3 {
        for &sign in &[1.0, -1.0] {
            let mut normal = [0.0; 3];
            normal[axis] = sign;
            let u_axis = (axis + 1) % 3;
            let v_axis = (axis + 2) % 3;
            let corner = |su: Real, sv: Real| -> Vec3 {
                let mut v = center;
                v[axis] += sign * half[axis];
                v[u_axis] += su * half[u_axis];
                v[v_axis] += sv * half[v_axis];
                v
            };
            let (a, b, c, d) = (
                corner(-1.0, -1.0),
                corner(1.0, -1.0),
                corner(1.0, 1.0),
                corner(-1.0, 1.0),
            );
            // Negative faces swap the diagonal so the winding stays outward.
            let (v1, v2) = if sign > 0.0 { ([a, b, c], [a, c, d]) } else { ([a, c, b], [a, d, c]) };
            out.push(Triangle {
                vertices: v1,
                normal,
                albedo,
            });
            out.push(Triangle {
                vertices: v2,
                normal,
                albedo,
            });
        }
    }
}

fn tessellate_cylinder(
    center: Vec3,
    radius: Real,
    half_length: Real,
    segments: usize,
    albedo: Real,
    out: &mut Vec<Triangle>,
) {
    let ring = |i: usize| {
        let theta = 2.0 * std::f64::consts::PI as Real * (i % segments) as Real / segments as Real;
        (theta.cos(), theta.sin())
    };
    for i in 0..segments {
        let (c0, s0) = ring(i);
        let (c1, s1) = ring(i + 1);
        let bottom0 = [
            center[0] + radius * c0,
            center[1] - half_length,
            center[2] + radius * s0,
        ];
        let bottom1 = [
            center[0] + radius * c1,
            center[1] - half_length,
            center[2] + radius * s1,
        ];
        let top0 = [bottom0[0], center[1] + half_length, bottom0[2]];
        let top1 = [bottom1[0], center[1] + half_length, bottom1[2]];
        // Flat facet normal: radial direction at the segment midpoint.
        let (cm, sm) = {
            let m = ((c0 + c1) * 0.5, (s0 + s1) * 0.5);
            let n = (m.0 * m.0 + m.1 * m.1).sqrt();
            (m.0 / n, m.1 / n)
        };
        let side_normal = [cm, 0.0, sm];
        out.push(Triangle {
            vertices: [bottom0, top1, bottom1],
            normal: side_normal,
            albedo,
        });
        out.push(Triangle {
            vertices: [bottom0, top0, top1],
            normal: side_normal,
            albedo,
        });
        let top_center = [center[0], center[1] + half_length, center[2]];
        let bottom_center = [center[0], center[1] - half_length, center[2]];
        out.push(Triangle {
            vertices: [top_center, top1, top0],
            normal: [0.0, 1.0, 0.0],
            albedo,
        });
        out.push(Triangle {
            vertices: [bottom_center, bottom0, bottom1],
            normal: [0.0, -1.0, 0.0],
            albedo,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_satellite_has_positive_bounding_radius() {
        let m = SatelliteModel::mock_satellite();
        assert!(m.bounding_radius() > 1.0);
        assert!(m.bounding_radius() < 5.0);
        assert!(!m.triangles().is_empty());
        assert_eq!(m.primitives().len(), 4);
    }

    #[test]
    fn triangle_normals_are_unit_and_outward() {
        let m = SatelliteModel::mock_satellite();
        for t in m.triangles() {
            let n = t.normal;
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            // The normal must agree with the winding order's geometric normal.
            let [a, b, c] = t.vertices;
            let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let cross = [
                ab[1] * ac[2] - ab[2] * ac[1],
                ab[2] * ac[0] - ab[0] * ac[2],
                ab[0] * ac[1] - ab[1] * ac[0],
            ];
            let dot = cross[0] * n[0] + cross[1] * n[1] + cross[2] * n[2];
            assert!(dot > 0.0, "winding disagrees with stored normal");
        }
    }

    #[test]
    fn empty_model_is_rejected() {
        assert!(SatelliteModel::new(vec![]).is_err());
    }

    #[test]
    fn invalid_primitives_are_rejected() {
        assert!(SatelliteModel::new(vec![Primitive::Box {
            center: [0.0; 3],
            half_extents: [1.0, -1.0, 1.0],
            albedo: 0.5,
        }])
        .is_err());
        assert!(SatelliteModel::new(vec![Primitive::Cylinder {
            center: [0.0; 3],
            radius: 0.1,
            half_length: 0.1,
            segments: 2,
            albedo: 0.5,
        }])
        .is_err());
        assert!(SatelliteModel::new(vec![Primitive::Box {
            center: [0.0; 3],
            half_extents: [1.0, 1.0, 1.0],
            albedo: 1.5,
        }])
        .is_err());
    }
}

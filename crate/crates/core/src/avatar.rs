//! Gaussian splats bound to mesh triangles in triangle-local coordinates.
//!
//! Each splat stores its position, orientation and log-scales in the tangent
//! frame of a parent triangle (origin at the centroid, x along the first
//! edge, z along the normal, unit = sqrt(triangle area)). Binding to a
//! deformed mesh maps splats to world means and covariances, so mesh motion
//! drives appearance. [`bind_backward`] is the analytic adjoint of that map:
//! it pulls gradients on world means/covariances back to the parent-triangle
//! vertices.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrays::ArrayContainer;
use crate::error::{Error, Result};
use crate::face::{FaceTopology, Mesh, Region};

/// Treat triangles under this area as degenerate (m²).
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvatarSpec {
    pub splats_per_face: usize,
    pub seed: u64,
    /// Base splat radius in units of sqrt(triangle area).
    pub splat_scale: f64,
}

impl Default for AvatarSpec {
    fn default() -> Self {
        Self {
            splats_per_face: 1,
            seed: 11,
            splat_scale: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub parent_face: usize,
    /// Offset in the triangle tangent frame, in units of sqrt(area).
    pub local_position: Vector3<f64>,
    pub local_rotation: UnitQuaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat {
    /// Local covariance shape R diag(exp(2·log_scale)) Rᵀ, before triangle
    /// scaling.
    pub fn local_shape(&self) -> Matrix3<f64> {
        let r = self.local_rotation.to_rotation_matrix();
        let d = Matrix3::from_diagonal(&Vector3::new(
            (2.0 * self.log_scale.x).exp(),
            (2.0 * self.log_scale.y).exp(),
            (2.0 * self.log_scale.z).exp(),
        ));
        r * d * r.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    pub splats: Vec<Splat>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn validate(&self, topology: &FaceTopology) -> Result<()> {
        for (i, s) in self.splats.iter().enumerate() {
            if s.parent_face >= topology.faces.len() {
                return Err(Error::data(format!(
                    "splat {i} bound to missing face {}",
                    s.parent_face
                )));
            }
            if !(0.0..=1.0).contains(&s.opacity) {
                return Err(Error::data(format!("splat {i} opacity outside [0,1]")));
            }
            if (s.local_rotation.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!("splat {i} rotation not unit")));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> ArrayContainer {
        let n = self.splats.len();
        let mut c = ArrayContainer::new();
        let mut faces = ndarray::Array1::<i64>::zeros(n);
        let mut pos = Array2::<f64>::zeros((n, 3));
        let mut rot = Array2::<f64>::zeros((n, 4));
        let mut scale = Array2::<f64>::zeros((n, 3));
        let mut opacity = ndarray::Array1::<f64>::zeros(n);
        let mut color = Array2::<f64>::zeros((n, 3));
        for (i, s) in self.splats.iter().enumerate() {
            faces[i] = s.parent_face as i64;
            for k in 0..3 {
                pos[[i, k]] = s.local_position[k];
                scale[[i, k]] = s.log_scale[k];
                color[[i, k]] = s.color[k];
            }
            let q = s.local_rotation.quaternion();
            rot[[i, 0]] = q.w;
            rot[[i, 1]] = q.i;
            rot[[i, 2]] = q.j;
            rot[[i, 3]] = q.k;
            opacity[i] = s.opacity;
        }
        c.insert_i64("parent_face", faces);
        c.insert_f64("local_position", pos);
        c.insert_f64("local_rotation", rot);
        c.insert_f64("log_scale", scale);
        c.insert_f64("opacity", opacity);
        c.insert_f64("color", color);
        c
    }

    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        let faces = c.i64_entry("parent_face")?;
        let n = faces.len();
        let pos = crate::face::to_2d(c.f64_entry("local_position")?)?;
        let rot = crate::face::to_2d(c.f64_entry("local_rotation")?)?;
        let scale = crate::face::to_2d(c.f64_entry("log_scale")?)?;
        let opacity = c.f64_entry("opacity")?;
        let color = crate::face::to_2d(c.f64_entry("color")?)?;
        let mut splats = Vec::with_capacity(n);
        for i in 0..n {
            splats.push(Splat {
                parent_face: faces[[i]] as usize,
                local_position: Vector3::new(pos[[i, 0]], pos[[i, 1]], pos[[i, 2]]),
                // stored unit quaternions reload bit-exactly
                local_rotation: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
                    rot[[i, 0]],
                    rot[[i, 1]],
                    rot[[i, 2]],
                    rot[[i, 3]],
                )),
                log_scale: Vector3::new(scale[[i, 0]], scale[[i, 1]], scale[[i, 2]]),
                opacity: opacity[[i]],
                color: [color[[i, 0]], color[[i, 1]], color[[i, 2]]],
            });
        }
        Ok(Self { splats })
    }
}

/// One splat mapped to world space.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGaussian {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorldGaussians {
    pub splats: Vec<WorldGaussian>,
}

/// Procedural palette keyed by the parent face's region.
pub fn palette_base(region: Region) -> [f64; 3] {
    match region {
        Region::Skin => [0.80, 0.62, 0.52],
        Region::Lip => [0.72, 0.30, 0.30],
        Region::Teeth => [0.92, 0.90, 0.86],
        Region::Eye => [0.25, 0.20, 0.18],
    }
}

/// Classify a color back to the nearest palette base. Palette bases are far
/// enough apart that sampled jitter never crosses classes.
pub fn nearest_palette_region(color: &[f64; 3]) -> Region {
    let mut best = Region::Skin;
    let mut best_d = f64::INFINITY;
    for r in Region::ALL {
        let b = palette_base(r);
        let d: f64 = (0..3).map(|k| (color[k] - b[k]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

/// Build a deterministic synthetic avatar: `splats_per_face` splats on every
/// face, colored by the face's region palette.
pub fn build_avatar(topology: &FaceTopology, spec: &AvatarSpec) -> Result<GaussianCloud> {
    if spec.splats_per_face == 0 {
        return Err(Error::config("splats_per_face must be at least 1"));
    }
    if spec.splat_scale <= 0.0 {
        return Err(Error::config("splat_scale must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut splats = Vec::with_capacity(topology.faces.len() * spec.splats_per_face);
    for face in 0..topology.faces.len() {
        let region = topology.face_region(face);
        let base = palette_base(region);
        for _ in 0..spec.splats_per_face {
            let local_position = Vector3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(0.02..0.10),
            );
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let angle = rng.random_range(0.0..0.5);
            let local_rotation = if axis.norm() > 1e-9 {
                UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            } else {
                UnitQuaternion::identity()
            };
            let s = spec.splat_scale;
            let log_scale = Vector3::new(
                (s * rng.random_range(0.8..1.3)).ln(),
                (s * rng.random_range(0.8..1.3)).ln(),
                (s * 0.35 * rng.random_range(0.8..1.2)).ln(),
            );
            let opacity = rng.random_range(0.65..0.95);
            let mut color = [0.0; 3];
            for k in 0..3 {
                color[k] = (base[k] + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
            }
            splats.push(Splat {
                parent_face: face,
                local_position,
                local_rotation,
                log_scale,
                opacity,
                color,
            });
        }
    }
    Ok(GaussianCloud { splats })
}

/// Tangent frame of a triangle: centroid origin, x along the first edge,
/// z along the normal, scale sqrt(area).
#[derive(Debug, Clone)]
pub struct TriFrame {
    pub origin: Vector3<f64>,
    /// Columns are the frame axes (x̂, ŷ, ẑ).
    pub rot: Matrix3<f64>,
    pub scale: f64,
    e1: Vector3<f64>,
    u: Vector3<f64>,
    n: Vector3<f64>,
}

pub fn tri_frame(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
    face: usize,
) -> Result<TriFrame> {
    let e1 = b - a;
    let u = c - a;
    let n = e1.cross(&u);
    let area = 0.5 * n.norm();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::numerical(format!(
            "degenerate triangle at face {face} (area {area:.3e} m²)"
        )));
    }
    let xh = e1.normalize();
    let zh = n.normalize();
    let yh = zh.cross(&xh);
    Ok(TriFrame {
        origin: (a + b + c) / 3.0,
        rot: Matrix3::from_columns(&[xh, yh, zh]),
        scale: area.sqrt(),
        e1,
        u,
        n,
    })
}

/// Map every splat to world space through its parent triangle frame.
pub fn bind_to_mesh(
    cloud: &GaussianCloud,
    mesh: &Mesh,
    topology: &FaceTopology,
) -> Result<WorldGaussians> {
    cloud.validate(topology)?;
    if mesh.vertices.shape()[0] != topology.vertex_count {
        return Err(Error::data("mesh vertex count does not match topology"));
    }
    let frames = face_frames(cloud, mesh, topology)?;
    let mut out = Vec::with_capacity(cloud.len());
    for s in &cloud.splats {
        let f = frames[s.parent_face]
            .as_ref()
            .expect("frame built for bound face");
        let mean = f.origin + f.rot * s.local_position * f.scale;
        let shape = s.local_shape();
        let covariance = f.rot * shape * f.rot.transpose() * (f.scale * f.scale);
        out.push(WorldGaussian {
            mean,
            covariance,
            opacity: s.opacity,
            color: s.color,
        });
    }
    Ok(WorldGaussians { splats: out })
}

/// Pull world-space gradients back to mesh vertices.
///
/// `g_means[i]` is dL/d(mean of splat i), `g_covs[i]` dL/d(covariance of
/// splat i); results accumulate into `grad_vertices` (V×3).
pub fn bind_backward(
    cloud: &GaussianCloud,
    mesh: &Mesh,
    topology: &FaceTopology,
    g_means: &[Vector3<f64>],
    g_covs: &[Matrix3<f64>],
    grad_vertices: &mut Array2<f64>,
) -> Result<()> {
    assert_eq!(g_means.len(), cloud.len());
    assert_eq!(g_covs.len(), cloud.len());
    let frames = face_frames(cloud, mesh, topology)?;
    for (i, s) in cloud.splats.iter().enumerate() {
        let f = frames[s.parent_face].as_ref().unwrap();
        let g_mean = g_means[i];
        let g_cov = g_covs[i];
        if g_mean == Vector3::zeros() && g_cov == Matrix3::zeros() {
            continue;
        }

        let shape = s.local_shape();
        let b_mat = f.rot * shape * f.rot.transpose();

        // mean = o + s·R·p
        let w = f.rot * s.local_position;
        let g_o = g_mean;
        let g_s = g_mean.dot(&w);
        let mut g_rot = (g_mean * s.local_position.transpose()) * f.scale;

        // cov = s²·B with B = R·A·Rᵀ
        let g_s2 = (g_cov.component_mul(&b_mat)).sum();
        let g_b = g_cov * (f.scale * f.scale);
        g_rot += (g_b + g_b.transpose()) * f.rot * shape;

        let xh = f.rot.column(0).into_owned();
        let zh = f.rot.column(2).into_owned();
        let mut g_x = g_rot.column(0).into_owned();
        let g_y = g_rot.column(1).into_owned();
        let mut g_z = g_rot.column(2).into_owned();

        // ŷ = ẑ × x̂
        g_z += xh.cross(&g_y);
        g_x += g_y.cross(&zh);

        // x̂ = e1/‖e1‖, ẑ = n/‖n‖
        let e1n = f.e1.norm();
        let nn = f.n.norm();
        let mut g_e1 = (g_x - xh * xh.dot(&g_x)) / e1n;
        let mut g_n = (g_z - zh * zh.dot(&g_z)) / nn;

        // s = sqrt(‖n‖/2) feeds the mean path; s² = ‖n‖/2 the covariance path
        g_n += zh * (g_s / (4.0 * f.scale));
        g_n += zh * (g_s2 / 2.0);

        // n = e1 × u
        g_e1 += f.u.cross(&g_n);
        let g_u = g_n.cross(&f.e1);

        // o = (a+b+c)/3, e1 = b−a, u = c−a
        let [ia, ib, ic] = topology.faces[s.parent_face];
        let g_a = g_o / 3.0 - g_e1 - g_u;
        let g_b2 = g_o / 3.0 + g_e1;
        let g_c = g_o / 3.0 + g_u;
        for k in 0..3 {
            grad_vertices[[ia, k]] += g_a[k];
            grad_vertices[[ib, k]] += g_b2[k];
            grad_vertices[[ic, k]] += g_c[k];
        }
    }
    Ok(())
}

/// Frames for faces actually referenced by the cloud (None elsewhere).
fn face_frames(
    cloud: &GaussianCloud,
    mesh: &Mesh,
    topology: &FaceTopology,
) -> Result<Vec<Option<TriFrame>>> {
    let mut used = vec![false; topology.faces.len()];
    for s in &cloud.splats {
        used[s.parent_face] = true;
    }
    let mut frames = Vec::with_capacity(topology.faces.len());
    for (fi, face) in topology.faces.iter().enumerate() {
        if !used[fi] {
            frames.push(None);
            continue;
        }
        let v = |i: usize| {
            Vector3::new(
                mesh.vertices[[i, 0]],
                mesh.vertices[[i, 1]],
                mesh.vertices[[i, 2]],
            )
        };
        frames.push(Some(tri_frame(&v(face[0]), &v(face[1]), &v(face[2]), fi)?));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{build_model, ModelSpec};
    use crate::fd;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn model() -> crate::face::FaceModel {
        build_model(&ModelSpec::default()).unwrap()
    }

    #[test]
    fn one_splat_per_face_matches_face_count() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        assert_eq!(cloud.len(), m.topology.faces.len());
    }

    #[test]
    fn same_seed_same_cloud() {
        let m = model();
        let a = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let b = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_splats_rejected() {
        let m = model();
        let spec = AvatarSpec {
            splats_per_face: 0,
            ..Default::default()
        };
        assert!(build_avatar(&m.topology, &spec).is_err());
    }

    #[test]
    fn palette_matches_region_lookup() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        for s in &cloud.splats {
            let expect = m.topology.face_region(s.parent_face);
            assert_eq!(nearest_palette_region(&s.color), expect);
        }
        assert!(cloud
            .splats
            .iter()
            .any(|s| m.topology.face_region(s.parent_face) == Region::Lip));
    }

    #[test]
    fn zero_local_position_lands_on_centroid() {
        let m = model();
        let mut cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        cloud.splats[5].local_position = Vector3::zeros();
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let world = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap();
        let [a, b, c] = m.topology.faces[cloud.splats[5].parent_face];
        let centroid = Vector3::new(
            (m.template[[a, 0]] + m.template[[b, 0]] + m.template[[c, 0]]) / 3.0,
            (m.template[[a, 1]] + m.template[[b, 1]] + m.template[[c, 1]]) / 3.0,
            (m.template[[a, 2]] + m.template[[b, 2]] + m.template[[c, 2]]) / 3.0,
        );
        assert_relative_eq!(world.splats[5].mean, centroid, epsilon = 1e-12);
    }

    #[test]
    fn rigid_translation_equivariance() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let t = Vector3::new(0.3, -0.1, 0.25);
        let mut moved = mesh.clone();
        for i in 0..moved.vertices.shape()[0] {
            for k in 0..3 {
                moved.vertices[[i, k]] += t[k];
            }
        }
        let w0 = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap();
        let w1 = bind_to_mesh(&cloud, &moved, &m.topology).unwrap();
        for (g0, g1) in w0.splats.iter().zip(&w1.splats) {
            assert_relative_eq!(g1.mean, g0.mean + t, epsilon = 1e-9);
            assert_relative_eq!(g1.covariance, g0.covariance, epsilon = 1e-12);
        }
    }

    #[test]
    fn rigid_rotation_equivariance() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.5, 0.9);
        let mut moved = mesh.clone();
        for i in 0..moved.vertices.shape()[0] {
            let p = Vector3::new(
                mesh.vertices[[i, 0]],
                mesh.vertices[[i, 1]],
                mesh.vertices[[i, 2]],
            );
            let q = rot * p;
            for k in 0..3 {
                moved.vertices[[i, k]] = q[k];
            }
        }
        let w0 = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap();
        let w1 = bind_to_mesh(&cloud, &moved, &m.topology).unwrap();
        let rm = rot.matrix();
        for (g0, g1) in w0.splats.iter().zip(&w1.splats) {
            let mean_rel = (g1.mean - rot * g0.mean).norm() / g0.mean.norm().max(1e-12);
            assert!(mean_rel < 1e-6);
            let cov_expect = rm * g0.covariance * rm.transpose();
            let cov_rel = (g1.covariance - cov_expect).norm() / g0.covariance.norm();
            assert!(cov_rel < 1e-6);
        }
    }

    #[test]
    fn uniform_scale_scales_means_and_cov_eigenvalues() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let s = 1.7;
        let scaled = Mesh {
            vertices: &mesh.vertices * s,
        };
        let w0 = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap();
        let w1 = bind_to_mesh(&cloud, &scaled, &m.topology).unwrap();
        for (g0, g1) in w0.splats.iter().zip(&w1.splats).take(64) {
            assert_relative_eq!(g1.mean, g0.mean * s, epsilon = 1e-9);
            let mut e0: Vec<f64> = g0
                .covariance
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            let mut e1: Vec<f64> = g1
                .covariance
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            e0.sort_by(f64::total_cmp);
            e1.sort_by(f64::total_cmp);
            for (a, b) in e0.iter().zip(&e1) {
                assert_relative_eq!(*b, a * s * s, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn covariances_are_spd() {
        let m = model();
        let cloud = build_avatar(
            &m.topology,
            &AvatarSpec {
                seed: 99,
                ..Default::default()
            },
        )
        .unwrap();
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let world = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap();
        for g in &world.splats {
            let eig = g.covariance.symmetric_eigen();
            for &e in eig.eigenvalues.iter() {
                assert!(e > 0.0, "non-positive covariance eigenvalue {e}");
            }
        }
    }

    #[test]
    fn degenerate_triangle_names_face() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let mut mesh = Mesh {
            vertices: m.template.clone(),
        };
        let face = cloud.splats[0].parent_face;
        let [a, b, c] = m.topology.faces[face];
        for k in 0..3 {
            let v = mesh.vertices[[a, k]];
            mesh.vertices[[b, k]] = v;
            mesh.vertices[[c, k]] = v;
        }
        let err = bind_to_mesh(&cloud, &mesh, &m.topology).unwrap_err();
        assert!(err.to_string().contains(&format!("face {face}")), "{err}");
    }

    /// Backward pass vs central finite differences through a random linear
    /// functional of means and covariances.
    #[test]
    fn bind_backward_matches_finite_differences() {
        let m = model();
        let mut cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        cloud.splats.truncate(12);
        let mesh = Mesh {
            vertices: m.template.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g_means: Vec<Vector3<f64>> = (0..cloud.len())
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let g_covs: Vec<Matrix3<f64>> = (0..cloud.len())
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                // symmetric upstream gradient, as the rasterizer produces
                (a + a.transpose()) * 0.5
            })
            .collect();

        let loss = |verts: &Array2<f64>| -> f64 {
            let w = bind_to_mesh(
                &cloud,
                &Mesh {
                    vertices: verts.clone(),
                },
                &m.topology,
            )
            .unwrap();
            let mut l = 0.0;
            for (i, g) in w.splats.iter().enumerate() {
                l += g_means[i].dot(&g.mean);
                l += g_covs[i].component_mul(&g.covariance).sum();
            }
            l
        };

        let mut grad = Array2::zeros(mesh.vertices.raw_dim());
        bind_backward(&cloud, &mesh, &m.topology, &g_means, &g_covs, &mut grad).unwrap();

        let mut touched: Vec<usize> = cloud
            .splats
            .iter()
            .flat_map(|s| m.topology.faces[s.parent_face])
            .collect();
        touched.sort_unstable();
        touched.dedup();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut verts = mesh.vertices.clone();
        for &vi in &touched {
            for k in 0..3 {
                analytic.push(grad[[vi, k]]);
                let orig = verts[[vi, k]];
                let eps = 1e-6;
                verts[[vi, k]] = orig + eps;
                let hi = loss(&verts);
                verts[[vi, k]] = orig - eps;
                let lo = loss(&verts);
                verts[[vi, k]] = orig;
                numeric.push((hi - lo) / (2.0 * eps));
            }
        }
        let err = fd::max_rel_error(&analytic, &numeric, 1e-7);
        assert!(err < 1e-4, "bind backward rel err {err}");
    }

    #[test]
    fn container_round_trip() {
        let m = model();
        let cloud = build_avatar(&m.topology, &AvatarSpec::default()).unwrap();
        let c = cloud.to_container();
        let cloud2 = GaussianCloud::from_container(&c).unwrap();
        assert_eq!(cloud, cloud2);
    }
}

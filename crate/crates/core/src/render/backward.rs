//! Analytic adjoint of the splat rasterizer.
//!
//! The backward pass replays the forward compositing per pixel (identical
//! traversal, cutoff, and saturation logic), accumulates gradients on each
//! splat's 2D mean and conic, then pulls them back through the perspective
//! projection and the triangle binding to mesh vertices. Opacity and color
//! gradients fall out of the same replay. The alpha channel is treated as
//! non-differentiable output; only `pixels` gradients are consumed.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};

use crate::avatar::{bind_backward, bind_to_mesh, GaussianCloud, WorldGaussians};
use crate::error::Result;
use crate::face::{FaceTopology, Mesh};
use crate::par;

use super::{prepare_scene, proj_jacobian, splat_alpha, Camera, Scene, ALPHA_MAX, SATURATION, TILE};

/// Gradients of a scalar loss with respect to renderer inputs.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    /// dL/d(mesh vertices), V×3.
    pub vertices: Array2<f64>,
    /// dL/d(splat opacity), cloud order.
    pub opacity: Vec<f64>,
    /// dL/d(splat color), cloud order.
    pub color: Vec<[f64; 3]>,
}

/// Gradients with respect to world-space Gaussians.
#[derive(Debug, Clone)]
pub struct WorldGrads {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Per-visible-splat accumulators from the pixel replay.
#[derive(Clone)]
struct SplatAccum {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

impl SplatAccum {
    fn zero() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: 0.0,
            color: [0.0; 3],
        }
    }
}

/// Backward through projection + compositing, to world-space Gaussians.
pub fn render_backward_world(
    world: &WorldGaussians,
    camera: &Camera,
    d_pixels: &Array3<f64>,
) -> Result<WorldGrads> {
    let scene = prepare_scene(world, camera)?;
    let (w, h) = (camera.width, camera.height);
    assert_eq!(d_pixels.shape(), [h, w, 3]);

    // Pixel replay in row chunks; chunk partials summed in fixed order.
    let n_vis = scene.splats.len();
    let chunks = h.div_ceil(TILE);
    let partials = par::map_indexed(chunks, |chunk| {
        let mut acc = vec![SplatAccum::zero(); n_vis];
        let row0 = chunk * TILE;
        let row1 = (row0 + TILE).min(h);
        let mut contribs: Vec<(usize, f64, f64, Vector2<f64>, f64)> = Vec::with_capacity(64);
        for row in row0..row1 {
            let ty = row / TILE;
            for col in 0..w {
                let gp = [
                    d_pixels[[row, col, 0]],
                    d_pixels[[row, col, 1]],
                    d_pixels[[row, col, 2]],
                ];
                if gp == [0.0, 0.0, 0.0] {
                    continue;
                }
                let tile = &scene.tiles[ty * scene.tiles_x + col / TILE];
                let u = col as f64 + 0.5;
                let v = row as f64 + 0.5;
                contribs.clear();
                let mut transmittance = 1.0f64;
                let mut alpha_sum = 0.0f64;
                for &si in tile {
                    let s = &scene.splats[si as usize];
                    let Some((alpha, g, d)) = splat_alpha(s, u, v) else {
                        continue;
                    };
                    contribs.push((si as usize, alpha, g, d, transmittance));
                    alpha_sum += transmittance * alpha;
                    transmittance *= 1.0 - alpha;
                    if alpha_sum > SATURATION {
                        break;
                    }
                }
                // suffix color sums S_i = Σ_{j>i} T_j α_j c_j
                let mut suffix = [0.0f64; 3];
                for &(si, alpha, g_raw, d, t_i) in contribs.iter().rev() {
                    let s = &scene.splats[si];
                    let a = &mut acc[si];
                    let weight = t_i * alpha;
                    for c in 0..3 {
                        a.color[c] += weight * gp[c];
                    }
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        d_alpha += gp[c] * (t_i * s.color[c] - suffix[c] / (1.0 - alpha));
                    }
                    let g = (g_raw - super::CUTOFF_LEVEL) / super::CUTOFF_NORM;
                    // zero slope through the alpha ceiling
                    let clamped = s.opacity * g > ALPHA_MAX;
                    if !clamped {
                        a.opacity += g * d_alpha;
                        let d_g_raw = s.opacity * d_alpha / super::CUTOFF_NORM;
                        let d_q = -0.5 * g_raw * d_g_raw;
                        let cd = s.conic * d;
                        a.mean2d += cd * (-2.0 * d_q);
                        a.conic += d * d.transpose() * d_q;
                    }
                    for c in 0..3 {
                        suffix[c] += weight * s.color[c];
                    }
                }
            }
        }
        acc
    });

    let mut acc = vec![SplatAccum::zero(); n_vis];
    for part in partials {
        for (a, p) in acc.iter_mut().zip(part) {
            a.mean2d += p.mean2d;
            a.conic += p.conic;
            a.opacity += p.opacity;
            for c in 0..3 {
                a.color[c] += p.color[c];
            }
        }
    }

    // Projection backward per visible splat.
    let n = world.splats.len();
    let mut grads = WorldGrads {
        means: vec![Vector3::zeros(); n],
        covariances: vec![Matrix3::zeros(); n],
        opacity: vec![0.0; n],
        color: vec![[0.0; 3]; n],
    };
    project_backward(&scene, world, camera, &acc, &mut grads);
    Ok(grads)
}

fn project_backward(
    scene: &Scene,
    world: &WorldGaussians,
    camera: &Camera,
    acc: &[SplatAccum],
    grads: &mut WorldGrads,
) {
    let f = camera.focal;
    for (vi, s) in scene.splats.iter().enumerate() {
        let a = &acc[vi];
        let slot = s.slot;
        grads.opacity[slot] += a.opacity;
        for c in 0..3 {
            grads.color[slot][c] += a.color[c];
        }
        if a.mean2d == Vector2::zeros() && a.conic == Matrix2::zeros() {
            continue;
        }
        let g = &world.splats[slot];
        let cam = camera.to_camera(&g.mean);
        let (x, y, z) = (cam.x, cam.y, cam.z);
        let j = proj_jacobian(f, x, y, z);
        let cov_cam = camera.rotation * g.covariance * camera.rotation.transpose();
        let cov2d = j * cov_cam * j.transpose();
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        let conic =
            Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

        // conic = Σ2d⁻¹  ⇒  dL/dΣ2d = −C·G_C·C
        let g_cov2d = -(conic * a.conic * conic);
        // Σ2d = J Σcam Jᵀ
        let g_cov_cam = j.transpose() * g_cov2d * j;
        let g_j = (g_cov2d + g_cov2d.transpose()) * j * cov_cam;
        // μ2d = π(x_cam), dπ/dx_cam = J
        let mut g_xcam = j.transpose() * a.mean2d;
        // J's own dependence on x_cam
        let z2 = z * z;
        let z3 = z2 * z;
        g_xcam.x += g_j[(0, 2)] * (-f / z2);
        g_xcam.y += g_j[(1, 2)] * (-f / z2);
        g_xcam.z += g_j[(0, 0)] * (-f / z2)
            + g_j[(1, 1)] * (-f / z2)
            + g_j[(0, 2)] * (2.0 * f * x / z3)
            + g_j[(1, 2)] * (2.0 * f * y / z3);

        grads.means[slot] += camera.rotation.transpose() * g_xcam;
        grads.covariances[slot] +=
            camera.rotation.transpose() * g_cov_cam * camera.rotation;
    }
}

/// Full backward: pixels → world Gaussians → mesh vertices (plus opacity and
/// color gradients in cloud order).
pub fn render_backward(
    mesh: &Mesh,
    cloud: &GaussianCloud,
    topology: &FaceTopology,
    camera: &Camera,
    d_pixels: &Array3<f64>,
) -> Result<RenderGrads> {
    mesh.validate_finite()?;
    let world = bind_to_mesh(cloud, mesh, topology)?;
    let wg = render_backward_world(&world, camera, d_pixels)?;
    let mut vertices = Array2::zeros((mesh.vertices.shape()[0], 3));
    bind_backward(cloud, mesh, topology, &wg.means, &wg.covariances, &mut vertices)?;
    Ok(RenderGrads {
        vertices,
        opacity: wg.opacity,
        color: wg.color,
    })
}

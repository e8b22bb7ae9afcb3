//! Differentiable software rasterizer for mesh-bound Gaussian splats.
//!
//! World Gaussians are perspective-projected to 2D (first-order covariance
//! projection), depth-sorted globally, and alpha-composited front-to-back per
//! pixel with a saturation cutoff. The footprint is truncated at 3σ and the
//! background is black. [`backward`] holds the analytic adjoint used for
//! training; it matches central finite differences to the tolerances pinned
//! in the acceptance suite.
//!
//! The lip-region pathway lives here too: a virtual camera framing the lip
//! vertices ([`lip_camera`]) and the Rec.601 grayscale conversion
//! ([`lip_crop_grayscale`]) that feeds the visual-speech extractor.

pub mod backward;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::avatar::{bind_to_mesh, GaussianCloud, WorldGaussians};
use crate::error::{Error, Result};
use crate::face::{FaceTopology, Mesh, Region};
use crate::par;

pub use backward::{render_backward, render_backward_world, RenderGrads};

/// Lip crops are rendered at this resolution.
pub const LIP_RESOLUTION: usize = 96;
/// The lip bounding sphere spans this fraction of the frame.
pub const LIP_FILL: f64 = 0.7;
/// Field of view of the lip camera.
pub const LIP_FOV_DEG: f64 = 30.0;

/// Splats closer than this to the camera plane are culled.
const Z_NEAR: f64 = 1e-6;
/// Per-splat alpha ceiling (keeps transmittance strictly positive).
const ALPHA_MAX: f64 = 0.999;
/// Front-to-back compositing stops once accumulated alpha exceeds this.
const SATURATION: f64 = 0.999;
/// Footprint truncation: contributions beyond 3σ (q > 9) are zero.
const Q_CUTOFF: f64 = 9.0;
/// exp(−Q_CUTOFF/2): the raw Gaussian level at the truncation boundary. The
/// falloff is shifted and rescaled to hit exactly zero there, keeping the
/// footprint continuous (finite differences would otherwise see a jump at
/// the 3σ boundary) while preserving a peak value of 1.
pub(crate) const CUTOFF_LEVEL: f64 = 0.011108996538242306;
pub(crate) const CUTOFF_NORM: f64 = 1.0 - CUTOFF_LEVEL;
/// Rasterizer tile edge in pixels.
const TILE: usize = 16;

/// Pinhole camera. World→camera: `x_cam = R·x_world + t`; projection:
/// `u = f·x/z + cx`, `v = f·y/z + cy`; pixel (row, col) covers
/// `u ∈ [col, col+1)`, `v ∈ [row, row+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::config("camera focal must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("camera resolution must be at least 8×8"));
        }
        if !self.rotation.iter().all(|v| v.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::numerical("camera extrinsics are not finite"));
        }
        Ok(())
    }

    /// Camera at `eye` looking toward `target`, image upright w.r.t. `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let zc = (target - eye).normalize();
        let mut xc = zc.cross(&up);
        if xc.norm() < 1e-9 {
            xc = zc.cross(&Vector3::z());
        }
        let xc = xc.normalize();
        let yc = zc.cross(&xc);
        let rotation = Matrix3::from_rows(&[xc.transpose(), yc.transpose(), zc.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Project a world point to pixel coordinates (u, v, z_cam).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        (
            self.focal * c.x / c.z + self.cx,
            self.focal * c.y / c.z + self.cy,
            c.z,
        )
    }
}

/// RGB render with per-pixel accumulated alpha, all in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    /// H×W×3.
    pub pixels: Array3<f64>,
    /// H×W.
    pub alpha: Array2<f64>,
}

impl RenderedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Single-channel luminance frame in [0, 1].
pub type GrayFrame = Array2<f64>;

/// One splat after projection, holding only what the pixel loops need.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    /// Index into the world splat list.
    pub slot: usize,
    pub z: f64,
    pub mean2d: Vector2<f64>,
    /// Inverse 2D covariance (conic).
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel AABB of the 3σ footprint, clamped to the image.
    pub aabb: [i64; 4],
}

pub(crate) struct Scene {
    pub splats: Vec<Projected>,
    /// Per tile: indices into `splats`, preserving depth order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

/// Project world Gaussians, cull, depth-sort, and bucket into tiles.
pub(crate) fn prepare_scene(world: &WorldGaussians, camera: &Camera) -> Result<Scene> {
    camera.validate()?;
    let mut splats = Vec::with_capacity(world.splats.len());
    for (slot, g) in world.splats.iter().enumerate() {
        if !g.mean.iter().all(|v| v.is_finite())
            || !g.covariance.iter().all(|v| v.is_finite())
            || !g.opacity.is_finite()
        {
            return Err(Error::numerical("non-finite splat input to renderer"));
        }
        let cam = camera.to_camera(&g.mean);
        if cam.z <= Z_NEAR {
            continue;
        }
        let f = camera.focal;
        let (x, y, z) = (cam.x, cam.y, cam.z);
        let u = f * x / z + camera.cx;
        let v = f * y / z + camera.cy;
        let j = proj_jacobian(f, x, y, z);
        let cov_cam = camera.rotation * g.covariance * camera.rotation.transpose();
        let cov2d = j * cov_cam * j.transpose();
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if det <= 1e-18 {
            continue;
        }
        let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let rx = 3.0 * cov2d[(0, 0)].sqrt();
        let ry = 3.0 * cov2d[(1, 1)].sqrt();
        let x0 = (u - rx - 0.5).floor() as i64;
        let x1 = (u + rx - 0.5).ceil() as i64;
        let y0 = (v - ry - 0.5).floor() as i64;
        let y1 = (v + ry - 0.5).ceil() as i64;
        let x0 = x0.max(0);
        let y0 = y0.max(0);
        let x1 = x1.min(camera.width as i64 - 1);
        let y1 = y1.min(camera.height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Projected {
            slot,
            z,
            mean2d: Vector2::new(u, v),
            conic,
            opacity: g.opacity,
            color: g.color,
            aabb: [x0, y0, x1, y1],
        });
    }
    splats.sort_by(|a, b| a.z.total_cmp(&b.z));

    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let tx0 = s.aabb[0] as usize / TILE;
        let tx1 = s.aabb[2] as usize / TILE;
        let ty0 = s.aabb[1] as usize / TILE;
        let ty1 = s.aabb[3] as usize / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    Ok(Scene {
        splats,
        tiles,
        tiles_x,
    })
}

/// Gaussian falloff at pixel center (u, v), truncated continuously at 3σ.
/// Returns (alpha, raw falloff exp(−q/2), offset) when the splat contributes.
#[inline]
pub(crate) fn splat_alpha(s: &Projected, u: f64, v: f64) -> Option<(f64, f64, Vector2<f64>)> {
    if (u - 0.5) < s.aabb[0] as f64
        || (u - 0.5) > s.aabb[2] as f64
        || (v - 0.5) < s.aabb[1] as f64
        || (v - 0.5) > s.aabb[3] as f64
    {
        return None;
    }
    let d = Vector2::new(u - s.mean2d.x, v - s.mean2d.y);
    let q = d.dot(&(s.conic * d));
    if q > Q_CUTOFF {
        return None;
    }
    let g_raw = (-0.5 * q).exp();
    let g = (g_raw - CUTOFF_LEVEL) / CUTOFF_NORM;
    let alpha = (s.opacity * g).min(ALPHA_MAX);
    Some((alpha, g_raw, d))
}

/// Render pre-bound world Gaussians.
pub fn render_world(world: &WorldGaussians, camera: &Camera) -> Result<RenderedImage> {
    let scene = prepare_scene(world, camera)?;
    let (w, h) = (camera.width, camera.height);
    let rows = par::map_indexed(h, |row| {
        let mut rgb = vec![0.0f64; w * 3];
        let mut a = vec![0.0f64; w];
        let ty = row / TILE;
        for col in 0..w {
            let tile = &scene.tiles[ty * scene.tiles_x + col / TILE];
            let u = col as f64 + 0.5;
            let v = row as f64 + 0.5;
            let mut transmittance = 1.0f64;
            let mut alpha_sum = 0.0f64;
            for &si in tile {
                let s = &scene.splats[si as usize];
                let Some((alpha, _, _)) = splat_alpha(s, u, v) else {
                    continue;
                };
                let wgt = transmittance * alpha;
                rgb[col * 3] += wgt * s.color[0];
                rgb[col * 3 + 1] += wgt * s.color[1];
                rgb[col * 3 + 2] += wgt * s.color[2];
                alpha_sum += wgt;
                transmittance *= 1.0 - alpha;
                if alpha_sum > SATURATION {
                    break;
                }
            }
            a[col] = alpha_sum;
        }
        (rgb, a)
    });

    let mut pixels = Array3::zeros((h, w, 3));
    let mut alpha = Array2::zeros((h, w));
    for (row, (rgb, a)) in rows.into_iter().enumerate() {
        for col in 0..w {
            for c in 0..3 {
                pixels[[row, col, c]] = rgb[col * 3 + c];
            }
            alpha[[row, col]] = a[col];
        }
    }
    Ok(RenderedImage { pixels, alpha })
}

/// Bind the cloud to the mesh and render.
pub fn render(
    mesh: &Mesh,
    cloud: &GaussianCloud,
    topology: &FaceTopology,
    camera: &Camera,
) -> Result<RenderedImage> {
    mesh.validate_finite()?;
    let world = bind_to_mesh(cloud, mesh, topology)?;
    render_world(&world, camera)
}

/// Virtual camera framing the lip region: positioned along the mean lip
/// normal, at a distance where the lip bounding sphere spans [`LIP_FILL`] of
/// the 96×96 frame. Fixed per sequence from the neutral mesh in training.
pub fn lip_camera(mesh: &Mesh, topology: &FaceTopology) -> Result<Camera> {
    lip_camera_sized(mesh, topology, LIP_RESOLUTION, LIP_FILL)
}

pub fn lip_camera_sized(
    mesh: &Mesh,
    topology: &FaceTopology,
    resolution: usize,
    fill: f64,
) -> Result<Camera> {
    mesh.validate_finite()?;
    let lip: Vec<usize> = topology.region_indices(Region::Lip);
    if lip.is_empty() {
        return Err(Error::data("lip region is empty"));
    }
    let vtx = |i: usize| {
        Vector3::new(
            mesh.vertices[[i, 0]],
            mesh.vertices[[i, 1]],
            mesh.vertices[[i, 2]],
        )
    };
    let mut centroid = Vector3::zeros();
    for &i in &lip {
        centroid += vtx(i);
    }
    centroid /= lip.len() as f64;
    let radius = lip
        .iter()
        .map(|&i| (vtx(i) - centroid).norm())
        .fold(0.0f64, f64::max);
    if radius < 1e-9 {
        return Err(Error::numerical("degenerate lip region: zero spread"));
    }

    // Mean lip normal: area-weighted over faces with at least two lip corners.
    let lip_mask = topology.mask(Region::Lip);
    let mut normal = Vector3::zeros();
    for face in &topology.faces {
        let lips = face.iter().filter(|&&v| lip_mask[v]).count();
        if lips < 2 {
            continue;
        }
        let (a, b, c) = (vtx(face[0]), vtx(face[1]), vtx(face[2]));
        normal += (b - a).cross(&(c - a));
    }
    if normal.norm() < 1e-12 {
        // fall back to "outward from the head" if the lip patch is too sparse
        let mut head = Vector3::zeros();
        for i in 0..mesh.vertices.shape()[0] {
            head += vtx(i);
        }
        head /= mesh.vertices.shape()[0] as f64;
        normal = centroid - head;
        if normal.norm() < 1e-12 {
            return Err(Error::numerical("cannot determine lip normal"));
        }
    }
    let normal = normal.normalize();

    let half = resolution as f64 / 2.0;
    let focal = half / (LIP_FOV_DEG / 2.0).to_radians().tan();
    let dist = radius * focal / (fill * half);
    let eye = centroid + normal * dist;
    Ok(Camera::look_at(
        eye,
        centroid,
        Vector3::y(),
        focal,
        resolution,
        resolution,
    ))
}

/// Rec.601 luma: 0.299 R + 0.587 G + 0.114 B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Grayscale conversion of a lip crop. Rejects anything but 96×96 input.
pub fn lip_crop_grayscale(image: &RenderedImage) -> Result<GrayFrame> {
    if image.height() != LIP_RESOLUTION || image.width() != LIP_RESOLUTION {
        return Err(Error::data(format!(
            "lip crop must be {LIP_RESOLUTION}×{LIP_RESOLUTION}, got {}×{}",
            image.height(),
            image.width()
        )));
    }
    Ok(grayscale(image))
}

pub fn grayscale(image: &RenderedImage) -> GrayFrame {
    let (h, w) = (image.height(), image.width());
    Array2::from_shape_fn((h, w), |(i, j)| {
        LUMA_WEIGHTS[0] * image.pixels[[i, j, 0]]
            + LUMA_WEIGHTS[1] * image.pixels[[i, j, 1]]
            + LUMA_WEIGHTS[2] * image.pixels[[i, j, 2]]
    })
}

/// Adjoint of [`grayscale`]: spread a gray gradient across RGB channels.
pub fn grayscale_backward(d_gray: &Array2<f64>) -> Array3<f64> {
    let (h, w) = (d_gray.shape()[0], d_gray.shape()[1]);
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| d_gray[[i, j]] * LUMA_WEIGHTS[c])
}

/// Diagnostics for gradient-check scenes: the truncated footprint is only
/// C⁰ at its 3σ boundary and compositing stops discontinuously at the
/// saturation cutoff, so finite-difference probes need pixel centers away
/// from both. Returns (min |q − 9| over pixel×splat pairs, max per-pixel
/// accumulated alpha).
pub fn scene_margins(world: &WorldGaussians, camera: &Camera) -> Result<(f64, f64)> {
    let scene = prepare_scene(world, camera)?;
    let mut q_margin = f64::INFINITY;
    let mut alpha_peak = 0.0f64;
    for row in 0..camera.height {
        for col in 0..camera.width {
            let u = col as f64 + 0.5;
            let v = row as f64 + 0.5;
            let mut alpha_sum = 0.0;
            let mut transmittance = 1.0;
            for s in &scene.splats {
                let d = Vector2::new(u - s.mean2d.x, v - s.mean2d.y);
                let q = d.dot(&(s.conic * d));
                q_margin = q_margin.min((q - Q_CUTOFF).abs());
                if let Some((alpha, _, _)) = splat_alpha(s, u, v) {
                    alpha_sum += transmittance * alpha;
                    transmittance *= 1.0 - alpha;
                }
            }
            alpha_peak = alpha_peak.max(alpha_sum);
        }
    }
    Ok((q_margin, alpha_peak))
}

/// Render every frame of a mesh sequence through one camera (frames run in
/// parallel; output order is fixed).
pub fn render_sequence(
    seq: &crate::face::MeshSequence,
    cloud: &GaussianCloud,
    camera: &Camera,
) -> Result<Vec<RenderedImage>> {
    let topology = seq.topology.clone();
    let results = par::map_indexed(seq.frames(), |t| {
        render(&seq.frame(t), cloud, &topology, camera)
    });
    results.into_iter().collect()
}

/// Rendered lip crops converted to grayscale, the extractor's input domain.
pub fn render_gray_sequence(
    seq: &crate::face::MeshSequence,
    cloud: &GaussianCloud,
    camera: &Camera,
) -> Result<Vec<GrayFrame>> {
    let topology = seq.topology.clone();
    let results = par::map_indexed(seq.frames(), |t| {
        render(&seq.frame(t), cloud, &topology, camera).and_then(|img| lip_crop_grayscale(&img))
    });
    results.into_iter().collect()
}

pub(crate) fn proj_jacobian(f: f64, x: f64, y: f64, z: f64) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        f / z,
        0.0,
        -f * x / (z * z),
        0.0,
        f / z,
        -f * y / (z * z),
    )
}

/// Frame-dump manifest written next to rendered sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameManifest {
    pub fps: f64,
    pub frames: Vec<String>,
}

/// Save frames as 8-bit PNGs (`frame_000000.png`, ...) plus a JSON manifest.
pub fn save_frames(dir: &std::path::Path, frames: &[RenderedImage], fps: f64) -> Result<FrameManifest> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let name = format!("frame_{t:06}.png");
        let (h, w) = (frame.height(), frame.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = image::Rgb([
                    (frame.pixels[[i, j, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (frame.pixels[[i, j, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (frame.pixels[[i, j, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]);
                img.put_pixel(j as u32, i as u32, px);
            }
        }
        img.save(dir.join(&name))
            .map_err(|e| Error::data(format!("cannot write frame: {e}")))?;
        names.push(name);
    }
    let manifest = FrameManifest {
        fps,
        frames: names,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("frames_manifest.json"), json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::{build_avatar, AvatarSpec, WorldGaussian};
    use crate::face::{build_model, FaceModelParams, ModelSpec};
    use approx::assert_relative_eq;

    fn frontal_camera(w: usize, h: usize, z: f64) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, z),
            Vector3::zeros(),
            Vector3::y(),
            w as f64,
            w,
            h,
        )
    }

    fn isotropic_world(splats: Vec<(Vector3<f64>, f64, f64, [f64; 3])>) -> WorldGaussians {
        WorldGaussians {
            splats: splats
                .into_iter()
                .map(|(mean, sigma, opacity, color)| WorldGaussian {
                    mean,
                    covariance: Matrix3::identity() * sigma * sigma,
                    opacity,
                    color,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = frontal_camera(16, 16, 1.0);
        let img = render_world(&WorldGaussians::default(), &cam).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
        assert!(img.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn all_splats_behind_camera_is_background_not_error() {
        let cam = frontal_camera(16, 16, 1.0);
        let world = isotropic_world(vec![(Vector3::new(0.0, 0.0, 5.0), 0.05, 0.9, [1.0, 0.0, 0.0])]);
        let img = render_world(&world, &cam).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn nan_input_is_error() {
        let cam = frontal_camera(16, 16, 1.0);
        let world = isotropic_world(vec![(Vector3::new(f64::NAN, 0.0, 0.0), 0.05, 0.9, [1.0, 0.0, 0.0])]);
        assert!(render_world(&world, &cam).is_err());
    }

    /// Closed-form oracle: a single isotropic splat on the optical axis.
    /// Expected pixel = min(opacity·exp(−q/2), α_max)·color at each center,
    /// with q evaluated on the analytically projected 2D Gaussian.
    #[test]
    fn single_axial_splat_matches_closed_form() {
        let n = 33; // odd resolution puts one pixel center on the axis
        let cam = frontal_camera(n, n, 0.5);
        let sigma = 0.02;
        let opacity = 1.0;
        let color = [0.9, 0.55, 0.2];
        let world = isotropic_world(vec![(Vector3::zeros(), sigma, opacity, color)]);
        let img = render_world(&world, &cam).unwrap();

        // analytic projection: z = 0.5, f = 33 → σ_px = f·σ/z (isotropic)
        let f = n as f64;
        let z = 0.5;
        let sigma_px = f * sigma / z;
        let (cx, cy) = (n as f64 / 2.0, n as f64 / 2.0);
        for i in 0..n {
            for j in 0..n {
                let du = (j as f64 + 0.5 - cx) / sigma_px;
                let dv = (i as f64 + 0.5 - cy) / sigma_px;
                let q = du * du + dv * dv;
                let expect_alpha = if q > 9.0 {
                    0.0
                } else {
                    let k = (-4.5f64).exp();
                    (opacity * ((-0.5 * q).exp() - k) / (1.0 - k)).min(0.999)
                };
                for c in 0..3 {
                    let expect = expect_alpha * color[c];
                    let got = img.pixels[[i, j, c]];
                    assert!(
                        (got - expect).abs() < 2e-3,
                        "pixel ({i},{j},{c}): got {got}, expect {expect}"
                    );
                }
            }
        }

        // peak pixel color equals splat color within 1e-3
        let mid = n / 2;
        for c in 0..3 {
            assert!((img.pixels[[mid, mid, c]] - color[c]).abs() <= 1e-3);
        }
        // radially symmetric alpha
        for (a, b) in [((mid, mid + 3), (mid, mid - 3)), ((mid + 3, mid), (mid - 3, mid))] {
            assert_relative_eq!(img.alpha[[a.0, a.1]], img.alpha[[b.0, b.1]], epsilon = 1e-12);
        }
    }

    #[test]
    fn front_opaque_splat_wins() {
        let cam = frontal_camera(17, 17, 1.0);
        let red = (Vector3::new(0.0, 0.0, 0.2), 0.05, 1.0, [1.0, 0.0, 0.0]);
        let blue = (Vector3::new(0.0, 0.0, -0.2), 0.05, 1.0, [0.0, 0.0, 1.0]);
        // insertion order must not matter after the depth sort
        for world in [
            isotropic_world(vec![red, blue]),
            isotropic_world(vec![blue, red]),
        ] {
            let img = render_world(&world, &cam).unwrap();
            let mid = 8;
            assert!(img.pixels[[mid, mid, 0]] > 0.995);
            assert!(img.pixels[[mid, mid, 2]] < 1e-3);
        }
    }

    #[test]
    fn permuting_non_overlapping_splats_is_bit_exact() {
        let cam = frontal_camera(32, 32, 1.0);
        let a = (Vector3::new(-0.12, 0.0, 0.0), 0.01, 0.8, [1.0, 0.2, 0.1]);
        let b = (Vector3::new(0.12, 0.0, 0.0), 0.01, 0.7, [0.1, 0.9, 0.3]);
        let c = (Vector3::new(0.0, 0.12, 0.1), 0.01, 0.6, [0.2, 0.3, 0.8]);
        let img1 = render_world(&isotropic_world(vec![a, b, c]), &cam).unwrap();
        let img2 = render_world(&isotropic_world(vec![c, a, b]), &cam).unwrap();
        assert_eq!(img1.pixels, img2.pixels);
        assert_eq!(img1.alpha, img2.alpha);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cam = frontal_camera(24, 24, 1.0);
        let splats: Vec<_> = (0..40)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                    ),
                    rng.random_range(0.005..0.08),
                    rng.random_range(0.0..1.0),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                )
            })
            .collect();
        let img = render_world(&isotropic_world(splats), &cam).unwrap();
        assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(img.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn lip_camera_contains_lip_vertices_across_poses() {
        let model = build_model(&ModelSpec::default()).unwrap();
        for jaw in [0.0, 0.1, 0.25] {
            let mut p = FaceModelParams::zeros(&model.spec);
            p.pose[0] = jaw;
            let mesh = model.deform(&p).unwrap();
            let cam = lip_camera(&mesh, &model.topology).unwrap();
            assert_eq!(cam.width, LIP_RESOLUTION);
            for &i in &model.topology.region_indices(Region::Lip) {
                let p3 = Vector3::new(
                    mesh.vertices[[i, 0]],
                    mesh.vertices[[i, 1]],
                    mesh.vertices[[i, 2]],
                );
                let (u, v, z) = cam.project(&p3);
                assert!(z > 0.0, "lip vertex behind camera (jaw {jaw})");
                assert!(
                    u >= 0.0 && u < 96.0 && v >= 0.0 && v < 96.0,
                    "lip vertex out of frame at jaw {jaw}: ({u:.1}, {v:.1})"
                );
            }
        }
    }

    #[test]
    fn lip_camera_translates_with_mesh_and_image_is_identical() {
        let model = build_model(&ModelSpec::default()).unwrap();
        let cloud = build_avatar(&model.topology, &AvatarSpec::default()).unwrap();
        let mesh = Mesh {
            vertices: model.template.clone(),
        };
        let t = Vector3::new(0.4, -0.2, 0.1);
        let mut moved = mesh.clone();
        for i in 0..moved.vertices.shape()[0] {
            for k in 0..3 {
                moved.vertices[[i, k]] += t[k];
            }
        }
        let cam0 = lip_camera(&mesh, &model.topology).unwrap();
        let cam1 = lip_camera(&moved, &model.topology).unwrap();
        // camera center translates by t
        let eye0 = -(cam0.rotation.transpose() * cam0.translation);
        let eye1 = -(cam1.rotation.transpose() * cam1.translation);
        assert_relative_eq!(eye1, eye0 + t, epsilon = 1e-9);
        let img0 = render(&mesh, &cloud, &model.topology, &cam0).unwrap();
        let img1 = render(&moved, &cloud, &model.topology, &cam1).unwrap();
        let max_diff = img0
            .pixels
            .iter()
            .zip(img1.pixels.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff < 1e-9, "lip render changed under translation: {max_diff}");
    }

    #[test]
    fn degenerate_lip_region_is_error() {
        let model = build_model(&ModelSpec::default()).unwrap();
        let mut mesh = Mesh {
            vertices: model.template.clone(),
        };
        // collapse all lip vertices onto one point
        let lips = model.topology.region_indices(Region::Lip);
        for &i in &lips {
            for k in 0..3 {
                mesh.vertices[[i, k]] = 0.01;
            }
        }
        assert!(lip_camera(&mesh, &model.topology).is_err());
    }

    #[test]
    fn grayscale_weights_and_oracle() {
        let white = RenderedImage {
            pixels: Array3::from_elem((96, 96, 3), 1.0),
            alpha: Array2::from_elem((96, 96), 1.0),
        };
        let g = lip_crop_grayscale(&white).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut red = white.clone();
        red.pixels.index_axis_mut(ndarray::Axis(2), 1).fill(0.0);
        red.pixels.index_axis_mut(ndarray::Axis(2), 2).fill(0.0);
        let g = lip_crop_grayscale(&red).unwrap();
        assert!(g.iter().all(|&v| (v - 0.299).abs() < 1e-12));

        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = RenderedImage {
            pixels: Array3::from_shape_fn((96, 96, 3), |_| rng.random_range(0.0..1.0)),
            alpha: Array2::zeros((96, 96)),
        };
        let g = lip_crop_grayscale(&img).unwrap();
        for i in 0..96 {
            for j in 0..96 {
                let expect = 0.299 * img.pixels[[i, j, 0]]
                    + 0.587 * img.pixels[[i, j, 1]]
                    + 0.114 * img.pixels[[i, j, 2]];
                assert!((g[[i, j]] - expect).abs() < 1e-15);
            }
        }

        let small = RenderedImage {
            pixels: Array3::zeros((8, 8, 3)),
            alpha: Array2::zeros((8, 8)),
        };
        assert!(lip_crop_grayscale(&small).is_err());
    }

    #[test]
    fn frame_dump_writes_pngs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![
            RenderedImage {
                pixels: Array3::from_elem((8, 8, 3), 0.5),
                alpha: Array2::zeros((8, 8)),
            };
            3
        ];
        let manifest = save_frames(dir.path(), &frames, 30.0).unwrap();
        assert_eq!(manifest.frames.len(), 3);
        assert!(dir.path().join("frame_000002.png").exists());
        assert!(dir.path().join("frames_manifest.json").exists());
    }
}

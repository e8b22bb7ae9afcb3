//! Linear parametric head model: template mesh + orthonormal identity and
//! expression blendshape bases + jaw articulation with rigidly attached teeth.
//!
//! The procedural model stands in for a statistical head model: the skin is a
//! lat-long ellipsoid grid, bases are spatially smoothed seeded noise that is
//! orthonormalized column-wise, and semantic regions (lip band, eye disks,
//! teeth block) are carved from template geometry. Real assets with the same
//! array layout load through [`FaceModel::from_container`].

use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arrays::ArrayContainer;
use crate::error::{Error, Result};

pub const TEETH_VERTICES: usize = 40;
pub const TEETH_FACES: usize = 120;
const TEETH_COLS: usize = 10;

/// Semantic vertex regions. Mutually exclusive, jointly covering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Lip,
    Skin,
    Eye,
    Teeth,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Lip, Region::Skin, Region::Eye, Region::Teeth];

    pub fn name(self) -> &'static str {
        match self {
            Region::Lip => "lip",
            Region::Skin => "skin",
            Region::Eye => "eye",
            Region::Teeth => "teeth",
        }
    }
}

/// Spec for the procedural model. Full-scale dimensions are accepted; the
/// defaults keep gradient checks and overfit tests fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Skin vertex count (teeth vertices are appended on top of this).
    pub vertex_count: usize,
    pub d_identity: usize,
    pub d_expression: usize,
    pub d_pose: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vertex_count: 512,
            d_identity: 16,
            d_expression: 8,
            d_pose: 6,
            seed: 7,
        }
    }
}

/// Identity / expression / pose coefficients.
///
/// Pose layout: `pose[0]` is the jaw pitch in radians (positive opens the
/// mouth); `pose[1..3]` are reserved; `pose[3..6]` is a global axis-angle
/// rotation applied to the whole head.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModelParams {
    pub identity: Array1<f64>,
    pub expression: Array1<f64>,
    pub pose: Array1<f64>,
}

impl FaceModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            identity: Array1::zeros(spec.d_identity),
            expression: Array1::zeros(spec.d_expression),
            pose: Array1::zeros(spec.d_pose),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("identity", &self.identity),
            ("expression", &self.expression),
            ("pose", &self.pose),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::numerical(format!("non-finite {name} parameters")));
            }
        }
        Ok(())
    }
}

/// Fixed face topology shared by every mesh the model produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTopology {
    pub faces: Vec<[usize; 3]>,
    pub vertex_count: usize,
    /// Region per vertex (already mutually exclusive).
    pub regions: Vec<Region>,
    /// First vertex index of the appended teeth block.
    pub teeth_vertex_start: usize,
    /// First face index of the appended teeth block.
    pub teeth_face_start: usize,
    /// Vertex range of the lower (jaw-following) teeth row.
    pub lower_teeth_start: usize,
}

impl FaceTopology {
    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.regions.iter().map(|&r| r == region).collect()
    }

    pub fn region_indices(&self, region: Region) -> Vec<usize> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region)
            .map(|(i, _)| i)
            .collect()
    }

    /// Region of a face, by priority teeth > lip > eye > skin over its corners.
    pub fn face_region(&self, face: usize) -> Region {
        let rs = self.faces[face].map(|v| self.regions[v]);
        for want in [Region::Teeth, Region::Lip, Region::Eye] {
            if rs.contains(&want) {
                return want;
            }
        }
        Region::Skin
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.vertex_count) {
                return Err(Error::data(format!("face {i} references vertex out of range")));
            }
        }
        if self.regions.len() != self.vertex_count {
            return Err(Error::data("region labels do not cover all vertices"));
        }
        let teeth_count = self.regions.iter().filter(|&&r| r == Region::Teeth).count();
        if teeth_count != self.vertex_count - self.teeth_vertex_start {
            return Err(Error::data("teeth mask must be exactly the appended block"));
        }
        for f in &self.faces[self.teeth_face_start..] {
            if f.iter().any(|&v| v < self.teeth_vertex_start) {
                return Err(Error::data("teeth faces must index only teeth vertices"));
            }
        }
        Ok(())
    }
}

/// A single deformed mesh (shares topology with its model).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// V×3 vertex positions in meters.
    pub vertices: Array2<f64>,
}

impl Mesh {
    pub fn validate_finite(&self) -> Result<()> {
        if self.vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("mesh contains non-finite vertices"));
        }
        Ok(())
    }
}

/// T×V×3 vertex trajectory at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub vertices: Array3<f64>,
    pub topology: Arc<FaceTopology>,
    pub fps: f64,
}

impl MeshSequence {
    pub fn frames(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn frame(&self, t: usize) -> Mesh {
        Mesh {
            vertices: self.vertices.index_axis(ndarray::Axis(0), t).to_owned(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps <= 0.0 {
            return Err(Error::config("fps must be positive"));
        }
        if self.vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("mesh sequence contains non-finite values"));
        }
        if self.vertices.shape()[1] != self.topology.vertex_count {
            return Err(Error::data("mesh sequence vertex count does not match topology"));
        }
        Ok(())
    }
}

/// The parametric model. Immutable after construction; `deform` is pure.
#[derive(Debug, Clone)]
pub struct FaceModel {
    pub spec: ModelSpec,
    /// V×3 rest positions.
    pub template: Array2<f64>,
    /// (V·3)×D_id, orthonormal columns, zero on teeth rows.
    pub basis_identity: Array2<f64>,
    /// (V·3)×D_exp, orthonormal columns, zero on teeth rows.
    pub basis_expression: Array2<f64>,
    /// Per-vertex jaw skinning weight in [0,1].
    pub jaw_weights: Array1<f64>,
    pub jaw_pivot: Vector3<f64>,
    pub topology: Arc<FaceTopology>,
}

impl FaceModel {
    pub fn vertex_count(&self) -> usize {
        self.topology.vertex_count
    }

    /// Deform the template: linear blendshapes, then jaw rotation blended by
    /// the skinning weights (teeth move rigidly), then global rotation.
    pub fn deform(&self, params: &FaceModelParams) -> Result<Mesh> {
        params.validate()?;
        if params.identity.len() != self.spec.d_identity
            || params.expression.len() != self.spec.d_expression
            || params.pose.len() != self.spec.d_pose
        {
            return Err(Error::config(format!(
                "parameter dims ({}, {}, {}) do not match model spec ({}, {}, {})",
                params.identity.len(),
                params.expression.len(),
                params.pose.len(),
                self.spec.d_identity,
                self.spec.d_expression,
                self.spec.d_pose
            )));
        }
        let v = self.vertex_count();
        let flat = self.basis_identity.dot(&params.identity)
            + self.basis_expression.dot(&params.expression);
        let mut verts = self.template.clone();
        {
            let mut view = verts.view_mut().into_shape_with_order(v * 3).unwrap();
            view += &flat;
        }

        let jaw = params.pose[0];
        if jaw != 0.0 {
            let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), jaw);
            for i in 0..v {
                let w = self.jaw_weights[i];
                if w == 0.0 {
                    continue;
                }
                let p = Vector3::new(verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
                let rotated = self.jaw_pivot + rot * (p - self.jaw_pivot);
                let blended = p * (1.0 - w) + rotated * w;
                verts[[i, 0]] = blended.x;
                verts[[i, 1]] = blended.y;
                verts[[i, 2]] = blended.z;
            }
        }

        let global = Vector3::new(params.pose[3], params.pose[4], params.pose[5]);
        let angle = global.norm();
        if angle > 0.0 {
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(global), angle);
            for i in 0..v {
                let p = Vector3::new(verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
                let q = rot * p;
                verts[[i, 0]] = q.x;
                verts[[i, 1]] = q.y;
                verts[[i, 2]] = q.z;
            }
        }

        Ok(Mesh { vertices: verts })
    }

    /// Identity-only deformation: expression and pose at rest.
    pub fn neutral_mesh(&self, identity: &Array1<f64>) -> Result<Mesh> {
        let params = FaceModelParams {
            identity: identity.clone(),
            expression: Array1::zeros(self.spec.d_expression),
            pose: Array1::zeros(self.spec.d_pose),
        };
        self.deform(&params)
    }

    /// Load a model from a named-array container. Expected entries:
    /// `template` (V×3), `faces` (F×3 i64), `basis_identity` ((V·3)×D_id),
    /// `basis_expression`, `jaw_weights` (V), `jaw_pivot` (3),
    /// `region` (V i64, 0=lip 1=skin 2=eye 3=teeth),
    /// `teeth_vertex_start`, `teeth_face_start`, `lower_teeth_start` (scalar i64).
    pub fn from_container(c: &ArrayContainer, d_pose: usize, seed: u64) -> Result<Self> {
        let template = to_2d(c.f64_entry("template")?)?;
        let v = template.shape()[0];
        let faces_arr = to_2d_i64(c.i64_entry("faces")?)?;
        let faces: Vec<[usize; 3]> = faces_arr
            .rows()
            .into_iter()
            .map(|r| [r[0] as usize, r[1] as usize, r[2] as usize])
            .collect();
        let basis_identity = to_2d(c.f64_entry("basis_identity")?)?;
        let basis_expression = to_2d(c.f64_entry("basis_expression")?)?;
        if basis_identity.shape()[0] != v * 3 || basis_expression.shape()[0] != v * 3 {
            return Err(Error::data("basis row count must be 3 × vertex count"));
        }
        let jaw_weights = Array1::from_iter(c.f64_entry("jaw_weights")?.iter().copied());
        let pivot = c.f64_entry("jaw_pivot")?;
        let jaw_pivot = Vector3::new(pivot[[0]], pivot[[1]], pivot[[2]]);
        let regions: Vec<Region> = c
            .i64_entry("region")?
            .iter()
            .map(|&k| match k {
                0 => Ok(Region::Lip),
                1 => Ok(Region::Skin),
                2 => Ok(Region::Eye),
                3 => Ok(Region::Teeth),
                other => Err(Error::data(format!("unknown region code {other}"))),
            })
            .collect::<Result<_>>()?;
        let scalar = |name: &str| -> Result<usize> {
            Ok(c.i64_entry(name)?.iter().next().copied().unwrap_or(0) as usize)
        };
        let topology = FaceTopology {
            faces,
            vertex_count: v,
            regions,
            teeth_vertex_start: scalar("teeth_vertex_start")?,
            teeth_face_start: scalar("teeth_face_start")?,
            lower_teeth_start: scalar("lower_teeth_start")?,
        };
        topology.validate()?;
        let spec = ModelSpec {
            vertex_count: topology.teeth_vertex_start,
            d_identity: basis_identity.shape()[1],
            d_expression: basis_expression.shape()[1],
            d_pose,
            seed,
        };
        Ok(Self {
            spec,
            template,
            basis_identity,
            basis_expression,
            jaw_weights,
            jaw_pivot,
            topology: Arc::new(topology),
        })
    }

    pub fn to_container(&self) -> ArrayContainer {
        let mut c = ArrayContainer::new();
        c.insert_f64("template", self.template.clone());
        let f = Array2::from_shape_fn((self.topology.faces.len(), 3), |(i, j)| {
            self.topology.faces[i][j] as i64
        });
        c.insert_i64("faces", f);
        c.insert_f64("basis_identity", self.basis_identity.clone());
        c.insert_f64("basis_expression", self.basis_expression.clone());
        c.insert_f64("jaw_weights", self.jaw_weights.clone());
        c.insert_f64(
            "jaw_pivot",
            Array1::from_vec(vec![self.jaw_pivot.x, self.jaw_pivot.y, self.jaw_pivot.z]),
        );
        let region_codes = Array1::from_iter(self.topology.regions.iter().map(|r| match r {
            Region::Lip => 0i64,
            Region::Skin => 1,
            Region::Eye => 2,
            Region::Teeth => 3,
        }));
        c.insert_i64("region", region_codes);
        c.insert_i64(
            "teeth_vertex_start",
            Array1::from_vec(vec![self.topology.teeth_vertex_start as i64]),
        );
        c.insert_i64(
            "teeth_face_start",
            Array1::from_vec(vec![self.topology.teeth_face_start as i64]),
        );
        c.insert_i64(
            "lower_teeth_start",
            Array1::from_vec(vec![self.topology.lower_teeth_start as i64]),
        );
        c
    }
}

/// Build the procedural model. Deterministic: identical specs produce
/// bit-identical models.
pub fn build_model(spec: &ModelSpec) -> Result<FaceModel> {
    if spec.vertex_count == 0 || spec.d_identity == 0 || spec.d_expression == 0 {
        return Err(Error::config("vertex_count, d_identity and d_expression must be > 0"));
    }
    if spec.d_pose < 6 {
        return Err(Error::config("d_pose must be at least 6"));
    }
    let (rows, cols) = grid_dims(spec.vertex_count)?;
    let total_v = spec.vertex_count + TEETH_VERTICES;
    if spec.d_identity + spec.d_expression > spec.vertex_count * 3 {
        return Err(Error::config("basis dims exceed available degrees of freedom"));
    }

    // Skin ellipsoid: +y up, +z front, openings at the poles.
    let (a, b, cdepth) = (0.075, 0.095, 0.08);
    let mut template = Array2::zeros((total_v, 3));
    for i in 0..rows {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / rows as f64;
        for j in 0..cols {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / cols as f64;
            let idx = i * cols + j;
            template[[idx, 0]] = a * theta.sin() * phi.sin();
            template[[idx, 1]] = b * theta.cos();
            template[[idx, 2]] = cdepth * theta.sin() * phi.cos();
        }
    }
    let mut faces = Vec::with_capacity((rows - 1) * cols * 2 + TEETH_FACES);
    for i in 0..rows - 1 {
        for j in 0..cols {
            let jn = (j + 1) % cols;
            let (v00, v01) = (i * cols + j, i * cols + jn);
            let (v10, v11) = ((i + 1) * cols + j, (i + 1) * cols + jn);
            faces.push([v00, v10, v01]);
            faces.push([v01, v10, v11]);
        }
    }
    let teeth_face_start = faces.len();

    // Teeth: two arcs of 2×10 vertices each, tucked behind the lips. Upper
    // row follows the skull, lower row follows the jaw.
    let teeth_vertex_start = spec.vertex_count;
    let mouth_y = -0.035;
    let teeth_z = 0.058;
    for (row, y_mid) in [(0usize, mouth_y + 0.006), (1usize, mouth_y - 0.006)] {
        let base = teeth_vertex_start + row * 2 * TEETH_COLS;
        for j in 0..TEETH_COLS {
            let x = -0.022 + 0.044 * j as f64 / (TEETH_COLS - 1) as f64;
            let z = teeth_z - 2.0 * x * x;
            // top edge then bottom edge
            template[[base + j, 0]] = x;
            template[[base + j, 1]] = y_mid + 0.004;
            template[[base + j, 2]] = z;
            template[[base + TEETH_COLS + j, 0]] = x;
            template[[base + TEETH_COLS + j, 1]] = y_mid - 0.004;
            template[[base + TEETH_COLS + j, 2]] = z;
        }
        for j in 0..TEETH_COLS {
            let jn = (j + 1) % TEETH_COLS;
            let (t0, t1) = (base + j, base + jn);
            let (b0, b1) = (base + TEETH_COLS + j, base + TEETH_COLS + jn);
            faces.push([t0, b0, b1]);
            faces.push([t0, b1, t1]);
            faces.push([b0, t0, b1]);
            faces.push([b1, t0, t1]);
            faces.push([t0, t1, b0]);
            faces.push([b0, b1, t1]);
        }
    }
    debug_assert_eq!(faces.len() - teeth_face_start, TEETH_FACES);
    let lower_teeth_start = teeth_vertex_start + 2 * TEETH_COLS;

    // Region labels: teeth block as appended, lip band around the mouth
    // centerline, eye disks, skin elsewhere.
    let mut regions = vec![Region::Skin; total_v];
    for r in regions.iter_mut().skip(teeth_vertex_start) {
        *r = Region::Teeth;
    }
    let mut lip_count = 0;
    for i in 0..spec.vertex_count {
        let (x, y, z) = (template[[i, 0]], template[[i, 1]], template[[i, 2]]);
        if (y - mouth_y).abs() <= 0.013 && z > 0.02 && x.abs() <= 0.032 {
            regions[i] = Region::Lip;
            lip_count += 1;
        }
    }
    if lip_count < 4 {
        // Coarse grids: fall back to the nearest front vertices to the mouth.
        let mut by_dist: Vec<(f64, usize)> = (0..spec.vertex_count)
            .filter(|&i| template[[i, 2]] > 0.0)
            .map(|i| {
                let dx = template[[i, 0]];
                let dy = template[[i, 1]] - mouth_y;
                (dx * dx + dy * dy, i)
            })
            .collect();
        by_dist.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        for &(_, i) in by_dist.iter().take(8) {
            regions[i] = Region::Lip;
        }
    }
    for i in 0..spec.vertex_count {
        if regions[i] != Region::Skin {
            continue;
        }
        let (x, y, z) = (template[[i, 0]], template[[i, 1]], template[[i, 2]]);
        for ex in [-0.030, 0.030] {
            let dx = x - ex;
            let dy = y - 0.030;
            if dx * dx + dy * dy <= 0.016 * 0.016 && z > 0.02 {
                regions[i] = Region::Eye;
            }
        }
    }

    // Jaw skinning: smoothstep from the mouth line down to the chin, lower
    // teeth fully rigid on the jaw, upper teeth fixed to the skull.
    let (y_hi, y_lo) = (mouth_y + 0.004, mouth_y - 0.024);
    let mut jaw_weights = Array1::zeros(total_v);
    for i in 0..spec.vertex_count {
        let t = ((y_hi - template[[i, 1]]) / (y_hi - y_lo)).clamp(0.0, 1.0);
        jaw_weights[i] = t * t * (3.0 - 2.0 * t);
    }
    for i in lower_teeth_start..total_v {
        jaw_weights[i] = 1.0;
    }

    let basis_identity = smooth_orthonormal_basis(
        spec.seed.wrapping_add(0x1d),
        spec.d_identity,
        spec.vertex_count,
        total_v,
        rows,
        cols,
        &template,
        mouth_y,
        0.25,
    )?;
    let basis_expression = smooth_orthonormal_basis(
        spec.seed.wrapping_add(0xe1),
        spec.d_expression,
        spec.vertex_count,
        total_v,
        rows,
        cols,
        &template,
        mouth_y,
        0.65,
    )?;

    let topology = FaceTopology {
        faces,
        vertex_count: total_v,
        regions,
        teeth_vertex_start,
        teeth_face_start,
        lower_teeth_start,
    };
    topology.validate()?;

    Ok(FaceModel {
        spec: spec.clone(),
        template,
        basis_identity,
        basis_expression,
        jaw_weights,
        jaw_pivot: Vector3::new(0.0, -0.01, -0.03),
        topology: Arc::new(topology),
    })
}

/// Seeded noise on the skin grid, blurred for spatial smoothness, optionally
/// emphasized around the mouth, zero on teeth rows, then Gram-Schmidt
/// orthonormalized column-wise.
#[allow(clippy::too_many_arguments)]
fn smooth_orthonormal_basis(
    seed: u64,
    dims: usize,
    skin_v: usize,
    total_v: usize,
    rows: usize,
    cols: usize,
    template: &Array2<f64>,
    mouth_y: f64,
    mouth_emphasis: f64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Array2::zeros((total_v * 3, dims));
    // 1D Gaussian kernel, radius 3, sigma 1.5 grid cells.
    let kernel: Vec<f64> = (-3i64..=3).map(|d| (-(d * d) as f64 / 4.5).exp()).collect();
    let ksum: f64 = kernel.iter().sum();

    for k in 0..dims {
        let mut noise = Array2::<f64>::zeros((skin_v, 3));
        for v in noise.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for axis in 0..3 {
            let mut blurred = vec![0.0; skin_v];
            for i in 0..rows {
                for j in 0..cols {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (di, &kr) in (-3i64..=3).zip(&kernel) {
                        let ii = i as i64 + di;
                        if ii < 0 || ii >= rows as i64 {
                            continue;
                        }
                        for (dj, &kc) in (-3i64..=3).zip(&kernel) {
                            let jj = (j as i64 + dj).rem_euclid(cols as i64) as usize;
                            let w = kr * kc / (ksum * ksum);
                            acc += w * noise[[ii as usize * cols + jj, axis]];
                            wsum += w;
                        }
                    }
                    blurred[i * cols + j] = acc / wsum;
                }
            }
            for i in 0..skin_v {
                let dy = template[[i, 1]] - mouth_y;
                let dx = template[[i, 0]];
                let falloff = (-(dx * dx + dy * dy) / (2.0 * 0.05 * 0.05)).exp();
                let emphasis = (1.0 - mouth_emphasis) + mouth_emphasis * falloff;
                basis[[i * 3 + axis, k]] = blurred[i] * emphasis;
            }
        }
    }

    // Modified Gram-Schmidt.
    for k in 0..dims {
        for prev in 0..k {
            let dot: f64 = (0..total_v * 3).map(|r| basis[[r, k]] * basis[[r, prev]]).sum();
            for r in 0..total_v * 3 {
                basis[[r, k]] -= dot * basis[[r, prev]];
            }
        }
        let norm: f64 = (0..total_v * 3).map(|r| basis[[r, k]] * basis[[r, k]]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numerical("degenerate blendshape basis column"));
        }
        for r in 0..total_v * 3 {
            basis[[r, k]] /= norm;
        }
    }
    Ok(basis)
}

/// Factor the skin vertex count into a lat-long grid close to 1:2 aspect.
fn grid_dims(v: usize) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for r in 3..=v {
        if r * r > v * 2 {
            break;
        }
        if v % r != 0 {
            continue;
        }
        let c = v / r;
        if c < 6 {
            continue;
        }
        let target = ((v as f64) / 2.0).sqrt();
        let better = match best {
            None => true,
            Some((br, _)) => (r as f64 - target).abs() < (br as f64 - target).abs(),
        };
        if better {
            best = Some((r, c));
        }
    }
    best.ok_or_else(|| {
        Error::config(format!(
            "vertex_count {v} cannot be arranged as an r×c grid with r ≥ 3, c ≥ 6"
        ))
    })
}

/// Best-fit rigid transform (rotation + translation) residual between two
/// point sets, via the Kabsch algorithm. Used to verify that teeth blocks
/// move rigidly.
pub fn rigid_fit_residual(src: &Array2<f64>, dst: &Array2<f64>) -> f64 {
    assert_eq!(src.shape(), dst.shape());
    let cs = src.mean_axis(ndarray::Axis(0)).unwrap();
    let cd = dst.mean_axis(ndarray::Axis(0)).unwrap();
    let mut h = Matrix3::zeros();
    for i in 0..src.shape()[0] {
        let p = Vector3::new(src[[i, 0]] - cs[0], src[[i, 1]] - cs[1], src[[i, 2]] - cs[2]);
        let q = Vector3::new(dst[[i, 0]] - cd[0], dst[[i, 1]] - cd[1], dst[[i, 2]] - cd[2]);
        h += q * p.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = (u * vt).determinant();
    let mut s = Matrix3::identity();
    s[(2, 2)] = d.signum();
    let r = u * s * vt;
    let mut worst = 0.0f64;
    for i in 0..src.shape()[0] {
        let p = Vector3::new(src[[i, 0]] - cs[0], src[[i, 1]] - cs[1], src[[i, 2]] - cs[2]);
        let q = Vector3::new(dst[[i, 0]] - cd[0], dst[[i, 1]] - cd[1], dst[[i, 2]] - cd[2]);
        worst = worst.max((r * p - q).norm());
    }
    worst
}

pub(crate) fn to_2d(a: &ndarray::ArrayD<f64>) -> Result<Array2<f64>> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::data("expected a 2-d array"))
}

fn to_2d_i64(a: &ndarray::ArrayD<i64>) -> Result<Array2<i64>> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::data("expected a 2-d array"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            vertex_count: 512,
            d_identity: 16,
            d_expression: 8,
            d_pose: 6,
            seed: 0,
        }
    }

    #[test]
    fn build_has_expected_counts_and_mask_partition() {
        let m = build_model(&small_spec()).unwrap();
        assert_eq!(m.vertex_count(), 512 + TEETH_VERTICES);
        assert_eq!(m.topology.faces.len() - m.topology.teeth_face_start, TEETH_FACES);
        let total: usize = Region::ALL
            .iter()
            .map(|&r| m.topology.mask(r).iter().filter(|&&b| b).count())
            .sum();
        assert_eq!(total, m.vertex_count());
        assert!(m.topology.region_indices(Region::Lip).len() >= 4);
        assert!(!m.topology.region_indices(Region::Eye).is_empty());
    }

    #[test]
    fn same_spec_gives_bit_identical_model() {
        let a = build_model(&small_spec()).unwrap();
        let b = build_model(&small_spec()).unwrap();
        assert_eq!(a.template, b.template);
        assert_eq!(a.basis_identity, b.basis_identity);
        assert_eq!(a.basis_expression, b.basis_expression);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let mut s = small_spec();
        s.d_expression = 0;
        assert!(build_model(&s).is_err());
        let mut s2 = small_spec();
        s2.vertex_count = 0;
        assert!(build_model(&s2).is_err());
    }

    #[test]
    fn zero_params_give_template() {
        let m = build_model(&small_spec()).unwrap();
        let mesh = m.deform(&FaceModelParams::zeros(&m.spec)).unwrap();
        assert_eq!(mesh.vertices, m.template);
    }

    #[test]
    fn expression_is_linear_at_zero_pose() {
        let m = build_model(&small_spec()).unwrap();
        let mut p = FaceModelParams::zeros(&m.spec);
        p.expression[3] = 2.0;
        let mesh = m.deform(&p).unwrap();
        let v = m.vertex_count();
        let col = m.basis_expression.column(3);
        for i in 0..v {
            for ax in 0..3 {
                let expect = m.template[[i, ax]] + 2.0 * col[i * 3 + ax];
                assert!((mesh.vertices[[i, ax]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deform_matches_per_vertex_loop_oracle() {
        let m = build_model(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = FaceModelParams::zeros(&m.spec);
        for v in p.identity.iter_mut().chain(p.expression.iter_mut()) {
            *v = StandardNormal.sample(&mut rng);
            *v *= 0.01;
        }
        p.pose[0] = 0.2;
        let mesh = m.deform(&p).unwrap();

        // brute-force loop over every vertex
        let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), 0.2);
        for i in 0..m.vertex_count() {
            let mut pos = Vector3::new(m.template[[i, 0]], m.template[[i, 1]], m.template[[i, 2]]);
            for ax in 0..3 {
                let mut d = 0.0;
                for k in 0..m.spec.d_identity {
                    d += m.basis_identity[[i * 3 + ax, k]] * p.identity[k];
                }
                for k in 0..m.spec.d_expression {
                    d += m.basis_expression[[i * 3 + ax, k]] * p.expression[k];
                }
                pos[ax] += d;
            }
            let w = m.jaw_weights[i];
            let rotated = m.jaw_pivot + rot * (pos - m.jaw_pivot);
            let expect = pos * (1.0 - w) + rotated * w;
            for ax in 0..3 {
                assert!(
                    (mesh.vertices[[i, ax]] - expect[ax]).abs() < 1e-12,
                    "vertex {i} axis {ax}"
                );
            }
        }
    }

    #[test]
    fn linearity_in_coefficients_at_fixed_pose() {
        let m = build_model(&small_spec()).unwrap();
        for jaw in [0.0, 0.15] {
            let mut p1 = FaceModelParams::zeros(&m.spec);
            p1.expression[2] = 0.004;
            p1.identity[5] = 0.002;
            p1.pose[0] = jaw;
            let mut pa = p1.clone();
            pa.expression *= 3.0;
            pa.identity *= 3.0;
            let mut p0 = FaceModelParams::zeros(&m.spec);
            p0.pose[0] = jaw;

            let base = m.deform(&p0).unwrap().vertices;
            let d1 = m.deform(&p1).unwrap().vertices - &base;
            let d3 = m.deform(&pa).unwrap().vertices - &base;
            let err = (&d3 - &(&d1 * 3.0))
                .iter()
                .fold(0.0f64, |mx, v| mx.max(v.abs()));
            let scale = d3.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
            assert!(err <= 1e-6 * scale.max(1e-12), "jaw {jaw}: err {err}, scale {scale}");
        }
    }

    #[test]
    fn neutral_equals_deform_with_zero_expression_pose() {
        let m = build_model(&small_spec()).unwrap();
        let mut id = Array1::zeros(m.spec.d_identity);
        id[0] = 0.01;
        id[7] = -0.004;
        let n = m.neutral_mesh(&id).unwrap();
        let p = FaceModelParams {
            identity: id,
            expression: Array1::zeros(m.spec.d_expression),
            pose: Array1::zeros(m.spec.d_pose),
        };
        assert_eq!(n.vertices, m.deform(&p).unwrap().vertices);
        // identity = 0 → template
        let z = m.neutral_mesh(&Array1::zeros(m.spec.d_identity)).unwrap();
        assert_eq!(z.vertices, m.template);
    }

    #[test]
    fn teeth_blocks_stay_rigid_under_identity_and_jaw() {
        let m = build_model(&small_spec()).unwrap();
        let mut p = FaceModelParams::zeros(&m.spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in p.identity.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            *v *= 0.01;
        }
        for v in p.expression.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            *v *= 0.01;
        }
        p.pose[0] = 0.3;
        let mesh = m.deform(&p).unwrap();

        let ts = m.topology.teeth_vertex_start;
        let lo = m.topology.lower_teeth_start;
        let vtotal = m.vertex_count();
        let tmpl_upper = m.template.slice(ndarray::s![ts..lo, ..]).to_owned();
        let got_upper = mesh.vertices.slice(ndarray::s![ts..lo, ..]).to_owned();
        let tmpl_lower = m.template.slice(ndarray::s![lo..vtotal, ..]).to_owned();
        let got_lower = mesh.vertices.slice(ndarray::s![lo..vtotal, ..]).to_owned();
        assert!(rigid_fit_residual(&tmpl_upper, &got_upper) < 1e-6);
        assert!(rigid_fit_residual(&tmpl_lower, &got_lower) < 1e-6);
        // upper teeth are skull-fixed and untouched by blendshapes
        assert_eq!(tmpl_upper, got_upper);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = build_model(&small_spec()).unwrap();
        let p = FaceModelParams {
            identity: Array1::zeros(3),
            expression: Array1::zeros(m.spec.d_expression),
            pose: Array1::zeros(m.spec.d_pose),
        };
        assert!(m.deform(&p).is_err());
    }

    #[test]
    fn container_round_trip() {
        let m = build_model(&small_spec()).unwrap();
        let c = m.to_container();
        let m2 = FaceModel::from_container(&c, m.spec.d_pose, m.spec.seed).unwrap();
        assert_eq!(m.template, m2.template);
        assert_eq!(m.basis_identity, m2.basis_identity);
        assert_eq!(m.topology.as_ref(), m2.topology.as_ref());
        let mut p = FaceModelParams::zeros(&m.spec);
        p.pose[0] = 0.1;
        p.expression[1] = 0.02;
        assert_eq!(m.deform(&p).unwrap(), m2.deform(&p).unwrap());
    }
}

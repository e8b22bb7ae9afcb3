//! Visual speech feature extraction for perceptual supervision.
//!
//! The surrogate network is a small frozen 2D conv stack per frame plus a
//! temporal convolution, with tanh activations throughout so the feature map
//! is smooth in its input pixels. It stands in for a pretrained lip-reading
//! front-end: fixed, lip-sensitive, and differentiable w.r.t. pixels (the
//! only property the rendered-domain loss needs). An external extractor can
//! be plugged in through [`LipFeatureExtractor`]; ground-truth features are
//! precomputed once into a [`FeatureCache`] keyed by extractor identity.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrays::ArrayContainer;
use crate::error::{Error, Result};
use crate::nn::conv::{Conv2dValid, TemporalConvSame};
use crate::render::{GrayFrame, LIP_RESOLUTION};

#[derive(Debug, Clone, PartialEq)]
pub struct LipFeatureSequence {
    /// T×D_read.
    pub features: Array2<f64>,
    pub extractor_id: String,
}

impl LipFeatureSequence {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Frames in, features out. `supports_gradients` marks extractors usable in
/// the training loss (the surrogate); external subprocess adapters serve
/// evaluation and precomputation only.
pub trait LipFeatureExtractor {
    fn extract(&self, frames: &[GrayFrame]) -> Result<LipFeatureSequence>;
    fn extractor_id(&self) -> &str;
    fn supports_gradients(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipreaderConfig {
    pub d_read: usize,
    pub seed: u64,
}

impl Default for LipreaderConfig {
    fn default() -> Self {
        Self { d_read: 32, seed: 17 }
    }
}

/// Frozen desk-scale extractor.
#[derive(Debug, Clone)]
pub struct SurrogateLipReader {
    pub config: LipreaderConfig,
    conv1: Conv2dValid,
    conv2: Conv2dValid,
    conv3: Conv2dValid,
    temporal: TemporalConvSame,
    /// Subtracted from pooled conv features (keeps the temporal stage in
    /// its linear region) and from the final output respectively, so the
    /// embedding measures deviation from a reference face response rather
    /// than shared scene structure; without the centering the cosine
    /// between any two face crops saturates near 1. Initialized from the
    /// mid-gray response; pipelines re-calibrate on rendered face stimuli
    /// (the analogue of the input-normalization statistics a pretrained
    /// front-end ships with).
    baseline_pool: ndarray::Array1<f64>,
    baseline_out: ndarray::Array1<f64>,
    id: String,
}

/// Forward activations needed by the pixel-gradient backward pass.
pub struct SurrogateCache {
    a1: Vec<Array3<f64>>,
    a2: Vec<Array3<f64>>,
    a3: Vec<Array3<f64>>,
    /// tanh output of the temporal stage (the features themselves).
    out: Array2<f64>,
}

impl SurrogateLipReader {
    pub fn new(config: &LipreaderConfig) -> Result<Self> {
        if config.d_read == 0 {
            return Err(Error::config("d_read must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x11f);
        let conv1 = Conv2dValid::new(&mut rng, 1, 8, 5, 2);
        let conv2 = Conv2dValid::new(&mut rng, 8, 16, 5, 2);
        let conv3 = Conv2dValid::new(&mut rng, 16, config.d_read, 5, 2);
        let temporal = TemporalConvSame::new(&mut rng, config.d_read, config.d_read, 3);
        let mut h = Sha256::new();
        for c in [&conv1, &conv2, &conv3] {
            for v in c.weight.iter().chain(c.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        for v in temporal.weight.iter().chain(temporal.bias.iter()) {
            h.update(v.to_le_bytes());
        }
        let id = format!("surrogate-v2-{}", &crate::audio::hex_string(&h.finalize())[..16]);

        let mut reader = Self {
            config: config.clone(),
            conv1,
            conv2,
            conv3,
            temporal,
            baseline_pool: ndarray::Array1::zeros(config.d_read),
            baseline_out: ndarray::Array1::zeros(config.d_read),
            id,
        };
        let gray = Array2::from_elem((LIP_RESOLUTION, LIP_RESOLUTION), 0.5);
        reader.baseline_pool = reader.pooled_features(&[gray])?.row(0).to_owned();
        Ok(reader)
    }

    /// Per-frame pooled conv features before baseline subtraction and the
    /// temporal stage. Used for calibration.
    pub fn pooled_features(&self, frames: &[GrayFrame]) -> Result<Array2<f64>> {
        self.check_frames(frames)?;
        let d = self.config.d_read;
        let mut pooled = Array2::zeros((frames.len(), d));
        for (t, f) in frames.iter().enumerate() {
            let x = f
                .clone()
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality::<ndarray::Ix3>()
                .expect("1×H×W");
            let a3 = self
                .conv3
                .forward(&self.conv2.forward(&self.conv1.forward(&x).mapv(f64::tanh)).mapv(f64::tanh))
                .mapv(f64::tanh);
            let spatial = (a3.shape()[1] * a3.shape()[2]) as f64;
            for c in 0..d {
                pooled[[t, c]] = a3.index_axis(ndarray::Axis(0), c).sum() / spatial;
            }
        }
        Ok(pooled)
    }

    /// Re-center the feature space on the mean response of the given
    /// stimulus frames (pooled stage and output stage). Changes the
    /// extractor identity, so caches keyed by the old identity invalidate.
    pub fn calibrate(&mut self, stimuli: &[GrayFrame]) -> Result<()> {
        let pooled = self.pooled_features(stimuli)?;
        self.baseline_pool = pooled.mean_axis(ndarray::Axis(0)).expect("non-empty stimuli");
        self.baseline_out.fill(0.0);
        // per-frame output response with the new pooled centering (each
        // stimulus treated as a single-frame clip)
        let mut acc = ndarray::Array1::zeros(self.config.d_read);
        for frame in stimuli {
            let out = self.extract(std::slice::from_ref(frame))?;
            acc += &out.features.row(0);
        }
        self.baseline_out = acc / stimuli.len() as f64;

        let mut h = Sha256::new();
        for v in self.baseline_pool.iter().chain(self.baseline_out.iter()) {
            h.update(v.to_le_bytes());
        }
        let cal = &crate::audio::hex_string(&h.finalize())[..12];
        // strip any previous calibration tag before appending the new one
        if let Some(pos) = self.id.find("-cal") {
            self.id.truncate(pos);
        }
        self.id = format!("{}-cal{cal}", self.id);
        Ok(())
    }

    fn check_frames(&self, frames: &[GrayFrame]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::data("need at least one frame"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != [LIP_RESOLUTION, LIP_RESOLUTION] {
                return Err(Error::data(format!(
                    "frame {i} is {}×{}, expected {LIP_RESOLUTION}×{LIP_RESOLUTION}",
                    f.shape()[0],
                    f.shape()[1]
                )));
            }
        }
        Ok(())
    }

    /// Forward pass keeping activations for [`Self::backward_pixels`].
    pub fn extract_with_cache(&self, frames: &[GrayFrame]) -> Result<(LipFeatureSequence, SurrogateCache)> {
        self.check_frames(frames)?;
        let t_len = frames.len();
        let d = self.config.d_read;
        let mut a1v = Vec::with_capacity(t_len);
        let mut a2v = Vec::with_capacity(t_len);
        let mut a3v = Vec::with_capacity(t_len);
        let mut pooled = Array2::zeros((t_len, d));
        let per_frame = crate::par::map_slice(frames, |f| {
            let x = f
                .clone()
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality::<ndarray::Ix3>()
                .expect("1×H×W");
            let a1 = self.conv1.forward(&x).mapv(f64::tanh);
            let a2 = self.conv2.forward(&a1).mapv(f64::tanh);
            let a3 = self.conv3.forward(&a2).mapv(f64::tanh);
            (a1, a2, a3)
        });
        for (t, (a1, a2, a3)) in per_frame.into_iter().enumerate() {
            let spatial = (a3.shape()[1] * a3.shape()[2]) as f64;
            for c in 0..d {
                pooled[[t, c]] =
                    a3.index_axis(ndarray::Axis(0), c).sum() / spatial - self.baseline_pool[c];
            }
            a1v.push(a1);
            a2v.push(a2);
            a3v.push(a3);
        }
        let out = self.temporal.forward(&pooled).mapv(f64::tanh);
        let features = &out - &self.baseline_out;
        Ok((
            LipFeatureSequence {
                features,
                extractor_id: self.id.clone(),
            },
            SurrogateCache {
                a1: a1v,
                a2: a2v,
                a3: a3v,
                out,
            },
        ))
    }

    /// dL/d(pixels) per frame from dL/d(features).
    pub fn backward_pixels(&self, cache: &SurrogateCache, d_features: &Array2<f64>) -> Vec<GrayFrame> {
        let t_len = cache.a1.len();
        let d_pre_temporal = ndarray::Zip::from(d_features)
            .and(&cache.out)
            .map_collect(|&g, &y| g * (1.0 - y * y));
        let d_pooled = self.temporal.backward_input(&d_pre_temporal, t_len);
        crate::par::map_indexed(t_len, |t| {
            let a3 = &cache.a3[t];
            let (c3, oh, ow) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
            let spatial = (oh * ow) as f64;
            let mut d_a3 = Array3::zeros((c3, oh, ow));
            for c in 0..c3 {
                let g = d_pooled[[t, c]] / spatial;
                d_a3.index_axis_mut(ndarray::Axis(0), c).fill(g);
            }
            let d_pre3 = ndarray::Zip::from(&d_a3)
                .and(a3)
                .map_collect(|&g, &y| g * (1.0 - y * y));
            let a2 = &cache.a2[t];
            let d_a2 = self.conv3.backward_input(&d_pre3, (a2.shape()[0], a2.shape()[1], a2.shape()[2]));
            let d_pre2 = ndarray::Zip::from(&d_a2)
                .and(a2)
                .map_collect(|&g, &y| g * (1.0 - y * y));
            let a1 = &cache.a1[t];
            let d_a1 = self.conv2.backward_input(&d_pre2, (a1.shape()[0], a1.shape()[1], a1.shape()[2]));
            let d_pre1 = ndarray::Zip::from(&d_a1)
                .and(a1)
                .map_collect(|&g, &y| g * (1.0 - y * y));
            let d_x = self
                .conv1
                .backward_input(&d_pre1, (1, LIP_RESOLUTION, LIP_RESOLUTION));
            d_x.index_axis(ndarray::Axis(0), 0).to_owned()
        })
    }
}

impl LipFeatureExtractor for SurrogateLipReader {
    fn extract(&self, frames: &[GrayFrame]) -> Result<LipFeatureSequence> {
        Ok(self.extract_with_cache(frames)?.0)
    }

    fn extractor_id(&self) -> &str {
        &self.id
    }

    fn supports_gradients(&self) -> bool {
        true
    }
}

/// Subprocess adapter for an external extractor. Protocol: stdin gets a
/// `T H W\n` header followed by T·H·W little-endian f64 pixels; stdout must
/// answer `T D\n` followed by T·D little-endian f64 features.
#[derive(Debug, Clone)]
pub struct CommandLipReader {
    pub program: String,
    pub args: Vec<String>,
    pub id: String,
}

impl LipFeatureExtractor for CommandLipReader {
    fn extract(&self, frames: &[GrayFrame]) -> Result<LipFeatureSequence> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::data(format!("cannot spawn `{}`: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
            writeln!(stdin, "{} {} {}", frames.len(), h, w)?;
            for f in frames {
                for v in f.iter() {
                    stdin.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::data(format!(
                "extractor command failed ({}): {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        let mut reader = std::io::BufReader::new(&out.stdout[..]);
        let mut header = String::new();
        std::io::BufRead::read_line(&mut reader, &mut header)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::data("bad extractor header")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::data("extractor header must be `T D`"));
        }
        let (t, d) = (dims[0], dims[1]);
        let mut buf = vec![0u8; t * d * 8];
        reader.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(LipFeatureSequence {
            features: Array2::from_shape_vec((t, d), values)
                .map_err(|e| Error::data(format!("extractor payload: {e}")))?,
            extractor_id: self.id.clone(),
        })
    }

    fn extractor_id(&self) -> &str {
        &self.id
    }
}

/// Cosine similarity with an exact fast path for identical inputs (the
/// self-similarity diagonal must be exactly 1).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean over frames of per-frame cosine similarity, truncating to the
/// shorter sequence.
pub fn sequence_cosine(a: &LipFeatureSequence, b: &LipFeatureSequence) -> f64 {
    let t = a.frames().min(b.frames());
    assert!(t > 0);
    let mut acc = 0.0;
    for i in 0..t {
        acc += cosine_similarity(
            a.features.row(i).as_slice().unwrap(),
            b.features.row(i).as_slice().unwrap(),
        );
    }
    acc / t as f64
}

/// Pairwise mean per-frame cosine similarity between two sequence sets.
pub fn similarity_matrix(
    set_a: &[LipFeatureSequence],
    set_b: &[LipFeatureSequence],
) -> Result<Array2<f64>> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::data("similarity matrix needs non-empty sets"));
    }
    let rows = crate::par::map_indexed(set_a.len(), |i| {
        (0..set_b.len())
            .map(|j| sequence_cosine(&set_a[i], &set_b[j]))
            .collect::<Vec<f64>>()
    });
    let mut m = Array2::zeros((set_a.len(), set_b.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Mean diagonal vs mean off-diagonal of a square similarity matrix.
pub fn diagonal_contrast(m: &Array2<f64>) -> (f64, f64) {
    let n = m.shape()[0].min(m.shape()[1]);
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut off_n = 0;
    for i in 0..m.shape()[0] {
        for j in 0..m.shape()[1] {
            if i == j && i < n {
                diag += m[[i, j]];
            } else {
                off += m[[i, j]];
                off_n += 1;
            }
        }
    }
    (diag / n as f64, off / off_n.max(1) as f64)
}

/// On-disk cache of ground-truth lip features, one container per sequence.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(LipFeatureSequence),
    Miss,
    /// Entry exists but was produced by a different extractor.
    Stale { found: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub computed: usize,
    pub reused: usize,
    pub invalidated: usize,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, sequence_id: &str) -> PathBuf {
        self.dir.join(format!("{sequence_id}.lpsa"))
    }

    pub fn lookup(&self, sequence_id: &str, extractor_id: &str) -> Result<CacheLookup> {
        let p = self.path(sequence_id);
        if !p.exists() {
            return Ok(CacheLookup::Miss);
        }
        let c = ArrayContainer::load(&p)?;
        let found = c.str_entry("extractor_id")?.to_string();
        if found != extractor_id {
            return Ok(CacheLookup::Stale { found });
        }
        Ok(CacheLookup::Hit(LipFeatureSequence {
            features: crate::face::to_2d(c.f64_entry("features")?)?,
            extractor_id: found,
        }))
    }

    /// Atomic per-entry write (temp file + rename).
    pub fn store(&self, sequence_id: &str, features: &LipFeatureSequence) -> Result<()> {
        let mut c = ArrayContainer::new();
        c.insert_f64("features", features.features.clone());
        c.insert_str("extractor_id", &features.extractor_id);
        c.save(&self.path(sequence_id))
    }
}

/// Ensure every sequence has a cached GT feature entry for this extractor.
/// `frames_for` renders or loads the ground-truth lip frames of a sequence.
pub fn precompute_gt<F>(
    sequence_ids: &[String],
    extractor: &dyn LipFeatureExtractor,
    cache: &FeatureCache,
    mut frames_for: F,
) -> Result<CacheReport>
where
    F: FnMut(&str) -> Result<Vec<GrayFrame>>,
{
    let mut report = CacheReport::default();
    for id in sequence_ids {
        match cache.lookup(id, extractor.extractor_id())? {
            CacheLookup::Hit(_) => report.reused += 1,
            lookup => {
                if let CacheLookup::Stale { .. } = lookup {
                    report.invalidated += 1;
                }
                let frames = frames_for(id)?;
                let features = extractor.extract(&frames)?;
                cache.store(id, &features)?;
                report.computed += 1;
            }
        }
    }
    Ok(report)
}

//! Evaluation metrics and report assembly.
//!
//! Lip vertex error (max per-frame L2 over lip vertices, averaged over
//! frames, reported in millimeters), PSNR against a unit peak, SSIM with the
//! standard 11×11 Gaussian window, an optional external perceptual backend,
//! and mean feature cosine. Reports aggregate per-sequence scores by
//! arithmetic mean.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::RenderedImage;

/// PSNR reported for identical images (instead of +∞).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Meters → millimeters.
pub const DEFAULT_UNIT_SCALE: f64 = 1000.0;

/// Max per-frame L2 distance over lip vertices, averaged across frames.
/// `unit_scale` converts model units to millimeters.
pub fn lve(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    lip_mask: &[bool],
    unit_scale: f64,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::data(format!(
            "lve shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.shape()[1] != lip_mask.len() {
        return Err(Error::data("lip mask does not match vertex count"));
    }
    let lips: Vec<usize> = lip_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if lips.is_empty() {
        return Err(Error::data("empty lip mask"));
    }
    let t_len = pred.shape()[0];
    let mean_of_max = (0..t_len)
        .map(|t| {
            lips.iter()
                .map(|&i| {
                    let dx = pred[[t, i, 0]] - gt[[t, i, 0]];
                    let dy = pred[[t, i, 1]] - gt[[t, i, 1]];
                    let dz = pred[[t, i, 2]] - gt[[t, i, 2]];
                    (dx * dx + dy * dy + dz * dz).sqrt()
                })
                .fold(0.0f64, f64::max)
        })
        .sum::<f64>()
        / t_len as f64;
    Ok(mean_of_max * unit_scale)
}

/// PSNR with peak 1.0 over all pixels and channels, capped for identical
/// inputs.
pub fn psnr(pred: &[RenderedImage], gt: &[RenderedImage]) -> Result<f64> {
    check_frames(pred, gt)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        se += (&p.pixels - &g.pixels).mapv(|d| d * d).sum();
        n += p.pixels.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (1.0 / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

fn check_frames(pred: &[RenderedImage], gt: &[RenderedImage]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::data(format!(
            "frame count mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.pixels.shape() != g.pixels.shape() {
            return Err(Error::data("frame resolution mismatch"));
        }
    }
    Ok(())
}

/// Standard SSIM constants for a unit dynamic range.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut rows = Array2::zeros((h, wv));
    for i in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (d, &kv) in k.iter().enumerate() {
                acc += kv * img[[i, j + d]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((hv, wv));
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (d, &kv) in k.iter().enumerate() {
                acc += kv * rows[[i + d, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean SSIM of two single-channel images (valid windows only).
pub fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::data("ssim shape mismatch"));
    }
    if a.shape()[0] < SSIM_WINDOW || a.shape()[1] < SSIM_WINDOW {
        return Err(Error::data(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images"
        )));
    }
    let mu_a = filter_valid(a);
    let mu_b = filter_valid(b);
    let aa = filter_valid(&(a * a));
    let bb = filter_valid(&(b * b));
    let ab = filter_valid(&(a * b));
    let mut acc = 0.0;
    for i in 0..mu_a.shape()[0] {
        for j in 0..mu_a.shape()[1] {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cab = ab[[i, j]] - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            acc += s;
        }
    }
    Ok(acc / (mu_a.len() as f64))
}

/// Mean SSIM over frames and RGB channels.
pub fn ssim(pred: &[RenderedImage], gt: &[RenderedImage]) -> Result<f64> {
    check_frames(pred, gt)?;
    let mut acc = 0.0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        for c in 0..3 {
            let pa = p.pixels.index_axis(ndarray::Axis(2), c).to_owned();
            let ga = g.pixels.index_axis(ndarray::Axis(2), c).to_owned();
            acc += ssim_channel(&pa, &ga)?;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// External perceptual-similarity backend (LPIPS-style). Absent backend →
/// the metric is omitted from reports, never zero-filled.
pub trait PerceptualBackend {
    fn distance(&self, a: &RenderedImage, b: &RenderedImage) -> Result<f64>;
    fn name(&self) -> &str;
}

/// Subprocess adapter: stdin `H W\n` + two H·W·3 f64 blocks, stdout one f64
/// distance in text.
#[derive(Debug, Clone)]
pub struct CommandPerceptual {
    pub program: String,
    pub args: Vec<String>,
}

impl PerceptualBackend for CommandPerceptual {
    fn distance(&self, a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
        use std::io::Write;
        let mut child = std::process::Command::new(&self.program)
            .args(&self.args)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::data(format!("cannot spawn `{}`: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            writeln!(stdin, "{} {}", a.height(), a.width())?;
            for img in [a, b] {
                for v in img.pixels.iter() {
                    stdin.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::data(format!(
                "perceptual backend failed: {}",
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        String::from_utf8_lossy(&out.stdout)
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::data(format!("perceptual backend output: {e}")))
    }

    fn name(&self) -> &str {
        &self.program
    }
}

/// Image metrics over paired frame sequences.
pub fn image_metrics(
    pred: &[RenderedImage],
    gt: &[RenderedImage],
    lpips: Option<&dyn PerceptualBackend>,
) -> Result<(f64, f64, Option<f64>)> {
    let p = psnr(pred, gt)?;
    let s = ssim(pred, gt)?;
    let l = match lpips {
        None => None,
        Some(backend) => {
            let mut acc = 0.0;
            for (a, b) in pred.iter().zip(gt) {
                acc += backend.distance(a, b)?;
            }
            Some(acc / pred.len() as f64)
        }
    };
    Ok((p, s, l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sequence_id: String,
    pub lve_mm: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub feature_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalRow,
}

impl EvalReport {
    /// Aggregate = arithmetic mean of per-sequence scores.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("empty evaluation report"));
        }
        let n = rows.len() as f64;
        let lpips_values: Vec<f64> = rows.iter().filter_map(|r| r.lpips).collect();
        let aggregate = EvalRow {
            sequence_id: "mean".into(),
            lve_mm: rows.iter().map(|r| r.lve_mm).sum::<f64>() / n,
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            lpips: if lpips_values.len() == rows.len() {
                Some(lpips_values.iter().sum::<f64>() / n)
            } else {
                None
            },
            feature_cosine: rows.iter().map(|r| r.feature_cosine).sum::<f64>() / n,
        };
        Ok(Self { rows, aggregate })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sequence\tlve_mm\tpsnr_db\tssim\tlpips\tfeature_cosine\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let lp = r
                .lpips
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\t{:.6}\t{}\t{:.6}\n",
                r.sequence_id, r.lve_mm, r.psnr_db, r.ssim, lp, r.feature_cosine
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.tsv"), self.to_tsv())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("report encode: {e}")))?;
        std::fs::write(dir.join("report.json"), json)?;
        Ok(())
    }
}

/// Write a similarity matrix as a heatmap PNG (dark-blue → white → red)
/// plus the raw values as JSON.
pub fn save_confusion(matrix: &Array2<f64>, dir: &Path, cell: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let lo = matrix.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = matrix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let cell = cell.max(1);
    let mut img = image::RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for i in 0..rows {
        for j in 0..cols {
            let t = (matrix[[i, j]] - lo) / span;
            let rgb = if t < 0.5 {
                let u = t * 2.0;
                [
                    (40.0 + 215.0 * u) as u8,
                    (60.0 + 195.0 * u) as u8,
                    (150.0 + 105.0 * u) as u8,
                ]
            } else {
                let u = (t - 0.5) * 2.0;
                [255, (255.0 - 180.0 * u) as u8, (255.0 - 200.0 * u) as u8]
            };
            for di in 0..cell {
                for dj in 0..cell {
                    img.put_pixel(
                        (j * cell + dj) as u32,
                        (i * cell + di) as u32,
                        image::Rgb(rgb),
                    );
                }
            }
        }
    }
    img.save(dir.join("confusion.png"))
        .map_err(|e| Error::data(format!("cannot write heatmap: {e}")))?;
    let values: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..cols).map(|j| matrix[[i, j]]).collect())
        .collect();
    let json = serde_json::to_string_pretty(&values)
        .map_err(|e| Error::data(format!("matrix encode: {e}")))?;
    std::fs::write(dir.join("confusion.json"), json)?;
    Ok(())
}

//! Audio (and text-to-speech) encoding into 30 FPS feature sequences.
//!
//! The encoder mirrors the frozen/trainable split of pretrained speech
//! stacks: a frozen temporal-convolution feature extractor runs over the raw
//! waveform, its outputs are linearly interpolated in time to the video
//! frame rate, and a trainable transformer encoder contextualizes the
//! interpolated frames. Text input goes through a [`WaveformProvider`]
//! first and then down the identical audio path.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::conv::Conv1dValid;
use crate::nn::{AttnBias, EncoderLayer, Layer, Linear, Mode, Param};

pub const VIDEO_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::data("empty waveform"));
        }
        if self.sample_rate == 0 {
            return Err(Error::data("waveform sample rate must be positive"));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::numerical("waveform contains non-finite samples"));
        }
        Ok(())
    }
}

/// T×D cross-modal input embeddings at the video frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Array2<f64>,
    pub fps: f64,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    pub d_feat: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            d_feat: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            seed: 13,
        }
    }
}

/// Speech encoder: frozen conv stack + trainable transformer encoder.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub config: EncoderConfig,
    tcn: Vec<Conv1dValid>,
    proj: Linear,
    layers: Vec<EncoderLayer>,
}

const D_CONV: usize = 64;

impl AudioEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.d_feat == 0 || config.n_layers == 0 {
            return Err(Error::config("encoder dims must be positive"));
        }
        if config.d_feat % config.n_heads != 0 {
            return Err(Error::config("encoder d_feat must divide into heads"));
        }
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xfeed);
        let tcn = vec![
            Conv1dValid::new(&mut frozen_rng, 1, 32, 10, 5),
            Conv1dValid::new(&mut frozen_rng, 32, 48, 8, 4),
            Conv1dValid::new(&mut frozen_rng, 48, D_CONV, 8, 4),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let proj = Linear::new(&mut rng, D_CONV, config.d_feat);
        let layers = (0..config.n_layers)
            .map(|_| {
                EncoderLayer::new(
                    &mut rng,
                    config.d_feat,
                    config.n_heads,
                    config.d_ff,
                    config.dropout,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tcn,
            proj,
            layers,
        })
    }

    /// Frozen low-level features: (n_frames × D_CONV), before interpolation.
    pub fn conv_features(&self, wave: &Waveform) -> Result<Array2<f64>> {
        wave.validate()?;
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::data(format!(
                "waveform sample rate {} does not match encoder {}",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        let mut x = Array2::from_shape_vec((1, wave.samples.len()), wave.samples.clone())
            .expect("shape from vec");
        for conv in &self.tcn {
            if conv.out_len(x.shape()[1]) == 0 {
                return Err(Error::data(format!(
                    "waveform too short for the feature stack ({} samples)",
                    wave.samples.len()
                )));
            }
            x = conv.forward(&x).mapv(|v| v.max(0.0));
        }
        Ok(x.t().to_owned())
    }

    /// Frame count for a waveform when no paired target is given.
    pub fn default_frame_count(&self, wave: &Waveform) -> usize {
        (wave.duration() * VIDEO_FPS).round().max(1.0) as usize
    }

    /// Trainable half: positional encoding + transformer encoder layers.
    pub fn contextualize(&mut self, interp: &Array2<f64>, mode: &mut Mode) -> Array2<f64> {
        let mut x = self.proj.forward(interp);
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &crate::nn::sinusoidal_row(t, self.config.d_feat);
        }
        for layer in &mut self.layers {
            x = layer.forward(&x, &AttnBias::None, mode);
        }
        x
    }

    /// Backward through the trainable half (input gradients are discarded:
    /// upstream is the frozen stack and raw data).
    pub fn backward(&mut self, d_out: &Array2<f64>) {
        let mut d = d_out.clone();
        for layer in self.layers.iter_mut().rev() {
            d = layer.backward(&d);
        }
        let _ = self.proj.backward(&d);
    }

    pub fn encode_audio(
        &mut self,
        wave: &Waveform,
        target_frames: Option<usize>,
        mode: &mut Mode,
    ) -> Result<FeatureSequence> {
        let conv = self.conv_features(wave)?;
        let t = target_frames.unwrap_or_else(|| self.default_frame_count(wave));
        let interp = interpolate_rows(&conv, t);
        let features = self.contextualize(&interp, mode);
        Ok(FeatureSequence {
            features,
            fps: VIDEO_FPS,
        })
    }

    /// Same path starting from cached frozen features (they never change for
    /// a fixed waveform, so training loops precompute them per sample).
    pub fn encode_from_conv(
        &mut self,
        conv: &Array2<f64>,
        target_frames: usize,
        mode: &mut Mode,
    ) -> FeatureSequence {
        let interp = interpolate_rows(conv, target_frames);
        FeatureSequence {
            features: self.contextualize(&interp, mode),
            fps: VIDEO_FPS,
        }
    }

    pub fn encode_text(
        &mut self,
        text: &str,
        tts: &dyn WaveformProvider,
        target_frames: Option<usize>,
        mode: &mut Mode,
    ) -> Result<FeatureSequence> {
        let wave = tts
            .synthesize(text)
            .map_err(|e| Error::data(format!("waveform provider `{}`: {e}", tts.name())))?;
        wave.validate()
            .map_err(|e| Error::data(format!("waveform provider `{}`: {e}", tts.name())))?;
        self.encode_audio(&wave, target_frames, mode)
    }

    /// Digest of the frozen conv weights; must be invariant across training.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for conv in &self.tcn {
            for v in conv.weight.iter().chain(conv.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

impl Layer for AudioEncoder {
    /// Only the trainable half is visited; the frozen stack is invisible to
    /// optimizers and checkpoints restore it from the seed.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.proj.visit_params(&format!("{prefix}.proj"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Linear time interpolation of rows. Row positions are normalized to
/// [0, 1]: exact at coincident source/target positions, linear between.
pub fn interpolate_rows(src: &Array2<f64>, t_out: usize) -> Array2<f64> {
    let n = src.shape()[0];
    let d = src.shape()[1];
    assert!(n > 0 && t_out > 0);
    let mut out = Array2::zeros((t_out, d));
    for j in 0..t_out {
        let u = if t_out == 1 {
            0.0
        } else {
            j as f64 / (t_out - 1) as f64
        };
        let pos = u * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = pos - lo as f64;
        for k in 0..d {
            out[[j, k]] = src[[lo, k]] * (1.0 - w) + src[[hi, k]] * w;
        }
    }
    out
}

/// Text → waveform adapter contract: text in, PCM samples + rate out.
pub trait WaveformProvider {
    fn synthesize(&self, text: &str) -> Result<Waveform>;
    fn name(&self) -> &str;
}

/// Deterministic offline stand-in: band-limited noise with a speech-like
/// envelope, seeded from the text, duration proportional to its length.
#[derive(Debug, Clone)]
pub struct StubTts {
    pub sample_rate: u32,
    /// Override the text-length-derived duration.
    pub fixed_duration: Option<f64>,
}

impl StubTts {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            fixed_duration: None,
        }
    }

    pub fn with_fixed_duration(sample_rate: u32, seconds: f64) -> Self {
        Self {
            sample_rate,
            fixed_duration: Some(seconds),
        }
    }
}

impl WaveformProvider for StubTts {
    fn synthesize(&self, text: &str) -> Result<Waveform> {
        let seconds = self
            .fixed_duration
            .unwrap_or_else(|| (0.08 * text.chars().count() as f64).max(0.4));
        let seed = u64::from_le_bytes(
            Sha256::digest(text.as_bytes())[..8].try_into().unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * self.sample_rate as f64).round() as usize;
        let wave = crate::data::modulated_noise(&mut rng, n, self.sample_rate, 3.0, None);
        Ok(Waveform {
            samples: wave,
            sample_rate: self.sample_rate,
        })
    }

    fn name(&self) -> &str {
        "stub-tts"
    }
}

/// Subprocess adapter: writes the text to the child's stdin and reads a WAV
/// stream from its stdout.
#[derive(Debug, Clone)]
pub struct CommandTts {
    pub program: String,
    pub args: Vec<String>,
}

impl WaveformProvider for CommandTts {
    fn synthesize(&self, text: &str) -> Result<Waveform> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::data(format!("cannot spawn `{}`: {e}", self.program)))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(text.as_bytes())?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::data(format!(
                "tts command failed ({}): {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        read_wav_bytes(&out.stdout)
    }

    fn name(&self) -> &str {
        &self.program
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::data(format!("cannot read wav `{}`: {e}", path.display())))?;
    decode_wav(reader)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes))
        .map_err(|e| Error::data(format!("cannot parse wav stream: {e}")))?;
    decode_wav(reader)
}

fn decode_wav<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let mut mono = Vec::new();
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let max = (1i64 << (spec.bits_per_sample - 1)) as f64;
            let samples: Vec<i32> = reader
                .samples::<i32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(format!("wav decode: {e}")))?;
            for frame in samples.chunks(channels) {
                mono.push(frame.iter().map(|&s| s as f64 / max).sum::<f64>() / channels as f64);
            }
        }
        hound::SampleFormat::Float => {
            let samples: Vec<f32> = reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(format!("wav decode: {e}")))?;
            for frame in samples.chunks(channels) {
                mono.push(frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64);
            }
        }
    }
    Ok(Waveform {
        samples: mono,
        sample_rate: spec.sample_rate,
    })
}

/// Write mono PCM16.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::data(format!("cannot write wav `{}`: {e}", path.display())))?;
    for &s in &wave.samples {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(|e| Error::data(format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::data(format!("wav finalize: {e}")))?;
    Ok(())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// RMS envelope of a waveform at the video frame rate, one value per frame.
pub fn rms_envelope(wave: &Waveform, frames: usize) -> Array1<f64> {
    let per_frame = wave.samples.len() as f64 / frames as f64;
    Array1::from_shape_fn(frames, |t| {
        let lo = (t as f64 * per_frame) as usize;
        let hi = (((t + 1) as f64 * per_frame) as usize).min(wave.samples.len());
        if hi <= lo {
            return 0.0;
        }
        let sum: f64 = wave.samples[lo..hi].iter().map(|s| s * s).sum();
        (sum / (hi - lo) as f64).sqrt()
    })
}

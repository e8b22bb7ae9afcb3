//! Three-stage curriculum training.
//!
//! Stage 1 pretrains on the clean domain with the plain vertex loss; stage 2
//! adapts to the noisy domain with re-weighted vertices; stage 3 adds the
//! rendered-domain lip-reading loss, rendering predicted lip crops on every
//! accumulation micro-step and pulling its gradient through the rasterizer.
//! Teacher forcing throughout, constant-rate Adam, sum-based losses scaled
//! by 1/effective_batch at the optimizer step.
//!
//! Determinism: data order derives from (seed, stage, epoch), dropout from
//! (seed, stage, micro-step), so a run resumed from any epoch checkpoint
//! reproduces the uninterrupted trajectory bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrays::ArrayContainer;
use crate::audio::AudioEncoder;
use crate::avatar::GaussianCloud;
use crate::config::StageConfig;
use crate::data::Sample;
use crate::decoder::{AnimationDecoder, OffsetSequence};
use crate::error::{Error, Result};
use crate::face::FaceTopology;
use crate::lipreader::{CacheLookup, FeatureCache, LipFeatureExtractor, SurrogateLipReader};
use crate::losses::{
    lipread_loss_grad_features, lipread_loss_features, total_loss, vertex_loss, vertex_loss_grad,
    CosineAggregation, LossBreakdown, StageId, VertexWeightPolicy,
};
use crate::nn::{Adam, Layer, Mode};

/// Line-oriented metrics log: one row per optimizer step.
pub struct MetricsLog {
    file: std::fs::File,
    pub path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "step\tstage\tvert\tread\ttotal")?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn open_append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, step: usize, stage: StageId, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.file,
            "{step}\t{}\t{:.12e}\t{:.12e}\t{:.12e}",
            stage.number(),
            b.vert,
            b.read,
            b.total
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    /// Epochs completed within the stage.
    pub epoch: usize,
    /// Optimizer steps so far (cumulative across stages).
    pub global_step: usize,
    /// Micro-steps so far (drives dropout streams).
    pub micro_step: u64,
    pub adam_t: u64,
    pub seed: u64,
    pub extractor_id: String,
    pub frozen_encoder_digest: String,
}

/// Serialize trainable parameters + Adam moments + metadata.
pub fn save_checkpoint(
    path: &Path,
    encoder: &mut AudioEncoder,
    decoder: &mut AnimationDecoder,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut c = ArrayContainer::new();
    let json = serde_json::to_string(meta).map_err(|e| Error::data(format!("meta encode: {e}")))?;
    c.insert_str("meta", &json);
    let mut dump = |name: String, p: &mut crate::nn::Param| {
        c.insert_f64(&format!("param/{name}"), p.value.clone());
        c.insert_f64(&format!("m/{name}"), p.m.clone());
        c.insert_f64(&format!("v/{name}"), p.v.clone());
    };
    encoder.visit_params("encoder", &mut dump);
    decoder.visit_params("decoder", &mut dump);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    c.save(path)
}

/// Restore parameters into freshly constructed models.
pub fn load_checkpoint(
    path: &Path,
    encoder: &mut AudioEncoder,
    decoder: &mut AnimationDecoder,
) -> Result<CheckpointMeta> {
    let c = ArrayContainer::load(path)
        .map_err(|e| Error::data(format!("cannot load checkpoint `{}`: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(c.str_entry("meta")?)
        .map_err(|e| Error::data(format!("checkpoint meta decode: {e}")))?;
    let mut missing = Vec::new();
    {
        let mut restore = |name: String, p: &mut crate::nn::Param| {
            match (
                c.f64_entry(&format!("param/{name}")),
                c.f64_entry(&format!("m/{name}")),
                c.f64_entry(&format!("v/{name}")),
            ) {
                (Ok(value), Ok(m), Ok(v)) => {
                    if value.shape() != p.value.shape() {
                        missing.push(format!("{name} (shape mismatch)"));
                        return;
                    }
                    p.value = crate::face::to_2d(value).unwrap();
                    p.m = crate::face::to_2d(m).unwrap();
                    p.v = crate::face::to_2d(v).unwrap();
                    p.grad.fill(0.0);
                }
                _ => missing.push(name),
            }
        };
        encoder.visit_params("encoder", &mut restore);
        decoder.visit_params("decoder", &mut restore);
    }
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "checkpoint `{}` incompatible with model config: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(meta)
}

fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

fn shuffled_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Mutable training state threaded through stages and resumes.
pub struct Trainer<'a> {
    pub encoder: &'a mut AudioEncoder,
    pub decoder: &'a mut AnimationDecoder,
    pub reader: &'a SurrogateLipReader,
    pub cloud: &'a GaussianCloud,
    pub topology: Arc<FaceTopology>,
    pub adam: Adam,
    pub seed: u64,
    pub global_step: usize,
    pub micro_step: u64,
    pub cosine_aggregation: CosineAggregation,
}

pub struct StageRun<'a> {
    pub stage: StageId,
    pub config: &'a StageConfig,
    pub train_samples: Vec<&'a Sample>,
    /// GT lip features (stage 3 reads them exclusively from here).
    pub cache: Option<&'a FeatureCache>,
    pub log: &'a mut MetricsLog,
    pub checkpoint_dir: &'a Path,
    /// Epochs already completed (resume point).
    pub start_epoch: usize,
}

impl Trainer<'_> {
    fn dump_diagnostic(&mut self, dir: &Path, meta: &CheckpointMeta) -> PathBuf {
        let path = dir.join(format!("nan_dump_step{:06}.lpsa", self.global_step));
        let _ = save_checkpoint(&path, self.encoder, self.decoder, meta);
        path
    }

    fn meta(&self, stage: StageId, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            stage: stage.number(),
            epoch,
            global_step: self.global_step,
            micro_step: self.micro_step,
            adam_t: self.adam.t,
            seed: self.seed,
            extractor_id: self.reader.extractor_id().to_string(),
            frozen_encoder_digest: self.encoder.frozen_digest(),
        }
    }

    /// Execute one curriculum stage. Checkpoints land per epoch under
    /// `checkpoint_dir` as `stage{N}_epoch{E:04}.lpsa`.
    pub fn run_stage(&mut self, run: StageRun) -> Result<()> {
        run.config.validate()?;
        if run.train_samples.is_empty() {
            return Err(Error::data("stage has no training samples"));
        }
        let stage = run.stage;
        let lambda = if stage == StageId::Stage3 {
            run.config.lambda_read
        } else {
            0.0
        };
        if stage == StageId::Stage3 && lambda > 0.0 && run.cache.is_none() {
            return Err(Error::config(
                "stage 3 needs a precomputed GT lip-feature cache",
            ));
        }
        let policy = VertexWeightPolicy::for_stage(stage, &self.topology);
        let frozen_before = self.encoder.frozen_digest();

        // Frozen conv features never change for a fixed waveform.
        let conv_cache: Vec<Array2<f64>> = run
            .train_samples
            .iter()
            .map(|s| self.encoder.conv_features(&s.waveform))
            .collect::<Result<_>>()?;

        let effective = run.config.effective_batch();
        let mut steps_this_run = 0usize;

        'epochs: for epoch in run.start_epoch..run.config.epochs {
            let mut order_rng = stream(
                self.seed,
                &format!("order-stage{}", stage.number()),
                epoch as u64,
                0,
            );
            let order = shuffled_order(run.train_samples.len(), &mut order_rng);

            for group in order.chunks(effective) {
                if let Some(max) = run.config.max_steps {
                    if steps_this_run >= max {
                        break 'epochs;
                    }
                }

                let mut vert_sum = 0.0;
                let mut read_sum = 0.0;
                for &idx in group {
                    let sample = run.train_samples[idx];
                    let (vert, read) = self.micro_step(
                        stage,
                        sample,
                        &conv_cache[idx],
                        &policy,
                        lambda,
                        run.cache,
                    )?;
                    vert_sum += vert;
                    read_sum += read.unwrap_or(0.0);
                }

                let scale = 1.0 / group.len() as f64;
                self.adam.begin_step();
                let adam = &self.adam;
                self.encoder
                    .visit_params("encoder", &mut |_, p| adam.update(p, scale));
                self.decoder
                    .visit_params("decoder", &mut |_, p| adam.update(p, scale));

                let read_avg = if stage == StageId::Stage3 && lambda > 0.0 {
                    Some(read_sum * scale)
                } else {
                    None
                };
                let breakdown = total_loss(stage, vert_sum * scale, read_avg, lambda)?;
                if !breakdown.total.is_finite() {
                    let meta = self.meta(stage, epoch);
                    let dump = self.dump_diagnostic(run.checkpoint_dir, &meta);
                    return Err(Error::numerical(format!(
                        "non-finite loss at step {} (stage {}); state dumped to `{}`",
                        self.global_step,
                        stage.number(),
                        dump.display()
                    )));
                }
                self.global_step += 1;
                steps_this_run += 1;
                run.log.append(self.global_step, stage, &breakdown)?;
            }

            let meta = self.meta(stage, epoch + 1);
            let path = run
                .checkpoint_dir
                .join(format!("stage{}_epoch{:04}.lpsa", stage.number(), epoch + 1));
            save_checkpoint(&path, self.encoder, self.decoder, &meta)?;
        }

        // frozen halves must be bit-identical across the stage
        if self.encoder.frozen_digest() != frozen_before {
            return Err(Error::numerical("frozen encoder stack changed during training"));
        }
        Ok(())
    }

    /// One teacher-forced sample: forward, losses, backward. Returns the
    /// (vertex, lip-reading) loss values; gradients accumulate in params.
    fn micro_step(
        &mut self,
        stage: StageId,
        sample: &Sample,
        conv_feats: &Array2<f64>,
        policy: &VertexWeightPolicy,
        lambda: f64,
        cache: Option<&FeatureCache>,
    ) -> Result<(f64, Option<f64>)> {
        let frames = sample.gt_mesh.frames();
        let mut drop_rng = stream(
            self.seed,
            &format!("dropout-stage{}", stage.number()),
            self.micro_step,
            0,
        );
        self.micro_step += 1;
        let mut mode = Mode::Train(&mut drop_rng);

        let features = self.encoder.encode_from_conv(conv_feats, frames, &mut mode);
        let gt_offsets = OffsetSequence::from_mesh_sequence(&sample.gt_mesh, &sample.neutral);
        let pred = self
            .decoder
            .teacher_forced_forward(&gt_offsets, &sample.neutral, &features, &mut mode)?;

        let pred3 = pred.to_array3();
        let gt3 = gt_offsets.to_array3();
        let vert = vertex_loss(&pred3, &gt3, policy)?;
        let vgrad = vertex_loss_grad(&pred3, &gt3, policy)?;
        let v3 = pred.flat.shape()[1];
        let mut d_offsets = Array2::from_shape_fn((frames, v3), |(t, c)| vgrad[[t, c / 3, c % 3]]);

        let mut read_value = None;
        if stage == StageId::Stage3 && lambda > 0.0 {
            let cache = cache.expect("checked in run_stage");
            let gt_features = match cache.lookup(&sample.sequence_id, self.reader.extractor_id())? {
                CacheLookup::Hit(f) => f,
                CacheLookup::Miss => {
                    return Err(Error::data(format!(
                        "no cached GT lip features for `{}`; run precompute first",
                        sample.sequence_id
                    )))
                }
                CacheLookup::Stale { found } => {
                    return Err(Error::data(format!(
                        "stale GT lip features for `{}` (extractor `{found}`)",
                        sample.sequence_id
                    )))
                }
            };
            let pred_seq =
                pred.to_mesh_sequence(&sample.neutral, self.topology.clone(), sample.gt_mesh.fps);
            let gray = crate::render::render_gray_sequence(&pred_seq, self.cloud, &sample.camera)?;
            let (pred_feats, reader_cache) = self.reader.extract_with_cache(&gray)?;
            let read = lipread_loss_features(&pred_feats, &gt_features, self.cosine_aggregation)?;
            read_value = Some(read);

            let d_feat = lipread_loss_grad_features(&pred_feats, &gt_features);
            let d_gray = self.reader.backward_pixels(&reader_cache, &d_feat);
            // renderer backward per frame, fixed order
            let cloud = self.cloud;
            let topo = self.topology.clone();
            let grads = crate::par::map_indexed(frames, |t| {
                let d_pixels = crate::render::grayscale_backward(&d_gray[t]);
                crate::render::render_backward(
                    &pred_seq.frame(t),
                    cloud,
                    &topo,
                    &sample.camera,
                    &d_pixels,
                )
            });
            for (t, g) in grads.into_iter().enumerate() {
                let g = g?;
                for c in 0..v3 {
                    d_offsets[[t, c]] += lambda * g.vertices[[c / 3, c % 3]];
                }
            }
        }

        let d_features = self.decoder.backward(&d_offsets);
        self.encoder.backward(&d_features);
        Ok((vert, read_value))
    }
}

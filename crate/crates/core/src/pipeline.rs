//! End-to-end commands behind the CLI: synthesize data, run curriculum
//! stages, infer from audio or text, evaluate checkpoints, and build
//! similarity confusion matrices. Everything is seeded by the run config;
//! runs are deterministic by construction (ordered reductions everywhere),
//! so the `deterministic` flag is a documented guarantee rather than a mode
//! switch.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioEncoder, CommandTts, StubTts, WaveformProvider};
use crate::avatar::{build_avatar, GaussianCloud};
use crate::config::{DatasetDomain, RunConfig, TtsConfig};
use crate::data::{
    generate_synthetic, load_dataset, make_splits, save_dataset, Dataset, DatasetManifest, Part,
    Sample, SplitSpec,
};
use crate::decoder::AnimationDecoder;
use crate::error::{Error, Result};
use crate::face::{build_model, FaceModel, MeshSequence};
use crate::lipreader::{
    precompute_gt, similarity_matrix, CacheReport, FeatureCache, LipFeatureExtractor,
    LipFeatureSequence, SurrogateLipReader,
};
use crate::losses::StageId;
use crate::metrics::{image_metrics, lve, save_confusion, EvalReport, EvalRow};
use crate::nn::{Adam, Mode};
use crate::render::{lip_camera, render_gray_sequence, render_sequence, save_frames};
use crate::train::{
    load_checkpoint, save_checkpoint, CheckpointMeta, MetricsLog, StageRun, Trainer,
};

/// Built once from the config: the deterministic procedural assets.
pub struct Workspace {
    pub config: RunConfig,
    pub model: FaceModel,
    pub cloud: GaussianCloud,
    pub reader: SurrogateLipReader,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesizeSummary {
    pub clean: DatasetManifest,
    pub noisy: DatasetManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferSummary {
    pub frames: usize,
    pub subject: String,
    pub mesh_file: String,
    pub frame_dir: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfusionSet {
    /// Ground-truth renders (set vs itself has a unit diagonal).
    GtRenders,
    /// Ground-truth meshes with added vertex noise, re-rendered — the
    /// pseudo-ground-truth stand-in for real video frames.
    NoisyGtRenders,
    /// Renders of checkpoint predictions.
    Predictions,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model)?;
        let cloud = build_avatar(&model.topology, &config.avatar)?;
        let mut reader = SurrogateLipReader::new(&config.lipreader)?;
        // Center the extractor's feature space on this avatar's mean face
        // response (rendered jaw/expression stimuli), the counterpart of a
        // pretrained front-end's input-normalization statistics. Without it
        // every face crop maps to nearly the same feature direction.
        let stimuli = calibration_stimuli(&model, &cloud)?;
        reader.calibrate(&stimuli)?;
        Ok(Self {
            config,
            model,
            cloud,
            reader,
        })
    }

    pub fn new_encoder(&self) -> Result<AudioEncoder> {
        AudioEncoder::new(&self.config.encoder)
    }

    pub fn new_decoder(&self) -> Result<AnimationDecoder> {
        AnimationDecoder::new(
            &self.config.decoder,
            self.model.vertex_count(),
            self.config.encoder.d_feat,
        )
    }

    pub fn tts_provider(&self) -> Box<dyn WaveformProvider> {
        match &self.config.tts {
            TtsConfig::Stub {
                sample_rate,
                fixed_duration,
            } => Box::new(StubTts {
                sample_rate: *sample_rate,
                fixed_duration: *fixed_duration,
            }),
            TtsConfig::Command { program, args } => Box::new(CommandTts {
                program: program.clone(),
                args: args.clone(),
            }),
        }
    }

    fn lpips_backend(&self) -> Option<crate::metrics::CommandPerceptual> {
        self.config
            .lpips
            .as_ref()
            .map(|l| crate::metrics::CommandPerceptual {
                program: l.program.clone(),
                args: l.args.clone(),
            })
    }

    pub fn domain_dir(&self, domain: DatasetDomain) -> PathBuf {
        self.config.dataset.root.join(domain.dir_name())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.config.output_dir.join("checkpoints")
    }

    pub fn final_checkpoint(&self, stage: StageId) -> PathBuf {
        self.checkpoint_dir()
            .join(format!("stage{}_final.lpsa", stage.number()))
    }

    pub fn load_domain(&self, domain: DatasetDomain) -> Result<Dataset> {
        let dir = self.domain_dir(domain);
        load_dataset(
            &dir,
            self.model.topology.clone(),
            &self.config.dataset.exclude_subjects,
        )
        .map_err(|e| {
            Error::data(format!(
                "cannot load `{}` dataset (run synthesize first?): {e}",
                domain.dir_name()
            ))
        })
    }

    pub fn splits(&self, dataset: &Dataset) -> Result<SplitSpec> {
        make_splits(dataset, &self.config.dataset.split.to_policy())
    }

    /// Generate and persist both dataset domains plus the model and avatar
    /// assets and the split assignment.
    pub fn synthesize(&self) -> Result<SynthesizeSummary> {
        let root = &self.config.dataset.root;
        std::fs::create_dir_all(root)?;
        self.model.to_container().save(&root.join("model.lpsa"))?;
        self.cloud.to_container().save(&root.join("avatar.lpsa"))?;

        let clean = generate_synthetic(&self.model, &self.config.dataset.clean)?;
        let noisy = generate_synthetic(&self.model, &self.config.dataset.noisy)?;
        let clean_manifest = save_dataset(&self.domain_dir(DatasetDomain::Clean), &clean)?;
        let noisy_manifest = save_dataset(&self.domain_dir(DatasetDomain::Noisy), &noisy)?;

        let splits = serde_json::json!({
            "clean": self.splits(&clean)?,
            "noisy": self.splits(&noisy)?,
        });
        std::fs::write(
            root.join("splits.json"),
            serde_json::to_string_pretty(&splits)
                .map_err(|e| Error::data(format!("splits encode: {e}")))?,
        )?;
        self.config.archive(&self.config.output_dir)?;
        Ok(SynthesizeSummary {
            clean: clean_manifest,
            noisy: noisy_manifest,
        })
    }

    fn gt_feature_cache(&self) -> Result<FeatureCache> {
        FeatureCache::open(&self.config.output_dir.join("gt_feature_cache"))
    }

    /// Precompute GT lip features for every sample of a dataset.
    pub fn precompute_gt_features(&self, dataset: &Dataset) -> Result<CacheReport> {
        let cache = self.gt_feature_cache()?;
        let ids: Vec<String> = dataset
            .samples
            .iter()
            .map(|s| s.sequence_id.clone())
            .collect();
        let by_id: std::collections::BTreeMap<&str, &Sample> = dataset
            .samples
            .iter()
            .map(|s| (s.sequence_id.as_str(), s))
            .collect();
        precompute_gt(&ids, &self.reader, &cache, |id| {
            let s = by_id
                .get(id)
                .ok_or_else(|| Error::data(format!("unknown sequence `{id}`")))?;
            render_gray_sequence(&s.gt_mesh, &self.cloud, &s.camera)
        })
    }

    /// Run one curriculum stage; returns the final checkpoint path.
    pub fn train_stage(&self, stage: StageId) -> Result<PathBuf> {
        let stage_cfg = self.config.stages.get(stage).clone();
        let dataset = self.load_domain(stage_cfg.dataset)?;
        let split = self.splits(&dataset)?;
        let train_samples = split.select(&dataset, Part::Train);
        if train_samples.is_empty() {
            return Err(Error::data("train split is empty"));
        }

        let mut encoder = self.new_encoder()?;
        let mut decoder = self.new_decoder()?;
        let mut adam = Adam::new(stage_cfg.lr);
        let mut global_step = 0;
        let mut micro_step = 0;

        // curriculum gating: stage k starts from the stage k−1 checkpoint
        if stage != StageId::Stage1 {
            let prev = StageId::from_number(stage.number() - 1)?;
            let prev_path = self.final_checkpoint(prev);
            if !prev_path.exists() {
                return Err(Error::data(format!(
                    "stage {} requires checkpoint `{}` (train stage {} first)",
                    stage.number(),
                    prev_path.display(),
                    prev.number()
                )));
            }
            let meta = load_checkpoint(&prev_path, &mut encoder, &mut decoder)?;
            adam.t = meta.adam_t;
            global_step = meta.global_step;
            micro_step = meta.micro_step;
        }

        let cache = if stage == StageId::Stage3 && stage_cfg.lambda_read > 0.0 {
            self.precompute_gt_features(&dataset)?;
            Some(self.gt_feature_cache()?)
        } else {
            None
        };

        let log_path = self
            .config
            .output_dir
            .join("logs")
            .join(format!("stage{}_metrics.tsv", stage.number()));
        let mut log = MetricsLog::create(&log_path)?;

        let mut trainer = Trainer {
            encoder: &mut encoder,
            decoder: &mut decoder,
            reader: &self.reader,
            cloud: &self.cloud,
            topology: self.model.topology.clone(),
            adam,
            seed: self.config.seed,
            global_step,
            micro_step,
            cosine_aggregation: self.config.cosine_aggregation,
        };
        trainer.run_stage(StageRun {
            stage,
            config: &stage_cfg,
            train_samples,
            cache: cache.as_ref(),
            log: &mut log,
            checkpoint_dir: &self.checkpoint_dir(),
            start_epoch: 0,
        })?;

        let meta = CheckpointMeta {
            stage: stage.number(),
            epoch: stage_cfg.epochs,
            global_step: trainer.global_step,
            micro_step: trainer.micro_step,
            adam_t: trainer.adam.t,
            seed: self.config.seed,
            extractor_id: self.reader.extractor_id().to_string(),
            frozen_encoder_digest: encoder.frozen_digest(),
        };
        let final_path = self.final_checkpoint(stage);
        save_checkpoint(&final_path, &mut encoder, &mut decoder, &meta)?;
        self.config.archive(&self.config.output_dir)?;
        Ok(final_path)
    }

    fn load_models_from(&self, checkpoint: &Path) -> Result<(AudioEncoder, AnimationDecoder, CheckpointMeta)> {
        let mut encoder = self.new_encoder()?;
        let mut decoder = self.new_decoder()?;
        let meta = load_checkpoint(checkpoint, &mut encoder, &mut decoder)?;
        Ok((encoder, decoder, meta))
    }

    /// Animate from an audio file or text and write the mesh sequence plus
    /// per-frame renders. Outputs land atomically: nothing is left behind if
    /// any step fails.
    pub fn infer(
        &self,
        checkpoint: &Path,
        input: &InferInput,
        out_dir: &Path,
        subject: Option<&str>,
    ) -> Result<InferSummary> {
        // validate everything before touching the output location
        let (mut encoder, mut decoder, _meta) = self.load_models_from(checkpoint)?;
        let dataset = self.load_domain(DatasetDomain::Noisy)?;
        let sample = match subject {
            Some(id) => dataset
                .samples
                .iter()
                .find(|s| s.subject == id)
                .ok_or_else(|| Error::data(format!("unknown subject `{id}`")))?,
            None => &dataset.samples[0],
        };
        let features = match input {
            InferInput::Audio(path) => {
                let wave = read_wav(path)?;
                encoder.encode_audio(&wave, None, &mut Mode::Eval)?
            }
            InferInput::Text(text) => {
                let tts = self.tts_provider();
                encoder.encode_text(text, tts.as_ref(), None, &mut Mode::Eval)?
            }
        };
        let mesh_seq =
            decoder.generate_mesh(&sample.neutral, &features, self.model.topology.clone())?;
        let camera = lip_camera(&sample.neutral, &self.model.topology)?;
        let frames = render_sequence(&mesh_seq, &self.cloud, &camera)?;

        if out_dir.exists() {
            return Err(Error::data(format!(
                "output `{}` already exists",
                out_dir.display()
            )));
        }
        let tmp = out_dir.with_extension("tmp-partial");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        let mut mesh_container = crate::arrays::ArrayContainer::new();
        mesh_container.insert_f64("vertices", mesh_seq.vertices.clone());
        mesh_container.insert_f64("fps", ndarray::Array1::from_vec(vec![mesh_seq.fps]));
        mesh_container.save(&tmp.join("mesh_sequence.lpsa"))?;
        save_frames(&tmp.join("frames"), &frames, mesh_seq.fps)?;
        let summary = InferSummary {
            frames: frames.len(),
            subject: sample.subject.clone(),
            mesh_file: "mesh_sequence.lpsa".into(),
            frame_dir: "frames".into(),
        };
        std::fs::write(
            tmp.join("summary.json"),
            serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::data(format!("summary encode: {e}")))?,
        )?;
        std::fs::rename(&tmp, out_dir)?;
        Ok(summary)
    }

    /// Evaluate a checkpoint (or the ground truth itself) on a split.
    pub fn evaluate(
        &self,
        checkpoint: Option<&Path>,
        domain: DatasetDomain,
        part: Part,
        out_dir: Option<&Path>,
    ) -> Result<EvalReport> {
        let dataset = self.load_domain(domain)?;
        let split = self.splits(&dataset)?;
        let samples = split.select(&dataset, part);
        if samples.is_empty() {
            return Err(Error::data("evaluation split is empty"));
        }
        let mut models = match checkpoint {
            Some(p) => {
                let (e, d, _) = self.load_models_from(p)?;
                Some((e, d))
            }
            None => None,
        };
        let lpips = self.lpips_backend();
        let lip_mask = self.model.topology.mask(crate::face::Region::Lip);

        let mut rows = Vec::with_capacity(samples.len());
        for sample in &samples {
            let pred_seq: MeshSequence = match &mut models {
                None => sample.gt_mesh.clone(),
                Some((encoder, decoder)) => {
                    let features = encoder.encode_audio(
                        &sample.waveform,
                        Some(sample.gt_mesh.frames()),
                        &mut Mode::Eval,
                    )?;
                    decoder.generate_mesh(
                        &sample.neutral,
                        &features,
                        self.model.topology.clone(),
                    )?
                }
            };
            let lve_mm = lve(
                &pred_seq.vertices,
                &sample.gt_mesh.vertices,
                &lip_mask,
                self.config.unit_scale,
            )?;
            let pred_frames = render_sequence(&pred_seq, &self.cloud, &sample.camera)?;
            let gt_frames = render_sequence(&sample.gt_mesh, &self.cloud, &sample.camera)?;
            let (psnr_db, ssim, lpips_v) = image_metrics(
                &pred_frames,
                &gt_frames,
                lpips.as_ref().map(|b| b as &dyn crate::metrics::PerceptualBackend),
            )?;
            let pred_gray: Vec<_> = pred_frames
                .iter()
                .map(crate::render::lip_crop_grayscale)
                .collect::<Result<_>>()?;
            let gt_gray: Vec<_> = gt_frames
                .iter()
                .map(crate::render::lip_crop_grayscale)
                .collect::<Result<_>>()?;
            let pf = self.reader.extract(&pred_gray)?;
            let gf = self.reader.extract(&gt_gray)?;
            let feature_cosine = crate::lipreader::sequence_cosine(&pf, &gf);
            rows.push(EvalRow {
                sequence_id: sample.sequence_id.clone(),
                lve_mm,
                psnr_db,
                ssim,
                lpips: lpips_v,
                feature_cosine,
            });
        }
        let report = EvalReport::from_rows(rows)?;
        if let Some(dir) = out_dir {
            report.save(dir)?;
        }
        Ok(report)
    }

    fn features_for_set(
        &self,
        samples: &[&Sample],
        kind: ConfusionSet,
        checkpoint: Option<&Path>,
        noise: f64,
    ) -> Result<Vec<LipFeatureSequence>> {
        let mut models = match kind {
            ConfusionSet::Predictions => {
                let p = checkpoint.ok_or_else(|| {
                    Error::config("prediction set needs a checkpoint")
                })?;
                let (e, d, _) = self.load_models_from(p)?;
                Some((e, d))
            }
            _ => None,
        };
        samples
            .iter()
            .map(|sample| {
                let seq = match kind {
                    ConfusionSet::GtRenders => sample.gt_mesh.clone(),
                    ConfusionSet::NoisyGtRenders => {
                        use rand::SeedableRng;
                        use rand_distr::{Distribution, StandardNormal};
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                            self.config.seed ^ 0xc0f,
                        );
                        let mut v = sample.gt_mesh.vertices.clone();
                        for x in v.iter_mut() {
                            let n: f64 = StandardNormal.sample(&mut rng);
                            *x += n * noise;
                        }
                        MeshSequence {
                            vertices: v,
                            topology: sample.gt_mesh.topology.clone(),
                            fps: sample.gt_mesh.fps,
                        }
                    }
                    ConfusionSet::Predictions => {
                        let (encoder, decoder) = models.as_mut().unwrap();
                        let features = encoder.encode_audio(
                            &sample.waveform,
                            Some(sample.gt_mesh.frames()),
                            &mut Mode::Eval,
                        )?;
                        decoder.generate_mesh(
                            &sample.neutral,
                            &features,
                            self.model.topology.clone(),
                        )?
                    }
                };
                let gray = render_gray_sequence(&seq, &self.cloud, &sample.camera)?;
                self.reader.extract(&gray)
            })
            .collect()
    }

    /// Similarity confusion matrix between two render sets over the eval
    /// split; also writes the heatmap and raw matrix when `out_dir` is set.
    pub fn confusion(
        &self,
        domain: DatasetDomain,
        part: Part,
        set_a: ConfusionSet,
        set_b: ConfusionSet,
        checkpoint: Option<&Path>,
        noise: f64,
        out_dir: Option<&Path>,
    ) -> Result<Array2<f64>> {
        let dataset = self.load_domain(domain)?;
        let split = self.splits(&dataset)?;
        let samples = split.select(&dataset, part);
        if samples.is_empty() {
            return Err(Error::data("confusion split is empty"));
        }
        let fa = self.features_for_set(&samples, set_a, checkpoint, noise)?;
        let fb = self.features_for_set(&samples, set_b, checkpoint, noise)?;
        let m = similarity_matrix(&fa, &fb)?;
        if let Some(dir) = out_dir {
            save_confusion(&m, dir, 24)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub enum InferInput {
    Audio(PathBuf),
    Text(String),
}

/// Deterministic pose sweep rendered through the lip camera: jaw openings
/// and single-axis expression deflections around the template face.
fn calibration_stimuli(
    model: &FaceModel,
    cloud: &GaussianCloud,
) -> Result<Vec<crate::render::GrayFrame>> {
    use crate::face::FaceModelParams;
    let neutral = model.neutral_mesh(&ndarray::Array1::zeros(model.spec.d_identity))?;
    let camera = lip_camera(&neutral, &model.topology)?;
    let mut frames = Vec::new();
    let mut poses: Vec<FaceModelParams> = Vec::new();
    for jaw in [0.0, 0.06, 0.12, 0.18, 0.24] {
        let mut p = FaceModelParams::zeros(&model.spec);
        p.pose[0] = jaw;
        poses.push(p);
    }
    for k in 0..model.spec.d_expression.min(4) {
        for sign in [-1.0, 1.0] {
            let mut p = FaceModelParams::zeros(&model.spec);
            p.expression[k] = 0.004 * sign;
            p.pose[0] = 0.09;
            poses.push(p);
        }
    }
    for p in &poses {
        let mesh = model.deform(p)?;
        let img = crate::render::render(&mesh, cloud, &model.topology, &camera)?;
        frames.push(crate::render::lip_crop_grayscale(&img)?);
    }
    Ok(frames)
}

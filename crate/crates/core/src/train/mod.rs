//! Optimization, evaluation, checkpointing, and benchmarking.

mod adam;
mod bench;
mod checkpoint;

pub use adam::AdamState;
pub use bench::{attention_flops, benchmark, BenchReport};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BranchMode, ExperimentConfig, FusionMode, KeypointSource, TrainConfig};
use crate::data::{DatasetType, PoseSample, SampleGenerator};
use crate::error::{contract, Error, Result};
use crate::keypoint::Keypoints2D;
use crate::losses::{
    active_terms, total_loss, LossOutputs, LossReport, LossTargets, RoutingOptions,
};
use crate::mesh::BranchTag;
use crate::metrics::{score, EvalReport, EvalRow, MetricOptions};
use crate::model::{ModelInput, XFormerModel};
use crate::params::{NamedGrads, ParamStore};
use crate::tensor::Graph;

/// Loss routing implied by an experiment's ablation switches.
pub fn routing_for(cfg: &ExperimentConfig) -> RoutingOptions {
    let m = &cfg.model;
    let cross = m.branches == BranchMode::Both
        && m.blocks.fusion == FusionMode::CrossAttention
        && m.blocks.n_cross > 0
        && m.modality_switch;
    RoutingOptions {
        keypoint_branch: m.branches.has_keypoint_branch(),
        image_branch: m.branches.has_image_branch(),
        consistency: cfg.train.consistency_loss && cross,
        mocap_reprojection: cfg.train.mocap_reprojection,
    }
}

/// Whether training under `cfg` can use samples of type `t`. Mocap samples
/// need the keypoint branch and, when cross-modal modules exist, the switch
/// MLP to stand in for the missing image.
pub fn accepts(cfg: &ExperimentConfig, t: DatasetType) -> bool {
    if t != DatasetType::Mocap {
        return true;
    }
    let m = &cfg.model;
    let needs_switch = m.branches == BranchMode::Both
        && m.blocks.fusion == FusionMode::CrossAttention
        && m.blocks.n_cross > 0;
    !cfg.train.skip_mocap
        && m.branches.has_keypoint_branch()
        && (m.modality_switch || !needs_switch)
}

/// Keypoints fed to the keypoint branch for a sample. Decoding needs an
/// image, so image-free samples always use their projected keypoints.
pub fn keypoint_input(sample: &PoseSample, source: KeypointSource) -> Option<&Keypoints2D> {
    match source {
        KeypointSource::GroundTruth => sample.keypoints.as_ref(),
        KeypointSource::Decoded if sample.image.is_some() => None,
        KeypointSource::Decoded => sample.keypoints.as_ref(),
    }
}

/// Loss and parameter gradients of one sample on its own tape.
pub fn sample_gradients(
    model: &XFormerModel,
    params: &ParamStore,
    sample: &PoseSample,
    train: &TrainConfig,
    routing: &RoutingOptions,
) -> Result<(NamedGrads, LossReport)> {
    let g = Graph::new();
    let b = params.bind(&g);
    let out = model.forward(
        &b,
        ModelInput {
            image: sample.image.as_ref(),
            keypoints: keypoint_input(sample, train.train_keypoints),
        },
    )?;
    let targets = LossTargets::from_sample(sample, model.config.heatmap_sigma)?;
    let terms = active_terms(sample.dataset_type, routing);
    let outputs = LossOutputs {
        heatmaps: out.heatmaps,
        keypoint: out.keypoint,
        image: out.image,
        consistency: out.consistency,
    };
    let (loss, report) = total_loss(
        &g,
        &terms,
        &outputs,
        &targets,
        &train.weights,
        &model.assets.joint_regressor,
    )?;
    let grads = g.backward(loss)?;
    Ok((b.named_grads(&grads), report))
}

/// Per-output metrics over every sample with 3D targets.
pub fn evaluate(
    model: &XFormerModel,
    params: &ParamStore,
    samples: &[PoseSample],
    source: KeypointSource,
) -> Result<EvalReport> {
    let cfg = &model.config;
    let opts = MetricOptions::for_joint_count(cfg.num_joints, cfg.root_joint);
    let tags = [BranchTag::Fused, BranchTag::Keypoint, BranchTag::Image];
    let mut per: Vec<Vec<_>> = vec![Vec::new(); tags.len()];
    for s in samples {
        let (Some(joints), Some(vertices)) = (&s.joints3d, &s.vertices3d) else {
            continue;
        };
        if s.image.is_none() && !cfg.branches.has_keypoint_branch() {
            continue;
        }
        let pred = model.predict(
            params,
            ModelInput {
                image: s.image.as_ref(),
                keypoints: keypoint_input(s, source),
            },
        )?;
        for (i, &tag) in tags.iter().enumerate() {
            if let Some(p) = pred.branch(tag) {
                per[i].push(score(p, joints, vertices, &opts)?);
            }
        }
    }
    if per[0].is_empty() {
        return Err(contract("no evaluable samples (need 3D targets)"));
    }
    Ok(EvalReport {
        rows: tags
            .iter()
            .zip(per)
            .filter(|(_, p)| !p.is_empty())
            .map(|(&t, p)| EvalRow::from_samples(t, p))
            .collect(),
    })
}

/// A training run in progress.
#[derive(Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: XFormerModel,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Samples this configuration trains on (filtered by [`accepts`]).
    pub train_set: Vec<PoseSample>,
    pub routing: RoutingOptions,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model and parameters; the training set is generated from the
    /// data config.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let generator = SampleGenerator::new(&config.model, &config.data)?;
        let data = generator.make_dataset(&config.data.train)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: ExperimentConfig, data: Vec<PoseSample>) -> Result<Self> {
        config.validate()?;
        let model = XFormerModel::new(config.model.clone())?;
        let params = model.init_params(config.model.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let adam = AdamState::from_config(&config.train);
        Self::assemble(config, model, params, adam, data, rng)
    }

    fn assemble(
        config: ExperimentConfig,
        model: XFormerModel,
        params: ParamStore,
        adam: AdamState,
        data: Vec<PoseSample>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let train_set: Vec<PoseSample> = data
            .into_iter()
            .filter(|s| accepts(&config, s.dataset_type))
            .collect();
        if train_set.is_empty() {
            return Err(Error::Config(
                "no training samples usable under this configuration".into(),
            ));
        }
        let adam = AdamState {
            lr: config.train.lr,
            beta1: config.train.beta1,
            beta2: config.train.beta2,
            eps: config.train.eps,
            ..adam
        };
        Ok(Self {
            routing: routing_for(&config),
            config,
            model,
            params,
            adam,
            train_set,
            rng,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.train_set.len();
        (0..self.config.train.batch_size)
            .map(|_| self.rng.random_range(0..n))
            .collect()
    }

    /// One Adam step on a freshly drawn batch. Per-sample gradients are summed
    /// in batch order whatever the thread count, so results do not depend on it.
    pub fn step(&mut self) -> Result<LossReport> {
        let idx = self.batch_indices();
        let threads = self.config.train.threads.min(idx.len()).max(1);
        let results: Vec<Result<(NamedGrads, LossReport)>> = if threads == 1 {
            idx.iter().map(|&i| self.sample_gradients(i)).collect()
        } else {
            let chunk = idx.len().div_ceil(threads);
            let this = &*self;
            std::thread::scope(|scope| {
                let handles: Vec<_> = idx
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter()
                                .map(|&i| this.sample_gradients(i))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };
        let scale = 1.0 / idx.len() as f64;
        let mut total = NamedGrads::new();
        let mut reports = Vec::with_capacity(idx.len());
        for r in results {
            let (grads, report) = r?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.adam.step,
                });
            }
            for (name, g) in grads {
                let acc = total.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v * scale);
            }
            reports.push(report);
        }
        self.adam.step(&mut self.params, &total)?;
        Ok(LossReport::mean(&reports).expect("nonempty batch"))
    }

    fn sample_gradients(&self, i: usize) -> Result<(NamedGrads, LossReport)> {
        sample_gradients(
            &self.model,
            &self.params,
            &self.train_set[i],
            &self.config.train,
            &self.routing,
        )
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        steps: u64,
        mut on_step: impl FnMut(&Self, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step()?;
            on_step(self, &r)?;
            log.push(r);
        }
        Ok(log)
    }

    pub fn evaluate(&self, samples: &[PoseSample], source: KeypointSource) -> Result<EvalReport> {
        evaluate(&self.model, &self.params, samples, source)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Resumes from a checkpoint; the training set is regenerated from the
    /// stored config.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let generator = SampleGenerator::new(&ck.config.model, &ck.config.data)?;
        let data = generator.make_dataset(&ck.config.data.train)?;
        Self::from_checkpoint_with_data(ck, data)
    }

    pub fn from_checkpoint_with_data(ck: Checkpoint, data: Vec<PoseSample>) -> Result<Self> {
        ck.config.validate()?;
        let model = XFormerModel::new(ck.config.model.clone())?;
        let fresh = model.init_params(ck.config.model.seed)?;
        if fresh.len() != ck.params.len()
            || fresh
                .iter()
                .zip(ck.params.iter())
                .any(|((a, ta), (b, tb))| a != b || ta.shape() != tb.shape())
        {
            return Err(Error::Config(
                "checkpoint parameters do not match its model config".into(),
            ));
        }
        let rng = ck.rng.restore();
        Self::assemble(ck.config, model, ck.params, ck.adam, data, rng)
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub losses: Vec<LossReport>,
    pub evals: Vec<(u64, EvalReport)>,
}

/// The `train` command: trains for the configured steps, writing
/// `losses.csv`, `eval.csv` and `checkpoint.xfc` into `out_dir`.
pub fn run_training(
    config: ExperimentConfig,
    out_dir: &Path,
    mut progress: impl FnMut(u64, &LossReport),
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let generator = SampleGenerator::new(&config.model, &config.data)?;
    let eval_set = generator.make_dataset(&config.data.eval)?;
    let mut trainer = Trainer::new(config)?;
    let every = trainer.config.train.eval_every;
    let source = trainer.config.train.eval_keypoints;
    let mut loss_csv = LossReport::csv_header();
    loss_csv.push('\n');
    let mut eval_csv = String::from("step,output,mpjpe,pa_mpjpe,pve\n");
    let mut evals = Vec::new();
    let record_eval =
        |t: &Trainer, evals: &mut Vec<(u64, EvalReport)>, csv: &mut String| -> Result<()> {
            let r = t.evaluate(&eval_set, source)?;
            for row in &r.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    t.step_count(),
                    row.branch.as_str(),
                    row.mpjpe,
                    row.pa_mpjpe,
                    row.pve
                );
            }
            evals.push((t.step_count(), r));
            Ok(())
        };
    let steps = trainer.config.train.steps;
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let r = trainer.step()?;
        let s = trainer.step_count();
        let _ = writeln!(loss_csv, "{}", r.csv_row(s));
        progress(s, &r);
        if every > 0 && s % every == 0 && !eval_set.is_empty() {
            record_eval(&trainer, &mut evals, &mut eval_csv)?;
        }
        losses.push(r);
    }
    if !eval_set.is_empty() && evals.last().is_none_or(|(s, _)| *s != trainer.step_count()) {
        record_eval(&trainer, &mut evals, &mut eval_csv)?;
    }
    std::fs::write(out_dir.join("losses.csv"), loss_csv)?;
    std::fs::write(out_dir.join("eval.csv"), eval_csv)?;
    trainer.checkpoint().save(&out_dir.join("checkpoint.xfc"))?;
    Ok(TrainSummary {
        steps,
        losses,
        evals,
    })
}

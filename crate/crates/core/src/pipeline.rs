//! End-to-end wiring used by the command-line tool: loading checkpoints,
//! running both stages on one sample, and the paired/unpaired evaluation.

use std::path::Path;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{
    derive_stage2_inputs, prepare_examples, pretrain_autoencoder, sample_tryon, train_stage2, Conditioning, NoiseSchedule,
    Stage2Config, Stage2EpochLog, Stage2Model,
};
use crate::error::{Error, Result};
use crate::losses::FixedFeatureNet;
use crate::metrics::{evaluate, MetricReport};
use crate::stage1::{stage1_forward, Stage1Config, Stage1Model, Stage1Output, FEATURE_NET_SEED};
use crate::synth::TryonSample;
use crate::tensor::Tensor;

pub fn load_stage1(path: &Path) -> Result<(Stage1Model, RunConfig)> {
    let ck = load_checkpoint(path)?;
    let model = Stage1Model::from_params(Stage1Config::from_run(&ck.config), ck.store)?;
    Ok((model, ck.config))
}

pub fn load_stage2(path: &Path) -> Result<(Stage2Model, RunConfig)> {
    let ck = load_checkpoint(path)?;
    let model = Stage2Model::from_params(Stage2Config::from_run(&ck.config), ck.store)?;
    Ok((model, ck.config))
}

pub struct DiffusionRun {
    pub model: Stage2Model,
    pub ae_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<Stage2EpochLog>,
}

/// Pretrain and freeze the autoencoder on garments and persons, then train
/// the conditional denoiser on stage-1 outputs.
pub fn train_diffusion(
    data: &[TryonSample],
    stage1: &Stage1Model,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&Stage2EpochLog),
) -> Result<DiffusionRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("stage-2 training needs at least one sample".into()));
    }
    let mut model = Stage2Model::new(Stage2Config::from_run(cfg), cfg.seed)?;
    let images: Vec<Tensor> = data.iter().flat_map(|s| [s.garment.clone(), s.person.clone()]).collect();
    let ae_losses = pretrain_autoencoder(&mut model, &images, cfg)?;
    let examples = prepare_examples(stage1, &model, data, cfg.owl_tau)?;
    let tr = train_stage2(model, &examples, cfg, on_epoch)?;
    Ok(DiffusionRun {
        model: tr.model,
        ae_losses,
        step_losses: tr.step_losses,
        epochs: tr.epochs,
    })
}

pub struct TryonResult {
    pub stage1: Stage1Output,
    pub mask: Tensor,
    pub tryon: Tensor,
}

/// Both stages on one garment / person pair.
#[allow(clippy::too_many_arguments)]
pub fn run_tryon(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    cfg: &RunConfig,
    garment: &Tensor,
    caption: &str,
    pose: &Tensor,
    agnostic: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<TryonResult> {
    let s1 = stage1_forward(stage1, garment, pose, agnostic)?;
    let inputs = derive_stage2_inputs(&s1.tryon_c, pose, agnostic, cfg.owl_tau)?;
    let cond = Conditioning::new(stage2, &inputs, &s1.warp_g)?;
    let schedule = NoiseSchedule::from_run(cfg)?;
    let tryon = sample_tryon(stage2, &schedule, &cond, caption, garment, steps, seed)?;
    Ok(TryonResult {
        stage1: s1,
        mask: inputs.coarse_mask,
        tryon,
    })
}

pub struct Evaluation {
    pub paired: MetricReport,
    pub unpaired: MetricReport,
    pub paired_outputs: Vec<Tensor>,
    pub unpaired_outputs: Vec<Tensor>,
}

/// Paired: each person wears their own garment and is compared with the
/// ground-truth person. Unpaired: each person wears the next sample's garment
/// and only distribution scores against the real persons are reported.
pub fn run_evaluation(
    data: &[TryonSample],
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    cfg: &RunConfig,
    steps: usize,
    seed: u64,
) -> Result<Evaluation> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two samples".into()));
    }
    let net = FixedFeatureNet::new(FEATURE_NET_SEED);
    let mut paired_outputs = Vec::with_capacity(data.len());
    let mut unpaired_outputs = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let other = &data[(i + 1) % data.len()];
        let sample_seed = seed.wrapping_add(i as u64);
        let p = run_tryon(stage1, stage2, cfg, &s.garment, &s.caption, &s.pose, &s.agnostic, steps, sample_seed)?;
        paired_outputs.push(p.tryon);
        let u = run_tryon(
            stage1,
            stage2,
            cfg,
            &other.garment,
            &other.caption,
            &s.pose,
            &s.agnostic,
            steps,
            sample_seed,
        )?;
        unpaired_outputs.push(u.tryon);
    }
    let persons: Vec<Tensor> = data.iter().map(|s| s.person.clone()).collect();
    Ok(Evaluation {
        paired: evaluate(&net, &paired_outputs, &persons, true)?,
        unpaired: evaluate(&net, &unpaired_outputs, &persons, false)?,
        paired_outputs,
        unpaired_outputs,
    })
}

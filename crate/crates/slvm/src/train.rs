//! The training engine: episode batches over train-fold classes, the
//! two-phase loss schedule, decoupled-weight-decay adaptive updates with a
//! cosine-annealed learning rate, and freeze enforcement via fingerprints.
//!
//! Determinism: every stochastic choice derives from `TrainConfig::seed`,
//! episodes within a batch evaluate in parallel but reduce in index order,
//! and parameters are kept on the `f32` grid after each step so checkpoints
//! reproduce bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::apl::{self, FrozenDecoder, ParamGrads, PromptLearnerParams, DEFAULT_HIDDEN};
use crate::augment::{apply_transform, resize_pair, sample_transform};
use crate::dataset::{ClassId, Dataset, FoldSplit};
use crate::episode::{sample_episode, Episode, EpisodeMember};
use crate::error::{Error, Result};
use crate::features::{EmbeddingProvider, MIN_INPUT};
use crate::loss::{
    cosine_pair_grad, fine_tune_loss, fine_tune_loss_grad, pair_loss_terms, total_loss,
    LossBreakdown, Phase,
};
use crate::model::AblationFlags;
use crate::nn::{avg_pool_to, avg_pool_to_backward};
use crate::pgml::{self, PriorMask};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Training hyperparameters. `Default` carries the reference settings
/// (mini-batch 8, initial learning rate 0.00025, cosine annealing, momentum
/// 0.9, 1000 epochs at 256 px); [`TrainConfig::desk`] scales the schedule
/// down to something a laptop finishes in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Episodes per optimizer step.
    pub batch_size: usize,
    /// Initial learning rate; cosine-annealed to ~0 over the run.
    pub lr: f64,
    /// First-moment decay of the adaptive optimizer.
    pub beta1: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Weight of the self-guidance loss.
    pub alpha: f64,
    /// Weight of the fine-tuning loss (active in phase 2).
    pub beta: f64,
    /// Fraction of epochs after which the fine-tuning loss activates.
    pub phase_switch: f64,
    /// Supports per episode.
    pub shots: usize,
    /// Side length images are resized to before encoding.
    pub image_size: usize,
    /// Random flips/rotations during training.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 0.00025,
            beta1: 0.9,
            weight_decay: 1e-4,
            epochs: 1000,
            episodes_per_epoch: 64,
            alpha: 1.0,
            beta: 1.0,
            phase_switch: 0.5,
            shots: 1,
            image_size: 256,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the synthetic fixture.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            episodes_per_epoch: 16,
            image_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.phase_switch) || self.phase_switch == 0.0 {
            return Err(Error::Config(format!(
                "phase_switch must be in (0, 1), got {}",
                self.phase_switch
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "beta1 must be in [0, 1), got {}",
                self.beta1
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("shots", self.shots),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_size < MIN_INPUT {
            return Err(Error::Config(format!(
                "image_size must be at least {MIN_INPUT}, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// First epoch (0-based) of the fine-tuning phase.
    pub fn switch_epoch(&self) -> usize {
        (self.phase_switch * self.epochs as f64).ceil() as usize
    }
}

/// Cosine-annealed learning rate at 0-based step `t` of `total`.
pub fn cosine_annealed_lr(initial: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return initial;
    }
    initial * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean self-guidance loss over one epoch's steps.
    pub fn epoch_mean_self_guidance(&self, epoch: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.loss.self_guidance)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,phase,lr,loss_total,loss_s,loss_f\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.step,
                s.epoch,
                s.phase.index(),
                s.lr,
                s.loss.total,
                s.loss.self_guidance,
                s.loss.fine_tune
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PromptLearnerParams,
    pub log: TrainingLog,
    pub encoder_fingerprint: String,
    pub decoder_fingerprint: String,
    /// Classes episodes were actually drawn from.
    pub classes_seen: BTreeSet<ClassId>,
}

/// Decoupled-weight-decay adaptive optimizer (single parameter group).
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(n: usize, beta1: f64, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Resize (and optionally transform) an episode to the working size.
fn prepare_episode(episode: &Episode, size: usize, augment_seed: Option<u64>) -> Episode {
    let prep = |member: &EpisodeMember, stream: u64| -> EpisodeMember {
        let (img, mask) = match augment_seed {
            Some(seed) => {
                let tf = sample_transform(derive_seed(seed, stream));
                apply_transform(&member.image, &member.mask, tf)
            }
            None => (member.image.clone(), member.mask.clone()),
        };
        let (img, mask) = resize_pair(&img, &mask, size, size);
        EpisodeMember {
            id: member.id.clone(),
            image: img,
            mask,
        }
    };
    Episode {
        target_class: episode.target_class,
        supports: episode
            .supports
            .iter()
            .enumerate()
            .map(|(i, m)| prep(m, i as u64))
            .collect(),
        query: prep(&episode.query, episode.supports.len() as u64),
        seed: episode.seed,
    }
}

struct EpisodeResult {
    grads: ParamGrads,
    ls_term: f64,
    lf_term: f64,
}

/// Forward, losses, and parameter gradients for one episode. `n` is the
/// batch size; per-episode gradients arrive pre-scaled by `1/n` and the
/// loss weights so the ordered sum is the batch gradient.
#[allow(clippy::too_many_arguments)]
fn episode_pass(
    episode: &Episode,
    provider: &dyn EmbeddingProvider,
    decoder: &FrozenDecoder,
    params: &PromptLearnerParams,
    flags: AblationFlags,
    alpha: f64,
    beta: f64,
    phase: Phase,
    n: usize,
) -> Result<EpisodeResult> {
    let mut support_feats = Vec::with_capacity(episode.supports.len());
    for member in &episode.supports {
        let pair = provider.features(&member.id, &member.image)?;
        support_feats.push((pair.high, member.mask.clone()));
    }
    let query_feats = provider.features(&episode.query.id, &episode.query.image)?;
    let (fh, fw, _) = query_feats.high.shape();

    let prior = if flags.pgml {
        pgml::episode_prior(&query_feats.high, &support_feats, episode.target_class)?
    } else {
        PriorMask::constant(fh, fw, episode.target_class)
    };
    let fused = pgml::fuse(&query_feats.mid, &prior);
    let size = episode.query.image.height();
    let trace = apl::forward(
        params,
        decoder,
        &fused,
        &prior,
        &query_feats.high,
        size,
        size,
    )?;

    // self-guidance term at the coarse grid
    let pred_small = avg_pool_to(&trace.probs, fh, fw);
    let target_small = crate::augment::resize_label(&episode.query.mask, fh, fw);
    let target_small_f: Vec<f64> = target_small.data().iter().map(|&v| v as f64).collect();
    let ls_term = pair_loss_terms(pred_small.data(), &target_small_f);

    // fine-tuning term at full resolution
    let lf_term = fine_tune_loss(&trace.probs, &episode.query.mask)?;

    // gradient w.r.t. the output probabilities
    let g_small_vec = cosine_pair_grad(pred_small.data(), &target_small_f, n);
    let g_small = Tensor::from_vec(fh, fw, 1, g_small_vec)?;
    let mut d_probs = avg_pool_to_backward(&g_small, size, size);
    if alpha != 1.0 {
        d_probs = d_probs.map(|v| v * alpha);
    }
    if phase == Phase::FineTune && beta != 0.0 {
        let g_bce = fine_tune_loss_grad(&trace.probs, &episode.query.mask);
        let scale = beta / n as f64;
        d_probs = d_probs.zip(&g_bce, |a, b| a + scale * b)?;
    }

    let grads = apl::backward(params, decoder, &trace, &d_probs);
    Ok(EpisodeResult {
        grads,
        ls_term,
        lf_term,
    })
}

/// Run the full two-phase schedule and return the trained prompt learner.
///
/// Episodes are drawn round-robin over the train-fold classes; the frozen
/// provider and decoder must fingerprint identically before and after the
/// run or the whole thing aborts with a freeze violation.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    split: &FoldSplit,
    provider: &dyn EmbeddingProvider,
    decoder: &FrozenDecoder,
    flags: AblationFlags,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !flags.apl {
        return Err(Error::Config(
            "training requires the prompt learner; the apl-off row runs untrained".into(),
        ));
    }
    let train_classes = split.train_classes();
    if train_classes.is_empty() {
        return Err(Error::Config("no train folds: every class is held out".into()));
    }
    for &class in &train_classes {
        let available = dataset.eligible_for(class).len();
        if available < config.shots + 1 {
            return Err(Error::Sampling {
                class,
                k: config.shots,
                available,
                needed: config.shots + 1,
            });
        }
    }

    let encoder_fp = provider.live_fingerprint();
    let decoder_fp = decoder.current_fingerprint();
    let (c_high, c_mid) = provider.channels();
    let mut params = PromptLearnerParams::init(
        c_mid + 1,
        DEFAULT_HIDDEN,
        c_high,
        derive_seed(config.seed, 0xB007),
    );
    let mut flat = params.flatten();
    let mut optimizer = AdamW::new(flat.len(), config.beta1, config.weight_decay);

    let steps_per_epoch = config.steps_per_epoch();
    let total_steps = config.total_steps();
    let switch_epoch = config.switch_epoch();
    let mut log = TrainingLog::default();
    let mut classes_seen = BTreeSet::new();
    let mut episode_counter = 0u64;

    for epoch in 0..config.epochs {
        let phase = if flags.fsla && epoch >= switch_epoch {
            Phase::FineTune
        } else {
            Phase::SelfGuidance
        };
        for step_in_epoch in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let lr = cosine_annealed_lr(config.lr, step, total_steps);

            // fix the batch plan up front so parallel execution stays
            // deterministic
            let mut plan = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let class = train_classes[(episode_counter as usize) % train_classes.len()];
                let ep_seed = derive_seed(config.seed, episode_counter);
                plan.push((class, ep_seed));
                classes_seen.insert(class);
                episode_counter += 1;
            }

            let n = plan.len();
            let results: Vec<Result<EpisodeResult>> = plan
                .par_iter()
                .map(|&(class, ep_seed)| {
                    let episode = sample_episode(dataset, split, class, config.shots, ep_seed)?;
                    let augment_seed = config.augment.then(|| derive_seed(ep_seed, 0xA06));
                    let episode = prepare_episode(&episode, config.image_size, augment_seed);
                    episode_pass(
                        &episode,
                        provider,
                        decoder,
                        &params,
                        flags,
                        config.alpha,
                        config.beta,
                        phase,
                        n,
                    )
                })
                .collect();

            // ordered reduction
            let mut grads = ParamGrads::zeros_like(&params);
            let mut ls = 0.0;
            let mut lf = 0.0;
            for result in results {
                let r = result?;
                grads.add_assign(&r.grads);
                ls += r.ls_term / n as f64;
                lf += r.lf_term / n as f64;
            }
            let loss = total_loss(ls, lf, config.alpha, config.beta, phase);
            if !loss.total.is_finite() {
                return Err(Error::Divergence { step });
            }

            optimizer.step(&mut flat, &grads.flatten(), lr);
            for v in &mut flat {
                *v = *v as f32 as f64;
            }
            params.unflatten(&flat);

            log.steps.push(StepRecord {
                step,
                epoch,
                phase,
                lr,
                loss,
            });
        }
    }

    let encoder_now = provider.live_fingerprint();
    if encoder_now != encoder_fp {
        return Err(Error::FreezeViolation {
            component: "encoder",
            expected: encoder_fp,
            found: encoder_now,
        });
    }
    let decoder_now = decoder.current_fingerprint();
    if decoder_now != decoder_fp {
        return Err(Error::FreezeViolation {
            component: "decoder",
            expected: decoder_fp,
            found: decoder_now,
        });
    }

    Ok(TrainOutcome {
        params,
        log,
        encoder_fingerprint: encoder_fp,
        decoder_fingerprint: decoder_fp,
        classes_seen,
    })
}

//! Supervised burn-in, the teacher-student adaptation loop, and checkpointing.

use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::Recipe;
use super::pseudo::{generate_pseudo_labels, PseudoLabelSet};
use crate::adversary::{adversarial_contribution, DiscriminatorParams, Grl};
use crate::augment::{strong_augment, weak_augment, WeakTransform};
use crate::data::{AnnotatedImage, SidecarProbe, SplitView};
use crate::detector::checkpoint::Archive;
use crate::detector::loss::{train_backward, train_forward, LossComponents, LossMode, TrainPass};
use crate::detector::model::{encode_backward, encode_forward, image_tensor, EncoderCache};
use crate::detector::params::{axpy, ema_update, ParamSet};
use crate::detector::sgd::{sgd_step, SgdState};
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate_detector, false_positive_ratio};
use crate::rng::{derive_seed, rng_for, stream};

/// `L_sup + λ_unsup·L_unsup + λ_dis·L_dis`
pub fn total_loss(l_sup: f64, l_unsup: f64, l_dis: f64, lambda_unsup: f64, lambda_dis: f64) -> f64 {
    l_sup + lambda_unsup * l_unsup + lambda_dis * l_dis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Supervised,
    Adapt,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub phase: Phase,
    pub iteration: u64,
    pub sup: LossComponents,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_dis: f64,
    pub total: f64,
    pub pseudo_count: usize,
    /// Pseudo-label false-positive ratio over the batch; absent without analysis access or
    /// when the batch produced no pseudo labels.
    pub fp_ratio: Option<f64>,
    pub teacher_map: Option<f64>,
    pub student_map: Option<f64>,
}

/// Receives progress from a training loop. Wall time is delivered separately from the metrics
/// so that logs of identical runs are identical.
pub trait RunObserver {
    fn on_iteration(&mut self, _metrics: &IterationMetrics, _elapsed: Duration) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

fn batch_indices(iter_seed: u64, which: u64, n: usize, k: usize) -> Vec<usize> {
    let mut rng = rng_for(iter_seed, stream::BATCH, which);
    sample(&mut rng, n, k.min(n)).into_vec()
}

/// Student view of a labeled image: weak geometry followed by strong photometric noise.
fn labeled_view(img: &AnnotatedImage, recipe: &Recipe, iter_seed: u64, slot: u64) -> AnnotatedImage {
    let (weak, _) = weak_augment(img, &recipe.weak, derive_seed(iter_seed, stream::WEAK, slot));
    strong_augment(&weak, &recipe.strong, derive_seed(iter_seed, stream::STRONG, slot))
}

/// Detector weights and optimizer of a purely supervised run.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedState {
    pub params: DetectorParams,
    pub opt: SgdState,
    pub iteration: u64,
}

impl SupervisedState {
    pub fn init(recipe: &Recipe) -> Result<Self> {
        recipe.validate()?;
        let params = DetectorParams::init(&recipe.arch, derive_seed(recipe.train.seed, stream::INIT, 0))?;
        let opt = SgdState::new(&params);
        Ok(Self { params, opt, iteration: 0 })
    }
}

/// Supervised training on `data` until `state.iteration == until`. Iteration `i` always draws
/// the same batch and augmentations for a given seed and phase stream. With `eval`, the model
/// is scored every `eval_every` iterations and the result logged as `student_map`.
pub fn supervised_train(
    recipe: &Recipe,
    state: &mut SupervisedState,
    data: &SplitView<'_>,
    until: u64,
    phase_stream: u64,
    eval: Option<&SplitView<'_>>,
    observer: &mut dyn RunObserver,
) -> Result<Vec<IterationMetrics>> {
    let t = &recipe.train;
    let mut log = Vec::new();
    while state.iteration < until {
        let started = Instant::now();
        let iter_seed = derive_seed(t.seed, phase_stream, state.iteration);
        let idx = batch_indices(iter_seed, 0, data.len(), t.batch_source);
        let inv = 1.0 / idx.len() as f64;
        let mut grads = state.params.zeros_like();
        let mut sup = LossComponents::default();
        for (k, &i) in idx.iter().enumerate() {
            let img = labeled_view(data.get(i), recipe, iter_seed, k as u64);
            let pass = train_forward(&state.params, &recipe.head, &image_tensor(&img), &img.annotations, LossMode::Supervised, None)?;
            sup.add_scaled(&pass.losses, inv);
            train_backward(&state.params, &pass, inv, &mut grads, None);
        }
        let l_sup = sup.total();
        if !l_sup.is_finite() {
            return Err(Error::NonFinite { iteration: state.iteration, detail: format!("supervised loss {sup:?}") });
        }
        sgd_step(&mut state.params, &grads, &t.sgd(), &mut state.opt).map_err(|e| at_iteration(e, state.iteration))?;
        let mut m = IterationMetrics {
            phase: Phase::Supervised,
            iteration: state.iteration,
            sup,
            l_sup,
            l_unsup: 0.0,
            l_dis: 0.0,
            total: l_sup,
            pseudo_count: 0,
            fp_ratio: None,
            teacher_map: None,
            student_map: None,
        };
        state.iteration += 1;
        if let Some(view) = eval {
            if t.eval_every > 0 && state.iteration % t.eval_every == 0 {
                m.student_map = Some(evaluate_detector(&state.params, &recipe.head, view)?.map_or_zero());
            }
        }
        observer.on_iteration(&m, started.elapsed())?;
        log.push(m);
    }
    Ok(log)
}

/// Source-only burn-in for `burn_in_iterations`, starting from a fresh initialisation.
pub fn pretrain(recipe: &Recipe, source: &SplitView<'_>, observer: &mut dyn RunObserver) -> Result<(SupervisedState, Vec<IterationMetrics>)> {
    let mut state = SupervisedState::init(recipe)?;
    let log = supervised_train(recipe, &mut state, source, recipe.train.burn_in_iterations, stream::PRETRAIN, None, observer)?;
    Ok((state, log))
}

fn at_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { detail, .. } => Error::NonFinite { iteration, detail },
        other => other,
    }
}

/// Two independent deep copies.
pub fn duplicate(params: &DetectorParams) -> (DetectorParams, DetectorParams) {
    (params.clone(), params.clone())
}

/// Teacher, student, discriminator and optimizer state of an adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
    pub discriminator: DiscriminatorParams,
    pub opt_student: SgdState,
    pub opt_discriminator: SgdState,
    /// Adaptation iterations completed.
    pub iteration: u64,
}

impl TrainerState {
    /// Teacher and student both start from the pretrained weights; the student keeps the
    /// burn-in optimizer state.
    pub fn from_pretrained(recipe: &Recipe, pretrained: &SupervisedState) -> Self {
        let (teacher, student) = duplicate(&pretrained.params);
        let discriminator = DiscriminatorParams::init(
            recipe.arch.feature_channels(),
            recipe.arch.discriminator_hidden,
            derive_seed(recipe.train.seed, stream::INIT, 1),
        );
        let opt_discriminator = SgdState::new(&discriminator);
        Self { teacher, student, discriminator, opt_student: pretrained.opt.clone(), opt_discriminator, iteration: 0 }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(self.student.arch.fingerprint());
        a.insert_params("teacher", &self.teacher);
        a.insert_params("student", &self.student);
        a.insert_params("discriminator", &self.discriminator);
        insert_velocity(&mut a, "optimizer/student", &self.student, &self.opt_student);
        insert_velocity(&mut a, "optimizer/discriminator", &self.discriminator, &self.opt_discriminator);
        a.metadata = serde_json::json!({
            "iteration": self.iteration,
            "student_steps": self.opt_student.steps,
            "discriminator_steps": self.opt_discriminator.steps,
        });
        a
    }

    /// Restores a state written by [`to_archive`](Self::to_archive) for the architecture in `recipe`.
    pub fn from_archive(recipe: &Recipe, a: &Archive) -> Result<Self> {
        let expected = recipe.arch.fingerprint();
        if a.fingerprint != expected {
            return Err(Error::FingerprintMismatch { expected, found: a.fingerprint.clone() });
        }
        let mut teacher = DetectorParams::zeros(&recipe.arch);
        let mut student = DetectorParams::zeros(&recipe.arch);
        let mut discriminator = DiscriminatorParams::zeros(recipe.arch.feature_channels(), recipe.arch.discriminator_hidden);
        a.restore_params("teacher", &mut teacher)?;
        a.restore_params("student", &mut student)?;
        a.restore_params("discriminator", &mut discriminator)?;
        let meta = |k: &str| a.metadata.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")));
        let opt_student = restore_velocity(a, "optimizer/student", &student, meta("student_steps")?)?;
        let opt_discriminator = restore_velocity(a, "optimizer/discriminator", &discriminator, meta("discriminator_steps")?)?;
        Ok(Self { teacher, student, discriminator, opt_student, opt_discriminator, iteration: meta("iteration")? })
    }
}

fn insert_velocity<P: ParamSet>(a: &mut Archive, prefix: &str, params: &P, opt: &SgdState) {
    for (t, v) in params.tensors().into_iter().zip(&opt.velocity) {
        a.insert(format!("{prefix}/{}", t.name), t.shape.clone(), v.clone());
    }
}

fn restore_velocity<P: ParamSet>(a: &Archive, prefix: &str, params: &P, steps: u64) -> Result<SgdState> {
    let velocity = params.tensors().iter().map(|t| a.get(&format!("{prefix}/{}", t.name)).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
    Ok(SgdState { velocity, steps })
}

/// Archive for a supervised-only state (burn-in or baselines).
pub fn supervised_archive(state: &SupervisedState) -> Archive {
    let mut a = Archive::new(state.params.arch.fingerprint());
    a.insert_params("student", &state.params);
    insert_velocity(&mut a, "optimizer/student", &state.params, &state.opt);
    a.metadata = serde_json::json!({ "iteration": state.iteration, "student_steps": state.opt.steps });
    a
}

pub fn supervised_from_archive(recipe: &Recipe, a: &Archive) -> Result<SupervisedState> {
    let expected = recipe.arch.fingerprint();
    if a.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: a.fingerprint.clone() });
    }
    let mut params = DetectorParams::zeros(&recipe.arch);
    a.restore_params("student", &mut params)?;
    let meta = |k: &str| a.metadata.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")));
    let opt = restore_velocity(a, "optimizer/student", &params, meta("student_steps")?)?;
    Ok(SupervisedState { params, opt, iteration: meta("iteration")? })
}

/// Restores the `teacher` or `student` detector from a checkpoint of either kind.
pub fn model_from_archive(recipe: &Recipe, a: &Archive, teacher: bool) -> Result<DetectorParams> {
    let expected = recipe.arch.fingerprint();
    if a.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: a.fingerprint.clone() });
    }
    let mut params = DetectorParams::zeros(&recipe.arch);
    a.restore_params(if teacher { "teacher" } else { "student" }, &mut params)?;
    Ok(params)
}

/// Data handed to the adaptation loop. The target view carries images only.
pub struct TrainData<'a> {
    pub source: SplitView<'a>,
    pub target: SplitView<'a>,
    /// Analysis-only access to target-train labels, for the pseudo-label FP ratio.
    pub sidecar: Option<SidecarProbe<'a>>,
    /// Split evaluated every `eval_every` iterations.
    pub eval: Option<SplitView<'a>>,
}

enum TargetPass {
    Full(TrainPass),
    Features(Array3<f64>, EncoderCache),
}

impl TargetPass {
    fn features(&self) -> &Array3<f64> {
        match self {
            TargetPass::Full(p) => &p.features,
            TargetPass::Features(f, _) => f,
        }
    }
}

/// One adaptation step: pseudo labels from the teacher on weak target views, student losses on
/// strong views of both domains, one SGD step for student and discriminator, then EMA.
pub fn train_iteration(recipe: &Recipe, state: &mut TrainerState, data: &TrainData<'_>) -> Result<IterationMetrics> {
    let t = &recipe.train;
    let head = &recipe.head;
    let step = state.iteration;
    let iter_seed = derive_seed(t.seed, stream::ADAPT, step);
    let mutual = !t.disable_mutual;
    let adversary = t.adversary_active();

    let src_idx = batch_indices(iter_seed, 0, data.source.len(), t.batch_source);
    let tgt_idx = batch_indices(iter_seed, 1, data.target.len(), t.batch_target);
    let src_imgs: Vec<AnnotatedImage> =
        src_idx.iter().enumerate().map(|(k, &i)| labeled_view(data.source.get(i), recipe, iter_seed, k as u64)).collect();
    let tgt_orig: Vec<&AnnotatedImage> = tgt_idx.iter().map(|&i| data.target.get(i)).collect();
    let target_slot = |k: usize| (1 << 32) + k as u64;
    let tgt_strong: Vec<AnnotatedImage> = tgt_orig
        .iter()
        .enumerate()
        .map(|(k, img)| strong_augment(img, &recipe.strong, derive_seed(iter_seed, stream::STRONG, target_slot(k))))
        .collect();

    // (1) Teacher pseudo labels, mapped into the strong view's geometry.
    let pseudo: Option<PseudoLabelSet> = if mutual {
        let (inputs, frames): (Vec<AnnotatedImage>, Vec<WeakTransform>) = if t.disable_ws_aug {
            (tgt_strong.clone(), tgt_strong.iter().map(|i| WeakTransform::identity(i.width, i.height)).collect())
        } else {
            tgt_orig
                .iter()
                .enumerate()
                .map(|(k, img)| weak_augment(img, &recipe.weak, derive_seed(iter_seed, stream::WEAK, target_slot(k))))
                .unzip()
        };
        Some(generate_pseudo_labels(&state.teacher, head, &inputs, &frames, t.confidence_threshold, t.nms_iou)?.into_original_frame())
    } else {
        None
    };
    let pseudo_count = pseudo.as_ref().map_or(0, PseudoLabelSet::box_count);
    let fp_ratio = match (&pseudo, &data.sidecar) {
        (Some(p), Some(probe)) if pseudo_count > 0 => {
            let dets: Vec<_> = p.images.iter().enumerate().flat_map(|(k, d)| d.iter().map(move |x| (k, *x))).collect();
            let gts: Vec<_> = tgt_idx.iter().enumerate().flat_map(|(k, &i)| probe.labels(i).iter().map(move |a| (k, *a))).collect();
            Some(false_positive_ratio(&dets, &gts, 0.5).ratio)
        }
        _ => None,
    };

    // (2)-(3) Student forward passes.
    let student = &state.student;
    let src_passes = src_imgs
        .iter()
        .map(|img| train_forward(student, head, &image_tensor(img), &img.annotations, LossMode::Supervised, None))
        .collect::<Result<Vec<_>>>()?;
    let tgt_passes: Vec<TargetPass> = match &pseudo {
        Some(p) => {
            debug_assert!(p.is_original_frame(), "pseudo labels must share the strong view's geometry");
            tgt_strong
                .iter()
                .enumerate()
                .map(|(k, img)| {
                    train_forward(student, head, &image_tensor(img), &p.annotations(k), LossMode::ClassificationOnly, None).map(TargetPass::Full)
                })
                .collect::<Result<_>>()?
        }
        None if adversary => tgt_strong
            .iter()
            .map(|img| encode_forward(student, &image_tensor(img)).map(|(f, c)| TargetPass::Features(f, c)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let inv_s = 1.0 / src_passes.len() as f64;
    let mut sup = LossComponents::default();
    for p in &src_passes {
        sup.add_scaled(&p.losses, inv_s);
    }
    let l_sup = sup.total();
    let inv_t = 1.0 / tgt_idx.len() as f64;
    let l_unsup: f64 = tgt_passes
        .iter()
        .map(|p| match p {
            TargetPass::Full(p) => (p.losses.rpn_cls + p.losses.roi_cls) * inv_t,
            TargetPass::Features(..) => 0.0,
        })
        .sum();

    let adv = if adversary {
        let src_feats: Vec<&Array3<f64>> = src_passes.iter().map(|p| &p.features).collect();
        let tgt_feats: Vec<&Array3<f64>> = tgt_passes.iter().map(TargetPass::features).collect();
        Some(adversarial_contribution(&state.discriminator, Some(&Grl::new(t.grl_coefficient)?), &src_feats, &tgt_feats)?)
    } else {
        None
    };
    let l_dis = adv.as_ref().map_or(0.0, |a| a.loss);
    let total = total_loss(l_sup, l_unsup, l_dis, t.lambda_unsup, t.lambda_dis);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            iteration: step,
            detail: format!("total {total}: sup {sup:?}, unsup {l_unsup}, dis {l_dis}"),
        });
    }

    // (4) Backward and one optimizer step.
    let mut grads = student.zeros_like();
    let scaled = |g: &Array3<f64>| g * t.lambda_dis;
    for (k, p) in src_passes.iter().enumerate() {
        let extra = adv.as_ref().map(|a| scaled(&a.source_feature_grads[k]));
        train_backward(student, p, inv_s, &mut grads, extra.as_ref());
    }
    for (k, p) in tgt_passes.iter().enumerate() {
        let extra = adv.as_ref().map(|a| scaled(&a.target_feature_grads[k]));
        match p {
            TargetPass::Full(p) => train_backward(student, p, t.lambda_unsup * inv_t, &mut grads, extra.as_ref()),
            TargetPass::Features(_, cache) => {
                if let Some(e) = extra {
                    encode_backward(student, cache, e, &mut grads);
                }
            }
        }
    }
    drop(src_passes);
    drop(tgt_passes);
    sgd_step(&mut state.student, &grads, &t.sgd(), &mut state.opt_student).map_err(|e| at_iteration(e, step))?;
    if let Some(a) = &adv {
        let mut dg = state.discriminator.zeros_like();
        axpy(&mut dg, t.lambda_dis, &a.disc_grads);
        sgd_step(&mut state.discriminator, &dg, &t.sgd(), &mut state.opt_discriminator).map_err(|e| at_iteration(e, step))?;
    }

    // (5) Teacher follows the student.
    if mutual {
        ema_update(&mut state.teacher, &state.student, t.ema_alpha)?;
    }
    state.iteration += 1;

    Ok(IterationMetrics {
        phase: Phase::Adapt,
        iteration: step,
        sup,
        l_sup,
        l_unsup,
        l_dis,
        total,
        pseudo_count,
        fp_ratio,
        teacher_map: None,
        student_map: None,
    })
}

/// Runs adaptation until `adapt_iterations` are done, or until `stop_at` if given. Evaluates
/// both models every `eval_every` iterations and reports checkpoints every `checkpoint_every`.
pub fn adapt(
    recipe: &Recipe,
    state: &mut TrainerState,
    data: &TrainData<'_>,
    stop_at: Option<u64>,
    observer: &mut dyn RunObserver,
) -> Result<Vec<IterationMetrics>> {
    let t = &recipe.train;
    let end = stop_at.map_or(t.adapt_iterations, |s| s.min(t.adapt_iterations));
    let mut log = Vec::new();
    while state.iteration < end {
        let started = Instant::now();
        let mut m = train_iteration(recipe, state, data)?;
        if t.eval_every > 0 && state.iteration % t.eval_every == 0 {
            if let Some(view) = &data.eval {
                m.teacher_map = Some(evaluate_detector(&state.teacher, &recipe.head, view)?.map_or_zero());
                m.student_map = Some(evaluate_detector(&state.student, &recipe.head, view)?.map_or_zero());
            }
        }
        observer.on_iteration(&m, started.elapsed())?;
        log.push(m);
        if t.checkpoint_every > 0 && state.iteration % t.checkpoint_every == 0 {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(log)
}

/// The model whose accuracy represents a run: the teacher, or the student when the mutual
/// stream is disabled and no teacher is trained.
pub fn headline_model<'a>(recipe: &Recipe, state: &'a TrainerState) -> &'a DetectorParams {
    if recipe.train.disable_mutual {
        &state.student
    } else {
        &state.teacher
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::StrongAugConfig;
    use crate::data::{build_experiment, ExperimentData, SceneSpec};
    use crate::detector::sgd::SgdConfig;
    use crate::detector::ArchConfig;

    fn micro_data() -> ExperimentData {
        let spec = SceneSpec { image_size: 32, objects_per_image: (1, 2), object_scale: (8.0, 16.0), seed: 3, ..Default::default() };
        build_experiment(&spec, 12, 12, 6, None).unwrap()
    }

    fn micro_recipe() -> Recipe {
        let mut r = Recipe { arch: ArchConfig::micro(), ..Default::default() };
        r.train.batch_source = 2;
        r.train.batch_target = 2;
        r.train.burn_in_iterations = 3;
        r.train.adapt_iterations = 6;
        r.train.confidence_threshold = 0.3;
        r.train.ema_alpha = 0.9;
        r.train.eval_every = 0;
        r.train.seed = 11;
        r
    }

    fn train_data(d: &ExperimentData) -> TrainData<'_> {
        TrainData { source: d.source_train_view(), target: d.target_train_view(), sidecar: Some(d.sidecar_probe()), eval: None }
    }

    fn start(recipe: &Recipe, d: &ExperimentData) -> TrainerState {
        let (pre, _) = pretrain(recipe, &d.source_train_view(), &mut NoObserver).unwrap();
        TrainerState::from_pretrained(recipe, &pre)
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(2.0, 1.0, 0.5, 1.0, 0.1) - 3.05).abs() < 1e-12);
        assert_eq!(total_loss(2.0, 1.0, 0.5, 0.0, 0.0), 2.0);
        let base = total_loss(2.0, 1.0, 0.5, 1.0, 0.0);
        let one = total_loss(2.0, 1.0, 0.5, 1.0, 0.2) - base;
        let two = total_loss(2.0, 1.0, 0.5, 1.0, 0.4) - base;
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn zero_burn_in_returns_initialisation() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.train.burn_in_iterations = 0;
        let (state, log) = pretrain(&r, &d.source_train_view(), &mut NoObserver).unwrap();
        assert!(log.is_empty());
        assert_eq!(state, SupervisedState::init(&r).unwrap());
    }

    #[test]
    fn pretrain_is_deterministic_and_never_touches_target() {
        let d = micro_data();
        let r = micro_recipe();
        let (a, la) = pretrain(&r, &d.source_train_view(), &mut NoObserver).unwrap();
        let (b, lb) = pretrain(&r, &d.source_train_view(), &mut NoObserver).unwrap();
        assert_eq!(supervised_archive(&a).to_bytes().unwrap(), supervised_archive(&b).to_bytes().unwrap());
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
        let audit = d.audit.snapshot();
        assert_eq!(audit.get(crate::data::Channel::TargetTrainImages), 0);
        assert_eq!(audit.get(crate::data::Channel::TargetTrainLabels), 0);
    }

    #[test]
    fn duplicates_are_independent() {
        let r = micro_recipe();
        let p = DetectorParams::init(&r.arch, 5).unwrap();
        let (mut t, mut s) = duplicate(&p);
        assert_eq!(t, s);
        ema_update(&mut t, &s, 0.3).unwrap();
        assert_eq!(t, p);
        let mut g = s.zeros_like();
        g.fill(1.0);
        sgd_step(&mut s, &g, &SgdConfig::default(), &mut SgdState::new(&p)).unwrap();
        assert_ne!(s, p);
        assert_eq!(t, p);
    }

    #[test]
    fn zero_adapt_iterations_keeps_the_pretrained_weights() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.train.adapt_iterations = 0;
        let (pre, _) = pretrain(&r, &d.source_train_view(), &mut NoObserver).unwrap();
        let mut state = TrainerState::from_pretrained(&r, &pre);
        let log = adapt(&r, &mut state, &train_data(&d), None, &mut NoObserver).unwrap();
        assert!(log.is_empty());
        assert_eq!(state.teacher, pre.params);
        assert_eq!(state.student, pre.params);
    }

    #[test]
    fn log_identity_and_teacher_audit() {
        let d = micro_data();
        let r = micro_recipe();
        let mut state = start(&r, &d);
        let data = train_data(&d);
        let mut log = Vec::new();
        for _ in 0..r.train.adapt_iterations {
            let mut expected = state.teacher.clone();
            let m = train_iteration(&r, &mut state, &data).unwrap();
            ema_update(&mut expected, &state.student, r.train.ema_alpha).unwrap();
            assert_eq!(state.teacher, expected, "teacher moved other than by EMA");
            let t = total_loss(m.l_sup, m.l_unsup, m.l_dis, r.train.lambda_unsup, r.train.lambda_dis);
            assert!((m.total - t).abs() < 1e-6);
            assert!((m.l_sup - m.sup.total()).abs() < 1e-12);
            log.push(m);
        }
        assert_eq!(log.len() as u64, r.train.adapt_iterations);
        assert!(log.iter().any(|m| m.l_dis > 0.0));
        assert_eq!(d.audit.snapshot().get(crate::data::Channel::TargetTrainLabels), 0);
    }

    #[test]
    fn disabled_adversary_matches_zero_weight() {
        let d = micro_data();
        let run = |r: &Recipe| {
            let mut s = start(r, &d);
            let log = adapt(r, &mut s, &train_data(&d), None, &mut NoObserver).unwrap();
            (s.student, s.teacher, log)
        };
        let mut off = micro_recipe();
        off.train.disable_dis = true;
        let mut zero = micro_recipe();
        zero.train.lambda_dis = 0.0;
        let (a, b) = (run(&off), run(&zero));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.total == y.total && x.l_dis == 0.0 && y.l_dis == 0.0));
    }

    #[test]
    fn zero_learning_rate_freezes_the_student() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.train.lr = 0.0;
        let mut state = start(&r, &d);
        let before = state.student.clone();
        train_iteration(&r, &mut state, &train_data(&d)).unwrap();
        assert_eq!(state.student, before);
        assert_eq!(state.teacher, before);

        // A teacher that differs drifts toward the frozen student.
        let mut state = start(&r, &d);
        state.teacher.roi_cls.bias[0] += 1.0;
        let gap = state.teacher.roi_cls.bias[0] - state.student.roi_cls.bias[0];
        train_iteration(&r, &mut state, &train_data(&d)).unwrap();
        let after = state.teacher.roi_cls.bias[0] - state.student.roi_cls.bias[0];
        assert!((after - r.train.ema_alpha * gap).abs() < 1e-12);
    }

    #[test]
    fn without_mutual_learning_the_teacher_is_idle() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.train.disable_mutual = true;
        let mut state = start(&r, &d);
        let teacher = state.teacher.clone();
        let log = adapt(&r, &mut state, &train_data(&d), None, &mut NoObserver).unwrap();
        assert_eq!(state.teacher, teacher);
        assert!(log.iter().all(|m| m.l_unsup == 0.0 && m.pseudo_count == 0 && m.fp_ratio.is_none()));
        assert!(log.iter().all(|m| m.l_dis > 0.0));
        assert_ne!(state.student, teacher);
        assert!(std::ptr::eq(headline_model(&r, &state), &state.student));
    }

    #[test]
    fn ablated_augmentation_runs() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.train.disable_ws_aug = true;
        let mut state = start(&r, &d);
        let log = adapt(&r, &mut state, &train_data(&d), None, &mut NoObserver).unwrap();
        assert_eq!(log.len(), 6);
        assert!(log.iter().all(|m| m.total.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = micro_data();
        let r = micro_recipe();
        let mut full = start(&r, &d);
        let full_log = adapt(&r, &mut full, &train_data(&d), None, &mut NoObserver).unwrap();

        let mut part = start(&r, &d);
        let mut log = adapt(&r, &mut part, &train_data(&d), Some(2), &mut NoObserver).unwrap();
        let bytes = part.to_archive().to_bytes().unwrap();
        let mut resumed = TrainerState::from_archive(&r, &Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(resumed, part);
        log.extend(adapt(&r, &mut resumed, &train_data(&d), None, &mut NoObserver).unwrap());
        assert_eq!(log, full_log);
        assert_eq!(resumed, full);
    }

    #[test]
    fn non_finite_weights_abort_with_the_iteration() {
        let d = micro_data();
        let mut r = micro_recipe();
        r.strong = StrongAugConfig::disabled();
        let mut state = start(&r, &d);
        adapt(&r, &mut state, &train_data(&d), Some(1), &mut NoObserver).unwrap();
        state.student.roi_cls.bias[0] = f64::NAN;
        let err = train_iteration(&r, &mut state, &train_data(&d)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 1, .. }), "{err:?}");
    }

    #[test]
    fn wrong_architecture_is_refused() {
        let d = micro_data();
        let r = micro_recipe();
        let a = start(&r, &d).to_archive();
        let other = Recipe { arch: ArchConfig::default(), ..r };
        assert!(matches!(TrainerState::from_archive(&other, &a), Err(Error::FingerprintMismatch { .. })));
    }
}

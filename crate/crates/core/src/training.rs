//! The joint optimization of both branches: per-step loss assembly, the
//! adaptive-moment optimizer, per-epoch validation and early stopping.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, Var};
use crate::data::{make_batches, queries_in, split_pools, Batch, Dataset, SplitPools};
use crate::distillation::{fuse_teachers, inheritance_loss, teacher_pairwise, TeacherView};
use crate::encoders::{encode_texts_on_tape, encode_videos_on_tape, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{encode_pool, rank_all, recall_report, RecallReport};
use crate::model::{sha256_hex, BranchMode, BranchParams, ModelConfig, ModelState};
use crate::schedule::{ScheduleSet, ScheduleState};
use crate::similarity::{frame_distribution, pairwise_on_tape, similarity_matrix, PairwiseMatrix, SimilarityDistribution};
use crate::supervision::{build_soft_targets, exploration_loss, SoftTargets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation SumR improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    /// Triplet margin.
    pub margin: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Softmax temperature applied before the KL consistency term.
    pub tau_kl: f64,
    pub schedules: ScheduleSet,
    /// Weight of the exploration branch when fusing similarities.
    pub sigma: f64,
    pub seed: u64,
    pub row_normalize_targets: bool,
    pub branches: BranchMode,
    pub model: ModelConfig,
    /// Epochs before which the CLI saves a snapshot of the model.
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            learning_rate: 2.5e-4,
            margin: 0.2,
            temperature: 0.07,
            tau_kl: 1.0,
            schedules: ScheduleSet::default(),
            sigma: 0.7,
            seed: 0,
            row_normalize_targets: true,
            branches: BranchMode::Dual,
            model: ModelConfig::default(),
            snapshot_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be ≥ 0, got {}", self.margin));
        }
        if !(self.temperature > 0.0) || !(self.tau_kl > 0.0) {
            return bad("temperature and tau_kl must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma must be in [0,1], got {}", self.sigma));
        }
        let m = &self.model;
        if m.heads == 0 || m.hidden == 0 || !m.hidden.is_multiple_of(m.heads) {
            return bad(format!("model.hidden ({}) must be a positive multiple of model.heads ({})", m.hidden, m.heads));
        }
        if m.max_frames == 0 || m.ff_mult == 0 {
            return bad("model.max_frames and model.ff_mult must be ≥ 1".into());
        }
        self.schedules.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON of this config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Fusion weight used for validation and evaluation.
    pub fn effective_sigma(&self) -> f64 {
        self.branches.effective_sigma(self.sigma)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators of the adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update. Parameters whose gradient is
/// `None` are left alone, moments included.
pub fn optimizer_step(opt: &mut AdamState, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || opt.m[i].len() != p.numel() {
                return Err(Error::Contract(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    /// `L_E`, when the exploration branch trains.
    pub exploration: Option<f64>,
    /// `L_I` (the inheritance branch's full loss).
    pub inheritance: Option<f64>,
    /// Mean KL consistency before weighting.
    pub consistency: Option<f64>,
}

struct BoundBranch {
    video: EncoderParams<Var>,
    text: EncoderParams<Var>,
}

impl BoundBranch {
    fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.video.params().into_iter().copied().collect();
        out.extend(self.text.params().into_iter().copied());
        out
    }
}

struct BranchForward {
    /// Cosine of every stacked frame against every sentence, `[Σk × N]`.
    cos: Var,
    /// Video-major partial similarities `[N × N]`.
    pooled: Var,
    segments: Vec<Range<usize>>,
}

fn forward_branch(tape: &mut Tape, branch: &BranchParams, videos: &[&Tensor], queries: &[&Tensor]) -> Result<(BoundBranch, BranchForward)> {
    let bound = BoundBranch {
        video: branch.video.bind(tape),
        text: branch.text.bind(tape),
    };
    let (frames, segments) = encode_videos_on_tape(tape, &bound.video, videos)?;
    let text = encode_texts_on_tape(tape, &bound.text, queries)?;
    let (cos, pooled) = pairwise_on_tape(tape, frames, &segments, text.sentences)?;
    Ok((bound, BranchForward { cos, pooled, segments }))
}

/// Soft targets guided by a video-major similarity matrix.
pub fn targets_from(video_major: &PairwiseMatrix, sched: ScheduleState, cfg: &TrainConfig) -> Result<SoftTargets> {
    build_soft_targets(&video_major.transposed(), sched.alpha, sched.beta, cfg.row_normalize_targets)
}

/// Teacher matrices for the batch and the fused teacher distribution of
/// every positive pair.
pub fn batch_teacher(ds: &Dataset, batch: &Batch) -> Result<(PairwiseMatrix, Vec<SimilarityDistribution>)> {
    let n_teachers = ds.teachers.len();
    let videos: Vec<Vec<Tensor>> = (0..n_teachers)
        .map(|t| batch.videos.iter().map(|&v| ds.videos[v].teacher[t].to_tensor()).collect())
        .collect();
    let queries: Vec<Vec<Vec<f64>>> = (0..n_teachers)
        .map(|t| batch.queries.iter().map(|&q| ds.queries[q].teacher[t].first_row_f64()).collect())
        .collect();
    let views: Vec<TeacherView<'_>> = videos
        .iter()
        .zip(&queries)
        .map(|(v, q)| TeacherView {
            videos: v.iter().collect(),
            queries: q.iter().map(Vec::as_slice).collect(),
        })
        .collect();
    let matrix = teacher_pairwise(&views)?;
    let positives = (0..batch.len())
        .map(|i| {
            let dists = views
                .iter()
                .map(|view| frame_distribution(view.videos[i], view.queries[i]))
                .collect::<Result<Vec<_>>>()?;
            fuse_teachers(&dists)
        })
        .collect::<Result<_>>()?;
    Ok((matrix, positives))
}

/// Forward both branches on `batch`, assemble `L = L_I + L_E` and apply one
/// optimizer update. The teacher features are only read.
///
/// NaN/Inf in the loss or in intermediate activations is reported as
/// [`Error::NonFinite`] with the batch's ids.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut ModelState,
    opt: &mut AdamState,
    ds: &Dataset,
    batch: &Batch,
    sched: ScheduleState,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<StepLosses> {
    step_inner(state, opt, ds, batch, sched, cfg).map_err(|e| match e {
        Error::Numerical(_) => Error::NonFinite {
            epoch,
            step,
            video_ids: batch.video_ids(ds),
            query_ids: batch.query_ids(ds),
        },
        other => other,
    })
}

fn step_inner(
    state: &mut ModelState,
    opt: &mut AdamState,
    ds: &Dataset,
    batch: &Batch,
    sched: ScheduleState,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let n = batch.len();
    let video_t: Vec<Tensor> = batch.videos.iter().map(|&v| ds.videos[v].features.to_tensor()).collect();
    let query_t: Vec<Tensor> = batch.queries.iter().map(|&q| ds.queries[q].features.to_tensor()).collect();
    let (videos, queries): (Vec<&Tensor>, Vec<&Tensor>) = (video_t.iter().collect(), query_t.iter().collect());
    let mode = cfg.branches;

    let mut tape = Tape::new();
    let mut losses = StepLosses::default();
    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
        Ok(())
    };

    let mut inh_vars = None;
    if mode.trains_inheritance() {
        let (bound, fwd) = forward_branch(&mut tape, &state.inheritance, &videos, &queries)?;
        let s_value = PairwiseMatrix::from_tensor(tape.value(fwd.pooled))?;
        if mode.uses_teacher() {
            let (teacher, ct) = batch_teacher(ds, batch)?;
            let targets = targets_from(&teacher, sched, cfg)?;
            let mut cs = Vec::with_capacity(n);
            for (i, seg) in fwd.segments.iter().enumerate() {
                if seg.len() != ct[i].len() {
                    return Err(Error::Dimension(format!(
                        "video {:?}: {} student frames vs {} teacher frames",
                        ds.videos[batch.videos[i]].id,
                        seg.len(),
                        ct[i].len()
                    )));
                }
                let idx: Vec<usize> = seg.clone().map(|r| r * n + i).collect();
                cs.push(tape.gather(fwd.cos, idx, vec![seg.len()])?);
            }
            let l = inheritance_loss(&mut tape, fwd.pooled, &targets, &cs, &ct, sched.w, cfg.margin, cfg.temperature, cfg.tau_kl)?;
            losses.inheritance = Some(tape.value(l.total).item());
            losses.consistency = Some(tape.value(l.consistency).item());
            add(&mut tape, l.total)?;
        } else {
            let targets = targets_from(&s_value, sched, cfg)?;
            let l = exploration_loss(&mut tape, fwd.pooled, &targets, cfg.margin, cfg.temperature)?;
            losses.inheritance = Some(tape.value(l.total).item());
            add(&mut tape, l.total)?;
        }
        inh_vars = Some(bound.vars());
    }

    let mut exp_vars = None;
    if mode.trains_exploration() {
        let (bound, fwd) = forward_branch(&mut tape, &state.exploration, &videos, &queries)?;
        let s_value = PairwiseMatrix::from_tensor(tape.value(fwd.pooled))?;
        let targets = targets_from(&s_value, sched, cfg)?;
        let l = exploration_loss(&mut tape, fwd.pooled, &targets, cfg.margin, cfg.temperature)?;
        losses.exploration = Some(tape.value(l.total).item());
        add(&mut tape, l.total)?;
        exp_vars = Some(bound.vars());
    }

    let total = total.ok_or_else(|| Error::Config("no branch is trained".into()))?;
    losses.total = tape.value(total).item();
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", losses.total)));
    }
    tape.backward(total)?;

    let n_inh = state.inheritance.video.params().len() + state.inheritance.text.params().len();
    let n_exp = state.exploration.video.params().len() + state.exploration.text.params().len();
    let mut grads: Vec<Option<&Tensor>> = Vec::with_capacity(n_inh + n_exp);
    for (vars, count) in [(&inh_vars, n_inh), (&exp_vars, n_exp)] {
        match vars {
            Some(vs) => grads.extend(vs.iter().map(|&v| tape.grad(v))),
            None => grads.extend(std::iter::repeat_n(None, count)),
        }
    }
    let mut params = state.params_mut();
    optimizer_step(opt, &mut params, &grads, cfg.learning_rate)?;
    Ok(losses)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub exploration: Option<f64>,
    pub inheritance: Option<f64>,
    pub consistency: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub losses: EpochLosses,
    pub w: f64,
    pub alpha: f64,
    pub beta: f64,
    pub validation: RecallReport,
}

pub fn write_log<W: Write>(mut w: W, logs: &[EpochLog]) -> std::io::Result<()> {
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub struct FitOutcome {
    /// Best state by validation SumR (the initial state when no epoch ran).
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
    pub pools: SplitPools,
}

/// Schedule values at the start of `epoch` for a given number of steps per
/// epoch.
pub fn schedule_at_epoch(cfg: &TrainConfig, epoch: usize, steps_per_epoch: usize) -> Result<ScheduleState> {
    cfg.schedules.state(epoch, epoch * steps_per_epoch)
}

/// Train and validation pools of `ds` for this config.
pub fn training_pools(cfg: &TrainConfig, ds: &Dataset) -> Result<SplitPools> {
    let pools = split_pools(ds, cfg.seed);
    if pools.train.is_empty() {
        return Err(Error::Config("dataset has no training videos".into()));
    }
    if queries_in(ds, &pools.val).is_empty() {
        return Err(Error::Config("dataset has no validation queries".into()));
    }
    Ok(pools)
}

pub fn fit(cfg: &TrainConfig, ds: &Dataset) -> Result<FitOutcome> {
    fit_with(cfg, ds, |_, _| Ok(()))
}

/// Trains up to `max_epochs`, validating after each epoch and stopping once
/// SumR has not improved for `patience` epochs.
///
/// `observer(t, state)` sees the state before epoch `t` trains and, after
/// the last epoch, the final state with `t` equal to the epochs run.
pub fn fit_with(cfg: &TrainConfig, ds: &Dataset, mut observer: impl FnMut(usize, &ModelState) -> Result<()>) -> Result<FitOutcome> {
    cfg.validate()?;
    if cfg.branches.uses_teacher() && ds.teachers.is_empty() {
        return Err(Error::Config(format!("{:?} training needs teacher features", cfg.branches)));
    }
    let ds = ds.capped(cfg.model.max_frames);
    let pools = training_pools(cfg, &ds)?;
    let val_queries = queries_in(&ds, &pools.val);
    let mut state = ModelState::init(&cfg.model, &ds.dims, cfg.seed)?;
    let named = state.named_params();
    let mut opt = AdamState::new(&named.iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let sigma = cfg.effective_sigma();

    let mut best = state.clone();
    let mut best_epoch = None;
    let mut best_sum = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        observer(epoch, &state)?;
        let batches = make_batches(&ds, &pools.train, cfg.batch_size, cfg.seed, epoch)?;
        let at_start = cfg.schedules.state(epoch, step)?;
        let mut sums = EpochLosses::default();
        let (mut e_sum, mut i_sum, mut c_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let sched = cfg.schedules.state(epoch, step)?;
            let l = train_step(&mut state, &mut opt, &ds, batch, sched, cfg, epoch, step)?;
            sums.total += l.total;
            e_sum += l.exploration.unwrap_or(0.0);
            i_sum += l.inheritance.unwrap_or(0.0);
            c_sum += l.consistency.unwrap_or(0.0);
            step += 1;
        }
        let k = batches.len() as f64;
        let mode = cfg.branches;
        let losses = EpochLosses {
            total: sums.total / k,
            exploration: mode.trains_exploration().then_some(e_sum / k),
            inheritance: mode.trains_inheritance().then_some(i_sum / k),
            consistency: mode.uses_teacher().then_some(c_sum / k),
        };
        let validation = recall_report(&rank_all(&state, &ds, &pools.val, &val_queries, sigma)?)?;
        logs.push(EpochLog {
            epoch,
            steps: batches.len(),
            losses,
            w: at_start.w,
            alpha: at_start.alpha,
            beta: at_start.beta,
            validation,
        });
        if validation.sum_r > best_sum {
            best_sum = validation.sum_r;
            best = state.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    observer(logs.len(), &state)?;
    Ok(FitOutcome {
        best,
        best_epoch,
        logs,
        pools,
    })
}

/// Soft targets both branches would train on for `batch` at `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTargets {
    pub schedule: ScheduleState,
    pub exploration: SoftTargets,
    /// Teacher-guided targets; `None` without teacher features.
    pub inheritance: Option<SoftTargets>,
}

pub fn probe_targets(state: &ModelState, ds: &Dataset, batch: &Batch, cfg: &TrainConfig, sched: ScheduleState) -> Result<ProbeTargets> {
    let pool = encode_pool(&state.exploration, ds, &batch.videos, &batch.queries)?;
    let s = similarity_matrix(&pool.videos, &pool.queries)?;
    let exploration = targets_from(&s, sched, cfg)?;
    let inheritance = if ds.teachers.is_empty() {
        None
    } else {
        Some(targets_from(&batch_teacher(ds, batch)?.0, sched, cfg)?)
    };
    Ok(ProbeTargets {
        schedule: sched,
        exploration,
        inheritance,
    })
}

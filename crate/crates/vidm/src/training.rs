//! Optimization loops for the content stream (truncation constant + robust
//! penalty) and the motion stream (latent + residual trained jointly with the
//! denoiser).

use ndarray::{Array4, ArrayD, Axis};
use std::io::Write;

use crate::data::VideoDataset;
use crate::diffusion::{charbonnier_grad, charbonnier_loss, l1_grad, l1_loss, LossValue, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::ModelBundle;
use crate::nn::param::ParamStore;
use crate::num::Real;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl AdamCfg {
    pub fn with_lr(lr: f64, grad_clip: Option<f64>) -> Self {
        AdamCfg {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub steps: u64,
}

impl<F: Real> AdamState<F> {
    pub fn init(ps: &ParamStore<F>) -> Self {
        let m = ps
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, steps: 0 }
    }
}

/// One optimizer step over every parameter in the store, with optional
/// global-norm gradient clipping. Gradients are left untouched; callers zero
/// them before the next accumulation.
pub fn adam_step<F: Real>(ps: &mut ParamStore<F>, st: &mut AdamState<F>, cfg: &AdamCfg) {
    let scale = match cfg.grad_clip {
        Some(clip) => {
            let mut sq = 0.0f64;
            for e in ps.entries() {
                for g in e.grad.iter() {
                    let gv = g.to_f64();
                    sq += gv * gv;
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    st.steps += 1;
    let t = st.steps as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let one_b1 = F::from_f64(1.0 - cfg.beta1);
    let one_b2 = F::from_f64(1.0 - cfg.beta2);
    let scale_f = F::from_f64(scale);
    let lr = F::from_f64(cfg.lr / bc1);
    let eps = F::from_f64(cfg.eps);
    let bc2_sqrt_inv = F::from_f64(1.0 / bc2.sqrt());
    for (i, e) in ps.entries_mut().iter_mut().enumerate() {
        let m = &mut st.m[i];
        let v = &mut st.v[i];
        let mslice = m.as_slice_mut().unwrap();
        let vslice = v.as_slice_mut().unwrap();
        let gslice = e.grad.as_slice().unwrap();
        let pslice = e.value.as_slice_mut().unwrap();
        for j in 0..gslice.len() {
            let g = gslice[j] * scale_f;
            mslice[j] = b1 * mslice[j] + one_b1 * g;
            vslice[j] = b2 * vslice[j] + one_b2 * g * g;
            let step = lr * mslice[j] / (vslice[j].sqrt() * bc2_sqrt_inv + eps);
            pslice[j] = pslice[j] - step;
        }
    }
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Content,
    Motion,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Content => "content",
            Stream::Motion => "motion",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Stream::Content),
            "motion" => Ok(Stream::Motion),
            other => Err(Error::Usage(format!(
                "unknown stream '{other}', expected content|motion"
            ))),
        }
    }
}

/// Hyperparameters the loops need beyond the architecture.
#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    pub eta: f64,
    pub use_l1: bool,
    pub ema_decay: f64,
    pub flip_augment: bool,
}

pub struct TrainState<F: Real> {
    pub bundle: ModelBundle<F>,
    pub stream: Stream,
    pub adam: AdamState<F>,
    pub step: u64,
    pub rng: Rng,
    pub running_loss: Option<f64>,
}

impl<F: Real> TrainState<F> {
    pub fn new(bundle: ModelBundle<F>, stream: Stream, seed: u64) -> Self {
        let adam = match stream {
            Stream::Content => AdamState::init(&bundle.content.ps),
            Stream::Motion => AdamState::init(&bundle.motion.ps),
        };
        TrainState {
            bundle,
            stream,
            adam,
            step: 0,
            rng: Rng::seed_from(seed),
            running_loss: None,
        }
    }

    fn update_running(&mut self, loss: f64, decay: f64) {
        self.running_loss = Some(match self.running_loss {
            None => loss,
            Some(prev) => decay * prev + (1.0 - decay) * loss,
        });
    }
}

/// A single Algorithm-style training triple: the first frame, the frame just
/// before the target, the target frame, and the target's index.
#[derive(Debug, Clone)]
pub struct FrameTriplet<F: Real> {
    pub x0: ndarray::Array3<F>,
    pub xprev: ndarray::Array3<F>,
    pub xn: ndarray::Array3<F>,
    pub n: usize,
}

/// Draw a random triplet from one video: n ~ Uniform{1..N-1}.
pub fn sample_triplet<F: Real>(video: &Array4<F>, rng: &mut Rng) -> Result<FrameTriplet<F>> {
    let frames = video.dim().0;
    if frames < 2 {
        return Err(Error::Data(format!(
            "triplet sampling needs at least 2 frames, got {frames}"
        )));
    }
    let n = rng.range_inclusive(1, frames - 1);
    Ok(FrameTriplet {
        x0: video.index_axis(Axis(0), 0).to_owned(),
        xprev: video.index_axis(Axis(0), n - 1).to_owned(),
        xn: video.index_axis(Axis(0), n).to_owned(),
        n,
    })
}

fn stack_frames<F: Real>(frames: &[ndarray::Array3<F>]) -> Array4<F> {
    let (c, h, w) = frames[0].dim();
    let mut out = Array4::<F>::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(f);
    }
    out
}

/// Per-item forward noising of a batch.
fn q_sample_batch<F: Real>(
    x0: &Array4<F>,
    t: &[usize],
    eps: &Array4<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Array4<F>> {
    let mut out = x0.clone();
    let one = F::from_f64(1.0);
    for (bi, &tv) in t.iter().enumerate() {
        let ab = schedule.alpha_bar_at(tv)?;
        let c0 = ab.sqrt();
        let c1 = (one - ab).sqrt();
        let mut slice = out.index_axis_mut(Axis(0), bi);
        slice.zip_mut_with(&eps.index_axis(Axis(0), bi), |v, &e| {
            *v = c0 * *v + c1 * e;
        });
    }
    Ok(out)
}

fn finite_or_diverged<F: Real>(loss: F, step: u64) -> Result<f64> {
    let v = loss.to_f64();
    if !v.is_finite() {
        return Err(Error::Diverged { step, loss: v });
    }
    Ok(v)
}

/// One content-stream step: sample t and noise, noise the frames, regress
/// the noise with the robust penalty, update the denoiser and the truncation
/// constant together.
pub fn train_content_step<F: Real>(
    state: &mut TrainState<F>,
    frames: &Array4<F>,
    schedule: &NoiseSchedule<F>,
    cfg: &TrainCfg,
) -> Result<LossValue<F>> {
    debug_assert_eq!(state.stream, Stream::Content);
    let b = frames.dim().0;
    let t_steps = schedule.t_steps;
    let t: Vec<usize> = (0..b)
        .map(|_| state.rng.range_inclusive(1, t_steps))
        .collect();
    let mut eps = Array4::<F>::zeros(frames.dim());
    state.rng.fill_normal(&mut eps);
    let xt = q_sample_batch(frames, &t, &eps, schedule)?;
    let (pred, cache) = state.bundle.content.eps_forward_train(&xt, &t)?;
    let pred_d = pred.into_dyn();
    let eps_d = eps.into_dyn();
    let (loss, grad) = if cfg.use_l1 {
        (l1_loss(&pred_d, &eps_d)?, l1_grad(&pred_d, &eps_d)?)
    } else {
        (
            charbonnier_loss(&pred_d, &eps_d, cfg.eta)?,
            charbonnier_grad(&pred_d, &eps_d, cfg.eta)?,
        )
    };
    let scalar = finite_or_diverged(loss.scalar, state.step)?;
    let dpred = grad.into_dimensionality::<ndarray::Ix4>().unwrap();
    state.bundle.content.ps.zero_grads();
    state.bundle.content.backward(&cache, &dpred);
    adam_step(
        &mut state.bundle.content.ps,
        &mut state.adam,
        &AdamCfg::with_lr(cfg.lr, Some(cfg.grad_clip)),
    );
    state.step += 1;
    state.update_running(scalar, cfg.ema_decay);
    Ok(loss)
}

/// Batched triplets, stacked.
pub struct TripletBatch<F: Real> {
    pub x0: Array4<F>,
    pub xprev: Array4<F>,
    pub xn: Array4<F>,
    pub n: Vec<usize>,
}

impl<F: Real> TripletBatch<F> {
    pub fn from_triplets(triplets: &[FrameTriplet<F>]) -> Self {
        TripletBatch {
            x0: stack_frames(&triplets.iter().map(|t| t.x0.clone()).collect::<Vec<_>>()),
            xprev: stack_frames(&triplets.iter().map(|t| t.xprev.clone()).collect::<Vec<_>>()),
            xn: stack_frames(&triplets.iter().map(|t| t.xn.clone()).collect::<Vec<_>>()),
            n: triplets.iter().map(|t| t.n).collect(),
        }
    }
}

/// One motion-stream step: latent from (first, previous) frames, residual
/// from the first frame and t, noise regression on pred + r; updates the
/// denoiser, residual encoder, and latent encoder jointly.
pub fn train_motion_step<F: Real>(
    state: &mut TrainState<F>,
    batch: &TripletBatch<F>,
    schedule: &NoiseSchedule<F>,
    cfg: &TrainCfg,
) -> Result<LossValue<F>> {
    debug_assert_eq!(state.stream, Stream::Motion);
    let b = batch.xn.dim().0;
    let t_steps = schedule.t_steps;
    let t: Vec<usize> = (0..b)
        .map(|_| state.rng.range_inclusive(1, t_steps))
        .collect();
    let mut eps = Array4::<F>::zeros(batch.xn.dim());
    state.rng.fill_normal(&mut eps);
    let (cond, latent_cache) = state.bundle.motion.conditioning(&batch.x0, &batch.xprev)?;
    let (r, residual_cache) = state.bundle.motion.residual_encode(&batch.x0, &t)?;
    let xnt = q_sample_batch(&batch.xn, &t, &eps, schedule)?;
    let num_frames = state.bundle.cfg.num_frames;
    let (pred, motion_cache) =
        state
            .bundle
            .motion
            .motion_forward_train(&xnt, &cond, &t, &batch.n, num_frames)?;
    let total = (&pred + &r).into_dyn();
    let eps_d = eps.into_dyn();
    let (loss, grad) = if cfg.use_l1 {
        (l1_loss(&total, &eps_d)?, l1_grad(&total, &eps_d)?)
    } else {
        (
            charbonnier_loss(&total, &eps_d, cfg.eta)?,
            charbonnier_grad(&total, &eps_d, cfg.eta)?,
        )
    };
    let scalar = finite_or_diverged(loss.scalar, state.step)?;
    let dtotal = grad.into_dimensionality::<ndarray::Ix4>().unwrap();
    state.bundle.motion.ps.zero_grads();
    // d(pred) and d(r) are both d(total).
    let dcond = state.bundle.motion.motion_backward(&motion_cache, &dtotal);
    if let Some(rc) = &residual_cache {
        state.bundle.motion.residual_backward(rc, &dtotal);
    }
    if let Some(lc) = &latent_cache {
        state.bundle.motion.latent_backward(lc, &dcond);
    }
    adam_step(
        &mut state.bundle.motion.ps,
        &mut state.adam,
        &AdamCfg::with_lr(cfg.lr, Some(cfg.grad_clip)),
    );
    state.step += 1;
    state.update_running(scalar, cfg.ema_decay);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Full fit loop
// ---------------------------------------------------------------------------

/// Runs the stream's step function for `cfg.max_steps`, drawing batches from
/// the dataset. Batch contents at step k are a pure function of
/// (dataset, data_seed, k), so resuming from a checkpoint reproduces the
/// uninterrupted run bitwise.
///
/// `on_checkpoint` is invoked every `ckpt_every` steps (and at the end).
#[allow(clippy::too_many_arguments)]
pub fn fit<F: Real>(
    mut state: TrainState<F>,
    dataset: &VideoDataset,
    schedule: &NoiseSchedule<F>,
    cfg: &TrainCfg,
    data_seed: u64,
    log: &mut dyn Write,
    mut on_checkpoint: Option<&mut dyn FnMut(&TrainState<F>) -> Result<()>>,
) -> Result<TrainState<F>> {
    if dataset.manifest.video_count == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    let iter = crate::data::BatchIter::new(dataset, cfg.batch_size, data_seed)?
        .with_flip(cfg.flip_augment);
    while state.step < cfg.max_steps {
        let k = state.step;
        let loss = match state.stream {
            Stream::Content => {
                let frames: Array4<F> = iter.frame_batch_at(k);
                train_content_step(&mut state, &frames, schedule, cfg)?
            }
            Stream::Motion => {
                let batch: TripletBatch<F> = iter.triplet_batch_at(k)?;
                train_motion_step(&mut state, &batch, schedule, cfg)?
            }
        };
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            writeln!(
                log,
                "step={} stream={} loss={} lr={}",
                state.step,
                state.stream.name(),
                loss.scalar,
                cfg.lr
            )?;
        }
        if cfg.ckpt_every > 0 && state.step % cfg.ckpt_every == 0 {
            if let Some(cb) = on_checkpoint.as_mut() {
                cb(&state)?;
            }
        }
    }
    if let Some(cb) = on_checkpoint.as_mut() {
        cb(&state)?;
    }
    Ok(state)
}

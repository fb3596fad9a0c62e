//! Pure numerical core of the diffusion process.
//!
//! Schedules, forward noising, the reverse sampling step, and the training
//! losses. No network code lives here; everything is a pure function over
//! immutable inputs, safe to call from any number of workers.

use ndarray::{ArrayD, ArrayViewD};

use crate::error::{Error, Result};
use crate::num::Real;

/// How the reverse-step noise scale σ_t is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// σ_t = √β_t (the small-variance choice; default).
    SqrtBeta,
    /// σ_t = √(β_t · (1 − ᾱ_{t−1}) / (1 − ᾱ_t)) (posterior variance).
    Posterior,
}

/// Per-timestep coefficients of the forward/reverse process.
///
/// Timesteps are 1-indexed: `beta[t-1]` is β_t for t in 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<F: Real> {
    pub t_steps: usize,
    pub beta: Vec<F>,
    pub alpha: Vec<F>,
    pub alpha_bar: Vec<F>,
    pub sigma: Vec<F>,
}

impl<F: Real> NoiseSchedule<F> {
    #[inline]
    fn idx(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.t_steps {
            return Err(Error::Shape(format!(
                "timestep {t} out of range 1..={}",
                self.t_steps
            )));
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> Result<F> {
        Ok(self.beta[self.idx(t)?])
    }
    pub fn alpha_at(&self, t: usize) -> Result<F> {
        Ok(self.alpha[self.idx(t)?])
    }
    pub fn alpha_bar_at(&self, t: usize) -> Result<F> {
        Ok(self.alpha_bar[self.idx(t)?])
    }
    pub fn sigma_at(&self, t: usize) -> Result<F> {
        Ok(self.sigma[self.idx(t)?])
    }

    /// Recast the coefficient arrays into another float width.
    pub fn cast<G: Real>(&self) -> NoiseSchedule<G> {
        let c = |v: &[F]| v.iter().map(|x| G::from_f64(x.to_f64())).collect();
        NoiseSchedule {
            t_steps: self.t_steps,
            beta: c(&self.beta),
            alpha: c(&self.alpha),
            alpha_bar: c(&self.alpha_bar),
            sigma: c(&self.sigma),
        }
    }
}

/// A noised sample together with its timestep.
#[derive(Debug, Clone)]
pub struct NoisySample<F: Real> {
    pub value: ArrayD<F>,
    pub t: usize,
}

/// Loss with its elementwise penalties kept around for diagnostics.
#[derive(Debug, Clone)]
pub struct LossValue<F: Real> {
    pub scalar: F,
    pub per_element: Option<ArrayD<F>>,
}

/// Linear-β schedule with σ_t = √β_t, and σ_1 forced to 0 when
/// `deterministic_last` is set so the final reverse step adds no noise.
pub fn make_linear_schedule<F: Real>(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    deterministic_last: bool,
) -> Result<NoiseSchedule<F>> {
    make_schedule(
        t_steps,
        beta_start,
        beta_end,
        deterministic_last,
        SigmaMode::SqrtBeta,
    )
}

/// Linear-β schedule with a selectable σ_t derivation.
pub fn make_schedule<F: Real>(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    deterministic_last: bool,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule<F>> {
    if t_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    // Coefficients are derived in f64 and cast once, so f32 and f64 schedules
    // describe the same process.
    let mut beta = Vec::with_capacity(t_steps);
    let mut alpha = Vec::with_capacity(t_steps);
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut sigma = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    let mut prev_bar = 1.0f64;
    for i in 0..t_steps {
        let frac = if t_steps == 1 {
            0.0
        } else {
            i as f64 / (t_steps - 1) as f64
        };
        let b = beta_start + (beta_end - beta_start) * frac;
        let a = 1.0 - b;
        prod *= a;
        let s = match sigma_mode {
            SigmaMode::SqrtBeta => b.sqrt(),
            SigmaMode::Posterior => (b * (1.0 - prev_bar) / (1.0 - prod)).sqrt(),
        };
        prev_bar = prod;
        beta.push(F::from_f64(b));
        alpha.push(F::from_f64(a));
        alpha_bar.push(F::from_f64(prod));
        sigma.push(F::from_f64(s));
    }
    if deterministic_last {
        sigma[0] = F::from_f64(0.0);
    }
    Ok(NoiseSchedule {
        t_steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

fn check_shapes<F: Real>(a: &ArrayViewD<F>, b: &ArrayViewD<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward noising: value = √ᾱ_t · x0 + √(1−ᾱ_t) · eps.
pub fn q_sample<F: Real>(
    x0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<NoisySample<F>> {
    check_shapes(&x0.view(), &eps.view(), "q_sample x0/eps")?;
    let ab = schedule.alpha_bar_at(t)?;
    let one = F::from_f64(1.0);
    let c0 = ab.sqrt();
    let c1 = (one - ab).sqrt();
    let mut value = x0.clone();
    value.zip_mut_with(eps, |v, &e| *v = c0 * *v + c1 * e);
    Ok(NoisySample { value, t })
}

/// One reverse step:
/// (1/√α_t)·(x_t − ((1−α_t)/√(1−ᾱ_t))·eps_pred) + σ_t·noise.
pub fn reverse_step<F: Real>(
    xt: &ArrayD<F>,
    eps_pred: &ArrayD<F>,
    t: usize,
    schedule: &NoiseSchedule<F>,
    noise: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    check_shapes(&xt.view(), &eps_pred.view(), "reverse_step xt/eps_pred")?;
    check_shapes(&xt.view(), &noise.view(), "reverse_step xt/noise")?;
    let a = schedule.alpha_at(t)?;
    let ab = schedule.alpha_bar_at(t)?;
    let s = schedule.sigma_at(t)?;
    let one = F::from_f64(1.0);
    let inv_sqrt_a = one / a.sqrt();
    let coef = (one - a) / (one - ab).sqrt();
    let mut out = xt.clone();
    out.zip_mut_with(eps_pred, |o, &e| *o = inv_sqrt_a * (*o - coef * e));
    out.zip_mut_with(noise, |o, &n| *o = *o + s * n);
    Ok(out)
}

/// Mean absolute error with per-element magnitudes.
pub fn l1_loss<F: Real>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<LossValue<F>> {
    check_shapes(&pred.view(), &target.view(), "l1_loss")?;
    let mut per = pred.clone();
    per.zip_mut_with(target, |p, &t| *p = (*p - t).abs());
    let scalar = mean(&per);
    Ok(LossValue {
        scalar,
        per_element: Some(per),
    })
}

/// Smooth robust penalty: per-element √((pred − target)² + η²), mean-reduced.
///
/// Everywhere differentiable; the gradient at zero residual is exactly 0 and
/// every elementwise term is at least η.
pub fn charbonnier_loss<F: Real>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    eta: f64,
) -> Result<LossValue<F>> {
    check_shapes(&pred.view(), &target.view(), "charbonnier_loss")?;
    if !(eta > 0.0) {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    let eta2 = F::from_f64(eta * eta);
    let mut per = pred.clone();
    per.zip_mut_with(target, |p, &t| {
        let r = *p - t;
        *p = (r * r + eta2).sqrt();
    });
    let scalar = mean(&per);
    Ok(LossValue {
        scalar,
        per_element: Some(per),
    })
}

/// Gradient of `charbonnier_loss` w.r.t. `pred` under mean reduction:
/// (pred − target) / (n · √((pred − target)² + η²)).
pub fn charbonnier_grad<F: Real>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    eta: f64,
) -> Result<ArrayD<F>> {
    check_shapes(&pred.view(), &target.view(), "charbonnier_grad")?;
    let eta2 = F::from_f64(eta * eta);
    let inv_n = F::from_f64(1.0 / pred.len() as f64);
    let mut g = pred.clone();
    g.zip_mut_with(target, |p, &t| {
        let r = *p - t;
        *p = inv_n * r / (r * r + eta2).sqrt();
    });
    Ok(g)
}

/// Gradient of `l1_loss` w.r.t. `pred` under mean reduction: sign(r)/n, with
/// subgradient 0 at r = 0.
pub fn l1_grad<F: Real>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<ArrayD<F>> {
    check_shapes(&pred.view(), &target.view(), "l1_grad")?;
    let inv_n = F::from_f64(1.0 / pred.len() as f64);
    let zero = F::from_f64(0.0);
    let mut g = pred.clone();
    g.zip_mut_with(target, |p, &t| {
        let r = *p - t;
        *p = if r > zero {
            inv_n
        } else if r < zero {
            zero - inv_n
        } else {
            zero
        };
    });
    Ok(g)
}

fn mean<F: Real>(arr: &ArrayD<F>) -> F {
    // Sequential sum in f64 keeps the reduction deterministic and accurate
    // regardless of the element type.
    let mut acc = 0.0f64;
    for v in arr.iter() {
        acc += v.to_f64();
    }
    F::from_f64(acc / arr.len() as f64)
}

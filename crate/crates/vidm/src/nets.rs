//! The parameterized function approximators: content denoiser with a
//! learnable truncation constant, motion denoiser with positional group
//! normalization, the coarse-to-fine motion-latent encoder, and the adaptive
//! feature-residual encoder.

use ndarray::{s, Array3, Array4, Axis};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Conv2dCache, NormMode};
use crate::nn::ops;
use crate::nn::param::{Init, ParamId, ParamStore};
use crate::nn::posgn::{normalize_frame_index, normalize_timestep, CoordCache};
use crate::nn::unet::{CondInput, UNet, UNetCache, UNetCfg};
use crate::num::Real;
use crate::rng::Rng;

/// What the motion denoiser is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Flow-like latent from the first and latest frame (default).
    PairLatent,
    /// Zero maps in place of the latent (implicit conditioning removed).
    Zero,
    /// The raw previous frame, channel-concatenated (naive autoregressive
    /// baseline; no learned latent at all).
    PrevFrame,
}

/// Architecture hyperparameters shared by all networks.
#[derive(Debug, Clone)]
pub struct ModelCfg {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub ch_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attn_res: usize,
    pub heads: usize,
    pub max_groups: usize,
    pub time_emb_dim: usize,
    pub latent_channels: usize,
    pub latent_levels: usize,
    pub latent_width: usize,
    pub posgn_hidden: usize,
    pub omega: f64,
    pub t_steps: usize,
    pub num_frames: usize,
    pub no_truncation: bool,
    pub no_posgn: bool,
    pub no_residual: bool,
    pub latent_mode: LatentMode,
    pub zero_init_out: bool,
}

/// Flow-like conditioning map with the frame indices it came from.
#[derive(Debug, Clone)]
pub struct MotionLatent<F: Real> {
    pub value: Array4<F>,
    pub source_pair: (usize, usize),
}

/// A single frame (C, H, W).
pub type Frame<F> = Array3<F>;

// ---------------------------------------------------------------------------
// Content model
// ---------------------------------------------------------------------------

pub struct ContentModel<F: Real> {
    pub ps: ParamStore<F>,
    pub unet: UNet,
    /// Learnable truncation constant (C, H, W); absent when disabled.
    pub c: Option<ParamId>,
    pub channels: usize,
}

pub struct ContentCache<F: Real> {
    unet: UNetCache<F>,
}

impl<F: Real> ContentModel<F> {
    pub fn init(cfg: &ModelCfg, rng: &mut Rng) -> Result<Self> {
        let mut ps = ParamStore::new();
        let in_ch = if cfg.no_truncation {
            cfg.channels
        } else {
            2 * cfg.channels
        };
        let unet = UNet::init(
            &mut ps,
            rng,
            "eps",
            UNetCfg {
                in_ch,
                out_ch: cfg.channels,
                width: cfg.base_width,
                ch_mult: cfg.ch_mult.clone(),
                res_blocks: cfg.res_blocks,
                attn_res: cfg.attn_res,
                heads: cfg.heads,
                max_groups: cfg.max_groups,
                height: cfg.height,
                width_px: cfg.width,
                mode: NormMode::AdaTime {
                    emb_dim: cfg.time_emb_dim,
                },
                zero_init_out: cfg.zero_init_out,
            },
        )?;
        let c = if cfg.no_truncation {
            None
        } else {
            Some(ps.add(
                "trunc_c",
                Init::Zero.sample(&[cfg.channels, cfg.height, cfg.width], rng),
            ))
        };
        Ok(ContentModel {
            ps,
            unet,
            c,
            channels: cfg.channels,
        })
    }

    fn assemble_input(&self, xt: &Array4<F>) -> Array4<F> {
        match self.c {
            None => xt.clone(),
            Some(cid) => {
                let (b, c, h, w) = xt.dim();
                let cv = self.ps.value(cid);
                let cv = cv
                    .view()
                    .into_shape_with_order((c, h, w))
                    .expect("truncation constant shape");
                let mut cb = Array4::<F>::zeros((b, c, h, w));
                for bi in 0..b {
                    cb.index_axis_mut(Axis(0), bi).assign(&cv);
                }
                ops::concat_channels(xt, &cb)
            }
        }
    }

    /// Predicted noise for a noisy frame batch; the network input is the
    /// channel concatenation of the frame and the truncation constant.
    pub fn eps_forward(&self, xt: &Array4<F>, t: &[usize]) -> Result<Array4<F>> {
        Ok(self.eps_forward_train(xt, t)?.0)
    }

    pub fn eps_forward_train(
        &self,
        xt: &Array4<F>,
        t: &[usize],
    ) -> Result<(Array4<F>, ContentCache<F>)> {
        let input = self.assemble_input(xt);
        let (pred, unet) = self
            .unet
            .forward(&self.ps, &input, CondInput::Time { t }, None)?;
        Ok((pred, ContentCache { unet }))
    }

    /// Accumulates gradients for the denoiser parameters and the truncation
    /// constant.
    pub fn backward(&mut self, cache: &ContentCache<F>, dpred: &Array4<F>) {
        let ContentModel { ps, unet, .. } = self;
        let din = unet.backward(ps, &cache.unet, dpred);
        if let Some(cid) = self.c {
            let (b, _, h, w) = din.dim();
            let c = self.channels;
            let mut dc = Array3::<F>::zeros((c, h, w));
            for bi in 0..b {
                dc.zip_mut_with(&din.slice(s![bi, c.., .., ..]), |a, &d| *a = *a + d);
            }
            self.ps.accum_grad(cid, &dc.into_dyn());
        }
    }
}

// ---------------------------------------------------------------------------
// Latent encoder (coarse-to-fine pyramid)
// ---------------------------------------------------------------------------

struct LatentLevel {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

pub struct LatentEncoder {
    levels: Vec<LatentLevel>, // index 0 = coarsest
    pub latent_channels: usize,
    pub num_levels: usize,
}

pub struct LatentCache<F: Real> {
    per_level: Vec<LatentLevelCache<F>>, // coarse to fine
}

struct LatentLevelCache<F: Real> {
    c1: Conv2dCache<F>,
    z1: Array4<F>, // conv1 output, pre-silu
    c2: Conv2dCache<F>,
    z2: Array4<F>,
    c3: Conv2dCache<F>,
}

impl LatentEncoder {
    /// Downsampling factor of the finest output grid.
    pub const FINEST_STRIDE: usize = 4;

    pub fn init<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, cfg: &ModelCfg) -> Result<Self> {
        let coarsest = Self::FINEST_STRIDE << (cfg.latent_levels - 1);
        if cfg.height % coarsest != 0 || cfg.width % coarsest != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} not divisible by coarsest pyramid factor {coarsest}",
                cfg.height, cfg.width
            )));
        }
        let lc = cfg.latent_channels;
        let lw = cfg.latent_width;
        let in_ch = 2 * cfg.channels + lc;
        let mut levels = Vec::new();
        for l in 0..cfg.latent_levels {
            let c1 = Conv2d::init(
                ps,
                rng,
                &format!("v.l{l}.c1"),
                in_ch,
                lw,
                3,
                1,
                1,
                Init::He { fan_in: in_ch * 9 },
            );
            let c2 = Conv2d::init(
                ps,
                rng,
                &format!("v.l{l}.c2"),
                lw,
                lw,
                3,
                1,
                1,
                Init::He { fan_in: lw * 9 },
            );
            // Zero-init refinement head so the latent starts at exactly zero.
            let c3 = Conv2d::init(ps, rng, &format!("v.l{l}.c3"), lw, lc, 3, 1, 1, Init::Zero);
            levels.push(LatentLevel { c1, c2, c3 });
        }
        Ok(LatentEncoder {
            levels,
            latent_channels: lc,
            num_levels: cfg.latent_levels,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h / Self::FINEST_STRIDE, w / Self::FINEST_STRIDE)
    }

    /// Each level refines the upsampled latent from the coarser level with a
    /// residual predicted from the downsampled frame pair.
    pub fn encode<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x0: &Array4<F>,
        xprev: &Array4<F>,
    ) -> Result<(Array4<F>, LatentCache<F>)> {
        if x0.dim() != xprev.dim() {
            return Err(Error::Shape(format!(
                "latent encoder frames differ: {:?} vs {:?}",
                x0.dim(),
                xprev.dim()
            )));
        }
        let (b, _c, _h, _w) = x0.dim();
        let pair = ops::concat_channels(x0, xprev);
        // Frame pyramid: /2, /4 (= finest level), ..., down to the coarsest.
        let mut pyramid = vec![pair];
        for _ in 0..self.num_levels + 1 {
            let next = ops::avgpool2(pyramid.last().unwrap());
            pyramid.push(next);
        }
        let mut z: Option<Array4<F>> = None;
        let mut caches = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            // Level l (0 = coarsest) works on pyramid index (levels + 1 - l).
            let frames = &pyramid[self.num_levels + 1 - l];
            let (_, _, lh, lww) = frames.dim();
            let zu = match z.take() {
                Some(prev) => ops::upsample_nearest2_forward(&prev),
                None => Array4::<F>::zeros((b, self.latent_channels, lh, lww)),
            };
            let input = ops::concat_channels(frames, &zu);
            let (z1, c1) = level.c1.forward(ps, &input);
            let a1 = ops::silu_forward(&z1);
            let (z2, c2) = level.c2.forward(ps, &a1);
            let a2 = ops::silu_forward(&z2);
            let (r, c3) = level.c3.forward(ps, &a2);
            z = Some(&zu + &r);
            caches.push(LatentLevelCache { c1, z1, c2, z2, c3 });
        }
        Ok((z.unwrap(), LatentCache { per_level: caches }))
    }

    /// Accumulates parameter gradients given d(z); frame inputs are leaves.
    pub fn backward<F: Real>(&self, ps: &mut ParamStore<F>, cache: &LatentCache<F>, dz: &Array4<F>) {
        let mut dz = dz.clone();
        for (l, level) in self.levels.iter().enumerate().rev() {
            let lc = &cache.per_level[l];
            // z = zu + r: dz feeds both the residual head and the skip.
            let da2 = level.c3.backward(ps, &lc.c3, &dz);
            let dz2 = ops::silu_backward(&lc.z2, &da2);
            let da1 = level.c2.backward(ps, &lc.c2, &dz2);
            let dz1 = ops::silu_backward(&lc.z1, &da1);
            let dinput = level.c1.backward(ps, &lc.c1, &dz1);
            let frame_ch = dinput.dim().1 - self.latent_channels;
            let (_dframes, dzu_from_input) = ops::split_channels(&dinput, frame_ch);
            let mut dzu = dz;
            dzu.zip_mut_with(&dzu_from_input, |a, &v| *a = *a + v);
            if l == 0 {
                break; // coarsest zu is the constant zero
            }
            dz = ops::upsample_nearest2_backward(&dzu);
        }
    }
}

// ---------------------------------------------------------------------------
// Motion model (denoiser + latent encoder + residual encoder)
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct CallCounters {
    pub motion_forward: AtomicU64,
    pub latent_encode: AtomicU64,
    pub residual_encode: AtomicU64,
}

impl CallCounters {
    pub fn reset(&self) {
        self.motion_forward.store(0, Ordering::Relaxed);
        self.latent_encode.store(0, Ordering::Relaxed);
        self.residual_encode.store(0, Ordering::Relaxed);
    }
    pub fn motion(&self) -> u64 {
        self.motion_forward.load(Ordering::Relaxed)
    }
    pub fn latent(&self) -> u64 {
        self.latent_encode.load(Ordering::Relaxed)
    }
    pub fn residual(&self) -> u64 {
        self.residual_encode.load(Ordering::Relaxed)
    }
}

pub struct MotionModel<F: Real> {
    pub ps: ParamStore<F>,
    pub unet: UNet,
    pub residual: Option<UNet>,
    pub latent: Option<LatentEncoder>,
    pub coord_cache: CoordCache<F>,
    pub counters: CallCounters,
    pub cfg: ModelCfg,
}

pub struct MotionCache<F: Real> {
    unet: UNetCache<F>,
    cond_hw: (usize, usize),
}

impl<F: Real> MotionModel<F> {
    pub fn init(cfg: &ModelCfg, rng: &mut Rng) -> Result<Self> {
        let mut ps = ParamStore::new();
        let cond_ch = match cfg.latent_mode {
            LatentMode::PairLatent | LatentMode::Zero => cfg.latent_channels,
            LatentMode::PrevFrame => cfg.channels,
        };
        let mode = if cfg.no_posgn {
            NormMode::AdaTime {
                emb_dim: cfg.time_emb_dim,
            }
        } else {
            NormMode::Pos {
                hidden: cfg.posgn_hidden,
                omega: cfg.omega,
            }
        };
        let unet = UNet::init(
            &mut ps,
            rng,
            "rho",
            UNetCfg {
                in_ch: cfg.channels + cond_ch,
                out_ch: cfg.channels,
                width: cfg.base_width,
                ch_mult: cfg.ch_mult.clone(),
                res_blocks: cfg.res_blocks,
                attn_res: cfg.attn_res,
                heads: cfg.heads,
                max_groups: cfg.max_groups,
                height: cfg.height,
                width_px: cfg.width,
                mode,
                zero_init_out: cfg.zero_init_out,
            },
        )?;
        let residual = if cfg.no_residual {
            None
        } else {
            Some(UNet::init(
                &mut ps,
                rng,
                "rho_hat",
                UNetCfg {
                    in_ch: cfg.channels,
                    out_ch: cfg.channels,
                    width: cfg.base_width,
                    ch_mult: cfg.ch_mult.clone(),
                    res_blocks: cfg.res_blocks,
                    attn_res: cfg.attn_res,
                    heads: cfg.heads,
                    max_groups: cfg.max_groups,
                    height: cfg.height,
                    width_px: cfg.width,
                    mode: NormMode::AdaTime {
                        emb_dim: cfg.time_emb_dim,
                    },
                    // The residual must start at exactly zero.
                    zero_init_out: true,
                },
            )?)
        };
        let latent = if cfg.latent_mode == LatentMode::PairLatent {
            Some(LatentEncoder::init(&mut ps, rng, cfg)?)
        } else {
            None
        };
        Ok(MotionModel {
            ps,
            unet,
            residual,
            latent,
            coord_cache: CoordCache::new(),
            counters: CallCounters::default(),
            cfg: cfg.clone(),
        })
    }

    pub fn cond_channels(&self) -> usize {
        match self.cfg.latent_mode {
            LatentMode::PairLatent | LatentMode::Zero => self.cfg.latent_channels,
            LatentMode::PrevFrame => self.cfg.channels,
        }
    }

    /// Conditioning input for a batch of (first frame, previous frame) pairs.
    /// In the default mode this is the flow-like latent; callers cache it
    /// across the whole reverse chain of one frame.
    pub fn conditioning(
        &self,
        x0: &Array4<F>,
        xprev: &Array4<F>,
    ) -> Result<(Array4<F>, Option<LatentCache<F>>)> {
        match self.cfg.latent_mode {
            LatentMode::PairLatent => {
                let enc = self.latent.as_ref().expect("latent encoder present");
                self.counters.latent_encode.fetch_add(1, Ordering::Relaxed);
                let (z, cache) = enc.encode(&self.ps, x0, xprev)?;
                Ok((z, Some(cache)))
            }
            LatentMode::Zero => {
                let (b, _, h, w) = x0.dim();
                Ok((
                    Array4::<F>::zeros((b, self.cfg.latent_channels, h / 4, w / 4)),
                    None,
                ))
            }
            LatentMode::PrevFrame => Ok((xprev.clone(), None)),
        }
    }

    /// Adaptive feature residual r for the first frame at timesteps t.
    pub fn residual_encode(
        &self,
        x0: &Array4<F>,
        t: &[usize],
    ) -> Result<(Array4<F>, Option<UNetCache<F>>)> {
        self.check_t(t)?;
        match &self.residual {
            None => Ok((Array4::<F>::zeros(x0.dim()), None)),
            Some(net) => {
                self.counters
                    .residual_encode
                    .fetch_add(1, Ordering::Relaxed);
                let (r, cache) = net.forward(&self.ps, x0, CondInput::Time { t }, None)?;
                Ok((r, Some(cache)))
            }
        }
    }

    fn check_t(&self, t: &[usize]) -> Result<()> {
        for &tv in t {
            if tv < 1 || tv > self.cfg.t_steps {
                return Err(Error::Shape(format!(
                    "timestep {tv} out of range 1..={}",
                    self.cfg.t_steps
                )));
            }
        }
        Ok(())
    }

    fn check_n(&self, n: &[usize], total_frames: usize) -> Result<()> {
        for &nv in n {
            if nv < 1 || nv >= total_frames {
                return Err(Error::Shape(format!(
                    "frame index {nv} out of range 1..{total_frames}"
                )));
            }
        }
        Ok(())
    }

    /// Predicted noise for noisy frames conditioned on `cond` (bilinearly
    /// resized to the input grid and channel-concatenated) at timesteps t,
    /// frame indices n.
    pub fn motion_forward(
        &self,
        xnt: &Array4<F>,
        cond: &Array4<F>,
        t: &[usize],
        n: &[usize],
    ) -> Result<Array4<F>> {
        Ok(self
            .motion_forward_train(xnt, cond, t, n, self.cfg.num_frames)?
            .0)
    }

    pub fn motion_forward_train(
        &self,
        xnt: &Array4<F>,
        cond: &Array4<F>,
        t: &[usize],
        n: &[usize],
        total_frames: usize,
    ) -> Result<(Array4<F>, MotionCache<F>)> {
        self.check_t(t)?;
        self.check_n(n, total_frames)?;
        if t.len() != xnt.dim().0 || n.len() != xnt.dim().0 {
            return Err(Error::Shape("t/n batch size mismatch".into()));
        }
        if cond.dim().1 != self.cond_channels() {
            return Err(Error::Shape(format!(
                "conditioning has {} channels, expected {}",
                cond.dim().1,
                self.cond_channels()
            )));
        }
        self.counters.motion_forward.fetch_add(1, Ordering::Relaxed);
        let (_, _, h, w) = xnt.dim();
        let cond_hw = (cond.dim().2, cond.dim().3);
        let resized = ops::resize_bilinear_forward(cond, h, w);
        let input = ops::concat_channels(xnt, &resized);
        let (pred, unet) = if self.cfg.no_posgn {
            self.unet
                .forward(&self.ps, &input, CondInput::Time { t }, None)?
        } else {
            let n_norm: Vec<f64> = n
                .iter()
                .map(|&nv| normalize_frame_index(nv, total_frames))
                .collect();
            let t_norm: Vec<f64> = t
                .iter()
                .map(|&tv| normalize_timestep(tv, self.cfg.t_steps))
                .collect();
            self.unet.forward(
                &self.ps,
                &input,
                CondInput::Coords {
                    n_norm: &n_norm,
                    t_norm: &t_norm,
                },
                Some(&self.coord_cache),
            )?
        };
        Ok((pred, MotionCache { unet, cond_hw }))
    }

    /// Backward through the motion denoiser; returns d(cond) at the original
    /// conditioning resolution.
    pub fn motion_backward(&mut self, cache: &MotionCache<F>, dpred: &Array4<F>) -> Array4<F> {
        let frame_ch = self.cfg.channels;
        let MotionModel { ps, unet, .. } = self;
        let din = unet.backward(ps, &cache.unet, dpred);
        let (_dxnt, dresized) = ops::split_channels(&din, frame_ch);
        let (ch, cw) = cache.cond_hw;
        ops::resize_bilinear_backward(&dresized, ch, cw)
    }

    /// Backward through the residual encoder.
    pub fn residual_backward(&mut self, cache: &UNetCache<F>, dr: &Array4<F>) {
        let MotionModel { ps, residual, .. } = self;
        if let Some(net) = residual {
            let _ = net.backward(ps, cache, dr);
        }
    }

    /// Backward through the latent encoder.
    pub fn latent_backward(&mut self, cache: &LatentCache<F>, dz: &Array4<F>) {
        let MotionModel { ps, latent, .. } = self;
        if let Some(enc) = latent {
            enc.backward(ps, cache, dz);
        }
    }

    /// Spec-facing single-pair latent computation.
    pub fn latent_encode(&self, x0: &Frame<F>, xprev: &Frame<F>) -> Result<MotionLatent<F>> {
        let x0b = x0.clone().insert_axis(Axis(0));
        let xpb = xprev.clone().insert_axis(Axis(0));
        let (z, _) = self.conditioning(&x0b, &xpb)?;
        Ok(MotionLatent {
            value: z,
            source_pair: (0, 0),
        })
    }
}

// ---------------------------------------------------------------------------
// Vector-mode denoiser
// ---------------------------------------------------------------------------

/// Small MLP noise predictor for non-image data, run through the same
/// schedules, losses, optimizer, and reverse chain as the image stream.
/// Vectors travel as (B, D, 1, 1) so the chain machinery is shared.
pub struct DenseDenoiser<F: Real> {
    pub ps: ParamStore<F>,
    l1: crate::nn::layers::Linear,
    l2: crate::nn::layers::Linear,
    l3: crate::nn::layers::Linear,
    pub dim: usize,
    pub time_dim: usize,
    pub t_steps: usize,
}

pub struct DenseCache<F: Real> {
    c1: crate::nn::layers::LinearCache<F>,
    z1: ndarray::Array2<F>,
    c2: crate::nn::layers::LinearCache<F>,
    z2: ndarray::Array2<F>,
    c3: crate::nn::layers::LinearCache<F>,
}

impl<F: Real> DenseDenoiser<F> {
    pub fn init(dim: usize, hidden: usize, time_dim: usize, t_steps: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(seed);
        use crate::nn::layers::Linear;
        let l1 = Linear::init(
            &mut ps,
            &mut rng,
            "dense.l1",
            dim + time_dim,
            hidden,
            Init::He {
                fan_in: dim + time_dim,
            },
            Init::Zero,
        );
        let l2 = Linear::init(
            &mut ps,
            &mut rng,
            "dense.l2",
            hidden,
            hidden,
            Init::He { fan_in: hidden },
            Init::Zero,
        );
        let l3 = Linear::init(&mut ps, &mut rng, "dense.l3", hidden, dim, Init::Zero, Init::Zero);
        DenseDenoiser {
            ps,
            l1,
            l2,
            l3,
            dim,
            time_dim,
            t_steps,
        }
    }

    fn flatten(x: &Array4<F>) -> ndarray::Array2<F> {
        let (b, d, _, _) = x.dim();
        x.clone()
            .into_shape_with_order((b, d))
            .expect("vector batch is (B, D, 1, 1)")
    }

    pub fn eps_forward(&self, x: &Array4<F>, t: &[usize]) -> Result<Array4<F>> {
        Ok(self.eps_forward_train(x, t)?.0)
    }

    pub fn eps_forward_train(
        &self,
        x: &Array4<F>,
        t: &[usize],
    ) -> Result<(Array4<F>, DenseCache<F>)> {
        let (b, d, _, _) = x.dim();
        if d != self.dim {
            return Err(Error::Shape(format!("vector dim {d} != {}", self.dim)));
        }
        let flat = Self::flatten(x);
        let emb = ops::timestep_embedding::<F>(t, self.time_dim);
        let mut input = ndarray::Array2::<F>::zeros((b, d + self.time_dim));
        input.slice_mut(s![.., ..d]).assign(&flat);
        input.slice_mut(s![.., d..]).assign(&emb);
        let (z1, c1) = self.l1.forward(&self.ps, &input);
        let a1 = ops::silu2_forward(&z1);
        let (z2, c2) = self.l2.forward(&self.ps, &a1);
        let a2 = ops::silu2_forward(&z2);
        let (out, c3) = self.l3.forward(&self.ps, &a2);
        let out4 = out
            .into_shape_with_order((b, d, 1, 1))
            .unwrap();
        Ok((out4, DenseCache { c1, z1, c2, z2, c3 }))
    }

    pub fn backward(&mut self, cache: &DenseCache<F>, dpred: &Array4<F>) {
        let dflat = Self::flatten(dpred);
        let da2 = self.l3.backward(&mut self.ps, &cache.c3, &dflat);
        let dz2 = ops::silu2_backward(&cache.z2, &da2);
        let da1 = self.l2.backward(&mut self.ps, &cache.c2, &dz2);
        let dz1 = ops::silu2_backward(&cache.z1, &da1);
        let _ = self.l1.backward(&mut self.ps, &cache.c1, &dz1);
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// Both streams' parameters plus the truncation constant.
pub struct ModelBundle<F: Real> {
    pub content: ContentModel<F>,
    pub motion: MotionModel<F>,
    pub cfg: ModelCfg,
}

impl<F: Real> ModelBundle<F> {
    pub fn init(cfg: &ModelCfg, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from(seed);
        let content = ContentModel::init(cfg, &mut rng)?;
        let motion = MotionModel::init(cfg, &mut rng)?;
        Ok(ModelBundle {
            content,
            motion,
            cfg: cfg.clone(),
        })
    }
}

impl ModelCfg {
    /// Small configuration for tests.
    #[doc(hidden)]
    pub fn tiny(channels: usize, height: usize, width: usize) -> Self {
        ModelCfg {
            channels,
            height,
            width,
            base_width: 8,
            ch_mult: vec![1, 2],
            res_blocks: 1,
            attn_res: 16,
            heads: 2,
            max_groups: 8,
            time_emb_dim: 16,
            latent_channels: 2,
            latent_levels: 3,
            latent_width: 8,
            posgn_hidden: 8,
            omega: 30.0,
            t_steps: 10,
            num_frames: 4,
            no_truncation: false,
            no_posgn: false,
            no_residual: false,
            latent_mode: LatentMode::PairLatent,
            zero_init_out: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn4(rng: &mut Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut a = Array4::<f64>::zeros(d);
        rng.fill_normal(&mut a);
        a
    }

    #[test]
    fn shape_contracts_across_sizes() {
        for (c, h, w) in [(1usize, 16usize, 16usize), (3, 32, 32), (3, 64, 64)] {
            let mut cfg = ModelCfg::tiny(c, h, w);
            cfg.ch_mult = vec![1, 2, 2];
            let bundle = ModelBundle::<f64>::init(&cfg, 7).unwrap();
            let mut rng = Rng::seed_from(9);
            let xt = randn4(&mut rng, (2, c, h, w));
            let pred = bundle.content.eps_forward(&xt, &[1, 2]).unwrap();
            assert_eq!(pred.dim(), (2, c, h, w), "content at {c}x{h}x{w}");

            let x0 = randn4(&mut rng, (2, c, h, w));
            let xprev = randn4(&mut rng, (2, c, h, w));
            let (cond, _) = bundle.motion.conditioning(&x0, &xprev).unwrap();
            assert_eq!(cond.dim(), (2, cfg.latent_channels, h / 4, w / 4));
            let pred = bundle
                .motion
                .motion_forward(&xt, &cond, &[3, 4], &[1, 2])
                .unwrap();
            assert_eq!(pred.dim(), (2, c, h, w), "motion at {c}x{h}x{w}");

            let (r, _) = bundle.motion.residual_encode(&x0, &[5, 6]).unwrap();
            assert_eq!(r.dim(), (2, c, h, w), "residual at {c}x{h}x{w}");
        }
    }

    #[test]
    fn zero_inits_hold() {
        let cfg = ModelCfg::tiny(3, 16, 16);
        let bundle = ModelBundle::<f64>::init(&cfg, 3).unwrap();
        let mut rng = Rng::seed_from(4);
        let xt = randn4(&mut rng, (1, 3, 16, 16));
        // Content denoiser output is exactly zero at init.
        let pred = bundle.content.eps_forward(&xt, &[2]).unwrap();
        assert!(pred.iter().all(|v| *v == 0.0));
        // Latent is exactly zero at init, for any input pair.
        let x0 = randn4(&mut rng, (1, 3, 16, 16));
        let xp = randn4(&mut rng, (1, 3, 16, 16));
        let (z, _) = bundle.motion.conditioning(&x0, &xp).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let (z2, _) = bundle.motion.conditioning(&x0, &x0).unwrap();
        assert!(z2.iter().all(|v| *v == 0.0));
        // Residual is exactly zero at init.
        let (r, _) = bundle.motion.residual_encode(&x0, &[1]).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncation_constant_is_live() {
        let mut cfg = ModelCfg::tiny(3, 16, 16);
        cfg.zero_init_out = false; // random head so conditioning reaches the output
        let mut bundle = ModelBundle::<f64>::init(&cfg, 5).unwrap();
        let mut rng = Rng::seed_from(6);
        let xt = randn4(&mut rng, (1, 3, 16, 16));
        let base = bundle.content.eps_forward(&xt, &[3]).unwrap();
        let cid = bundle.content.c.unwrap();
        for v in bundle.content.ps.value_mut(cid).iter_mut() {
            *v += 0.5;
        }
        let changed = bundle.content.eps_forward(&xt, &[3]).unwrap();
        let max_delta = (&changed - &base)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "changing c must change the output");
    }

    #[test]
    fn motion_output_depends_on_frame_index() {
        let mut cfg = ModelCfg::tiny(3, 16, 16);
        cfg.zero_init_out = false;
        let mut bundle = ModelBundle::<f64>::init(&cfg, 11).unwrap();
        // The coordinate MLPs start as identity modulation; give them real
        // weights so the frame index reaches the features.
        let mut wrng = Rng::seed_from(13);
        for e in bundle.motion.ps.entries_mut() {
            if e.name.contains(".mlp.") {
                for v in e.value.iter_mut() {
                    *v = wrng.normal_f64() * 0.2;
                }
            }
        }
        let mut rng = Rng::seed_from(12);
        let xt = randn4(&mut rng, (1, 3, 16, 16));
        let cond = randn4(&mut rng, (1, 2, 4, 4));
        let a = bundle.motion.motion_forward(&xt, &cond, &[4], &[1]).unwrap();
        let b = bundle.motion.motion_forward(&xt, &cond, &[4], &[2]).unwrap();
        let max_delta = (&a - &b).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "positional norm must consume n");
    }

    #[test]
    fn residual_depends_on_timestep() {
        let mut rng_init = Rng::seed_from(31);
        let mut ps = ParamStore::<f64>::new();
        let net = UNet::init(
            &mut ps,
            &mut rng_init,
            "r",
            UNetCfg {
                in_ch: 3,
                out_ch: 3,
                width: 8,
                ch_mult: vec![1, 2],
                res_blocks: 1,
                attn_res: 16,
                heads: 2,
                max_groups: 8,
                height: 16,
                width_px: 16,
                mode: NormMode::AdaTime { emb_dim: 16 },
                zero_init_out: false,
            },
        )
        .unwrap();
        // Give the zero-init AdaGN projections random weights so the time
        // embedding actually modulates features.
        for e in ps.entries_mut() {
            if e.name.contains("proj") {
                let mut r = Rng::seed_from(33);
                for v in e.value.iter_mut() {
                    *v = r.normal_f64() * 0.2;
                }
            }
        }
        let mut rng = Rng::seed_from(32);
        let x0 = randn4(&mut rng, (1, 3, 16, 16));
        let (a, _) = net
            .forward(&ps, &x0, CondInput::Time { t: &[1] }, None)
            .unwrap();
        let (b, _) = net
            .forward(&ps, &x0, CondInput::Time { t: &[9] }, None)
            .unwrap();
        let max_delta = (&a - &b).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "t must be consumed");
    }

    #[test]
    fn coordinate_cache_reused_across_calls() {
        let cfg = ModelCfg::tiny(3, 16, 16);
        let bundle = ModelBundle::<f64>::init(&cfg, 21).unwrap();
        let mut rng = Rng::seed_from(22);
        let xt = randn4(&mut rng, (1, 3, 16, 16));
        let cond = randn4(&mut rng, (1, 2, 4, 4));
        bundle.motion.coord_cache.reset();
        let out1 = bundle.motion.motion_forward(&xt, &cond, &[4], &[1]).unwrap();
        let (_h1, m1) = bundle.motion.coord_cache.stats();
        assert!(m1 > 0, "first call builds grids");
        let out2 = bundle.motion.motion_forward(&xt, &cond, &[4], &[1]).unwrap();
        let (h2, m2) = bundle.motion.coord_cache.stats();
        assert_eq!(m2, m1, "second call must not rebuild any grid");
        assert!(h2 >= m1, "second call hits the cache");
        // Cached and uncached outputs are bitwise identical.
        assert_eq!(out1, out2);
        bundle.motion.coord_cache.reset();
        let out3 = bundle.motion.motion_forward(&xt, &cond, &[4], &[1]).unwrap();
        assert_eq!(out1, out3);
    }

    #[test]
    fn eval_mode_determinism() {
        let mut cfg = ModelCfg::tiny(3, 16, 16);
        cfg.zero_init_out = false;
        let bundle = ModelBundle::<f64>::init(&cfg, 41).unwrap();
        let mut rng = Rng::seed_from(42);
        let xt = randn4(&mut rng, (2, 3, 16, 16));
        let a = bundle.content.eps_forward(&xt, &[1, 7]).unwrap();
        let b = bundle.content.eps_forward(&xt, &[1, 7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_indices() {
        let cfg = ModelCfg::tiny(3, 16, 16);
        let bundle = ModelBundle::<f64>::init(&cfg, 51).unwrap();
        let mut rng = Rng::seed_from(52);
        let xt = randn4(&mut rng, (1, 3, 16, 16));
        let cond = randn4(&mut rng, (1, 2, 4, 4));
        assert!(bundle.motion.motion_forward(&xt, &cond, &[0], &[1]).is_err());
        assert!(bundle
            .motion
            .motion_forward(&xt, &cond, &[11], &[1])
            .is_err());
        assert!(bundle.motion.motion_forward(&xt, &cond, &[1], &[0]).is_err());
        assert!(bundle.motion.motion_forward(&xt, &cond, &[1], &[4]).is_err());
        let bad_cond = randn4(&mut rng, (1, 3, 4, 4));
        assert!(bundle
            .motion
            .motion_forward(&xt, &bad_cond, &[1], &[1])
            .is_err());
    }

    /// PosGN with the coordinate MLP forced to (1, 0) equals plain GroupNorm.
    #[test]
    fn posgn_reduces_to_group_norm_when_forced() {
        use crate::nn::layers::{coord_rows, CondCtx, NormUnit};
        let mut ps = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from(61);
        let unit = NormUnit::init_pos(&mut ps, &mut rng, "pg", 4, 8, 8, 30.0);
        // Give the MLP non-trivial weights first, then force identity.
        if let NormUnit::Pos { mlp, .. } = &unit {
            for id in [mlp.w2, mlp.b2] {
                for v in ps.value_mut(id).iter_mut() {
                    *v = rng.normal_f64() * 0.3;
                }
            }
            mlp.force_identity(&mut ps);
        }
        let x = randn4(&mut rng, (2, 8, 6, 6));
        let cache = CoordCache::<f64>::new();
        let mut coords = std::collections::HashMap::new();
        coords.insert(
            (6usize, 6usize),
            coord_rows(&cache, 6, 6, &[0.2, -0.4], &[0.5, 0.1]),
        );
        let ctx = CondCtx {
            time_emb: None,
            coords: Some(&coords),
        };
        let (posgn_out, _) = unit.forward(&ps, &x, &ctx);
        let gn = crate::nn::ops::group_norm_forward(&x, 4);
        let max_delta = (&posgn_out - &gn.xhat)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 1e-6, "forced identity differs by {max_delta}");
    }
}

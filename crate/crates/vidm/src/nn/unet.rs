//! U-Net denoiser backbone shared by both streams.
//!
//! Three conditioning modes: plain (no conditioning), adaptive group norm
//! driven by a sinusoidal timestep embedding, and positional group norm
//! driven by (h, w, n, t) coordinate rows. Attention attaches wherever the
//! feature resolution equals `attn_res`.

use ndarray::{Array2, Array4};
use std::collections::HashMap;

use super::layers::{
    coord_rows, AttnBlock, AttnBlockCache, CondCtx, CondGrads, Conv2d, Conv2dCache, NormMode,
    NormUnit, NormUnitCache, ResBlock, ResBlockCache, TimeEmbed, TimeEmbedCache,
};
use super::ops;
use super::param::{Init, ParamStore};
use super::posgn::CoordCache;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct UNetCfg {
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    pub ch_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attn_res: usize,
    pub heads: usize,
    pub max_groups: usize,
    pub height: usize,
    pub width_px: usize,
    pub mode: NormMode,
    /// Zero-init the output conv so the denoiser predicts 0 at start.
    pub zero_init_out: bool,
}

/// Per-call conditioning values.
pub enum CondInput<'a> {
    None,
    /// Raw timesteps, embedded internally (content stream).
    Time { t: &'a [usize] },
    /// Pre-normalized frame/timestep coordinates in [-1, 1] (motion stream).
    Coords { n_norm: &'a [f64], t_norm: &'a [f64] },
}

struct DownLevel {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    down: Option<Conv2d>,
}

struct UpLevel {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    up: Option<Conv2d>,
}

pub struct UNet {
    pub cfg: UNetCfg,
    time: Option<TimeEmbed>,
    in_conv: Conv2d,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    out_norm: NormUnit,
    out_conv: Conv2d,
}

pub struct UNetCache<F: Real> {
    emb: Option<(TimeEmbedCache<F>, Array2<F>)>,
    coords: HashMap<(usize, usize), Array2<F>>,
    in_conv: Conv2dCache<F>,
    down: Vec<(Vec<(ResBlockCache<F>, Option<AttnBlockCache<F>>)>, Option<Conv2dCache<F>>)>,
    mid: (
        ResBlockCache<F>,
        Option<AttnBlockCache<F>>,
        ResBlockCache<F>,
    ),
    up: Vec<(Vec<(ResBlockCache<F>, Option<AttnBlockCache<F>>, usize)>, Option<Conv2dCache<F>>)>,
    out_norm: NormUnitCache<F>,
    out_pre: Array4<F>,
    out_conv: Conv2dCache<F>,
}

impl UNet {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        cfg: UNetCfg,
    ) -> Result<Self> {
        let levels = cfg.ch_mult.len();
        if levels == 0 {
            return Err(Error::Config("ch_mult must not be empty".into()));
        }
        if cfg.height % (1 << (levels - 1)) != 0 || cfg.width_px % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "{}x{} not divisible by 2^{}",
                cfg.height,
                cfg.width_px,
                levels - 1
            )));
        }
        let chs: Vec<usize> = cfg.ch_mult.iter().map(|m| cfg.width * m).collect();
        let res_at = |i: usize| cfg.height >> i;
        let mode = cfg.mode.clone();
        let time = match &mode {
            NormMode::AdaTime { emb_dim } => {
                Some(TimeEmbed::init(ps, rng, &format!("{name}.time"), *emb_dim))
            }
            _ => None,
        };
        let in_conv = Conv2d::init(
            ps,
            rng,
            &format!("{name}.in"),
            cfg.in_ch,
            chs[0],
            3,
            1,
            1,
            Init::He {
                fan_in: cfg.in_ch * 9,
            },
        );
        let mut skip_chs: Vec<usize> = vec![chs[0]];
        let mut cur = chs[0];
        let mut downs = Vec::new();
        for (i, &ch) in chs.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                let rb = ResBlock::init(
                    ps,
                    rng,
                    &format!("{name}.down{i}.res{r}"),
                    cur,
                    ch,
                    cfg.max_groups,
                    &mode,
                );
                cur = ch;
                let attn = if res_at(i) == cfg.attn_res {
                    Some(AttnBlock::init(
                        ps,
                        rng,
                        &format!("{name}.down{i}.attn{r}"),
                        cur,
                        cfg.heads,
                        cfg.max_groups,
                        &mode,
                    ))
                } else {
                    None
                };
                blocks.push((rb, attn));
                skip_chs.push(cur);
            }
            let down = if i < levels - 1 {
                let d = Conv2d::init(
                    ps,
                    rng,
                    &format!("{name}.down{i}.pool"),
                    cur,
                    cur,
                    3,
                    2,
                    1,
                    Init::He { fan_in: cur * 9 },
                );
                skip_chs.push(cur);
                Some(d)
            } else {
                None
            };
            downs.push(DownLevel { blocks, down });
        }
        let mid_res = res_at(levels - 1);
        let mid1 = ResBlock::init(ps, rng, &format!("{name}.mid1"), cur, cur, cfg.max_groups, &mode);
        let mid_attn = if mid_res == cfg.attn_res {
            Some(AttnBlock::init(
                ps,
                rng,
                &format!("{name}.mid_attn"),
                cur,
                cfg.heads,
                cfg.max_groups,
                &mode,
            ))
        } else {
            None
        };
        let mid2 = ResBlock::init(ps, rng, &format!("{name}.mid2"), cur, cur, cfg.max_groups, &mode);
        let mut ups = Vec::new();
        for i in (0..levels).rev() {
            let ch = chs[i];
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks + 1 {
                let skip = skip_chs.pop().expect("skip channel bookkeeping");
                let rb = ResBlock::init(
                    ps,
                    rng,
                    &format!("{name}.up{i}.res{r}"),
                    cur + skip,
                    ch,
                    cfg.max_groups,
                    &mode,
                );
                cur = ch;
                let attn = if res_at(i) == cfg.attn_res {
                    Some(AttnBlock::init(
                        ps,
                        rng,
                        &format!("{name}.up{i}.attn{r}"),
                        cur,
                        cfg.heads,
                        cfg.max_groups,
                        &mode,
                    ))
                } else {
                    None
                };
                blocks.push((rb, attn, skip));
            }
            let up = if i > 0 {
                Some(Conv2d::init(
                    ps,
                    rng,
                    &format!("{name}.up{i}.conv"),
                    cur,
                    cur,
                    3,
                    1,
                    1,
                    Init::He { fan_in: cur * 9 },
                ))
            } else {
                None
            };
            ups.push(UpLevel {
                blocks: blocks.into_iter().map(|(r, a, _)| (r, a)).collect(),
                up,
            });
        }
        assert!(skip_chs.is_empty(), "skip stack not fully consumed");
        let g = super::layers::group_count(cur, cfg.max_groups);
        let out_norm = match &mode {
            NormMode::Plain | NormMode::AdaTime { .. } => NormUnit::init_plain(g),
            NormMode::Pos { hidden, omega } => NormUnit::init_pos(
                ps,
                rng,
                &format!("{name}.out_norm"),
                g,
                cur,
                *hidden,
                *omega,
            ),
        };
        let out_conv = Conv2d::init(
            ps,
            rng,
            &format!("{name}.out"),
            cur,
            cfg.out_ch,
            3,
            1,
            1,
            if cfg.zero_init_out {
                Init::Zero
            } else {
                Init::He { fan_in: cur * 9 }
            },
        );
        Ok(UNet {
            cfg,
            time,
            in_conv,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            out_norm,
            out_conv,
        })
    }

    fn build_ctx_inputs<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cond: &CondInput<'_>,
        coord_cache: Option<&CoordCache<F>>,
        batch: usize,
    ) -> Result<(Option<(TimeEmbedCache<F>, Array2<F>)>, HashMap<(usize, usize), Array2<F>>)>
    {
        let mut coords = HashMap::new();
        let emb = match (&self.cfg.mode, cond) {
            (NormMode::AdaTime { .. }, CondInput::Time { t }) => {
                if t.len() != batch {
                    return Err(Error::Shape("timestep batch size mismatch".into()));
                }
                let te = self.time.as_ref().expect("time embed present");
                let (emb, cache) = te.forward(ps, t);
                Some((cache, emb))
            }
            (NormMode::Pos { .. }, CondInput::Coords { n_norm, t_norm }) => {
                if n_norm.len() != batch || t_norm.len() != batch {
                    return Err(Error::Shape("coordinate batch size mismatch".into()));
                }
                for v in n_norm.iter().chain(t_norm.iter()) {
                    if !(*v >= -1.0 && *v <= 1.0) {
                        return Err(Error::Shape(format!(
                            "normalized coordinate {v} outside [-1, 1]"
                        )));
                    }
                }
                let cache = coord_cache.expect("coord cache required in Pos mode");
                let levels = self.cfg.ch_mult.len();
                for i in 0..levels {
                    let h = self.cfg.height >> i;
                    let w = self.cfg.width_px >> i;
                    coords.insert((h, w), coord_rows(cache, h, w, n_norm, t_norm));
                }
                None
            }
            (NormMode::Plain, CondInput::None) => None,
            _ => {
                return Err(Error::Shape(
                    "conditioning input does not match network mode".into(),
                ))
            }
        };
        Ok((emb, coords))
    }

    /// Full forward pass. `coord_cache` is required in Pos mode.
    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        cond: CondInput<'_>,
        coord_cache: Option<&CoordCache<F>>,
    ) -> Result<(Array4<F>, UNetCache<F>)> {
        let (b, c, h, w) = x.dim();
        if c != self.cfg.in_ch {
            return Err(Error::Shape(format!(
                "input channels {c} != configured {}",
                self.cfg.in_ch
            )));
        }
        if (h, w) != (self.cfg.height, self.cfg.width_px) {
            return Err(Error::Shape(format!(
                "input {h}x{w} != configured {}x{}",
                self.cfg.height, self.cfg.width_px
            )));
        }
        let (emb, coords) = self.build_ctx_inputs(ps, &cond, coord_cache, b)?;
        let ctx = CondCtx {
            time_emb: emb.as_ref().map(|(_, e)| e),
            coords: if coords.is_empty() { None } else { Some(&coords) },
        };
        let (mut hcur, in_cache) = self.in_conv.forward(ps, x);
        let mut skips: Vec<Array4<F>> = vec![hcur.clone()];
        let mut down_caches = Vec::new();
        for level in &self.downs {
            let mut block_caches = Vec::new();
            for (rb, attn) in &level.blocks {
                let (y, rc) = rb.forward(ps, &hcur, &ctx);
                hcur = y;
                let ac = match attn {
                    Some(a) => {
                        let (y, ac) = a.forward(ps, &hcur, &ctx);
                        hcur = y;
                        Some(ac)
                    }
                    None => None,
                };
                skips.push(hcur.clone());
                block_caches.push((rc, ac));
            }
            let down_cache = match &level.down {
                Some(dconv) => {
                    let (y, dc) = dconv.forward(ps, &hcur);
                    hcur = y;
                    skips.push(hcur.clone());
                    Some(dc)
                }
                None => None,
            };
            down_caches.push((block_caches, down_cache));
        }
        let (y, mid1_cache) = self.mid1.forward(ps, &hcur, &ctx);
        hcur = y;
        let mid_attn_cache = match &self.mid_attn {
            Some(a) => {
                let (y, ac) = a.forward(ps, &hcur, &ctx);
                hcur = y;
                Some(ac)
            }
            None => None,
        };
        let (y, mid2_cache) = self.mid2.forward(ps, &hcur, &ctx);
        hcur = y;
        let mut up_caches = Vec::new();
        for level in &self.ups {
            let mut block_caches = Vec::new();
            for (rb, attn) in &level.blocks {
                let skip = skips.pop().expect("skip available");
                let skip_ch = skip.dim().1;
                let joined = ops::concat_channels(&hcur, &skip);
                let (y, rc) = rb.forward(ps, &joined, &ctx);
                hcur = y;
                let ac = match attn {
                    Some(a) => {
                        let (y, ac) = a.forward(ps, &hcur, &ctx);
                        hcur = y;
                        Some(ac)
                    }
                    None => None,
                };
                block_caches.push((rc, ac, skip_ch));
            }
            let up_cache = match &level.up {
                Some(uconv) => {
                    let upsampled = ops::upsample_nearest2_forward(&hcur);
                    let (y, uc) = uconv.forward(ps, &upsampled);
                    hcur = y;
                    Some(uc)
                }
                None => None,
            };
            up_caches.push((block_caches, up_cache));
        }
        debug_assert!(skips.is_empty());
        let (normed, out_norm_cache) = self.out_norm.forward(ps, &hcur, &ctx);
        let activated = ops::silu_forward(&normed);
        let (out, out_conv_cache) = self.out_conv.forward(ps, &activated);
        Ok((
            out,
            UNetCache {
                emb,
                coords,
                in_conv: in_cache,
                down: down_caches,
                mid: (mid1_cache, mid_attn_cache, mid2_cache),
                up: up_caches,
                out_norm: out_norm_cache,
                out_pre: normed,
                out_conv: out_conv_cache,
            },
        ))
    }

    /// Backward pass; accumulates parameter gradients, returns d(input).
    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &UNetCache<F>,
        dout: &Array4<F>,
    ) -> Array4<F> {
        let ctx = CondCtx {
            time_emb: cache.emb.as_ref().map(|(_, e)| e),
            coords: if cache.coords.is_empty() {
                None
            } else {
                Some(&cache.coords)
            },
        };
        let mut grads = CondGrads { time_emb: None };
        let dact = self.out_conv.backward(ps, &cache.out_conv, dout);
        let dnormed = ops::silu_backward(&cache.out_pre, &dact);
        let mut dh = self
            .out_norm
            .backward(ps, &cache.out_norm, &dnormed, &ctx, &mut grads);
        // Up path in reverse; re-push skip gradients.
        let mut dskips: Vec<Array4<F>> = Vec::new();
        for (level, (block_caches, up_cache)) in self.ups.iter().zip(&cache.up).rev() {
            if let (Some(uconv), Some(uc)) = (&level.up, up_cache) {
                let dups = uconv.backward(ps, uc, &dh);
                dh = ops::upsample_nearest2_backward(&dups);
            }
            for ((rb, attn), (rc, ac, skip_ch)) in level.blocks.iter().zip(block_caches).rev() {
                if let (Some(a), Some(ac)) = (attn, ac) {
                    dh = a.backward(ps, ac, &dh, &ctx, &mut grads);
                }
                let djoined = rb.backward(ps, rc, &dh, &ctx, &mut grads);
                let keep = djoined.dim().1 - skip_ch;
                let (dhh, dskip) = ops::split_channels(&djoined, keep);
                dh = dhh;
                dskips.push(dskip);
            }
        }
        let dmid2 = self.mid2.backward(ps, &cache.mid.2, &dh, &ctx, &mut grads);
        let dmid_attn = match (&self.mid_attn, &cache.mid.1) {
            (Some(a), Some(ac)) => a.backward(ps, ac, &dmid2, &ctx, &mut grads),
            _ => dmid2,
        };
        dh = self
            .mid1
            .backward(ps, &cache.mid.0, &dmid_attn, &ctx, &mut grads);
        // Down path in reverse, consuming the re-pushed skip gradients.
        for (level, (block_caches, down_cache)) in self.downs.iter().zip(&cache.down).rev() {
            if let (Some(dconv), Some(dc)) = (&level.down, down_cache) {
                let dskip = dskips.pop().expect("skip grad available");
                dh.zip_mut_with(&dskip, |a, &b| *a = *a + b);
                dh = dconv.backward(ps, dc, &dh);
            }
            for ((rb, attn), (rc, ac)) in level.blocks.iter().zip(block_caches).rev() {
                let dskip = dskips.pop().expect("skip grad available");
                dh.zip_mut_with(&dskip, |a, &b| *a = *a + b);
                if let (Some(a), Some(ac)) = (attn, ac) {
                    dh = a.backward(ps, ac, &dh, &ctx, &mut grads);
                }
                dh = rb.backward(ps, rc, &dh, &ctx, &mut grads);
            }
        }
        let dskip = dskips.pop().expect("in_conv skip grad");
        dh.zip_mut_with(&dskip, |a, &b| *a = *a + b);
        debug_assert!(dskips.is_empty());
        let dx = self.in_conv.backward(ps, &cache.in_conv, &dh);
        if let (Some(te), Some((tc, _)), Some(demb)) =
            (&self.time, &cache.emb, grads.time_emb.as_ref())
        {
            te.backward(ps, tc, demb);
        }
        dx
    }
}

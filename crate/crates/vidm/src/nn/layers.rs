//! Parameterized layers assembled from the kernels in `ops`.
//!
//! Each layer's `forward` returns the output together with a cache holding
//! exactly what `backward` needs; `backward` accumulates parameter gradients
//! into the store and returns the input gradient.

use ndarray::{s, Array2, Array4};
use std::collections::HashMap;

use super::ops;
use super::param::{Init, ParamId, ParamStore};
use super::posgn::{CoordCache, CoordMlp, CoordMlpCache};
use crate::num::Real;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F: Real> {
    x: Array4<F>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init.sample(&[out_ch, in_ch, k, k], rng),
        );
        let b = ps.add(format!("{name}.b"), Init::Zero.sample(&[out_ch], rng));
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, Conv2dCache<F>) {
        let w = ps.value(self.w);
        let wm = w
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("weight contiguous");
        let bias = ps.value(self.b);
        let y = ops::conv2d_forward(
            x,
            &wm,
            bias.as_slice().unwrap(),
            self.k,
            self.stride,
            self.pad,
        );
        (y, Conv2dCache { x: x.clone() })
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &Conv2dCache<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (dx, dw, db) = {
            let w = ps.value(self.w);
            let wm = w
                .view()
                .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
                .expect("weight contiguous");
            ops::conv2d_backward(&cache.x, &wm, dy, self.k, self.stride, self.pad)
        };
        // Degenerate GEMMs (a 1-wide inner dimension) can come back in
        // non-standard layout; normalize before reshaping.
        let dw = dw.as_standard_layout().into_owned();
        ps.accum_grad(
            self.w,
            &dw.into_shape_with_order(ndarray::IxDyn(&[
                self.out_ch,
                self.in_ch,
                self.k,
                self.k,
            ]))
            .unwrap(),
        );
        ps.accum_grad(self.b, &db.into_dyn());
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

pub struct LinearCache<F: Real> {
    x: Array2<F>,
}

impl Linear {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        din: usize,
        dout: usize,
        w_init: Init,
        b_init: Init,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), w_init.sample(&[dout, din], rng));
        let b = ps.add(format!("{name}.b"), b_init.sample(&[dout], rng));
        Linear { w, b, din, dout }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LinearCache<F>) {
        let w = ps.value(self.w);
        let wm = w
            .view()
            .into_shape_with_order((self.dout, self.din))
            .expect("weight contiguous");
        let bias = ps.value(self.b);
        let y = ops::linear_forward(x, &wm, bias.as_slice().unwrap());
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &LinearCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let (dx, dw, db) = {
            let w = ps.value(self.w);
            let wm = w
                .view()
                .into_shape_with_order((self.dout, self.din))
                .expect("weight contiguous");
            ops::linear_backward(&cache.x, &wm, dy)
        };
        ps.accum_grad(self.w, &dw.into_dyn());
        ps.accum_grad(self.b, &db.into_dyn());
        dx
    }
}

// ---------------------------------------------------------------------------
// Timestep embedding MLP (content stream)
// ---------------------------------------------------------------------------

pub struct TimeEmbed {
    pub l1: Linear,
    pub l2: Linear,
    pub dim: usize,
}

pub struct TimeEmbedCache<F: Real> {
    c1: LinearCache<F>,
    z1: Array2<F>,
    c2: LinearCache<F>,
}

impl TimeEmbed {
    pub fn init<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, name: &str, dim: usize) -> Self {
        let l1 = Linear::init(
            ps,
            rng,
            &format!("{name}.l1"),
            dim,
            dim,
            Init::He { fan_in: dim },
            Init::Zero,
        );
        let l2 = Linear::init(
            ps,
            rng,
            &format!("{name}.l2"),
            dim,
            dim,
            Init::He { fan_in: dim },
            Init::Zero,
        );
        TimeEmbed { l1, l2, dim }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        t: &[usize],
    ) -> (Array2<F>, TimeEmbedCache<F>) {
        let sin = ops::timestep_embedding::<F>(t, self.dim);
        let (z1, c1) = self.l1.forward(ps, &sin);
        let a = ops::silu2_forward(&z1);
        let (emb, c2) = self.l2.forward(ps, &a);
        (emb, TimeEmbedCache { c1, z1, c2 })
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &TimeEmbedCache<F>,
        demb: &Array2<F>,
    ) {
        let da = self.l2.backward(ps, &cache.c2, demb);
        let dz1 = ops::silu2_backward(&cache.z1, &da);
        let _ = self.l1.backward(ps, &cache.c1, &dz1);
    }
}

// ---------------------------------------------------------------------------
// Normalization units
// ---------------------------------------------------------------------------

/// Conditioning inputs shared by every norm in one network pass.
pub struct CondCtx<'a, F: Real> {
    /// Processed time embedding (B, De); content stream only.
    pub time_emb: Option<&'a Array2<F>>,
    /// Coordinate rows per feature resolution; motion stream only.
    pub coords: Option<&'a HashMap<(usize, usize), Array2<F>>>,
}

/// Accumulators written during the backward pass.
pub struct CondGrads<F: Real> {
    pub time_emb: Option<Array2<F>>,
}

pub enum NormUnit {
    /// Plain group normalization.
    Plain { groups: usize },
    /// Adaptive group norm: (1 + s, b) from a linear projection of the
    /// time embedding. Zero-init projection gives identity modulation.
    AdaTime { groups: usize, proj: Linear },
    /// Positional group norm: per-pixel (alpha, beta) from a sine MLP over
    /// (h, w, n, t) coordinates.
    Pos { groups: usize, mlp: CoordMlp },
}

pub enum NormUnitCache<F: Real> {
    Plain {
        gn: ops::GroupNormCache<F>,
    },
    AdaTime {
        gn: ops::GroupNormCache<F>,
        proj: LinearCache<F>,
        scale: Array2<F>, // (B, C), already 1 + s
    },
    Pos {
        gn: ops::GroupNormCache<F>,
        mlp: CoordMlpCache<F>,
        alpha: Array4<F>, // (B, C, H, W)
        res: (usize, usize),
    },
}

impl NormUnit {
    pub fn init_plain(groups: usize) -> Self {
        NormUnit::Plain { groups }
    }

    pub fn init_ada<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        groups: usize,
        emb_dim: usize,
        channels: usize,
    ) -> Self {
        // Zero-init so modulation starts as identity.
        let proj = Linear::init(
            ps,
            rng,
            &format!("{name}.proj"),
            emb_dim,
            2 * channels,
            Init::Zero,
            Init::Zero,
        );
        NormUnit::AdaTime { groups, proj }
    }

    pub fn init_pos<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        groups: usize,
        channels: usize,
        hidden: usize,
        omega: f64,
    ) -> Self {
        let mlp = CoordMlp::init(ps, rng, &format!("{name}.mlp"), channels, hidden, omega);
        NormUnit::Pos { groups, mlp }
    }

    pub fn groups(&self) -> usize {
        match self {
            NormUnit::Plain { groups }
            | NormUnit::AdaTime { groups, .. }
            | NormUnit::Pos { groups, .. } => *groups,
        }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        ctx: &CondCtx<'_, F>,
    ) -> (Array4<F>, NormUnitCache<F>) {
        let (b, c, h, w) = x.dim();
        match self {
            NormUnit::Plain { groups } => {
                let gn = ops::group_norm_forward(x, *groups);
                (gn.xhat.clone(), NormUnitCache::Plain { gn })
            }
            NormUnit::AdaTime { groups, proj } => {
                let gn = ops::group_norm_forward(x, *groups);
                let emb = ctx.time_emb.expect("AdaTime norm needs a time embedding");
                let (sb, proj_cache) = proj.forward(ps, emb);
                let one = F::from_f64(1.0);
                let scale = sb.slice(s![.., ..c]).mapv(|v| one + v);
                let shift = sb.slice(s![.., c..]).to_owned();
                let mut y = gn.xhat.clone();
                for bi in 0..b {
                    for ci in 0..c {
                        let sc = scale[[bi, ci]];
                        let sh = shift[[bi, ci]];
                        for v in y.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                            *v = sc * *v + sh;
                        }
                    }
                }
                (
                    y,
                    NormUnitCache::AdaTime {
                        gn,
                        proj: proj_cache,
                        scale,
                    },
                )
            }
            NormUnit::Pos { groups, mlp } => {
                let gn = ops::group_norm_forward(x, *groups);
                let coords = ctx.coords.expect("Pos norm needs coordinate rows");
                let rows = coords
                    .get(&(h, w))
                    .expect("coordinate rows missing for resolution");
                let (alpha_rows, beta_rows, mlp_cache) = mlp.forward(ps, rows);
                let alpha = ops::rows_to_maps(&alpha_rows, b, h, w);
                let beta = ops::rows_to_maps(&beta_rows, b, h, w);
                let mut y = gn.xhat.clone();
                y.zip_mut_with(&alpha, |v, &a| *v = *v * a);
                y.zip_mut_with(&beta, |v, &bv| *v = *v + bv);
                (
                    y,
                    NormUnitCache::Pos {
                        gn,
                        mlp: mlp_cache,
                        alpha,
                        res: (h, w),
                    },
                )
            }
        }
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &NormUnitCache<F>,
        dy: &Array4<F>,
        ctx: &CondCtx<'_, F>,
        grads: &mut CondGrads<F>,
    ) -> Array4<F> {
        match (self, cache) {
            (NormUnit::Plain { groups }, NormUnitCache::Plain { gn }) => {
                ops::group_norm_backward(gn, dy, *groups)
            }
            (NormUnit::AdaTime { groups, proj }, NormUnitCache::AdaTime { gn, proj: pc, scale }) => {
                let (b, c, _, _) = gn.xhat.dim();
                let mut dscale = Array2::<F>::zeros((b, c));
                let mut dshift = Array2::<F>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let mut ds = 0.0f64;
                        let mut dsh = 0.0f64;
                        for (g, xh) in dy
                            .slice(s![bi, ci, .., ..])
                            .iter()
                            .zip(gn.xhat.slice(s![bi, ci, .., ..]).iter())
                        {
                            ds += g.to_f64() * xh.to_f64();
                            dsh += g.to_f64();
                        }
                        dscale[[bi, ci]] = F::from_f64(ds);
                        dshift[[bi, ci]] = F::from_f64(dsh);
                    }
                }
                let mut dsb = Array2::<F>::zeros((b, 2 * c));
                dsb.slice_mut(s![.., ..c]).assign(&dscale);
                dsb.slice_mut(s![.., c..]).assign(&dshift);
                let demb = proj.backward(ps, pc, &dsb);
                match &mut grads.time_emb {
                    Some(acc) => acc.zip_mut_with(&demb, |a, &d| *a = *a + d),
                    slot => *slot = Some(demb),
                }
                let mut dxhat = dy.clone();
                for bi in 0..dxhat.dim().0 {
                    for ci in 0..c {
                        let sc = scale[[bi, ci]];
                        for v in dxhat.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                            *v = *v * sc;
                        }
                    }
                }
                ops::group_norm_backward(gn, &dxhat, *groups)
            }
            (NormUnit::Pos { groups, mlp }, NormUnitCache::Pos { gn, mlp: mc, alpha, res }) => {
                let mut dalpha = dy.clone();
                dalpha.zip_mut_with(&gn.xhat, |d, &xh| *d = *d * xh);
                let dbeta_rows = ops::maps_to_rows(dy);
                let dalpha_rows = ops::maps_to_rows(&dalpha);
                let rows = ctx
                    .coords
                    .expect("Pos norm needs coordinate rows")
                    .get(res)
                    .expect("coordinate rows missing for resolution");
                mlp.backward(ps, mc, rows, &dalpha_rows, &dbeta_rows);
                let mut dxhat = dy.clone();
                dxhat.zip_mut_with(alpha, |d, &a| *d = *d * a);
                ops::group_norm_backward(gn, &dxhat, *groups)
            }
            _ => unreachable!("norm cache kind mismatch"),
        }
    }
}

/// Group count rule used across the networks.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    let g = max_groups.min(channels);
    assert!(
        channels % g == 0,
        "channels {channels} not divisible by group count {g}"
    );
    g
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

pub struct ResBlock {
    pub norm1: NormUnit,
    pub conv1: Conv2d,
    pub norm2: NormUnit,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

pub struct ResBlockCache<F: Real> {
    n1: NormUnitCache<F>,
    y1: Array4<F>, // norm1 output (silu input)
    c1: Conv2dCache<F>,
    n2: NormUnitCache<F>,
    y2: Array4<F>,
    c2: Conv2dCache<F>,
    skip: Option<Conv2dCache<F>>,
}

/// Which conditioning path the network's norms use.
#[derive(Debug, Clone)]
pub enum NormMode {
    Plain,
    AdaTime { emb_dim: usize },
    Pos { hidden: usize, omega: f64 },
}

impl ResBlock {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        max_groups: usize,
        mode: &NormMode,
    ) -> Self {
        let g_in = group_count(in_ch, max_groups);
        let g_out = group_count(out_ch, max_groups);
        let norm1 = match mode {
            NormMode::Plain | NormMode::AdaTime { .. } => NormUnit::init_plain(g_in),
            NormMode::Pos { hidden, omega } => NormUnit::init_pos(
                ps,
                rng,
                &format!("{name}.norm1"),
                g_in,
                in_ch,
                *hidden,
                *omega,
            ),
        };
        let conv1 = Conv2d::init(
            ps,
            rng,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            1,
            1,
            Init::He { fan_in: in_ch * 9 },
        );
        let norm2 = match mode {
            NormMode::Plain => NormUnit::init_plain(g_out),
            NormMode::AdaTime { emb_dim } => NormUnit::init_ada(
                ps,
                rng,
                &format!("{name}.norm2"),
                g_out,
                *emb_dim,
                out_ch,
            ),
            NormMode::Pos { hidden, omega } => NormUnit::init_pos(
                ps,
                rng,
                &format!("{name}.norm2"),
                g_out,
                out_ch,
                *hidden,
                *omega,
            ),
        };
        let conv2 = Conv2d::init(
            ps,
            rng,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
            Init::He { fan_in: out_ch * 9 },
        );
        let skip = if in_ch != out_ch {
            Some(Conv2d::init(
                ps,
                rng,
                &format!("{name}.skip"),
                in_ch,
                out_ch,
                1,
                1,
                0,
                Init::He { fan_in: in_ch },
            ))
        } else {
            None
        };
        ResBlock {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        ctx: &CondCtx<'_, F>,
    ) -> (Array4<F>, ResBlockCache<F>) {
        let (y1, n1) = self.norm1.forward(ps, x, ctx);
        let a1 = ops::silu_forward(&y1);
        let (h1, c1) = self.conv1.forward(ps, &a1);
        let (y2, n2) = self.norm2.forward(ps, &h1, ctx);
        let a2 = ops::silu_forward(&y2);
        let (h2, c2) = self.conv2.forward(ps, &a2);
        let (sx, skip_cache) = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward(ps, x);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let out = &h2 + &sx;
        (
            out,
            ResBlockCache {
                n1,
                y1,
                c1,
                n2,
                y2,
                c2,
                skip: skip_cache,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &ResBlockCache<F>,
        dy: &Array4<F>,
        ctx: &CondCtx<'_, F>,
        grads: &mut CondGrads<F>,
    ) -> Array4<F> {
        let da2 = self.conv2.backward(ps, &cache.c2, dy);
        let dy2 = ops::silu_backward(&cache.y2, &da2);
        let dh1 = self.norm2.backward(ps, &cache.n2, &dy2, ctx, grads);
        let da1 = self.conv1.backward(ps, &cache.c1, &dh1);
        let dy1 = ops::silu_backward(&cache.y1, &da1);
        let mut dx = self.norm1.backward(ps, &cache.n1, &dy1, ctx, grads);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => {
                let ds = conv.backward(ps, sc, dy);
                dx.zip_mut_with(&ds, |a, &b| *a = *a + b);
            }
            _ => {
                dx.zip_mut_with(dy, |a, &b| *a = *a + b);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Attention block
// ---------------------------------------------------------------------------

pub struct AttnBlock {
    pub norm: NormUnit,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub heads: usize,
    pub channels: usize,
}

pub struct AttnBlockCache<F: Real> {
    n: NormUnitCache<F>,
    qkv: Conv2dCache<F>,
    attn: ops::AttentionCache<F>,
    proj: Conv2dCache<F>,
}

fn chan_to_heads<F: Real>(x: &Array4<F>, heads: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let dh = c / heads;
    let t = h * w;
    let mut out = Array4::<F>::zeros((b, heads, t, dh));
    for bi in 0..b {
        for hd in 0..heads {
            for d in 0..dh {
                let ci = hd * dh + d;
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, hd, i * w + j, d]] = x[[bi, ci, i, j]];
                    }
                }
            }
        }
    }
    out
}

fn heads_to_chan<F: Real>(x: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (b, heads, _t, dh) = x.dim();
    let mut out = Array4::<F>::zeros((b, heads * dh, h, w));
    for bi in 0..b {
        for hd in 0..heads {
            for d in 0..dh {
                let ci = hd * dh + d;
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, ci, i, j]] = x[[bi, hd, i * w + j, d]];
                    }
                }
            }
        }
    }
    out
}

impl AttnBlock {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        heads: usize,
        max_groups: usize,
        mode: &NormMode,
    ) -> Self {
        assert!(channels % heads == 0, "channels {channels} / heads {heads}");
        let g = group_count(channels, max_groups);
        let norm = match mode {
            NormMode::Plain | NormMode::AdaTime { .. } => NormUnit::init_plain(g),
            NormMode::Pos { hidden, omega } => NormUnit::init_pos(
                ps,
                rng,
                &format!("{name}.norm"),
                g,
                channels,
                *hidden,
                *omega,
            ),
        };
        let qkv = Conv2d::init(
            ps,
            rng,
            &format!("{name}.qkv"),
            channels,
            3 * channels,
            1,
            1,
            0,
            Init::He { fan_in: channels },
        );
        let proj = Conv2d::init(
            ps,
            rng,
            &format!("{name}.proj"),
            channels,
            channels,
            1,
            1,
            0,
            Init::He { fan_in: channels },
        );
        AttnBlock {
            norm,
            qkv,
            proj,
            heads,
            channels,
        }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        ctx: &CondCtx<'_, F>,
    ) -> (Array4<F>, AttnBlockCache<F>) {
        let (_, _, h, w) = x.dim();
        let (n_out, n) = self.norm.forward(ps, x, ctx);
        let (qkv_out, qkv) = self.qkv.forward(ps, &n_out);
        let (q, kv) = ops::split_channels(&qkv_out, self.channels);
        let (k, v) = ops::split_channels(&kv, self.channels);
        let (attn_out, attn) = ops::attention_forward(
            chan_to_heads(&q, self.heads),
            chan_to_heads(&k, self.heads),
            chan_to_heads(&v, self.heads),
        );
        let attn_chan = heads_to_chan(&attn_out, h, w);
        let (p_out, proj) = self.proj.forward(ps, &attn_chan);
        let out = &p_out + x;
        (
            out,
            AttnBlockCache {
                n,
                qkv,
                attn,
                proj,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        ps: &mut ParamStore<F>,
        cache: &AttnBlockCache<F>,
        dy: &Array4<F>,
        ctx: &CondCtx<'_, F>,
        grads: &mut CondGrads<F>,
    ) -> Array4<F> {
        let (_, _, h, w) = dy.dim();
        let dattn_chan = self.proj.backward(ps, &cache.proj, dy);
        let dattn = chan_to_heads(&dattn_chan, self.heads);
        let (dq, dk, dv) = ops::attention_backward(&cache.attn, &dattn);
        let dq_c = heads_to_chan(&dq, h, w);
        let dk_c = heads_to_chan(&dk, h, w);
        let dv_c = heads_to_chan(&dv, h, w);
        let dqkv = ops::concat_channels(&ops::concat_channels(&dq_c, &dk_c), &dv_c);
        let dn = self.qkv.backward(ps, &cache.qkv, &dqkv);
        let mut dx = self.norm.backward(ps, &cache.n, &dn, ctx, grads);
        dx.zip_mut_with(dy, |a, &b| *a = *a + b);
        dx
    }
}

/// Build coordinate rows (B*h*w, 4) for one feature resolution: columns are
/// (h, w, n, t), all normalized to [-1, 1].
pub fn coord_rows<F: Real>(
    cache: &CoordCache<F>,
    h: usize,
    w: usize,
    n_norm: &[f64],
    t_norm: &[f64],
) -> Array2<F> {
    debug_assert_eq!(n_norm.len(), t_norm.len());
    let b = n_norm.len();
    let grid = cache.grid(h, w);
    let mut rows = Array2::<F>::zeros((b * h * w, 4));
    for bi in 0..b {
        let nv = F::from_f64(n_norm[bi]);
        let tv = F::from_f64(t_norm[bi]);
        for p in 0..h * w {
            let r = bi * h * w + p;
            rows[[r, 0]] = grid[[p, 0]];
            rows[[r, 1]] = grid[[p, 1]];
            rows[[r, 2]] = nv;
            rows[[r, 3]] = tv;
        }
    }
    rows
}

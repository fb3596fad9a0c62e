//! Quantitative metrics: a desk-scale Fréchet video distance proxy built on
//! a fixed, seeded random spatiotemporal feature extractor, plus per-frame
//! and continuity diagnostics.
//!
//! The proxy's numbers live on their own scale; they are comparable across
//! runs with the same extractor seed, never against published scores.

use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, sym_sqrt_psd};
use crate::rng::Rng;

pub const DEFAULT_FEATURE_DIM: usize = 256;

/// Gaussian moments of a feature set. Covariance is the biased (1/n) form,
/// so duplicating the clip set leaves the statistics unchanged.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub count: usize,
}

// ---------------------------------------------------------------------------
// Random spatiotemporal extractor
// ---------------------------------------------------------------------------

struct Conv3dLayer {
    w: Vec<f32>, // (out, in, 3, 3, 3)
    b: Vec<f32>,
    in_ch: usize,
    out_ch: usize,
    stride: (usize, usize, usize),
}

impl Conv3dLayer {
    fn init(rng: &mut Rng, in_ch: usize, out_ch: usize, stride: (usize, usize, usize)) -> Self {
        let fan_in = in_ch * 27;
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f32> = (0..out_ch * in_ch * 27)
            .map(|_| (rng.normal_f64() * std) as f32)
            .collect();
        let b: Vec<f32> = (0..out_ch).map(|_| (rng.normal_f64() * 0.1) as f32).collect();
        Conv3dLayer {
            w,
            b,
            in_ch,
            out_ch,
            stride,
        }
    }

    /// x: (D, C, H, W) volume; kernel 3x3x3, padding 1.
    fn forward(&self, x: &ndarray::Array4<f32>) -> ndarray::Array4<f32> {
        let (d, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (sd, sh, sw) = self.stride;
        let od = (d + 2 - 3) / sd + 1;
        let oh = (h + 2 - 3) / sh + 1;
        let ow = (w + 2 - 3) / sw + 1;
        let mut y = ndarray::Array4::<f32>::zeros((od, self.out_ch, oh, ow));
        for zo in 0..od {
            for co in 0..self.out_ch {
                for io in 0..oh {
                    for jo in 0..ow {
                        let mut acc = self.b[co] as f64;
                        for kd in 0..3usize {
                            let zi = (zo * sd + kd) as isize - 1;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for ci in 0..self.in_ch {
                                for kh in 0..3usize {
                                    let ii = (io * sh + kh) as isize - 1;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..3usize {
                                        let ji = (jo * sw + kw) as isize - 1;
                                        if ji < 0 || ji >= w as isize {
                                            continue;
                                        }
                                        let wi = (((co * self.in_ch + ci) * 3 + kd) * 3 + kh) * 3
                                            + kw;
                                        acc += self.w[wi] as f64
                                            * x[[zi as usize, ci, ii as usize, ji as usize]]
                                                as f64;
                                    }
                                }
                            }
                        }
                        // SiLU keeps the random features non-degenerate.
                        let a = acc;
                        y[[zo, co, io, jo]] = (a / (1.0 + (-a).exp())) as f32;
                    }
                }
            }
        }
        y
    }
}

struct Extractor {
    layers: Vec<Conv3dLayer>,
}

impl Extractor {
    fn init(seed: u64, in_ch: usize, dim: usize) -> Self {
        let mut rng = Rng::seed_from(seed);
        let layers = vec![
            Conv3dLayer::init(&mut rng, in_ch, 32, (1, 2, 2)),
            Conv3dLayer::init(&mut rng, 32, 64, (2, 2, 2)),
            Conv3dLayer::init(&mut rng, 64, dim, (2, 2, 2)),
        ];
        Extractor { layers }
    }

    /// Clip (N, C, H, W) -> D-dimensional feature via global average pooling.
    fn features(&self, clip: &Array4<f32>) -> Vec<f64> {
        let mut x = clip.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        let (d, c, h, w) = x.dim();
        let denom = (d * h * w) as f64;
        let mut out = vec![0.0f64; c];
        for zi in 0..d {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[ci] += x[[zi, ci, i, j]] as f64;
                    }
                }
            }
        }
        for v in &mut out {
            *v /= denom;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Feature statistics and Fréchet distance
// ---------------------------------------------------------------------------

/// Deterministic features for each clip from a fixed random extractor, then
/// Gaussian moments over the set.
pub fn extract_features(clips: &[Array4<f32>], extractor_seed: u64) -> Result<FeatureStats> {
    extract_features_dim(clips, extractor_seed, DEFAULT_FEATURE_DIM)
}

pub fn extract_features_dim(
    clips: &[Array4<f32>],
    extractor_seed: u64,
    dim: usize,
) -> Result<FeatureStats> {
    if clips.len() < 2 {
        return Err(Error::Data(format!(
            "feature statistics need at least 2 clips, got {}",
            clips.len()
        )));
    }
    let shape = clips[0].dim();
    for c in clips {
        if c.dim() != shape {
            return Err(Error::Shape(format!(
                "heterogeneous clip shapes: {:?} vs {:?}",
                c.dim(),
                shape
            )));
        }
    }
    let extractor = Extractor::init(extractor_seed, shape.1, dim);
    let feats: Vec<Vec<f64>> = clips.iter().map(|c| extractor.features(c)).collect();
    let n = feats.len();
    let mut mu = Array1::<f64>::zeros(dim);
    for f in &feats {
        for (i, v) in f.iter().enumerate() {
            mu[i] += v;
        }
    }
    mu.mapv_inplace(|v| v / n as f64);
    let mut sigma = Array2::<f64>::zeros((dim, dim));
    for f in &feats {
        for i in 0..dim {
            let di = f[i] - mu[i];
            for j in i..dim {
                let dj = f[j] - mu[j];
                sigma[[i, j]] += di * dj;
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = sigma[[i, j]] / n as f64;
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    Ok(FeatureStats {
        mu,
        sigma,
        count: n,
    })
}

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the matrix square
/// roots taken by eigendecomposition and negative eigenvalues clipped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d {
        return Err(Error::Shape(format!(
            "feature dims differ: {d} vs {}",
            b.mu.len()
        )));
    }
    check_psd(&a.sigma)?;
    check_psd(&b.sigma)?;
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sqrt_a = sym_sqrt_psd(&a.sigma);
    let inner = sqrt_a.dot(&b.sigma).dot(&sqrt_a);
    // Symmetrize against round-off before the second decomposition.
    let inner = (&inner + &inner.t()) * 0.5;
    let (vals, _) = sym_eig(&inner);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| a.sigma[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| b.sigma[[i, i]]).sum();
    let dist = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    // Round-off can leave a tiny negative residue on identical inputs.
    Ok(dist.max(0.0))
}

fn check_psd(sigma: &Array2<f64>) -> Result<()> {
    let (vals, _) = sym_eig(sigma);
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-8 * (1.0 + max);
    if min < -tol {
        return Err(Error::Data(format!(
            "covariance not PSD: min eigenvalue {min}"
        )));
    }
    Ok(())
}

/// Fréchet distance between the feature Gaussians of two clip sets.
pub fn fvd_proxy(real: &[Array4<f32>], fake: &[Array4<f32>], extractor_seed: u64) -> Result<f64> {
    fvd_proxy_dim(real, fake, extractor_seed, DEFAULT_FEATURE_DIM)
}

pub fn fvd_proxy_dim(
    real: &[Array4<f32>],
    fake: &[Array4<f32>],
    extractor_seed: u64,
    dim: usize,
) -> Result<f64> {
    let a = extract_features_dim(real, extractor_seed, dim)?;
    let b = extract_features_dim(fake, extractor_seed, dim)?;
    frechet_distance(&a, &b)
}

// ---------------------------------------------------------------------------
// Frame diagnostics
// ---------------------------------------------------------------------------

/// PSNR in dB over the [-1, 1] value range (peak = 2), capped at 99 dB for
/// identical frames.
pub fn frame_psnr(
    a: &ndarray::ArrayView3<'_, f32>,
    b: &ndarray::ArrayView3<'_, f32>,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "psnr frames differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(99.0))
}

/// Mean over consecutive frame pairs of the mean absolute difference; 0 iff
/// the clip is static. A cheap staticness probe for generated videos.
pub fn continuity_score(clip: &Array4<f32>) -> Result<f64> {
    let n = clip.dim().0;
    if n < 2 {
        return Err(Error::Shape("continuity needs at least two frames".into()));
    }
    let mut acc = 0.0f64;
    for i in 1..n {
        let prev = clip.index_axis(ndarray::Axis(0), i - 1);
        let cur = clip.index_axis(ndarray::Axis(0), i);
        let mut frame_acc = 0.0f64;
        for (a, b) in cur.iter().zip(prev.iter()) {
            frame_acc += (*a - *b).abs() as f64;
        }
        acc += frame_acc / prev.len() as f64;
    }
    Ok(acc / (n - 1) as f64)
}

pub fn mean_continuity(clips: &[Array4<f32>]) -> Result<f64> {
    let mut acc = 0.0;
    for c in clips {
        acc += continuity_score(c)?;
    }
    Ok(acc / clips.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn diag_stats(mu: &[f64], var: &[f64]) -> FeatureStats {
        let d = mu.len();
        let mut sigma = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            sigma[[i, i]] = var[i];
        }
        FeatureStats {
            mu: Array1::from_vec(mu.to_vec()),
            sigma,
            count: 10,
        }
    }

    #[test]
    fn frechet_zero_on_identity() {
        let a = diag_stats(&[0.3, -0.7, 1.1], &[1.0, 0.5, 2.0]);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");
    }

    #[test]
    fn frechet_identity_covariances_mean_shift() {
        let a = diag_stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = diag_stats(&[3.0, 4.0], &[1.0, 1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 25.0).abs() < 1e-8, "expected ||d||^2 = 25, got {d}");
    }

    #[test]
    fn frechet_scalar_sigma_case() {
        // Equal means, standard deviations 1 and 2: 1 + 4 - 2*2 = 1.
        let a = diag_stats(&[0.5], &[1.0]);
        let b = diag_stats(&[0.5], &[4.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-8, "scalar case gave {d}");
    }

    /// Closed form for diagonal covariances:
    /// sum (mu_a - mu_b)^2 + sum (sqrt(va) - sqrt(vb))^2.
    #[test]
    fn frechet_matches_diagonal_oracle() {
        let mut rng = Rng::seed_from(5);
        for d in [1usize, 3, 8] {
            let mu_a: Vec<f64> = (0..d).map(|_| rng.normal_f64()).collect();
            let mu_b: Vec<f64> = (0..d).map(|_| rng.normal_f64()).collect();
            let va: Vec<f64> = (0..d).map(|_| rng.uniform_f64() * 2.0 + 0.1).collect();
            let vb: Vec<f64> = (0..d).map(|_| rng.uniform_f64() * 2.0 + 0.1).collect();
            let a = diag_stats(&mu_a, &va);
            let b = diag_stats(&mu_b, &vb);
            let got = frechet_distance(&a, &b).unwrap();
            let mut want = 0.0;
            for i in 0..d {
                want += (mu_a[i] - mu_b[i]).powi(2);
                want += (va[i].sqrt() - vb[i].sqrt()).powi(2);
            }
            assert!(
                (got - want).abs() < 1e-8,
                "d={d}: got {got}, closed form {want}"
            );
        }
    }

    #[test]
    fn frechet_symmetric_and_rejects_dim_mismatch() {
        let mut rng = Rng::seed_from(9);
        // Random PSD covariances.
        let mk = |rng: &mut Rng| {
            let mut b = Array2::<f64>::zeros((4, 4));
            for v in b.iter_mut() {
                *v = rng.normal_f64();
            }
            let sigma = b.dot(&b.t());
            FeatureStats {
                mu: Array1::from_vec((0..4).map(|_| rng.normal_f64()).collect()),
                sigma,
                count: 8,
            }
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-8, "{dab} vs {dba}");
        assert!(dab >= 0.0);
        let c = diag_stats(&[0.0], &[1.0]);
        assert!(frechet_distance(&a, &c).is_err());
    }

    fn toy_clips(seed: u64, count: usize, offset: f32) -> Vec<Array4<f32>> {
        let mut rng = Rng::seed_from(seed);
        (0..count)
            .map(|_| {
                let mut c = Array4::<f32>::zeros((4, 1, 8, 8));
                for v in c.iter_mut() {
                    *v = (rng.normal_f64() * 0.3) as f32 + offset;
                }
                c
            })
            .collect()
    }

    #[test]
    fn features_deterministic_and_order_invariant() {
        let clips = toy_clips(3, 6, 0.0);
        let a = extract_features_dim(&clips, 7, 16).unwrap();
        let b = extract_features_dim(&clips, 7, 16).unwrap();
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.sigma, b.sigma);
        let mut shuffled = clips.clone();
        shuffled.reverse();
        let c = extract_features_dim(&shuffled, 7, 16).unwrap();
        let max_mu = (&a.mu - &c.mu).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let max_sig = (&a.sigma - &c.sigma)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_mu < 1e-12 && max_sig < 1e-12);
        let d = extract_features_dim(&clips, 8, 16).unwrap();
        assert_ne!(a.mu, d.mu, "different extractor seed, different features");
    }

    #[test]
    fn duplication_leaves_stats_unchanged() {
        let clips = toy_clips(11, 4, 0.1);
        let a = extract_features_dim(&clips, 5, 8).unwrap();
        let mut doubled = clips.clone();
        doubled.extend(clips.iter().cloned());
        let b = extract_features_dim(&doubled, 5, 8).unwrap();
        let max_mu = (&a.mu - &b.mu).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let max_sig = (&a.sigma - &b.sigma)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_mu < 1e-12, "mean changed under duplication");
        assert!(max_sig < 1e-12, "covariance changed under duplication");
        assert_eq!(b.count, 2 * a.count);
    }

    #[test]
    fn too_few_or_mismatched_clips_rejected() {
        let clips = toy_clips(1, 1, 0.0);
        assert!(extract_features_dim(&clips, 1, 8).is_err());
        let mut mixed = toy_clips(1, 2, 0.0);
        mixed.push(Array4::<f32>::zeros((4, 1, 4, 4)));
        assert!(extract_features_dim(&mixed, 1, 8).is_err());
    }

    #[test]
    fn fvd_ordering_noise_vs_near_real() {
        // Structured clips vs (a) slightly perturbed copies and (b) uniform
        // noise: the perturbed set must score far closer.
        let real = toy_clips(21, 8, 0.2);
        let mut rng = Rng::seed_from(22);
        let near: Vec<Array4<f32>> = real
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for v in c.iter_mut() {
                    *v += (rng.normal_f64() * 0.02) as f32;
                }
                c
            })
            .collect();
        let noise: Vec<Array4<f32>> = (0..8)
            .map(|_| {
                let mut c = Array4::<f32>::zeros((4, 1, 8, 8));
                for v in c.iter_mut() {
                    *v = rng.uniform::<f32>(-1.0, 1.0);
                }
                c
            })
            .collect();
        let d_self = fvd_proxy_dim(&real, &real, 9, 16).unwrap();
        let d_near = fvd_proxy_dim(&real, &near, 9, 16).unwrap();
        let d_noise = fvd_proxy_dim(&real, &noise, 9, 16).unwrap();
        assert!(d_self < 1e-6, "identical sets score {d_self}");
        assert!(
            d_noise > d_near,
            "noise {d_noise} must score worse than near-real {d_near}"
        );
    }

    #[test]
    fn psnr_basics() {
        let a = ndarray::Array3::<f32>::zeros((1, 4, 4));
        assert_eq!(frame_psnr(&a.view(), &a.view()).unwrap(), 99.0);
        let b = ndarray::Array3::<f32>::from_elem((1, 4, 4), 0.2);
        let p = frame_psnr(&a.view(), &b.view()).unwrap();
        // mse = 0.04, psnr = 10 log10(4/0.04) = 20.
        assert!((p - 20.0).abs() < 1e-6);
        let c = ndarray::Array3::<f32>::zeros((1, 2, 2));
        assert!(frame_psnr(&a.view(), &c.view()).is_err());
    }

    #[test]
    fn continuity_basics() {
        let mut clip = Array4::<f32>::zeros((3, 1, 2, 2));
        clip.fill(0.5);
        assert_eq!(continuity_score(&clip).unwrap(), 0.0);
        // alternating all +1 / all -1 frames: mean |delta| = 2
        let mut alt = Array4::<f32>::zeros((4, 1, 2, 2));
        for i in 0..4 {
            alt.index_axis_mut(ndarray::Axis(0), i)
                .fill(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        assert_eq!(continuity_score(&alt).unwrap(), 2.0);
        let single = Array4::<f32>::zeros((1, 1, 2, 2));
        assert!(continuity_score(&single).is_err());
    }
}

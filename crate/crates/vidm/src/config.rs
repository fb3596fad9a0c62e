//! Run configuration: every hyperparameter left open by the method, in a
//! flat key=value text format with sections. Unknown keys are rejected and
//! parse(serialize(c)) == c for every valid configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::GenSpec;
use crate::diffusion::SigmaMode;
use crate::error::{Error, Result};
use crate::nets::{LatentMode, ModelCfg};
use crate::training::TrainCfg;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub deterministic: bool,
    // [diffusion]
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub deterministic_last: bool,
    pub sigma_mode: SigmaMode,
    pub eta: f64,
    // [model]
    pub base_width: usize,
    pub ch_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attn_res: usize,
    pub attn_heads: usize,
    pub max_groups: usize,
    pub time_emb_dim: usize,
    pub latent_channels: usize,
    pub latent_levels: usize,
    pub latent_width: usize,
    pub posgn_hidden: usize,
    pub omega: f64,
    // [train]
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub ckpt_every: u64,
    pub log_every: u64,
    // [data]
    pub videos: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub data_seed: u64,
    pub flip_augment: bool,
    // [sample]
    pub sample_frames: usize,
    pub fps_hint: f64,
    // [eval]
    pub feature_dim: usize,
    pub extractor_seed: u64,
    pub eval_clips: usize,
    // [ablation]
    pub no_truncation: bool,
    pub no_robust_penalty: bool,
    pub no_posgn: bool,
    pub no_implicit_latent: bool,
    pub no_residual: bool,
    pub latent_mode: LatentMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            // Desk-scale defaults. The beta range scales inversely with T so
            // the accumulated noise matches the T = 1000 convention
            // (1e-4..0.02): alpha_bar at the last step stays ~4e-5 and the
            // chain's terminal state is indistinguishable from pure noise.
            t_steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            deterministic_last: true,
            sigma_mode: SigmaMode::SqrtBeta,
            eta: 1e-8,
            base_width: 64,
            ch_mult: vec![1, 2, 2],
            res_blocks: 2,
            attn_res: 16,
            attn_heads: 4,
            max_groups: 8,
            time_emb_dim: 64,
            latent_channels: 2,
            latent_levels: 3,
            latent_width: 16,
            posgn_hidden: 16,
            omega: 30.0,
            lr: 1e-4,
            grad_clip: 1.0,
            batch_size: 8,
            max_steps: 2000,
            ckpt_every: 500,
            log_every: 50,
            videos: 256,
            frames: 16,
            channels: 3,
            height: 32,
            width: 32,
            shapes_max: 1,
            radius_min: 3.5,
            radius_max: 6.0,
            speed_min: 1.5,
            speed_max: 2.5,
            data_seed: 7,
            flip_augment: false,
            sample_frames: 16,
            fps_hint: 8.0,
            feature_dim: 256,
            extractor_seed: 17,
            eval_clips: 64,
            no_truncation: false,
            no_robust_penalty: false,
            no_posgn: false,
            no_implicit_latent: false,
            no_residual: false,
            latent_mode: LatentMode::PairLatent,
        }
    }
}

fn sigma_mode_str(m: SigmaMode) -> &'static str {
    match m {
        SigmaMode::SqrtBeta => "sqrt_beta",
        SigmaMode::Posterior => "posterior",
    }
}

fn latent_mode_str(m: LatentMode) -> &'static str {
    match m {
        LatentMode::PairLatent => "pair_latent",
        LatentMode::Zero => "zero",
        LatentMode::PrevFrame => "prev_frame",
    }
}

impl RunConfig {
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let kv = |out: &mut String, k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        s.push_str("[run]\n");
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "deterministic", self.deterministic.to_string());
        s.push_str("\n[diffusion]\n");
        kv(&mut s, "t_steps", self.t_steps.to_string());
        kv(&mut s, "beta_start", self.beta_start.to_string());
        kv(&mut s, "beta_end", self.beta_end.to_string());
        kv(
            &mut s,
            "deterministic_last",
            self.deterministic_last.to_string(),
        );
        kv(&mut s, "sigma_mode", sigma_mode_str(self.sigma_mode).into());
        kv(&mut s, "eta", self.eta.to_string());
        s.push_str("\n[model]\n");
        kv(&mut s, "base_width", self.base_width.to_string());
        kv(
            &mut s,
            "ch_mult",
            self.ch_mult
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(&mut s, "res_blocks", self.res_blocks.to_string());
        kv(&mut s, "attn_res", self.attn_res.to_string());
        kv(&mut s, "attn_heads", self.attn_heads.to_string());
        kv(&mut s, "max_groups", self.max_groups.to_string());
        kv(&mut s, "time_emb_dim", self.time_emb_dim.to_string());
        kv(&mut s, "latent_channels", self.latent_channels.to_string());
        kv(&mut s, "latent_levels", self.latent_levels.to_string());
        kv(&mut s, "latent_width", self.latent_width.to_string());
        kv(&mut s, "posgn_hidden", self.posgn_hidden.to_string());
        kv(&mut s, "omega", self.omega.to_string());
        s.push_str("\n[train]\n");
        kv(&mut s, "lr", self.lr.to_string());
        kv(&mut s, "grad_clip", self.grad_clip.to_string());
        kv(&mut s, "batch_size", self.batch_size.to_string());
        kv(&mut s, "max_steps", self.max_steps.to_string());
        kv(&mut s, "ckpt_every", self.ckpt_every.to_string());
        kv(&mut s, "log_every", self.log_every.to_string());
        s.push_str("\n[data]\n");
        kv(&mut s, "videos", self.videos.to_string());
        kv(&mut s, "frames", self.frames.to_string());
        kv(&mut s, "channels", self.channels.to_string());
        kv(&mut s, "height", self.height.to_string());
        kv(&mut s, "width", self.width.to_string());
        kv(&mut s, "shapes_max", self.shapes_max.to_string());
        kv(&mut s, "radius_min", self.radius_min.to_string());
        kv(&mut s, "radius_max", self.radius_max.to_string());
        kv(&mut s, "speed_min", self.speed_min.to_string());
        kv(&mut s, "speed_max", self.speed_max.to_string());
        kv(&mut s, "data_seed", self.data_seed.to_string());
        kv(&mut s, "flip_augment", self.flip_augment.to_string());
        s.push_str("\n[sample]\n");
        kv(&mut s, "sample_frames", self.sample_frames.to_string());
        kv(&mut s, "fps_hint", self.fps_hint.to_string());
        s.push_str("\n[eval]\n");
        kv(&mut s, "feature_dim", self.feature_dim.to_string());
        kv(&mut s, "extractor_seed", self.extractor_seed.to_string());
        kv(&mut s, "eval_clips", self.eval_clips.to_string());
        s.push_str("\n[ablation]\n");
        kv(&mut s, "no_truncation", self.no_truncation.to_string());
        kv(
            &mut s,
            "no_robust_penalty",
            self.no_robust_penalty.to_string(),
        );
        kv(&mut s, "no_posgn", self.no_posgn.to_string());
        kv(
            &mut s,
            "no_implicit_latent",
            self.no_implicit_latent.to_string(),
        );
        kv(&mut s, "no_residual", self.no_residual.to_string());
        kv(&mut s, "latent_mode", latent_mode_str(self.latent_mode).into());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Config(format!(
                        "line {}: malformed section header '{line}'",
                        lineno + 1
                    )));
                }
                let name = &line[1..line.len() - 1];
                match name {
                    "run" | "diffusion" | "model" | "train" | "data" | "sample" | "eval"
                    | "ablation" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section '{other}'",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("cannot parse '{v}' for key '{k}'"))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "deterministic" => self.deterministic = p(key, value)?,
            "t_steps" => self.t_steps = p(key, value)?,
            "beta_start" => self.beta_start = p(key, value)?,
            "beta_end" => self.beta_end = p(key, value)?,
            "deterministic_last" => self.deterministic_last = p(key, value)?,
            "sigma_mode" => {
                self.sigma_mode = match value {
                    "sqrt_beta" => SigmaMode::SqrtBeta,
                    "posterior" => SigmaMode::Posterior,
                    other => return Err(format!("unknown sigma_mode '{other}'")),
                }
            }
            "eta" => self.eta = p(key, value)?,
            "base_width" => self.base_width = p(key, value)?,
            "ch_mult" => {
                let parts: std::result::Result<Vec<usize>, String> = value
                    .split(',')
                    .map(|s| p::<usize>(key, s.trim()))
                    .collect();
                self.ch_mult = parts?;
            }
            "res_blocks" => self.res_blocks = p(key, value)?,
            "attn_res" => self.attn_res = p(key, value)?,
            "attn_heads" => self.attn_heads = p(key, value)?,
            "max_groups" => self.max_groups = p(key, value)?,
            "time_emb_dim" => self.time_emb_dim = p(key, value)?,
            "latent_channels" => self.latent_channels = p(key, value)?,
            "latent_levels" => self.latent_levels = p(key, value)?,
            "latent_width" => self.latent_width = p(key, value)?,
            "posgn_hidden" => self.posgn_hidden = p(key, value)?,
            "omega" => self.omega = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "ckpt_every" => self.ckpt_every = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "videos" => self.videos = p(key, value)?,
            "frames" => self.frames = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            "height" => self.height = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "shapes_max" => self.shapes_max = p(key, value)?,
            "radius_min" => self.radius_min = p(key, value)?,
            "radius_max" => self.radius_max = p(key, value)?,
            "speed_min" => self.speed_min = p(key, value)?,
            "speed_max" => self.speed_max = p(key, value)?,
            "data_seed" => self.data_seed = p(key, value)?,
            "flip_augment" => self.flip_augment = p(key, value)?,
            "sample_frames" => self.sample_frames = p(key, value)?,
            "fps_hint" => self.fps_hint = p(key, value)?,
            "feature_dim" => self.feature_dim = p(key, value)?,
            "extractor_seed" => self.extractor_seed = p(key, value)?,
            "eval_clips" => self.eval_clips = p(key, value)?,
            "no_truncation" => self.no_truncation = p(key, value)?,
            "no_robust_penalty" => self.no_robust_penalty = p(key, value)?,
            "no_posgn" => self.no_posgn = p(key, value)?,
            "no_implicit_latent" => self.no_implicit_latent = p(key, value)?,
            "no_residual" => self.no_residual = p(key, value)?,
            "latent_mode" => {
                self.latent_mode = match value {
                    "pair_latent" => LatentMode::PairLatent,
                    "zero" => LatentMode::Zero,
                    "prev_frame" => LatentMode::PrevFrame,
                    other => return Err(format!("unknown latent_mode '{other}'")),
                }
            }
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t_steps == 0 {
            return bad("t_steps must be at least 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!(
                "beta range [{}, {}] invalid",
                self.beta_start, self.beta_end
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if self.ch_mult.is_empty() {
            return bad("ch_mult must not be empty".into());
        }
        if self.base_width == 0 || self.max_groups == 0 {
            return bad("base_width and max_groups must be positive".into());
        }
        for &m in &self.ch_mult {
            let ch = self.base_width * m;
            let g = self.max_groups.min(ch);
            if ch % g != 0 {
                return bad(format!(
                    "channel count {ch} not divisible by group count {g}"
                ));
            }
            if ch % self.attn_heads != 0 {
                return bad(format!(
                    "channel count {ch} not divisible by attn_heads {}",
                    self.attn_heads
                ));
            }
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be at least 1".into());
        }
        let down = 1usize << (self.ch_mult.len() - 1);
        if self.height % down != 0 || self.width % down != 0 {
            return bad(format!(
                "{}x{} not divisible by 2^{}",
                self.height,
                self.width,
                self.ch_mult.len() - 1
            ));
        }
        let coarsest = 4usize << (self.latent_levels.max(1) - 1);
        if self.latent_levels == 0 || self.height % coarsest != 0 || self.width % coarsest != 0 {
            return bad(format!(
                "latent pyramid with {} levels does not fit {}x{}",
                self.latent_levels, self.height, self.width
            ));
        }
        if self.latent_channels == 0 || self.latent_width == 0 || self.posgn_hidden == 0 {
            return bad("latent_channels, latent_width, posgn_hidden must be positive".into());
        }
        if self.time_emb_dim < 2 || self.time_emb_dim % 2 != 0 {
            return bad("time_emb_dim must be even and at least 2".into());
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.videos == 0 || self.frames == 0 || self.channels == 0 {
            return bad("dataset dimensions must be positive".into());
        }
        if self.frames < 2 {
            return bad("videos need at least 2 frames for motion training".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("invalid radius range".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("invalid speed range".into());
        }
        if self.shapes_max == 0 {
            return bad("shapes_max must be at least 1".into());
        }
        if self.sample_frames == 0 {
            return bad("sample_frames must be at least 1".into());
        }
        if !(self.fps_hint > 0.0) {
            return bad("fps_hint must be positive".into());
        }
        if self.feature_dim == 0 || self.eval_clips < 2 {
            return bad("feature_dim must be positive and eval_clips at least 2".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Effective motion conditioning: the ablation flag forces zero maps.
    pub fn effective_latent_mode(&self) -> LatentMode {
        if self.no_implicit_latent {
            LatentMode::Zero
        } else {
            self.latent_mode
        }
    }

    pub fn model_cfg(&self) -> ModelCfg {
        ModelCfg {
            channels: self.channels,
            height: self.height,
            width: self.width,
            base_width: self.base_width,
            ch_mult: self.ch_mult.clone(),
            res_blocks: self.res_blocks,
            attn_res: self.attn_res,
            heads: self.attn_heads,
            max_groups: self.max_groups,
            time_emb_dim: self.time_emb_dim,
            latent_channels: self.latent_channels,
            latent_levels: self.latent_levels,
            latent_width: self.latent_width,
            posgn_hidden: self.posgn_hidden,
            omega: self.omega,
            t_steps: self.t_steps,
            num_frames: self.frames,
            no_truncation: self.no_truncation,
            no_posgn: self.no_posgn,
            no_residual: self.no_residual,
            latent_mode: self.effective_latent_mode(),
            zero_init_out: true,
        }
    }

    pub fn train_cfg(&self) -> TrainCfg {
        TrainCfg {
            lr: self.lr,
            grad_clip: self.grad_clip,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            log_every: self.log_every,
            ckpt_every: self.ckpt_every,
            eta: self.eta,
            use_l1: self.no_robust_penalty,
            ema_decay: 0.99,
            flip_augment: self.flip_augment,
        }
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            videos: self.videos,
            frames: self.frames,
            height: self.height,
            width: self.width,
            shapes_max: self.shapes_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            seed: self.data_seed,
        }
    }

    pub fn schedule<F: crate::num::Real>(&self) -> Result<crate::diffusion::NoiseSchedule<F>> {
        crate::diffusion::make_schedule(
            self.t_steps,
            self.beta_start,
            self.beta_end,
            self.deterministic_last,
            self.sigma_mode,
        )
    }

    /// Random configuration for round-trip fuzzing. Not every draw passes
    /// validation; callers skip invalid combinations.
    #[doc(hidden)]
    pub fn fuzz(rng: &mut crate::rng::Rng) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = rng.next_u64();
        cfg.deterministic = rng.uniform_f64() < 0.5;
        cfg.t_steps = rng.range_inclusive(1, 2000);
        cfg.beta_start = rng.uniform_f64() * 0.01 + 1e-6;
        cfg.beta_end = cfg.beta_start + rng.uniform_f64() * 0.5;
        cfg.deterministic_last = rng.uniform_f64() < 0.5;
        cfg.sigma_mode = if rng.uniform_f64() < 0.5 {
            SigmaMode::SqrtBeta
        } else {
            SigmaMode::Posterior
        };
        cfg.eta = 10f64.powf(-(rng.uniform_f64() * 8.0 + 1.0));
        cfg.base_width = 8 * rng.range_inclusive(1, 8);
        let levels = rng.range_inclusive(1, 3);
        cfg.ch_mult = (0..levels).map(|_| rng.range_inclusive(1, 4)).collect();
        cfg.res_blocks = rng.range_inclusive(1, 3);
        cfg.attn_heads = [1, 2, 4][rng.below(3)];
        cfg.time_emb_dim = 2 * rng.range_inclusive(1, 64);
        cfg.latent_channels = rng.range_inclusive(1, 4);
        cfg.latent_levels = rng.range_inclusive(1, 3);
        cfg.latent_width = rng.range_inclusive(1, 32);
        cfg.posgn_hidden = rng.range_inclusive(1, 32);
        cfg.omega = rng.uniform_f64() * 50.0 + 0.5;
        cfg.lr = 10f64.powf(-(rng.uniform_f64() * 4.0 + 1.0));
        cfg.grad_clip = rng.uniform_f64() * 5.0 + 0.1;
        cfg.batch_size = rng.range_inclusive(1, 64);
        cfg.max_steps = rng.below(100_000) as u64;
        cfg.ckpt_every = rng.below(1000) as u64;
        cfg.log_every = rng.below(1000) as u64;
        cfg.videos = rng.range_inclusive(1, 512);
        cfg.frames = rng.range_inclusive(2, 64);
        cfg.channels = [1, 3][rng.below(2)];
        cfg.height = 16 * rng.range_inclusive(1, 4);
        cfg.width = cfg.height;
        cfg.shapes_max = rng.range_inclusive(1, 4);
        cfg.radius_min = rng.uniform_f64() * 2.0 + 1.0;
        cfg.radius_max = cfg.radius_min + rng.uniform_f64() * 2.0;
        cfg.speed_min = rng.uniform_f64() * 2.0;
        cfg.speed_max = cfg.speed_min + rng.uniform_f64() * 2.0;
        cfg.data_seed = rng.next_u64();
        cfg.flip_augment = rng.uniform_f64() < 0.5;
        cfg.sample_frames = rng.range_inclusive(1, 64);
        cfg.fps_hint = rng.uniform_f64() * 30.0 + 1.0;
        cfg.feature_dim = rng.range_inclusive(8, 256);
        cfg.extractor_seed = rng.next_u64();
        cfg.eval_clips = rng.range_inclusive(2, 256);
        cfg.no_truncation = rng.uniform_f64() < 0.5;
        cfg.no_robust_penalty = rng.uniform_f64() < 0.5;
        cfg.no_posgn = rng.uniform_f64() < 0.5;
        cfg.no_implicit_latent = rng.uniform_f64() < 0.5;
        cfg.no_residual = rng.uniform_f64() < 0.5;
        cfg.latent_mode =
            [LatentMode::PairLatent, LatentMode::Zero, LatentMode::PrevFrame][rng.below(3)];
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut text = RunConfig::default().serialize();
        text.push_str("mystery_knob = 3\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(format!("{err}").contains("mystery_knob"));
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut text = RunConfig::default().serialize();
        text.push_str("seed = 4\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn comments_and_blank_lines_ok() {
        let text = "# a comment\n\n[run]\nseed = 9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn invalid_values_rejected() {
        for (k, v) in [
            ("t_steps", "0"),
            ("beta_start", "0"),
            ("beta_end", "1.5"),
            ("eta", "0"),
            ("base_width", "12"), // 12 channels, 8 groups
            ("batch_size", "0"),
            ("frames", "1"),
        ] {
            let mut cfg = RunConfig::default().serialize();
            // Replace the existing line wholesale.
            let mut out = String::new();
            for line in cfg.lines() {
                if line.starts_with(&format!("{k} ")) {
                    out.push_str(&format!("{k} = {v}\n"));
                } else {
                    out.push_str(line);
                    out.push('\n');
                }
            }
            cfg = out;
            assert!(
                RunConfig::parse(&cfg).is_err(),
                "expected rejection for {k} = {v}"
            );
        }
    }

    /// Seeded fuzz: 1000 random valid configs round-trip losslessly.
    #[test]
    fn fuzzed_configs_roundtrip() {
        let mut rng = Rng::seed_from(1234);
        let mut valid = 0;
        for trial in 0..1000 {
            let cfg = RunConfig::fuzz(&mut rng);
            if cfg.validate().is_err() {
                continue; // generator occasionally builds an invalid combo
            }
            valid += 1;
            let text = cfg.serialize();
            let back = RunConfig::parse(&text)
                .unwrap_or_else(|e| panic!("trial {trial}: parse failed: {e}\n{text}"));
            assert_eq!(cfg, back, "trial {trial} did not round-trip");
        }
        assert!(valid > 500, "fuzzer should mostly produce valid configs");
    }

    #[test]
    fn latent_flag_forces_zero_mode() {
        let mut cfg = RunConfig::default();
        cfg.no_implicit_latent = true;
        assert_eq!(cfg.effective_latent_mode(), LatentMode::Zero);
        cfg.no_implicit_latent = false;
        cfg.latent_mode = LatentMode::PrevFrame;
        assert_eq!(cfg.effective_latent_mode(), LatentMode::PrevFrame);
    }
}

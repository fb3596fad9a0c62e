//! Self-describing checkpoint container: config text, schedule parameters,
//! every parameter array with its optimizer moments, the training step, and
//! the RNG state. Loading reconstructs a `TrainState` that resumes training
//! bitwise-identically to an uninterrupted run.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::ModelBundle;
use crate::rng::Rng;
use crate::training::{Stream, TrainState};

pub const VIDC_MAGIC: &[u8; 4] = b"VIDC";
pub const VIDC_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f32_array(&mut self, values: impl Iterator<Item = f32>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }
    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(path: &Path, state: &TrainState<f32>, config: &RunConfig) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(VIDC_MAGIC);
    w.u32(VIDC_VERSION);
    w.u32(match state.stream {
        Stream::Content => 0,
        Stream::Motion => 1,
    });
    w.u64(state.step);
    for s in state.rng.state() {
        w.u64(s);
    }
    match state.running_loss {
        Some(v) => {
            w.u32(1);
            w.f64(v);
        }
        None => {
            w.u32(0);
            w.f64(0.0);
        }
    }
    w.u64(state.adam.steps);
    w.str(&config.serialize());
    let ps = match state.stream {
        Stream::Content => &state.bundle.content.ps,
        Stream::Motion => &state.bundle.motion.ps,
    };
    w.u32(ps.len() as u32);
    for (i, entry) in ps.entries().iter().enumerate() {
        w.str(&entry.name);
        let shape = entry.value.shape();
        w.u32(shape.len() as u32);
        for d in shape {
            w.u32(*d as u32);
        }
        w.f32_array(entry.value.iter().copied());
        w.f32_array(state.adam.m[i].iter().copied());
        w.f32_array(state.adam.v[i].iter().copied());
    }
    let tmp = path.with_extension("vidc.tmp");
    fs::write(&tmp, &w.buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild the full training state. The bundle is reconstructed from the
/// embedded config (the untrained stream gets its deterministic fresh init)
/// and the checkpointed stream's parameters and moments are restored exactly.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, RunConfig)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader::new(&buf);
    if r.take(4)? != VIDC_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VIDC_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VIDC_VERSION})",
            path.display()
        )));
    }
    let stream = match r.u32()? {
        0 => Stream::Content,
        1 => Stream::Motion,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown stream tag {other}"
            )))
        }
    };
    let step = r.u64()?;
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let has_loss = r.u32()? == 1;
    let loss_val = r.f64()?;
    let adam_steps = r.u64()?;
    let config_text = r.str()?;
    let config = RunConfig::parse(&config_text)?;
    let bundle = ModelBundle::<f32>::init(&config.model_cfg(), config.seed)?;
    let mut state = TrainState::new(bundle, stream, 0);
    state.step = step;
    state.rng = Rng::from_state(rng_state);
    state.running_loss = if has_loss { Some(loss_val) } else { None };
    state.adam.steps = adam_steps;
    let count = r.u32()? as usize;
    let ps = match stream {
        Stream::Content => &mut state.bundle.content.ps,
        Stream::Motion => &mut state.bundle.motion.ps,
    };
    if count != ps.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {count}, architecture has {}",
            ps.len()
        )));
    }
    for i in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let entry = &mut ps.entries_mut()[i];
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected '{}', found '{name}'",
                entry.name
            )));
        }
        if entry.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape mismatch: {:?} vs {:?}",
                entry.value.shape(),
                shape
            )));
        }
        let n = entry.value.len();
        let vals = r.f32_vec(n)?;
        for (dst, src) in entry.value.iter_mut().zip(vals.iter()) {
            *dst = *src;
        }
        let m = r.f32_vec(n)?;
        for (dst, src) in state.adam.m[i].iter_mut().zip(m.iter()) {
            *dst = *src;
        }
        let v = r.f32_vec(n)?;
        for (dst, src) in state.adam.v[i].iter_mut().zip(v.iter()) {
            *dst = *src;
        }
    }
    Ok((state, config))
}

/// Compose a sampling bundle from separately trained stream checkpoints.
pub fn compose_bundle(
    content_path: &Path,
    motion_path: &Path,
) -> Result<(ModelBundle<f32>, RunConfig, RunConfig)> {
    let (content_state, content_cfg) = load_checkpoint(content_path)?;
    if content_state.stream != Stream::Content {
        return Err(Error::Checkpoint(format!(
            "{} is a {} checkpoint, expected content",
            content_path.display(),
            content_state.stream.name()
        )));
    }
    let (motion_state, motion_cfg) = load_checkpoint(motion_path)?;
    if motion_state.stream != Stream::Motion {
        return Err(Error::Checkpoint(format!(
            "{} is a {} checkpoint, expected motion",
            motion_path.display(),
            motion_state.stream.name()
        )));
    }
    let (a, b) = (&content_cfg, &motion_cfg);
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Checkpoint(format!(
            "checkpoint frame dims differ: {} has {}x{}x{}, {} has {}x{}x{}",
            content_path.display(),
            a.channels,
            a.height,
            a.width,
            motion_path.display(),
            b.channels,
            b.height,
            b.width
        )));
    }
    let bundle = ModelBundle {
        content: content_state.bundle.content,
        motion: motion_state.bundle.motion,
        cfg: motion_state.bundle.cfg,
    };
    Ok((bundle, content_cfg, motion_cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_bouncing_shapes;
    use crate::training::{fit, Stream, TrainState};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.t_steps = 6;
        cfg.base_width = 8;
        cfg.ch_mult = vec![1, 2];
        cfg.res_blocks = 1;
        cfg.time_emb_dim = 8;
        cfg.latent_width = 8;
        cfg.posgn_hidden = 8;
        cfg.videos = 3;
        cfg.frames = 4;
        cfg.channels = 3;
        cfg.height = 16;
        cfg.width = 16;
        cfg.batch_size = 2;
        cfg.max_steps = 3;
        cfg.ckpt_every = 0;
        cfg.log_every = 0;
        cfg.radius_min = 2.0;
        cfg.radius_max = 3.0;
        cfg
    }

    #[test]
    fn save_load_restores_state() {
        let cfg = tiny_config();
        let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
        let schedule = cfg.schedule::<f32>().unwrap();
        let bundle = ModelBundle::<f32>::init(&cfg.model_cfg(), cfg.seed).unwrap();
        let state = TrainState::new(bundle, Stream::Content, 11);
        let mut sink = std::io::sink();
        let state = fit(
            state,
            &ds,
            &schedule,
            &cfg.train_cfg(),
            cfg.data_seed,
            &mut sink,
            None,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("vidc-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("content.vidc");
        save_checkpoint(&path, &state, &cfg).unwrap();
        let (restored, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(restored.step, state.step);
        assert_eq!(restored.rng, state.rng);
        assert_eq!(restored.running_loss, state.running_loss);
        assert!(restored
            .bundle
            .content
            .ps
            .values_equal(&state.bundle.content.ps));
        fs::remove_dir_all(&dir).unwrap();
    }

    /// Resume from a step-k checkpoint, train j more steps: bitwise equal to
    /// the uninterrupted k+j run.
    #[test]
    fn resume_equals_uninterrupted_run() {
        let mut cfg = tiny_config();
        let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
        let schedule = cfg.schedule::<f32>().unwrap();
        // Uninterrupted: 5 steps.
        cfg.max_steps = 5;
        let bundle = ModelBundle::<f32>::init(&cfg.model_cfg(), cfg.seed).unwrap();
        let state = TrainState::new(bundle, Stream::Content, 11);
        let mut sink = std::io::sink();
        let full = fit(
            state,
            &ds,
            &schedule,
            &cfg.train_cfg(),
            cfg.data_seed,
            &mut sink,
            None,
        )
        .unwrap();
        // Interrupted: 2 steps, checkpoint, reload, 3 more.
        cfg.max_steps = 2;
        let bundle = ModelBundle::<f32>::init(&cfg.model_cfg(), cfg.seed).unwrap();
        let state = TrainState::new(bundle, Stream::Content, 11);
        let part = fit(
            state,
            &ds,
            &schedule,
            &cfg.train_cfg(),
            cfg.data_seed,
            &mut sink,
            None,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("vidc-resume-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("part.vidc");
        save_checkpoint(&path, &part, &cfg).unwrap();
        let (resumed, _) = load_checkpoint(&path).unwrap();
        cfg.max_steps = 5;
        let resumed = fit(
            resumed,
            &ds,
            &schedule,
            &cfg.train_cfg(),
            cfg.data_seed,
            &mut sink,
            None,
        )
        .unwrap();
        assert_eq!(resumed.step, full.step);
        assert_eq!(
            resumed.running_loss.unwrap().to_bits(),
            full.running_loss.unwrap().to_bits(),
            "running loss must match bitwise"
        );
        assert!(resumed
            .bundle
            .content
            .ps
            .values_equal(&full.bundle.content.ps));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = std::env::temp_dir().join(format!("vidc-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.vidc");
        fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
        // Valid magic, wrong version.
        let mut buf = Vec::new();
        buf.extend_from_slice(VIDC_MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &buf).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("wrong version must be rejected"),
        };
        assert!(format!("{err}").contains("version"));
        fs::remove_dir_all(&dir).unwrap();
    }
}

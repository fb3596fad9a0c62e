//! Operator surface: gen-data / train / sample / eval / ablate subcommands,
//! media export, and exit-code mapping (0 ok, 2 usage, 3 data, 4 divergence).

use clap::{Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{compose_bundle, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{gen_bouncing_shapes, load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::eval::{fvd_proxy_dim, mean_continuity};
use crate::nets::{LatentMode, ModelBundle};
use crate::sampling::{frame_to_bytes, generate_video, generate_videos, SamplerTrace, VideoClip};
use crate::training::{fit, Stream, TrainState};

#[derive(Parser)]
#[command(name = "vidm", version, about = "Two-stream video diffusion at desk scale")]
struct Cli {
    /// Path to a run configuration file (defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin the deterministic single-threaded compute path (already the
    /// default execution mode; accepted for reproducibility scripting).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic bouncing-shapes dataset to a .vidd file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Train one stream and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// content | motion
        #[arg(long)]
        stream: String,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a clip from trained checkpoints and export PNG frames + GIF.
    Sample {
        #[arg(long)]
        content_ckpt: PathBuf,
        #[arg(long)]
        motion_ckpt: PathBuf,
        /// Frame count (defaults to the config's sample_frames).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump raw little-endian f32 frames.
        #[arg(long)]
        raw: bool,
        /// Write a per-step sampler trace file.
        #[arg(long)]
        trace: bool,
        /// Debugging mode: condition each frame on the true previous frame
        /// of a reference clip instead of the generated one.
        #[arg(long, requires = "reference")]
        teacher_forced: bool,
        /// Reference dataset for --teacher-forced.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Clip index inside the reference dataset.
        #[arg(long, default_value_t = 0)]
        ref_index: usize,
    },
    /// Compare a real dataset against generated clips.
    Eval {
        #[arg(long)]
        real: PathBuf,
        /// Either a .vidd clip file or a directory containing
        /// content.vidc + motion.vidc to sample from.
        #[arg(long)]
        generated: PathBuf,
        /// Report file path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the motion-generator ablation grid.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point shared by the binary and the tests.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path with status 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    match cli.cmd {
        Cmd::GenData { out, force } => cmd_gen_data(&config, &out, force),
        Cmd::Train {
            dataset,
            stream,
            out,
            resume,
        } => cmd_train(&config, &dataset, &stream, &out, resume.as_deref(), cli.config.is_some())
            .map(|_| ()),
        Cmd::Sample {
            content_ckpt,
            motion_ckpt,
            frames,
            out,
            raw,
            trace,
            teacher_forced,
            reference,
            ref_index,
        } => {
            let tf = if teacher_forced {
                Some((reference.expect("clap enforces --reference"), ref_index))
            } else {
                None
            };
            cmd_sample(&content_ckpt, &motion_ckpt, frames, cli.seed, &out, raw, trace, tf)
                .map(|_| ())
        }
        Cmd::Eval {
            real,
            generated,
            out,
        } => cmd_eval(&config, &real, &generated, &out).map(|_| ()),
        Cmd::Ablate { dataset, out } => cmd_ablate(&config, &dataset, &out).map(|_| ()),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(config: &RunConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let ds = gen_bouncing_shapes(&config.gen_spec())?;
    save_dataset(&ds, out)?;
    let m = &ds.manifest;
    println!(
        "wrote {}: videos={} frames={} channels={} height={} width={} seed={}",
        out.display(),
        m.video_count,
        m.frames,
        m.channels,
        m.height,
        m.width,
        m.seed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct Tee<'a> {
    file: fs::File,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.echo.write_all(buf)?;
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

pub fn cmd_train(
    config: &RunConfig,
    dataset_path: &Path,
    stream: &str,
    out_dir: &Path,
    resume: Option<&Path>,
    explicit_config: bool,
) -> Result<PathBuf> {
    let stream = Stream::parse(stream)?;
    let dataset = load_dataset(dataset_path)?;
    fs::create_dir_all(out_dir)?;
    let (state, config) = match resume {
        Some(path) => {
            let (state, mut ckpt_cfg) = load_checkpoint(path)?;
            if state.stream != stream {
                return Err(Error::Usage(format!(
                    "{} holds a {} checkpoint, asked to train {}",
                    path.display(),
                    state.stream.name(),
                    stream.name()
                )));
            }
            // Training-continuation knobs may come from the provided config.
            if explicit_config {
                ckpt_cfg.max_steps = config.max_steps;
                ckpt_cfg.ckpt_every = config.ckpt_every;
                ckpt_cfg.log_every = config.log_every;
            }
            (state, ckpt_cfg)
        }
        None => {
            let bundle = ModelBundle::<f32>::init(&config.model_cfg(), config.seed)?;
            (
                TrainState::new(bundle, stream, config.seed.wrapping_add(1)),
                config.clone(),
            )
        }
    };
    let schedule = config.schedule::<f32>()?;
    let ckpt_path = out_dir.join(format!("{}.vidc", stream.name()));
    let log_path = out_dir.join(format!("{}-loss.log", stream.name()));
    let mut stdout = std::io::stdout();
    let mut tee = Tee {
        file: fs::File::create(&log_path)?,
        echo: &mut stdout,
    };
    let cfg_for_ckpt = config.clone();
    let ckpt_path_cb = ckpt_path.clone();
    let mut save_cb = move |s: &TrainState<f32>| save_checkpoint(&ckpt_path_cb, s, &cfg_for_ckpt);
    let state = fit(
        state,
        &dataset,
        &schedule,
        &config.train_cfg(),
        config.data_seed,
        &mut tee,
        Some(&mut save_cb),
    )?;
    println!(
        "finished {} training at step {} (running loss {:?}); checkpoint: {}",
        stream.name(),
        state.step,
        state.running_loss,
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn export_clip(
    clip: &VideoClip<f32>,
    out_dir: &Path,
    raw: bool,
    fps_hint: f64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let (n, _c, h, w) = clip.frames.dim();
    let mut written = Vec::new();
    for i in 0..n {
        let frame = clip.frames.index_axis(ndarray::Axis(0), i);
        let bytes = frame_to_bytes(&frame);
        let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("frame byte count matches dimensions");
        let path = out_dir.join(format!("frame-{i:03}.png"));
        img.save(&path)
            .map_err(|e| Error::Data(format!("png encode failed: {e}")))?;
        written.push(path);
    }
    if n > 1 {
        let gif_path = out_dir.join("clip.gif");
        let file = fs::File::create(&gif_path)?;
        let mut enc = image::codecs::gif::GifEncoder::new(file);
        enc.set_repeat(image::codecs::gif::Repeat::Infinite)
            .map_err(|e| Error::Data(format!("gif encode failed: {e}")))?;
        let delay_ms = (1000.0 / fps_hint).round().max(1.0) as u32;
        for i in 0..n {
            let frame = clip.frames.index_axis(ndarray::Axis(0), i);
            let rgb = frame_to_bytes(&frame);
            let mut rgba = Vec::with_capacity(rgb.len() / 3 * 4);
            for px in rgb.chunks_exact(3) {
                rgba.extend_from_slice(px);
                rgba.push(255);
            }
            let buf = image::RgbaImage::from_raw(w as u32, h as u32, rgba)
                .expect("frame byte count matches dimensions");
            let gframe = image::Frame::from_parts(
                buf,
                0,
                0,
                image::Delay::from_numer_denom_ms(delay_ms, 1),
            );
            enc.encode_frame(gframe)
                .map_err(|e| Error::Data(format!("gif encode failed: {e}")))?;
        }
        written.push(gif_path);
    }
    if raw {
        let raw_path = out_dir.join("clip.raw");
        let mut buf = Vec::with_capacity(clip.frames.len() * 4);
        for v in clip.frames.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw_path, buf)?;
        written.push(raw_path);
    }
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    content_ckpt: &Path,
    motion_ckpt: &Path,
    frames: Option<usize>,
    seed_override: Option<u64>,
    out_dir: &Path,
    raw: bool,
    trace: bool,
    teacher_forced: Option<(PathBuf, usize)>,
) -> Result<Vec<PathBuf>> {
    let (bundle, _content_cfg, motion_cfg) = compose_bundle(content_ckpt, motion_ckpt)?;
    let n_frames = frames.unwrap_or(motion_cfg.sample_frames);
    if n_frames == 0 {
        return Err(Error::Usage("need at least one frame".into()));
    }
    let seed = seed_override.unwrap_or(motion_cfg.seed);
    let schedule = motion_cfg.schedule::<f32>()?;
    let mut trace_data = trace.then(SamplerTrace::default);
    let mut clip = match &teacher_forced {
        Some((reference, index)) => {
            let ds = load_dataset(reference)?;
            if *index >= ds.manifest.video_count {
                return Err(Error::Usage(format!(
                    "reference index {index} out of range (dataset has {})",
                    ds.manifest.video_count
                )));
            }
            let frames_arr = ds.clip(*index);
            let take = n_frames.min(frames_arr.dim().0);
            let reference_clip = VideoClip {
                frames: frames_arr
                    .slice(ndarray::s![..take, .., .., ..])
                    .to_owned(),
                fps_hint: Some(motion_cfg.fps_hint),
            };
            crate::sampling::generate_video_teacher_forced(
                &bundle,
                &reference_clip,
                &schedule,
                seed,
            )?
        }
        None => generate_video(&bundle, n_frames, &schedule, seed, trace_data.as_mut())?,
    };
    clip.fps_hint = Some(motion_cfg.fps_hint);
    let mut written = export_clip(&clip, out_dir, raw, motion_cfg.fps_hint)?;
    if let Some(tr) = &trace_data {
        let path = out_dir.join("clip.trace");
        tr.write(&path)?;
        written.push(path);
    }
    println!(
        "wrote {} files to {} (frames={n_frames} seed={seed})",
        written.len(),
        out_dir.display()
    );
    Ok(written)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub fvd: f64,
    pub continuity_real: f64,
    pub continuity_generated: f64,
    pub real_clips: usize,
    pub generated_clips: usize,
}

pub fn cmd_eval(
    config: &RunConfig,
    real_path: &Path,
    generated: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let real_ds = load_dataset(real_path)?;
    let take = config.eval_clips.min(real_ds.manifest.video_count);
    let real_clips: Vec<_> = (0..take).map(|i| real_ds.clip(i)).collect();
    let fake_clips: Vec<_> = if generated.is_dir() {
        let content = generated.join("content.vidc");
        let motion = generated.join("motion.vidc");
        if !content.exists() || !motion.exists() {
            return Err(Error::Usage(format!(
                "{} must contain content.vidc and motion.vidc",
                generated.display()
            )));
        }
        let (bundle, _, motion_cfg) = compose_bundle(&content, &motion)?;
        let schedule = motion_cfg.schedule::<f32>()?;
        let clips = generate_videos(
            &bundle,
            config.eval_clips,
            real_ds.manifest.frames,
            &schedule,
            config.seed,
        )?;
        clips.into_iter().map(|c| c.frames).collect()
    } else {
        let ds = load_dataset(generated)?;
        let take = config.eval_clips.min(ds.manifest.video_count);
        (0..take).map(|i| ds.clip(i)).collect()
    };
    if real_clips.len() < 2 || fake_clips.len() < 2 {
        return Err(Error::Data(
            "evaluation needs at least 2 clips on each side".into(),
        ));
    }
    let fvd = fvd_proxy_dim(
        &real_clips,
        &fake_clips,
        config.extractor_seed,
        config.feature_dim,
    )?;
    let continuity_real = mean_continuity(&real_clips)?;
    let continuity_generated = mean_continuity(&fake_clips)?;
    let report = EvalReport {
        fvd,
        continuity_real,
        continuity_generated,
        real_clips: real_clips.len(),
        generated_clips: fake_clips.len(),
    };
    let mut text = String::new();
    text.push_str(&format!("fvd_proxy={}\n", report.fvd));
    text.push_str(&format!("continuity_real={}\n", report.continuity_real));
    text.push_str(&format!(
        "continuity_generated={}\n",
        report.continuity_generated
    ));
    text.push_str(&format!("real_clips={}\n", report.real_clips));
    text.push_str(&format!("generated_clips={}\n", report.generated_clips));
    text.push_str(&format!("extractor_seed={}\n", config.extractor_seed));
    text.push_str(&format!("feature_dim={}\n", config.feature_dim));
    fs::write(out, &text)?;
    print!("{text}");
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// The motion-generator ablation grid, in table order.
pub const ABLATION_ROWS: [&str; 4] = ["vanilla", "no_posgn", "no_implicit_latent", "default"];

/// Build the configuration for one ablation row.
///
/// `vanilla` strips every motion-side contribution at once: plain time-only
/// adaptive norms, no learned latent (the raw previous frame is the only
/// conditioning), and no feature residual — the naive autoregressive
/// next-frame diffusion baseline.
pub fn ablation_variant(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match name {
        "default" => {}
        "no_posgn" => cfg.no_posgn = true,
        "no_implicit_latent" => cfg.no_implicit_latent = true,
        "vanilla" => {
            cfg.no_posgn = true;
            cfg.no_residual = true;
            cfg.latent_mode = LatentMode::PrevFrame;
        }
        other => {
            return Err(Error::Usage(format!("unknown ablation variant '{other}'")));
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub fvd_short: f64,
    pub fvd_long: f64,
    pub continuity: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub continuity_real: f64,
    pub seed: u64,
    pub steps: u64,
}

pub fn cmd_ablate(config: &RunConfig, dataset_path: &Path, out_dir: &Path) -> Result<AblationTable> {
    let dataset = load_dataset(dataset_path)?;
    fs::create_dir_all(out_dir)?;
    let schedule = config.schedule::<f32>()?;
    let mut sink = std::io::sink();

    // One shared content model; variants differ only in the motion stream.
    let content_bundle = ModelBundle::<f32>::init(&config.model_cfg(), config.seed)?;
    let content_state = TrainState::new(content_bundle, Stream::Content, config.seed.wrapping_add(1));
    let content_state = fit(
        content_state,
        &dataset,
        &schedule,
        &config.train_cfg(),
        config.data_seed,
        &mut sink,
        None,
    )?;
    let content = content_state.bundle.content;

    let real_clips: Vec<_> = (0..config.eval_clips.min(dataset.manifest.video_count))
        .map(|i| dataset.clip(i))
        .collect();
    let continuity_real = mean_continuity(&real_clips)?;
    let n_short = dataset.manifest.frames;
    let n_long = n_short * 2;

    let mut rows = Vec::new();
    let mut content_holder = Some(content);
    for name in ABLATION_ROWS {
        let vcfg = ablation_variant(config, name)?;
        // Identical seeds and steps across variants.
        let bundle = ModelBundle::<f32>::init(&vcfg.model_cfg(), vcfg.seed)?;
        let state = TrainState::new(bundle, Stream::Motion, vcfg.seed.wrapping_add(2));
        let state = fit(
            state,
            &dataset,
            &schedule,
            &vcfg.train_cfg(),
            vcfg.data_seed,
            &mut sink,
            None,
        )?;
        // Swap the shared trained content model into this variant's bundle.
        let mut bundle = state.bundle;
        let content = content_holder.take().unwrap();
        bundle.content = content;
        let clips_short = generate_videos(
            &bundle,
            vcfg.eval_clips,
            n_short,
            &schedule,
            vcfg.seed.wrapping_add(3),
        )?;
        let frames_short: Vec<_> = clips_short.into_iter().map(|c| c.frames).collect();
        let clips_long = generate_videos(
            &bundle,
            vcfg.eval_clips,
            n_long,
            &schedule,
            vcfg.seed.wrapping_add(4),
        )?;
        let frames_long: Vec<_> = clips_long.into_iter().map(|c| c.frames).collect();
        let fvd_short = fvd_proxy_dim(
            &real_clips,
            &frames_short,
            vcfg.extractor_seed,
            vcfg.feature_dim,
        )?;
        // Long clips are compared against the same real distribution by
        // truncating to the real length statistics; report the raw distance
        // against long generations of the real extractor on short clips.
        let fvd_long = fvd_proxy_dim(
            &real_clips,
            &frames_long
                .iter()
                .map(|c| {
                    c.slice(ndarray::s![..n_short, .., .., ..]).to_owned()
                })
                .collect::<Vec<_>>(),
            vcfg.extractor_seed,
            vcfg.feature_dim,
        )?;
        let continuity = mean_continuity(&frames_short)?;
        content_holder = Some(bundle.content);
        rows.push(AblationRow {
            name: name.to_string(),
            fvd_short,
            fvd_long,
            continuity,
        });
        println!(
            "variant={name} fvd{n_short}={fvd_short} fvd{n_long}={fvd_long} continuity={continuity}"
        );
    }
    let table = AblationTable {
        rows,
        continuity_real,
        seed: config.seed,
        steps: config.max_steps,
    };
    // CSV table mirroring the row structure, plus a key=value log.
    let mut csv = format!("variant,fvd_{n_short},fvd_{n_long}_first{n_short},continuity\n");
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.name, r.fvd_short, r.fvd_long, r.continuity
        ));
    }
    fs::write(out_dir.join("ablation.csv"), &csv)?;
    let mut log = String::new();
    log.push_str(&format!("seed={}\n", table.seed));
    log.push_str(&format!("steps={}\n", table.steps));
    log.push_str(&format!("continuity_real={}\n", table.continuity_real));
    for r in &table.rows {
        log.push_str(&format!("fvd_{}={}\n", r.name, r.fvd_short));
    }
    fs::write(out_dir.join("ablation.log"), &log)?;
    Ok(table)
}

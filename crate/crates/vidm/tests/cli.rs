//! End-to-end checks of the command surface: dataset generation, training,
//! sampling with media export, evaluation, and the ablation grid, all via
//! the same entry point the binary uses.

use std::fs;
use std::path::{Path, PathBuf};

use vidm::cli;
use vidm::config::RunConfig;
use vidm::data::{gen_bouncing_shapes, save_dataset};
use vidm::eval::fvd_proxy_dim;
use vidm::rng::Rng;

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vidm-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.t_steps = 6;
    cfg.base_width = 8;
    cfg.ch_mult = vec![1, 2];
    cfg.res_blocks = 1;
    cfg.attn_res = 8;
    cfg.time_emb_dim = 8;
    cfg.latent_width = 8;
    cfg.posgn_hidden = 8;
    cfg.videos = 4;
    cfg.frames = 4;
    cfg.height = 16;
    cfg.width = 16;
    cfg.batch_size = 2;
    cfg.max_steps = 2;
    cfg.ckpt_every = 0;
    cfg.log_every = 1;
    cfg.radius_min = 2.0;
    cfg.radius_max = 3.0;
    cfg.sample_frames = 3;
    cfg.eval_clips = 4;
    cfg.feature_dim = 16;
    cfg
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["vidm".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    cli::run(full)
}

#[test]
fn gen_data_writes_magic_and_respects_force() {
    let dir = tmp_dir("gendata");
    let cfg_path = dir.join("run.cfg");
    tiny_config().save(&cfg_path).unwrap();
    let out = dir.join("toy.vidd");
    let code = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"VIDD");
    // Refuses to overwrite without --force.
    let code = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    // Same seed, same bytes after --force.
    let code = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(code, 0);
    let bytes2 = fs::read(&out).unwrap();
    assert_eq!(bytes, bytes2, "regeneration with the same seed must be identical");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_zero_steps_writes_initial_checkpoint() {
    let dir = tmp_dir("train0");
    let mut cfg = tiny_config();
    cfg.max_steps = 0;
    let cfg_path = dir.join("run.cfg");
    cfg.save(&cfg_path).unwrap();
    let data_path = dir.join("toy.vidd");
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    save_dataset(&ds, &data_path).unwrap();
    let out = dir.join("ckpts");
    let code = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--dataset",
        data_path.to_str().unwrap(),
        "--stream",
        "content",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let (state, _) = vidm::checkpoint::load_checkpoint(&out.join("content.vidc")).unwrap();
    assert_eq!(state.step, 0, "checkpoint at step 0");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_divergence_exits_with_code_4() {
    let dir = tmp_dir("diverge");
    let mut cfg = tiny_config();
    cfg.lr = 1e3;
    cfg.max_steps = 50;
    let cfg_path = dir.join("run.cfg");
    cfg.save(&cfg_path).unwrap();
    let data_path = dir.join("toy.vidd");
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    save_dataset(&ds, &data_path).unwrap();
    let out = dir.join("ckpts");
    let code = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--dataset",
        data_path.to_str().unwrap(),
        "--stream",
        "content",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 4, "divergence must exit with the dedicated code");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn divergence_error_names_the_step() {
    let err = vidm::error::Error::Diverged {
        step: 17,
        loss: f64::INFINITY,
    };
    let msg = format!("{err}");
    assert!(msg.contains("17"), "message must carry the step index: {msg}");
}

fn train_pair(dir: &Path, cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let cfg_path = dir.join("run.cfg");
    cfg.save(&cfg_path).unwrap();
    let data_path = dir.join("toy.vidd");
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    save_dataset(&ds, &data_path).unwrap();
    let out = dir.join("ckpts");
    for stream in ["content", "motion"] {
        let code = run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--dataset",
            data_path.to_str().unwrap(),
            "--stream",
            stream,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{stream} training failed");
    }
    (out.join("content.vidc"), out.join("motion.vidc"))
}

#[test]
fn sample_exports_pngs_and_gif_reproducibly() {
    let dir = tmp_dir("sample");
    let cfg = tiny_config();
    let (content, motion) = train_pair(&dir, &cfg);
    // N = 1: single PNG, no GIF.
    let out1 = dir.join("single");
    let code = run(&[
        "sample",
        "--content-ckpt",
        content.to_str().unwrap(),
        "--motion-ckpt",
        motion.to_str().unwrap(),
        "--frames",
        "1",
        "--seed",
        "9",
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out1.join("frame-000.png").exists());
    assert!(!out1.join("clip.gif").exists(), "no GIF for a single frame");
    // N = 4 with a fixed seed: byte-identical across two runs.
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let code = run(&[
            "sample",
            "--content-ckpt",
            content.to_str().unwrap(),
            "--motion-ckpt",
            motion.to_str().unwrap(),
            "--frames",
            "4",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            "--raw",
            "--trace",
        ]);
        assert_eq!(code, 0);
    }
    for name in ["frame-000.png", "frame-003.png", "clip.gif", "clip.raw"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // Trace has N*T records.
    let trace = vidm::sampling::SamplerTrace::read(&out_a.join("clip.trace")).unwrap();
    assert_eq!(trace.records.len(), 4 * cfg.t_steps);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sample_rejects_mismatched_checkpoint_dims() {
    let dir = tmp_dir("mismatch");
    let cfg = tiny_config();
    let (content, _) = train_pair(&dir, &cfg);
    let dir2 = tmp_dir("mismatch2");
    let mut cfg2 = tiny_config();
    cfg2.height = 32;
    cfg2.width = 32;
    let (_, motion2) = train_pair(&dir2, &cfg2);
    let code = run(&[
        "sample",
        "--content-ckpt",
        content.to_str().unwrap(),
        "--motion-ckpt",
        motion2.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    // The underlying error names both checkpoints.
    let err = match vidm::checkpoint::compose_bundle(&content, &motion2) {
        Err(e) => format!("{e}"),
        Ok(_) => panic!("mismatched dims must be rejected"),
    };
    assert!(err.contains("content.vidc") && err.contains("motion.vidc"), "{err}");
    fs::remove_dir_all(&dir).unwrap();
    fs::remove_dir_all(&dir2).unwrap();
}

#[test]
fn eval_reports_and_split_half_ratio() {
    let dir = tmp_dir("eval");
    // A real dataset split into halves scores near zero compared with the
    // distance to uniform noise.
    let mut cfg = tiny_config();
    cfg.videos = 32;
    cfg.frames = 8;
    cfg.height = 32;
    cfg.width = 32;
    cfg.eval_clips = 16;
    cfg.feature_dim = 32;
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    let half_a: Vec<_> = (0..16).map(|i| ds.clip(i)).collect();
    let half_b: Vec<_> = (16..32).map(|i| ds.clip(i)).collect();
    let mut rng = Rng::seed_from(5);
    let noise: Vec<_> = (0..16)
        .map(|_| {
            let mut c = ndarray::Array4::<f32>::zeros((8, 3, 32, 32));
            for v in c.iter_mut() {
                *v = rng.uniform::<f32>(-1.0, 1.0);
            }
            c
        })
        .collect();
    let d_halves = fvd_proxy_dim(&half_a, &half_b, cfg.extractor_seed, cfg.feature_dim).unwrap();
    let d_noise = fvd_proxy_dim(&half_a, &noise, cfg.extractor_seed, cfg.feature_dim).unwrap();
    let ratio = d_halves / d_noise;
    assert!(
        ratio < 0.05,
        "real-vs-real {d_halves} over real-vs-noise {d_noise} gives ratio {ratio}"
    );

    // File-level command: report written and deterministic.
    let cfg_path = dir.join("run.cfg");
    cfg.save(&cfg_path).unwrap();
    let real_path = dir.join("real.vidd");
    save_dataset(&ds, &real_path).unwrap();
    let gen_path = dir.join("gen.vidd");
    save_dataset(&ds, &gen_path).unwrap();
    let report1 = dir.join("report1.txt");
    let report2 = dir.join("report2.txt");
    for report in [&report1, &report2] {
        let code = run(&[
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--real",
            real_path.to_str().unwrap(),
            "--generated",
            gen_path.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let a = fs::read_to_string(&report1).unwrap();
    let b = fs::read_to_string(&report2).unwrap();
    assert_eq!(a, b, "re-running eval must reproduce the report");
    assert!(a.contains("fvd_proxy="));

    // Missing input: nonzero exit.
    let code = run(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--real",
        dir.join("missing.vidd").to_str().unwrap(),
        "--generated",
        gen_path.to_str().unwrap(),
        "--out",
        dir.join("r.txt").to_str().unwrap(),
    ]);
    assert_ne!(code, 0);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ablate_emits_all_rows_with_shared_seed() {
    let dir = tmp_dir("ablate");
    let mut cfg = tiny_config();
    cfg.videos = 4;
    cfg.frames = 4;
    cfg.max_steps = 1;
    cfg.eval_clips = 2;
    cfg.feature_dim = 8;
    let cfg_path = dir.join("run.cfg");
    cfg.save(&cfg_path).unwrap();
    let data_path = dir.join("toy.vidd");
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    save_dataset(&ds, &data_path).unwrap();
    let out = dir.join("ablation");
    let code = run(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--dataset",
        data_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    for row in ["vanilla", "no_posgn", "no_implicit_latent", "default"] {
        assert!(csv.contains(&format!("\n{row},")), "missing row {row} in:\n{csv}");
    }
    let log = fs::read_to_string(out.join("ablation.log")).unwrap();
    assert!(log.contains(&format!("seed={}", cfg.seed)));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["gen-data", "--nonsense"]), 2);
}

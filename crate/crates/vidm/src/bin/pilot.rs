// Scratch calibration runner (not part of the deliverable surface).
use std::time::Instant;
use vidm::config::RunConfig;
use vidm::data::gen_bouncing_shapes;
use vidm::diffusion::SigmaMode;
use vidm::eval::{continuity_score, fvd_proxy_dim, mean_continuity};
use vidm::nets::ModelBundle;
use vidm::sampling::generate_videos;
use vidm::training::{fit, Stream, TrainState};

fn centroid_drift(f: &ndarray::Array4<f32>) -> f64 {
    // Mean per-step movement of the brightness centroid, in pixels.
    let (n, _c, h, w) = f.dim();
    let mut prev: Option<(f64, f64)> = None;
    let mut acc = 0.0;
    let mut count = 0;
    for fi in 0..n {
        let frame = f.index_axis(ndarray::Axis(0), fi);
        let mut mass = 0.0f64;
        let mut cx = 0.0f64;
        let mut cy = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let mut v = 0.0f64;
                for ci in 0..frame.dim().0 {
                    v += (frame[[ci, i, j]] as f64 + 1.0).max(0.0);
                }
                mass += v;
                cy += v * i as f64;
                cx += v * j as f64;
            }
        }
        if mass > 1e-6 {
            let c = (cx / mass, cy / mass);
            if let Some(p) = prev {
                acc += ((c.0 - p.0).powi(2) + (c.1 - p.1).powi(2)).sqrt();
                count += 1;
            }
            prev = Some(c);
        }
    }
    if count == 0 { 0.0 } else { acc / count as f64 }
}

fn clip_stats(f: &ndarray::Array4<f32>) -> (f32, f32, f64) {
    let mut lo = f32::INFINITY; let mut hi = f32::NEG_INFINITY; let mut near_bg = 0usize;
    let f0 = f.index_axis(ndarray::Axis(0), 0);
    for v in f0.iter() {
        lo = lo.min(*v); hi = hi.max(*v);
        if (*v + 1.0).abs() < 0.15 { near_bg += 1; }
    }
    (lo, hi, near_bg as f64 / f0.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let content_steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let motion_steps: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let clips: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);
    let hw: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(16);
    let eta: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1e-8);

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.base_width = width;
    cfg.res_blocks = 1;
    cfg.attn_res = 8;
    cfg.time_emb_dim = 32;
    cfg.lr = lr;
    cfg.eta = eta;
    cfg.batch_size = 8;
    cfg.log_every = 500;
    cfg.eval_clips = clips;
    cfg.height = hw;
    cfg.width = hw;
    if hw <= 16 { cfg.radius_min = 2.0; cfg.radius_max = 3.5; cfg.speed_min = 1.0; cfg.speed_max = 2.0; }
    println!("pilot: width={width} hw={hw} content={content_steps} motion={motion_steps} lr={lr} clips={clips} seed={seed} eta={eta}");

    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    let real_clips: Vec<_> = (0..64).map(|i| ds.clip(i)).collect();
    let cont_real = mean_continuity(&real_clips).unwrap();
    let drift_real: f64 = real_clips.iter().map(|c| centroid_drift(c)).sum::<f64>() / real_clips.len() as f64;
    println!("continuity_real={cont_real:.5} centroid_drift_real={drift_real:.3}px");
    let schedule = cfg.schedule::<f32>().unwrap();
    let mut post_cfg = cfg.clone();
    post_cfg.sigma_mode = SigmaMode::Posterior;
    let post_schedule = post_cfg.schedule::<f32>().unwrap();
    let mut out = std::io::stdout();

    let t0 = Instant::now();
    let mut ccfg = cfg.clone();
    ccfg.max_steps = content_steps;
    let bundle = ModelBundle::<f32>::init(&ccfg.model_cfg(), ccfg.seed).unwrap();
    let state = TrainState::new(bundle, Stream::Content, ccfg.seed + 1);
    let state = fit(state, &ds, &schedule, &ccfg.train_cfg(), ccfg.data_seed, &mut out, None).unwrap();
    println!("content: {} steps in {:.0}s loss={:?}", state.step, t0.elapsed().as_secs_f64(), state.running_loss);
    let mut content_holder = Some(state.bundle.content);

    for variant in ["default", "vanilla"] {
        let mut vcfg = vidm::cli::ablation_variant(&cfg, variant).unwrap();
        vcfg.max_steps = motion_steps;
        let t0 = Instant::now();
        let bundle = ModelBundle::<f32>::init(&vcfg.model_cfg(), vcfg.seed).unwrap();
        let state = TrainState::new(bundle, Stream::Motion, vcfg.seed + 2);
        let state = fit(state, &ds, &schedule, &vcfg.train_cfg(), vcfg.data_seed, &mut out, None).unwrap();
        println!("motion[{variant}]: {} steps in {:.0}s loss={:?}", state.step, t0.elapsed().as_secs_f64(), state.running_loss);
        let mut bundle = state.bundle;
        bundle.content = content_holder.take().unwrap();
        for (mode, sched) in [("sqrt_beta", &schedule), ("posterior", &post_schedule)] {
            let t0 = Instant::now();
            let clipset = generate_videos(&bundle, clips, 16, sched, vcfg.seed + 3).unwrap();
            let frames: Vec<_> = clipset.into_iter().map(|c| c.frames).collect();
            let conts: Vec<f64> = frames.iter().map(|f| continuity_score(f).unwrap()).collect();
            let stats: Vec<String> = frames.iter().map(|f| {
                let (lo, hi, bg) = clip_stats(f);
                format!("[{lo:.1},{hi:.1},bg{bg:.2}]")
            }).collect();
            let cont = mean_continuity(&frames).unwrap();
            let fvd = fvd_proxy_dim(&real_clips, &frames, cfg.extractor_seed, 256).unwrap();
            let drifts: Vec<f64> = frames.iter().map(centroid_drift).collect();
            let drift = drifts.iter().sum::<f64>() / drifts.len() as f64;
            let clean: Vec<f64> = conts.iter().cloned().filter(|c| *c < 2.0).collect();
            let clean_mean = if clean.is_empty() { f64::NAN } else { clean.iter().sum::<f64>() / clean.len() as f64 };
            println!("  sigma={mode}: sampled in {:.0}s", t0.elapsed().as_secs_f64());
            println!("    frame0: {}", stats.join(" "));
            println!("    continuity per clip: {:?}", conts.iter().map(|c| (c*1000.0).round()/1000.0).collect::<Vec<_>>());
            println!("RESULT variant={variant} sigma={mode} cont={cont:.4} ratio={:.2} drift={drift:.3}px fvd={fvd:.2} exploded={}",
                cont / cont_real, conts.len() - clean.len());
            let _ = clean_mean;
        }
        content_holder = Some(bundle.content);
    }
    println!("total pilot done");
}

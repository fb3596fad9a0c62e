// Scratch convergence probe (not part of the deliverable surface).
use vidm::config::RunConfig;
use vidm::data::gen_bouncing_shapes;
use vidm::nets::ModelBundle;
use vidm::sampling::sample_content;
use vidm::training::{fit, Stream, TrainState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let hw: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let total: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5000);
    let every: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(500);
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let eta: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-8);

    let mut cfg = RunConfig::default();
    cfg.base_width = 16;
    cfg.res_blocks = 1;
    cfg.attn_res = 8;
    cfg.time_emb_dim = 32;
    cfg.lr = lr;
    cfg.eta = eta;
    cfg.batch_size = batch;
    cfg.log_every = 0;
    cfg.height = hw;
    cfg.width = hw;
    if hw <= 16 { cfg.radius_min = 2.0; cfg.radius_max = 3.5; cfg.speed_min = 1.0; cfg.speed_max = 2.0; }
    println!("probe: hw={hw} lr={lr} total={total} every={every} batch={batch} eta={eta}");
    let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
    let schedule = cfg.schedule::<f32>().unwrap();
    let mut sink = std::io::sink();
    let bundle = ModelBundle::<f32>::init(&cfg.model_cfg(), cfg.seed).unwrap();
    let mut state = TrainState::new(bundle, Stream::Content, cfg.seed + 1);
    let mut done = 0u64;
    let t0 = std::time::Instant::now();
    while done < total {
        let mut c = cfg.clone();
        done += every;
        c.max_steps = done;
        state = fit(state, &ds, &schedule, &c.train_cfg(), c.data_seed, &mut sink, None).unwrap();
        let frames = sample_content(&state.bundle, &schedule, 99, 4).unwrap();
        let mut lo = f32::INFINITY; let mut hi = f32::NEG_INFINITY; let mut near_bg = 0usize; let mut bright = 0usize;
        let tot = frames.len();
        for v in frames.iter() {
            lo = lo.min(*v); hi = hi.max(*v);
            if (*v + 1.0).abs() < 0.15 { near_bg += 1; }
            if *v > -0.5 { bright += 1; }
        }
        println!("step={done} loss={:.4} sample: min={lo:.2} max={hi:.2} near_bg={:.2} bright={:.2} [{:.0}s]",
            state.running_loss.unwrap(), near_bg as f64 / tot as f64, bright as f64 / tot as f64, t0.elapsed().as_secs_f64());
    }
}

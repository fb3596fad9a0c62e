// Scratch micro-benchmark (not part of the deliverable surface).
use vidm::config::RunConfig;
use vidm::data::gen_bouncing_shapes;
use vidm::eval::mean_continuity;

fn main() {
    for (h, smin, smax, rmin, rmax) in [
        (32usize, 1.5, 2.5, 3.5, 6.0),
        (32, 3.0, 4.5, 4.5, 6.5),
        (32, 3.5, 5.0, 5.0, 7.0),
        (16, 1.0, 2.0, 2.0, 3.5),
        (16, 2.5, 3.5, 2.5, 4.0),
    ] {
        let mut cfg = RunConfig::default();
        cfg.height = h; cfg.width = h;
        cfg.speed_min = smin; cfg.speed_max = smax;
        cfg.radius_min = rmin; cfg.radius_max = rmax;
        let ds = gen_bouncing_shapes(&cfg.gen_spec()).unwrap();
        let clips: Vec<_> = (0..64).map(|i| ds.clip(i)).collect();
        let cont = mean_continuity(&clips).unwrap();
        println!("h={h} speed=[{smin},{smax}] radius=[{rmin},{rmax}]: continuity_real={cont:.4} (0.1x = {:.4})", cont * 0.1);
    }
}

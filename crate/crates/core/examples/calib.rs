use sags_core::io::{synth_scene, SynthConfig};
use sags_core::trainer::{train_with_progress, TrainConfig};
use std::time::Instant;
fn main() {
    let it: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let s = synth_scene(0, &SynthConfig::default()).unwrap();
    let (cams, imgs) = s.bundle.train_views();
    let mut cfg = TrainConfig::toy();
    cfg.iterations = it;
    cfg.grow.start = it / 4; cfg.grow.end = it * 3 / 4;
    for a in std::env::args().skip(2) { cfg.ablations.disable(&a).unwrap(); }
    let t = Instant::now();
    let out = train_with_progress(s.bundle.points.positions(), &cams, &imgs, &cfg, |r| {
        if let Some(p) = r.psnr { eprintln!("{} loss {:.4} psnr {:.2} n {} t {:.1}", r.iteration, r.loss, p, r.n_points, t.elapsed().as_secs_f64()); }
    }).unwrap();
    let m = &out.state.model;
    let scores = sags_core::eval::evaluate_views(m, &cams, &imgs, [0.0;3]).unwrap();
    eprintln!("mean psnr {:.3} time {:.1}s points {}", sags_core::eval::mean_psnr(&scores), t.elapsed().as_secs_f64(), m.rendered_points());
}

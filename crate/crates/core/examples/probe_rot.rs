use rolo_core::io::{read_scan_bin, read_poses, PipelineConfig, TrajectoryFormat};
use rolo_core::pipeline::SlamEngine;
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/ds3");
    let mut cfg = PipelineConfig::parse(&std::fs::read_to_string(dir.join("dataset.cfg")).unwrap()).unwrap();
    cfg.front_end.solver = cfg.solver.clone();
    cfg.back_end.solver = cfg.solver.clone();
    let gt = read_poses(&dir.join("gt.tum"), TrajectoryFormat::Tum).unwrap();
    let origin = gt[0].pose;
    let stamps: Vec<f64> = std::fs::read_to_string(dir.join("times.txt")).unwrap()
        .lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().parse().unwrap()).collect();
    let mut engine = SlamEngine::new(cfg.clone());
    for i in 0..80 {
        let mut scan = read_scan_bin(&dir.join(format!("{i:06}.bin")), &cfg.sensor).unwrap();
        scan.stamp = stamps[i];
        let r = engine.process(&scan);
        let gt_rel = origin.invert().compose(&gt[i].pose);
        let (er, et) = r.pose.error_to(&gt_rel);
        if i % 4 == 0 || et > 1.0 {
            println!(
                "f{i:02}: err rot {:6.2}° t {:7.3} | pose ({:+7.2},{:+7.2},{:+6.2}) kf {}",
                er.to_degrees(), et,
                r.pose.translation.x, r.pose.translation.y, r.pose.translation.z,
                r.keyframe_added as u8
            );
        }
        if et > 20.0 { break; }
    }
}

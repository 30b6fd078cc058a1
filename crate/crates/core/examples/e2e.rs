use std::time::Instant;

use sfa_core::eval::{evaluate, EvalConfig, GroundTruth};
use sfa_core::hsi::{generate_domain_pair, SynthConfig};
use sfa_core::trainer::{infer_samples, train, Ablation, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut synth = SynthConfig::default();
    let mut cfg = TrainConfig::default();
    let mut modes = vec![Ablation::Full, Ablation::NoSacm, Ablation::NoSsamSacm, Ablation::SourceOnly];
    for a in &args[1..] {
        let (k, v) = a.split_once('=').unwrap();
        if k == "modes" {
            modes = v.split(',').map(|m| m.parse().unwrap()).collect();
        } else if k.starts_with("synth.") {
            synth.set(&k[6..], v).unwrap();
        } else {
            cfg.set(k, v).unwrap();
        }
    }
    let pair = generate_domain_pair(&synth).unwrap();
    let gt: Vec<_> = pair.target.iter().map(|s| GroundTruth::from_sample(s).unwrap()).collect();
    for mode in modes {
        let c = TrainConfig { ablation: mode, ..cfg.clone() };
        let t = Instant::now();
        let out = train(&c, &pair.source, &pair.target, |l| {
            if l.step % 50 == 0 {
                eprintln!("{mode} {}", l.csv_row());
            }
        })
        .unwrap();
        let secs = t.elapsed().as_secs_f64();
        let l0 = out.losses[0];
        let l199 = out.losses[199.min(out.losses.len() - 1)];
        let dets: Vec<_> = infer_samples(&out.model, &pair.target).unwrap().concat();
        let r = evaluate(&dets, &gt, &pair.categories, &EvalConfig::default()).unwrap();
        // Source AP as a sanity check of the detector itself.
        let sgt: Vec<_> = pair.source.iter().map(|s| GroundTruth::from_sample(s).unwrap()).collect();
        let sm: Vec<_> = pair.source.iter().map(|s| s.with_cube(sfa_core::hsi::match_bands(s.cube(), out.model.ssam.bands)).unwrap()).collect();
        let sd: Vec<_> = infer_samples(&out.model, &sm).unwrap().concat();
        let rs = evaluate(&sd, &sgt, &pair.categories, &EvalConfig::default()).unwrap();
        println!(
            "{mode:>14} ap50={:.4} ap={:.4} ar={:.4} src_ap50={:.4} ndet={} s_r {:.1}->{:.1} t_r {:.1}->{:.1} time={secs:.1}s",
            r.ap50.unwrap_or(-1.0), r.ap.unwrap_or(-1.0), r.ar.unwrap_or(-1.0), rs.ap50.unwrap_or(-1.0), dets.len(),
            l0.l_s_r, l199.l_s_r, l0.l_t_r, l199.l_t_r
        );
    }
}

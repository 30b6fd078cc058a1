//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the default harness so the lines appear in order on stdout.
//! The process exits non-zero if any criterion fails.

mod common;

use std::panic::catch_unwind;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use common::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng;
use sfa_core::autodiff::{Graph, RoiRegion, Tensor, Var};
use sfa_core::boxes::BBox;
use sfa_core::detect::{
    detections_to_json, encode, roi_loss, rpn_labels, rpn_loss, AnchorLabel, AnchorSet, DetectConfig, Detection,
    RoiOutput, RoiSample, RpnOutput, RPN_DELTA_WEIGHTS,
};
use sfa_core::eval::{evaluate, size_bucket, EvalConfig, EvalReport, GroundTruth, SizeBucket};
use sfa_core::hsi::{band_mapping, generate_domain_pair, match_bands, Category, HyperCube, Object, SynthConfig};
use sfa_core::sacm::{gram, sacm_loss};
use sfa_core::ssam::{domain_loss, recon_loss, Domain, SsamOutput};
use sfa_core::trainer::{infer_samples, losses_to_csv, train, Ablation, LossBreakdown, TrainConfig, TrainOutcome};

const INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-3;

type Criterion = fn() -> Result<String, String>;

fn main() {
    // Numeric arguments select criteria; harness flags are ignored.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Vec<&str> = args.iter().map(String::as_str).filter(|a| a.parse::<u32>().is_ok()).collect();
    let criteria: [(&str, Criterion); 10] = [
        ("1 gradient suite", gradient_suite),
        ("2 gradient reversal contract", grl_contract),
        ("3 closed-form domain loss", domain_loss_values),
        ("4 SACM identities", sacm_identities),
        ("5 band matching", band_matching),
        ("6 evaluator oracle", evaluator_oracle),
        ("7 loss aggregation identity", loss_aggregation),
        ("8 target-label firewall", label_firewall),
        ("9 synthetic ablation trend", ablation_trend),
        ("10 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&name.split(' ').next().unwrap_or("")) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{name}] {detail} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{name}] {} ({secs:.1}s)", msg.replace('\n', " "));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1 ------------------------------------------------------------------

/// `sum(out ⊙ r)` for a fixed random `r`, turning any op into a scalar.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let m = g.mul(out, rv).unwrap();
    g.sum(m)
}

fn check_op(name: &str, results: &mut Vec<String>, mut instance: impl FnMut(u64) -> GradCheck) -> Result<(), String> {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES as u64 {
        let c = instance(1000 + i);
        ensure(c.rel_err <= GRAD_TOL, || format!("{name} instance {i}: relative error {:.2e}", c.rel_err))?;
        worst = worst.max(c.rel_err);
    }
    results.push(format!("{name} {worst:.1e}"));
    Ok(())
}

fn gradient_suite() -> Result<String, String> {
    let mut res = Vec::new();

    check_op("conv2d", &mut res, |seed| {
        let mut r = rng(seed);
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let x = random_tensor(&[n, c, h, w], -1.0, 1.0, &mut r);
        let wt = random_tensor(&[o, c, k, k], -1.0, 1.0, &mut r);
        let b = random_tensor(&[o], -1.0, 1.0, &mut r);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let proj = random_tensor(&[n, o, oh, ow], -1.0, 1.0, &mut r);
        gradcheck(&[x, wt, b], 0.1, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            project(g, y, &proj)
        })
    })?;

    check_op("avg_pool2d", &mut res, |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3)];
        let x = random_tensor(&shape, -1.0, 1.0, &mut r);
        let proj = random_tensor(&[shape[0], shape[1], shape[2] / 2, shape[3] / 2], -1.0, 1.0, &mut r);
        gradcheck(&[x], 0.1, |g, v| {
            let y = g.avg_pool2d(v[0], 2).unwrap();
            project(g, y, &proj)
        })
    })?;

    check_op("max_pool2d", &mut res, |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3)];
        let x = distinct_values(&shape, &mut r);
        let proj = random_tensor(&[shape[0], shape[1], shape[2] / 2, shape[3] / 2], -1.0, 1.0, &mut r);
        gradcheck(&[x], 0.02, |g, v| {
            let y = g.max_pool2d(v[0], 2).unwrap();
            project(g, y, &proj)
        })
    })?;

    check_op("global_avg_pool", &mut res, |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
        let x = random_tensor(&shape, -1.0, 1.0, &mut r);
        let proj = random_tensor(&[shape[0], shape[1], 1, 1], -1.0, 1.0, &mut r);
        gradcheck(&[x], 0.1, |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            let y = g.reshape(y, &[shape[0], shape[1], 1, 1]).unwrap();
            project(g, y, &proj)
        })
    })?;

    check_op("upsample_nearest2d", &mut res, |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
        let x = random_tensor(&shape, -1.0, 1.0, &mut r);
        let proj = random_tensor(&[shape[0], shape[1], shape[2] * 2, shape[3] * 2], -1.0, 1.0, &mut r);
        gradcheck(&[x], 0.1, |g, v| {
            let y = g.upsample_nearest2d(v[0], 2).unwrap();
            project(g, y, &proj)
        })
    })?;

    check_op("roi_align", &mut res, |seed| {
        let mut r = rng(seed);
        let (n, c, h, w) = (r.random_range(1..=2), r.random_range(1..=2), 6, 6);
        let x = random_tensor(&[n, c, h, w], -1.0, 1.0, &mut r);
        let rois: Vec<RoiRegion> = (0..r.random_range(1..=3))
            .map(|_| {
                let x0 = r.random_range(-0.5f32..3.0);
                let y0 = r.random_range(-0.5f32..3.0);
                RoiRegion {
                    batch: r.random_range(0..n),
                    x0,
                    y0,
                    x1: x0 + r.random_range(0.5f32..3.0),
                    y1: y0 + r.random_range(0.5f32..3.0),
                }
            })
            .collect();
        let proj = random_tensor(&[rois.len(), c, 2, 2], -1.0, 1.0, &mut r);
        gradcheck(&[x], 0.1, |g, v| {
            let y = g.roi_align(v[0], rois.clone(), 2, 2).unwrap();
            project(g, y, &proj)
        })
    })?;

    // Forward is the identity, so the finite-difference truth is the unit
    // gradient; the backward must return it times the scale.
    check_op("grad_reverse", &mut res, |seed| {
        let mut r = rng(seed);
        let scale = r.random_range(-1.0f32..1.0);
        let shape = [r.random_range(1..=3), r.random_range(1..=4)];
        let x = random_tensor(&shape, -1.0, 1.0, &mut r);
        let proj = random_tensor(&shape, -1.0, 1.0, &mut r);
        gradcheck_with_factor(&[x], 0.01, scale as f64, |g, v| {
            let y = g.grad_reverse(v[0], scale).unwrap();
            let s = g.square(y);
            project(g, s, &proj)
        })
    })?;

    check_op("recon_loss", &mut res, |seed| {
        let mut r = rng(seed);
        let (n, c, h, w) = (r.random_range(1..=2), r.random_range(1..=3), 8, 8);
        let input = random_tensor(&[n, c, h, w], -1.0, 1.0, &mut r);
        let recon = random_tensor(&[n, c, h, w], -1.0, 1.0, &mut r);
        let bottleneck = away_from_zero(&[n, r.random_range(1..=4), 1, 1], &mut r);
        let alpha = r.random_range(0.01f32..1.0);
        gradcheck(&[input, recon, bottleneck], 0.1, |g, v| {
            let out = SsamOutput {
                reconstruction: Some(v[1]),
                encoder: [v[2]; 3],
                fpn: [v[2]; 3],
                domain_logit: None,
            };
            recon_loss(g, v[0], &out, alpha).unwrap()
        })
    })?;

    check_op("domain_loss", &mut res, |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..=4);
        let logits = random_tensor(&[n], -3.0, 3.0, &mut r);
        let domain = if r.random_bool(0.5) { Domain::Source } else { Domain::Target };
        let beta = r.random_range(0.5f32..3.0);
        let lambda = r.random_range(0.05f32..0.95);
        gradcheck(&[logits], 0.01, |g, v| domain_loss(g, v[0], domain, beta, lambda).unwrap())
    })?;

    check_op("sacm_loss", &mut res, |seed| {
        let mut r = rng(seed);
        let c = r.random_range(1..=4);
        let s_shape = [r.random_range(1..=2), c, r.random_range(1..=3), r.random_range(1..=3)];
        let t_shape = [r.random_range(1..=2), c, r.random_range(1..=3), r.random_range(1..=3)];
        let normalize = r.random_bool(0.5);
        let s = random_tensor(&s_shape, -1.0, 1.0, &mut r);
        let t = random_tensor(&t_shape, -1.0, 1.0, &mut r);
        gradcheck(&[s, t], 0.001, |g, v| sacm_loss(g, v[0], v[1], normalize).unwrap())
    })?;

    check_op("rpn_loss", &mut res, rpn_instance)?;
    check_op("roi_loss", &mut res, roi_instance)?;

    Ok(format!("worst norm-wise relative error per op: {}", res.join(", ")))
}

/// Random RPN head outputs on a 16×16 image. Deltas of positive anchors sit
/// at least 0.04 away from the smooth-L1 knee.
fn rpn_instance(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (h, w) = (16, 16);
    let anchors = AnchorSet::new(h, w);
    let n = r.random_range(1..=2);
    let cfg = DetectConfig {
        rpn_batch: [8, 16][r.random_range(0..2)],
        ..DetectConfig::default()
    };
    let gt: Vec<Vec<BBox>> = (0..n)
        .map(|_| {
            (0..r.random_range(0..=2))
                .map(|_| {
                    let bw = r.random_range(4.0f32..14.0);
                    let bh = r.random_range(4.0f32..14.0);
                    BBox::new(r.random_range(0.0..16.0 - bw), r.random_range(0.0..16.0 - bh), bw, bh)
                })
                .collect()
        })
        .collect();
    let logits: Vec<Tensor> = anchors
        .sizes
        .iter()
        .map(|&(lh, lw)| random_tensor(&[n, 3, lh, lw], -2.0, 2.0, &mut r))
        .collect();
    let mut deltas: Vec<Tensor> = anchors
        .sizes
        .iter()
        .map(|&(lh, lw)| random_tensor(&[n, 12, lh, lw], -1.0, 1.0, &mut r))
        .collect();
    for (b, boxes) in gt.iter().enumerate() {
        for (i, label) in rpn_labels(&anchors, boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou).into_iter().enumerate() {
            let AnchorLabel::Positive(j) = label else { continue };
            let (level, li) = anchors.locate(i);
            let (lh, lw) = anchors.sizes[level];
            let hw = lh * lw;
            let target = encode(&boxes[j], &anchors.levels[level][li], RPN_DELTA_WEIGHTS);
            for (k, t) in target.iter().enumerate() {
                let off = r.random_range(0.15f32..0.6) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
                let off = if r.random_bool(0.3) { off * 0.1 } else { off };
                deltas[level].data_mut()[(b * 12 + (li / hw) * 4 + k) * hw + li % hw] = t + off;
            }
        }
    }
    let inputs: Vec<Tensor> = logits.into_iter().chain(deltas).collect();
    gradcheck(&inputs, 0.01, |g, v| {
        let out = RpnOutput {
            logits: [v[0], v[1], v[2]],
            deltas: [v[3], v[4], v[5]],
        };
        rpn_loss(g, &out, &anchors, &gt, &cfg, &mut rng(seed)).unwrap()
    })
}

/// Random RoI head outputs with hand-made samples. Foreground deltas sit at
/// least 0.1 away from the smooth-L1 knee.
fn roi_instance(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let classes = r.random_range(1..=3);
    let k = classes + 1;
    let rois = r.random_range(1..=6);
    let mut samples = Vec::new();
    let mut deltas = random_tensor(&[rois, 4 * k], -1.0, 1.0, &mut r);
    for row in 0..rois {
        let label = r.random_range(0..=classes);
        let target = [(); 4].map(|_| r.random_range(-1.0f32..1.0));
        if label > 0 {
            for (c, t) in target.iter().enumerate() {
                let off = if r.random_bool(0.5) { r.random_range(0.1f32..0.9) } else { r.random_range(1.1f32..2.0) };
                let off = if r.random_bool(0.5) { off } else { -off };
                deltas.data_mut()[row * 4 * k + label * 4 + c] = t + off;
            }
        }
        samples.push(RoiSample {
            batch: 0,
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
            label,
            target,
        });
    }
    let logits = random_tensor(&[rois, k], -2.0, 2.0, &mut r);
    // Rows in a shuffled order, as the head groups RoIs by level.
    let mut rows: Vec<usize> = (0..rois).collect();
    for i in (1..rois).rev() {
        rows.swap(i, r.random_range(0..=i));
    }
    gradcheck(&[logits, deltas], 0.01, |g, v| {
        let out = RoiOutput {
            rows: rows.clone(),
            logits: v[0],
            deltas: v[1],
        };
        roi_loss(g, &out, &samples).unwrap()
    })
}

// ---- 2 ------------------------------------------------------------------

fn grl_contract() -> Result<String, String> {
    let mut compared = 0usize;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=4), r.random_range(2..=5), r.random_range(2..=5)];
        let x = random_tensor(&shape, -2.0, 2.0, &mut r);
        let wt = random_tensor(&[3, shape[1], 3, 3], -1.0, 1.0, &mut r);
        let grad_at = |scale: f32| -> (Tensor, Tensor) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(wt.clone());
            let y = g.grad_reverse(xv, scale).unwrap();
            let fwd = g.value(y).clone();
            let c = g.conv2d(y, wv, None, 1, 1).unwrap();
            let s = g.sigmoid(c);
            let q = g.square(s);
            let l = g.sum(q);
            g.backward(l).unwrap();
            (fwd, g.grad(xv).unwrap().clone())
        };
        let (fwd, reversed) = grad_at(-0.5);
        let (_, unit) = grad_at(1.0);
        let same_bits = fwd.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits && fwd.shape() == x.shape(), || format!("seed {seed}: forward is not a bitwise identity"))?;
        for (i, (a, u)) in reversed.data().iter().zip(unit.data()).enumerate() {
            ensure(*a == -0.5 * u, || format!("seed {seed} element {i}: {a} != -0.5 * {u}"))?;
            compared += 1;
        }
    }
    Ok(format!("forward bitwise identity; backward == -0.5 x unit gradient exactly on {compared} elements"))
}

// ---- 3 ------------------------------------------------------------------

fn domain_value(logits: &[f32], domain: Domain) -> f32 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([logits.len()], logits.to_vec()).unwrap());
    let l = domain_loss(&mut g, x, domain, 2.0, 0.25).unwrap();
    g.value(l).item()
}

fn domain_loss_values() -> Result<String, String> {
    let ln2 = std::f64::consts::LN_2;
    let s = domain_value(&[0.0], Domain::Source) as f64;
    let t = domain_value(&[0.0], Domain::Target) as f64;
    ensure((s - 0.375 * ln2).abs() <= 1e-6, || format!("source {s} vs {}", 0.375 * ln2))?;
    ensure((t - 0.125 * ln2).abs() <= 1e-6, || format!("target {t} vs {}", 0.125 * ln2))?;
    let mut r = rng(3);
    for _ in 0..1000 {
        let logits: Vec<f32> = (0..r.random_range(1..=4)).map(|_| r.random_range(-10.0..10.0)).collect();
        let (ls, lt) = (domain_value(&logits, Domain::Source), domain_value(&logits, Domain::Target));
        ensure(ls == 3.0 * lt, || format!("ratio at {logits:?}: {ls} / {lt}"))?;
    }
    Ok(format!(
        "source {s:.9} (|err| {:.1e}), target {t:.9} (|err| {:.1e}), ratio exactly 3 on 1000 random logit sets",
        (s - 0.375 * ln2).abs(),
        (t - 0.125 * ln2).abs()
    ))
}

// ---- 4 ------------------------------------------------------------------

fn sacm_value(s: &Tensor, t: &Tensor, normalize: bool) -> f32 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(s.clone()), g.constant(t.clone()));
    let l = sacm_loss(&mut g, a, b, normalize).unwrap();
    g.value(l).item()
}

/// Applies one spatial permutation per image to every channel.
fn permute_spatial(t: &Tensor, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let s = t.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = t.clone();
    for b in 0..n {
        let mut perm: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[base + dst] = t.data()[base + src];
            }
        }
    }
    out
}

fn sacm_identities() -> Result<String, String> {
    let mut worst_oracle: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..300u64 {
        let mut r = rng(seed);
        let c = r.random_range(1..=4);
        let sa = [r.random_range(1..=2), c, r.random_range(1..=3), r.random_range(1..=3)];
        let ta = [r.random_range(1..=2), c, r.random_range(1..=3), r.random_range(1..=3)];
        let normalize = seed % 2 == 1;
        let s = random_tensor(&sa, -2.0, 2.0, &mut r);
        let t = random_tensor(&ta, -2.0, 2.0, &mut r);
        ensure(sacm_value(&s, &s, normalize) == 0.0, || format!("seed {seed}: sacm(F, F) != 0"))?;

        let lib = sacm_value(&s, &t, normalize) as f64;
        let oracle = brute_sacm(&s, &t, normalize);
        let rel = (lib - oracle).abs() / oracle.abs().max(1e-12);
        ensure(rel <= 1e-5, || format!("seed {seed} {sa:?}/{ta:?}: {lib} vs oracle {oracle} (rel {rel:.2e})"))?;
        worst_oracle = worst_oracle.max(rel);

        let (ps, pt) = (permute_spatial(&s, &mut r), permute_spatial(&t, &mut r));
        let permuted = sacm_value(&ps, &pt, normalize) as f64;
        let rel = (permuted - lib).abs() / lib.abs().max(1e-12);
        ensure(rel <= 1e-5, || format!("seed {seed}: permuted {permuted} vs {lib}"))?;
        worst_perm = worst_perm.max(rel);
        let self_perm = sacm_value(&s, &ps, normalize) as f64;
        let scale = brute_gram(&s, normalize).iter().flatten().map(|v| v * v).sum::<f64>().max(1e-12);
        ensure(self_perm / scale <= 1e-10, || format!("seed {seed}: sacm(F, perm F) = {self_perm}"))?;

        // The library Gram itself against the loops.
        let gm = gram(&s, normalize).unwrap();
        for (i, row) in brute_gram(&s, normalize).iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let d = (gm.get(i, j) as f64 - v).abs();
                ensure(d <= 1e-5 * v.abs().max(1.0), || format!("seed {seed}: gram[{i}][{j}]"))?;
            }
        }
    }
    Ok(format!(
        "sacm(F,F)=0; 300 cases up to 2x4x3x3: worst relative error vs loops {worst_oracle:.1e}, under spatial permutation {worst_perm:.1e}"
    ))
}

// ---- 5 ------------------------------------------------------------------

/// Cube whose band `b` is filled with `b + 1`.
fn labelled_cube(bands: usize) -> HyperCube {
    let values = (0..bands).flat_map(|b| vec![(b + 1) as f32; 6]).collect();
    HyperCube::new(2, 3, bands, 10.0, values).unwrap()
}

fn band_labels(c: &HyperCube) -> Vec<usize> {
    (0..c.bands()).map(|b| c.band(b)[0] as usize).collect()
}

fn band_matching() -> Result<String, String> {
    let four = band_labels(&match_bands(&labelled_cube(4), 8));
    ensure(four == [1, 1, 1, 2, 3, 4, 4, 4], || format!("4->8 gave {four:?}"))?;
    ensure(band_mapping(5, 3) == [0, 2, 4], || format!("5->3 picked {:?}", band_mapping(5, 3)))?;
    let five = band_labels(&match_bands(&labelled_cube(5), 3));
    ensure(five == [1, 3, 5], || format!("5->3 gave bands {five:?}"))?;
    for n in 1..=12 {
        let c = labelled_cube(n);
        let same = match_bands(&c, n);
        ensure(same == c && same.to_bytes() == c.to_bytes(), || format!("{n}->{n} is not the identity"))?;
    }

    let mut runner = TestRunner::new(PropConfig {
        failure_persistence: None,
        ..PropConfig::with_cases(200)
    });
    runner
        .run(&(1usize..64, 1usize..64), |(bands, extra)| {
            let target = bands + extra;
            let out = band_labels(&match_bands(&labelled_cube(bands), target));
            if out.len() != target {
                return Err(TestCaseError::fail(format!("{bands}->{target}: {} bands", out.len())));
            }
            let original: Vec<usize> = (1..=bands).collect();
            let start = out.iter().position(|&b| b != 1).map_or(target - bands, |p| p - 1);
            let contiguous = out.get(start..start + bands) == Some(&original[..]);
            let edges = out[..start].iter().all(|&b| b == 1) && out[start + bands..].iter().all(|&b| b == bands);
            if contiguous && edges {
                Ok(())
            } else {
                Err(TestCaseError::fail(format!("{bands}->{target}: {out:?}")))
            }
        })
        .map_err(|e| e.to_string())?;
    Ok("4->8 = [b1,b1,b1,b2,b3,b4,b4,b4]; 5->3 = {0,2,4}; n->n identity; 200 expansion cases contiguous".into())
}

// ---- 6 ------------------------------------------------------------------

fn random_box(r: &mut rand_chacha::ChaCha8Rng) -> BBox {
    // Sides up to 120 px so every size bucket shows up.
    let w = r.random_range(4.0f32..120.0);
    let h = r.random_range(4.0f32..120.0);
    BBox::new(r.random_range(0.0..40.0), r.random_range(0.0..40.0), w, h)
}

fn jitter(b: &BBox, r: &mut rand_chacha::ChaCha8Rng) -> BBox {
    let f = r.random_range(0.0f32..0.3);
    BBox::new(
        b.x + b.w * r.random_range(-f..=f),
        b.y + b.h * r.random_range(-f..=f),
        b.w * (1.0 + r.random_range(-f..=f)),
        b.h * (1.0 + r.random_range(-f..=f)),
    )
}

fn eval_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut r = rng(seed);
    let images: Vec<u64> = (0..r.random_range(1..=2)).map(|i| 10 + i).collect();
    let n_gt = r.random_range(0..=5);
    let n_det = r.random_range(0..=5);
    let mut gt: Vec<GroundTruth> = images.iter().map(|&id| GroundTruth { image_id: id, objects: vec![] }).collect();
    let mut all_gt = Vec::new();
    for _ in 0..n_gt {
        let i = r.random_range(0..gt.len());
        let o = Object {
            bbox: random_box(&mut r),
            class: r.random_range(1..=2),
        };
        gt[i].objects.push(o);
        all_gt.push((gt[i].image_id, o));
    }
    let coarse = r.random_bool(0.3);
    let dets = (0..n_det)
        .map(|_| {
            let score = if coarse { r.random_range(1..=3) as f32 / 4.0 } else { r.random_range(0.0f32..1.0) };
            if !all_gt.is_empty() && r.random_bool(0.7) {
                let (id, o) = all_gt[r.random_range(0..all_gt.len())];
                let class = if r.random_bool(0.85) { o.class } else { 3 - o.class };
                Detection {
                    image_id: id,
                    bbox: jitter(&o.bbox, &mut r),
                    score,
                    category_id: class,
                }
            } else {
                Detection {
                    image_id: images[r.random_range(0..images.len())],
                    bbox: random_box(&mut r),
                    score,
                    category_id: r.random_range(1..=2),
                }
            }
        })
        .collect();
    (dets, gt)
}

fn evaluator_oracle() -> Result<String, String> {
    let b = |side: f32| size_bucket(&BBox::new(0.0, 0.0, side, side));
    ensure(b(31.0) == SizeBucket::Small, || "961 is not small".into())?;
    ensure(b(32.0) == SizeBucket::Medium, || "1024 is not medium".into())?;
    ensure(b(95.99) == SizeBucket::Medium, || "just under 9216 is not medium".into())?;
    ensure(b(96.0) == SizeBucket::Large, || "9216 is not large".into())?;

    let categories = vec![
        Category { id: 1, name: "a".into() },
        Category { id: 2, name: "b".into() },
    ];
    let mut compared = 0;
    for seed in 0..200u64 {
        let (dets, gt) = eval_instance(seed);
        let rep = evaluate(&dets, &gt, &categories, &EvalConfig::default()).map_err(|e| e.to_string())?;
        let got = |rep: &EvalReport| {
            [
                (rep.ap50, rep.ap, rep.ar),
                (None, rep.ap_small, rep.ar_small),
                (None, rep.ap_medium, rep.ar_medium),
                (None, rep.ap_large, rep.ar_large),
            ]
        };
        for (ri, (range, lib)) in RANGES.iter().zip(got(&rep)).enumerate() {
            let (o50, oap, oar) = oracle_metrics(&dets, &gt, &[1, 2], *range);
            let want = if ri == 0 { (o50, oap, oar) } else { (None, oap, oar) };
            ensure(lib == want, || format!("seed {seed} range {ri}: library {lib:?} vs oracle {want:?}"))?;
            compared += 1;
        }
        for c in &rep.per_class {
            let (o50, oap, oar) = oracle_metrics(&dets, &gt, &[c.category_id], None);
            ensure((c.ap50, c.ap, c.ar) == (o50, oap, oar), || format!("seed {seed} class {}", c.category_id))?;
        }
    }
    Ok(format!("bucket edges 961/1024/9216 correct; {compared} (instance, range) metric triples equal to the exhaustive matcher"))
}

// ---- 7 and 9 ------------------------------------------------------------

/// The weighted total recomputed from the recorded terms, left to right in
/// f32, which is how the trainer accumulates it.
fn recombine_f32(l: &LossBreakdown, e: f32, h: f32, t: f32) -> f32 {
    let terms = [
        e * l.l_s_r,
        h * l.l_s_d,
        t * l.l_sacm,
        l.l_s_rpn,
        l.l_roi,
        e * l.l_t_r,
        h * l.l_t_d,
        l.l_t_rpn,
    ];
    terms.iter().fold(0.0f32, |acc, v| acc + v)
}

/// The reference pair trained once per mode, shared by criteria 7 and 9.
struct Runs {
    cfg: TrainConfig,
    runs: Vec<(Ablation, TrainOutcome, EvalReport)>,
    secs: f64,
}

fn reference_runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let pair = generate_domain_pair(&SynthConfig::default()).unwrap();
        let gt: Vec<GroundTruth> = pair.target.iter().map(|s| GroundTruth::from_sample(s).unwrap()).collect();
        let start = Instant::now();
        let base = TrainConfig::default();
        let runs = [Ablation::Full, Ablation::NoSacm, Ablation::NoSsamSacm, Ablation::SourceOnly]
            .into_iter()
            .map(|mode| {
                let cfg = TrainConfig {
                    ablation: mode,
                    ..base.clone()
                };
                let outcome = train(&cfg, &pair.source, &pair.target, |_| {}).unwrap();
                let dets: Vec<Detection> = infer_samples(&outcome.model, &pair.target).unwrap().concat();
                let rep = evaluate(&dets, &gt, &pair.categories, &EvalConfig::default()).unwrap();
                (mode, outcome, rep)
            })
            .collect();
        Runs {
            cfg: base,
            runs,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn loss_aggregation() -> Result<String, String> {
    let r = reference_runs();
    let (e, h, t) = (r.cfg.epsilon, r.cfg.eta, r.cfg.tau);
    let mut steps = 0;
    let mut worst_abs: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for (mode, outcome, _) in &r.runs {
        for l in &outcome.losses {
            let sum = recombine_f32(l, e, h, t);
            let d = (l.total as f64 - sum as f64).abs();
            ensure(d <= 1e-5, || format!("{mode} step {}: total {} vs recombined {sum}", l.step, l.total))?;
            worst_abs = worst_abs.max(d);
            let exact = l.recombine(e, h, t);
            worst_rel = worst_rel.max((l.total as f64 - exact).abs() / exact.abs().max(1.0));
            steps += 1;
        }
    }
    Ok(format!(
        "{steps} steps over 4 modes: max |total - weighted sum| = {worst_abs:.1e}; vs the f64 sum {worst_rel:.1e} relative"
    ))
}

fn ablation_trend() -> Result<String, String> {
    let r = reference_runs();
    let ap = |m: Ablation| r.runs.iter().find(|(x, _, _)| *x == m).unwrap().2.ap50.unwrap_or(0.0);
    let (full, no_sacm, no_ssam, src_only) = (ap(Ablation::Full), ap(Ablation::NoSacm), ap(Ablation::NoSsamSacm), ap(Ablation::SourceOnly));
    let losses = &r.runs[0].1.losses;
    let drop = |f: fn(&LossBreakdown) -> f32| 1.0 - f(&losses[199]) as f64 / f(&losses[0]) as f64;
    let (drop_s, drop_t) = (drop(|l| l.l_s_r), drop(|l| l.l_t_r));
    let summary = format!(
        "AP@0.5 full {:.1}%, no_sacm {:.1}%, no_ssam_sacm {:.1}%, source_only {:.1}%; l_s_r -{:.0}%, l_t_r -{:.0}% by step 200; 4 runs in {:.0}s",
        100.0 * full,
        100.0 * no_sacm,
        100.0 * no_ssam,
        100.0 * src_only,
        100.0 * drop_s,
        100.0 * drop_t,
        r.secs
    );
    let checks = [
        (full > no_sacm, "full > no_sacm"),
        (no_sacm > no_ssam, "no_sacm > no_ssam_sacm"),
        (full - src_only >= 0.05, "full beats source_only by 5 points"),
        (drop_s >= 0.5, "l_s_r halves within 200 steps"),
        (drop_t >= 0.5, "l_t_r halves within 200 steps"),
        (r.secs <= 900.0, "runtime within 15 min"),
    ];
    let violated: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, n)| *n).collect();
    ensure(violated.is_empty(), || format!("{summary}; violated: {}", violated.join(", ")))?;
    Ok(summary)
}

// ---- 8 ------------------------------------------------------------------

fn label_firewall() -> Result<String, String> {
    let mut pair = generate_domain_pair(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let target_reads = Arc::new(AtomicUsize::new(0));
    let source_reads = Arc::new(AtomicUsize::new(0));
    for s in &mut pair.target {
        // Lift the held-out guard so only the tripwire can notice a read.
        s.set_held_out(false);
        s.set_tripwire(target_reads.clone());
    }
    for s in &mut pair.source {
        s.set_tripwire(source_reads.clone());
    }
    let cfg = TrainConfig {
        iterations: 100,
        ..TrainConfig::default()
    };
    let outcome = train(&cfg, &pair.source, &pair.target, |_| {}).map_err(|e| e.to_string())?;
    let (t, s) = (target_reads.load(Ordering::SeqCst), source_reads.load(Ordering::SeqCst));
    ensure(outcome.losses.len() == 100, || "training stopped early".into())?;
    ensure(t == 0, || format!("target labels read {t} times during training"))?;
    ensure(s > 0, || "tripwire never fired on source labels; it may not be wired".into())?;
    Ok(format!("100 full-mode steps: 0 target label reads (source reads: {s})"))
}

// ---- 10 -----------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let pair = generate_domain_pair(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 60,
        ..TrainConfig::default()
    };
    let run = |threads: usize| -> (String, String) {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = train(&cfg, &pair.source, &pair.target, |_| {}).unwrap();
            let dets = infer_samples(&out.model, &pair.target).unwrap().concat();
            (losses_to_csv(&out.losses), detections_to_json(&dets))
        })
    };
    let (csv_a, json_a) = run(1);
    let (csv_b, json_b) = run(4);
    ensure(csv_a == csv_b, || "loss CSVs differ".into())?;
    ensure(json_a == json_b, || "detection JSON differs".into())?;
    ensure(json_a.len() > 2, || "no detections to compare".into())?;
    Ok(format!(
        "two 60-step runs (1 and 4 worker threads): identical loss CSV ({} bytes) and detection JSON ({} bytes)",
        csv_a.len(),
        json_a.len()
    ))
}

//! Reference implementations used as test oracles. They are written for
//! clarity and brute force, independently of the library code paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfa_core::autodiff::{Graph, Tensor, Var};
use sfa_core::boxes::BBox;
use sfa_core::detect::Detection;
use sfa_core::eval::GroundTruth;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values whose magnitudes are bounded away from zero, so `abs` and `relu`
/// kinks are out of reach of a finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f32 = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values on a coarse grid (spacing 0.1), so no pooling window
/// has a near-tie for its maximum.
pub fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.into_iter().map(|i| i as f32 * 0.1 - n as f32 * 0.05).collect()).unwrap()
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂), worst over inputs.
    pub rel_err: f64,
}

/// Central-difference gradient check of a scalar function of `inputs`.
///
/// `build` receives one graph leaf per input and returns a scalar node.
/// The error for each input is measured norm-wise over all its elements; an
/// input whose two gradients are both below `1e-7` in norm counts as exact.
pub fn gradcheck(inputs: &[Tensor], step: f32, build: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheck {
    gradcheck_with_factor(inputs, step, 1.0, build)
}

/// As [`gradcheck`], but the analytic gradient is expected to equal
/// `factor` times the finite-difference one.
pub fn gradcheck_with_factor(inputs: &[Tensor], step: f32, factor: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    assert_eq!(g.value(out).numel(), 1, "gradcheck needs a scalar output");
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item() as f64
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + step;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = x - step;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = x;
            // Divide by the step actually taken after f32 rounding.
            let h = ((x + step) as f64) - ((x - step) as f64);
            numeric.push(factor * (plus - minus) / h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic[i].iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic[i]).max(norm(&numeric));
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max(norm(&diff) / scale);
    }
    GradCheck { rel_err: worst }
}

/// Batch-averaged channel Gram of an NCHW tensor by explicit loops in f64.
pub fn brute_gram(t: &Tensor, normalize: bool) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let at = |b: usize, ch: usize, y: usize, x: usize| t.data()[((b * c + ch) * h + y) * w + x] as f64;
    let mut gm = vec![vec![0.0; c]; c];
    for (i, row) in gm.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        acc += at(b, i, y, x) * at(b, j, y, x);
                    }
                }
            }
            let mut v = acc / n as f64;
            if normalize {
                v /= (h * w) as f64;
            }
            *cell = v;
        }
    }
    gm
}

/// Squared Frobenius distance between brute-force Grams of two features.
pub fn brute_sacm(source: &Tensor, target: &Tensor, normalize: bool) -> f64 {
    let gs = brute_gram(source, normalize);
    let gt = brute_gram(target, normalize);
    let mut acc = 0.0;
    for i in 0..gs.len() {
        for j in 0..gs.len() {
            let d = gt[i][j] - gs[i][j];
            acc += d * d;
        }
    }
    acc
}

// ---- evaluation oracle ---------------------------------------------------

pub const SMALL: f64 = 1024.0;
pub const MEDIUM: f64 = 9216.0;

/// Area filter: `None` keeps everything, otherwise `[lo, hi)`.
pub type Range = Option<(f64, f64)>;

pub const RANGES: [Range; 4] = [None, Some((0.0, SMALL)), Some((SMALL, MEDIUM)), Some((MEDIUM, f64::INFINITY))];

fn in_range(b: &BBox, r: Range) -> bool {
    match r {
        None => true,
        Some((lo, hi)) => {
            let a = b.area() as f64;
            a >= lo && a < hi
        }
    }
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) as f64 - a.x.max(b.x) as f64).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) as f64 - a.y.max(b.y) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per detection of one image, in rank order: (matched, ignored).
///
/// Every injective assignment of detections to gt with IoU at or above the
/// threshold is enumerated. The chosen one is lexicographically best over
/// detections in rank order, where a detection prefers a non-ignored gt
/// over an ignored one, then higher IoU, then the later gt.
fn exhaustive_match(dets: &[BBox], gts: &[BBox], range: Range, thr: f64) -> Vec<(bool, bool)> {
    let thr = thr.min(1.0 - 1e-10);
    let ignored: Vec<bool> = gts.iter().map(|g| !in_range(g, range)).collect();
    // key per (det, choice): choice == gts.len() means unmatched.
    let key = |d: usize, choice: usize| -> (u8, f64, usize) {
        if choice == gts.len() {
            (0, 0.0, 0)
        } else {
            (if ignored[choice] { 1 } else { 2 }, box_iou(&dets[d], &gts[choice]), choice)
        }
    };
    let mut best: Option<(Vec<(u8, f64, usize)>, Vec<usize>)> = None;
    let mut current = vec![0usize; dets.len()];
    fn rec(
        d: usize,
        dets: &[BBox],
        gts: &[BBox],
        thr: f64,
        current: &mut Vec<usize>,
        key: &dyn Fn(usize, usize) -> (u8, f64, usize),
        best: &mut Option<(Vec<(u8, f64, usize)>, Vec<usize>)>,
    ) {
        if d == dets.len() {
            let keys: Vec<_> = (0..dets.len()).map(|i| key(i, current[i])).collect();
            let better = match best {
                None => true,
                Some((bk, _)) => keys.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((keys, current.clone()));
            }
            return;
        }
        for choice in 0..=gts.len() {
            if choice < gts.len() && (current[..d].contains(&choice) || box_iou(&dets[d], &gts[choice]) < thr) {
                continue;
            }
            current[d] = choice;
            rec(d + 1, dets, gts, thr, current, key, best);
        }
    }
    rec(0, dets, gts, thr, &mut current, &key, &mut best);
    let (_, assignment) = best.expect("the all-unmatched assignment always exists");
    assignment
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            if c == gts.len() {
                (false, !in_range(&dets[d], range))
            } else {
                (true, ignored[c])
            }
        })
        .collect()
}

/// (interpolated precision at each of 101 recall points, final recall), or
/// `None` without non-ignored gt.
fn precision_recall(dets: &[Detection], gt: &[GroundTruth], class: usize, range: Range, thr: f64) -> Option<(Vec<f64>, f64)> {
    let mut num_gt = 0;
    // (score, image position, rank within image, matched, ignored)
    let mut pooled: Vec<(f32, usize, usize, bool, bool)> = Vec::new();
    for (pos, img) in gt.iter().enumerate() {
        let gts: Vec<BBox> = img.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect();
        num_gt += gts.iter().filter(|g| in_range(g, range)).count();
        let mut mine: Vec<(usize, &Detection)> = dets
            .iter()
            .filter(|d| d.image_id == img.image_id && d.category_id == class)
            .enumerate()
            .collect();
        mine.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let boxes: Vec<BBox> = mine.iter().map(|(_, d)| d.bbox).collect();
        for (rank, ((_, d), (m, ig))) in mine.iter().zip(exhaustive_match(&boxes, &gts, range, thr)).enumerate() {
            pooled.push((d.score, pos, rank, m, ig));
        }
    }
    if num_gt == 0 {
        return None;
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, _, m, ig) in &pooled {
        if ig {
            continue;
        }
        if m {
            tp += 1
        } else {
            fp += 1
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let q = (0..101)
        .map(|i| {
            let r = i as f64 / 100.0;
            curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .collect();
    let final_recall = curve.last().map_or(0.0, |c| c.0);
    Some((q, final_recall))
}

/// Oracle metrics for one area range: (AP@0.5, AP@[.5:.95], AR).
pub fn oracle_metrics(dets: &[Detection], gt: &[GroundTruth], classes: &[usize], range: Range) -> (Option<f64>, Option<f64>, Option<f64>) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut all = Vec::new();
    let mut at50 = Vec::new();
    let mut recalls = Vec::new();
    for &c in classes {
        for (ti, &t) in thresholds.iter().enumerate() {
            if let Some((q, r)) = precision_recall(dets, gt, c, range, t) {
                if ti == 0 {
                    at50.extend_from_slice(&q);
                }
                all.extend(q);
                recalls.push(r);
            }
        }
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (avg(&at50), avg(&all), avg(&recalls))
}

use std::sync::mpsc::sync_channel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{prepare_source, prepare_target, BatchSampler, TrainBatch};
use super::infer::Model;
use super::{LossBreakdown, TrainConfig};
use crate::autodiff::{Adam, AdamConfig, Graph, ParamSet, Var};
use crate::detect::{init_detect, propose, roi_forward, roi_loss, rpn_forward, rpn_loss, sample_rois, AnchorSet};
use crate::error::{Result, SfaError};
use crate::hsi::AnnotatedSample;
use crate::sacm::sacm_loss;
use crate::ssam::{domain_loss, init_ssam, recon_loss, ssam_forward, Domain, ForwardOptions, SsamConfig};

/// Parameters, optimizer state and the sampling stream of one run.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters for `bands` input bands, seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, bands: usize) -> Self {
        let ssam = SsamConfig::new(bands);
        let mut params = ParamSet::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_ssam(&mut params, &ssam, &mut init_rng);
        init_detect(&mut params, ssam.fpn_width, &cfg.detect, &mut init_rng);
        TrainState {
            model: Model {
                params,
                ssam,
                detect: cfg.detect.clone(),
            },
            adam: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
        }
    }
}

/// Order in which weighted terms enter the total.
pub const TERM_ORDER: [&str; 8] = ["l_s_r", "l_s_d", "l_sacm", "l_s_rpn", "l_roi", "l_t_r", "l_t_d", "l_t_rpn"];

fn checked(g: &Graph, v: Var, name: &str) -> Result<f32> {
    let x = g.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SfaError::NonFinite(format!("loss term {name} at this step ({x})")))
    }
}

/// One joint forward/backward over both flows and one Adam update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &TrainBatch) -> Result<LossBreakdown> {
    let ab = cfg.ablation;
    let model = &state.model;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let opts = ForwardOptions {
        decoder: ab.uses_reconstruction(),
        classifier: ab.uses_domain_classifier().then_some(cfg.grl_scale),
    };
    let mut record = LossBreakdown {
        step: state.step,
        ..LossBreakdown::default()
    };
    // (name, node, weight) for every active term.
    let mut terms: Vec<(&'static str, Var, f32)> = Vec::new();

    // Source flow: every supervised term sees source cubes only.
    let xs = g.constant(batch.source.clone());
    let [n, _, h, w] = batch.source.dims4()?;
    let out_s = ssam_forward(&mut g, &p, xs, &model.ssam, opts)?;
    if opts.decoder {
        terms.push(("l_s_r", recon_loss(&mut g, xs, &out_s, cfg.alpha)?, cfg.epsilon));
    }
    if let Some(d) = out_s.domain_logit {
        terms.push(("l_s_d", domain_loss(&mut g, d, Domain::Source, cfg.beta, cfg.lambda)?, cfg.eta));
    }
    let anchors = AnchorSet::new(h, w);
    let rpn_s = rpn_forward(&mut g, &p, &out_s.fpn)?;
    let gt_boxes: Vec<Vec<_>> = batch.source_gt.iter().map(|o| o.iter().map(|x| x.0).collect()).collect();
    terms.push(("l_s_rpn", rpn_loss(&mut g, &rpn_s, &anchors, &gt_boxes, &model.detect, &mut state.rng)?, 1.0));
    let proposals = propose(&g, &rpn_s, &anchors, n, (h, w), &model.detect, model.detect.rpn_post_nms_train);
    let rois = sample_rois(&proposals, &batch.source_gt, &model.detect, &mut state.rng);
    if !rois.is_empty() {
        let boxes: Vec<_> = rois.iter().map(|r| (r.batch, r.bbox)).collect();
        let out = roi_forward(&mut g, &p, &out_s.fpn, &boxes, &model.detect)?;
        terms.push(("l_roi", roi_loss(&mut g, &out, &rois)?, 1.0));
    }

    // Target flow: no labels, only reconstruction, domain and background RPN.
    if let (Some(target), true) = (&batch.target, ab.uses_target()) {
        let xt = g.constant(target.clone());
        let [nt, _, ht, wt] = target.dims4()?;
        let out_t = ssam_forward(&mut g, &p, xt, &model.ssam, opts)?;
        if opts.decoder {
            terms.push(("l_t_r", recon_loss(&mut g, xt, &out_t, cfg.alpha)?, cfg.epsilon));
        }
        if let Some(d) = out_t.domain_logit {
            terms.push(("l_t_d", domain_loss(&mut g, d, Domain::Target, cfg.beta, cfg.lambda)?, cfg.eta));
        }
        if ab.uses_sacm() {
            // The encoder is shared, so the target bottleneck is F_T.
            let l = sacm_loss(&mut g, out_s.bottleneck(), out_t.bottleneck(), cfg.sacm_normalize)?;
            terms.push(("l_sacm", l, cfg.tau));
        }
        if cfg.target_rpn {
            let rpn_t = rpn_forward(&mut g, &p, &out_t.fpn)?;
            let anchors_t = AnchorSet::new(ht, wt);
            let empty = vec![Vec::new(); nt];
            terms.push(("l_t_rpn", rpn_loss(&mut g, &rpn_t, &anchors_t, &empty, &model.detect, &mut state.rng)?, 1.0));
        }
    }

    // Summed in the documented term order so the f32 total is reproducible
    // from the recorded terms.
    terms.sort_by_key(|(name, _, _)| TERM_ORDER.iter().position(|t| t == name));
    let mut total: Option<Var> = None;
    for &(name, v, weight) in &terms {
        let value = checked(&g, v, name)?;
        match name {
            "l_s_r" => record.l_s_r = value,
            "l_s_d" => record.l_s_d = value,
            "l_sacm" => record.l_sacm = value,
            "l_s_rpn" => record.l_s_rpn = value,
            "l_roi" => record.l_roi = value,
            "l_t_r" => record.l_t_r = value,
            "l_t_d" => record.l_t_d = value,
            "l_t_rpn" => record.l_t_rpn = value,
            _ => unreachable!("unknown term {name}"),
        }
        let weighted = if weight == 1.0 { v } else { g.scale(v, weight) };
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("the source RPN term is always present");
    record.total = checked(&g, total, "total")?;
    g.backward(total)?;
    state.adam.step(&mut state.model.params, &g, &p)?;
    state.step += 1;
    Ok(record)
}

pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossBreakdown>,
}

/// Band count the model trains at: `cfg.bands`, else the target's, else the
/// source's. The target's count applies even when its cubes are not used,
/// so every mode is evaluated on the same target cubes.
fn resolve_bands(cfg: &TrainConfig, source: &[AnnotatedSample], target: &[AnnotatedSample]) -> Result<usize> {
    if cfg.bands > 0 {
        return Ok(cfg.bands);
    }
    target
        .first()
        .or(source.first())
        .map(|s| s.cube().bands())
        .ok_or_else(|| SfaError::InvalidConfig("source dataset is empty".into()))
}

/// Runs `cfg.iterations` steps. Batches are prepared on a producer thread
/// one bounded queue ahead; `on_step` sees every step's record.
pub fn train(
    cfg: &TrainConfig,
    source: &[AnnotatedSample],
    target: &[AnnotatedSample],
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.ablation.uses_target() && target.is_empty() {
        return Err(SfaError::InvalidConfig("target dataset is empty".into()));
    }
    let bands = resolve_bands(cfg, source, target)?;
    let src = prepare_source(source, bands)?;
    let tgt = if cfg.ablation.uses_target() {
        prepare_target(target, bands)?
    } else {
        Vec::new()
    };
    let mut sampler = BatchSampler::new(src, tgt, cfg.batch_size, cfg.crop, cfg.seed.wrapping_add(1))?;
    let mut state = TrainState::new(cfg, bands);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let iterations = cfg.iterations;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<TrainBatch>>(cfg.queue_depth.max(1));
        scope.spawn(move || {
            for _ in 0..iterations {
                let batch = sampler.next_batch();
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        for _ in 0..iterations {
            let batch = rx
                .recv()
                .map_err(|_| SfaError::InvalidConfig("batch producer stopped early".into()))??;
            let record = train_step(&mut state, cfg, &batch)?;
            on_step(&record);
            losses.push(record);
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: state.model,
        losses,
    })
}

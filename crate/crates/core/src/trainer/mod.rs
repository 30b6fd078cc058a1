//! Two-flow training loop, loss bookkeeping, ablations and inference.

mod data;
mod infer;
mod step;

use std::fmt;
use std::str::FromStr;

use crate::detect::DetectConfig;
use crate::error::{Result, SfaError};
use crate::kv::kv_fields;

pub use data::{crop_sample, prepare_source, prepare_target, BatchSampler, PreparedImage, TrainBatch};
pub use infer::{infer, infer_samples, Model};
pub use step::{train, train_step, TrainOutcome, TrainState, TERM_ORDER};

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// No spectral autocorrelation term.
    NoSacm,
    /// No reconstruction, sparsity, domain classifier or SACM: a plain
    /// conv stack with FPN and detection heads.
    NoSsamSacm,
    /// No target data at all: reconstruction and detection on the source.
    SourceOnly,
}

impl Ablation {
    pub const TABLE: [Ablation; 3] = [Ablation::NoSsamSacm, Ablation::NoSacm, Ablation::Full];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "SFA",
            Ablation::NoSacm => "SFA w/o SACM",
            Ablation::NoSsamSacm => "SFA w/o SSAM+SACM",
            Ablation::SourceOnly => "Source only",
        }
    }

    pub fn uses_reconstruction(self) -> bool {
        !matches!(self, Ablation::NoSsamSacm)
    }

    pub fn uses_domain_classifier(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSacm)
    }

    pub fn uses_sacm(self) -> bool {
        self == Ablation::Full
    }

    pub fn uses_target(self) -> bool {
        self != Ablation::SourceOnly
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoSacm => "no_sacm",
            Ablation::NoSsamSacm => "no_ssam_sacm",
            Ablation::SourceOnly => "source_only",
        })
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_sacm" => Ok(Ablation::NoSacm),
            "no_ssam_sacm" => Ok(Ablation::NoSsamSacm),
            "source_only" => Ok(Ablation::SourceOnly),
            _ => Err(format!("unknown ablation {s:?} (expected full, no_sacm, no_ssam_sacm or source_only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Images per domain per step.
    pub batch_size: usize,
    pub lr: f32,
    pub epsilon: f32,
    pub eta: f32,
    pub tau: f32,
    pub beta: f32,
    pub lambda: f32,
    pub grl_scale: f32,
    /// Weight of the L1 penalty on the bottleneck.
    pub alpha: f32,
    pub ablation: Ablation,
    pub sacm_normalize: bool,
    /// Supervise target objectness with every anchor negative.
    pub target_rpn: bool,
    /// Square crop side; 0 uses whole images.
    pub crop: usize,
    /// Band count after matching; 0 takes the target's.
    pub bands: usize,
    /// Batches prepared ahead of the training step.
    pub queue_depth: usize,
    pub detect: DetectConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            iterations: 500,
            batch_size: 2,
            lr: 3e-4,
            epsilon: 0.5,
            eta: 0.5,
            tau: 0.2,
            beta: 2.0,
            lambda: 0.25,
            grl_scale: -0.5,
            alpha: 0.01,
            ablation: Ablation::Full,
            sacm_normalize: false,
            target_rpn: true,
            crop: 64,
            bands: 0,
            queue_depth: 2,
            detect: DetectConfig::default(),
        }
    }
}

kv_fields!(TrainConfig {
    seed,
    iterations,
    batch_size,
    lr,
    epsilon,
    eta,
    tau,
    beta,
    lambda,
    grl_scale,
    alpha,
    ablation,
    sacm_normalize,
    target_rpn,
    crop,
    bands,
    queue_depth,
}; detect);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfaError::InvalidConfig(m));
        for (name, w) in [("epsilon", self.epsilon), ("eta", self.eta), ("tau", self.tau), ("alpha", self.alpha)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lr >= 0.0) || !self.grl_scale.is_finite() {
            return bad("lr must be non-negative and grl_scale finite".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop % crate::ssam::ENCODER_STRIDE != 0 {
            return bad(format!("crop {} is not a multiple of {}", self.crop, crate::ssam::ENCODER_STRIDE));
        }
        if self.detect.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        Ok(())
    }
}

/// Every loss term of one step, unweighted, plus the weighted total that
/// was back-propagated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_s_r: f32,
    pub l_s_d: f32,
    pub l_sacm: f32,
    pub l_s_rpn: f32,
    pub l_roi: f32,
    pub l_t_r: f32,
    pub l_t_d: f32,
    pub l_t_rpn: f32,
    pub total: f32,
}

pub const LOSS_CSV_HEADER: &str = "step,l_s_r,l_s_d,l_sacm,l_s_rpn,l_roi,l_t_r,l_t_d,l_t_rpn,total";

impl LossBreakdown {
    /// The weighted sum of the recorded terms, in f64.
    pub fn recombine(&self, epsilon: f32, eta: f32, tau: f32) -> f64 {
        let (e, h, t) = (epsilon as f64, eta as f64, tau as f64);
        e * self.l_s_r as f64
            + h * self.l_s_d as f64
            + t * self.l_sacm as f64
            + self.l_s_rpn as f64
            + self.l_roi as f64
            + e * self.l_t_r as f64
            + h * self.l_t_d as f64
            + self.l_t_rpn as f64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.l_s_r, self.l_s_d, self.l_sacm, self.l_s_rpn, self.l_roi, self.l_t_r, self.l_t_d, self.l_t_rpn, self.total
        )
    }

    pub fn terms(&self) -> [(&'static str, f32); 9] {
        [
            ("l_s_r", self.l_s_r),
            ("l_s_d", self.l_s_d),
            ("l_sacm", self.l_sacm),
            ("l_s_rpn", self.l_s_rpn),
            ("l_roi", self.l_roi),
            ("l_t_r", self.l_t_r),
            ("l_t_d", self.l_t_d),
            ("l_t_rpn", self.l_t_rpn),
            ("total", self.total),
        ]
    }
}

pub fn losses_to_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for l in losses {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

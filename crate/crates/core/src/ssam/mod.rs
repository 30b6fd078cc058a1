//! Spectral-spatial alignment: a three-stage convolutional autoencoder whose
//! sparse bottleneck feeds a three-level FPN, plus a gradient-reversed domain
//! classifier on the coarsest FPN level.
//!
//! Encoder stage `n` halves the spatial size, so the bottleneck (`en[2]`) is
//! at 1/8 resolution. The decoder mirrors the encoder with nearest-neighbour
//! upsampling. FPN level `i` has the resolution of encoder stage `i`.

mod checkpoint;

use rand::Rng;

use crate::autodiff::{BoundParams, Graph, ParamSet, Var};
use crate::error::{Result, SfaError};
use crate::nn::{self, RELU_GAIN};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Total downsampling of the encoder.
pub const ENCODER_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsamConfig {
    /// Input band count after matching.
    pub bands: usize,
    pub widths: [usize; 3],
    pub fpn_width: usize,
    pub classifier_width: usize,
}

impl SsamConfig {
    pub fn new(bands: usize) -> Self {
        SsamConfig {
            bands,
            widths: [16, 32, 64],
            fpn_width: 32,
            classifier_width: 16,
        }
    }

    /// Recovers the layer sizes from stored parameters.
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let shape = |name: &str| {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| SfaError::Checkpoint(format!("missing parameter {name}")))
        };
        let e1 = shape("enc1.w")?;
        let e2 = shape("enc2.w")?;
        let e3 = shape("enc3.w")?;
        let lat = shape("fpn.lat1.w")?;
        let dc = shape("dc.conv1.w")?;
        Ok(SsamConfig {
            bands: e1[1],
            widths: [e1[0], e2[0], e3[0]],
            fpn_width: lat[0],
            classifier_width: dc[0],
        })
    }
}

/// Adds every SSAM parameter to `params`.
pub fn init_ssam(params: &mut ParamSet, cfg: &SsamConfig, rng: &mut impl Rng) {
    let [c1, c2, c3] = cfg.widths;
    let f = cfg.fpn_width;
    nn::init_conv(params, "enc1", c1, cfg.bands, 3, RELU_GAIN, rng);
    nn::init_conv(params, "enc2", c2, c1, 3, RELU_GAIN, rng);
    nn::init_conv(params, "enc3", c3, c2, 3, RELU_GAIN, rng);
    nn::init_conv(params, "dec3", c2, c3, 3, RELU_GAIN, rng);
    nn::init_conv(params, "dec2", c1, c2, 3, RELU_GAIN, rng);
    nn::init_conv(params, "dec1", cfg.bands, c1, 3, 1.0, rng);
    for (i, c) in cfg.widths.iter().enumerate() {
        nn::init_conv(params, &format!("fpn.lat{}", i + 1), f, *c, 1, 1.0, rng);
        nn::init_conv(params, &format!("fpn.out{}", i + 1), f, f, 3, 1.0, rng);
    }
    let h = cfg.classifier_width;
    nn::init_conv(params, "dc.conv1", h, f, 1, RELU_GAIN, rng);
    nn::init_conv(params, "dc.conv2", h, h, 1, RELU_GAIN, rng);
    nn::init_conv(params, "dc.conv3", 1, h, 1, 1.0, rng);
}

/// Which optional branches a forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub decoder: bool,
    /// GRL scale for the domain classifier; `None` skips the classifier.
    pub classifier: Option<f32>,
}

impl ForwardOptions {
    /// Encoder and FPN only, as used at inference.
    pub const INFERENCE: ForwardOptions = ForwardOptions {
        decoder: false,
        classifier: None,
    };
}

#[derive(Clone, Debug)]
pub struct SsamOutput {
    /// `ae(x)`, same shape as the input.
    pub reconstruction: Option<Var>,
    /// Encoder stages; `encoder[2]` is the bottleneck `en_3(x)`.
    pub encoder: [Var; 3],
    /// FPN levels, finest first; `fpn[2]` feeds the domain classifier.
    pub fpn: [Var; 3],
    /// One domain logit per image, shape `[N]`.
    pub domain_logit: Option<Var>,
}

impl SsamOutput {
    pub fn bottleneck(&self) -> Var {
        self.encoder[2]
    }
}

pub fn check_spatial(height: usize, width: usize) -> Result<()> {
    if height % ENCODER_STRIDE != 0 || width % ENCODER_STRIDE != 0 || height == 0 || width == 0 {
        return Err(SfaError::Indivisible {
            height,
            width,
            stride: ENCODER_STRIDE,
        });
    }
    Ok(())
}

/// Runs the SSAM on an N×L×H×W batch.
pub fn ssam_forward(
    g: &mut Graph,
    p: &BoundParams,
    input: Var,
    cfg: &SsamConfig,
    opts: ForwardOptions,
) -> Result<SsamOutput> {
    let [_, l, h, w] = g.value(input).dims4()?;
    if l != cfg.bands {
        return Err(SfaError::BandMismatch {
            expected: cfg.bands,
            found: l,
        });
    }
    check_spatial(h, w)?;

    let mut x = input;
    let mut encoder = [input; 3];
    for (i, slot) in encoder.iter_mut().enumerate() {
        let c = nn::conv(g, p, &format!("enc{}", i + 1), x, 2, 1)?;
        x = g.relu(c);
        *slot = x;
    }

    let reconstruction = if opts.decoder {
        let mut d = encoder[2];
        for name in ["dec3", "dec2", "dec1"] {
            let up = g.upsample_nearest2d(d, 2)?;
            let c = nn::conv(g, p, name, up, 1, 1)?;
            d = if name == "dec1" { c } else { g.relu(c) };
        }
        Some(d)
    } else {
        None
    };

    let fpn = fpn_forward(g, p, &encoder)?;
    let domain_logit = match opts.classifier {
        Some(scale) => Some(classify_domain(g, p, fpn[2], scale)?),
        None => None,
    };
    Ok(SsamOutput {
        reconstruction,
        encoder,
        fpn,
        domain_logit,
    })
}

/// Lateral 1×1 convs, top-down nearest upsampling with addition, then a
/// 3×3 output conv per level.
fn fpn_forward(g: &mut Graph, p: &BoundParams, encoder: &[Var; 3]) -> Result<[Var; 3]> {
    let lat3 = nn::conv(g, p, "fpn.lat3", encoder[2], 1, 0)?;
    let lat2 = nn::conv(g, p, "fpn.lat2", encoder[1], 1, 0)?;
    let lat1 = nn::conv(g, p, "fpn.lat1", encoder[0], 1, 0)?;
    let up3 = g.upsample_nearest2d(lat3, 2)?;
    let td2 = g.add(lat2, up3)?;
    let up2 = g.upsample_nearest2d(td2, 2)?;
    let td1 = g.add(lat1, up2)?;
    Ok([
        nn::conv(g, p, "fpn.out1", td1, 1, 1)?,
        nn::conv(g, p, "fpn.out2", td2, 1, 1)?,
        nn::conv(g, p, "fpn.out3", lat3, 1, 1)?,
    ])
}

/// Gradient reversal, three 1×1 convs with ReLU between, then a global
/// average pool to one logit per image (shape `[N]`).
pub fn classify_domain(g: &mut Graph, p: &BoundParams, fpn_level3: Var, grl_scale: f32) -> Result<Var> {
    let n = g.value(fpn_level3).dims4()?[0];
    let r = g.grad_reverse(fpn_level3, grl_scale)?;
    let c1 = nn::conv(g, p, "dc.conv1", r, 1, 0)?;
    let a1 = g.relu(c1);
    let c2 = nn::conv(g, p, "dc.conv2", a1, 1, 0)?;
    let a2 = g.relu(c2);
    let c3 = nn::conv(g, p, "dc.conv3", a2, 1, 0)?;
    let pooled = g.global_avg_pool(c3)?;
    Ok(g.reshape(pooled, &[n])?)
}

/// `‖ae(x) − x‖_F² + α‖en_3(x)‖_1`, computed per image and averaged over
/// the batch.
pub fn recon_loss(g: &mut Graph, input: Var, out: &SsamOutput, alpha: f32) -> Result<Var> {
    let recon = out
        .reconstruction
        .ok_or_else(|| SfaError::InvalidConfig("recon_loss needs a decoder output".into()))?;
    let n = g.value(input).dims4()?[0].max(1);
    let diff = g.sub(recon, input)?;
    let frob = g.frobenius_sq(diff);
    let abs = g.abs(out.bottleneck());
    let l1 = g.sum(abs);
    let penalty = g.scale(l1, alpha);
    let total = g.add(frob, penalty)?;
    Ok(g.scale(total, 1.0 / n as f32))
}

/// Domain-classifier loss on per-image logits, averaged over the batch:
/// source `−((1−λ)/β)·log σ(−β·D)`, target `−(λ/β)·log σ(−β·D)`.
pub fn domain_loss(g: &mut Graph, logit: Var, domain: Domain, beta: f32, lambda: f32) -> Result<Var> {
    if !(beta > 0.0) || !(lambda > 0.0 && lambda < 1.0) {
        return Err(SfaError::InvalidConfig(format!(
            "domain loss needs beta > 0 and 0 < lambda < 1, got beta={beta}, lambda={lambda}"
        )));
    }
    if !g.value(logit).all_finite() {
        return Err(SfaError::NonFinite("domain logit".into()));
    }
    let coeff = match domain {
        Domain::Source => (1.0 - lambda) / beta,
        Domain::Target => lambda / beta,
    };
    let z = g.scale(logit, -beta);
    let ls = g.log_sigmoid(z);
    let m = g.mean(ls);
    Ok(g.scale(m, -coeff))
}

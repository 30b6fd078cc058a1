//! Spectral autocorrelation alignment: channel Gram matrices of bottleneck
//! features, compared across domains.
//!
//! Each image's C×H×W feature is flattened to an (H·W)×C matrix `M` and its
//! Gram `MᵀM` (C×C) is averaged over the batch. Normalization by H·W is off
//! by default.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Result, SfaError};

/// A C×C channel Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: Tensor,
}

impl GramMatrix {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values.data()[i * self.channels() + j]
    }

    /// Comma-separated rows, one line per channel.
    pub fn to_csv(&self) -> String {
        let c = self.channels();
        let mut out = String::new();
        for row in self.values.data().chunks(c) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Batch-averaged Gram of an NCHW feature as a graph node of shape C×C.
pub fn gram_var(g: &mut Graph, feature: Var, normalize: bool) -> Result<Var> {
    let [n, c, h, w] = g.value(feature).dims4()?;
    if n == 0 || c == 0 || h * w == 0 {
        return Err(SfaError::InvalidConfig("gram of an empty feature".into()));
    }
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let item = if n == 1 { feature } else { g.slice_batch(feature, i)? };
        // Rows are channels here, so X·Xᵀ equals MᵀM with M = Xᵀ.
        let x = g.reshape(item, &[c, h * w])?;
        let xt = g.transpose(x)?;
        let gi = g.matmul(x, xt)?;
        acc = Some(match acc {
            Some(a) => g.add(a, gi)?,
            None => gi,
        });
    }
    let mut scale = 1.0 / n as f32;
    if normalize {
        scale /= (h * w) as f32;
    }
    let total = acc.expect("batch is non-empty");
    Ok(if scale == 1.0 { total } else { g.scale(total, scale) })
}

/// Computes the Gram of a concrete tensor outside any training graph.
pub fn gram(feature: &Tensor, normalize: bool) -> Result<GramMatrix> {
    let mut g = Graph::new();
    let f = g.constant(feature.clone());
    let v = gram_var(&mut g, f, normalize)?;
    Ok(GramMatrix {
        values: g.value(v).clone(),
    })
}

/// `‖G(F_T) − G(F_S)‖_F²`, evaluated as one fused node.
pub fn sacm_loss(g: &mut Graph, source: Var, target: Var, normalize: bool) -> Result<Var> {
    let [ns, cs, hs, ws] = g.value(source).dims4()?;
    let [nt, ct, ht, wt] = g.value(target).dims4()?;
    if cs != ct {
        return Err(SfaError::ChannelMismatch { left: cs, right: ct });
    }
    if ns * hs * ws == 0 || nt * ht * wt == 0 || cs == 0 {
        return Err(SfaError::InvalidConfig("gram of an empty feature".into()));
    }
    let scale = |n: usize, hw: usize| {
        let s = 1.0 / n as f64;
        if normalize {
            s / hw as f64
        } else {
            s
        }
    };
    Ok(g.gram_distance(source, target, scale(ns, hs * ws), scale(nt, ht * wt))?)
}

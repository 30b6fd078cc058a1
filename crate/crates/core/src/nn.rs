//! Layer helpers shared by the network modules: parameter initialisation and
//! named-layer application.

use rand::Rng;

use crate::autodiff::{BoundParams, Graph, ParamSet, Tensor, Var};
use crate::error::Result;

/// Uniform init with bound `gain * sqrt(3 / fan_in)`; gain √2 is He init.
fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

pub const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

/// Adds `{name}.w` (out×in×k×k) and `{name}.b` (zeros).
pub fn init_conv(params: &mut ParamSet, name: &str, out: usize, input: usize, k: usize, gain: f32, rng: &mut impl Rng) {
    params.insert(format!("{name}.w"), uniform(rng, &[out, input, k, k], input * k * k, gain));
    params.insert(format!("{name}.b"), Tensor::zeros([out]));
}

/// Adds `{name}.w` (in×out, applied as x·W) and `{name}.b` (zeros).
pub fn init_linear(params: &mut ParamSet, name: &str, input: usize, out: usize, gain: f32, rng: &mut impl Rng) {
    params.insert(format!("{name}.w"), uniform(rng, &[input, out], input, gain));
    params.insert(format!("{name}.b"), Tensor::zeros([out]));
}

pub fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, padding)?)
}

pub fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row_bias(y, b)?)
}

//! Parameter naming and init for the few layer shapes the model uses.
//!
//! A layer called `name` owns `name.w` and `name.b` in the [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamStore, Var};

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Dense layer: `w: [in, out]`, `b: [out]`.
pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert_normal(format!("{name}.w"), &[fan_in, fan_out], he_std(fan_in), rng);
    store.insert_zeros(format!("{name}.b"), &[fan_out]);
}

/// 3x3 convolution: `w: [out, in, 3, 3]`, `b: [out]`.
pub fn init_conv3(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) {
    store.insert_normal(format!("{name}.w"), &[c_out, c_in, 3, 3], he_std(9 * c_in), rng);
    store.insert_zeros(format!("{name}.b"), &[c_out]);
}

/// 1x1 convolution stored as a matrix: `w: [out, in]`, `b: [out]`.
pub fn init_conv1(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, std: f64, rng: &mut impl Rng) {
    store.insert_normal(format!("{name}.w"), &[c_out, c_in], std, rng);
    store.insert_zeros(format!("{name}.b"), &[c_out]);
}

fn wb(p: &BoundParams, name: &str) -> Result<(Var, Var)> {
    Ok((p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?))
}

/// Applies a dense layer over the last axis of `x`.
pub fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let (w, b) = wb(p, name)?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().ok_or_else(|| Error::dim("linear on a 0-d tensor"))?;
    if g.shape(w)[0] != fan_in {
        return Err(Error::dim(format!(
            "{name}: input width {fan_in}, layer expects {}",
            g.shape(w)[0]
        )));
    }
    let fan_out = g.shape(w)[1];
    let rows = shape.iter().rev().skip(1).product();
    let flat = g.reshape(x, [rows, fan_in])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b, 1)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = fan_out;
    g.reshape(y, out_shape)
}

pub fn conv3(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = wb(p, name)?;
    g.conv2d(x, w, b, stride, 1)
}

/// 1x1 convolution of `x: [C, H, W]`.
pub fn conv1(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let (w, b) = wb(p, name)?;
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("{name}: conv1 expects [C, H, W], got {:?}", s)));
    }
    let flat = g.reshape(x, [s[0], s[1] * s[2]])?;
    let y = g.matmul(w, flat)?;
    let y = g.add_bias(y, b, 0)?;
    let c_out = g.shape(y)[0];
    g.reshape(y, [c_out, s[1], s[2]])
}

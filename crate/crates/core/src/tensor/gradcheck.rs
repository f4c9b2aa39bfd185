use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per parameter (chosen with `seed`); `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-6, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|) over checked coordinates.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = f(&mut g, &bound)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f` against central differences.
pub fn grad_check<F>(params: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = f(&mut g, &bound)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic = params.collect_grads(&g, &bound);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name).map(|t| t.numel()).unwrap_or(0);
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = params.get(&name).expect("param").data()[idx];
            work.get_mut(&name).expect("param").data_mut()[idx] = orig + opts.h;
            let plus = eval(&work, &f)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig - opts.h;
            let minus = eval(&work, &f)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[&name].data()[idx];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

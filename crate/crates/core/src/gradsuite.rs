//! Finite-difference checks over every differentiable op, each module and the
//! full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::Result;
use crate::head;
use crate::irb;
use crate::model::Model;
use crate::salc::{self, InstanceMatrix};
use crate::synth::{generate_frame, SceneSpec};
use crate::tensor::{grad_check, BoundParams, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &BoundParams) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParamStore,
    f: CaseFn,
    max_coords: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Reduces `y` to a scalar with fixed random weights so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let c = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(y, c)?;
    g.sum(m)
}

fn single(name: &'static str, x: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Case {
    let mut p = ParamStore::new();
    p.insert("x", x);
    Case {
        name,
        params: p,
        f: Box::new(move |g, b| {
            let y = f(g, b.get("x")?)?;
            project(g, y, 1)
        }),
        max_coords: None,
    }
}

fn pair(name: &'static str, a: Tensor, b: Tensor, f: impl Fn(&mut Graph, Var, Var) -> Result<Var> + 'static) -> Case {
    let mut p = ParamStore::new();
    p.insert("a", a);
    p.insert("b", b);
    Case {
        name,
        params: p,
        f: Box::new(move |g, bp| {
            let y = f(g, bp.get("a")?, bp.get("b")?)?;
            project(g, y, 2)
        }),
        max_coords: None,
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    // Distinct, well separated values so max-style ops have a unique winner.
    let spread = |r: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            v.swap(i, r.random_range(0..=i));
        }
        Tensor::new(shape.to_vec(), v).expect("shape")
    };
    let counts = vec![3usize, 0, 1, 4];
    vec![
        pair("matmul", uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), |g, a, b| g.matmul(a, b)),
        single("transpose", uniform(r, &[3, 5], -1.0, 1.0), |g, x| g.transpose(x)),
        pair("add", uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0), |g, a, b| g.add(a, b)),
        pair("sub", uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0), |g, a, b| g.sub(a, b)),
        pair("mul", uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0), |g, a, b| g.mul(a, b)),
        pair("add_bias", uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0), |g, a, b| g.add_bias(a, b, 1)),
        single("affine", uniform(r, &[5], -1.0, 1.0), |g, x| g.affine(x, -1.7, 0.3)),
        single("sigmoid", uniform(r, &[6], -3.0, 3.0), |g, x| g.sigmoid(x)),
        single("relu", off_zero(r, &[8]), |g, x| g.relu(x)),
        single("exp", uniform(r, &[6], -2.0, 2.0), |g, x| g.exp(x)),
        single("log", uniform(r, &[6], 0.2, 3.0), |g, x| g.log(x)),
        single("sin", uniform(r, &[6], -3.0, 3.0), |g, x| g.sin(x)),
        single("log_sigmoid", uniform(r, &[6], -4.0, 4.0), |g, x| g.log_sigmoid(x)),
        single("powi", uniform(r, &[6], -1.5, 1.5), |g, x| g.powi(x, 3)),
        single("clamp", Tensor::new([4], vec![-0.9, -0.2, 0.3, 0.95]).expect("shape"), |g, x| g.clamp(x, -0.5, 0.5)),
        single("smooth_l1", Tensor::new([4], vec![-0.9, -0.05, 0.04, 0.7]).expect("shape"), |g, x| g.smooth_l1(x, 0.1)),
        single("reshape", uniform(r, &[2, 6], -1.0, 1.0), |g, x| g.reshape(x, [3, 4])),
        pair("concat", uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[2, 1, 2], -1.0, 1.0), |g, a, b| {
            g.concat(&[a, b], 1)
        }),
        single("slice", uniform(r, &[3, 5], -1.0, 1.0), |g, x| g.slice(x, 1, 1, 4)),
        single("reduce_max", spread(r, &[3, 4, 2]), |g, x| g.reduce_max(x, 1)),
        single("sum", uniform(r, &[2, 3], -1.0, 1.0), |g, x| {
            let s = g.sum(x)?;
            g.powi(s, 2)
        }),
        single("mean", uniform(r, &[2, 3], -1.0, 1.0), |g, x| {
            let s = g.mean(x)?;
            g.powi(s, 2)
        }),
        single("softmax", uniform(r, &[3, 4], -2.0, 2.0), |g, x| g.softmax(x, 1)),
        single("logsumexp", uniform(r, &[3, 4], -2.0, 2.0), |g, x| g.logsumexp(x, 0)),
        single("gather", uniform(r, &[6], -1.0, 1.0), |g, x| g.gather(x, &[5, 0, 0, 3], [2, 2])),
        single("scatter_add", uniform(r, &[4], -1.0, 1.0), |g, x| g.scatter_add(x, &[2, 0, 2, 5], [6])),
        {
            let mut p = ParamStore::new();
            p.insert("x", uniform(r, &[2, 5, 6], -1.0, 1.0));
            p.insert("w", uniform(r, &[3, 2, 3, 3], -0.5, 0.5));
            p.insert("b", uniform(r, &[3], -0.5, 0.5));
            Case {
                name: "conv2d",
                params: p,
                f: Box::new(|g, b| {
                    let y = g.conv2d(b.get("x")?, b.get("w")?, b.get("b")?, 1, 1)?;
                    project(g, y, 3)
                }),
                max_coords: None,
            }
        },
        {
            let mut p = ParamStore::new();
            p.insert("x", uniform(r, &[2, 6, 7], -1.0, 1.0));
            p.insert("w", uniform(r, &[2, 2, 3, 3], -0.5, 0.5));
            p.insert("b", uniform(r, &[2], -0.5, 0.5));
            Case {
                name: "conv2d_stride2",
                params: p,
                f: Box::new(|g, b| {
                    let y = g.conv2d(b.get("x")?, b.get("w")?, b.get("b")?, 2, 1)?;
                    project(g, y, 4)
                }),
                max_coords: None,
            }
        },
        single("upsample_nearest", uniform(r, &[2, 2, 3], -1.0, 1.0), |g, x| g.upsample_nearest(x, 2)),
        single("masked_max", spread(r, &[4, 4, 3]), move |g, x| g.masked_max(x, &counts)),
    ]
}

fn module_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let d = 4;
    let mut cases = Vec::new();

    let mut p = ParamStore::new();
    irb::init_params(&mut p, &irb::IrbConfig { d, attention_softmax: true }, 9, 10, r);
    let spatial = uniform(r, &[3, 2, 9], -1.0, 1.0);
    let indicative = uniform(r, &[3, 2, 3], -1.0, 1.0);
    for (name, which) in [("irb_rr_gated", 0), ("irb_rr_weight", 1)] {
        let (s, i) = (spatial.clone(), indicative.clone());
        cases.push(Case {
            name,
            params: p.clone(),
            f: Box::new(move |g, b| {
                let (sv, iv) = (g.constant(s.clone()), g.constant(i.clone()));
                let out = irb::rr_branch(g, b, sv, iv)?;
                project(g, if which == 0 { out.gated } else { out.weight }, 5)
            }),
            max_coords: None,
        });
    }

    let lidar = uniform(r, &[5, 2, 10], -1.0, 1.0);
    let radar_w = uniform(r, &[3, d], -1.0, 1.0);
    for (name, softmax) in [("irb_rl_softmax", true), ("irb_rl_plain", false)] {
        let mut ps = p.clone();
        ps.insert("radar_w", radar_w.clone());
        let l = lidar.clone();
        cases.push(Case {
            name,
            params: ps,
            f: Box::new(move |g, b| {
                let lv = g.constant(l.clone());
                let pts = irb::lidar_point_features(g, b, lv)?;
                let pooled = irb::pool_pillars(g, pts, &[2, 1, 2, 0, 1])?;
                let y = irb::rl_branch(g, b, pooled, b.get("radar_w")?, softmax)?;
                project(g, y, 6)
            }),
            max_coords: None,
        });
    }

    // MCcont on raw embeddings, three classes with padding.
    let mut ps = ParamStore::new();
    ps.insert("s", uniform(r, &[3, 2, 3], -1.0, 1.0));
    cases.push(Case {
        name: "mccont",
        params: ps,
        f: Box::new(|g, b| {
            let s = b.get("s")?;
            let idx: Vec<usize> = (0..3).flat_map(|h| [(h * 2 + 1) * 3, (h * 2) * 3]).flat_map(|o| o..o + 3).collect();
            let sp = g.gather(s, &idx, [3, 2, 3])?;
            let m = InstanceMatrix {
                s,
                s_prime: sp,
                classes: vec![0, 1, 2],
                cells: vec![vec![0, 1]; 3],
                max_centers: 2,
                valid: vec![true; 3],
            };
            salc::mccont_loss(g, &m)
        }),
        max_coords: None,
    });

    cases
}

/// The complete `L_RPN + alpha * L_shape` objective of `cfg` on one synthetic frame.
fn end_to_end_case(cfg: &Config, seed: u64) -> Result<Case> {
    let model = Model::new(cfg, seed)?;
    let frame = generate_frame(&SceneSpec { seed, ..SceneSpec::default() }, 0);
    let x = model.prepare(&frame)?;
    let t = model.targets(&frame);
    // Zero-initialised biases put every empty BEV cell exactly on a relu kink;
    // jitter to a generic point first.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e2e);
    let mut params = model.params.clone();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    Ok(Case {
        name: "final_loss",
        params,
        f: Box::new(move |g, b| Ok(model.loss(g, b, &x, &t, seed)?.1.total)),
        max_coords: Some(2),
    })
}

/// Shape focal loss and RPN loss on small random heads.
fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let grid = crate::pillarize::GridConfig::default();
    let labels = generate_frame(&SceneSpec { seed, ..SceneSpec::default() }, 1).labels;
    let shape_t = salc::make_shape_targets(&labels, &grid, 3);
    let mut ps = ParamStore::new();
    ps.insert("logits", uniform(r, &[3, grid.rows(), grid.cols()], -3.0, 1.0));
    let st = shape_t.clone();
    let focal = Case {
        name: "shape_focal",
        params: ps.clone(),
        f: Box::new(move |g, b| {
            let s = g.sigmoid(b.get("logits")?)?;
            salc::focal_shape_loss(g, s, &st)
        }),
        max_coords: Some(64),
    };
    let st = shape_t;
    let shape = Case {
        name: "shape_loss",
        params: ps,
        f: Box::new(move |g, b| {
            let logits = b.get("logits")?;
            let scores = g.sigmoid(logits)?;
            let heat = salc::ShapeHeatmaps { logits, scores };
            Ok(salc::shape_loss(g, &heat, &st, seed, true)?.total)
        }),
        max_coords: Some(64),
    };

    let anchors = head::make_anchors(&grid, &head::AnchorConfig::default());
    let at = head::assign_targets(&anchors, &labels, &head::AnchorConfig::default());
    let a = anchors.len();
    let mut ps = ParamStore::new();
    ps.insert("cls", uniform(r, &[a], -4.0, 1.0));
    ps.insert("reg", uniform(r, &[a, head::BOX_DOF], -0.5, 0.5));
    ps.insert("dir", uniform(r, &[a, 2], -1.0, 1.0));
    let rpn = Case {
        name: "rpn_loss",
        params: ps,
        f: Box::new(move |g, b| {
            let out = head::HeadOutput { cls: b.get("cls")?, reg: b.get("reg")?, dir: b.get("dir")? };
            Ok(head::rpn_loss(g, &out, &at, &head::LossWeights::default())?.total)
        }),
        max_coords: Some(64),
    };
    vec![focal, shape, rpn]
}

fn check_all(cases: Vec<Case>, seed: u64) -> Result<Vec<CaseResult>> {
    cases
        .into_iter()
        .map(|c| {
            let opts = GradCheckOptions { h: 1e-6, max_coords_per_param: c.max_coords, seed };
            let report = grad_check(&c.params, &c.f, &opts)?;
            Ok(CaseResult { name: c.name.to_string(), report })
        })
        .collect()
}

/// Ops, modules and losses on random inputs drawn from `seed`.
pub fn run_unit_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut cases = op_cases(seed);
    cases.extend(module_cases(seed));
    cases.extend(loss_cases(seed));
    check_all(cases, seed)
}

/// Every unit case plus the full objective of `cfg`.
pub fn run_suite(cfg: &Config, seed: u64) -> Result<Vec<CaseResult>> {
    let mut cases = op_cases(seed);
    cases.extend(module_cases(seed));
    cases.extend(loss_cases(seed));
    cases.push(end_to_end_case(cfg, seed)?);
    check_all(cases, seed)
}

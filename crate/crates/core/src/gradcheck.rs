//! Finite-difference gradient suite.
//!
//! Covers each tape op on its own, the fusion, attention and recurrent
//! blocks with their parameters, and the full joint loss of a tiny model
//! under every ablation row, with and without the final projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, FeatureGrid};
use crate::autodiff::{check_tape_gradients, finite_difference_check, Shape, Tape, Value, Var};
use crate::codec::{GruCell, END};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::fusion::{Backend, FusionConfig, FusionParams};
use crate::linalg::{Matrix, Tensor3, Vector};
use crate::model::{EncodedExample, Model};
use crate::objectives::LossWeights;
use crate::params::{Binder, ParamSet};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst `|analytic - fd| / max(1, |analytic|)` over all coordinates.
    pub error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.error < tolerance
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Value>, Build)> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut v = |n: usize| -> Value { Vector::uniform(n, 1.0, &mut r).into() };
    let mut r2 = ChaCha8Rng::seed_from_u64(12);
    let mut m = |a: usize, b: usize| -> Value { Matrix::uniform(a, b, 1.0, &mut r2).into() };
    let tensor: Value = Tensor3::uniform([2, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(13)).into();
    vec![
        ("op.add", vec![v(3), v(3)], Box::new(|t, x| { let y = t.add(x[0], x[1])?; let y = t.mul(y, y)?; Ok(t.sum(y)) })),
        ("op.sub", vec![v(3), v(3)], Box::new(|t, x| { let y = t.sub(x[0], x[1])?; let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.mul", vec![v(3), v(3)], Box::new(|t, x| { let y = t.mul(x[0], x[1])?; Ok(t.sum(y)) })),
        ("op.scale", vec![v(3)], Box::new(|t, x| { let y = t.scale(x[0], -1.7); let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.mul_scalar", vec![v(3), v(1)], Box::new(|t, x| { let y = t.mul_scalar(x[0], x[1])?; let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.matvec", vec![m(3, 4), v(4)], Box::new(|t, x| { let y = t.matvec(x[0], x[1])?; let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.t_matvec", vec![m(3, 4), v(3)], Box::new(|t, x| { let y = t.t_matvec(x[0], x[1])?; let y = t.sigmoid(y); Ok(t.sum(y)) })),
        ("op.matmul_t", vec![m(3, 2), m(4, 2)], Box::new(|t, x| { let y = t.matmul_t(x[0], x[1])?; let y = t.tanh(y); Ok(t.mean(y)) })),
        ("op.row", vec![m(4, 3)], Box::new(|t, x| { let y = t.row(x[0], 2)?; let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.reshape", vec![m(2, 3)], Box::new(|t, x| { let y = t.reshape(x[0], Shape::Vector(6))?; t.cross_entropy(y, 4) })),
        ("op.tanh", vec![v(4)], Box::new(|t, x| { let y = t.tanh(x[0]); let y = t.mul(y, y)?; Ok(t.sum(y)) })),
        ("op.sigmoid", vec![v(4)], Box::new(|t, x| { let y = t.sigmoid(x[0]); let y = t.mul(y, y)?; Ok(t.sum(y)) })),
        ("op.softmax", vec![v(5)], Box::new(|t, x| {
            let y = t.softmax(x[0])?;
            let w = t.constant(Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0]));
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        })),
        ("op.sum", vec![v(4)], Box::new(|t, x| { let y = t.sum(x[0]); let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.mean", vec![v(4)], Box::new(|t, x| { let y = t.mean(x[0]); let y = t.tanh(y); Ok(t.sum(y)) })),
        ("op.smooth_l1_mean", vec![Vector::from_vec(vec![0.3, -0.7, 1.8, -2.4, 0.45]).into()], Box::new(|t, x| Ok(t.smooth_l1_mean(x[0])))),
        ("op.cross_entropy", vec![v(6)], Box::new(|t, x| t.cross_entropy(x[0], 3))),
        ("op.full_bilinear", vec![tensor, v(2), v(3)], Box::new(|t, x| { let y = t.full_bilinear(x[0], x[1], x[2])?; let y = t.tanh(y); Ok(t.sum(y)) })),
    ]
}

/// Binds a parameter set on a tape; returns the loss and the bound leaves.
type BuildParams<'a, P> = dyn Fn(&P, &mut Tape) -> Result<(Var, Vec<Var>)> + 'a;

/// Checks the gradient of a scalar built from the arrays of `params`.
///
/// `build` binds `params` on the tape and returns the loss together with the
/// bound leaves in [`ParamSet::arrays_mut`] order.
pub(crate) fn check_params<P: ParamSet + Clone>(
    params: &P,
    build: &BuildParams<'_, P>,
    step: f64,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let (loss, leaves) = build(params, &mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| tape.grad_slice(l)).collect();
    let point: Vec<f64> = params.arrays("").iter().flat_map(|a| a.data.to_vec()).collect();
    let mut scratch = params.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        let mut offset = 0;
        for dst in scratch.arrays_mut() {
            let n = dst.len();
            dst.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::new();
        let (loss, _) = build(&scratch, &mut tape)?;
        Ok(tape.scalar(loss))
    };
    let error = finite_difference_check(&mut eval, &analytic, &point, step)?;
    Ok(CheckResult {
        name: String::new(),
        error,
        coordinates: point.len(),
    })
}

fn named(name: impl Into<String>, mut r: CheckResult) -> CheckResult {
    r.name = name.into();
    r
}

fn block_checks(step: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    for backend in [Backend::Mutan, Backend::Mlb] {
        let cfg = FusionConfig {
            d_q: 3,
            d_v: 4,
            d_a: 3,
            t: 3,
            t_v: 3,
            rank: 2,
            backend,
        };
        let fusion = FusionParams::init(&cfg, &mut rng)?;
        let q = Vector::uniform(3, 1.0, &mut rng);
        let v = Vector::uniform(4, 1.0, &mut rng);
        let r = check_params(
            &fusion,
            &|p: &FusionParams, tape: &mut Tape| {
                let mut b = Binder::new(tape);
                let vars = p.bind(&mut b);
                let leaves = b.bound;
                let q = tape.constant(q.clone());
                let v = tape.constant(v.clone());
                let qt = tape.matvec(vars.w_q, q)?;
                let vt = tape.matvec(vars.w_v, v)?;
                let fused = vars.lowrank_fuse(tape, qt, vt)?;
                let a = tape.t_matvec(vars.w_a, fused)?;
                let a = tape.tanh(a);
                Ok((tape.sum(a), leaves))
            },
            step,
        )?;
        out.push(named(format!("block.fusion.{}", backend.as_str()), r));
    }

    let att = AttentionParams::init(3, 4, 3, 2, 2, &mut rng)?;
    let grid = FeatureGrid::new(2, 3, Matrix::uniform(6, 4, 1.0, &mut rng))?;
    let guide = Vector::uniform(3, 1.0, &mut rng);
    let r = check_params(
        &att,
        &|p: &AttentionParams, tape: &mut Tape| {
            let mut b = Binder::new(tape);
            let vars = p.bind(&mut b);
            let leaves = b.bound;
            let cells = tape.constant(grid.cells().clone());
            let g = tape.constant(guide.clone());
            let pooled = vars.attend(tape, cells, g)?;
            let w = tape.constant(Vector::from_vec(vec![1.0, -0.5, 2.0, 0.3]));
            let y = tape.mul(pooled, w)?;
            Ok((tape.sum(y), leaves))
        },
        step,
    )?;
    out.push(named("block.attention", r));

    let cell = GruCell::init(3, 4, &mut rng);
    let xs = [Vector::uniform(3, 1.0, &mut rng), Vector::uniform(3, 1.0, &mut rng)];
    let h0 = Vector::uniform(4, 0.5, &mut rng);
    let r = check_params(
        &cell,
        &|p: &GruCell, tape: &mut Tape| {
            let mut b = Binder::new(tape);
            let vars = p.bind(&mut b);
            let leaves = b.bound;
            let mut h = tape.constant(h0.clone());
            for x in &xs {
                let x = tape.constant(x.clone());
                h = vars.step(tape, x, h)?;
            }
            let y = tape.mul(h, h)?;
            Ok((tape.sum(y), leaves))
        },
        step,
    )?;
    out.push(named("block.gru", r));
    Ok(out)
}

/// Tiny model for the end-to-end check: every width is 2 or 3.
pub fn tiny_model_config(flags: (bool, bool, bool), skip: bool) -> ModelConfig {
    let mut c = ModelConfig {
        d_w: 3,
        d_q: 3,
        d_a: 3,
        t: 3,
        t_v: 2,
        rank: 2,
        skip_final_projection: skip,
        ..ModelConfig::default()
    }
    .with_flags(flags);
    c.share_attention = flags.2;
    c
}

/// Gradient check of the weighted joint loss on one example.
pub fn check_joint_loss(config: &ModelConfig, seed: u64, step: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(config, 8, 4, 5, &mut rng)?;
    let ex = EncodedExample {
        grid: FeatureGrid::new(2, 2, Matrix::uniform(4, 5, 1.0, &mut rng))?,
        question: Some(vec![4, 6, 5, 7]),
        answer: 1,
    };
    debug_assert!(ex.question.as_ref().is_some_and(|q| !q.contains(&END)));
    let weights = if config.duality_regularizer {
        LossWeights::default()
    } else {
        LossWeights {
            q_duality: 0.0,
            a_duality: 0.0,
            ..LossWeights::default()
        }
    };
    check_params(
        &model,
        &|m: &Model, tape: &mut Tape| {
            let (vars, leaves) = m.bind(tape);
            let (total, _) = m.example_loss(tape, &vars, &ex, weights)?;
            Ok((total, leaves))
        },
        step,
    )
}

/// Every check in the suite, in a fixed order.
pub fn run_suite(step: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, inputs, build) in op_cases() {
        let coordinates = inputs.iter().map(|v| v.len()).sum();
        let error = check_tape_gradients(&inputs, build.as_ref(), step)?;
        out.push(CheckResult {
            name: name.to_string(),
            error,
            coordinates,
        });
    }
    out.extend(block_checks(step)?);
    for (i, flags) in ModelConfig::ABLATION_ROWS.into_iter().enumerate() {
        for skip in [true, false] {
            let cfg = tiny_model_config(flags, skip);
            let r = check_joint_loss(&cfg, 100 + i as u64, step)?;
            let tag = |b: bool| if b { 'T' } else { 'F' };
            out.push(named(
                format!(
                    "loss.row{}.{}{}{}.{}",
                    i + 1,
                    tag(flags.0),
                    tag(flags.1),
                    tag(flags.2),
                    if skip { "skip" } else { "proj" }
                ),
                r,
            ));
        }
    }
    Ok(out)
}

//! The finite-difference suite behind `lmim gradcheck`: every differentiable
//! op, every loss and the assembled model, in f64 at a fixed probe step.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{mean_pair_cos, patch_disc, recon_direct, sim_regularizer, total_loss, LossConfig, LossKind};
use crate::model::{Batch, Binding, DecoderKind, Model, ModelConfig, TargetStrategy};
use crate::ndtensor::gradcheck::check_with;
use crate::ndtensor::{Graph, Tensor, Var};
use crate::patching::sincos_pos_embed;

pub const STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Single elementwise ops must agree much more tightly.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub elementwise: bool,
    pub max_rel_err: f64,
    pub bound: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.bound
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    elementwise: bool,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn unary(name: &'static str, elementwise: bool, input: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    Case {
        name,
        elementwise,
        inputs: vec![input],
        build: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y, 900)
        }),
    }
}

fn binary(name: &'static str, elementwise: bool, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Case {
    Case {
        name,
        elementwise,
        inputs: vec![a, b],
        build: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y, 901)
        }),
    }
}

fn op_cases() -> Vec<Case> {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    // |x| stays away from its kink under the probe
    let away = randn(&[3, 4], 3).map(|v| if v.abs() < 0.1 { v + v.signum() * 0.5 } else { v });
    vec![
        binary("add", true, a.clone(), b.clone(), |g, x, y| g.add(x, y)),
        binary("sub", true, a.clone(), b.clone(), |g, x, y| g.sub(x, y)),
        binary("mul", true, a.clone(), b.clone(), |g, x, y| g.mul(x, y)),
        unary("scale", true, a.clone(), |g, x| g.scale(x, -1.75)),
        unary("add_scalar", true, a.clone(), |g, x| g.add_scalar(x, 0.5)),
        unary("square", true, a.clone(), |g, x| g.square(x)),
        unary("abs", true, away, |g, x| g.abs(x)),
        unary("gelu", true, a.clone().map(|v| 2.0 * v), |g, x| g.gelu(x)),
        binary("select", true, a.clone(), b.clone(), |g, x, y| {
            g.select((0..12).map(|i| i % 3 != 1).collect(), x, y)
        }),
        binary("matmul", false, randn(&[3, 5], 4), randn(&[5, 2], 5), |g, x, y| g.matmul(x, y)),
        binary("matmul_nt", false, randn(&[3, 5], 6), randn(&[4, 5], 7), |g, x, y| g.matmul_nt(x, y)),
        binary("add_row", false, a.clone(), randn(&[4], 8), |g, x, y| g.add_row(x, y)),
        Case {
            name: "linear",
            elementwise: false,
            inputs: vec![randn(&[3, 5], 9), randn(&[5, 4], 10), randn(&[4], 11)],
            build: Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                weighted_sum(g, y, 902)
            }),
        },
        unary("softmax_rows", false, a.clone(), |g, x| g.softmax(x, 1)),
        unary("softmax_cols", false, a.clone(), |g, x| g.softmax(x, 0)),
        unary("log_softmax", false, a.clone(), |g, x| g.log_softmax(x)),
        Case {
            name: "layer_norm",
            elementwise: false,
            inputs: vec![randn(&[3, 6], 12), randn(&[6], 13), randn(&[6], 14)],
            build: Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y, 903)
            }),
        },
        Case {
            name: "attention",
            elementwise: false,
            inputs: vec![randn(&[6, 8], 15), randn(&[4, 8], 16), randn(&[4, 8], 17)],
            build: Box::new(|g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, 2)?;
                weighted_sum(g, y, 904)
            }),
        },
        unary("normalize_rows", false, a.clone(), |g, x| g.normalize_rows(x)),
        unary("sum_rows", false, a.clone(), |g, x| g.sum_rows(x)),
        unary("mean_all", false, a.clone(), |g, x| g.mean_all(x)),
        unary("sum_all", false, a.clone(), |g, x| g.sum_all(x)),
        unary("diag", false, randn(&[4, 4], 18), |g, x| g.diag(x)),
        binary("concat_rows", false, a.clone(), randn(&[2, 4], 19), |g, x, y| g.concat_rows(x, y)),
        unary("slice_rows", false, a.clone(), |g, x| g.slice_rows(x, 1, 3)),
        unary("gather_rows", false, a, |g, x| g.gather_rows(x, &[2, 0, 2, 1])),
    ]
}

fn loss_cases() -> Vec<Case> {
    let zh = randn(&[8, 6], 30);
    let zt = randn(&[8, 6], 31);
    let zv = randn(&[6, 6], 32);
    let pair = |name, build: Build| Case {
        name,
        elementwise: false,
        inputs: vec![zh.clone(), zt.clone()],
        build,
    };
    vec![
        pair("loss_l2", Box::new(|g, v| recon_direct(g, v[0], v[1], LossKind::L2, 1.0))),
        pair("loss_l1", Box::new(|g, v| recon_direct(g, v[0], v[1], LossKind::L1, 1.0))),
        // δ large enough that every row stays on the quadratic branch, and a
        // small one that puts every row on the linear branch
        pair("loss_huber_quadratic", Box::new(|g, v| recon_direct(g, v[0], v[1], LossKind::Huber, 50.0))),
        pair("loss_huber_linear", Box::new(|g, v| recon_direct(g, v[0], v[1], LossKind::Huber, 0.05))),
        pair("loss_patch_disc", Box::new(|g, v| patch_disc(g, v[0], v[1], 0.2, 2, false))),
        pair("loss_patch_disc_infonce", Box::new(|g, v| patch_disc(g, v[0], v[1], 0.2, 2, true))),
        Case {
            name: "mean_pair_cos",
            elementwise: false,
            inputs: vec![zv.clone()],
            build: Box::new(|g, v| mean_pair_cos(g, v[0], 2)),
        },
        Case {
            name: "sim_regularizer",
            elementwise: false,
            inputs: vec![zv.clone(), zh.clone()],
            build: Box::new(|g, v| sim_regularizer(g, v[0], v[1], 0.4, 2)),
        },
        Case {
            name: "total_loss",
            elementwise: false,
            inputs: vec![zh.clone(), zt.clone(), zv],
            build: Box::new(|g, v| {
                let cfg = LossConfig::default();
                Ok(total_loss(g, v[0], v[1], v[2], &cfg, 3, 10, 2)?.total)
            }),
        },
    ]
}

fn toy_model(kind: DecoderKind, cues: bool, projector: bool, seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        patch_size: 2,
        channels: 1,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        decoder_kind: kind,
        decoder_depth: 1,
        visual_cues: cues,
        projector,
        projector_hidden: 8,
    };
    let mut m = Model::init(&cfg, &mut rng(seed))?;
    // move every weight off its initial value so zero-initialised layers
    // still carry gradient
    let mut r = rng(seed + 1);
    for t in m.params.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.3, &mut r);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    Ok(m)
}

fn toy_batch(seed: u64) -> Result<Batch<f64>> {
    let cells: Vec<(usize, usize)> = (0..16).map(|i| (i / 4, i % 4)).collect();
    let vis = [0usize, 5, 10, 3, 6, 12];
    let tgt = [1usize, 2, 7, 8, 15, 0, 4, 9, 11, 14];
    let pick = |idx: &[usize]| idx.iter().map(|&i| cells[i]).collect::<Vec<_>>();
    Ok(Batch {
        groups: 2,
        visible: randn(&[6, 4], seed),
        target: randn(&[10, 4], seed + 1),
        pos_v: sincos_pos_embed(&pick(&vis), 8)?,
        pos_t: sincos_pos_embed(&pick(&tgt), 8)?,
    })
}

fn model_case(name: &'static str, kind: DecoderKind, cues: bool, projector: bool, strategy: TargetStrategy, loss: LossKind) -> Result<Case> {
    let m = toy_model(kind, cues, projector, 40)?;
    let target = m.new_target(strategy, 2, 0.99, &mut rng(41))?;
    let batch = toy_batch(42)?;
    let cfg = LossConfig {
        kind: loss,
        ..LossConfig::default()
    };
    Ok(Case {
        name,
        elementwise: false,
        inputs: m.params.tensors().to_vec(),
        build: Box::new(move |g, v| {
            let b = Binding::from_vars(v.to_vec());
            let xv = g.constant(batch.visible.clone());
            let pv = g.constant(batch.pos_v.clone());
            let pt = g.constant(batch.pos_t.clone());
            let z_v = m.encode(g, &b, xv, pv, batch.groups, m.cfg.depth)?;
            let z_t = m.target_encode(g, &target, &b, &batch.target, &batch.pos_t, batch.groups)?;
            let (z_hat, _) = m.decode(g, &b, z_v, pv, pt, batch.groups)?;
            Ok(total_loss(g, z_hat, z_t, z_v, &cfg, 3, 10, batch.groups)?.total)
        }),
    })
}

fn cases() -> Result<Vec<Case>> {
    let mut all = op_cases();
    all.extend(loss_cases());
    all.push(model_case(
        "model_naive_l2",
        DecoderKind::SelfAttention,
        false,
        false,
        TargetStrategy::SharedJoint,
        LossKind::L2,
    )?);
    all.push(model_case(
        "model_full_patch_disc",
        DecoderKind::CrossAttention,
        true,
        true,
        TargetStrategy::Momentum,
        LossKind::PatchDisc,
    )?);
    Ok(all)
}

/// Names of every case, in execution order.
pub fn case_names() -> Result<Vec<&'static str>> {
    Ok(cases()?.into_iter().map(|c| c.name).collect())
}

/// Runs the suite. Composite cases must stay within `tolerance`,
/// elementwise ones within the tighter of `tolerance` and
/// [`ELEMENTWISE_TOLERANCE`].
pub fn run_suite(tolerance: f64) -> Result<SuiteReport> {
    run_suite_with(tolerance, None)
}

/// [`run_suite`] with the analytic gradient of the case named `flip` (or
/// of every case for `"all"`) sign-flipped before comparison, which must
/// make the suite fail.
pub fn run_suite_with(tolerance: f64, flip: Option<&str>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut out = Vec::new();
    for case in cases()? {
        let mutate = flip.is_some_and(|f| f == "all" || f == case.name);
        let report = check_with(&case.inputs, STEP, &case.build, |_, grad: &mut Tensor<f64>| {
            if mutate {
                grad.data_mut().iter_mut().for_each(|v| *v = -*v);
            }
        })?;
        let bound = if case.elementwise {
            tolerance.min(ELEMENTWISE_TOLERANCE)
        } else {
            tolerance
        };
        out.push(CaseResult {
            name: case.name,
            elementwise: case.elementwise,
            max_rel_err: report.max_rel_err,
            bound,
        });
    }
    Ok(SuiteReport {
        cases: out,
        elapsed: start.elapsed(),
    })
}

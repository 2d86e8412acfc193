//! Central finite-difference checks of the backward rules.

use rand::Rng as _;

use crate::data::Batch;
use crate::distributions::{kl_divergence, GaussianVar};
use crate::error::{Error, Result};
use crate::model::{Activation, ForwardCtx, ModelConfig, VkdModel};
use crate::objectives::{objective_loss, LossOptions, Noise, Objective};
use crate::rng;
use crate::tensor::{Graph, OpKind, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst coordinate of a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all coordinates
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the gradient of the scalar `f` with central differences of step
/// `h` over every coordinate of every tensor in `params`. `f` must be
/// deterministic; it receives a fresh graph and the parameters as leaves.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with_fault(f, params, h, None)
}

#[doc(hidden)]
pub fn check_with_fault<F>(f: F, params: &[Tensor], h: f64, fault: Option<OpKind>) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::invalid(format!("finite-difference step {h} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).is_finite() {
        return Err(Error::invalid("objective is not finite at the base point"));
    }
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let x0 = p.data()[i];
            work[pi].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite { param: pi, index: i });
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report = FdReport {
                    max_rel_error: rel,
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

/// One line of the suite: the worst case over all trials of a family.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub family: String,
    pub trials: usize,
    pub worst: FdReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.worst.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.worst.max_rel_error < TOLERANCE)
    }
}

fn uniform(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from `kink` by at least `gap`.
fn away_from(r: &mut rng::Rng, shape: &[usize], kink: f64, gap: f64, spread: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.gen_range(gap..spread);
            if r.gen_bool(0.5) {
                kink + mag
            } else {
                kink - mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an op output against fixed random weights so every output
/// coordinate influences the root differently.
fn weighted_root(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng::rng(&[0xC0, seed]);
    let w = uniform(&mut r, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Random instance `trial` of an op family: parameters and the function.
fn op_case(kind: OpKind, trial: u64) -> (Vec<Tensor>, CaseFn) {
    let mut r = rng::rng(&[0x6C, trial, kind as u64]);
    let n = r.gen_range(1..=4);
    let c = r.gen_range(1..=5);
    let shape = vec![n, c];
    let seed = trial;
    let unary = |params: Vec<Tensor>, op: fn(&mut Graph, Var) -> Var| -> (Vec<Tensor>, CaseFn) {
        (
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = op(g, v[0]);
                weighted_root(g, y, seed)
            }),
        )
    };
    match kind {
        OpKind::MatMul => {
            let k = r.gen_range(1..=4);
            let vector = r.gen_bool(0.3);
            let rhs: Vec<usize> = if vector { vec![k] } else { vec![k, c] };
            let params = vec![uniform(&mut r, &[n, k], -1.0, 1.0), uniform(&mut r, &rhs, -1.0, 1.0)];
            (
                params,
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (sa, sb) = match r.gen_range(0..3) {
                0 => (shape.clone(), shape.clone()),
                1 => (shape.clone(), vec![c]),
                _ => (vec![c], shape.clone()),
            };
            let params = vec![uniform(&mut r, &sa, -2.0, 2.0), uniform(&mut r, &sb, -2.0, 2.0)];
            (
                params,
                Box::new(move |g, v| {
                    let y = match kind {
                        OpKind::Add => g.add(v[0], v[1])?,
                        OpKind::Sub => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::Scale => {
            let k = r.gen_range(-3.0..3.0);
            (
                vec![uniform(&mut r, &shape, -2.0, 2.0)],
                Box::new(move |g, v| {
                    let y = g.scale(v[0], k);
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::AddScalar => {
            let k = r.gen_range(-3.0..3.0);
            (
                vec![uniform(&mut r, &shape, -2.0, 2.0)],
                Box::new(move |g, v| {
                    let y = g.add_scalar(v[0], k);
                    // square so the constant shift reaches the gradient
                    let y2 = g.mul(y, y)?;
                    weighted_root(g, y2, seed)
                }),
            )
        }
        OpKind::Relu => unary(vec![away_from(&mut r, &shape, 0.0, 0.01, 2.0)], Graph::relu),
        OpKind::Tanh => unary(vec![uniform(&mut r, &shape, -2.0, 2.0)], Graph::tanh),
        OpKind::Exp => unary(vec![uniform(&mut r, &shape, -2.0, 2.0)], Graph::exp),
        OpKind::Log => unary(vec![uniform(&mut r, &shape, 0.2, 3.0)], Graph::log),
        OpKind::Softplus => unary(vec![uniform(&mut r, &shape, -4.0, 4.0)], Graph::softplus),
        OpKind::Sigmoid => unary(vec![uniform(&mut r, &shape, -4.0, 4.0)], Graph::sigmoid),
        OpKind::Clamp => {
            // mix of points inside and outside [-1, 1], away from the edges
            let mut x = away_from(&mut r, &shape, 1.0, 0.01, 1.5);
            for v in x.data_mut() {
                if r.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            unary(vec![x], |g, v| g.clamp(v, -1.0, 1.0))
        }
        OpKind::Sum | OpKind::Mean => {
            let k = if kind == OpKind::Sum { OpKind::Sum } else { OpKind::Mean };
            (
                vec![uniform(&mut r, &shape, -2.0, 2.0)],
                Box::new(move |g, v| {
                    // square first so the gradient depends on the input
                    let sq = g.mul(v[0], v[0])?;
                    let y = if k == OpKind::Sum { g.sum(sq) } else { g.mean(sq) };
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::Concat => {
            let c2 = r.gen_range(1..=4);
            let params = vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &[n, c2], -1.0, 1.0)];
            (
                params,
                Box::new(move |g, v| {
                    let y = g.concat(v[0], v[1])?;
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::Slice => {
            let start = r.gen_range(0..c);
            let end = r.gen_range(start + 1..=c);
            (
                vec![uniform(&mut r, &shape, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.slice(v[0], start, end)?;
                    weighted_root(g, y, seed)
                }),
            )
        }
        OpKind::Dropout => {
            let rate = r.gen_range(0.1..0.7);
            (
                vec![uniform(&mut r, &shape, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.dropout(v[0], rate, true, seed)?;
                    weighted_root(g, y, seed)
                }),
            )
        }
    }
}

fn worst_of(family: &str, reports: Vec<FdReport>) -> SuiteEntry {
    let trials = reports.len();
    let worst = reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one trial");
    SuiteEntry {
        family: family.to_string(),
        trials,
        worst,
    }
}

/// The small configuration used for whole-objective checks.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        vocab: 16,
        embed_dim: 4,
        feature_dim: 6,
        latent_dim: 4,
        n_classes: 3,
        hidden: 5,
        dropout: 0.5,
        activation: Activation::Relu,
    }
}

/// A 4-sample batch matching [`desk_config`] (sequence length 6).
pub fn desk_batch(seed: u64) -> Batch {
    let cfg = desk_config();
    let mut r = rng::rng(&[0xBA7C, seed]);
    let image = Tensor::matrix(4, cfg.input_dim, rng::standard_normal(&mut r, 4 * cfg.input_dim)).unwrap();
    let tokens = (0..4)
        .map(|i| {
            (0..6)
                .map(|p| if p >= 4 + i % 2 { 0 } else { r.gen_range(1..cfg.vocab as u32) })
                .collect()
        })
        .collect();
    let labels = Tensor::matrix(4, cfg.n_classes, (0..4 * cfg.n_classes).map(|_| f64::from(r.gen_range(0..2u8))).collect()).unwrap();
    Batch { image, tokens, labels }
}

/// Checks the gradient of a whole objective with respect to every parameter
/// of a model whose weights (final layers included) are random.
pub fn check_objective(objective: Objective, seed: u64, fault: Option<OpKind>) -> Result<FdReport> {
    let cfg = desk_config();
    let mut model = VkdModel::init(cfg.clone(), seed)?;
    let mut r = rng::rng(&[0x9A, seed]);
    for p in model.params_mut() {
        for x in p.value.data_mut() {
            *x = r.gen_range(-0.6..0.6);
        }
    }
    let batch = desk_batch(seed);
    let template = model.clone();
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let noise = {
        let mut r = rng::rng(&[0xE5, seed]);
        let mut draw = || Tensor::matrix(4, cfg.latent_dim, rng::standard_normal(&mut r, 4 * cfg.latent_dim)).unwrap();
        Noise::Explicit {
            image: vec![draw(), draw()],
            text: vec![draw(), draw()],
        }
    };
    let opts = LossOptions {
        mc_m: 2,
        mc_l: 2,
        beta: 0.7,
        noise,
        ctx: ForwardCtx::train(seed, 3),
    };
    check_with_fault(
        move |g, vars| {
            let bound = crate::model::BoundParams::from_vars(vars.to_vec());
            Ok(objective_loss(g, &bound, &template, &batch, objective, &opts)?.total)
        },
        &params,
        DEFAULT_STEP,
        fault,
    )
}

fn check_kl(trial: u64, fault: Option<OpKind>) -> Result<FdReport> {
    let mut r = rng::rng(&[0x4B, trial]);
    let n = r.gen_range(1..=3);
    let d = r.gen_range(1..=4);
    let params: Vec<Tensor> = (0..4).map(|i| uniform(&mut r, &[n, d], if i % 2 == 0 { -1.5 } else { -2.0 }, 1.5)).collect();
    check_with_fault(
        |g, v| {
            let q = GaussianVar::from_parts(g, v[0], v[1])?;
            let p = GaussianVar::from_parts(g, v[2], v[3])?;
            kl_divergence(g, q, p)
        },
        &params,
        DEFAULT_STEP,
        fault,
    )
}

/// Runs every op family (`trials` random instances each), the closed-form
/// KL, and the three objectives on the desk batch.
pub fn run_suite(trials: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for kind in OpKind::ALL {
        let reports = (0..trials)
            .map(|t| {
                let (params, f) = op_case(kind, t);
                check_with_fault(f, &params, DEFAULT_STEP, fault)
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(worst_of(kind.name(), reports));
    }
    let kl = (0..trials).map(|t| check_kl(t, fault)).collect::<Result<Vec<_>>>()?;
    entries.push(worst_of("kl_divergence", kl));
    for objective in [Objective::Vkd, Objective::VkdNoMi, Objective::Cvi] {
        let r = check_objective(objective, 1, fault)?;
        entries.push(worst_of(&format!("loss_{}", objective.name()), vec![r]));
    }
    Ok(SuiteReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let p = vec![Tensor::matrix(2, 2, vec![0.5, -1.5, 2.0, 3.0]).unwrap()];
        let r = finite_difference_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn step_must_be_in_range() {
        let p = vec![Tensor::scalar(1.0)];
        let f = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        assert!(finite_difference_check(f, &p, 0.0).is_err());
        assert!(finite_difference_check(f, &p, 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        // log(x) at x = 5e-6: the minus probe lands on a negative argument
        let p = vec![Tensor::vector(vec![1.0, 5e-6]).unwrap()];
        let err = finite_difference_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { param: 0, index: 1 }), "{err}");
    }

    #[test]
    fn sigmoid_dot_product_example() {
        let p = vec![Tensor::vector(vec![0.2, -0.1]).unwrap()];
        let v = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let r = finite_difference_check(
            move |g, w| {
                let vv = g.constant(v.clone());
                let prod = g.mul(w[0], vv)?;
                let s = g.sum(prod);
                Ok(g.sigmoid(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn every_family_passes_quick_suite() {
        let rep = run_suite(10, None).unwrap();
        for e in &rep.entries {
            assert!(e.worst.max_rel_error < TOLERANCE, "{}: {:?}", e.family, e.worst);
        }
    }

    #[test]
    fn corrupted_rule_is_detected() {
        for kind in [OpKind::Softplus, OpKind::MatMul, OpKind::Dropout] {
            let rep = run_suite(5, Some(kind)).unwrap();
            assert!(!rep.passed(), "fault in {kind} went unnoticed");
            let e = rep.entries.iter().find(|e| e.family == kind.name()).unwrap();
            assert!(e.worst.max_rel_error > TOLERANCE);
        }
    }
}

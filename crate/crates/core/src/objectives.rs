//! Training objectives and the cyclical KL annealing schedule.
//!
//! All losses are minimization targets (negated bounds). The full objective
//! for a batch of `N` pairs is
//!
//! ```text
//! image_ce + text_ce + beta * kl
//! image_ce = mean_n (1/M) sum_m BCE(y_n, head_I(feature_n, z_I^(m)))   z_I ~ p(z_I | x_I)
//! text_ce  = mean_n (1/L) sum_l BCE(y_n, head_T(z_T^(l)))              z_T ~ q(z_T | x_T)
//! kl       = mean_n KL[q(z_T | x_T^n) || p(z_I | x_I^n)]               (closed form)
//! ```

use std::fmt;

use crate::data::Batch;
use crate::distributions::{kl_divergence, reparam_sample, GaussianVar};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ForwardCtx, VkdModel};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampFn {
    /// `g(tau) = tau / R`
    Linear,
    /// `g(tau) = (1 - cos(pi tau / R)) / 2`
    Cosine,
}

impl RampFn {
    pub fn name(self) -> &'static str {
        match self {
            RampFn::Linear => "linear",
            RampFn::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(RampFn::Linear),
            "cosine" => Some(RampFn::Cosine),
            _ => None,
        }
    }
}

/// Cyclical KL weight: `C` ramps per `T` iterations, each ramp rising over
/// the first fraction `R` of its cycle and then holding at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub iters_per_epoch: usize,
    pub cycles: usize,
    pub ramp: f64,
    pub ramp_fn: RampFn,
}

impl AnnealSchedule {
    pub fn new(iters_per_epoch: usize, cycles: usize, ramp: f64, ramp_fn: RampFn) -> Result<Self> {
        if cycles == 0 || iters_per_epoch < cycles {
            return Err(Error::invalid(format!(
                "annealing needs T >= C >= 1, got T={iters_per_epoch} C={cycles}"
            )));
        }
        if !(ramp > 0.0 && ramp <= 1.0) {
            return Err(Error::invalid(format!("ramp fraction {ramp} outside (0, 1]")));
        }
        Ok(AnnealSchedule {
            iters_per_epoch,
            cycles,
            ramp,
            ramp_fn,
        })
    }

    /// Iterations per cycle as used in the modulus, `floor(T / C)`.
    pub fn period(&self) -> usize {
        self.iters_per_epoch / self.cycles
    }

    /// KL weight at 1-based iteration `t`.
    pub fn beta_at(&self, t: u64) -> Result<f64> {
        if t == 0 {
            return Err(Error::invalid("iterations are counted from 1"));
        }
        let cycle_len = self.iters_per_epoch as f64 / self.cycles as f64;
        let tau = ((t - 1) % self.period() as u64) as f64 / cycle_len;
        if tau > self.ramp {
            return Ok(1.0);
        }
        let x = tau / self.ramp;
        Ok(match self.ramp_fn {
            RampFn::Linear => x,
            RampFn::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * x).cos()),
        }
        .clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Both cross entropies plus the annealed KL between posterior and prior.
    Vkd,
    /// As `Vkd` without the text-branch cross entropy.
    VkdNoMi,
    /// Image branch only: no text, no KL.
    Cvi,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Vkd => "vkd",
            Objective::VkdNoMi => "vkd_no_mi",
            Objective::Cvi => "cvi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vkd" => Some(Objective::Vkd),
            "vkd_no_mi" => Some(Objective::VkdNoMi),
            "cvi" => Some(Objective::Cvi),
            _ => None,
        }
    }

    /// Loss of a freshly initialized model: `ln 2` per class per active branch.
    pub fn initial_loss(self, n_classes: usize) -> f64 {
        let branches = match self {
            Objective::Vkd => 2.0,
            Objective::VkdNoMi | Objective::Cvi => 1.0,
        };
        branches * n_classes as f64 * std::f64::consts::LN_2
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub image_ce: f64,
    pub text_ce: f64,
    pub kl: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.image_ce, self.text_ce, self.kl].iter().all(|x| x.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} image_ce={} text_ce={} kl={} beta={}",
            self.total, self.image_ce, self.text_ce, self.kl, self.beta
        )
    }
}

/// Where the reparameterization noise comes from.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Draw `eps` from counter-based streams under this seed.
    Seeded(u64),
    /// Use these `[B, latent]` tensors, one per Monte Carlo sample.
    Explicit { image: Vec<Tensor>, text: Vec<Tensor> },
}

impl Noise {
    fn draw(&self, stream: u64, index: usize, rows: usize, cols: usize) -> Result<Tensor> {
        match self {
            Noise::Seeded(seed) => {
                let mut r = rng::rng(&[*seed, stream, index as u64]);
                Tensor::matrix(rows, cols, rng::standard_normal(&mut r, rows * cols))
            }
            Noise::Explicit { image, text } => {
                let pool = if stream == rng::STREAM_IMAGE_NOISE { image } else { text };
                pool.get(index)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("explicit noise missing sample {index}")))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOptions {
    pub mc_m: usize,
    pub mc_l: usize,
    pub beta: f64,
    pub noise: Noise,
    pub ctx: ForwardCtx,
}

impl LossOptions {
    pub fn new(beta: f64, noise_seed: u64, ctx: ForwardCtx) -> Self {
        LossOptions {
            mc_m: 1,
            mc_l: 1,
            beta,
            noise: Noise::Seeded(noise_seed),
            ctx,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mc_m == 0 || self.mc_l == 0 {
            return Err(Error::invalid("Monte Carlo sample counts must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Graph handles of one loss evaluation. Terms an objective does not use are
/// `None` and count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub image_ce: Var,
    pub text_ce: Option<Var>,
    pub kl: Option<Var>,
    pub beta: f64,
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            total: g.value(self.total).item(),
            image_ce: g.value(self.image_ce).item(),
            text_ce: v(self.text_ce),
            kl: v(self.kl),
            beta: self.beta,
        }
    }
}

/// Multi-label binary cross entropy from logits, summed over classes and
/// averaged over the batch: `softplus(l) - y * l` per entry, which stays
/// finite for any finite logit.
pub fn multilabel_ce(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    if g.shape(logits) != labels.shape() {
        return Err(Error::shape("multilabel_ce", g.shape(logits), labels.shape()));
    }
    let rows = labels.rows() as f64;
    let y = g.constant(labels.clone());
    let sp = g.softplus(logits);
    let yl = g.mul(y, logits)?;
    let per = g.sub(sp, yl)?;
    let total = g.sum(per);
    Ok(g.scale(total, 1.0 / rows))
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn image_branch_ce(
    g: &mut Graph,
    p: &BoundParams,
    model: &VkdModel,
    batch: &Batch,
    opts: &LossOptions,
) -> Result<(Var, GaussianVar)> {
    let enc = model.encode_image(g, p, &batch.image, opts.ctx)?;
    let (rows, latent) = (batch.len(), model.config().latent_dim);
    let mut ces = Vec::with_capacity(opts.mc_m);
    for m in 0..opts.mc_m {
        let eps = opts.noise.draw(rng::STREAM_IMAGE_NOISE, m, rows, latent)?;
        let z = reparam_sample(g, enc.prior, &eps)?;
        let logits = model.classify_image_branch(g, p, enc.feature, z, opts.ctx)?;
        ces.push(multilabel_ce(g, logits, &batch.labels)?);
    }
    Ok((mean_of(g, &ces)?, enc.prior))
}

/// The distillation objective. With `with_mi == false` the text-branch cross
/// entropy is left out entirely (the "no MI" ablation).
pub fn vkd_loss(
    g: &mut Graph,
    p: &BoundParams,
    model: &VkdModel,
    batch: &Batch,
    opts: &LossOptions,
    with_mi: bool,
) -> Result<LossGraph> {
    opts.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (image_ce, prior) = image_branch_ce(g, p, model, batch, opts)?;
    let posterior = model.encode_text(g, p, &batch.tokens, opts.ctx)?;

    let text_ce = if with_mi {
        let (rows, latent) = (batch.len(), model.config().latent_dim);
        let mut ces = Vec::with_capacity(opts.mc_l);
        for l in 0..opts.mc_l {
            let eps = opts.noise.draw(rng::STREAM_TEXT_NOISE, l, rows, latent)?;
            let z = reparam_sample(g, posterior, &eps)?;
            let logits = model.classify_text_branch(g, p, z, opts.ctx)?;
            ces.push(multilabel_ce(g, logits, &batch.labels)?);
        }
        Some(mean_of(g, &ces)?)
    } else {
        None
    };

    let kl_sum = kl_divergence(g, posterior, prior)?;
    let kl = g.scale(kl_sum, 1.0 / batch.len() as f64);

    let mut total = image_ce;
    if let Some(t) = text_ce {
        total = g.add(total, t)?;
    }
    let weighted = g.scale(kl, opts.beta);
    total = g.add(total, weighted)?;
    Ok(LossGraph {
        total,
        image_ce,
        text_ce,
        kl: Some(kl),
        beta: opts.beta,
    })
}

/// Image-only conditional objective: the image cross entropy with latents
/// drawn from the conditional prior, and no text or KL terms.
pub fn cvi_loss(g: &mut Graph, p: &BoundParams, model: &VkdModel, batch: &Batch, opts: &LossOptions) -> Result<LossGraph> {
    opts.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (image_ce, _) = image_branch_ce(g, p, model, batch, opts)?;
    Ok(LossGraph {
        total: image_ce,
        image_ce,
        text_ce: None,
        kl: None,
        beta: opts.beta,
    })
}

pub fn objective_loss(
    g: &mut Graph,
    p: &BoundParams,
    model: &VkdModel,
    batch: &Batch,
    objective: Objective,
    opts: &LossOptions,
) -> Result<LossGraph> {
    match objective {
        Objective::Vkd => vkd_loss(g, p, model, batch, opts, true),
        Objective::VkdNoMi => vkd_loss(g, p, model, batch, opts, false),
        Objective::Cvi => cvi_loss(g, p, model, batch, opts),
    }
}

/// Evaluates an objective without keeping the graph.
pub fn evaluate_loss(model: &VkdModel, batch: &Batch, objective: Objective, opts: &LossOptions) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    Ok(objective_loss(&mut g, &p, model, batch, objective, opts)?.breakdown(&g))
}

/// Single-sample ELBO of an unconditional latent-variable model with a
/// standard-normal prior: `log p(x | z) - KL[q(z | x) || N(0, I)]` with
/// `z = mu + sigma * eps`. `log_lik` maps a graph latent to `log p(x | z)`.
pub fn vae_elbo(
    g: &mut Graph,
    q: GaussianVar,
    eps: &Tensor,
    log_lik: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let z = reparam_sample(g, q, eps)?;
    let ll = log_lik(g, z)?;
    let shape = g.shape(q.mu).to_vec();
    let zero_mu = g.constant(Tensor::zeros(&shape));
    let zero_lv = g.constant(Tensor::zeros(&shape));
    let prior = GaussianVar {
        mu: zero_mu,
        log_var: zero_lv,
    };
    let kl = kl_divergence(g, q, prior)?;
    g.sub(ll, kl)
}

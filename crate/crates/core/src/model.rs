//! The two-branch network.
//!
//! Image branch: `x_I -> encoder -> feature -> prior MLP -> p(z_I | x_I)`,
//! and a head reading `concat(feature, z_I)`.
//! Text branch: `x_T -> embedding table -> masked mean pool -> encoder ->
//! posterior MLP -> q(z_T | x_T)`, and a head reading `z_T` alone.
//!
//! The image-side methods take no token input, so the inference path cannot
//! see text.

use crate::distributions::GaussianVar;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::data::PAD;
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Width of both hidden layers of the prior/posterior MLPs and of the
    /// hidden layer of each head.
    pub hidden: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            vocab: 256,
            embed_dim: 32,
            feature_dim: 64,
            latent_dim: 32,
            n_classes: 6,
            hidden: 64,
            dropout: 0.5,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("n_classes", self.n_classes),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout masks are seeded from `(seed, layer, step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardCtx { train: true, seed, step }
    }

    fn dropout_seed(&self, layer: u64) -> u64 {
        rng::mix(&[self.seed, layer, self.step])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    image_encoder: Dense,
    embedding: usize,
    text_encoder: Dense,
    prior: [Dense; 3],
    posterior: [Dense; 3],
    image_head: [Dense; 2],
    text_head: [Dense; 2],
}

// dropout site ids
const DROP_PRIOR: [u64; 2] = [1, 2];
const DROP_POSTERIOR: [u64; 2] = [3, 4];
const DROP_IMAGE_HEAD: u64 = 5;
const DROP_TEXT_HEAD: u64 = 6;

/// Parameter-name prefixes belonging to the text branch.
pub const TEXT_PREFIXES: [&str; 4] = ["text_embedding", "text_encoder.", "posterior.", "text_head."];

pub fn is_text_param(name: &str) -> bool {
    TEXT_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VkdModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Parameters placed on a graph, in the same order as [`VkdModel::params`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps graph leaves already laid out in [`VkdModel::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of the image encoder.
#[derive(Clone, Copy, Debug)]
pub struct ImageEncoding {
    pub feature: Var,
    pub prior: GaussianVar,
}

impl VkdModel {
    /// The parameter names and shapes a config implies, in storage order.
    pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut dense = |name: &str, i: usize, o: usize| {
            v.push((format!("{name}.w"), vec![i, o]));
            v.push((format!("{name}.b"), vec![o]));
        };
        let (f, h, l) = (c.feature_dim, c.hidden, c.latent_dim);
        dense("image_encoder", c.input_dim, f);
        dense("prior.l1", f, h);
        dense("prior.l2", h, h);
        dense("prior.out", h, 2 * l);
        dense("image_head.l1", f + l, h);
        dense("image_head.out", h, c.n_classes);
        dense("text_encoder", c.embed_dim, f);
        dense("posterior.l1", f, h);
        dense("posterior.l2", h, h);
        dense("posterior.out", h, 2 * l);
        dense("text_head.l1", l, h);
        dense("text_head.out", h, c.n_classes);
        v.push(("text_embedding".to_string(), vec![c.vocab, c.embed_dim]));
        v
    }

    fn layout() -> Layout {
        let d = |i: usize| Dense { w: 2 * i, b: 2 * i + 1 };
        Layout {
            image_encoder: d(0),
            prior: [d(1), d(2), d(3)],
            image_head: [d(4), d(5)],
            text_encoder: d(6),
            posterior: [d(7), d(8), d(9)],
            text_head: [d(10), d(11)],
            embedding: 24,
        }
    }

    /// Glorot-uniform hidden weights, zero biases, and all-zero final layers
    /// on the prior, posterior and both heads. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(&[rng::STREAM_INIT, seed]);
        let params = Self::param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let zero_init = name.ends_with(".b") || name.contains(".out.");
                let data = if zero_init {
                    vec![0.0; n]
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| r.gen_range(-bound..bound)).collect()
                };
                Param {
                    name,
                    value: Tensor::new(shape, data).expect("shape matches data"),
                }
            })
            .collect();
        Ok(VkdModel { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", p.name)));
            }
            if shape.as_slice() != p.value.shape() {
                if name == "prior.out.w" || name == "posterior.out.w" {
                    return Err(Error::LatentDimMismatch {
                        config: config.latent_dim,
                        checkpoint: p.value.cols() / 2,
                    });
                }
                return Err(Error::shape("load", shape, p.value.shape()));
            }
        }
        Ok(VkdModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Places every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on the graph as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    fn dense(&self, g: &mut Graph, p: &BoundParams, layer: Dense, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.vars[layer.w])?;
        g.add(y, p.vars[layer.b])
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    fn hidden(&self, g: &mut Graph, p: &BoundParams, layer: Dense, x: Var, ctx: ForwardCtx, site: u64) -> Result<Var> {
        let h = self.dense(g, p, layer, x)?;
        let h = self.act(g, h);
        g.dropout(h, self.config.dropout, ctx.train, ctx.dropout_seed(site))
    }

    /// Two hidden layers then a linear projection to `2 * latent_dim`
    /// (no dropout on the projection).
    fn gaussian_mlp(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        layers: [Dense; 3],
        x: Var,
        ctx: ForwardCtx,
        sites: [u64; 2],
    ) -> Result<GaussianVar> {
        let h = self.hidden(g, p, layers[0], x, ctx, sites[0])?;
        let h = self.hidden(g, p, layers[1], h, ctx, sites[1])?;
        let raw = self.dense(g, p, layers[2], h)?;
        GaussianVar::from_raw(g, raw, self.config.latent_dim)
    }

    /// Image features and the conditional prior `p(z_I | x_I)`.
    pub fn encode_image(&self, g: &mut Graph, p: &BoundParams, image: &Tensor, ctx: ForwardCtx) -> Result<ImageEncoding> {
        if image.rank() != 2 || image.cols() != self.config.input_dim {
            return Err(Error::shape("encode_image", image.shape(), &[self.config.input_dim]));
        }
        let l = Self::layout();
        let x = g.constant(image.clone());
        let f = self.dense(g, p, l.image_encoder, x)?;
        let feature = self.act(g, f);
        let prior = self.gaussian_mlp(g, p, l.prior, feature, ctx, DROP_PRIOR)?;
        Ok(ImageEncoding { feature, prior })
    }

    /// Row-normalized bag-of-tokens matrix `[B, V]` over non-padding tokens.
    /// An all-padding row stays zero.
    pub fn pooling_matrix(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let v = self.config.vocab;
        if tokens.is_empty() {
            return Err(Error::invalid("empty token batch"));
        }
        let mut m = vec![0.0; tokens.len() * v];
        for (b, seq) in tokens.iter().enumerate() {
            let mut counts = std::collections::BTreeMap::new();
            let mut n = 0usize;
            for (position, &t) in seq.iter().enumerate() {
                if t as usize >= v {
                    return Err(Error::TokenOutOfRange {
                        sample: b,
                        position,
                        token: t,
                        vocab: v,
                    });
                }
                if t != PAD {
                    *counts.entry(t as usize).or_insert(0usize) += 1;
                    n += 1;
                }
            }
            for (t, c) in counts {
                m[b * v + t] = c as f64 / n as f64;
            }
        }
        Tensor::matrix(tokens.len(), v, m)
    }

    /// The variational posterior `q(z_T | x_T)`.
    pub fn encode_text(&self, g: &mut Graph, p: &BoundParams, tokens: &[Vec<u32>], ctx: ForwardCtx) -> Result<GaussianVar> {
        let l = Self::layout();
        let pool = g.constant(self.pooling_matrix(tokens)?);
        let pooled = g.matmul(pool, p.vars[l.embedding])?;
        let f = self.dense(g, p, l.text_encoder, pooled)?;
        let feature = self.act(g, f);
        self.gaussian_mlp(g, p, l.posterior, feature, ctx, DROP_POSTERIOR)
    }

    /// Logits of `p(y | x_I, z_I)` from `concat(feature, z_I)`.
    pub fn classify_image_branch(&self, g: &mut Graph, p: &BoundParams, feature: Var, z: Var, ctx: ForwardCtx) -> Result<Var> {
        if g.value(z).cols() != self.config.latent_dim {
            return Err(Error::shape("classify_image_branch", g.shape(z), &[self.config.latent_dim]));
        }
        let l = Self::layout();
        let x = g.concat(feature, z)?;
        let h = self.hidden(g, p, l.image_head[0], x, ctx, DROP_IMAGE_HEAD)?;
        self.dense(g, p, l.image_head[1], h)
    }

    /// Logits of `q(y | z_T)`.
    pub fn classify_text_branch(&self, g: &mut Graph, p: &BoundParams, z: Var, ctx: ForwardCtx) -> Result<Var> {
        if g.value(z).cols() != self.config.latent_dim {
            return Err(Error::shape("classify_text_branch", g.shape(z), &[self.config.latent_dim]));
        }
        let l = Self::layout();
        let h = self.hidden(g, p, l.text_head[0], z, ctx, DROP_TEXT_HEAD)?;
        self.dense(g, p, l.text_head[1], h)
    }
}

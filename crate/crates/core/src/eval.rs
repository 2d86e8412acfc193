//! Image-only prediction and ROC AUC reporting.
//!
//! [`predict`] runs the image branch alone: latents are drawn from the
//! conditional prior and the head's sigmoid outputs are averaged over the
//! draws. Its signature takes no text.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::distributions::reparam_sample;
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, VkdModel};
use crate::rng;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_SAMPLES: usize = 8;

const CHUNK: usize = 512;

/// Per-sample class probabilities and prior means.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[N, K]`, each entry in `[0, 1]`
    pub probs: Tensor,
    /// `[N, latent_dim]`, the conditional-prior means
    pub latent_mean: Tensor,
}

/// Monte Carlo predictive probabilities with `n_samples` latent draws per
/// input. Draw `l` uses the same standard-normal vector for every row, so a
/// row's prediction does not depend on which other rows are in the call.
pub fn predict(model: &VkdModel, images: &Tensor, n_samples: usize, seed: u64) -> Result<Predictions> {
    if n_samples == 0 {
        return Err(Error::invalid("predict needs at least one latent sample"));
    }
    let latent = model.config().latent_dim;
    let noise: Vec<Vec<f64>> = (0..n_samples)
        .map(|l| rng::standard_normal(&mut rng::rng(&[rng::STREAM_PREDICT, seed, l as u64]), latent))
        .collect();
    predict_with_noise(model, images, &noise)
}

/// As [`predict`] with explicit per-draw noise vectors of length `latent_dim`.
pub fn predict_with_noise(model: &VkdModel, images: &Tensor, noise: &[Vec<f64>]) -> Result<Predictions> {
    let cfg = model.config();
    if images.rank() != 2 || images.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: format!("[N, {}]", cfg.input_dim),
            found: format!("{:?}", images.shape()),
        });
    }
    if noise.is_empty() || noise.iter().any(|e| e.len() != cfg.latent_dim) {
        return Err(Error::invalid("noise vectors must be nonempty and of length latent_dim"));
    }
    let n = images.rows();
    let mut probs = Vec::with_capacity(n * cfg.n_classes);
    let mut means = Vec::with_capacity(n * cfg.latent_dim);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = images.select_rows(chunk)?;
        let rows = chunk.len();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let ctx = ForwardCtx::eval();
        let enc = model.encode_image(&mut g, &p, &x, ctx)?;
        let mut acc = vec![0.0; rows * cfg.n_classes];
        for eps in noise {
            let eps = Tensor::matrix(rows, cfg.latent_dim, eps.repeat(rows))?;
            let z = reparam_sample(&mut g, enc.prior, &eps)?;
            let logits = model.classify_image_branch(&mut g, &p, enc.feature, z, ctx)?;
            let pr = g.sigmoid(logits);
            acc.iter_mut().zip(g.value(pr).data()).for_each(|(a, v)| *a += v);
        }
        probs.extend(acc.into_iter().map(|a| a / noise.len() as f64));
        means.extend_from_slice(g.value(enc.prior.mu).data());
    }
    Ok(Predictions {
        probs: Tensor::matrix(n, cfg.n_classes, probs)?,
        latent_mean: Tensor::matrix(n, cfg.latent_dim, means)?,
    })
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic, ties
/// counting one half. `None` when the labels hold a single class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of midranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes with no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes.
    pub macro_auc: f64,
    pub excluded: Vec<usize>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_scores(probs: &Tensor, ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty dataset"));
        }
        let k = ds.n_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|j| {
                let scores: Vec<f64> = (0..ds.len()).map(|i| probs.row(i)[j]).collect();
                auc(&scores, &ds.labels_for(j))
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::AllClassesUndefined);
        }
        Ok(EvalReport {
            macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
            excluded: (0..k).filter(|&j| per_class[j].is_none()).collect(),
            per_class,
            n_samples: ds.len(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,auc\n");
        for (j, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => writeln!(s, "{},{a:.17}", j + 1).unwrap(),
                None => writeln!(s, "{},NA", j + 1).unwrap(),
            }
        }
        writeln!(s, "macro,{:.17}", self.macro_auc).unwrap();
        s
    }
}

fn check_dims(model: &VkdModel, ds: &Dataset) -> Result<()> {
    let c = model.config();
    if c.input_dim != ds.input_dim || c.n_classes != ds.n_classes {
        return Err(Error::DimensionMismatch {
            expected: format!("d={} k={}", c.input_dim, c.n_classes),
            found: format!("d={} k={}", ds.input_dim, ds.n_classes),
        });
    }
    Ok(())
}

/// Predicts every sample from its image view and reports per-class AUC.
pub fn evaluate(model: &VkdModel, ds: &Dataset, n_samples: usize, seed: u64) -> Result<EvalReport> {
    check_dims(model, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let preds = predict(model, &ds.images()?, n_samples, seed)?;
    EvalReport::from_scores(&preds.probs, ds)
}

/// Mean over samples of the summed per-class binary cross entropy of
/// predicted probabilities.
pub fn mixture_ce(probs: &Tensor, ds: &Dataset) -> f64 {
    let mut total = 0.0;
    for (i, s) in ds.samples.iter().enumerate() {
        for (&p, &y) in probs.row(i).iter().zip(&s.labels) {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total / ds.len().max(1) as f64
}

pub fn predictions_csv(preds: &Predictions) -> String {
    let k = preds.probs.cols();
    let mut s = String::from("sample_id");
    for j in 1..=k {
        write!(s, ",p_{j}").unwrap();
    }
    s.push('\n');
    for i in 0..preds.probs.rows() {
        write!(s, "{i}").unwrap();
        for p in preds.probs.row(i) {
            write!(s, ",{p:.16e}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Prior means and labels, one row per sample: `z_1..z_L,y_1..y_K`.
pub fn latents_csv(model: &VkdModel, ds: &Dataset) -> Result<String> {
    check_dims(model, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot export latents of an empty dataset"));
    }
    let preds = predict(model, &ds.images()?, 1, 0)?;
    let (l, k) = (model.config().latent_dim, ds.n_classes);
    let mut header: Vec<String> = (1..=l).map(|j| format!("z_{j}")).collect();
    header.extend((1..=k).map(|j| format!("y_{j}")));
    let mut s = header.join(",");
    s.push('\n');
    for (i, sample) in ds.samples.iter().enumerate() {
        let mut fields: Vec<String> = preds.latent_mean.row(i).iter().map(|z| format!("{z:.16e}")).collect();
        fields.extend(sample.labels.iter().map(u8::to_string));
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn export_latents(model: &VkdModel, ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, latents_csv(model, ds)?)?;
    Ok(())
}

//! Synthetic paired-view data and the VKDS text format.
//!
//! Each sample has a latent concept vector `c ~ N(0, I_k)`. Labels are
//! half-space indicators `y_j = [w_j . c + b_j > 0]`. The image view is a
//! noisy linear mixture `A c + sigma * eta`. The text view is a short token
//! sequence: a "finding" token `j + 1` for each active label `j` (kept with
//! probability `keyword_prob`), then one token per concept coordinate that
//! hashes the coordinate index with the sign of `c_i`, then zero padding.
//! The text therefore carries near-direct label evidence that the image view
//! only offers through noise.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;

/// Mixing matrix entries are `N(0, MIXING_SCALE^2 / k)`, so each image
/// coordinate carries signal of variance `MIXING_SCALE^2`.
const MIXING_SCALE: f64 = 1.0;

const STREAM_WORLD: u64 = 0x3071D;
const STREAM_SAMPLE: u64 = 0x5A3;
const STREAM_TOKEN_HASH: u64 = 0x70C;

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_samples: usize,
    pub concept_dim: usize,
    pub input_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub image_noise: f64,
    pub keyword_prob: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_samples: 4000,
            concept_dim: 8,
            input_dim: 16,
            seq_len: 32,
            vocab: 256,
            n_classes: 6,
            image_noise: 2.0,
            keyword_prob: 0.9,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keyword_prob) {
            return Err(Error::invalid(format!(
                "keyword_prob {} outside [0, 1]",
                self.keyword_prob
            )));
        }
        if !(self.image_noise >= 0.0) {
            return Err(Error::invalid(format!("image_noise {} must be >= 0", self.image_noise)));
        }
        if self.concept_dim == 0 || self.input_dim == 0 || self.seq_len == 0 || self.n_classes == 0 {
            return Err(Error::invalid("generator dimensions must be >= 1"));
        }
        if self.n_classes + 1 > self.vocab {
            return Err(Error::invalid(format!(
                "vocab {} cannot hold padding plus {} finding tokens",
                self.vocab, self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image: Vec<f64>,
    pub tokens: Vec<u32>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub samples: Vec<PairedSample>,
}

/// A minibatch laid out for the model.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, D]`
    pub image: Tensor,
    pub tokens: Vec<Vec<u32>>,
    /// `[B, K]` of zeros and ones
    pub labels: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Dataset {
    pub fn empty(input_dim: usize, seq_len: usize, vocab: usize, n_classes: usize) -> Self {
        Dataset {
            input_dim,
            seq_len,
            vocab,
            n_classes,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..Dataset::empty(self.input_dim, self.seq_len, self.vocab, self.n_classes)
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut image = Vec::with_capacity(idx.len() * self.input_dim);
        let mut labels = Vec::with_capacity(idx.len() * self.n_classes);
        let mut tokens = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.samples[i];
            image.extend_from_slice(&s.image);
            labels.extend(s.labels.iter().map(|&b| f64::from(b)));
            tokens.push(s.tokens.clone());
        }
        Ok(Batch {
            image: Tensor::matrix(idx.len(), self.input_dim, image)?,
            tokens,
            labels: Tensor::matrix(idx.len(), self.n_classes, labels)?,
        })
    }

    /// All image views as one `[N, D]` tensor.
    pub fn images(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.input_dim, self.samples.iter().flat_map(|s| s.image.clone()).collect())
    }

    pub fn labels_for(&self, class: usize) -> Vec<u8> {
        self.samples.iter().map(|s| s.labels[class]).collect()
    }

    pub fn prevalence(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.n_classes)
            .map(|j| self.samples.iter().map(|s| f64::from(s.labels[j])).sum::<f64>() / n)
            .collect()
    }

    fn check_sample(&self, i: usize, s: &PairedSample) -> Result<()> {
        if s.image.len() != self.input_dim || s.tokens.len() != self.seq_len || s.labels.len() != self.n_classes {
            return Err(Error::invalid(format!("sample {i}: field widths do not match the dataset header")));
        }
        if let Some((position, &token)) = s.tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange {
                sample: i,
                position,
                token,
                vocab: self.vocab,
            });
        }
        if s.labels.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!("sample {i}: labels must be 0 or 1")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.samples.iter().enumerate().try_for_each(|(i, s)| self.check_sample(i, s))
    }
}

fn coordinate_token(spec: &GenSpec, coord: usize, positive: bool) -> Option<u32> {
    let first = spec.n_classes + 1;
    let room = spec.vocab - first;
    if room == 0 {
        return None;
    }
    let h = rng::mix(&[STREAM_TOKEN_HASH, coord as u64, u64::from(positive)]);
    Some((first + (h % room as u64) as usize) as u32)
}

/// Draws a dataset. Deterministic in `spec`.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, d, n_cls) = (spec.concept_dim, spec.input_dim, spec.n_classes);

    let mut world = rng::rng(&[spec.seed, STREAM_WORLD]);
    let scale = MIXING_SCALE / (k as f64).sqrt();
    let mixing: Vec<f64> = rng::standard_normal(&mut world, d * k).into_iter().map(|x| x * scale).collect();
    let hyperplanes = rng::standard_normal(&mut world, n_cls * k);
    let offsets = vec![0.0; n_cls];

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut r = rng::rng(&[spec.seed, STREAM_SAMPLE, i as u64]);
        let c = rng::standard_normal(&mut r, k);
        let eta = rng::standard_normal(&mut r, d);

        let labels: Vec<u8> = (0..n_cls)
            .map(|j| {
                let s: f64 = hyperplanes[j * k..(j + 1) * k].iter().zip(&c).map(|(w, ci)| w * ci).sum();
                u8::from(s + offsets[j] > 0.0)
            })
            .collect();

        let image: Vec<f64> = (0..d)
            .map(|row| {
                let sig: f64 = mixing[row * k..(row + 1) * k].iter().zip(&c).map(|(a, ci)| a * ci).sum();
                sig + spec.image_noise * eta[row]
            })
            .collect();

        let mut tokens = Vec::with_capacity(spec.seq_len);
        for (j, &y) in labels.iter().enumerate() {
            // draw regardless of the label so the stream layout is fixed
            let keep = r.gen::<f64>() < spec.keyword_prob;
            if y == 1 && keep {
                tokens.push(j as u32 + 1);
            }
        }
        for (coord, &ci) in c.iter().enumerate() {
            if let Some(t) = coordinate_token(spec, coord, ci > 0.0) {
                tokens.push(t);
            }
        }
        tokens.truncate(spec.seq_len);
        tokens.resize(spec.seq_len, PAD);

        samples.push(PairedSample { image, tokens, labels });
    }
    Ok(Dataset {
        input_dim: d,
        seq_len: spec.seq_len,
        vocab: spec.vocab,
        n_classes: n_cls,
        samples,
    })
}

/// Seeded permutation followed by a contiguous split into train/val/test.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n = ds.len();
    let perm = rng::permutation(n, &[rng::STREAM_SPLIT, seed]);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    Ok((
        ds.subset(&perm[..n_train]),
        ds.subset(&perm[n_train..n_train + n_val]),
        ds.subset(&perm[n_train + n_val..]),
    ))
}

// ---- VKDS file format --------------------------------------------------------

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(to_vkds(ds)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn to_vkds(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let mut out = String::new();
    writeln!(out, "vkds 1").unwrap();
    writeln!(
        out,
        "n={} d={} s={} v={} k={}",
        ds.len(),
        ds.input_dim,
        ds.seq_len,
        ds.vocab,
        ds.n_classes
    )
    .unwrap();
    for s in &ds.samples {
        let floats: Vec<String> = s.image.iter().map(|x| format!("{x:.16e}")).collect();
        let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        let bits: Vec<String> = s.labels.iter().map(u8::to_string).collect();
        writeln!(out, "{} | {} | {}", floats.join(" "), toks.join(" "), bits.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    from_vkds(BufReader::new(std::fs::File::open(path)?))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn header_field(line: usize, field: Option<&str>, key: &str) -> Result<usize> {
    let f = field.ok_or_else(|| parse_err(line, format!("missing `{key}=`")))?;
    let v = f
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected `{key}=<int>`, found `{f}`")))?;
    v.parse().map_err(|_| parse_err(line, format!("bad integer in `{f}`")))
}

pub fn from_vkds(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != "vkds 1" {
        return Err(parse_err(1, format!("expected `vkds 1`, found `{magic}`")));
    }
    let header = lines.next().transpose()?.ok_or_else(|| parse_err(2, "missing header line"))?;
    let mut fields = header.split_whitespace();
    let n = header_field(2, fields.next(), "n")?;
    let d = header_field(2, fields.next(), "d")?;
    let s = header_field(2, fields.next(), "s")?;
    let v = header_field(2, fields.next(), "v")?;
    let k = header_field(2, fields.next(), "k")?;
    if let Some(extra) = fields.next() {
        return Err(parse_err(2, format!("unexpected header field `{extra}`")));
    }

    let mut ds = Dataset::empty(d, s, v, k);
    ds.samples.reserve(n);
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 3;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if ds.len() == n {
            return Err(parse_err(line_no, format!("expected {n} samples, found more")));
        }
        let sections: Vec<&str> = line.split('|').collect();
        if sections.len() != 3 {
            return Err(parse_err(line_no, format!("expected 3 `|`-separated sections, found {}", sections.len())));
        }
        let image = parse_fields::<f64>(line_no, sections[0], d, "image")?;
        let tokens = parse_fields::<u32>(line_no, sections[1], s, "token")?;
        let labels = parse_fields::<u8>(line_no, sections[2], k, "label")?;
        if let Some((pos, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= v) {
            return Err(parse_err(line_no, format!("token {t} at position {pos} outside vocabulary of size {v}")));
        }
        if labels.iter().any(|&b| b > 1) {
            return Err(parse_err(line_no, "labels must be 0 or 1"));
        }
        ds.samples.push(PairedSample { image, tokens, labels });
    }
    if ds.len() != n {
        return Err(parse_err(ds.len() + 3, format!("expected {n} samples, found {}", ds.len())));
    }
    Ok(ds)
}

fn parse_fields<T: std::str::FromStr>(line: usize, text: &str, want: usize, what: &str) -> Result<Vec<T>> {
    let vals = text
        .split_whitespace()
        .map(|f| f.parse::<T>().map_err(|_| parse_err(line, format!("bad {what} value `{f}`"))))
        .collect::<Result<Vec<T>>>()?;
    if vals.len() != want {
        return Err(parse_err(line, format!("expected {want} {what} fields, found {}", vals.len())));
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec {
            n_samples: 50,
            seed: 4,
            ..GenSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(to_vkds(&a).unwrap(), to_vkds(&b).unwrap());
        let c = generate(&GenSpec { seed: 5, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_have_header_widths() {
        let ds = generate(&small()).unwrap();
        ds.validate().unwrap();
        for s in &ds.samples {
            // findings come first, then coordinates, then padding
            let n_find = s.tokens.iter().take_while(|&&t| t >= 1 && t as usize <= ds.n_classes).count();
            for &t in &s.tokens[..n_find] {
                assert_eq!(s.labels[t as usize - 1], 1);
            }
            assert!(s.tokens[n_find..n_find + 8].iter().all(|&t| t as usize > ds.n_classes));
            assert!(s.tokens[n_find + 8..].iter().all(|&t| t == PAD));
        }
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let spec = GenSpec { vocab: 6, ..small() };
        assert!(generate(&spec).is_err());
        let spec = GenSpec { vocab: 7, ..small() };
        let ds = generate(&spec).unwrap();
        assert!(ds.samples.iter().all(|s| s.tokens.iter().all(|&t| t < 7)));
    }

    #[test]
    fn bad_spec_values_are_rejected() {
        assert!(generate(&GenSpec { keyword_prob: 1.5, ..small() }).is_err());
        assert!(generate(&GenSpec { image_noise: -1.0, ..small() }).is_err());
    }

    #[test]
    fn vkds_roundtrip() {
        let ds = generate(&small()).unwrap();
        let text = to_vkds(&ds).unwrap();
        assert!(text.starts_with("vkds 1\nn=50 d=16 s=32 v=256 k=6\n"));
        assert_eq!(from_vkds(text.as_bytes()).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = from_vkds("vkds 1\nn=0 d=2 s=3 v=10 k=1\n".as_bytes()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.input_dim, 2);
    }

    #[test]
    fn truncated_file_names_counts() {
        let ds = generate(&small()).unwrap();
        let text = to_vkds(&ds).unwrap();
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        let err = from_vkds(cut.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("expected 50 samples, found 10"), "{err}");
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad_magic = from_vkds("vkds 2\n".as_bytes()).unwrap_err();
        assert!(matches!(bad_magic, Error::Parse { line: 1, .. }));
        let bad_header = from_vkds("vkds 1\nn=1 d=2 s=1 v=4\n".as_bytes()).unwrap_err();
        assert!(matches!(bad_header, Error::Parse { line: 2, .. }));
        let wrong_count = from_vkds("vkds 1\nn=1 d=2 s=1 v=4 k=1\n1.0 | 1 | 0\n".as_bytes()).unwrap_err();
        assert!(matches!(wrong_count, Error::Parse { line: 3, .. }), "{wrong_count}");
        let bad_token = from_vkds("vkds 1\nn=1 d=1 s=2 v=4 k=1\n1.0 | 1 4 | 0\n".as_bytes()).unwrap_err();
        let msg = bad_token.to_string();
        assert!(msg.contains("line 3") && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn split_fractions() {
        let ds = generate(&small()).unwrap();
        let (tr, va, te) = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (50, 0, 0));
        let mut a: Vec<String> = tr.samples.iter().map(|s| format!("{s:?}")).collect();
        let mut b: Vec<String> = ds.samples.iter().map(|s| format!("{s:?}")).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let (tr, va, te) = split(&ds, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (30, 10, 10));
        let (tr2, _, _) = split(&ds, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(tr, tr2);
        assert!(split(&ds, [0.6, 0.2, 0.1], 3).is_err());
    }
}

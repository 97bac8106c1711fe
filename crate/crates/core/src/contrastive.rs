//! Symmetric InfoNCE alignment, prompt-ensemble zero-shot classification and
//! a small linear dual encoder for desk-scale alignment runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, dot, l2_norm, softmax_in_place, Mat};
use crate::metrics::tokenize;
use crate::optim::{Adam, AdamState};
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Matched image/text embeddings: row `i` of each side is a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentBatch {
    pub image_embeddings: Mat,
    pub text_embeddings: Mat,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_image: Mat,
    pub grad_text: Mat,
}

fn normalize_rows(x: &Mat, what: &'static str) -> Result<(Mat, Vec<f64>)> {
    let norms: Vec<f64> = (0..x.rows()).map(|r| l2_norm(x.row(r))).collect();
    if let Some(r) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::NonFinite(format!("{what} row {r} has zero or non-finite norm")));
    }
    Ok((Mat::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] / norms[r]), norms))
}

/// Gradient through `u = x / |x|`.
fn normalize_backward(u: &Mat, norms: &[f64], du: &Mat) -> Mat {
    let mut out = Mat::zeros(u.rows(), u.cols());
    for r in 0..u.rows() {
        let proj = dot(u.row(r), du.row(r));
        for c in 0..u.cols() {
            out[(r, c)] = (du[(r, c)] - u[(r, c)] * proj) / norms[r];
        }
    }
    out
}

/// `½·[CE(rows of S/τ) + CE(columns of S/τ)]` with diagonal targets, where
/// `S` is the cosine-similarity matrix. Gradients are taken with respect to
/// the raw (unnormalised) embeddings.
pub fn contrastive_loss(batch: &AlignmentBatch) -> Result<ContrastiveOutput> {
    let (x, y, tau) = (&batch.image_embeddings, &batch.text_embeddings, batch.temperature);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {tau}")));
    }
    if x.shape() != y.shape() {
        return Err(Error::shape("contrastive batch", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    let b = x.rows();
    if b < 2 {
        return Err(Error::InvalidParameter(format!("contrastive batch needs >= 2 rows, got {b}")));
    }
    let (u, nu) = normalize_rows(x, "image embedding")?;
    let (v, nv) = normalize_rows(y, "text embedding")?;
    let mut logits = u.matmul_t(&v);
    logits.scale(1.0 / tau);

    let mut loss = 0.0;
    let mut d_logits = Mat::zeros(b, b);
    let w = 0.5 / b as f64;
    for i in 0..b {
        let mut p = logits.row(i).to_vec();
        let lse = softmax_in_place(&mut p);
        loss += lse - logits[(i, i)];
        for j in 0..b {
            d_logits[(i, j)] += w * (p[j] - f64::from(i == j));
        }
    }
    for j in 0..b {
        let mut p: Vec<f64> = (0..b).map(|i| logits[(i, j)]).collect();
        let lse = softmax_in_place(&mut p);
        loss += lse - logits[(j, j)];
        for i in 0..b {
            d_logits[(i, j)] += w * (p[i] - f64::from(i == j));
        }
    }
    loss *= w;
    let mut du = d_logits.matmul(&v);
    du.scale(1.0 / tau);
    let mut dv = d_logits.t_matmul(&u);
    dv.scale(1.0 / tau);
    Ok(ContrastiveOutput {
        loss,
        grad_image: normalize_backward(&u, &nu, &du),
        grad_text: normalize_backward(&v, &nv, &dv),
    })
}

/// Fraction of rows whose most similar text (cosine) is its own pair.
pub fn top1_retrieval(image_embeddings: &Mat, text_embeddings: &Mat) -> Result<f64> {
    let (u, _) = normalize_rows(image_embeddings, "image embedding")?;
    let (v, _) = normalize_rows(text_embeddings, "text embedding")?;
    let sims = u.matmul_t(&v);
    let hits = (0..sims.rows()).filter(|&i| argmax(sims.row(i)) == i).count();
    Ok(hits as f64 / sims.rows() as f64)
}

/// Two linear towers mapping image and text inputs into a shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDualEncoder {
    /// `embed_dim x image_dim`
    pub image_proj: Mat,
    /// `embed_dim x text_dim`
    pub text_proj: Mat,
}

impl LinearDualEncoder {
    pub fn new(image_dim: usize, text_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            image_proj: Mat::randn(embed_dim, image_dim, 1.0 / (image_dim as f64).sqrt(), &mut rng),
            text_proj: Mat::randn(embed_dim, text_dim, 1.0 / (text_dim as f64).sqrt(), &mut rng),
        }
    }

    pub fn embed_images(&self, x: &Mat) -> Mat {
        x.matmul_t(&self.image_proj)
    }

    pub fn embed_texts(&self, t: &Mat) -> Mat {
        t.matmul_t(&self.text_proj)
    }

    /// Mini-batch Adam on the symmetric contrastive loss. Returns the mean
    /// loss of each epoch.
    pub fn train(&mut self, images: &Mat, texts: &Mat, opts: &AlignmentTraining) -> Result<Vec<f64>> {
        if images.rows() != texts.rows() {
            return Err(Error::shape("dual encoder pairs", images.rows(), texts.rows()));
        }
        let adam = Adam::new(opts.learning_rate);
        let mut si = AdamState::new(self.image_proj.as_slice().len());
        let mut st = AdamState::new(self.text_proj.as_slice().len());
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..images.rows()).collect();
        let mut history = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(opts.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let xb = images.select_rows(chunk);
                let tb = texts.select_rows(chunk);
                let out = contrastive_loss(&AlignmentBatch {
                    image_embeddings: self.embed_images(&xb),
                    text_embeddings: self.embed_texts(&tb),
                    temperature: opts.temperature,
                })?;
                let gi = out.grad_image.t_matmul(&xb);
                let gt = out.grad_text.t_matmul(&tb);
                si.step(&adam, self.image_proj.as_mut_slice(), gi.as_slice());
                st.step(&adam, self.text_proj.as_mut_slice(), gt.as_slice());
                total += out.loss;
                batches += 1;
            }
            history.push(total / batches.max(1) as f64);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for AlignmentTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 50,
            learning_rate: 1e-2,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Prompt templates with a single `{}` slot, and the class names to fill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
    class_names: Vec<String>,
}

pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "An H&E image of {}",
    "This is an image of {} presented in the image",
    "An H&E patch of {}",
];

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>, class_names: Vec<String>) -> Result<Self> {
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::InvalidParameter(format!("template {t:?} must contain exactly one {{}} slot")));
        }
        if templates.is_empty() {
            return Err(Error::EmptyInput("prompt templates"));
        }
        if class_names.is_empty() {
            return Err(Error::EmptyInput("class names"));
        }
        Ok(Self { templates, class_names })
    }

    /// The three standard H&E templates.
    pub fn with_default_templates(class_names: Vec<String>) -> Result<Self> {
        Self::new(DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(), class_names)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn fill(&self, template: usize, class: usize) -> String {
        self.templates[template].replacen("{}", &self.class_names[class], 1)
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag-of-tokens stub: each token maps to a seeded Gaussian vector and a
/// text embeds to the sum over its tokens.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    pub seed: u64,
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashTextEncoder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17));
        Mat::randn(1, self.dim, 1.0, &mut rng).into_vec()
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for tok in tokenize(text) {
            for (o, v) in out.iter_mut().zip(self.token_vector(&tok)) {
                *o += v;
            }
        }
        out
    }
}

/// Per class: embed every filled template, L2-normalise, average, and
/// re-normalise. Returns a `classes x dim` matrix of unit rows.
pub fn class_prototypes(prompts: &PromptTemplateSet, encoder: &dyn TextEncoder) -> Result<Mat> {
    let dim = encoder.dim();
    let mut protos = Mat::zeros(prompts.class_names().len(), dim);
    for c in 0..prompts.class_names().len() {
        let mut acc = vec![0.0; dim];
        for t in 0..prompts.templates().len() {
            let e = encoder.embed(&prompts.fill(t, c));
            if e.len() != dim {
                return Err(Error::shape("text encoder output", dim, e.len()));
            }
            let n = l2_norm(&e);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of {:?}", prompts.fill(t, c))));
            }
            for (a, x) in acc.iter_mut().zip(&e) {
                *a += x / n;
            }
        }
        let k = prompts.templates().len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let n = l2_norm(&acc);
        if !(n > 0.0) {
            return Err(Error::NonFinite(format!("prototype for class {c}")));
        }
        protos.row_mut(c).iter_mut().zip(&acc).for_each(|(p, a)| *p = a / n);
    }
    Ok(protos)
}

/// Argmax cosine similarity against each prototype; ties go to the lowest
/// class index.
pub fn classify_with_prototypes(images: &Mat, prototypes: &Mat) -> Result<Vec<usize>> {
    if prototypes.rows() == 0 {
        return Err(Error::EmptyInput("class prototypes"));
    }
    if images.cols() != prototypes.cols() {
        return Err(Error::shape("zero-shot feature dim", prototypes.cols(), images.cols()));
    }
    let pnorm: Vec<f64> = (0..prototypes.rows()).map(|c| l2_norm(prototypes.row(c))).collect();
    Ok((0..images.rows())
        .map(|i| {
            let x = images.row(i);
            let sims: Vec<f64> = (0..prototypes.rows())
                .map(|c| {
                    if pnorm[c] > 0.0 {
                        dot(x, prototypes.row(c)) / pnorm[c]
                    } else {
                        0.0
                    }
                })
                .collect();
            argmax(&sims)
        })
        .collect())
}

pub fn zero_shot_classify(images: &Mat, prompts: &PromptTemplateSet, encoder: &dyn TextEncoder) -> Result<Vec<usize>> {
    classify_with_prototypes(images, &class_prototypes(prompts, encoder)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub class_names: Vec<String>,
    /// Recall per class; `None` when the class has no labelled samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub balanced_accuracy: f64,
}

/// Plain and balanced accuracy plus per-class recall.
pub fn accuracy_report(class_names: &[String], predictions: &[usize], labels: &[usize]) -> Result<ZeroShotReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("labels", predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let k = class_names.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParameter(format!("label {bad} out of range for {k} classes")));
    }
    let mut hit = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| (seen[c] > 0).then(|| hit[c] as f64 / seen[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ZeroShotReport {
        class_names: class_names.to_vec(),
        overall_accuracy: hit.iter().sum::<usize>() as f64 / labels.len() as f64,
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class_accuracy: per_class,
    })
}

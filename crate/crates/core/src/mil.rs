//! Gated-attention multiple-instance learning head (ABMIL).
//!
//! ```text
//! h_i = ReLU(W_r x_i + b_r)                     (256-wide)
//! s_i = w · (tanh(V h_i + b_v) ⊙ sigmoid(U h_i + b_u)) + c
//! a   = softmax(s)
//! z   = Σ a_i h_i
//! y   = W_c z + b_c
//! ```

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::accuracy_report;
use crate::linalg::{argmax, dot, softmax_in_place, Mat};
use crate::optim::{Adam, AdamState};
use crate::synthetic::Bag;
use crate::{Error, Result};

pub const REDUCED_DIM: usize = 256;
pub const DEFAULT_ATTENTION_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct MilHead {
    /// `hidden x in_dim`
    pub w_reduce: Mat,
    pub b_reduce: Vec<f64>,
    /// tanh branch, `attn x hidden`
    pub w_tanh: Mat,
    pub b_tanh: Vec<f64>,
    /// sigmoid branch, `attn x hidden`
    pub w_gate: Mat,
    pub b_gate: Vec<f64>,
    pub w_score: Vec<f64>,
    pub b_score: f64,
    /// `classes x hidden`
    pub w_cls: Mat,
    pub b_cls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    /// Reduced instance features `h_i` (`N x hidden`).
    pub reduced: Mat,
    pub pooled: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::rand_uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl MilHead {
    pub fn new(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self::with_dims(in_dim, REDUCED_DIM, DEFAULT_ATTENTION_DIM, num_classes, seed)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn with_dims(in_dim: usize, hidden: usize, attn: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_score = xavier(1, attn, &mut rng).into_vec();
        Self {
            w_reduce: xavier(hidden, in_dim, &mut rng),
            b_reduce: vec![0.0; hidden],
            w_tanh: xavier(attn, hidden, &mut rng),
            b_tanh: vec![0.0; attn],
            w_gate: xavier(attn, hidden, &mut rng),
            b_gate: vec![0.0; attn],
            w_score,
            b_score: 0.0,
            w_cls: xavier(num_classes, hidden, &mut rng),
            b_cls: vec![0.0; num_classes],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_reduce.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w_cls.rows()
    }

    /// Flat views over every parameter tensor, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w_reduce.as_slice(),
            &self.b_reduce,
            self.w_tanh.as_slice(),
            &self.b_tanh,
            self.w_gate.as_slice(),
            &self.b_gate,
            &self.w_score,
            std::slice::from_ref(&self.b_score),
            self.w_cls.as_slice(),
            &self.b_cls,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_reduce.as_mut_slice(),
            &mut self.b_reduce,
            self.w_tanh.as_mut_slice(),
            &mut self.b_tanh,
            self.w_gate.as_mut_slice(),
            &mut self.b_gate,
            &mut self.w_score,
            std::slice::from_mut(&mut self.b_score),
            self.w_cls.as_mut_slice(),
            &mut self.b_cls,
        ]
    }

    fn check_bag(&self, bag: &Mat) -> Result<()> {
        if bag.rows() == 0 {
            return Err(Error::EmptyInput("MIL bag"));
        }
        if bag.cols() != self.in_dim() {
            return Err(Error::shape("MIL bag dim", self.in_dim(), bag.cols()));
        }
        Ok(())
    }

    pub fn forward(&self, bag: &Mat) -> Result<MilOutput> {
        self.check_bag(bag)?;
        Ok(self.forward_full(bag).0)
    }

    /// Returns the output plus the tanh and sigmoid branch activations.
    fn forward_full(&self, bag: &Mat) -> (MilOutput, Mat, Mat) {
        let mut reduced = bag.matmul_t(&self.w_reduce);
        reduced.add_row_vector(&self.b_reduce);
        reduced.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut t = reduced.matmul_t(&self.w_tanh);
        t.add_row_vector(&self.b_tanh);
        let t = t.map(f64::tanh);
        let mut g = reduced.matmul_t(&self.w_gate);
        g.add_row_vector(&self.b_gate);
        let g = g.map(sigmoid);
        let mut attention: Vec<f64> = (0..bag.rows())
            .map(|i| {
                let gated: Vec<f64> = t.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).collect();
                dot(&self.w_score, &gated) + self.b_score
            })
            .collect();
        softmax_in_place(&mut attention);
        let mut pooled = vec![0.0; reduced.cols()];
        for (i, &a) in attention.iter().enumerate() {
            for (p, &h) in pooled.iter_mut().zip(reduced.row(i)) {
                *p += a * h;
            }
        }
        let logits = (0..self.num_classes())
            .map(|c| dot(self.w_cls.row(c), &pooled) + self.b_cls[c])
            .collect();
        (
            MilOutput {
                logits,
                attention,
                reduced,
                pooled,
            },
            t,
            g,
        )
    }

    /// Gradients of `Σ d_logits[c] · logits[c]`, in [`Self::params`] order.
    pub fn backward(&self, bag: &Mat, d_logits: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_bag(bag)?;
        if d_logits.len() != self.num_classes() {
            return Err(Error::shape("MIL d_logits", self.num_classes(), d_logits.len()));
        }
        let (out, t, g) = self.forward_full(bag);
        let n = bag.rows();
        let hidden = out.reduced.cols();
        let attn = self.w_score.len();

        let mut w_cls = Mat::zeros(self.num_classes(), hidden);
        let mut d_pooled = vec![0.0; hidden];
        for c in 0..self.num_classes() {
            for j in 0..hidden {
                w_cls[(c, j)] = d_logits[c] * out.pooled[j];
                d_pooled[j] += d_logits[c] * self.w_cls[(c, j)];
            }
        }
        let b_cls = d_logits.to_vec();

        // pooled = Σ a_i h_i
        let mut d_h = Mat::zeros(n, hidden);
        let da: Vec<f64> = (0..n).map(|i| dot(&d_pooled, out.reduced.row(i))).collect();
        for i in 0..n {
            for j in 0..hidden {
                d_h[(i, j)] = out.attention[i] * d_pooled[j];
            }
        }
        let inner = dot(&da, &out.attention);
        let ds: Vec<f64> = (0..n).map(|i| out.attention[i] * (da[i] - inner)).collect();

        let mut w_score = vec![0.0; attn];
        let b_score: f64 = ds.iter().sum();
        let mut d_tpre = Mat::zeros(n, attn);
        let mut d_gpre = Mat::zeros(n, attn);
        for i in 0..n {
            for k in 0..attn {
                let (tk, gk) = (t[(i, k)], g[(i, k)]);
                w_score[k] += ds[i] * tk * gk;
                let d_gated = ds[i] * self.w_score[k];
                d_tpre[(i, k)] = d_gated * gk * (1.0 - tk * tk);
                d_gpre[(i, k)] = d_gated * tk * gk * (1.0 - gk);
            }
        }
        let w_tanh = d_tpre.t_matmul(&out.reduced);
        let w_gate = d_gpre.t_matmul(&out.reduced);
        d_h.add_assign(&d_tpre.matmul(&self.w_tanh));
        d_h.add_assign(&d_gpre.matmul(&self.w_gate));
        // ReLU
        for (d, &h) in d_h.as_mut_slice().iter_mut().zip(out.reduced.as_slice()) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let w_reduce = d_h.t_matmul(bag);
        Ok(vec![
            w_reduce.into_vec(),
            d_h.column_sums(),
            w_tanh.into_vec(),
            d_tpre.column_sums(),
            w_gate.into_vec(),
            d_gpre.column_sums(),
            w_score,
            vec![b_score],
            w_cls.into_vec(),
            b_cls,
        ])
    }

    pub fn predict(&self, bag: &Mat) -> Result<(usize, f64)> {
        let mut p = self.forward(bag)?.logits;
        softmax_in_place(&mut p);
        let c = argmax(&p);
        Ok((c, p[c]))
    }
}

pub fn mil_forward(head: &MilHead, bag: &Mat) -> Result<MilOutput> {
    head.forward(bag)
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    let lse = softmax_in_place(&mut p);
    let loss = lse - logits[label];
    p[label] -= 1.0;
    (loss, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MilTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MilTrainResult {
    pub head: MilHead,
    pub best_head: MilHead,
    pub best_epoch: usize,
    pub best_balanced_accuracy: f64,
    /// Validation balanced accuracy after each epoch.
    pub history: Vec<f64>,
}

pub fn balanced_accuracy(head: &MilHead, bags: &[Bag]) -> Result<f64> {
    let names: Vec<String> = (0..head.num_classes()).map(|c| c.to_string()).collect();
    let mut pred = Vec::with_capacity(bags.len());
    for b in bags {
        pred.push(head.predict(&b.features)?.0);
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    Ok(accuracy_report(&names, &pred, &labels)?.balanced_accuracy)
}

/// Batch size 1, Adam without weight decay at a fixed learning rate. The
/// returned `best_head` is the epoch with the highest validation balanced
/// accuracy (earliest on ties).
pub fn mil_train(head: MilHead, train: &[Bag], validation: &[Bag], opts: &MilTraining) -> Result<MilTrainResult> {
    let k = head.num_classes();
    if let Some(b) = train.iter().chain(validation).find(|b| b.label >= k) {
        return Err(Error::InvalidParameter(format!("label {} out of range for {k} classes", b.label)));
    }
    let distinct = train.iter().map(|b| b.label).collect::<std::collections::BTreeSet<_>>();
    if distinct.len() < 2 {
        return Err(Error::SingleClass);
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("MIL validation set"));
    }
    let adam = Adam::new(opts.learning_rate);
    let mut head = head;
    let mut states: Vec<AdamState> = head.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (head.clone(), 0usize, f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let bag = &train[i];
            let out = head.forward(&bag.features)?;
            let (_, d_logits) = cross_entropy(&out.logits, bag.label);
            let grads = head.backward(&bag.features, &d_logits)?;
            for ((p, g), st) in head.params_mut().into_iter().zip(&grads).zip(&mut states) {
                st.step(&adam, p, g);
            }
        }
        let acc = balanced_accuracy(&head, validation)?;
        if head.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("MIL weights after epoch {epoch}")));
        }
        history.push(acc);
        if acc > best.2 {
            best = (head.clone(), epoch, acc);
        }
    }
    Ok(MilTrainResult {
        head,
        best_head: best.0,
        best_epoch: best.1,
        best_balanced_accuracy: best.2,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilPrediction {
    pub slide_id: String,
    pub predicted_class: usize,
    pub confidence: f64,
}

/// CSV with header `slide_id,predicted_class,confidence`.
pub fn write_predictions_csv(preds: &[MilPrediction], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in preds {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_predictions_csv(r: impl Read) -> Result<Vec<MilPrediction>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

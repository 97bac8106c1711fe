//! Few-shot linear probing on frozen features.
//!
//! For every seed and shot count `N`, `N` samples per class are drawn
//! without replacement, an affine classifier is trained with AdamW, and the
//! best per-epoch accuracy on the held-out set is recorded. Model selection
//! on the evaluation set is optimistic; it is kept because published probe
//! numbers are produced this way.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, softmax_in_place, Mat};
use crate::optim::{Adam, AdamState};
use crate::{par_map, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeProtocol {
    pub shots: Vec<usize>,
    pub seeds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProbeProtocol {
    fn default() -> Self {
        Self {
            shots: vec![2, 8, 16, 32, 64, 128],
            seeds: 10,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 0.01,
        }
    }
}

impl ProbeProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::InvalidParameter("shots must be non-empty and positive".into()));
        }
        if self.shots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("shots must be strictly ascending".into()));
        }
        if self.seeds == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("seeds, epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub dataset: String,
    pub shot: usize,
    pub seed: usize,
    pub accuracy: f64,
}

/// Labelled evaluation data used instead of the training remainder.
pub struct TestSplit<'a> {
    pub features: &'a Mat,
    pub labels: &'a [usize],
}

/// Softmax regression trained with mini-batch AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `classes x dim`
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    /// `nn.Linear`-style uniform init in `±1/sqrt(dim)`.
    pub fn new(dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weights: Mat::rand_uniform(classes, dim, 1.0 / (dim as f64).sqrt(), rng),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let mut z = x.matmul_t(&self.weights);
        z.add_row_vector(&self.bias);
        z
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows()).map(|r| argmax(z.row(r))).collect()
    }

    /// Mean cross-entropy gradient on a batch.
    fn grads(&self, x: &Mat, y: &[usize]) -> (Mat, Vec<f64>) {
        let mut p = self.logits(x);
        let n = x.rows() as f64;
        for r in 0..p.rows() {
            softmax_in_place(p.row_mut(r));
            p[(r, y[r])] -= 1.0;
        }
        p.scale(1.0 / n);
        (p.t_matmul(x), p.column_sums())
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

fn stream_seed(seed: usize, salt: u64) -> u64 {
    (seed as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Trains on `train` and returns the best accuracy on `test` over epochs.
#[allow(clippy::too_many_arguments)]
fn run_one(x: &Mat, y: &[usize], train: &[usize], test_x: &Mat, test_y: &[usize], classes: usize, p: &ProbeProtocol, seed: usize, shot: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xC1A5 ^ (shot as u64) << 20));
    let mut clf = LinearClassifier::new(x.cols(), classes, &mut rng);
    let adam = Adam {
        weight_decay: p.weight_decay,
        ..Adam::new(p.learning_rate)
    };
    let mut sw = AdamState::new(clf.weights.as_slice().len());
    let mut sb = AdamState::new(classes);
    let mut order = train.to_vec();
    let mut best = 0.0f64;
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(p.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (gw, gb) = clf.grads(&xb, &yb);
            sw.step(&adam, clf.weights.as_mut_slice(), gw.as_slice());
            sb.step(&adam, &mut clf.bias, &gb);
        }
        best = best.max(accuracy(&clf.predict(test_x), test_y));
    }
    best
}

/// Runs the full shots x seeds grid. Records are sorted by `(shot, seed)`.
///
/// Seed `s` fixes a per-class shuffle, and shot `N` takes its first `N`
/// entries, so larger shot sets contain the smaller ones.
pub fn linear_probe(
    dataset: &str,
    features: &Mat,
    labels: &[usize],
    protocol: &ProbeProtocol,
    test: Option<TestSplit<'_>>,
) -> Result<Vec<ProbeRecord>> {
    protocol.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::shape("probe labels", features.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("probe features"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    if let Some(t) = &test {
        if t.features.rows() != t.labels.len() || t.features.cols() != features.cols() {
            return Err(Error::shape("probe test split", features.cols(), t.features.cols()));
        }
        if t.labels.iter().any(|&l| l >= classes) {
            return Err(Error::InvalidParameter("test label not present in training data".into()));
        }
    }
    let max_shot = *protocol.shots.last().unwrap();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < max_shot {
            return Err(Error::InsufficientSamples {
                class: c,
                have: idx.len(),
                need: max_shot,
            });
        }
    }
    if test.is_none() && by_class.iter().all(|idx| idx.len() == max_shot) {
        return Err(Error::InsufficientSamples {
            class: 0,
            have: by_class[0].len(),
            need: max_shot + 1,
        });
    }

    let shuffles: Vec<Vec<Vec<usize>>> = (0..protocol.seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x5A3E));
            by_class
                .iter()
                .map(|idx| {
                    let mut v = idx.clone();
                    v.shuffle(&mut rng);
                    v
                })
                .collect()
        })
        .collect();
    let jobs: Vec<(usize, usize)> = protocol
        .shots
        .iter()
        .flat_map(|&shot| (0..protocol.seeds).map(move |seed| (shot, seed)))
        .collect();
    let records = par_map(&jobs, |&(shot, seed)| {
        let per_class = &shuffles[seed];
        let train: Vec<usize> = per_class.iter().flat_map(|v| v[..shot].iter().copied()).collect();
        let acc = match &test {
            Some(t) => run_one(features, labels, &train, t.features, t.labels, classes, protocol, seed, shot),
            None => {
                let rest: Vec<usize> = per_class.iter().flat_map(|v| v[shot..].iter().copied()).collect();
                let tx = features.select_rows(&rest);
                let ty: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
                run_one(features, labels, &train, &tx, &ty, classes, protocol, seed, shot)
            }
        };
        ProbeRecord {
            dataset: dataset.to_string(),
            shot,
            seed,
            accuracy: acc,
        }
    });
    Ok(records)
}

/// Mean accuracy per shot, in shot order.
pub fn mean_by_shot(records: &[ProbeRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(s, _, _)| *s == r.shot) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => out.push((r.shot, r.accuracy, 1)),
        }
    }
    out.sort_by_key(|e| e.0);
    out.into_iter().map(|(s, a, n)| (s, a / n as f64)).collect()
}

/// CSV with header `dataset,shot,seed,accuracy`.
pub fn write_probe_csv(records: &[ProbeRecord], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_probe_csv(r: impl Read) -> Result<Vec<ProbeRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gaussian_classes;

    fn small_protocol() -> ProbeProtocol {
        ProbeProtocol {
            shots: vec![2, 8],
            seeds: 3,
            ..ProbeProtocol::default()
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let p = ProbeProtocol::default();
        assert_eq!(p.shots, vec![2, 8, 16, 32, 64, 128]);
        assert_eq!((p.seeds, p.epochs, p.batch_size), (10, 20, 32));
        assert_eq!(p.learning_rate, 1e-2);
    }

    #[test]
    fn separable_blobs_two_shots() {
        let (x, y) = gaussian_classes(2, 60, 8, 12.0, 4);
        let recs = linear_probe("blobs", &x, &y, &small_protocol(), None).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().filter(|r| r.shot == 2).all(|r| r.accuracy >= 0.95), "{recs:?}");
    }

    #[test]
    fn duplicate_features_give_majority_share() {
        let x = Mat::from_fn(30, 3, |_, c| c as f64 + 1.0);
        let y: Vec<usize> = (0..30).map(|i| usize::from(i >= 10)).collect();
        // 10 of class 0, 20 of class 1; after 2 shots each the test split is 8 vs 18.
        let p = ProbeProtocol { shots: vec![2], seeds: 2, ..ProbeProtocol::default() };
        for r in linear_probe("dup", &x, &y, &p, None).unwrap() {
            assert!((r.accuracy - 18.0 / 26.0).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn reproducible_and_sorted() {
        let (x, y) = gaussian_classes(3, 20, 5, 2.0, 1);
        let a = linear_probe("d", &x, &y, &small_protocol(), None).unwrap();
        let b = linear_probe("d", &x, &y, &small_protocol(), None).unwrap();
        assert_eq!(a, b);
        let keys: Vec<(usize, usize)> = a.iter().map(|r| (r.shot, r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn insufficient_samples() {
        let (x, y) = gaussian_classes(2, 5, 3, 1.0, 1);
        let err = linear_probe("d", &x, &y, &small_protocol(), None).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { need: 8, have: 5, .. }));
        let (x, y) = gaussian_classes(2, 8, 3, 1.0, 1);
        assert!(linear_probe("d", &x, &y, &small_protocol(), None).is_err());
        let test = TestSplit { features: &x, labels: &y };
        assert!(linear_probe("d", &x, &y, &small_protocol(), Some(test)).is_ok());
    }

    #[test]
    fn protocol_validation() {
        let (x, y) = gaussian_classes(2, 20, 3, 1.0, 1);
        let p = ProbeProtocol { shots: vec![8, 2], ..ProbeProtocol::default() };
        assert!(linear_probe("d", &x, &y, &p, None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            ProbeRecord { dataset: "a".into(), shot: 2, seed: 0, accuracy: 0.5 },
            ProbeRecord { dataset: "a".into(), shot: 8, seed: 1, accuracy: 0.875 },
        ];
        let mut buf = Vec::new();
        write_probe_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("dataset,shot,seed,accuracy\n"));
        assert_eq!(read_probe_csv(&buf[..]).unwrap(), recs);
    }
}

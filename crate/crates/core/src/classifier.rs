//! Neural predictor of the resting attractor, trained on oracle-labelled
//! basin samples.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractor::{AttractorClass, BasinSample, SamplingRanges};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, Loss, Mlp};
use crate::state::HarvesterState;

pub const CLASSIFIER_WIDTHS: [usize; 5] = [4, 128, 64, 64, 1];
pub const CLASSIFIER_ACTIVATIONS: [Activation; 4] =
    [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Sigmoid];

/// Affine map `(x − center) / scale` applied to `[φ, θ, θ̇, i]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub center: [f64; 4],
    pub scale: [f64; 4],
}

impl FeatureScaling {
    /// Centres each sampling interval on zero with unit width.
    pub fn from_ranges(r: &SamplingRanges) -> Self {
        let (lo, hi) = (r.lower(), r.upper());
        let mut center = [0.0; 4];
        let mut scale = [1.0; 4];
        for k in 0..4 {
            center[k] = 0.5 * (lo[k] + hi[k]);
            scale[k] = hi[k] - lo[k];
        }
        Self { center, scale }
    }

    pub fn apply(&self, f: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..4 {
            out[k] = (f[k] - self.center[k]) / self.scale[k];
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.scale.iter().all(|s| s.is_finite() && *s > 0.0) && self.center.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("normalization scales must be finite and positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoaClassifier {
    pub network: Mlp,
    pub normalization: FeatureScaling,
    pub threshold: f64,
}

impl BoaClassifier {
    pub fn new(ranges: &SamplingRanges, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            network: Mlp::random(&CLASSIFIER_WIDTHS, &CLASSIFIER_ACTIVATIONS, &mut rng)?,
            normalization: FeatureScaling::from_ranges(ranges),
            threshold: 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let widths: Vec<usize> = std::iter::once(self.network.input_dim())
            .chain(self.network.layers().iter().map(|l| l.out_dim()))
            .collect();
        let acts: Vec<Activation> = self.network.layers().iter().map(|l| l.activation).collect();
        if widths != CLASSIFIER_WIDTHS || acts != CLASSIFIER_ACTIVATIONS || self.network.aux().is_some() {
            return Err(Error::Config(format!("classifier architecture {widths:?} {acts:?} is not 4-128-64-64-1")));
        }
        self.normalization.validate()
    }

    fn design_matrix(&self, features: impl ExactSizeIterator<Item = [f64; 4]>) -> Array2<f64> {
        let n = features.len();
        let mut x = Array2::zeros((n, 4));
        for (mut row, f) in x.rows_mut().into_iter().zip(features) {
            for (dst, v) in row.iter_mut().zip(self.normalization.apply(f)) {
                *dst = v;
            }
        }
        x
    }

    /// Probability that the state rests on the HP attractor.
    pub fn probability(&self, s: &HarvesterState) -> f64 {
        let x = self.normalization.apply(s.features());
        self.network.forward(&x).expect("classifier input width is fixed")[0]
    }

    pub fn predict_resting_attractor(&self, s: &HarvesterState) -> (f64, AttractorClass) {
        let p = self.probability(s);
        (p, self.label_for(p))
    }

    pub fn label_for(&self, probability: f64) -> AttractorClass {
        if probability >= self.threshold {
            AttractorClass::Hp
        } else {
            AttractorClass::Lp
        }
    }

    pub fn probabilities(&self, features: &[[f64; 4]]) -> Vec<f64> {
        let x = self.design_matrix(features.iter().copied());
        self.network
            .forward_batch(x.view(), None)
            .expect("classifier input width is fixed")
            .into_raw_vec_and_offset()
            .0
    }

    /// Fraction of samples whose predicted class equals their label.
    pub fn accuracy(&self, samples: &[BasinSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let features: Vec<[f64; 4]> = samples.iter().map(|s| [s.phi, s.theta, s.theta_dot, s.i]).collect();
        let correct = self
            .probabilities(&features)
            .iter()
            .zip(samples)
            .filter(|(p, s)| self.label_for(**p) == s.class())
            .count();
        correct as f64 / samples.len() as f64
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub config: ClassifierTrainConfig,
    pub train_size: usize,
    pub validation_size: usize,
    /// Mean training loss per epoch.
    pub loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
}

/// Fits a fresh classifier with Adam on binary cross-entropy and returns the
/// epoch with the highest validation accuracy.
pub fn train_classifier(
    samples: &[BasinSample],
    ranges: &SamplingRanges,
    cfg: &ClassifierTrainConfig,
) -> Result<(BoaClassifier, TrainingMetrics)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
    }
    let hp = samples.iter().filter(|s| s.label == 1).count();
    if hp == 0 || hp == samples.len() {
        return Err(Error::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let validation: Vec<BasinSample> = val_idx.iter().map(|&k| samples[k]).collect();
    let mut train: Vec<usize> = train_idx.to_vec();
    if train.is_empty() {
        return Err(Error::Config("no training samples after the validation split".into()));
    }

    let mut clf = BoaClassifier::new(ranges, rng.next_u64())?;
    let all = clf.design_matrix(samples.iter().map(|s| [s.phi, s.theta, s.theta_dot, s.i]));
    let labels: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let mut opt = AdamState::new(&clf.network, cfg.lr);
    let mut best = (clf.network.clone(), f64::NEG_INFINITY, 0);
    let mut metrics = TrainingMetrics {
        config: *cfg,
        train_size: train.len(),
        validation_size: validation.len(),
        loss: Vec::with_capacity(cfg.epochs),
        validation_accuracy: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_validation_accuracy: 0.0,
    };
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let x = all.select(ndarray::Axis(0), batch);
            let y = Array2::from_shape_fn((batch.len(), 1), |(r, _)| labels[batch[r]]);
            let (loss, back) = clf.network.backprop(x.view(), None, Loss::BinaryCrossEntropy(y.view()))?;
            opt.step(&mut clf.network, &back.grads)?;
            total += loss * batch.len() as f64;
        }
        metrics.loss.push(total / train.len() as f64);
        let acc = if validation.is_empty() {
            clf.accuracy(&train.iter().map(|&k| samples[k]).collect::<Vec<_>>())
        } else {
            clf.accuracy(&validation)
        };
        metrics.validation_accuracy.push(acc);
        if acc > best.1 {
            best = (clf.network.clone(), acc, epoch);
        }
    }
    clf.network = best.0;
    metrics.best_validation_accuracy = best.1;
    metrics.best_epoch = best.2;
    Ok((clf, metrics))
}

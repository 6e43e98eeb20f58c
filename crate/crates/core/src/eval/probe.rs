use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::eval::{accuracy, image_features, SplitTask};
use crate::eval::zero_shot::predict;
use crate::model::{normalize_rows, DualEncoder};
use crate::real::Real;
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

pub const FEW_SHOT_LR: f64 = 1e-3;
pub const FEW_SHOT_EPOCHS: usize = 100;
pub const FEW_SHOT_RESAMPLES: u64 = 3;

const SPLIT_STREAM: u64 = 0x7370_6c69_74;

/// Seven log-spaced rates from 1e-4 to 1e-1.
pub fn default_lr_grid() -> Vec<f64> {
    (0..7).map(|k| libm::pow(10.0, -4.0 + 0.5 * k as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr_grid: default_lr_grid(), epochs: 100, seed: 0, val_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    /// `None` when training at this rate diverged.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub lr: f64,
    pub grid: Vec<GridPoint>,
}

/// Softmax regression `x · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearClassifier { weight: Tensor::zeros(&[dim, classes]), bias: vec![0.0; classes] }
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = x.matmul(&self.weight)?;
        let c = self.bias.len();
        z.data_mut().chunks_mut(c).for_each(|row| row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b));
        Ok(z)
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        Ok(predict(&self.logits(x)?))
    }
}

/// Full-batch Adam on softmax cross-entropy from a zero initialization.
/// A non-finite loss is a numeric error.
pub fn train_linear_classifier(x: &Tensor<f64>, y: &[usize], classes: usize, lr: f64, epochs: usize) -> Result<LinearClassifier> {
    let (n, d) = (x.rows(), x.last_dim());
    if n == 0 || n != y.len() {
        bail!(Validation, "{} feature rows for {} labels", n, y.len());
    }
    if let Some(&c) = y.iter().find(|&&c| c >= classes) {
        bail!(Validation, "label {} out of {} classes", c, classes);
    }
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut clf = LinearClassifier::zeros(d, classes);
    let mut m = vec![0.0; d * classes + classes];
    let mut v = m.clone();
    let xt = x.transpose();
    for t in 1..=epochs {
        let mut p = clf.logits(x)?;
        let mut loss = 0.0;
        for (r, row) in p.data_mut().chunks_mut(classes).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            row.iter_mut().for_each(|z| {
                *z = libm::exp(*z - max);
                sum += *z;
            });
            loss -= libm::log(row[y[r]] / sum);
            row.iter_mut().for_each(|z| *z /= sum);
            row[y[r]] -= 1.0;
            row.iter_mut().for_each(|z| *z /= n as f64);
        }
        if !loss.is_finite() {
            bail!(Numeric, "probe loss diverged at epoch {} with lr {}", t, lr);
        }
        let gw = xt.matmul(&p)?;
        let mut gb = vec![0.0; classes];
        p.data().chunks(classes).for_each(|row| gb.iter_mut().zip(row).for_each(|(g, v)| *g += v));
        let (c1, c2) = (1.0 - libm::pow(b1, t as f64), 1.0 - libm::pow(b2, t as f64));
        let params = clf.weight.data_mut().iter_mut().chain(clf.bias.iter_mut());
        let grads = gw.data().iter().chain(&gb);
        for (((w, g), m), v) in params.zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
        }
        if !clf.weight.data().iter().chain(&clf.bias).all(|w| w.is_finite()) {
            bail!(Numeric, "probe weights overflowed at epoch {} with lr {}", t, lr);
        }
    }
    Ok(clf)
}

/// Learning-rate sweep on frozen features. With more than one grid point the
/// rate is chosen on a seeded validation split of the training rows; the
/// probe is then refit on all training rows and scored on the test rows.
pub fn linear_probe_features(
    train_x: &Tensor<f64>,
    train_y: &[usize],
    test_x: &Tensor<f64>,
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if config.lr_grid.is_empty() {
        bail!(Validation, "learning-rate grid is empty");
    }
    if !(config.val_fraction > 0.0 && config.val_fraction < 1.0) {
        bail!(Validation, "validation fraction must lie in (0, 1), got {}", config.val_fraction);
    }
    let mut grid = Vec::with_capacity(config.lr_grid.len());
    let lr = if config.lr_grid.len() == 1 {
        grid.push(GridPoint { lr: config.lr_grid[0], val_accuracy: None });
        config.lr_grid[0]
    } else {
        let n = train_x.rows();
        let n_val = libm::ceil(config.val_fraction * n as f64) as usize;
        if n_val == 0 || n_val >= n {
            bail!(Validation, "{} training rows cannot be split for validation", n);
        }
        let perm = Rng::new(mix_seed(&[config.seed, SPLIT_STREAM])).permutation(n);
        let (mut val, mut fit) = (perm[..n_val].to_vec(), perm[n_val..].to_vec());
        val.sort_unstable();
        fit.sort_unstable();
        let fit_x = train_x.select_rows(&fit);
        let fit_y: Vec<usize> = fit.iter().map(|&i| train_y[i]).collect();
        let val_x = train_x.select_rows(&val);
        let val_y: Vec<usize> = val.iter().map(|&i| train_y[i]).collect();
        let mut best: Option<(f64, f64)> = None;
        for &lr in &config.lr_grid {
            let acc = match train_linear_classifier(&fit_x, &fit_y, classes, lr, config.epochs) {
                Ok(clf) => Some(accuracy(&clf.predict(&val_x)?, &val_y)?),
                Err(_) => None,
            };
            if let Some(a) = acc {
                if best.is_none_or(|(b, _)| a > b) {
                    best = Some((a, lr));
                }
            }
            grid.push(GridPoint { lr, val_accuracy: acc });
        }
        match best {
            Some((_, lr)) => lr,
            None => bail!(Numeric, "every learning rate in the probe grid diverged"),
        }
    };
    let clf = train_linear_classifier(train_x, train_y, classes, lr, config.epochs)?;
    Ok(ProbeResult { accuracy: accuracy(&clf.predict(test_x)?, test_y)?, lr, grid })
}

pub fn linear_probe<T: Real>(model: &DualEncoder<T>, task: &SplitTask, config: &ProbeConfig) -> Result<ProbeResult> {
    task.validate()?;
    let (train_x, train_y, test_x, test_y) = split_features(model, task)?;
    linear_probe_features(&train_x, &train_y, &test_x, &test_y, task.class_names.len(), config)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotMethod {
    #[default]
    LinearProbe,
    /// Nearest normalized class mean, for comparison.
    Prototype,
}

/// Mean test accuracy over three seeded draws of `k` training rows per class.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_accuracy_features(
    train_x: &Tensor<f64>,
    train_y: &[usize],
    test_x: &Tensor<f64>,
    test_y: &[usize],
    class_names: &[String],
    k: usize,
    seed: u64,
    method: FewShotMethod,
) -> Result<f64> {
    if k == 0 {
        bail!(Validation, "k must be positive");
    }
    let classes = class_names.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in train_y.iter().enumerate() {
        if c >= classes {
            bail!(Validation, "label {} out of {} classes", c, classes);
        }
        by_class[c].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() < k {
            bail!(Validation, "class {:?} has {} training examples, fewer than k = {}", class_names[c], rows.len(), k);
        }
    }
    let mut total = 0.0;
    for r in 0..FEW_SHOT_RESAMPLES {
        let mut rng = Rng::new(mix_seed(&[seed, r]));
        let mut pick: Vec<usize> = by_class.iter().flat_map(|rows| rng.sample_sorted(rows.len(), k).into_iter().map(|j| rows[j])).collect();
        pick.sort_unstable();
        let x = train_x.select_rows(&pick);
        let y: Vec<usize> = pick.iter().map(|&i| train_y[i]).collect();
        let pred = match method {
            FewShotMethod::LinearProbe => train_linear_classifier(&x, &y, classes, FEW_SHOT_LR, FEW_SHOT_EPOCHS)?.predict(test_x)?,
            FewShotMethod::Prototype => prototype_predict(&x, &y, classes, test_x)?,
        };
        total += accuracy(&pred, test_y)?;
    }
    Ok(total / FEW_SHOT_RESAMPLES as f64)
}

fn prototype_predict(x: &Tensor<f64>, y: &[usize], classes: usize, test_x: &Tensor<f64>) -> Result<Vec<usize>> {
    let d = x.last_dim();
    let unit = normalize_rows(x)?;
    let mut means = vec![vec![0.0; d]; classes];
    for (r, &c) in y.iter().enumerate() {
        means[c].iter_mut().zip(unit.row(r)).for_each(|(m, v)| *m += v);
    }
    let protos = normalize_rows(&Tensor::from_rows(&means)?)?;
    Ok(predict(&normalize_rows(test_x)?.matmul(&protos.transpose())?))
}

pub fn few_shot_accuracy<T: Real>(model: &DualEncoder<T>, task: &SplitTask, k: usize, seed: u64, method: FewShotMethod) -> Result<f64> {
    task.validate()?;
    let (train_x, train_y, test_x, test_y) = split_features(model, task)?;
    few_shot_accuracy_features(&train_x, &train_y, &test_x, &test_y, &task.class_names, k, seed, method)
}

type Features = (Tensor<f64>, Vec<usize>, Tensor<f64>, Vec<usize>);

fn split_features<T: Real>(model: &DualEncoder<T>, task: &SplitTask) -> Result<Features> {
    let train: Vec<_> = task.train.iter().map(|e| &e.0).collect();
    let test: Vec<_> = task.test.iter().map(|e| &e.0).collect();
    Ok((
        image_features(model, &train)?,
        task.train.iter().map(|e| e.1).collect(),
        image_features(model, &test)?,
        task.test.iter().map(|e| e.1).collect(),
    ))
}

//! Two-class Gaussian-mixture data, its exact densities, and the
//! Bayes-optimal reference classifier.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::{fsutil, seed};

/// One axis-aligned Gaussian component of a class mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance matrix.
    pub variance: Vec<f64>,
    pub weight: f64,
}

/// Class-conditional Gaussian mixtures plus class priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub classes: Vec<Vec<Component>>,
    pub priors: Vec<f64>,
}

impl GmmSpec {
    pub fn new(classes: Vec<Vec<Component>>, priors: Vec<f64>) -> Result<Self> {
        let spec = Self { classes, priors };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.classes.len() != self.priors.len() {
            return Err(Error::Domain("need >= 2 classes with one prior each".into()));
        }
        if (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("class priors must sum to 1".into()));
        }
        let dim = self.dim();
        for comps in &self.classes {
            if comps.is_empty() || (comps.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() > 1e-12
            {
                return Err(Error::Domain("component weights must sum to 1 per class".into()));
            }
            for c in comps {
                if c.mean.len() != dim || c.variance.len() != dim {
                    return Err(Error::Domain("component dimensions disagree".into()));
                }
                if c.variance.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Domain("variances must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Draws one point from class `class`, returning it with the index of
    /// the component it came from.
    fn draw<R: Rng>(&self, class: usize, rng: &mut R) -> (Vec<f64>, usize) {
        let comps = &self.classes[class];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut which = comps.len() - 1;
        for (i, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                which = i;
                break;
            }
        }
        let c = &comps[which];
        let point = c
            .mean
            .iter()
            .zip(&c.variance)
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect();
        (point, which)
    }

    fn draw_class<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.priors.len() - 1
    }
}

/// The proof-of-concept distribution: two classes, each an equal-weight
/// mixture of two isotropic Gaussians with variance 1.2.
///
/// Class 0 sits at (−1.5, 1.5) and (1.5, −1.5); class 1 at (−1.5, −1.5)
/// and (1.5, 1.5). The Bayes rule is therefore `x·y > 0 → class 1`.
pub fn poc_spec() -> GmmSpec {
    let comp = |x: f64, y: f64| Component {
        mean: vec![x, y],
        variance: vec![1.2, 1.2],
        weight: 0.5,
    };
    GmmSpec {
        classes: vec![
            vec![comp(-1.5, 1.5), comp(1.5, -1.5)],
            vec![comp(-1.5, -1.5), comp(1.5, 1.5)],
        ],
        priors: vec![0.5, 0.5],
    }
}

/// A labeled point set. `seed` records how a sampled set was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(points: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if points.rank() != 2 || points.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: points.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::Domain("dataset must contain at least one point".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: num_classes,
            });
        }
        Ok(Self {
            points,
            labels,
            num_classes,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Serialises as CSV with header `x0,..,x{d-1},label`. Floats use the
    /// shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label\n");
        for (row, label) in self.points.row_iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv().as_bytes())
    }

    /// Reads a `x0,..,label` CSV. The class count is `max(label) + 1`
    /// (at least 2).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
        if headers.len() < 2 || &headers[headers.len() - 1] != "label" {
            return Err(Error::format(path, "header must be x0,..,x{d-1},label"));
        }
        let d = headers.len() - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", line + 2));
            for j in 0..d {
                values.push(rec[j].trim().parse::<f64>().map_err(|_| bad("coordinate"))?);
            }
            labels.push(rec[d].trim().parse::<usize>().map_err(|_| bad("label"))?);
        }
        let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        Dataset::new(Tensor::matrix(labels.len(), d, values)?, labels, k)
    }
}

/// Draws exactly `n_per_class` points per class, class by class.
pub fn sample(spec: &GmmSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let (data, _) = sample_with_components(spec, n_per_class, seed)?;
    Ok(data)
}

/// Like [`sample`], also returning the generating component of each point.
pub fn sample_with_components(
    spec: &GmmSpec,
    n_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    if n_per_class == 0 {
        return Err(Error::Domain("n_per_class must be positive".into()));
    }
    let mut rng = seed::rng(seed);
    let k = spec.num_classes();
    let mut values = Vec::with_capacity(k * n_per_class * spec.dim());
    let mut labels = Vec::with_capacity(k * n_per_class);
    let mut components = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        for _ in 0..n_per_class {
            let (p, c) = spec.draw(class, &mut rng);
            values.extend(p);
            labels.push(class);
            components.push(c);
        }
    }
    let mut data = Dataset::new(Tensor::matrix(labels.len(), spec.dim(), values)?, labels, k)?;
    data.seed = Some(seed);
    Ok((data, components))
}

/// Draws `n` points from the full generating distribution (class drawn by
/// prior). Generated in fixed-size chunks, each with its own stream derived
/// from `(seed, chunk)`, so the result does not depend on thread count.
pub fn sample_mixture(spec: &GmmSpec, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    const CHUNK: usize = 8192;
    let chunks: Vec<(Vec<f64>, Vec<usize>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed::derive(seed, c as u64));
            let len = CHUNK.min(n - c * CHUNK);
            let mut values = Vec::with_capacity(len * spec.dim());
            let mut labels = Vec::with_capacity(len);
            for _ in 0..len {
                let class = spec.draw_class(&mut rng);
                values.extend(spec.draw(class, &mut rng).0);
                labels.push(class);
            }
            (values, labels)
        })
        .collect();
    let mut values = Vec::with_capacity(n * spec.dim());
    let mut labels = Vec::with_capacity(n);
    for (v, l) in chunks {
        values.extend(v);
        labels.extend(l);
    }
    let points = Tensor::matrix(n, spec.dim(), values).expect("chunk sizes add up");
    (points, labels)
}

fn log_gaussian_diag(point: &[f64], c: &Component) -> f64 {
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for ((x, m), v) in point.iter().zip(&c.mean).zip(&c.variance) {
        quad += (x - m) * (x - m) / v;
        log_det += v.ln();
    }
    -0.5 * (quad + log_det + point.len() as f64 * (2.0 * PI).ln())
}

/// `log Σ_k w_k N(point; μ_k, Σ_k)` for the given class, via log-sum-exp.
pub fn log_density(spec: &GmmSpec, point: &[f64], class: usize) -> Result<f64> {
    let comps = spec.classes.get(class).ok_or(Error::Index {
        what: "class",
        index: class,
        bound: spec.num_classes(),
    })?;
    if point.len() != spec.dim() {
        return Err(Error::Dimension {
            op: "log_density",
            left: vec![point.len()],
            right: vec![spec.dim()],
        });
    }
    Ok(log_density_unchecked(comps, point))
}

fn log_density_unchecked(comps: &[Component], point: &[f64]) -> f64 {
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| c.weight.ln() + log_gaussian_diag(point, c))
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Argmax over classes of `prior × density`; exact ties go to the lowest
/// class index.
pub fn bayes_predict(spec: &GmmSpec, point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, comps) in spec.classes.iter().enumerate() {
        let score = spec.priors[k].ln() + log_density_unchecked(comps, point);
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Anything that maps a batch of points to class indices.
pub trait Classify: Sync {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>>;

    /// Input width, when the classifier is tied to one.
    fn input_dim(&self) -> Option<usize> {
        None
    }
}

/// The Bayes-optimal classifier of a known distribution.
#[derive(Clone, Copy, Debug)]
pub struct BayesClassifier<'a>(pub &'a GmmSpec);

impl Classify for BayesClassifier<'_> {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        if points.cols() != self.0.dim() {
            return Err(Error::Dimension {
                op: "bayes_predict",
                left: points.shape().to_vec(),
                right: vec![self.0.dim()],
            });
        }
        Ok(points.row_iter().map(|p| bayes_predict(self.0, p)).collect())
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.0.dim())
    }
}

/// Always predicts one class.
#[derive(Clone, Copy, Debug)]
pub struct ConstantClassifier(pub usize);

impl Classify for ConstantClassifier {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        Ok(vec![self.0; points.rows()])
    }
}

/// Swaps the two labels of a binary classifier.
#[derive(Clone, Copy, Debug)]
pub struct Flipped<C>(pub C);

impl<C: Classify> Classify for Flipped<C> {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        Ok(self.0.classify(points)?.into_iter().map(|c| 1 - c.min(1)).collect())
    }

    fn input_dim(&self) -> Option<usize> {
        self.0.input_dim()
    }
}

impl<C: Classify + ?Sized> Classify for &C {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        (**self).classify(points)
    }

    fn input_dim(&self) -> Option<usize> {
        (**self).input_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeviationEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Minimum sample count accepted by the deviation estimators.
pub const MIN_DEVIATION_SAMPLES: usize = 1000;

/// A fixed Monte Carlo sample from the generating distribution together
/// with its Bayes labels, reusable across checkpoints of one run.
#[derive(Clone, Debug)]
pub struct DeviationProbe {
    points: Tensor,
    bayes: Vec<usize>,
}

impl DeviationProbe {
    pub fn new(spec: &GmmSpec, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < MIN_DEVIATION_SAMPLES {
            return Err(Error::Domain(format!(
                "deviation needs >= {MIN_DEVIATION_SAMPLES} samples, got {n_samples}"
            )));
        }
        let (points, _) = sample_mixture(spec, n_samples, seed);
        let bayes = BayesClassifier(spec).classify(&points)?;
        Ok(Self { points, bayes })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// Fraction of the sample on which `classifier` and the Bayes rule
    /// disagree.
    pub fn deviation(&self, classifier: &impl Classify) -> Result<DeviationEstimate> {
        let pred = classifier.classify(&self.points)?;
        Ok(estimate(&pred, &self.bayes))
    }
}

fn estimate(a: &[usize], b: &[usize]) -> DeviationEstimate {
    let n = a.len();
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    let p = diff as f64 / n as f64;
    DeviationEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / n as f64).sqrt(),
        samples: n,
    }
}

/// Probability that `classifier` disagrees with the Bayes rule on a point
/// drawn from `spec`, estimated from `n_samples` draws.
pub fn bayes_deviation(
    spec: &GmmSpec,
    classifier: &impl Classify,
    n_samples: usize,
    seed: u64,
) -> Result<DeviationEstimate> {
    DeviationProbe::new(spec, n_samples, seed)?.deviation(classifier)
}

/// Disagreement rate of two arbitrary classifiers under `spec`.
pub fn disagreement(
    spec: &GmmSpec,
    a: &impl Classify,
    b: &impl Classify,
    n_samples: usize,
    seed: u64,
) -> Result<DeviationEstimate> {
    if n_samples < MIN_DEVIATION_SAMPLES {
        return Err(Error::Domain(format!(
            "deviation needs >= {MIN_DEVIATION_SAMPLES} samples, got {n_samples}"
        )));
    }
    let (points, _) = sample_mixture(spec, n_samples, seed);
    Ok(estimate(&a.classify(&points)?, &b.classify(&points)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poc_layout() {
        let spec = poc_spec();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.num_classes(), 2);
        assert!(spec.classes.iter().all(|c| c.len() == 2));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = poc_spec();
        s.priors = vec![0.7, 0.7];
        assert!(s.validate().is_err());
        let mut s = poc_spec();
        s.classes[0][0].variance[0] = 0.0;
        assert!(s.validate().is_err());
        let mut s = poc_spec();
        s.classes[1][1].weight = 0.4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sample_counts_and_determinism() {
        let spec = poc_spec();
        let a = sample(&spec, 250, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 250);
        let b = sample(&spec, 250, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&spec, 250, 8).unwrap());
        assert!(sample(&spec, 0, 7).is_err());
    }

    #[test]
    fn density_examples() {
        let spec = poc_spec();
        let p = [1.5, 1.5];
        assert!(log_density(&spec, &p, 1).unwrap() > log_density(&spec, &p, 0).unwrap());
        for (a, b) in [(0.3, -2.0), (1.0, 1.0), (-4.0, 0.5)] {
            let l0 = log_density(&spec, &[a, b], 0).unwrap();
            let l1 = log_density(&spec, &[-a, b], 1).unwrap();
            assert!((l0 - l1).abs() < 1e-12);
        }
        assert!(log_density(&spec, &p, 2).is_err());
        assert!(log_density(&spec, &[1.0], 0).is_err());
    }

    #[test]
    fn density_matches_direct_sum() {
        let spec = poc_spec();
        for p in [[0.0, 0.0], [1.0, -0.5], [2.5, 2.0], [-3.0, 1.0]] {
            for class in 0..2 {
                let direct: f64 = spec.classes[class]
                    .iter()
                    .map(|c| {
                        let q = (p[0] - c.mean[0]).powi(2) / 1.2 + (p[1] - c.mean[1]).powi(2) / 1.2;
                        c.weight * (-0.5 * q).exp() / (2.0 * PI * 1.2)
                    })
                    .sum();
                let got = log_density(&spec, &p, class).unwrap().exp();
                assert!((got - direct).abs() <= 1e-12 * direct, "{p:?} {class}");
            }
        }
    }

    #[test]
    fn bayes_examples() {
        let spec = poc_spec();
        assert_eq!(bayes_predict(&spec, &[1.0, 1.0]), 1);
        assert_eq!(bayes_predict(&spec, &[0.0, 0.0]), 0);
        assert_eq!(bayes_predict(&spec, &[-1.0, 2.0]), 0);
        assert_eq!(bayes_predict(&spec, &[-1.0, -0.1]), 1);
    }

    #[test]
    fn deviation_examples() {
        let spec = poc_spec();
        let bayes = BayesClassifier(&spec);
        let d = bayes_deviation(&spec, &bayes, 20_000, 3).unwrap();
        assert_eq!(d.estimate, 0.0);
        let d = bayes_deviation(&spec, &Flipped(bayes), 20_000, 3).unwrap();
        assert_eq!(d.estimate, 1.0);
        assert!(bayes_deviation(&spec, &bayes, 999, 3).is_err());
    }

    #[test]
    fn disagreement_is_symmetric() {
        let spec = poc_spec();
        let a = ConstantClassifier(0);
        let b = BayesClassifier(&spec);
        let ab = disagreement(&spec, &a, &b, 5000, 11).unwrap();
        let ba = disagreement(&spec, &b, &a, 5000, 11).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = sample(&poc_spec(), 20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.points, data.points);
        assert_eq!(back.labels, data.labels);
        assert!(data.to_csv().starts_with("x0,x1,label\n"));
    }

    #[test]
    fn csv_with_wider_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "x0,x1,x2,label\n1,2,3,0\n4,5,6,2\n").unwrap();
        let d = Dataset::read_csv(&path).unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.num_classes, 3);
        std::fs::write(&path, "x0,x1,label\n1,oops,0\n").unwrap();
        let err = Dataset::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}

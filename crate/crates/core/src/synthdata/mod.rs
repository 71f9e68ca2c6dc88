//! Multi-domain, multi-modality feature data.
//!
//! [`generate_domain`] draws class-conditional Gaussians whose means and
//! covariance transforms differ per domain, which gives direct control over
//! covariate shift. [`load_domain_csv`] reads externally extracted features.

mod benchmark;
mod csv_io;
mod rng;

pub use benchmark::{benchmark_domains, gap_triplet, BenchmarkDomains, SHIFT_2S1T};
pub use csv_io::{load_domain_csv, write_domain_csv};
pub use rng::GaussianStream;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgraph::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// One vector per modality.
    pub features: Vec<Vec<f64>>,
    pub label: Option<usize>,
    pub domain: String,
}

/// A homogeneous set of samples from one domain.
///
/// Target datasets never expose labels through [`DomainDataset::labels`];
/// labels known for a target (for example from a generator) are kept aside
/// and only reachable through [`DomainDataset::held_out_labels`].
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    id: String,
    role: Role,
    widths: Vec<usize>,
    samples: Vec<Sample>,
    held_out: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(id: impl Into<String>, role: Role, widths: Vec<usize>, mut samples: Vec<Sample>) -> Result<Self> {
        let id = id.into();
        for (i, s) in samples.iter().enumerate() {
            let w: Vec<usize> = s.features.iter().map(Vec::len).collect();
            if w != widths {
                return Err(Error::contract(format!(
                    "sample {i} of {id} has widths {w:?}, expected {widths:?}"
                )));
            }
            if matches!(s.label, Some(l) if l > 1) {
                return Err(Error::contract(format!("sample {i} of {id}: label must be 0 or 1")));
            }
        }
        let held_out = match role {
            Role::Source => {
                if let Some(i) = samples.iter().position(|s| s.label.is_none()) {
                    return Err(Error::contract(format!("source {id}: sample {i} is unlabelled")));
                }
                None
            }
            Role::Target => {
                let labels: Option<Vec<usize>> = samples.iter().map(|s| s.label).collect();
                for s in &mut samples {
                    s.label = None;
                }
                labels
            }
        };
        Ok(DomainDataset {
            id,
            role,
            widths,
            samples,
            held_out,
        })
    }

    /// Same samples under a different role. Becoming a source requires
    /// labels, either on the samples or held out.
    pub fn with_role(self, role: Role) -> Result<Self> {
        let DomainDataset {
            id,
            widths,
            mut samples,
            held_out,
            ..
        } = self;
        if let Some(labels) = held_out {
            for (s, l) in samples.iter_mut().zip(labels) {
                s.label = Some(l);
            }
        }
        DomainDataset::new(id, role, widths, samples)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Per-modality `n x w_u` batches for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Vec<Tensor> {
        (0..self.widths.len())
            .map(|u| {
                let rows: Vec<&[f64]> = idx.iter().map(|&i| self.samples[i].features[u].as_slice()).collect();
                let mut data = Vec::with_capacity(idx.len() * self.widths[u]);
                rows.iter().for_each(|r| data.extend_from_slice(r));
                Tensor::new(idx.len(), self.widths[u], data).expect("widths validated")
            })
            .collect()
    }

    pub fn all(&self) -> Vec<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// All modalities concatenated, `n x Σw`.
    pub fn concatenated(&self) -> Tensor {
        let cols: usize = self.widths.iter().sum();
        let mut data = Vec::with_capacity(self.len() * cols);
        for s in &self.samples {
            s.features.iter().for_each(|f| data.extend_from_slice(f));
        }
        Tensor::new(self.len(), cols, data).expect("widths validated")
    }

    /// Training labels; only sources have them.
    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        if self.role != Role::Source {
            return Err(Error::contract(format!("labels of target domain {} are hidden", self.id)));
        }
        Ok(idx
            .iter()
            .map(|&i| self.samples[i].label.expect("source samples are labelled"))
            .collect())
    }

    /// Labels for evaluation: source labels, or the held-out target labels.
    pub fn held_out_labels(&self) -> Option<Vec<usize>> {
        match self.role {
            Role::Source => self.samples.iter().map(|s| s.label).collect(),
            Role::Target => self.held_out.clone(),
        }
    }
}

/// Parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// Per modality: mean for class 0, mean for class 1.
    pub class_means: Vec<[Vec<f64>; 2]>,
    /// Per modality: lower-triangular `L` applied to standard normal noise,
    /// so the class-conditional covariance is `L·Lᵀ`.
    pub transforms: Vec<Vec<Vec<f64>>>,
    pub label_noise: f64,
    pub count: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn widths(&self) -> Vec<usize> {
        self.class_means.iter().map(|m| m[0].len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("domain spec {}: {msg}", self.id)));
        if self.class_means.is_empty() {
            return bad("needs at least one modality".into());
        }
        if self.transforms.len() != self.class_means.len() {
            return bad(format!(
                "{} transforms for {} modalities",
                self.transforms.len(),
                self.class_means.len()
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise {} outside [0, 0.5)", self.label_noise));
        }
        if self.count < 4 {
            return bad(format!("count {} < 4", self.count));
        }
        for (u, (means, l)) in self.class_means.iter().zip(&self.transforms).enumerate() {
            let w = means[0].len();
            if w == 0 || means[1].len() != w {
                return bad(format!("modality {u}: class means must share a positive width"));
            }
            if l.len() != w || l.iter().any(|r| r.len() != w) {
                return bad(format!("modality {u}: transform must be {w}x{w}"));
            }
            for (i, row) in l.iter().enumerate() {
                if row[i + 1..].iter().any(|v| *v != 0.0) {
                    return bad(format!("modality {u}: transform is not lower triangular"));
                }
            }
            let finite = means.iter().flatten().chain(l.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return bad(format!("modality {u}: non-finite entries"));
            }
        }
        Ok(())
    }
}

/// Draws a labelled dataset from `spec`.
///
/// Order of draws from the spec's seed: a shuffle of the balanced label list
/// (⌊count/2⌋ zeros, ⌈count/2⌉ ones), then for each sample the noise of every
/// modality in order, then one uniform per sample for label flipping.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut stream = GaussianStream::new(spec.seed);
    let zeros = spec.count / 2;
    let mut labels: Vec<usize> = (0..spec.count).map(|i| usize::from(i >= zeros)).collect();
    labels.shuffle(stream.rng());

    let mut samples = Vec::with_capacity(spec.count);
    for &label in &labels {
        let features = spec
            .class_means
            .iter()
            .zip(&spec.transforms)
            .map(|(means, l)| {
                let z: Vec<f64> = (0..means[0].len()).map(|_| stream.normal()).collect();
                means[label]
                    .iter()
                    .zip(l)
                    .map(|(m, row)| m + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect();
        samples.push(Sample {
            features,
            label: Some(label),
            domain: spec.id.clone(),
        });
    }
    for s in &mut samples {
        if stream.uniform() < spec.label_noise {
            s.label = s.label.map(|l| 1 - l);
        }
    }
    DomainDataset::new(spec.id.clone(), Role::Source, spec.widths(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(width: usize, l: Vec<Vec<f64>>, count: usize) -> DomainSpec {
        DomainSpec {
            id: "d".into(),
            class_means: vec![[vec![-1.0; width], vec![1.0; width]]],
            transforms: vec![l],
            label_noise: 0.0,
            count,
            seed: 5,
        }
    }

    #[test]
    fn noise_free_samples_sit_on_means() {
        let ds = generate_domain(&spec(2, vec![vec![0.0, 0.0], vec![0.0, 0.0]], 10)).unwrap();
        for s in ds.samples() {
            let expect = if s.label == Some(1) { 1.0 } else { -1.0 };
            assert!(s.features[0].iter().all(|v| *v == expect));
        }
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate_domain(&spec(2, vec![vec![1.0, 0.0], vec![0.3, 1.0]], 10)).unwrap();
        let ones = ds.held_out_labels().unwrap().iter().filter(|l| **l == 1).count();
        assert_eq!(ones, 5);
        let ds = generate_domain(&spec(1, vec![vec![1.0]], 11)).unwrap();
        let ones = ds.held_out_labels().unwrap().iter().filter(|l| **l == 1).count();
        assert_eq!(ones, 6);
    }

    #[test]
    fn empirical_covariance_matches_transform() {
        let l = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        let mut s = spec(2, l.clone(), 100_000);
        s.class_means = vec![[vec![0.0, 0.0], vec![0.0, 0.0]]];
        let ds = generate_domain(&s).unwrap();
        let c = crate::losses::covariance_value(&ds.concatenated()).unwrap();
        let llt = [[1.0, 0.6], [0.6, 1.0]];
        for (i, row) in llt.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                let rel = (c.get(i, j) - want).abs() / want.abs();
                assert!(rel < 0.05, "{i}{j}: {} vs {want}", c.get(i, j));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(3, vec![vec![1.0, 0.0, 0.0], vec![0.2, 1.0, 0.0], vec![0.0, 0.1, 0.5]], 50);
        let a = generate_domain(&s).unwrap();
        let b = generate_domain(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(2, vec![vec![1.0, 0.5], vec![0.0, 1.0]], 10);
        assert!(generate_domain(&s).is_err());
        s.transforms = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        s.count = 3;
        assert!(generate_domain(&s).is_err());
        s.count = 10;
        s.label_noise = 0.5;
        assert!(generate_domain(&s).is_err());
    }

    #[test]
    fn label_noise_flips_roughly_rho() {
        let mut s = spec(1, vec![vec![0.0]], 20_000);
        s.label_noise = 0.2;
        let ds = generate_domain(&s).unwrap();
        // Noise-free features reveal the pre-flip class.
        let flipped = ds
            .samples()
            .iter()
            .filter(|x| (x.features[0][0] > 0.0) != (x.label == Some(1)))
            .count();
        let rate = flipped as f64 / 20_000.0;
        assert!((rate - 0.2).abs() < 0.015, "{rate}");
    }

    #[test]
    fn target_role_hides_labels() {
        let ds = generate_domain(&spec(1, vec![vec![1.0]], 8)).unwrap();
        let labels = ds.held_out_labels().unwrap();
        let t = ds.with_role(Role::Target).unwrap();
        assert!(t.samples().iter().all(|s| s.label.is_none()));
        assert!(t.labels(&[0]).is_err());
        assert_eq!(t.held_out_labels().unwrap(), labels);
        let back = t.with_role(Role::Source).unwrap();
        assert_eq!(back.labels(&[0, 1]).unwrap(), labels[..2].to_vec());
    }
}

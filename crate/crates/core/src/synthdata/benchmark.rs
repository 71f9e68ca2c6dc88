//! Named benchmark families built from [`DomainSpec`]s.

use serde::{Deserialize, Serialize};

use super::{DomainSpec, GaussianStream};
use crate::error::{Error, Result};

/// Two sources, one shifted target, two modalities of width 8.
pub const SHIFT_2S1T: &str = "shift-2s1t";

const WIDTH: usize = 8;
const SEPARATION: f64 = 2.0;
const TARGET_SHIFT: f64 = 1.5;
const ROTATION: f64 = std::f64::consts::FRAC_PI_6;
const PER_DOMAIN: usize = 512;
const LABEL_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDomains {
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

impl BenchmarkDomains {
    /// Looks up a domain by id (`source-1`, `source-2`, ..., `target`).
    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.sources
            .iter()
            .chain(std::iter::once(&self.target))
            .find(|d| d.id == id)
            .ok_or_else(|| Error::contract(format!("benchmark has no domain '{id}'")))
    }
}

/// Specs of a named family; `seed` fixes every mean, transform and sample.
pub fn benchmark_domains(family: &str, seed: u64) -> Result<BenchmarkDomains> {
    match family {
        SHIFT_2S1T => Ok(shift_2s1t(seed)),
        other => Err(Error::contract(format!("unknown benchmark family '{other}'"))),
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finaliser; decorrelates per-domain seeds.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).max(1e-300).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Givens rotations by `angle` in the planes `(i, i + n/2)`.
fn paired_rotation(n: usize, angle: f64) -> Vec<Vec<f64>> {
    let mut r = identity(n);
    let (c, s) = (angle.cos(), angle.sin());
    for i in 0..n / 2 {
        let j = i + n / 2;
        r[i][i] = c;
        r[j][j] = c;
        r[i][j] = -s;
        r[j][i] = s;
    }
    r
}

fn apply(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Random lower-triangular transform with unit-ish diagonal and mild
/// correlations.
fn random_transform(stream: &mut GaussianStream, n: usize, diag_lo: f64, diag_hi: f64, off: f64) -> Vec<Vec<f64>> {
    let mut l = vec![vec![0.0; n]; n];
    for (i, row) in l.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate().take(i + 1) {
            *v = if i == j {
                diag_lo + (diag_hi - diag_lo) * stream.uniform()
            } else {
                off * stream.normal()
            };
        }
    }
    l
}

fn shift_2s1t(seed: u64) -> BenchmarkDomains {
    let mut stream = GaussianStream::new(mix_seed(seed, 0));
    let modalities = 2;

    // Class-mean difference spread over every coordinate with random signs.
    let deltas: Vec<Vec<f64>> = (0..modalities)
        .map(|_| {
            let raw: Vec<f64> = (0..WIDTH)
                .map(|_| if stream.uniform() < 0.5 { -1.0 } else { 1.0 })
                .collect();
            let norm = (WIDTH as f64).sqrt();
            raw.iter().map(|v| SEPARATION * v / norm).collect()
        })
        .collect();
    let centres: Vec<Vec<f64>> = (0..modalities)
        .map(|_| (0..WIDTH).map(|_| 0.5 * stream.normal()).collect())
        .collect();
    let base_l: Vec<Vec<Vec<f64>>> = (0..modalities)
        .map(|_| random_transform(&mut stream, WIDTH, 0.8, 1.2, 0.15))
        .collect();

    let means_for = |rot: &[Vec<f64>], shift: f64| -> Vec<[Vec<f64>; 2]> {
        (0..modalities)
            .map(|u| {
                let half: Vec<f64> = deltas[u].iter().map(|d| d / 2.0).collect();
                let dir = apply(rot, &half);
                let offset: Vec<f64> = (0..WIDTH)
                    .map(|i| centres[u][i] + if i < WIDTH / 2 { shift } else { 0.0 })
                    .collect();
                [
                    offset.iter().zip(&dir).map(|(c, d)| c - d).collect(),
                    offset.iter().zip(&dir).map(|(c, d)| c + d).collect(),
                ]
            })
            .collect()
    };

    let rot1 = identity(WIDTH);
    let rot2 = paired_rotation(WIDTH, ROTATION);
    let rotate_l = |l: &[Vec<f64>], r: &[Vec<f64>]| {
        let sigma = matmul(l, &transpose(l));
        cholesky(&matmul(&matmul(r, &sigma), &transpose(r)))
    };

    let source1 = DomainSpec {
        id: "source-1".into(),
        class_means: means_for(&rot1, 0.0),
        transforms: base_l.clone(),
        label_noise: LABEL_NOISE,
        count: PER_DOMAIN,
        seed: mix_seed(seed, 1),
    };
    let source2 = DomainSpec {
        id: "source-2".into(),
        class_means: means_for(&rot2, 0.0),
        transforms: base_l.iter().map(|l| rotate_l(l, &rot2)).collect(),
        label_noise: LABEL_NOISE,
        count: PER_DOMAIN,
        seed: mix_seed(seed, 2),
    };
    let target_l = (0..modalities)
        .map(|_| random_transform(&mut stream, WIDTH, 0.6, 1.6, 0.3))
        .collect();
    let target = DomainSpec {
        id: "target".into(),
        class_means: means_for(&rot1, TARGET_SHIFT),
        transforms: target_l,
        label_noise: LABEL_NOISE,
        count: PER_DOMAIN,
        seed: mix_seed(seed, 3),
    };
    BenchmarkDomains {
        sources: vec![source1, source2],
        target,
    }
}

/// Three domains for the gap diagnostic: domains 1 and 2 share a covariance
/// transform and differ only in their means; domain 3 uses twice that
/// transform.
pub fn gap_triplet(seed: u64, count: usize) -> [DomainSpec; 3] {
    let mut stream = GaussianStream::new(mix_seed(seed, 10));
    let width = 4;
    let l = random_transform(&mut stream, width, 0.8, 1.2, 0.2);
    let mut means = || -> Vec<[Vec<f64>; 2]> {
        let a: Vec<f64> = (0..width).map(|_| stream.normal()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        vec![[a, b]]
    };
    let m1 = means();
    let m2 = means();
    let m3 = means();
    let doubled: Vec<Vec<f64>> = l.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
    let make = |id: &str, class_means, transform, salt| DomainSpec {
        id: id.into(),
        class_means,
        transforms: vec![transform],
        label_noise: 0.0,
        count,
        seed: mix_seed(seed, salt),
    };
    [
        make("domain-1", m1, l.clone(), 11),
        make("domain-2", m2, l, 12),
        make("domain-3", m3, doubled, 13),
    ]
}

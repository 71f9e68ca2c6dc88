//! Scalar objectives.
//!
//! Every loss is built as nodes in a caller-supplied [`Graph`] so gradients
//! reach features and parameters through a single backward pass. The
//! `*_value` helpers evaluate on plain tensors in a throwaway graph.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgraph::{Graph, Tensor, Var};

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Weights of the adaptation terms and the overall adaptation strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for AdaptWeights {
    fn default() -> Self {
        AdaptWeights {
            alpha: 10.0,
            beta: 0.1,
            gamma: 10.0,
            eta: 0.1,
            lambda: 10.0,
        }
    }
}

impl AdaptWeights {
    pub fn baseline() -> Self {
        AdaptWeights {
            lambda: 0.0,
            ..AdaptWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub coral: f64,
    pub mdd: f64,
    pub entropy: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.task, self.coral, self.mdd, self.entropy, self.adversarial, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean of a slice of breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.task += b.task;
            acc.coral += b.coral;
            acc.mdd += b.mdd;
            acc.entropy += b.entropy;
            acc.adversarial += b.adversarial;
            acc.total += b.total;
        }
        LossBreakdown {
            task: acc.task / n,
            coral: acc.coral / n,
            mdd: acc.mdd / n,
            entropy: acc.entropy / n,
            adversarial: acc.adversarial / n,
            total: acc.total / n,
        }
    }
}

/// `task + λ(α·coral + β·mdd + γ·entropy + η·adversarial)`.
pub fn combine(
    task: f64,
    coral: f64,
    mdd: f64,
    entropy: f64,
    adversarial: f64,
    w: &AdaptWeights,
) -> LossBreakdown {
    let adapt = w.alpha * coral + w.beta * mdd + w.gamma * entropy + w.eta * adversarial;
    LossBreakdown {
        task,
        coral,
        mdd,
        entropy,
        adversarial,
        total: task + w.lambda * adapt,
    }
}

fn labels_column(y: &[usize]) -> Result<Tensor> {
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::contract(format!("binary label expected, got {bad}")));
    }
    Ok(Tensor::column_vector(y.iter().map(|&v| v as f64).collect()))
}

/// Mean binary cross-entropy of positive-class probabilities `p` (`n x 1`)
/// against labels in `{0, 1}`.
pub fn bce_task(g: &mut Graph, p: Var, y: &[usize]) -> Result<Var> {
    let shape = g.value(p).shape();
    if shape[1] != 1 || shape[0] != y.len() {
        return Err(Error::contract(format!(
            "bce_task: probabilities {shape:?} vs {} labels",
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::contract("bce_task on an empty batch"));
    }
    let yt = labels_column(y)?;
    let one_minus_y = yt.map(|v| 1.0 - v);
    let yv = g.constant(yt);
    let nyv = g.constant(one_minus_y);

    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let logp = g.ln(pc)?;
    let neg = g.scale(pc, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let logq = g.ln(q)?;
    let a = g.mul(yv, logp)?;
    let b = g.mul(nyv, logq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, -1.0))
}

/// Sum of per-stream task losses; `streams` holds one positive-class
/// probability column per modality head followed by the fused head.
pub fn multitask_loss(
    g: &mut Graph,
    streams: &[Var],
    expected_streams: usize,
    y: &[usize],
) -> Result<Var> {
    if streams.len() != expected_streams || streams.is_empty() {
        return Err(Error::contract(format!(
            "multitask_loss expects {expected_streams} streams, got {}",
            streams.len()
        )));
    }
    let mut total = bce_task(g, streams[0], y)?;
    for &s in &streams[1..] {
        let l = bce_task(g, s, y)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// `(1/n)(MᵀM − (1/n)(1ᵀM)ᵀ(1ᵀM))` for an `n x d` batch.
pub fn covariance(g: &mut Graph, m: Var) -> Result<Var> {
    let n = g.value(m).rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let nf = n as f64;
    let mt = g.transpose(m);
    let gram = g.matmul(mt, m)?;
    let s = g.sum_cols(m);
    let st = g.transpose(s);
    let outer = g.matmul(st, s)?;
    let outer = g.scale(outer, 1.0 / nf);
    let diff = g.sub(gram, outer)?;
    Ok(g.scale(diff, 1.0 / nf))
}

/// `‖C_S − C_T‖²_F / (4d²)`.
pub fn coral(g: &mut Graph, source: Var, target: Var) -> Result<Var> {
    let (ds, dt) = (g.value(source).cols(), g.value(target).cols());
    if ds != dt {
        return Err(Error::Shape {
            op: "coral",
            left: g.value(source).shape(),
            right: g.value(target).shape(),
        });
    }
    let cs = covariance(g, source)?;
    let ct = covariance(g, target)?;
    let diff = g.sub(cs, ct)?;
    let sq = g.squared_norm(diff);
    let d = ds as f64;
    Ok(g.scale(sq, 1.0 / (4.0 * d * d)))
}

/// Index pairs `(i, j)` of same-label samples. Each label subset, kept in
/// batch order, is paired with its own circular shift by one. Subsets of size
/// below two and `None` labels do not participate.
pub fn shift_pairs(labels: &[Option<usize>]) -> Vec<(usize, usize)> {
    pairs_from_subsets(label_subsets(labels))
}

/// Like [`shift_pairs`] but each subset is shuffled before shifting.
pub fn random_pairs<R: Rng + ?Sized>(labels: &[Option<usize>], rng: &mut R) -> Vec<(usize, usize)> {
    let mut subsets = label_subsets(labels);
    for s in &mut subsets {
        s.shuffle(rng);
    }
    pairs_from_subsets(subsets)
}

fn label_subsets(labels: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == Some(c))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

fn pairs_from_subsets(subsets: Vec<Vec<usize>>) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in subsets.into_iter().filter(|s| s.len() >= 2) {
        for k in 0..s.len() {
            pairs.push((s[k], s[(k + 1) % s.len()]));
        }
    }
    pairs
}

/// Mean squared distance over the given row pairs of `x`, or a constant zero
/// when there are none.
fn paired_mean_sq(g: &mut Graph, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xa = g.select_rows(x, &a)?;
    let xb = g.select_rows(x, &b)?;
    let d = g.sub(xa, xb)?;
    let sq = g.squared_norm(d);
    Ok(g.scale(sq, 1.0 / pairs.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MddOptions {
    /// Negates the source–target term, turning it into a divergence to
    /// maximise while the intra-domain terms stay minimised.
    pub maximize_inter: bool,
}

/// Density-divergence loss with explicit intra-domain pairings.
pub fn mdd_with_pairs(
    g: &mut Graph,
    source: Var,
    target: Var,
    source_pairs: &[(usize, usize)],
    target_pairs: &[(usize, usize)],
    opts: MddOptions,
) -> Result<Var> {
    let (s, t) = (g.value(source).shape(), g.value(target).shape());
    if s != t {
        return Err(Error::Shape {
            op: "mdd",
            left: s,
            right: t,
        });
    }
    let n = s[0];
    if n == 0 {
        return Err(Error::contract("mdd on an empty batch"));
    }
    let d = g.sub(source, target)?;
    let sq = g.squared_norm(d);
    let sign = if opts.maximize_inter { -1.0 } else { 1.0 };
    let inter = g.scale(sq, sign / n as f64);
    let intra_s = paired_mean_sq(g, source, source_pairs)?;
    let intra_t = paired_mean_sq(g, target, target_pairs)?;
    let partial = g.add(inter, intra_s)?;
    g.add(partial, intra_t)
}

/// Density-divergence loss with circular-shift pairing. Target rows whose
/// pseudo-label is `None` are excluded from the target term.
pub fn mdd(
    g: &mut Graph,
    source: Var,
    target: Var,
    source_labels: &[usize],
    target_pseudo: &[Option<usize>],
) -> Result<Var> {
    let n = g.value(source).rows();
    if source_labels.len() != n || target_pseudo.len() != g.value(target).rows() {
        return Err(Error::contract(format!(
            "mdd: {} source labels and {} pseudo-labels for batches of {n} and {} rows",
            source_labels.len(),
            target_pseudo.len(),
            g.value(target).rows()
        )));
    }
    let sl: Vec<Option<usize>> = source_labels.iter().map(|&v| Some(v)).collect();
    let sp = shift_pairs(&sl);
    let tp = shift_pairs(target_pseudo);
    mdd_with_pairs(g, source, target, &sp, &tp, MddOptions::default())
}

/// Mean over rows of `Σ_c p_c log p_c` with `p = softmax(logits)`; lies in
/// `[−ln C, 0]`. `log p` is floored at `ln(1e-12)` so `0·log 0` evaluates
/// to zero.
pub fn neg_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let [rows, cols] = g.value(logits).shape();
    if rows == 0 || cols == 0 {
        return Err(Error::contract("neg_entropy on an empty batch"));
    }
    let p = g.softmax(logits)?;
    let lp = g.log_softmax(logits)?;
    let lp = g.clamp(lp, PROB_EPS.ln(), 0.0);
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    let mean = g.scale(s, 1.0 / rows as f64);
    // Rounding can push a near-uniform batch a few ulps past −ln C.
    Ok(g.clamp(mean, -(cols as f64).ln(), 0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyWeightForm {
    /// `1 + e^{−H(p)}`.
    #[default]
    InverseEntropy,
    /// `1 + e^{−max_c p_c}`, the literal reading applied to the confidence.
    Confidence,
}

/// Sample weight from a class-probability row, in `(1, 2]` for
/// [`EntropyWeightForm::InverseEntropy`].
pub fn entropy_weight(p: &[f64], form: EntropyWeightForm) -> f64 {
    match form {
        EntropyWeightForm::InverseEntropy => {
            let h: f64 = p
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -v * v.ln())
                .sum();
            1.0 + (-h).exp()
        }
        EntropyWeightForm::Confidence => {
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 + (-m).exp()
        }
    }
}

/// Entropy-weighted domain cross-entropy with source labelled 1 and target
/// labelled 0:
/// `−[Σ w_S log d_S / Σ w_S + Σ w_T log(1 − d_T) / Σ w_T] / 2`.
pub fn adversarial_domain_loss(
    g: &mut Graph,
    d_source: Var,
    d_target: Var,
    w_source: &[f64],
    w_target: &[f64],
) -> Result<Var> {
    let side = |g: &mut Graph, d: Var, w: &[f64], positive: bool| -> Result<Var> {
        let shape = g.value(d).shape();
        if shape[1] != 1 || shape[0] != w.len() || w.is_empty() {
            return Err(Error::contract(format!(
                "adversarial_domain_loss: outputs {shape:?} vs {} weights",
                w.len()
            )));
        }
        if let Some(bad) = g.value(d).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::numeric("adversarial_domain_loss", format!("domain probability {bad}")));
        }
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::contract(format!("entropy weight {bad} must be > 0")));
        }
        let total: f64 = w.iter().sum();
        let wn = g.constant(Tensor::column_vector(w.iter().map(|v| v / total).collect()));
        let dc = g.clamp(d, PROB_EPS, 1.0 - PROB_EPS);
        let arg = if positive {
            dc
        } else {
            let neg = g.scale(dc, -1.0);
            g.add_scalar(neg, 1.0)
        };
        let l = g.ln(arg)?;
        let wl = g.mul(wn, l)?;
        Ok(g.sum(wl))
    };
    let s = side(g, d_source, w_source, true)?;
    let t = side(g, d_target, w_target, false)?;
    let both = g.add(s, t)?;
    Ok(g.scale(both, -0.5))
}

fn scalar_of(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    g.value(v).item()
}

pub fn covariance_value(m: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let c = covariance(&mut g, x)?;
    Ok(g.value(c).clone())
}

pub fn coral_value(source: &Tensor, target: &Tensor) -> Result<f64> {
    scalar_of(|g| {
        let s = g.constant(source.clone());
        let t = g.constant(target.clone());
        coral(g, s, t)
    })
}

pub fn mdd_value(
    source: &Tensor,
    target: &Tensor,
    source_labels: &[usize],
    target_pseudo: &[Option<usize>],
) -> Result<f64> {
    scalar_of(|g| {
        let s = g.constant(source.clone());
        let t = g.constant(target.clone());
        mdd(g, s, t, source_labels, target_pseudo)
    })
}

pub fn neg_entropy_value(logits: &Tensor) -> Result<f64> {
    scalar_of(|g| {
        let l = g.constant(logits.clone());
        neg_entropy(g, l)
    })
}

pub fn bce_value(p: &[f64], y: &[usize]) -> Result<f64> {
    scalar_of(|g| {
        let pv = g.constant(Tensor::column_vector(p.to_vec()));
        bce_task(g, pv, y)
    })
}

pub fn adversarial_value(d_source: &[f64], d_target: &[f64], w_source: &[f64], w_target: &[f64]) -> Result<f64> {
    scalar_of(|g| {
        let s = g.constant(Tensor::column_vector(d_source.to_vec()));
        let t = g.constant(Tensor::column_vector(d_target.to_vec()));
        adversarial_domain_loss(g, s, t, w_source, w_target)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!(bce_value(&[1.0], &[1]).unwrap().abs() < 1e-11);
        assert!((bce_value(&[0.5], &[1]).unwrap() - LN2).abs() < 1e-15);
        assert!((bce_value(&[0.5, 0.5], &[1, 0]).unwrap() - LN2).abs() < 1e-15);
        assert!(bce_value(&[0.5, 0.5], &[1]).is_err());
    }

    #[test]
    fn covariance_examples() {
        let c = covariance_value(&m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        let c = covariance_value(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(c.data(), &[0.25, -0.25, -0.25, 0.25]);
        let c = covariance_value(&m(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(c.data(), &[1.0]);
        assert!(matches!(
            covariance_value(&m(&[&[1.0, 2.0]])),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn coral_examples() {
        let s = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = m(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(coral_value(&s, &s).unwrap(), 0.0);
        assert!((coral_value(&s, &t).unwrap() - 0.03125).abs() < 1e-15);
        let shifted = s.map(|v| v + 3.5);
        assert!((coral_value(&shifted, &t).unwrap() - 0.03125).abs() < 1e-12);
        assert!(coral_value(&s, &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn mdd_examples() {
        let s = m(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let v = mdd_value(&s, &s, &[1, 1], &[Some(1), Some(1)]).unwrap();
        assert_eq!(v, 8.0);

        let same = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(mdd_value(&same, &same, &[0, 0], &[Some(0), Some(0)]).unwrap(), 0.0);

        // Singleton label subsets: only the inter-domain term survives.
        let t = m(&[&[1.0, 0.0], &[2.0, 1.0]]);
        let v = mdd_value(&s, &t, &[0, 1], &[None, None]).unwrap();
        assert_eq!(v, (1.0 + 1.0) / 2.0);

        assert!(mdd_value(&s, &Tensor::zeros(3, 2), &[0, 1], &[None; 3]).is_err());
    }

    #[test]
    fn shift_pairs_cover_each_member_once() {
        let labels = [Some(0), Some(1), Some(0), None, Some(0), Some(1), Some(2)];
        let pairs = shift_pairs(&labels);
        assert_eq!(pairs, vec![(0, 2), (2, 4), (4, 0), (1, 5), (5, 1)]);
    }

    #[test]
    fn neg_entropy_examples() {
        let v = neg_entropy_value(&m(&[&[0.0, 0.0]])).unwrap();
        assert!((v + LN2).abs() < 1e-15);
        let v = neg_entropy_value(&m(&[&[0.0, -800.0]])).unwrap();
        assert_eq!(v, 0.0);
        let z = (0.9f64 / 0.1).ln();
        let v = neg_entropy_value(&m(&[&[z, 0.0]])).unwrap();
        assert!((v - (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln())).abs() < 1e-12);
        assert!((v + 0.325083).abs() < 1e-6);
    }

    #[test]
    fn entropy_weight_examples() {
        let f = EntropyWeightForm::InverseEntropy;
        assert_eq!(entropy_weight(&[1.0, 0.0], f), 2.0);
        assert!((entropy_weight(&[0.5, 0.5], f) - 1.5).abs() < 1e-15);
        assert!((entropy_weight(&[0.9, 0.1], f) - 1.72246).abs() < 1e-5);
        let c = entropy_weight(&[0.9, 0.1], EntropyWeightForm::Confidence);
        assert!((c - (1.0 + (-0.9f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn adversarial_examples() {
        let v = adversarial_value(&[0.5], &[0.5], &[1.0], &[1.0]).unwrap();
        assert!((v - LN2).abs() < 1e-15);
        let v = adversarial_value(&[1.0], &[0.0], &[1.0], &[1.0]).unwrap();
        assert!(v.abs() < 1e-11);
        let v = adversarial_value(&[0.8], &[0.2], &[1.0], &[1.0]).unwrap();
        assert!((v + 0.8f64.ln()).abs() < 1e-15);
        assert!((v - 0.22314).abs() < 1e-5);
        assert!(adversarial_value(&[1.5], &[0.2], &[1.0], &[1.0]).is_err());
        assert!(adversarial_value(&[0.5], &[0.2], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn multitask_examples() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::column_vector(vec![0.5]));
        let right = g.constant(Tensor::column_vector(vec![1.0]));
        let l = multitask_loss(&mut g, &[half, half, half], 3, &[1]).unwrap();
        assert!((g.value(l).item().unwrap() - 3.0 * LN2).abs() < 1e-14);
        let l = multitask_loss(&mut g, &[right, half, half], 3, &[1]).unwrap();
        assert!((g.value(l).item().unwrap() - 2.0 * LN2).abs() < 1e-11);
        let l = multitask_loss(&mut g, &[right, right, right], 3, &[1]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-11);
        assert!(multitask_loss(&mut g, &[half, half], 3, &[1]).is_err());
    }

    #[test]
    fn combine_examples() {
        let w = AdaptWeights::default();
        let b = combine(1.0, 0.1, 0.2, -0.5, 0.7, &w);
        assert!((b.total + 38.1).abs() < 1e-12);
        let b = combine(0.4, 1.0, 2.0, -0.3, 0.9, &AdaptWeights::baseline());
        assert_eq!(b.total, 0.4);
        let z = combine(0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(AdaptWeights::default().validate().is_ok());
        let bad = AdaptWeights {
            beta: -1.0,
            ..AdaptWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn breakdown_json_keys() {
        let v = serde_json::to_value(LossBreakdown::default()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        for k in ["task", "coral", "mdd", "entropy", "adversarial", "total"] {
            assert!(keys.contains(&k.to_string()));
        }
    }
}

//! Finite-difference sweep over every differentiable loss.
//!
//! Each check perturbs one input (a feature batch or one model parameter
//! tensor) and compares the tape gradient to central differences. Quantities
//! that training deliberately treats as constants (class probabilities in
//! the conditional map, entropy weights, pseudo-labels) are frozen at the
//! base point so both sides see the same function. Gradient reversal is left
//! out: it is the one node whose backward pass is not the derivative of its
//! forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{self, AdaptWeights, EntropyWeightForm, MddOptions};
use crate::model::{FusionSpec, ModelArch, ModelBundle, ModelDims, Net};
use crate::ndgraph::{finite_diff_check, Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).expect("sized buffer")
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let p = g.softmax(x).expect("finite logits");
    g.value(p).clone()
}

fn entropy_weights(p: &Tensor) -> Vec<f64> {
    (0..p.rows())
        .map(|r| losses::entropy_weight(p.row(r), EntropyWeightForm::InverseEntropy))
        .collect()
}

const LABELS: [usize; 4] = [0, 1, 1, 0];
const PSEUDO: [Option<usize>; 4] = [Some(1), Some(1), None, Some(1)];

/// Loss-level checks on a `4 x 3` batch.
fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let x = random(rng, 4, 3);
    let other = random(rng, 4, 3);
    let probs = softmax_rows(&random(rng, 4, 2));
    let d_other = Tensor::column_vector(vec![0.3, 0.6, 0.45, 0.8]);
    let w_other = vec![1.2, 1.7, 1.05, 1.4];
    let mix = random(rng, 3, 3);

    let sl: Vec<Option<usize>> = LABELS.iter().map(|&y| Some(y)).collect();
    let sp = losses::shift_pairs(&sl);
    let tp = losses::shift_pairs(&PSEUDO);

    type Check<'a> = (&'static str, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>);
    let checks: Vec<Check> = vec![
        (
            "bce_task",
            Box::new(|g, x| {
                let c = g.select_col(x, 0)?;
                let p = g.sigmoid(c);
                losses::bce_task(g, p, &LABELS)
            }),
        ),
        (
            "multitask_loss",
            Box::new(|g, x| {
                let streams = (0..3)
                    .map(|c| {
                        let col = g.select_col(x, c)?;
                        Ok(g.sigmoid(col))
                    })
                    .collect::<Result<Vec<_>>>()?;
                losses::multitask_loss(g, &streams, 3, &LABELS)
            }),
        ),
        (
            "covariance",
            Box::new(|g, x| {
                let c = losses::covariance(g, x)?;
                let w = g.constant(mix.clone());
                let cw = g.mul(c, w)?;
                Ok(g.sum(cw))
            }),
        ),
        (
            "coral.source",
            Box::new(|g, x| {
                let t = g.constant(other.clone());
                losses::coral(g, x, t)
            }),
        ),
        (
            "coral.target",
            Box::new(|g, x| {
                let s = g.constant(other.clone());
                losses::coral(g, s, x)
            }),
        ),
        (
            "mdd.source",
            Box::new(|g, x| {
                let t = g.constant(other.clone());
                losses::mdd_with_pairs(g, x, t, &sp, &tp, MddOptions::default())
            }),
        ),
        (
            "mdd.target",
            Box::new(|g, x| {
                let s = g.constant(other.clone());
                losses::mdd_with_pairs(g, s, x, &sp, &tp, MddOptions::default())
            }),
        ),
        (
            "mdd.maximize_inter",
            Box::new(|g, x| {
                let t = g.constant(other.clone());
                losses::mdd_with_pairs(g, x, t, &sp, &tp, MddOptions { maximize_inter: true })
            }),
        ),
        ("neg_entropy", Box::new(losses::neg_entropy)),
        (
            "adversarial.source",
            Box::new(|g, x| {
                let c = g.select_col(x, 1)?;
                let d = g.sigmoid(c);
                let dt = g.constant(d_other.clone());
                losses::adversarial_domain_loss(g, d, dt, &w_other, &[1.0, 1.5, 1.9, 1.1])
            }),
        ),
        (
            "adversarial.target",
            Box::new(|g, x| {
                let c = g.select_col(x, 2)?;
                let d = g.sigmoid(c);
                let ds = g.constant(d_other.clone());
                losses::adversarial_domain_loss(g, ds, d, &w_other, &[1.0, 1.5, 1.9, 1.1])
            }),
        ),
        (
            "conditional_map",
            Box::new(|g, x| {
                let p = g.constant(probs.clone());
                let h = g.row_outer(x, p)?;
                let sq = g.mul(h, h)?;
                let s = g.sum(sq);
                let e = g.exp(h);
                let se = g.sum(e);
                g.add(s, se)
            }),
        ),
        (
            "log_softmax",
            Box::new(|g, x| {
                let l = g.log_softmax(x)?;
                let w = g.constant(mix.transpose().select_rows(&[0, 1, 2, 0]));
                let lw = g.mul(l, w)?;
                Ok(g.sum(lw))
            }),
        ),
    ];

    checks
        .into_iter()
        .map(|(name, f)| {
            Ok(GradCheck {
                name: name.to_string(),
                max_rel_error: finite_diff_check(f, &x, STEP)?,
            })
        })
        .collect()
}

fn small_arch(fusion: FusionSpec) -> Result<ModelArch> {
    ModelArch::new(
        vec![3, 2],
        ModelDims {
            encoder_hidden: vec![4],
            unimodal_width: 3,
            fused_width: 3,
            classes: 2,
            disc_hidden: vec![4],
            fusion,
        },
    )
}

/// Frozen pieces of the adaptation objective at the base parameters.
struct Frozen {
    xs: Vec<Tensor>,
    xt: Vec<Tensor>,
    ps: Tensor,
    pt: Tensor,
    ws: Vec<f64>,
    wt: Vec<f64>,
    source_pairs: Vec<(usize, usize)>,
    target_pairs: Vec<(usize, usize)>,
}

/// Full objective with every loss active and no reversal, as a function of
/// whatever parameter leaves `params` holds.
fn full_objective(g: &mut Graph, arch: &ModelArch, params: &crate::model::Params<Var>, fz: &Frozen) -> Result<Var> {
    let w = AdaptWeights {
        lambda: 1.0,
        ..AdaptWeights::default()
    };
    let net = Net::new(arch, params);
    let xs: Vec<Var> = fz.xs.iter().map(|t| g.constant(t.clone())).collect();
    let xt: Vec<Var> = fz.xt.iter().map(|t| g.constant(t.clone())).collect();
    let src = net.forward(g, &xs, false)?;
    let tgt = net.forward(g, &xt, true)?;
    let mut pos = Vec::new();
    for &l in &src.logits {
        let p = g.softmax(l)?;
        pos.push(g.select_col(p, 1)?);
    }
    let task = losses::multitask_loss(g, &pos, arch.streams(), &LABELS)?;
    let coral = losses::coral(g, src.fused, tgt.fused)?;
    let mdd = losses::mdd_with_pairs(
        g,
        src.fused,
        tgt.fused,
        &fz.source_pairs,
        &fz.target_pairs,
        MddOptions::default(),
    )?;
    let both = g.vstack(&[src.fused_logits(), tgt.fused_logits()])?;
    let ent = losses::neg_entropy(g, both)?;
    let ps = g.constant(fz.ps.clone());
    let pt = g.constant(fz.pt.clone());
    let hs = g.row_outer(src.fused, ps)?;
    let ht = g.row_outer(tgt.fused, pt)?;
    let ds = net.discriminate(g, hs)?;
    let dt = net.discriminate(g, ht)?;
    let adv = losses::adversarial_domain_loss(g, ds, dt, &fz.ws, &fz.wt)?;

    let terms = [(coral, w.alpha), (mdd, w.beta), (ent, w.gamma), (adv, w.eta)];
    let mut total = task;
    for (v, k) in terms {
        let s = g.scale(v, k * w.lambda);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Full-objective checks with respect to every parameter tensor.
fn model_checks(rng: &mut ChaCha8Rng, fusion: FusionSpec, tag: &str, seed: u64) -> Result<Vec<GradCheck>> {
    let arch = small_arch(fusion)?;
    let model = ModelBundle::init(arch.clone(), seed)?;
    let xs: Vec<Tensor> = arch.input_widths.iter().map(|&w| random(rng, 4, w)).collect();
    let xt: Vec<Tensor> = arch.input_widths.iter().map(|&w| random(rng, 4, w)).collect();
    let ls = model.fused_logits(&xs)?;
    let lt = model.fused_logits(&xt)?;
    let (ps, pt) = (softmax_rows(&ls), softmax_rows(&lt));
    let sl: Vec<Option<usize>> = LABELS.iter().map(|&y| Some(y)).collect();
    let fz = Frozen {
        ws: entropy_weights(&ps),
        wt: entropy_weights(&pt),
        ps,
        pt,
        xs,
        xt,
        source_pairs: losses::shift_pairs(&sl),
        target_pairs: losses::shift_pairs(&PSEUDO),
    };

    let mut out = Vec::new();
    for (name, _, value) in model.params.entries() {
        let err = finite_diff_check(
            |g, x| {
                let bound = model.bind_constant(g);
                let params = bound.map(|n, _, &v| if n == name { x } else { v });
                full_objective(g, &arch, &params, &fz)
            },
            value,
            STEP,
        )?;
        out.push(GradCheck {
            name: format!("{tag}.{name}"),
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// Runs every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = loss_checks(&mut rng)?;
    checks.extend(model_checks(&mut rng, FusionSpec::GatedConcat, "gated", seed)?);
    checks.extend(model_checks(
        &mut rng,
        FusionSpec::CrossAttention {
            heads: 2,
            head_width: 2,
        },
        "attention",
        seed,
    )?);
    Ok(SuiteReport {
        step: STEP,
        tolerance: TOLERANCE,
        checks,
    })
}

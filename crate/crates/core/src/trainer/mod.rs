//! Progressive multi-source training.
//!
//! Each epoch walks the source domains one after another. A step pairs `n`
//! labelled source samples with `n` target samples, builds the full
//! objective in a fresh graph and applies one optimiser update. The
//! adversarial branch runs through a gradient-reversal node whose scale
//! follows [`grl_schedule`] of the step-based training progress.

mod optim;
mod report;

pub use optim::{OptimizerKind, OptimizerState};
pub use report::{DomainVisit, EpochRecord, FinalMetrics, RunReport};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalx::accuracy_f1;
use crate::losses::{
    self, combine, AdaptWeights, EntropyWeightForm, LossBreakdown, MddOptions,
};
use crate::model::{argmax, grl_schedule, ModelArch, ModelBundle, ModelDims, Net, Params};
use crate::ndgraph::{Graph, Tensor, Var};
use crate::synthdata::{DomainDataset, Role};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MddPairing {
    /// Circular shift by one within each label subset, in batch order.
    #[default]
    Shift,
    /// Shuffle each label subset before shifting.
    Random,
}

/// What the entropy term takes a softmax over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyInput {
    /// Fused-head class logits.
    #[default]
    Logits,
    /// Fused feature vectors themselves.
    Features,
}

/// Every dial of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub weights: AdaptWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub model: ModelDims,
    /// Let adaptation gradients reach encoder/fusion through target samples.
    pub target_grad: bool,
    /// Target rows whose top probability is below this are left out of the
    /// density-divergence target term.
    pub pseudo_threshold: f64,
    pub seed: u64,
    /// With `false` the adversarial gradient reaches the features unreversed.
    pub grl: bool,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub mdd_pairing: MddPairing,
    pub mdd_maximize_inter: bool,
    pub entropy_weight: EntropyWeightForm,
    pub entropy_input: EntropyInput,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            weights: AdaptWeights::default(),
            lr: 1e-4,
            weight_decay: 5e-5,
            batch_size: 32,
            epochs: 20,
            optimizer: OptimizerKind::DecoupledAdaptiveMoment,
            model: ModelDims::default(),
            target_grad: false,
            pseudo_threshold: 0.0,
            seed: 0,
            grl: true,
            grad_clip: Some(10.0),
            mdd_pairing: MddPairing::Shift,
            mdd_maximize_inter: false,
            entropy_weight: EntropyWeightForm::InverseEntropy,
            entropy_input: EntropyInput::Logits,
        }
    }
}

impl AdaptConfig {
    /// Defaults with the step size and epoch count used for the synthetic
    /// benchmarks: `lr = 1e-3`, 10 epochs, which keeps a five-seed comparison
    /// to a few seconds.
    pub fn desk_scale() -> Self {
        AdaptConfig {
            lr: 1e-3,
            epochs: 10,
            ..AdaptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::contract(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::contract(format!("batch_size {} < 2", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.pseudo_threshold) {
            return Err(Error::contract(format!(
                "pseudo_threshold {} outside [0, 1)",
                self.pseudo_threshold
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::contract(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Position within a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub global_step: u64,
    pub total_steps: u64,
    pub epoch: usize,
    pub domain: usize,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(total_steps: u64, optimizer: OptimizerState) -> Self {
        TrainState {
            global_step: 0,
            total_steps,
            epoch: 0,
            domain: 0,
            optimizer,
        }
    }

    /// `global_step / total_steps`.
    pub fn progress(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.global_step as f64 / self.total_steps as f64
        }
    }
}

/// `n` labelled source rows and `n` unlabelled target rows.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    pub source: Vec<Tensor>,
    pub source_labels: Vec<usize>,
    pub target: Vec<Tensor>,
}

fn draw_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if len >= n {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Uniform draw of `n` rows from each dataset, without replacement when the
/// dataset is large enough and with replacement otherwise.
pub fn sample_paired_batch<R: Rng + ?Sized>(
    source: &DomainDataset,
    target: &DomainDataset,
    n: usize,
    rng: &mut R,
) -> Result<PairedBatch> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("cannot sample from an empty dataset"));
    }
    let source_idx = draw_indices(source.len(), n, rng);
    let target_idx = draw_indices(target.len(), n, rng);
    Ok(PairedBatch {
        source: source.batch(&source_idx),
        source_labels: source.labels(&source_idx)?,
        target: target.batch(&target_idx),
        source_idx,
        target_idx,
    })
}

/// Domain index of every step in one epoch: all steps of the first source,
/// then the second, and so on, with `⌈len/n⌉` steps per domain.
pub fn domain_cycle(sizes: &[usize], n: usize) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::contract("domain_cycle needs at least one source"));
    }
    if n == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    Ok(sizes
        .iter()
        .enumerate()
        .flat_map(|(d, &len)| std::iter::repeat_n(d, len.div_ceil(n)))
        .collect())
}

/// Argmax class per row (ties to the lower index); rows whose top
/// probability is below `threshold` come back as `None`.
pub fn pseudo_label(logits: &Tensor, threshold: f64) -> Vec<Option<usize>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let c = argmax(row);
            let max = row[c];
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let p = 1.0 / denom;
            (p >= threshold).then_some(c)
        })
        .collect()
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Nodes of one step's objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub params: Params<Var>,
    pub task: Var,
    /// `None` when `λ = 0`: the adaptation branch is not built.
    pub adapt: Option<AdaptTerms>,
    pub total: Var,
    pub pseudo_labels: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptTerms {
    pub coral: Var,
    pub mdd: Var,
    pub entropy: Var,
    pub adversarial: Var,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph, w: &AdaptWeights) -> Result<LossBreakdown> {
        let v = |x: Var| g.value(x).item();
        let task = v(self.task)?;
        Ok(match &self.adapt {
            None => LossBreakdown {
                task,
                total: task,
                ..LossBreakdown::default()
            },
            Some(a) => combine(task, v(a.coral)?, v(a.mdd)?, v(a.entropy)?, v(a.adversarial)?, w),
        })
    }
}

/// Builds the full step objective in `g`.
///
/// Source rows go through the live parameters. Target rows go through
/// stop-gradient copies of the encoder and fusion parameters unless
/// `cfg.target_grad` is set. The fused features enter the conditional map
/// through `grad_reverse(·, grl_scale)` (or unchanged when `cfg.grl` is
/// off); class probabilities entering the map and the entropy weights are
/// constants. `pseudo_override` replaces the pseudo-labels computed from the
/// current target logits.
pub fn build_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &ModelBundle,
    batch: &PairedBatch,
    cfg: &AdaptConfig,
    grl_scale: f64,
    pseudo_override: Option<&[Option<usize>]>,
    rng: &mut R,
) -> Result<Objective> {
    let arch = &model.arch;
    let params = model.bind(g);
    let net = Net::new(arch, &params);

    let xs: Vec<Var> = batch.source.iter().map(|t| g.constant(t.clone())).collect();
    let src = net.forward(g, &xs, false)?;
    let mut pos = Vec::with_capacity(src.logits.len());
    for &l in &src.logits {
        let p = g.softmax(l)?;
        pos.push(g.select_col(p, 1)?);
    }
    let task = losses::multitask_loss(g, &pos, arch.streams(), &batch.source_labels)?;

    let w = cfg.weights;
    if w.lambda == 0.0 {
        return Ok(Objective {
            params,
            task,
            adapt: None,
            total: task,
            pseudo_labels: Vec::new(),
        });
    }

    let target_params;
    let target_net = if cfg.target_grad {
        net
    } else {
        target_params = params.map(|_, group, &v| {
            if group.is_feature_extractor() {
                g.stop_gradient(v)
            } else {
                v
            }
        });
        Net::new(arch, &target_params)
    };
    let xt: Vec<Var> = batch.target.iter().map(|t| g.constant(t.clone())).collect();
    let tgt = target_net.forward(g, &xt, true)?;
    let (ms, mt) = (src.fused, tgt.fused);
    let (ls, lt) = (src.fused_logits(), tgt.fused_logits());

    let coral = losses::coral(g, ms, mt)?;

    let pseudo_labels = match pseudo_override {
        Some(p) => p.to_vec(),
        None => pseudo_label(g.value(lt), cfg.pseudo_threshold),
    };
    let src_labels: Vec<Option<usize>> = batch.source_labels.iter().map(|&y| Some(y)).collect();
    let (sp, tp) = match cfg.mdd_pairing {
        MddPairing::Shift => (losses::shift_pairs(&src_labels), losses::shift_pairs(&pseudo_labels)),
        MddPairing::Random => (
            losses::random_pairs(&src_labels, rng),
            losses::random_pairs(&pseudo_labels, rng),
        ),
    };
    let mdd = losses::mdd_with_pairs(
        g,
        ms,
        mt,
        &sp,
        &tp,
        MddOptions {
            maximize_inter: cfg.mdd_maximize_inter,
        },
    )?;

    let both = match cfg.entropy_input {
        EntropyInput::Logits => g.vstack(&[ls, lt])?,
        EntropyInput::Features => g.vstack(&[ms, mt])?,
    };
    let entropy = losses::neg_entropy(g, both)?;

    let ps = softmax_rows(g.value(ls));
    let pt = softmax_rows(g.value(lt));
    let weights = |p: &Tensor| -> Vec<f64> {
        (0..p.rows())
            .map(|r| losses::entropy_weight(p.row(r), cfg.entropy_weight))
            .collect()
    };
    let (ws, wt) = (weights(&ps), weights(&pt));
    let domain_prob = |g: &mut Graph, m: Var, p: Tensor| -> Result<Var> {
        let m = if cfg.grl { g.grad_reverse(m, grl_scale)? } else { m };
        let pc = g.constant(p);
        let h = g.row_outer(m, pc)?;
        net.discriminate(g, h)
    };
    let ds = domain_prob(g, ms, ps)?;
    let dt = domain_prob(g, mt, pt)?;
    let adversarial = losses::adversarial_domain_loss(g, ds, dt, &ws, &wt)?;

    let a = g.scale(coral, w.alpha);
    let b = g.scale(mdd, w.beta);
    let c = g.scale(entropy, w.gamma);
    let d = g.scale(adversarial, w.eta);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    let adapt = g.add(ab, cd)?;
    let adapt = g.scale(adapt, w.lambda);
    let total = g.add(task, adapt)?;

    Ok(Objective {
        params,
        task,
        adapt: Some(AdaptTerms {
            coral,
            mdd,
            entropy,
            adversarial,
        }),
        total,
        pseudo_labels,
    })
}

/// Gradients of every parameter after a backward pass; untouched leaves
/// get zeros.
pub fn collect_grads(g: &Graph, params: &Params<Var>) -> Params<Tensor> {
    params.map(|_, _, &v| {
        g.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).rows(), g.value(v).cols()))
    })
}

fn clip_global_norm(grads: &mut Params<Tensor>, max_norm: f64) {
    let norm = grads.leaves().iter().map(|t| t.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.leaves_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One update at an explicit training progress `p`; `step` only labels a
/// divergence error.
#[allow(clippy::too_many_arguments)]
pub fn apply_step<R: Rng + ?Sized>(
    batch: &PairedBatch,
    model: &mut ModelBundle,
    cfg: &AdaptConfig,
    optimizer: &mut OptimizerState,
    progress: f64,
    step: u64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let scale = grl_schedule(progress)?;
    let mut g = Graph::new();
    let obj = build_objective(&mut g, model, batch, cfg, scale, None, rng)?;
    let breakdown = obj.breakdown(&g, &cfg.weights)?;
    if !breakdown.is_finite() || !g.value(obj.total).is_finite() {
        return Err(Error::Divergence { step, breakdown });
    }
    g.backward(obj.total)?;
    let mut grads = collect_grads(&g, &obj.params);
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    optimizer.step(&mut model.params, &grads, cfg.lr, cfg.weight_decay);
    if !model.params.is_finite() {
        return Err(Error::Divergence { step, breakdown });
    }
    Ok(breakdown)
}

/// Advances `state` by one step (so the progress used is
/// `(global_step + 1) / total_steps`) and applies the update.
pub fn train_step<R: Rng + ?Sized>(
    batch: &PairedBatch,
    model: &mut ModelBundle,
    cfg: &AdaptConfig,
    state: &mut TrainState,
    rng: &mut R,
) -> Result<LossBreakdown> {
    state.global_step += 1;
    let p = state.progress().min(1.0);
    apply_step(batch, model, cfg, &mut state.optimizer, p, state.global_step, rng)
}

fn check_inputs(sources: &[DomainDataset], target: &DomainDataset) -> Result<Vec<usize>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::contract("run_training needs at least one source domain"))?;
    let widths = first.widths().to_vec();
    for s in sources {
        if s.role() != Role::Source {
            return Err(Error::contract(format!("domain {} is not a source", s.id())));
        }
        if s.is_empty() {
            return Err(Error::contract(format!("source {} is empty", s.id())));
        }
        if s.widths() != widths.as_slice() {
            return Err(Error::contract(format!(
                "source {} has widths {:?}, expected {widths:?}",
                s.id(),
                s.widths()
            )));
        }
    }
    if target.role() != Role::Target {
        return Err(Error::contract(format!("domain {} is not a target", target.id())));
    }
    if target.widths() != widths.as_slice() {
        return Err(Error::contract(format!(
            "target has widths {:?}, expected {widths:?}",
            target.widths()
        )));
    }
    if target.is_empty() {
        return Err(Error::contract("target domain is empty"));
    }
    Ok(widths)
}

/// Fused-head metrics on a dataset with known labels.
pub fn evaluate(model: &ModelBundle, data: &DomainDataset) -> Result<Option<FinalMetrics>> {
    let Some(labels) = data.held_out_labels() else {
        return Ok(None);
    };
    let preds = model.predict_classes(&data.all())?;
    let m = accuracy_f1(&preds, &labels)?;
    Ok(Some(FinalMetrics {
        accuracy: m.accuracy,
        f1: m.f1,
    }))
}

/// Full run: `epochs × domain_cycle` steps, deterministic in `cfg.seed`.
///
/// Parameters are initialised from `cfg.seed`; batches are drawn from a
/// second ChaCha8 stream of the same seed.
pub fn run_training(
    sources: &[DomainDataset],
    target: &DomainDataset,
    cfg: &AdaptConfig,
) -> Result<(ModelBundle, RunReport)> {
    cfg.validate()?;
    let widths = check_inputs(sources, target)?;
    let arch = ModelArch::new(widths, cfg.model.clone())?;
    let mut model = ModelBundle::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let sizes: Vec<usize> = sources.iter().map(DomainDataset::len).collect();
    let cycle = domain_cycle(&sizes, cfg.batch_size)?;
    let total = (cycle.len() * cfg.epochs) as u64;
    let mut state = TrainState::new(total, OptimizerState::new(cfg.optimizer, &model.params));

    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let mut losses = Vec::with_capacity(cycle.len());
        let mut trace: Vec<DomainVisit> = Vec::new();
        for &d in &cycle {
            state.domain = d;
            let batch = sample_paired_batch(&sources[d], target, cfg.batch_size, &mut rng)?;
            losses.push(train_step(&batch, &mut model, cfg, &mut state, &mut rng)?);
            match trace.last_mut() {
                Some(v) if v.domain == sources[d].id() => v.steps += 1,
                _ => trace.push(DomainVisit {
                    domain: sources[d].id().to_string(),
                    steps: 1,
                }),
            }
        }
        per_epoch.push(EpochRecord {
            epoch,
            loss: LossBreakdown::mean(&losses),
            source_domain_trace: trace,
        });
    }

    let final_metrics = evaluate(&model, target)?;
    let report = RunReport {
        run_id: format!("seed-{}", cfg.seed),
        config: serde_json::to_value(cfg)?,
        per_epoch,
        final_metrics,
        seed: cfg.seed,
    };
    Ok((model, report))
}

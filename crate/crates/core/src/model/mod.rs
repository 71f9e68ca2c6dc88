//! Learnable architecture: per-modality encoders, fusion, per-stream heads,
//! the conditional map and the domain discriminator.
//!
//! Parameters live in [`Params<T>`], generic over the leaf type so the same
//! layout serves stored tensors (`Params<Tensor>`), graph handles
//! (`Params<Var>`) and optimiser buffers.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgraph::{Graph, Tensor, Var};

/// Discriminator logits are clamped to this magnitude before the sigmoid.
pub const DISC_LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FusionSpec {
    #[default]
    GatedConcat,
    CrossAttention { heads: usize, head_width: usize },
}

/// Widths that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub encoder_hidden: Vec<usize>,
    pub unimodal_width: usize,
    pub fused_width: usize,
    pub classes: usize,
    pub disc_hidden: Vec<usize>,
    pub fusion: FusionSpec,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            encoder_hidden: vec![32, 32],
            unimodal_width: 32,
            fused_width: 16,
            classes: 2,
            disc_hidden: vec![32],
            fusion: FusionSpec::GatedConcat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_widths: Vec<usize>,
    pub dims: ModelDims,
}

impl ModelArch {
    pub fn new(input_widths: Vec<usize>, dims: ModelDims) -> Result<Self> {
        let arch = ModelArch { input_widths, dims };
        arch.validate()?;
        Ok(arch)
    }

    pub fn modalities(&self) -> usize {
        self.input_widths.len()
    }

    /// Modality heads plus the fused head.
    pub fn streams(&self) -> usize {
        self.modalities() + 1
    }

    /// Width of the conditional feature `h`.
    pub fn conditional_width(&self) -> usize {
        self.dims.fused_width * self.dims.classes
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if self.input_widths.is_empty() || self.input_widths.contains(&0) {
            return Err(Error::contract("every modality needs a positive input width"));
        }
        if d.classes < 2 {
            return Err(Error::contract(format!("class count {} < 2", d.classes)));
        }
        if d.unimodal_width == 0 || d.fused_width == 0 {
            return Err(Error::contract("feature widths must be positive"));
        }
        if d.encoder_hidden.contains(&0) || d.disc_hidden.contains(&0) {
            return Err(Error::contract("hidden widths must be positive"));
        }
        if let FusionSpec::CrossAttention { heads, head_width } = d.fusion {
            if heads == 0 || head_width == 0 {
                return Err(Error::contract("cross-attention needs heads >= 1 and head_width >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Modality(usize),
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in x out`; inputs are row vectors.
    pub weight: T,
    /// `1 x out`.
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion<T> {
    GatedConcat {
        gate: Linear<T>,
        proj: Linear<T>,
    },
    CrossAttention {
        query: Vec<Linear<T>>,
        key: Vec<Linear<T>>,
        value: Vec<Linear<T>>,
        proj: Linear<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub encoders: Vec<Mlp<T>>,
    pub fusion: Fusion<T>,
    /// One per modality, then the fused head.
    pub heads: Vec<Linear<T>>,
    pub discriminator: Mlp<T>,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Fusion,
    Head,
    Discriminator,
}

impl Group {
    /// Encoder and fusion parameters produce the fused representation.
    pub fn is_feature_extractor(self) -> bool {
        matches!(self, Group::Encoder | Group::Fusion)
    }
}

fn map_linear<T, U, E>(
    l: &Linear<T>,
    name: &str,
    group: Group,
    f: &mut impl FnMut(&str, Group, &T) -> std::result::Result<U, E>,
) -> std::result::Result<Linear<U>, E> {
    Ok(Linear {
        weight: f(&format!("{name}.weight"), group, &l.weight)?,
        bias: f(&format!("{name}.bias"), group, &l.bias)?,
    })
}

fn map_mlp<T, U, E>(
    m: &Mlp<T>,
    name: &str,
    group: Group,
    f: &mut impl FnMut(&str, Group, &T) -> std::result::Result<U, E>,
) -> std::result::Result<Mlp<U>, E> {
    let layers = m
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| map_linear(l, &format!("{name}.layer{i}"), group, f))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Mlp { layers })
}

impl<T> Params<T> {
    /// Rebuilds the structure leaf by leaf, visiting parameters in checkpoint
    /// order: encoders by modality, fusion, heads (modalities then fused),
    /// discriminator; weight before bias within each layer.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, Group, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Params<U>, E> {
        let encoders = self
            .encoders
            .iter()
            .enumerate()
            .map(|(u, m)| map_mlp(m, &format!("encoder{u}"), Group::Encoder, &mut f))
            .collect::<std::result::Result<_, _>>()?;
        let fusion = match &self.fusion {
            Fusion::GatedConcat { gate, proj } => Fusion::GatedConcat {
                gate: map_linear(gate, "fusion.gate", Group::Fusion, &mut f)?,
                proj: map_linear(proj, "fusion.proj", Group::Fusion, &mut f)?,
            },
            Fusion::CrossAttention {
                query,
                key,
                value,
                proj,
            } => {
                let heads = |ls: &[Linear<T>], role: &str, f: &mut _| {
                    ls.iter()
                        .enumerate()
                        .map(|(h, l)| map_linear(l, &format!("fusion.{role}{h}"), Group::Fusion, f))
                        .collect::<std::result::Result<Vec<_>, E>>()
                };
                Fusion::CrossAttention {
                    query: heads(query, "query", &mut f)?,
                    key: heads(key, "key", &mut f)?,
                    value: heads(value, "value", &mut f)?,
                    proj: map_linear(proj, "fusion.proj", Group::Fusion, &mut f)?,
                }
            }
        };
        let streams = self.heads.len();
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let name = if i + 1 == streams {
                    "head.fused".to_string()
                } else {
                    format!("head{i}")
                };
                map_linear(l, &name, Group::Head, &mut f)
            })
            .collect::<std::result::Result<_, _>>()?;
        let discriminator = map_mlp(&self.discriminator, "disc", Group::Discriminator, &mut f)?;
        Ok(Params {
            encoders,
            fusion,
            heads,
            discriminator,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, Group, &T) -> U) -> Params<U> {
        self.try_map(|n, g, t| Ok::<U, std::convert::Infallible>(f(n, g, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// `(name, group, leaf)` in checkpoint order.
    pub fn entries(&self) -> Vec<(String, Group, &T)> {
        let mut out: Vec<(String, Group)> = Vec::new();
        self.map(|n, g, _| out.push((n.to_string(), g)));
        let mut leaves = Vec::new();
        self.for_each_ref(&mut |t| leaves.push(t));
        out.into_iter()
            .zip(leaves)
            .map(|((n, g), t)| (n, g, t))
            .collect()
    }

    fn for_each_ref<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        fn lin<'a, T>(l: &'a Linear<T>, f: &mut impl FnMut(&'a T)) {
            f(&l.weight);
            f(&l.bias);
        }
        for m in &self.encoders {
            m.layers.iter().for_each(|l| lin(l, f));
        }
        match &self.fusion {
            Fusion::GatedConcat { gate, proj } => {
                lin(gate, f);
                lin(proj, f);
            }
            Fusion::CrossAttention {
                query,
                key,
                value,
                proj,
            } => {
                query.iter().chain(key).chain(value).for_each(|l| lin(l, f));
                lin(proj, f);
            }
        }
        self.heads.iter().for_each(|l| lin(l, f));
        self.discriminator.layers.iter().for_each(|l| lin(l, f));
    }

    /// Mutable leaves in checkpoint order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        fn lin<'a, T>(l: &'a mut Linear<T>, out: &mut Vec<&'a mut T>) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        let mut out = Vec::new();
        for m in &mut self.encoders {
            m.layers.iter_mut().for_each(|l| lin(l, &mut out));
        }
        match &mut self.fusion {
            Fusion::GatedConcat { gate, proj } => {
                lin(gate, &mut out);
                lin(proj, &mut out);
            }
            Fusion::CrossAttention {
                query,
                key,
                value,
                proj,
            } => {
                query
                    .iter_mut()
                    .chain(key.iter_mut())
                    .chain(value.iter_mut())
                    .for_each(|l| lin(l, &mut out));
                lin(proj, &mut out);
            }
        }
        self.heads.iter_mut().for_each(|l| lin(l, &mut out));
        self.discriminator
            .layers
            .iter_mut()
            .for_each(|l| lin(l, &mut out));
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.for_each_ref(&mut |t| out.push(t));
        out
    }
}

impl Params<Tensor> {
    pub fn zeros_like(&self) -> Params<Tensor> {
        self.map(|_, _, t| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn num_values(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }
}

fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Linear {
        weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
        bias: Tensor::zeros(1, fan_out),
    }
}

fn init_mlp(rng: &mut ChaCha8Rng, widths: &[usize]) -> Mlp<Tensor> {
    Mlp {
        layers: widths
            .windows(2)
            .map(|w| init_linear(rng, w[0], w[1]))
            .collect(),
    }
}

/// All learnable parameters together with the architecture they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ModelArch,
    pub params: Params<Tensor>,
}

impl ModelBundle {
    /// Uniform ±sqrt(6/(fan_in+fan_out)) weights and zero biases, drawn from
    /// a ChaCha8 stream seeded with `seed`.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &arch.dims;
        let encoders = arch
            .input_widths
            .iter()
            .map(|&w| {
                let mut widths = vec![w];
                widths.extend(&d.encoder_hidden);
                widths.push(d.unimodal_width);
                init_mlp(&mut rng, &widths)
            })
            .collect();
        let concat = d.unimodal_width * arch.modalities();
        let fusion = match d.fusion {
            FusionSpec::GatedConcat => Fusion::GatedConcat {
                gate: init_linear(&mut rng, concat, concat),
                proj: init_linear(&mut rng, concat, d.fused_width),
            },
            FusionSpec::CrossAttention { heads, head_width } => {
                let make =
                    |rng: &mut ChaCha8Rng| (0..heads).map(|_| init_linear(rng, d.unimodal_width, head_width)).collect();
                let query = make(&mut rng);
                let key = make(&mut rng);
                let value = make(&mut rng);
                Fusion::CrossAttention {
                    query,
                    key,
                    value,
                    proj: init_linear(&mut rng, arch.modalities() * heads * head_width, d.fused_width),
                }
            }
        };
        let mut heads: Vec<_> = (0..arch.modalities())
            .map(|_| init_linear(&mut rng, d.unimodal_width, d.classes))
            .collect();
        heads.push(init_linear(&mut rng, d.fused_width, d.classes));
        let mut disc_widths = vec![arch.conditional_width()];
        disc_widths.extend(&d.disc_hidden);
        disc_widths.push(1);
        let discriminator = init_mlp(&mut rng, &disc_widths);
        Ok(ModelBundle {
            arch,
            params: Params {
                encoders,
                fusion,
                heads,
                discriminator,
            },
        })
    }

    /// Every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, _, t| g.param(t.clone()))
    }

    /// Every parameter as a constant leaf of `g`.
    pub fn bind_constant(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, _, t| g.constant(t.clone()))
    }

    fn with_graph<T>(&self, f: impl FnOnce(&mut Graph, Net<'_>) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        f(&mut g, Net::new(&self.arch, &p))
    }

    /// Unimodal feature `F_u` for a batch of raw modality-`u` rows.
    pub fn encode(&self, x: &Tensor, u: usize) -> Result<Tensor> {
        self.with_graph(|g, net| {
            let xv = g.constant(x.clone());
            let f = net.encode(g, xv, u)?;
            Ok(g.value(f).clone())
        })
    }

    pub fn fuse(&self, features: &[Tensor]) -> Result<Tensor> {
        self.with_graph(|g, net| {
            let fs: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
            let m = net.fuse(g, &fs)?;
            Ok(g.value(m).clone())
        })
    }

    /// Class logits of one stream's head.
    pub fn predict(&self, feature: &Tensor, stream: Stream) -> Result<Tensor> {
        self.with_graph(|g, net| {
            let f = g.constant(feature.clone());
            let l = net.head(g, f, stream)?;
            Ok(g.value(l).clone())
        })
    }

    /// Domain probability (source = 1) for each row of `h`.
    pub fn discriminate(&self, h: &Tensor) -> Result<Tensor> {
        self.with_graph(|g, net| {
            let hv = g.constant(h.clone());
            let d = net.discriminate(g, hv)?;
            Ok(g.value(d).clone())
        })
    }

    /// Fused-head logits for one batch given per-modality raw inputs.
    pub fn fused_logits(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.with_graph(|g, net| {
            let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            let fwd = net.forward(g, &xs, false)?;
            Ok(g.value(fwd.logits[fwd.logits.len() - 1]).clone())
        })
    }

    /// Argmax class of the fused head, ties to the lower index.
    pub fn predict_classes(&self, inputs: &[Tensor]) -> Result<Vec<usize>> {
        let logits = self.fused_logits(inputs)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `h = M ⊗ p` row by row, flattened with column `i*C + c` holding
/// `M[i]·p[c]`. Each row of `p` must sum to one.
pub fn conditional_map(m: &Tensor, p: &Tensor) -> Result<Tensor> {
    check_probability_rows(p)?;
    let mut g = Graph::new();
    let mv = g.constant(m.clone());
    let pv = g.constant(p.clone());
    let h = g.row_outer(mv, pv)?;
    Ok(g.value(h).clone())
}

fn check_probability_rows(p: &Tensor) -> Result<()> {
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.row(r).iter().any(|v| *v < 0.0) {
            return Err(Error::contract(format!(
                "probability row {r} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Gradient-reversal scale `2/(1+e^{−10p}) − 1` for progress `p ∈ [0, 1]`.
pub fn grl_schedule(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("training progress {p} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// Outputs of one forward pass through encoders, fusion and heads.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Vec<Var>,
    pub fused: Var,
    /// Per-stream logits; modality heads first, fused head last. When the
    /// pass was run with `fused_only`, only the fused logits are present.
    pub logits: Vec<Var>,
}

impl Forward {
    pub fn fused_logits(&self) -> Var {
        self.logits[self.logits.len() - 1]
    }
}

/// Graph-level view of a bound parameter set.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub arch: &'a ModelArch,
    pub params: &'a Params<Var>,
}

fn linear(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_row(y, l.bias)
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a ModelArch, params: &'a Params<Var>) -> Self {
        Net { arch, params }
    }

    pub fn encode(&self, g: &mut Graph, x: Var, u: usize) -> Result<Var> {
        let enc = self
            .params
            .encoders
            .get(u)
            .ok_or_else(|| Error::contract(format!("unknown modality {u}")))?;
        let want = self.arch.input_widths[u];
        if g.value(x).cols() != want {
            return Err(Error::contract(format!(
                "modality {u} expects width {want}, got {}",
                g.value(x).cols()
            )));
        }
        let last = enc.layers.len() - 1;
        let mut h = x;
        for (i, l) in enc.layers.iter().enumerate() {
            h = linear(g, h, l)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn fuse(&self, g: &mut Graph, features: &[Var]) -> Result<Var> {
        if features.is_empty() {
            return Err(Error::contract("fuse needs at least one feature"));
        }
        let du = self.arch.dims.unimodal_width;
        for f in features {
            if g.value(*f).cols() != du {
                return Err(Error::contract(format!(
                    "fusion expects features of width {du}, got {}",
                    g.value(*f).cols()
                )));
            }
        }
        match &self.params.fusion {
            Fusion::GatedConcat { gate, proj } => {
                let z = g.concat(features)?;
                if g.value(z).cols() != g.value(gate.weight).rows() {
                    return Err(Error::contract(format!(
                        "gated fusion expects {} features, got {}",
                        g.value(gate.weight).rows() / du,
                        features.len()
                    )));
                }
                let a = linear(g, z, gate)?;
                let s = g.sigmoid(a);
                let gated = g.mul(z, s)?;
                linear(g, gated, proj)
            }
            Fusion::CrossAttention {
                query,
                key,
                value,
                proj,
            } => {
                let streams = features.len();
                let mut outputs = Vec::with_capacity(streams * query.len());
                for h in 0..query.len() {
                    let head_width = g.value(query[h].weight).cols();
                    let scale = 1.0 / (head_width as f64).sqrt();
                    let mut q = Vec::with_capacity(streams);
                    let mut k = Vec::with_capacity(streams);
                    let mut v = Vec::with_capacity(streams);
                    for &f in features {
                        q.push(linear(g, f, &query[h])?);
                        k.push(linear(g, f, &key[h])?);
                        v.push(linear(g, f, &value[h])?);
                    }
                    for &qi in &q {
                        let mut scores = Vec::with_capacity(streams);
                        for &kj in &k {
                            let prod = g.mul(qi, kj)?;
                            let dot = g.sum_rows(prod);
                            scores.push(g.scale(dot, scale));
                        }
                        let s = g.concat(&scores)?;
                        let attn = g.softmax(s)?;
                        let mut acc = None;
                        for (j, &vj) in v.iter().enumerate() {
                            let a = g.select_col(attn, j)?;
                            let term = g.mul_col(vj, a)?;
                            acc = Some(match acc {
                                None => term,
                                Some(prev) => g.add(prev, term)?,
                            });
                        }
                        outputs.push(acc.expect("at least one stream"));
                    }
                }
                let cat = g.concat(&outputs)?;
                if g.value(cat).cols() != g.value(proj.weight).rows() {
                    return Err(Error::contract("cross-attention stream count does not match projection"));
                }
                linear(g, cat, proj)
            }
        }
    }

    pub fn head(&self, g: &mut Graph, feature: Var, stream: Stream) -> Result<Var> {
        let idx = match stream {
            Stream::Modality(u) if u < self.arch.modalities() => u,
            Stream::Modality(u) => return Err(Error::contract(format!("unknown stream {u}"))),
            Stream::Fused => self.arch.modalities(),
        };
        let head = &self.params.heads[idx];
        let want = g.value(head.weight).rows();
        if g.value(feature).cols() != want {
            return Err(Error::contract(format!(
                "head {idx} expects width {want}, got {}",
                g.value(feature).cols()
            )));
        }
        linear(g, feature, head)
    }

    /// Discriminator logit, clamped, then sigmoid.
    pub fn discriminate(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let want = self.arch.conditional_width();
        if g.value(h).cols() != want {
            return Err(Error::contract(format!(
                "discriminator expects width {want}, got {}",
                g.value(h).cols()
            )));
        }
        let layers = &self.params.discriminator.layers;
        let last = layers.len() - 1;
        let mut x = h;
        for (i, l) in layers.iter().enumerate() {
            x = linear(g, x, l)?;
            if i < last {
                x = g.relu(x);
            }
        }
        let x = g.clamp(x, -DISC_LOGIT_CLAMP, DISC_LOGIT_CLAMP);
        Ok(g.sigmoid(x))
    }

    /// Encoders, fusion and heads. With `fused_only` the modality heads are
    /// skipped.
    pub fn forward(&self, g: &mut Graph, inputs: &[Var], fused_only: bool) -> Result<Forward> {
        if inputs.len() != self.arch.modalities() {
            return Err(Error::contract(format!(
                "expected {} modalities, got {}",
                self.arch.modalities(),
                inputs.len()
            )));
        }
        let features = inputs
            .iter()
            .enumerate()
            .map(|(u, &x)| self.encode(g, x, u))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse(g, &features)?;
        let mut logits = Vec::with_capacity(self.arch.streams());
        if !fused_only {
            for (u, &f) in features.iter().enumerate() {
                logits.push(self.head(g, f, Stream::Modality(u))?);
            }
        }
        logits.push(self.head(g, fused, Stream::Fused)?);
        Ok(Forward {
            features,
            fused,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ModelArch {
        ModelArch::new(
            vec![2, 2],
            ModelDims {
                encoder_hidden: vec![2],
                unimodal_width: 2,
                fused_width: 2,
                classes: 2,
                disc_hidden: vec![3],
                fusion: FusionSpec::GatedConcat,
            },
        )
        .unwrap()
    }

    fn lin(w: &[&[f64]], b: &[f64]) -> Linear<Tensor> {
        Linear {
            weight: Tensor::from_rows(w).unwrap(),
            bias: Tensor::row_vector(b.to_vec()),
        }
    }

    #[test]
    fn parameter_names_are_ordered_and_unique() {
        let m = ModelBundle::init(tiny_arch(), 1).unwrap();
        let names: Vec<String> = m.params.entries().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names[0], "encoder0.layer0.weight");
        assert_eq!(names[1], "encoder0.layer0.bias");
        assert!(names.contains(&"fusion.gate.weight".to_string()));
        assert!(names.contains(&"head.fused.bias".to_string()));
        assert_eq!(names.last().unwrap(), "disc.layer1.bias");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(m.params.leaves().len(), names.len());
    }

    #[test]
    fn init_respects_xavier_bound_and_seed() {
        let a = ModelBundle::init(tiny_arch(), 7).unwrap();
        let b = ModelBundle::init(tiny_arch(), 7).unwrap();
        let c = ModelBundle::init(tiny_arch(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, _, t) in a.params.entries() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|v| *v == 0.0));
            } else {
                let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_feature() {
        let mut m = ModelBundle::init(tiny_arch(), 3).unwrap();
        let last = m.params.encoders[0].layers.last_mut().unwrap();
        last.weight = Tensor::zeros(2, 2);
        let f = m.encode(&Tensor::zeros(1, 2), 0).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
        let x = Tensor::row_vector(vec![0.3, -0.8]);
        assert_eq!(m.encode(&x, 1).unwrap(), m.encode(&x, 1).unwrap());
        assert!(m.encode(&x, 5).is_err());
        assert!(m.encode(&Tensor::zeros(1, 3), 0).is_err());
    }

    #[test]
    fn encoder_matches_hand_evaluation() {
        let mut m = ModelBundle::init(tiny_arch(), 3).unwrap();
        m.params.encoders[0] = Mlp {
            layers: vec![
                lin(&[&[0.1, -0.2], &[0.3, 0.4]], &[0.05, -0.05]),
                lin(&[&[0.5, 0.0], &[-0.25, 1.0]], &[0.0, 0.1]),
            ],
        };
        let x = [0.7, -1.3];
        let h0 = (0.1 * x[0] + 0.3 * x[1] + 0.05f64).tanh();
        let h1 = (-0.2 * x[0] + 0.4 * x[1] - 0.05f64).tanh();
        let expect = [0.5 * h0 - 0.25 * h1, h1 + 0.1];
        let f = m.encode(&Tensor::row_vector(x.to_vec()), 0).unwrap();
        for (a, b) in f.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_fusion_matches_hand_evaluation() {
        let mut m = ModelBundle::init(tiny_arch(), 3).unwrap();
        let gate_w: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| 0.1 * (i as f64) - 0.05 * (j as f64)).collect())
            .collect();
        let gate_b = [0.1, -0.1, 0.2, 0.0];
        let proj_w: Vec<Vec<f64>> = (0..4)
            .map(|i| vec![0.3 * i as f64 - 0.4, 0.2])
            .collect();
        m.params.fusion = Fusion::GatedConcat {
            gate: Linear {
                weight: Tensor::from_rows(&gate_w).unwrap(),
                bias: Tensor::row_vector(gate_b.to_vec()),
            },
            proj: Linear {
                weight: Tensor::from_rows(&proj_w).unwrap(),
                bias: Tensor::row_vector(vec![0.01, -0.02]),
            },
        };
        let fa = [0.5, -1.0];
        let fv = [2.0, 0.25];
        let z = [fa[0], fa[1], fv[0], fv[1]];
        let mut gated = [0.0; 4];
        for j in 0..4 {
            let a: f64 = (0..4).map(|i| z[i] * gate_w[i][j]).sum::<f64>() + gate_b[j];
            gated[j] = z[j] / (1.0 + (-a).exp());
        }
        let expect: Vec<f64> = (0..2)
            .map(|c| (0..4).map(|i| gated[i] * proj_w[i][c]).sum::<f64>() + [0.01, -0.02][c])
            .collect();
        let out = m
            .fuse(&[Tensor::row_vector(fa.to_vec()), Tensor::row_vector(fv.to_vec())])
            .unwrap();
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_fusion_single_modality_identity_projection() {
        let arch = ModelArch::new(
            vec![3],
            ModelDims {
                unimodal_width: 2,
                fused_width: 2,
                ..ModelDims::default()
            },
        )
        .unwrap();
        let mut m = ModelBundle::init(arch, 0).unwrap();
        // Saturated gate with identity projection passes the feature through.
        m.params.fusion = Fusion::GatedConcat {
            gate: lin(&[&[0.0, 0.0], &[0.0, 0.0]], &[50.0, 50.0]),
            proj: lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
        };
        let f = Tensor::row_vector(vec![0.4, -2.0]);
        let out = m.fuse(std::slice::from_ref(&f)).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_fusion_symmetric_for_equal_inputs() {
        let m = ModelBundle::init(tiny_arch(), 11).unwrap();
        let f = Tensor::row_vector(vec![0.3, 0.9]);
        let a = m.fuse(&[f.clone(), f.clone()]).unwrap();
        let b = m.fuse(&[f.clone(), f]).unwrap();
        assert_eq!(a, b);
        assert!(m.fuse(&[]).is_err());
        assert!(m.fuse(&[Tensor::zeros(1, 3), Tensor::zeros(1, 3)]).is_err());
    }

    #[test]
    fn head_examples() {
        let mut m = ModelBundle::init(tiny_arch(), 3).unwrap();
        m.params.heads[2] = lin(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0]);
        let logits = m.predict(&Tensor::zeros(1, 2), Stream::Fused).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
        m.params.heads[0] = lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let logits = m
            .predict(&Tensor::row_vector(vec![3.0, -1.0]), Stream::Modality(0))
            .unwrap();
        assert_eq!(logits.data(), &[3.0, -1.0]);
        assert!(m.predict(&Tensor::zeros(1, 2), Stream::Modality(4)).is_err());
    }

    #[test]
    fn head_matches_dot_product_oracle() {
        let m = ModelBundle::init(tiny_arch(), 21).unwrap();
        let f = [0.37, -1.21];
        let logits = m
            .predict(&Tensor::row_vector(f.to_vec()), Stream::Modality(1))
            .unwrap();
        let h = &m.params.heads[1];
        for c in 0..2 {
            let expect = f[0] * h.weight.get(0, c) + f[1] * h.weight.get(1, c) + h.bias.get(0, c);
            assert!((logits.get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_map_examples() {
        let h = conditional_map(
            &Tensor::row_vector(vec![1.0, 2.0]),
            &Tensor::row_vector(vec![0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(h.data(), &[0.5, 0.5, 1.0, 1.0]);
        let h = conditional_map(
            &Tensor::row_vector(vec![1.0, 0.0]),
            &Tensor::row_vector(vec![1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 0.0]);
        let h = conditional_map(
            &Tensor::row_vector(vec![2.0, 3.0]),
            &Tensor::row_vector(vec![0.2, 0.8]),
        )
        .unwrap();
        for (a, b) in h.data().iter().zip([0.4, 1.6, 0.6, 2.4]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(conditional_map(
            &Tensor::row_vector(vec![1.0, 2.0]),
            &Tensor::row_vector(vec![0.5, 0.6])
        )
        .is_err());
    }

    #[test]
    fn discriminator_examples() {
        let mut m = ModelBundle::init(tiny_arch(), 3).unwrap();
        for l in &mut m.params.discriminator.layers {
            l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
        }
        let d = m.discriminate(&Tensor::row_vector(vec![5.0, -1.0, 2.0, 0.0])).unwrap();
        assert_eq!(d.data(), &[0.5]);
        assert!(m.discriminate(&Tensor::zeros(1, 3)).is_err());

        m.params.discriminator = Mlp {
            layers: vec![lin(&[&[1e6], &[0.0], &[0.0], &[0.0]], &[0.0])],
        };
        let d = m.discriminate(&Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(d.data()[0] < 1.0 && d.data()[0].is_finite());

        m.params.discriminator = Mlp {
            layers: vec![lin(&[&[0.8], &[0.3], &[-0.2], &[0.1]], &[-0.3])],
        };
        let d = m.discriminate(&Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let expect = 1.0 / (1.0 + (-(0.8f64 - 0.3)).exp());
        assert!((d.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn grl_schedule_examples() {
        assert_eq!(grl_schedule(0.0).unwrap(), 0.0);
        assert!((grl_schedule(0.1).unwrap() - 0.46212).abs() < 1e-5);
        assert!((grl_schedule(1.0).unwrap() - 0.99991).abs() < 1e-5);
        assert!(grl_schedule(-0.1).is_err());
        assert!(grl_schedule(1.5).is_err());
    }

    #[test]
    fn cross_attention_shapes_and_determinism() {
        let arch = ModelArch::new(
            vec![3, 4],
            ModelDims {
                fusion: FusionSpec::CrossAttention {
                    heads: 2,
                    head_width: 3,
                },
                ..ModelDims::default()
            },
        )
        .unwrap();
        let m = ModelBundle::init(arch, 5).unwrap();
        let xa = Tensor::new(3, 3, (0..9).map(|v| v as f64 * 0.1).collect()).unwrap();
        let xv = Tensor::new(3, 4, (0..12).map(|v| 0.5 - v as f64 * 0.05).collect()).unwrap();
        let l1 = m.fused_logits(&[xa.clone(), xv.clone()]).unwrap();
        let l2 = m.fused_logits(&[xa, xv]).unwrap();
        assert_eq!(l1.shape(), [3, 2]);
        assert_eq!(l1, l2);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[2.0, -1.0]), 0);
        assert_eq!(argmax(&[-1.0, 2.0]), 1);
    }
}

use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::ndgraph::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    /// AdamW: Adam moments with weight decay applied directly to the weights.
    #[default]
    DecoupledAdaptiveMoment,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    steps: u64,
    moments: Option<(Params<Tensor>, Params<Tensor>)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &Params<Tensor>) -> Self {
        let moments = match kind {
            OptimizerKind::PlainSgd => None,
            OptimizerKind::DecoupledAdaptiveMoment => Some((params.zeros_like(), params.zeros_like())),
        };
        OptimizerState {
            kind,
            steps: 0,
            moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Both optimisers first shrink every parameter by
    /// `1 − lr·weight_decay`, then apply the gradient step.
    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let shrink = 1.0 - lr * weight_decay;
        let grads = grads.leaves();
        match self.moments.as_mut() {
            None => {
                for (p, g) in params.leaves_mut().into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w * shrink - lr * d;
                    }
                }
            }
            Some((m, v)) => {
                let t = self.steps as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let leaves = params.leaves_mut().into_iter().zip(grads).zip(m.leaves_mut()).zip(v.leaves_mut());
                for (((p, g), m), v) in leaves {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut());
                    for (((w, d), m), v) in it {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w = *w * shrink - lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelArch, ModelBundle, ModelDims};

    fn params() -> Params<Tensor> {
        let arch = ModelArch::new(vec![3], ModelDims::default()).unwrap();
        let mut m = ModelBundle::init(arch, 2).unwrap();
        // Nonzero biases so decay is visible everywhere.
        for t in m.params.leaves_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        m.params
    }

    #[test]
    fn decay_shrinks_exactly_with_zero_gradients() {
        for kind in [OptimizerKind::PlainSgd, OptimizerKind::DecoupledAdaptiveMoment] {
            let mut p = params();
            let before = p.clone();
            let zeros = p.zeros_like();
            let mut opt = OptimizerState::new(kind, &p);
            let (lr, wd) = (1e-2, 5e-5);
            opt.step(&mut p, &zeros, lr, wd);
            for (a, b) in p.leaves().iter().zip(before.leaves()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(*x, y * (1.0 - lr * wd));
                }
            }
        }
    }

    #[test]
    fn sgd_is_plain_gradient_step() {
        let mut p = params();
        let before = p.clone();
        let grads = p.map(|_, _, t| t.map(|_| 0.25));
        let mut opt = OptimizerState::new(OptimizerKind::PlainSgd, &p);
        opt.step(&mut p, &grads, 0.1, 0.0);
        for (a, b) in p.leaves().iter().zip(before.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 0.025);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let grads = p.map(|_, _, t| t.map(|_| -3.0));
        let mut opt = OptimizerState::new(OptimizerKind::DecoupledAdaptiveMoment, &p);
        opt.step(&mut p, &grads, 1e-3, 0.0);
        for (a, b) in p.leaves().iter().zip(before.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 1e-3).abs() < 1e-9);
            }
        }
        assert_eq!(opt.steps(), 1);
    }
}

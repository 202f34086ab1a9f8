//! Parameters and the small layer vocabulary shared by the models.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::rng::{normal_vec, FlowRng};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialised parameter.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut FlowRng) -> ParamId {
        let n = shape.iter().product();
        let data = normal_vec(rng, n).into_iter().map(|v| v * std).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `grad += g` for every parameter present in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id];
            p.grad = p.grad.add(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces values from `(name, tensor)` pairs; names and shapes must match
    /// the registered layout exactly.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "load",
                msg: format!("expected {} tensors, got {}", self.params.len(), values.len()),
            });
        }
        for (p, (name, value)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(TensorError::Invalid {
                    op: "load",
                    msg: format!("parameter {} {:?} does not match {} {:?}", p.name, p.value.shape(), name, value.shape()),
                });
            }
            p.grad = Tensor::zeros(value.shape().to_vec());
            p.value = value;
        }
        Ok(())
    }
}

/// Forward-pass context: a tape plus the parameters being read from it.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    train: bool,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            bound: vec![None; store.len()],
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    /// The tape node for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id.0, &self.store.get(id).value, self.train);
        self.bound[id.0] = Some(v);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weight `[fan_in, fan_out]` with N(0, 1/fan_in) entries, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut FlowRng) -> Self {
        let std = (1.0 / fan_in as f32).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = store.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Self { w, b }
    }

    pub fn with_std(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f32, rng: &mut FlowRng) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = store.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add_broadcast(y, b)
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.g"), &[dim], 1.0),
            bias: store.add_const(format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        let n = cx.tape.layer_norm(x)?;
        let s = cx.tape.mul_broadcast(n, g)?;
        cx.tape.add_broadcast(s, b)
    }
}

/// Sinusoidal features of a time value: `[cos(t*s*f_i), sin(t*s*f_i)]` with
/// geometric frequencies `f_i = 10000^(-i/half)` and `s = 1000`.
pub fn sinusoidal(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let t = t as f64 * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out.push((t * f).cos() as f32);
    }
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out.push((t * f).sin() as f32);
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
    out
}

//! Parameters, layers and optimizers built on the [`Graph`] tape.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{AttnPlan, GatherPlan, Gradients, Graph, Padding, Segment, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    /// A parameter that is stored and loaded but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let id = self.add(name, value);
        self.trainable[id.0] = false;
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Replace every value from `(name, matrix)` pairs; names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Matrix<T>)]) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, m) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if self.values[id.0].shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: stored {:?}, model expects {:?}",
                    m.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = m.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing tensor {}", self.names[i])));
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init<T: Scalar>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)))
}

pub fn normal_init<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Affine map `x W + b`, `W` stored as `in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(input, output, input, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_init(1, output, input, rng)));
        Self { weight, bias }
    }

    /// Zero-initialized map, for residual branches and modulation heads.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(input, output));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, output)));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, T::one())),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.layer_norm(x, T::lit(Self::EPS));
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Causal 1-D convolution over packed sequences, weights laid out tap-major
/// (`kernel * in` rows, `out` columns).
#[derive(Clone, Copy, Debug)]
pub struct CausalConv {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
    pub padding: Padding,
}

impl CausalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        left_pad: usize,
        padding: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(kernel * input, output, kernel * input, rng),
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), uniform_init(1, output, kernel * input, rng))
        });
        Self { linear: Linear { weight, bias }, kernel, stride, dilation, left_pad, padding }
    }

    /// Stride-1 causal convolution padded so the output keeps the input length.
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pad = dilation * (kernel - 1);
        Self::new(store, name, input, output, kernel, 1, dilation, pad, Padding::Zero, true, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        segments: &[Segment],
    ) -> (Var, Vec<Segment>) {
        let (plan, out) = GatherPlan::causal_conv(
            segments,
            self.kernel,
            self.stride,
            self.dilation,
            self.left_pad,
            self.padding,
        );
        let cols = if self.kernel == 1 && self.stride == 1 { x } else { g.gather(x, Rc::new(plan)) };
        (self.linear.forward(g, store, cols), out)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_width, width, true, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        plan: Rc<AttnPlan>,
    ) -> Var {
        debug_assert_eq!(plan.heads, self.heads);
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let a = g.attention(q, k, v, plan);
        self.out.forward(g, store, a)
    }
}

/// Two-layer SiLU MLP.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    /// `context_width` enables cross-attention to a context of that width.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        context_width: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, width, heads, rng),
            cross: context_width.map(|cw| {
                (
                    LayerNorm::new(store, &format!("{name}.norm_cross"), width),
                    MultiHeadAttention::new(store, &format!("{name}.cross"), width, cw, heads, rng),
                )
            }),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, 4 * width, width, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        self_plan: Rc<AttnPlan>,
        context: Option<(Var, Rc<AttnPlan>)>,
    ) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, self_plan);
        let mut x = g.add(x, a);
        if let (Some((norm, cross)), Some((ctx, plan))) = (&self.cross, context) {
            let h = norm.forward(g, store, x);
            let c = cross.forward(g, store, h, ctx, plan);
            x = g.add(x, c);
        }
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Adaptive moment estimation with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Matrix<T>> =
            store.ids().map(|id| Matrix::zeros(store.value(id).rows(), store.value(id).cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update; returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.step += 1;
        let norm_sq: f64 = store
            .ids()
            .filter_map(|id| grads.param(id))
            .map(|g| g.frobenius_sq().as_f64())
            .sum();
        let norm = norm_sq.sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let clip = T::lit(clip);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            let p = store.value_mut(id);
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Exponential moving average of parameters: `ema <- decay * ema + (1 - decay) * theta`.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self { decay, shadow: store.clone() }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::lit(self.decay);
        let keep = T::one() - d;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let src = store.value(id).data().to_vec();
            for (e, s) in self.shadow.value_mut(id).data_mut().iter_mut().zip(src) {
                *e = d * *e + keep * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_with_zero_decay_tracks_raw_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", normal_init(3, 2, 1.0, &mut rng));
        let mut ema = Ema::new(&store, 0.0);
        for _ in 0..3 {
            *store.value_mut(id) = normal_init(3, 2, 1.0, &mut rng);
            ema.update(&store);
            assert_eq!(ema.shadow.value(id), store.value(id));
        }
    }

    #[test]
    fn ema_converges_geometrically_to_constant_weights() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Matrix::filled(1, 1, 0.0));
        let mut ema = Ema::new(&store, 0.9);
        *store.value_mut(id) = Matrix::filled(1, 1, 1.0);
        for k in 1..=20 {
            ema.update(&store);
            let gap = (ema.shadow.value(id).item() - 1.0).abs();
            assert!((gap - 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Matrix::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_frozen("x", Matrix::row_vector(&[1.0]));
        let mut opt = Adam::new(&store, 0.1);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.sum(x);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
        assert_eq!(store.value(id).item(), 1.0);
    }
}

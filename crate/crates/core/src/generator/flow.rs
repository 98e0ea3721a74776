//! Linear rectified flow and the per-position velocity head.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `(1 - t) m + t eps`.
pub fn flow_interpolate<T: Scalar>(m: &[T], eps: &[T], t: T) -> Vec<T> {
    m.iter().zip(eps).map(|(&m, &e)| (T::one() - t) * m + t * e).collect()
}

/// Velocity target `eps - m`; independent of `t` for the linear path.
pub fn flow_target<T: Scalar>(m: &[T], eps: &[T]) -> Vec<T> {
    m.iter().zip(eps).map(|(&m, &e)| e - m).collect()
}

/// Number of sinusoidal features of the time embedding.
pub const TIME_FEATURES: usize = 64;

/// Sinusoidal features of `1000 t` (cosines then sines).
pub fn time_features<T: Scalar>(t: &[T]) -> Matrix<T> {
    let half = TIME_FEATURES / 2;
    Matrix::from_fn(t.len(), TIME_FEATURES, |r, c| {
        let k = c % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t[r].as_f64() * freq;
        T::lit(if c < half { arg.cos() } else { arg.sin() })
    })
}

#[derive(Clone, Copy, Debug)]
struct HeadBlock {
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Residual MLP predicting the flow velocity of one latent from its noisy
/// value, the time and the transformer output at its position. Time and
/// condition modulate every normalization; modulation and output maps start
/// at zero.
#[derive(Clone, Debug)]
pub struct FlowHead {
    pub latent_dim: usize,
    pub width: usize,
    input: Linear,
    time: Mlp,
    cond: Linear,
    blocks: Vec<HeadBlock>,
    final_modulation: Linear,
    out: Linear,
}

/// `x * (1 + scale) + shift`.
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let xs = g.mul(x, scale);
    let y = g.add(x, xs);
    g.add(y, shift)
}

impl FlowHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_dim: usize,
        cond_width: usize,
        width: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            latent_dim,
            width,
            input: Linear::new(store, &format!("{name}.input"), latent_dim, width, true, rng),
            time: Mlp::new(store, &format!("{name}.time"), TIME_FEATURES, width, width, rng),
            cond: Linear::new(store, &format!("{name}.cond"), cond_width, width, true, rng),
            blocks: (0..blocks)
                .map(|i| HeadBlock {
                    modulation: Linear::zeros(store, &format!("{name}.block{i}.modulation"), width, 3 * width),
                    fc1: Linear::new(store, &format!("{name}.block{i}.fc1"), width, width, true, rng),
                    fc2: Linear::new(store, &format!("{name}.block{i}.fc2"), width, width, true, rng),
                })
                .collect(),
            final_modulation: Linear::zeros(store, &format!("{name}.final_modulation"), width, 2 * width),
            out: Linear::zeros(store, &format!("{name}.out"), width, latent_dim),
        }
    }

    /// Velocities for rows of noisy latents `x_t` at times `t` with conditions `z` (one row each).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_t: Var, t: &[T], z: Var) -> Var {
        let w = self.width;
        let mut x = self.input.forward(g, store, x_t);
        let tf = g.constant(time_features(t));
        let te = self.time.forward(g, store, tf);
        let ce = self.cond.forward(g, store, z);
        let c = g.add(te, ce);
        let c = g.silu(c);
        for b in &self.blocks {
            let m = b.modulation.forward(g, store, c);
            let shift = g.slice_cols(m, 0, w);
            let scale = g.slice_cols(m, w, w);
            let gate = g.slice_cols(m, 2 * w, w);
            let h = g.layer_norm(x, T::lit(1e-6));
            let h = modulate(g, h, shift, scale);
            let h = b.fc1.forward(g, store, h);
            let h = g.silu(h);
            let h = b.fc2.forward(g, store, h);
            let h = g.mul(gate, h);
            x = g.add(x, h);
        }
        let m = self.final_modulation.forward(g, store, c);
        let shift = g.slice_cols(m, 0, w);
        let scale = g.slice_cols(m, w, w);
        let h = g.layer_norm(x, T::lit(1e-6));
        let h = modulate(g, h, shift, scale);
        self.out.forward(g, store, h)
    }

    /// Forward pass without a tape consumer.
    pub fn velocity<T: Scalar>(&self, store: &ParamStore<T>, x_t: &Matrix<T>, t: &[T], z: &Matrix<T>) -> Matrix<T> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let z = g.constant(z.clone());
        let v = self.forward(&mut g, store, x, t, z);
        g.take_value(v)
    }
}

/// Flow-matching loss of `head` on clean rows `m` with noise `eps` at times `t`,
/// conditioned on `z` (rows aligned with `m`).
pub fn flow_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: &FlowHead,
    store: &ParamStore<T>,
    z: Var,
    m: &Matrix<T>,
    eps: &Matrix<T>,
    t: &[T],
) -> Var {
    assert_eq!(m.shape(), eps.shape(), "noise shape");
    assert_eq!(m.rows(), t.len(), "one time per row");
    let mut x_t = Matrix::zeros(m.rows(), m.cols());
    let mut target = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        x_t.row_mut(r).copy_from_slice(&flow_interpolate(m.row(r), eps.row(r), t[r]));
        target.row_mut(r).copy_from_slice(&flow_target(m.row(r), eps.row(r)));
    }
    let x = g.constant(x_t);
    let v = head.forward(g, store, x, t, z);
    let target = g.constant(target);
    g.mse(v, target)
}

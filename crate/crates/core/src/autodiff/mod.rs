//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod kernels;
mod tape;

pub use tape::{AttentionMask, Tape, Var, PROB_EPS};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {shapes:?}: {msg}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>>, msg: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("{0}")]
    BadInput(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]], msg: impl Into<String>) -> Self {
        TensorError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect(), msg: msg.into() }
    }
}

/// Row-major `f64` array with an explicit shape. The empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                shapes: vec![shape],
                msg: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Central-difference gradient check of a scalar-valued tape function.
///
/// Returns the maximum over coordinates of `|a - n| / max(1, |a|, |n|)`
/// where `a` is the backward gradient and `n` the numeric one.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv);

    let eval = |probe: &Tensor| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        Ok(t.scalar(out))
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// First and second moment estimates for Adam, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: AdamConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient buffer per parameter");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_linear_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.scale(x, 3.0)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn adam_zero_grad_is_noop_on_first_step() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut s, AdamConfig::default());
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        adam_step(&mut p, &[vec![0.5, -3.0, 1e-3]], &mut s, cfg);
        for (d, sign) in p[0].data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((d + 0.01 * sign).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn adam_two_steps_match_scalar_recurrence() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let gs = [0.4, -0.2];
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut s = AdamState::new(&p);
        for g in gs {
            adam_step(&mut p, &[vec![g]], &mut s, cfg);
        }
        // Scalar recurrence written out step by step.
        let (b1, b2) = (0.9f64, 0.999f64);
        let m1 = (1.0 - b1) * 0.4;
        let v1 = (1.0 - b2) * 0.4 * 0.4;
        let x1 = 1.0 - 0.1 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + 1e-8);
        let m2 = b1 * m1 + (1.0 - b1) * -0.2;
        let v2 = b2 * v1 + (1.0 - b2) * -0.2 * -0.2;
        let (bc1, bc2) = (1.0 - b1 * b1, 1.0 - b2 * b2);
        let x2 = x1 - 0.1 * (m2 / bc1) / ((v2 / bc2).sqrt() + 1e-8);
        assert_eq!(p[0].data()[0], x2);
        assert_eq!(s.m[0][0], m2);
        assert_eq!(s.v[0][0], v2);
    }
}

//! Small differentiable building blocks with hand-written gradients.
//!
//! Gradients accumulate into each tensor's `grad` buffer until
//! [`Parameterized::zero_grad`] is called; the optimizer owns that schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim("tensor data", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything holding named tensors. Names are dotted paths and visiting order
/// is stable, so flattened views and optimizer state line up across calls.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(&t.grad));
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
    }

    /// Sum of squared parameters; adds `2·weight·θ` to every gradient.
    fn add_l2_penalty(&mut self, weight: f64) -> f64 {
        let mut total = 0.0;
        self.visit_mut("", &mut |_, t| {
            for (g, &v) in t.grad.iter_mut().zip(&t.data) {
                total += v * v;
                *g += 2.0 * weight * v;
            }
        });
        weight * total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

/// `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        AffineParams {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Uniform(−a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, output);
        p.weight.data = glorot(rng, input, output, input * output);
        p
    }

    pub fn from_parts(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let output = weight.len();
        let input = weight.first().map_or(0, Vec::len);
        if bias.len() != output {
            return Err(Error::dim("affine bias", output, bias.len()));
        }
        let mut flat = Vec::with_capacity(input * output);
        for row in weight {
            if row.len() != input {
                return Err(Error::dim("affine weight row", input, row.len()));
            }
            flat.extend(row);
        }
        Ok(AffineParams {
            weight: Tensor::from_data(&[output, input], flat)?,
            bias: Tensor::from_data(&[output], bias)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        if x.len() != inp {
            return Err(Error::dim("affine input", inp, x.len()));
        }
        let w = &self.weight.data;
        Ok((0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                self.bias.data[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    /// Accumulates `∂W += upstream·xᵀ`, `∂b += upstream`; returns `Wᵀ·upstream`.
    pub fn backward(&mut self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        if x.len() != inp {
            return Err(Error::dim("affine input", inp, x.len()));
        }
        if upstream.len() != out {
            return Err(Error::dim("affine upstream", out, upstream.len()));
        }
        let mut dx = vec![0.0; inp];
        for (o, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            self.bias.grad[o] += u;
            let row = o * inp;
            for i in 0..inp {
                self.weight.grad[row + i] += u * x[i];
                dx[i] += self.weight.data[row + i] * u;
            }
        }
        Ok(dx)
    }
}

impl Parameterized for AffineParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::InvalidArgument(format!("unknown activation `{s}`"))),
        }
    }
}

/// Two-layer perceptron `W2·σ(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2Params {
    pub layer1: AffineParams,
    pub activation: Activation,
    pub layer2: AffineParams,
}

/// Intermediate values of a forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp2Params {
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Mlp2Params {
            layer1: AffineParams::zeros(input, hidden),
            activation,
            layer2: AffineParams::zeros(hidden, output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Mlp2Params {
            layer1: AffineParams::init(input, hidden, rng),
            activation,
            layer2: AffineParams::init(hidden, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Mlp2Cache> {
        if self.layer2.input_dim() != self.layer1.output_dim() {
            return Err(Error::dim("mlp hidden", self.layer1.output_dim(), self.layer2.input_dim()));
        }
        let pre = self.layer1.forward(x)?;
        let hidden: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        let output = self.layer2.forward(&hidden)?;
        Ok(Mlp2Cache {
            input: x.to_vec(),
            pre,
            hidden,
            output,
        })
    }

    pub fn backward(&mut self, cache: &Mlp2Cache, upstream: &[f64]) -> Result<Vec<f64>> {
        let dh = self.layer2.backward(&cache.hidden, upstream)?;
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&cache.pre)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        self.layer1.backward(&cache.input, &dpre)
    }
}

impl Parameterized for Mlp2Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.layer1.visit(&join(prefix, "layer1"), f);
        self.layer2.visit(&join(prefix, "layer2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.layer1.visit_mut(&join(prefix, "layer1"), f);
        self.layer2.visit_mut(&join(prefix, "layer2"), f);
    }
}

/// `max(0, γ − s_pos + s_neg)` and its subgradient w.r.t. `(s_pos, s_neg)`.
/// At the kink the inactive branch is taken.
pub fn hinge(margin: f64, s_pos: f64, s_neg: f64) -> (f64, (f64, f64)) {
    let arg = margin - s_pos + s_neg;
    if arg > 0.0 {
        (arg, (-1.0, 1.0))
    } else {
        (0.0, (0.0, 0.0))
    }
}

/// Gradient of `cos(p, w)` with respect to `p`: `(ŵ − cos·p̂) / ‖p‖`.
pub fn cosine_grad_wrt_first(p: &[f64], w: &[f64]) -> Option<(f64, Vec<f64>)> {
    let np = crate::embeddings::norm(p);
    let nw = crate::embeddings::norm(w);
    if np == 0.0 || nw == 0.0 {
        return None;
    }
    let c = crate::embeddings::dot(p, w) / (np * nw);
    let g = p
        .iter()
        .zip(w)
        .map(|(pi, wi)| (wi / nw - c * pi / np) / np)
        .collect();
    Some((c, g))
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// One evaluation of a scalar objective.
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    /// Which hinges were active. A coordinate whose perturbation flips any
    /// entry crosses a kink and is skipped.
    pub active_set: Vec<bool>,
    /// Smallest `|hinge argument|` at this point; `INFINITY` when no hinge.
    pub kink_gap: f64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            active_set: Vec::new(),
            kink_gap: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Max relative error per named tensor.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// The base point itself lies within `2ε` of a hinge kink.
    pub kink_flagged: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol && self.checked > 0
    }
}

/// Floor on the denominator of the relative error, so that coordinates
/// whose true gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Coordinates far below the largest gradient entry drown in rounding
/// noise of the differences; they are compared on the gradient's own scale.
const GRAD_SCALE_FLOOR: f64 = 1e-4;

fn noise_floor(grad: &[f64]) -> f64 {
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    REL_ERROR_FLOOR.max(GRAD_SCALE_FLOOR * scale)
}

/// Checks a flat objective: `eval(x, want_grad)` returns the probe and, when
/// asked, the analytic gradient at `x`.
pub fn grad_check_fn<F>(x0: &[f64], mut eval: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64], bool) -> (Probe, Option<Vec<f64>>),
{
    let names = vec![(String::from("x"), x0.len())];
    grad_check_named(x0, &names, &mut eval, eps, tol)
}

fn grad_check_named<F>(x0: &[f64], names: &[(String, usize)], eval: &mut F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64], bool) -> (Probe, Option<Vec<f64>>),
{
    let (base, grad) = eval(x0, true);
    let grad = grad.ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;
    if grad.len() != x0.len() {
        return Err(Error::dim("gradient", x0.len(), grad.len()));
    }
    if !base.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let mut report = GradCheckReport {
        tol,
        kink_flagged: base.kink_gap <= 2.0 * eps,
        ..Default::default()
    };
    let floor = noise_floor(&grad);
    let mut x = x0.to_vec();
    let mut offset = 0;
    for (name, len) in names {
        let mut worst: f64 = 0.0;
        for k in offset..offset + len {
            let orig = x[k];
            x[k] = orig + eps;
            let (plus, _) = eval(&x, false);
            x[k] = orig - eps;
            let (minus, _) = eval(&x, false);
            x[k] = orig;
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(Error::NonFinite(format!("objective near {name}[{}]", k - offset)));
            }
            if plus.active_set != base.active_set || minus.active_set != base.active_set {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * eps);
            worst = worst.max(relative_error_floored(grad[k], numeric, floor));
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name.clone(), worst);
        offset += len;
    }
    Ok(report)
}

/// Checks a model's accumulated gradients against central differences.
/// `objective` must zero nothing itself; it is called on a model whose
/// gradients were cleared and should accumulate into them.
pub fn grad_check<M, F>(model: &mut M, mut objective: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M) -> Probe,
{
    let x0 = model.flat_params();
    let mut names = Vec::new();
    model.visit("", &mut |n, t| names.push((n, t.len())));
    let mut eval = |x: &[f64], want: bool| {
        model.set_flat_params(x);
        model.zero_grad();
        let probe = objective(model);
        let g = want.then(|| model.flat_grads());
        (probe, g)
    };
    let report = grad_check_named(&x0, &names, &mut eval, eps, tol);
    model.set_flat_params(&x0);
    model.zero_grad();
    report
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 5] = b"CZPM1";

/// Named tensors as stored on disk (`CZPM1`, then per tensor: u32 name
/// length, UTF-8 name, u32 rank, u32 dims, little-endian f32 payload).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<M: Parameterized + ?Sized>(model: &M, prefix: &str) -> Self {
        let mut ck = Checkpoint::default();
        ck.absorb(model, prefix);
        ck
    }

    pub fn absorb<M: Parameterized + ?Sized>(&mut self, model: &M, prefix: &str) {
        model.visit(prefix, &mut |name, t| {
            self.tensors
                .insert(name, (t.shape.clone(), t.data.iter().map(|&v| v as f32).collect()));
        });
    }

    /// Copies stored values into the model. Every tensor the model names must exist.
    pub fn restore<M: Parameterized + ?Sized>(&self, model: &mut M, prefix: &str) -> Result<()> {
        let mut err = None;
        model.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some((shape, data)) if *shape == t.shape => {
                    for (d, &v) in t.data.iter_mut().zip(data) {
                        *d = f64::from(v);
                    }
                }
                Some((shape, _)) => {
                    err = Some(Error::InvalidArgument(format!(
                        "checkpoint tensor `{name}` has shape {shape:?}, model expects {:?}",
                        t.shape
                    )))
                }
                None => err = Some(Error::InvalidArgument(format!("checkpoint lacks tensor `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, (shape, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 5 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing CZPM1 header"));
        }
        let mut pos = 5;
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let mut ck = Checkpoint::default();
        while pos < bytes.len() {
            let len = read_u32(&mut pos)? as usize;
            let name = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            pos += len;
            let rank = read_u32(&mut pos)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut pos).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            pos += 4 * n;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.insert(name, (shape, data));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affine_forward_examples() {
        let id = AffineParams::from_parts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(id.forward(&[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
        let p = AffineParams::from_parts(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        assert_eq!(p.forward(&[2.0, 3.0]).unwrap(), vec![6.0]);
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut r = rng(11);
        let mut p = AffineParams::init(3, 4, &mut r);
        p.bias.data = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        // f = c · (W x + b)
        let report = grad_check(
            &mut p,
            |m| {
                let y = m.forward(&x).unwrap();
                m.backward(&x, &c).unwrap();
                Probe::smooth(y.iter().zip(&c).map(|(a, b)| a * b).sum())
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // input gradient Wᵀc
        let dx = p.backward(&x, &c).unwrap();
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += 1e-5;
            let mut xm = x.clone();
            xm[i] -= 1e-5;
            let f = |v: &[f64]| p.forward(v).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
            let num = (f(&xp) - f(&xm)) / 2e-5;
            assert!(relative_error(dx[i], num) < 1e-6);
        }
    }

    #[test]
    fn mlp_zero_network_outputs_bias() {
        let mut m = Mlp2Params::zeros(3, 4, 2, Activation::Tanh);
        m.layer2.bias.data = vec![0.25, -1.5];
        assert_eq!(m.forward(&[9.0, -2.0, 0.1]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn mlp_scalar_tanh() {
        let mut m = Mlp2Params::zeros(1, 1, 1, Activation::Tanh);
        m.layer1.weight.data = vec![1.0];
        m.layer2.weight.data = vec![1.0];
        let y = m.forward(&[0.5]).unwrap()[0];
        assert!((y - 0.462117).abs() < 1e-6);
        assert_eq!(y, 0.5f64.tanh());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for activation in [Activation::Tanh, Activation::Softplus] {
            let mut r = rng(5);
            let mut m = Mlp2Params::init(7, 5, 2, activation, &mut r);
            m.layer1.bias.data = (0..5).map(|_| r.random_range(-0.5..0.5)).collect();
            let x: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
            let c = [0.7, -1.3];
            let report = grad_check(
                &mut m,
                |m| {
                    let cache = m.forward_cached(&x).unwrap();
                    m.backward(&cache, &c).unwrap();
                    Probe::smooth(cache.output[0] * c[0] + cache.output[1] * c[1])
                },
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{activation:?} {report:?}");
            assert_eq!(report.per_param.len(), 4);
        }
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        let mut r = rng(3);
        let base = Mlp2Params::init(4, 3, 1, Activation::Tanh, &mut r);
        let x1 = [0.1, -0.2, 0.3, 0.9];
        let x2 = [-0.5, 0.4, 0.0, 0.2];
        let grads_of = |xs: &[&[f64]]| {
            let mut m = base.clone();
            for x in xs {
                let c = m.forward_cached(x).unwrap();
                m.backward(&c, &[1.0]).unwrap();
            }
            m.flat_grads()
        };
        let g1 = grads_of(&[&x1]);
        let g2 = grads_of(&[&x2]);
        let g12 = grads_of(&[&x1, &x2]);
        for k in 0..g12.len() {
            assert!((g12[k] - (g1[k] + g2[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.1, 0.8, 0.5).0, 0.0);
        assert_eq!(hinge(0.5, 0.3, 0.3).0, 0.5);
        assert!((hinge(0.1, 0.2, 0.4).0 - 0.3).abs() < 1e-15);
        assert_eq!(hinge(0.1, 0.2, 0.4).1, (-1.0, 1.0));
        // kink: inactive branch
        assert_eq!(hinge(0.5, 0.5, 0.0), (0.0, (0.0, 0.0)));
    }

    #[test]
    fn hinge_convex_in_neg_and_nonincreasing_in_pos() {
        let grid: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.1).collect();
        for &g in &[0.0, 0.1, 0.5] {
            for &a in &grid {
                for w in grid.windows(3) {
                    let (l0, l1, l2) = (hinge(g, a, w[0]).0, hinge(g, a, w[1]).0, hinge(g, a, w[2]).0);
                    assert!(l1 <= 0.5 * (l0 + l2) + 1e-12);
                    assert!(hinge(g, w[0], a).0 >= hinge(g, w[1], a).0);
                }
            }
        }
    }

    #[test]
    fn quadratic_grad_check() {
        let x0 = [0.3, -1.2, 2.5, 0.0];
        let r = grad_check_fn(
            &x0,
            |x, _| {
                let v = x.iter().map(|v| v * v).sum();
                (Probe::smooth(v), Some(x.iter().map(|v| 2.0 * v).collect()))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_skips_kinks() {
        // f(s) = hinge(0.5, s, 0) at s = 0.5: exactly on the kink.
        let eval = |x: &[f64], _| {
            let arg = 0.5 - x[0];
            let (v, (dp, _)) = hinge(0.5, x[0], 0.0);
            (
                Probe {
                    value: v,
                    active_set: vec![arg > 0.0],
                    kink_gap: arg.abs(),
                },
                Some(vec![dp]),
            )
        };
        let r = grad_check_fn(&[0.5], eval, 1e-5, 1e-6).unwrap();
        assert!(r.kink_flagged);
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 0);
        let r = grad_check_fn(&[0.2], eval, 1e-5, 1e-6).unwrap();
        assert!(!r.kink_flagged && r.passed());
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let r = grad_check_fn(&[1.0], |_, _| (Probe::smooth(f64::NAN), Some(vec![0.0])), 1e-5, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn cosine_gradient() {
        let w = [0.3, -0.7, 1.1];
        let p0 = [1.0, 2.0, -0.5];
        let r = grad_check_fn(
            &p0,
            |p, _| {
                let (c, g) = cosine_grad_wrt_first(p, &w).unwrap();
                (Probe::smooth(c), Some(g))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(1);
        let m = Mlp2Params::init(3, 2, 1, Activation::Tanh, &mut r);
        let ck = Checkpoint::from_model(&m, "prior.net");
        assert!(ck.tensors.contains_key("prior.net.layer1.weight"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.czpm");
        ck.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"CZPM1");
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut m2 = Mlp2Params::zeros(3, 2, 1, Activation::Tanh);
        back.restore(&mut m2, "prior.net").unwrap();
        for (a, b) in m.flat_params().iter().zip(m2.flat_params()) {
            assert_eq!(*a as f32, b as f32);
        }
        let mut wrong = Mlp2Params::zeros(4, 2, 1, Activation::Tanh);
        assert!(back.restore(&mut wrong, "prior.net").is_err());
        assert!(Checkpoint::from_bytes(b"XXXXX", &path).is_err());
    }
}

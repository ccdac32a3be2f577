//! Linear layers, per-channel PReLU and the three-stage MLP block shared by
//! the deposit, removal and classification networks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Initial negative-side slope of every PReLU channel.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Slope,
}

/// Anything that owns trainable tensors.
///
/// `visit_params` and `visit_params_mut` must walk the tensors in the same
/// order; optimizers, serialization and gradient collection rely on it.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, t| n += t.len());
        n
    }

    /// Weights uniform in `±sqrt(1/n_in)`, biases zero, slopes 0.25.
    fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_params_mut(&mut |kind, t| match kind {
            ParamKind::Weight => {
                let n_in = t.shape()[1].max(1);
                let bound = (1.0 / n_in as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
            }
            ParamKind::Bias => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
            ParamKind::Slope => t.data_mut().iter_mut().for_each(|v| *v = PRELU_INIT_SLOPE),
        });
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Flat copy of every parameter value, in visiting order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params("", &mut |_, _, t| out.extend_from_slice(t.data()));
        out
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::ParamMismatch(format!("expected {} values, got {}", self.param_count(), values.len())));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Flat copy of every gradient (zeros where none was accumulated).
    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params("", &mut |_, _, t| match t.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        });
        out
    }

    fn to_named_params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, _, t| {
            out.push(NamedParam { name, shape: t.shape().to_vec(), values: t.data().to_vec() })
        });
        out
    }

    /// Loads values saved by [`Parameterized::to_named_params`]. Names and
    /// shapes must match exactly.
    fn load_named_params(&mut self, params: &[NamedParam]) -> Result<()> {
        let mut expected = Vec::new();
        self.visit_params("", &mut |name, _, t| expected.push((name, t.shape().to_vec())));
        if expected.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, document has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(params) {
            if *name != p.name || *shape != p.shape || p.values.len() != shape.iter().product::<usize>() {
                return Err(Error::ParamMismatch(format!("{name} {shape:?} vs {} {:?}", p.name, p.shape)));
            }
        }
        let flat: Vec<f64> = params.iter().flat_map(|p| p.values.iter().copied()).collect();
        self.set_flat_params(&flat)
    }
}

/// One serialized parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn param_tensor(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearLayer {
    /// Zero-initialized `n_in → n_out` layer.
    pub fn new(n_in: usize, n_out: usize) -> Self {
        Self { weight: param_tensor(&[n_out, n_in]), bias: param_tensor(&[n_out]) }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }

    /// Weight count plus bias count, e.g. `15·15 + 15 = 240`.
    pub fn count(n_in: usize, n_out: usize) -> usize {
        n_in * n_out + n_out
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(tape.affine(x, self.weight, self.bias)?)
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        f(join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        f(ParamKind::Weight, &mut self.weight);
        f(ParamKind::Bias, &mut self.bias);
    }
}

/// One learned negative-side slope per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PreluLayer {
    pub slopes: Tensor,
}

impl PreluLayer {
    pub fn new(channels: usize) -> Self {
        Self { slopes: Tensor::filled(&[channels], PRELU_INIT_SLOPE).with_requires_grad(true) }
    }

    pub fn channels(&self) -> usize {
        self.slopes.len()
    }
}

impl Parameterized for PreluLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        f(join(prefix, "slopes"), ParamKind::Slope, &self.slopes);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        f(ParamKind::Slope, &mut self.slopes);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalKind {
    Relu,
    Prelu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalActivation {
    Relu,
    Prelu(PreluLayer),
    None,
}

/// Input linear → PReLU → output linear → final activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub input_linear: LinearLayer,
    pub mid_activation: PreluLayer,
    pub output_linear: LinearLayer,
    pub final_activation: FinalActivation,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    input_linear: LinearVars,
    mid_slopes: Var,
    output_linear: LinearVars,
    final_slopes: Option<Var>,
    final_relu: bool,
}

impl MlpBlock {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, last: FinalKind) -> Self {
        let final_activation = match last {
            FinalKind::Relu => FinalActivation::Relu,
            FinalKind::Prelu => FinalActivation::Prelu(PreluLayer::new(n_out)),
            FinalKind::None => FinalActivation::None,
        };
        Self {
            input_linear: LinearLayer::new(n_in, n_hidden),
            mid_activation: PreluLayer::new(n_hidden),
            output_linear: LinearLayer::new(n_hidden, n_out),
            final_activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.input_linear.n_in()
    }

    pub fn n_hidden(&self) -> usize {
        self.input_linear.n_out()
    }

    pub fn n_out(&self) -> usize {
        self.output_linear.n_out()
    }

    pub fn final_kind(&self) -> FinalKind {
        match self.final_activation {
            FinalActivation::Relu => FinalKind::Relu,
            FinalActivation::Prelu(_) => FinalKind::Prelu,
            FinalActivation::None => FinalKind::None,
        }
    }

    /// Closed-form parameter count of an `n_in → n_hidden → n_out` block.
    pub fn count(n_in: usize, n_hidden: usize, n_out: usize, last: FinalKind) -> usize {
        LinearLayer::count(n_in, n_hidden)
            + n_hidden
            + LinearLayer::count(n_hidden, n_out)
            + if last == FinalKind::Prelu { n_out } else { 0 }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let input_linear = self.input_linear.bind(tape);
        let mid_slopes = tape.leaf(&self.mid_activation.slopes);
        let output_linear = self.output_linear.bind(tape);
        let final_slopes = match &self.final_activation {
            FinalActivation::Prelu(p) => Some(tape.leaf(&p.slopes)),
            _ => None,
        };
        let final_relu = matches!(self.final_activation, FinalActivation::Relu);
        MlpVars { input_linear, mid_slopes, output_linear, final_slopes, final_relu }
    }

    /// Evaluates the block on its own tape and returns the output values.
    pub fn forward_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.leaf(x);
        let out = vars.forward(&mut tape, input)?;
        Ok(tape.value(out).to_vec())
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.input_linear.forward(tape, x)?;
        let h = tape.prelu(h, self.mid_slopes)?;
        let y = self.output_linear.forward(tape, h)?;
        Ok(match (self.final_slopes, self.final_relu) {
            (Some(a), _) => tape.prelu(y, a)?,
            (None, true) => tape.relu(y)?,
            (None, false) => y,
        })
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        self.input_linear.vars(out);
        out.push(self.mid_slopes);
        self.output_linear.vars(out);
        if let Some(a) = self.final_slopes {
            out.push(a);
        }
    }
}

impl Parameterized for MlpBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.input_linear.visit_params(&join(prefix, "input_linear"), f);
        self.mid_activation.visit_params(&join(prefix, "mid_activation"), f);
        self.output_linear.visit_params(&join(prefix, "output_linear"), f);
        if let FinalActivation::Prelu(p) = &self.final_activation {
            p.visit_params(&join(prefix, "final_activation"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.input_linear.visit_params_mut(f);
        self.mid_activation.visit_params_mut(f);
        self.output_linear.visit_params_mut(f);
        if let FinalActivation::Prelu(p) = &mut self.final_activation {
            p.visit_params_mut(f);
        }
    }
}

/// Adds the gradients recorded for `vars` into the parameters of `model`,
/// pairing them in visiting order.
pub fn collect_grads<P: Parameterized + ?Sized>(model: &mut P, tape: &Tape, vars: &[Var]) -> Result<()> {
    let mut idx = 0;
    let mut result = Ok(());
    model.visit_params_mut(&mut |_, t| {
        if result.is_err() {
            return;
        }
        result = match vars.get(idx) {
            Some(&v) => tape.accumulate_into(v, t).map_err(Error::from),
            None => Err(Error::ParamMismatch("fewer bound vars than parameters".into())),
        };
        idx += 1;
    });
    result?;
    if idx != vars.len() {
        return Err(Error::ParamMismatch(format!("{} vars bound for {idx} parameters", vars.len())));
    }
    Ok(())
}

//! Comparator models: a static feed-forward network, a vanilla recurrent
//! network with an MLP core, and a stacked LSTM.
//!
//! Temporal-benchmark widths reproduce the reference parameter totals
//! exactly (RNN 5,480, LSTM 5,490). Spatial widths are parameter-matched
//! stand-ins; see [`FfConfig::spatial`], [`RnnConfig::spatial`] and
//! [`LstmConfig::spatial`].

use serde::{Deserialize, Serialize};

use crate::nn::{FinalKind, LinearLayer, LinearVars, MlpBlock, MlpVars, ParamKind, Parameterized};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfConfig {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl FfConfig {
    /// 784 → 413 → 10: 328,768 parameters.
    pub fn spatial() -> Self {
        Self { inputs: 784, hidden: 413, classes: 10 }
    }
}

/// Feed-forward classifier over the whole flattened bitmap.
#[derive(Debug, Clone, PartialEq)]
pub struct FfNn {
    pub config: FfConfig,
    pub mlp: MlpBlock,
}

impl FfNn {
    pub fn new(config: FfConfig) -> Self {
        let mlp = MlpBlock::new(config.inputs, config.hidden, config.classes, FinalKind::Prelu);
        Self { config, mlp }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        self.mlp.bind(tape)
    }

    /// Joins the row steps into one flat input, then applies the MLP.
    pub fn forward(vars: &MlpVars, tape: &mut Tape, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::EmptySequence);
        }
        let flat = tape.concat(steps)?;
        vars.forward(tape, flat)
    }

    pub fn forward_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward_values(&Tensor::vector(image.to_vec())?)
    }
}

impl Parameterized for FfNn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.mlp.visit_params(&scoped(prefix, "mlp"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.mlp.visit_params_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub stimulus: usize,
    pub state: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub classes: usize,
}

impl RnnConfig {
    /// Core 48 → 35 → 20, head 20 → 30 → 10: 3,470 parameters.
    pub fn spatial() -> Self {
        Self { stimulus: 28, state: 20, hidden: 35, head_hidden: 30, classes: 10 }
    }

    /// Core 34 → 50 → 30, head 30 → 50 → 10: 5,480 parameters.
    pub fn temporal() -> Self {
        Self { stimulus: 4, state: 30, hidden: 50, head_hidden: 50, classes: 10 }
    }
}

/// Recurrent network whose state is the output of an MLP fed with the
/// stimulus and the previous state.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaRnn {
    pub config: RnnConfig,
    pub core: MlpBlock,
    pub head: MlpBlock,
}

#[derive(Debug, Clone, Copy)]
pub struct VanillaRnnVars {
    core: MlpVars,
    head: MlpVars,
    state_dim: usize,
}

impl VanillaRnn {
    pub fn new(config: RnnConfig) -> Self {
        let core = MlpBlock::new(config.stimulus + config.state, config.hidden, config.state, FinalKind::Prelu);
        let head = MlpBlock::new(config.state, config.head_hidden, config.classes, FinalKind::Prelu);
        Self { config, core, head }
    }

    pub fn bind(&self, tape: &mut Tape) -> VanillaRnnVars {
        VanillaRnnVars { core: self.core.bind(tape), head: self.head.bind(tape), state_dim: self.config.state }
    }

    pub fn forward_sequence(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let steps = sequence
            .iter()
            .map(|s| tape.constant(vec![s.len()], s.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let logits = vars.forward(&mut tape, &steps)?;
        Ok(tape.value(logits).to_vec())
    }
}

impl VanillaRnnVars {
    /// `state' = core(stimulus ‖ state)`.
    pub fn step(&self, tape: &mut Tape, state: Var, stimulus: Var) -> Result<Var> {
        let input = tape.concat(&[stimulus, state])?;
        self.core.forward(tape, input)
    }

    pub fn forward(&self, tape: &mut Tape, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or(Error::EmptySequence)?;
        let state_dim = self.state_dim;
        let shape = match tape.shape(*first) {
            [b, _] => vec![*b, state_dim],
            _ => vec![state_dim],
        };
        let n = shape.iter().product();
        let mut state = tape.constant(shape, vec![0.0; n])?;
        for &s in steps {
            state = self.step(tape, state, s)?;
        }
        self.head.forward(tape, state)
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        self.core.vars(out);
        self.head.vars(out);
    }
}

impl Parameterized for VanillaRnn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.core.visit_params(&scoped(prefix, "core"), f);
        self.head.visit_params(&scoped(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.core.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// Gated cell without peepholes: `4·o·(i + o + 1)` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_gate: LinearLayer,
    pub forget_gate: LinearLayer,
    pub candidate: LinearLayer,
    pub output_gate: LinearLayer,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    input_gate: LinearVars,
    forget_gate: LinearVars,
    candidate: LinearVars,
    output_gate: LinearVars,
}

impl LstmCell {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        let gate = || LinearLayer::new(inputs + outputs, outputs);
        Self { input_gate: gate(), forget_gate: gate(), candidate: gate(), output_gate: gate() }
    }

    pub fn inputs(&self) -> usize {
        self.input_gate.n_in() - self.outputs()
    }

    pub fn outputs(&self) -> usize {
        self.input_gate.n_out()
    }

    pub fn count(inputs: usize, outputs: usize) -> usize {
        4 * outputs * (inputs + outputs + 1)
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            input_gate: self.input_gate.bind(tape),
            forget_gate: self.forget_gate.bind(tape),
            candidate: self.candidate.bind(tape),
            output_gate: self.output_gate.bind(tape),
        }
    }
}

impl LstmCellVars {
    /// Returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xh = tape.concat(&[x, h])?;
        let i = self.input_gate.forward(tape, xh)?;
        let i = tape.sigmoid(i)?;
        let f = self.forget_gate.forward(tape, xh)?;
        let f = tape.sigmoid(f)?;
        let g = self.candidate.forward(tape, xh)?;
        let g = tape.tanh(g)?;
        let o = self.output_gate.forward(tape, xh)?;
        let o = tape.sigmoid(o)?;
        let kept = tape.mul(f, c)?;
        let written = tape.mul(i, g)?;
        let c_next = tape.add(kept, written)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        self.input_gate.vars(out);
        self.forget_gate.vars(out);
        self.candidate.vars(out);
        self.output_gate.vars(out);
    }
}

impl Parameterized for LstmCell {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.input_gate.visit_params(&scoped(prefix, "input_gate"), f);
        self.forget_gate.visit_params(&scoped(prefix, "forget_gate"), f);
        self.candidate.visit_params(&scoped(prefix, "candidate"), f);
        self.output_gate.visit_params(&scoped(prefix, "output_gate"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.input_gate.visit_params_mut(f);
        self.forget_gate.visit_params_mut(f);
        self.candidate.visit_params_mut(f);
        self.output_gate.visit_params_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub inputs: usize,
    /// Output width of each stacked cell.
    pub layers: Vec<usize>,
    pub classes: usize,
}

impl LstmConfig {
    /// One 28 → 17 cell and a 17 → 10 head: 3,308 parameters.
    pub fn spatial() -> Self {
        Self { inputs: 28, layers: vec![17], classes: 10 }
    }

    /// 4 → 20 and 20 → 20 cells, 20 → 10 head: 5,490 parameters.
    pub fn temporal() -> Self {
        Self { inputs: 4, layers: vec![20, 20], classes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub config: LstmConfig,
    pub cells: Vec<LstmCell>,
    pub head: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct LstmVars {
    cells: Vec<LstmCellVars>,
    widths: Vec<usize>,
    head: LinearVars,
}

impl Lstm {
    pub fn new(config: LstmConfig) -> Result<Self> {
        if config.layers.is_empty() || config.layers.contains(&0) {
            return Err(Error::Config("LSTM needs at least one layer of positive width".into()));
        }
        let mut inputs = config.inputs;
        let cells = config
            .layers
            .iter()
            .map(|&o| {
                let cell = LstmCell::new(inputs, o);
                inputs = o;
                cell
            })
            .collect();
        let head = LinearLayer::new(inputs, config.classes);
        Ok(Self { config, cells, head })
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            cells: self.cells.iter().map(|c| c.bind(tape)).collect(),
            widths: self.config.layers.clone(),
            head: self.head.bind(tape),
        }
    }
}

impl LstmVars {
    pub fn forward(&self, tape: &mut Tape, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or(Error::EmptySequence)?;
        let rows = match tape.shape(*first) {
            [b, _] => Some(*b),
            _ => None,
        };
        let mut states = Vec::with_capacity(self.widths.len());
        for &w in &self.widths {
            let shape = rows.map_or(vec![w], |b| vec![b, w]);
            let n = shape.iter().product();
            let h = tape.constant(shape.clone(), vec![0.0; n])?;
            let c = tape.constant(shape, vec![0.0; n])?;
            states.push((h, c));
        }
        for &x in steps {
            let mut input = x;
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(tape, input, state.0, state.1)?;
                input = state.0;
            }
        }
        let top = states.last().expect("at least one layer").0;
        self.head.forward(tape, top)
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        self.cells.iter().for_each(|c| c.vars(out));
        self.head.vars(out);
    }
}

impl Parameterized for Lstm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        for (i, c) in self.cells.iter().enumerate() {
            c.visit_params(&scoped(prefix, &format!("cells.{i}")), f);
        }
        self.head.visit_params(&scoped(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.cells.iter_mut().for_each(|c| c.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_totals() {
        let ff = FfNn::new(FfConfig::spatial());
        assert_eq!(ff.param_count(), 328_768);
        let rnn = VanillaRnn::new(RnnConfig::temporal());
        assert_eq!(rnn.core.param_count(), 1750 + 50 + 1530 + 30);
        assert_eq!(rnn.head.param_count(), 1550 + 50 + 510 + 10);
        assert_eq!(rnn.param_count(), 5480);
        assert_eq!(VanillaRnn::new(RnnConfig::spatial()).param_count(), 3470);
        let lstm = Lstm::new(LstmConfig::temporal()).unwrap();
        assert_eq!(lstm.cells[0].param_count(), 2000);
        assert_eq!(lstm.cells[1].param_count(), 3280);
        assert_eq!(lstm.param_count(), 5490);
        assert_eq!(Lstm::new(LstmConfig::spatial()).unwrap().param_count(), 3308);
    }

    #[test]
    fn lstm_cell_formula_exhaustive() {
        for i in 1..=32 {
            for o in 1..=32 {
                assert_eq!(LstmCell::new(i, o).param_count(), 4 * o * (i + o + 1));
                assert_eq!(LstmCell::count(i, o), 4 * o * (i + o + 1));
            }
        }
    }

    #[test]
    fn zero_ffnn_gives_zero_logits() {
        let ff = FfNn::new(FfConfig::spatial());
        let logits = ff.forward_image(&vec![0.5; 784]).unwrap();
        assert_eq!(logits, vec![0.0; 10]);
        assert!(ff.forward_image(&[0.0; 783]).is_err());
    }

    #[test]
    fn ffnn_concat_matches_flat_image() {
        let mut ff = FfNn::new(FfConfig { inputs: 12, hidden: 5, classes: 3 });
        ff.init_params(2);
        let rows: Vec<Vec<f64>> = (0..3).map(|r| (0..4).map(|c| (r * 4 + c) as f64 / 12.0).collect()).collect();
        let flat: Vec<f64> = rows.concat();
        let mut tape = Tape::new();
        let vars = ff.bind(&mut tape);
        let steps: Vec<Var> = rows.iter().map(|r| tape.constant(vec![4], r.clone()).unwrap()).collect();
        let y = FfNn::forward(&vars, &mut tape, &steps).unwrap();
        assert_eq!(tape.value(y), ff.forward_image(&flat).unwrap().as_slice());
    }

    #[test]
    fn zero_rnn_keeps_zero_state() {
        let rnn = VanillaRnn::new(RnnConfig::temporal());
        let mut tape = Tape::new();
        let vars = rnn.bind(&mut tape);
        let mut state = tape.constant(vec![30], vec![0.0; 30]).unwrap();
        for _ in 0..3 {
            let s = tape.constant(vec![4], vec![1.0, -1.0, 0.0, 1.0]).unwrap();
            state = vars.step(&mut tape, state, s).unwrap();
        }
        assert!(tape.value(state).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lstm_gates_halve_cell() {
        let cell = LstmCell::new(3, 2);
        let mut tape = Tape::new();
        let vars = cell.bind(&mut tape);
        let x = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let h = tape.constant(vec![2], vec![0.3, -0.3]).unwrap();
        let c = tape.constant(vec![2], vec![0.8, -0.4]).unwrap();
        let (h1, c1) = vars.step(&mut tape, x, h, c).unwrap();
        assert_eq!(tape.value(c1), &[0.4, -0.2]);
        let expected: Vec<f64> = [0.4f64, -0.2].iter().map(|v| 0.5 * v.tanh()).collect();
        assert_eq!(tape.value(h1), expected.as_slice());
    }

    #[test]
    fn lstm_rejects_empty_stack() {
        assert!(Lstm::new(LstmConfig { inputs: 4, layers: vec![], classes: 10 }).is_err());
    }
}

//! The stigmergic memory cell and classifier.
//!
//! Per step, with marks `m` and stimulus `s`:
//!
//! ```text
//! d  = deposit_mlp(s ‖ proj_deposit(m))     ≥ 0 (ReLU output)
//! r  = removal_mlp(s ‖ proj_removal(m))     ≥ 0
//! m' = clamp(m + (d − r), finishing, saturation)
//! ```
//!
//! After the last stimulus the classification MLP maps the marks to logits.

use serde::{Deserialize, Serialize};

use crate::nn::{FinalKind, LinearLayer, LinearVars, MlpBlock, MlpVars, ParamKind, Parameterized};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmConfig {
    /// Number of mark variables `M`.
    pub marks: usize,
    /// Stimulus width `S`.
    pub stimulus: usize,
    /// Hidden width of the deposit and removal MLPs.
    pub hidden: usize,
    /// Hidden width of the classification MLP.
    pub class_hidden: usize,
    pub classes: usize,
    /// Finishing level (lower bound of every mark).
    pub m_lo: f64,
    /// Saturation level (upper bound of every mark).
    pub m_hi: f64,
    pub m_init: f64,
}

impl SmConfig {
    /// Row-sequence MNIST: 15 marks, 28-pixel rows.
    pub fn spatial() -> Self {
        Self { marks: 15, stimulus: 28, hidden: 20, class_hidden: 10, classes: 10, m_lo: 0.0, m_hi: 1.0, m_init: 0.0 }
    }

    /// Pen-stroke MNIST: 30 marks, 4-channel stroke steps.
    pub fn temporal() -> Self {
        Self { marks: 30, stimulus: 4, hidden: 20, class_hidden: 20, classes: 10, m_lo: 0.0, m_hi: 1.0, m_init: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.marks, self.stimulus, self.hidden, self.class_hidden, self.classes];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if !(self.m_lo <= self.m_init && self.m_init <= self.m_hi) {
            return Err(Error::Config(format!(
                "need m_lo <= m_init <= m_hi, got {} <= {} <= {}",
                self.m_lo, self.m_init, self.m_hi
            )));
        }
        Ok(())
    }
}

/// The mark vector `m(t)`: `[M]`, or `[B, M]` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkState {
    pub marks: Tensor,
}

impl MarkState {
    pub fn values(&self) -> &[f64] {
        self.marks.data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmRnn {
    pub config: SmConfig,
    pub proj_deposit: LinearLayer,
    pub proj_removal: LinearLayer,
    pub deposit_mlp: MlpBlock,
    pub removal_mlp: MlpBlock,
    pub classify_mlp: MlpBlock,
}

/// An [`SmRnn`] bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct SmRnnVars {
    proj_deposit: LinearVars,
    proj_removal: LinearVars,
    deposit_mlp: MlpVars,
    removal_mlp: MlpVars,
    classify_mlp: MlpVars,
    m_lo: f64,
    m_hi: f64,
}

/// Intermediate values of one recorded step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub deposit: Var,
    pub removal: Var,
    pub marks: Var,
}

impl SmRnn {
    /// Zero-initialized model; call [`Parameterized::init_params`] to draw
    /// weights.
    pub fn new(config: SmConfig) -> Result<Self> {
        config.validate()?;
        let (m, s, h) = (config.marks, config.stimulus, config.hidden);
        Ok(Self {
            proj_deposit: LinearLayer::new(m, m),
            proj_removal: LinearLayer::new(m, m),
            deposit_mlp: MlpBlock::new(s + m, h, m, FinalKind::Relu),
            removal_mlp: MlpBlock::new(s + m, h, m, FinalKind::Relu),
            classify_mlp: MlpBlock::new(m, config.class_hidden, config.classes, FinalKind::Prelu),
            config,
        })
    }

    /// Every mark at `m_init`, for `batch` rows (`None` gives a rank-1 state).
    pub fn init_state(&self, batch: Option<usize>) -> MarkState {
        let shape = match batch {
            Some(b) => vec![b, self.config.marks],
            None => vec![self.config.marks],
        };
        MarkState { marks: Tensor::filled(&shape, self.config.m_init) }
    }

    pub fn bind(&self, tape: &mut Tape) -> SmRnnVars {
        SmRnnVars {
            proj_deposit: self.proj_deposit.bind(tape),
            proj_removal: self.proj_removal.bind(tape),
            deposit_mlp: self.deposit_mlp.bind(tape),
            removal_mlp: self.removal_mlp.bind(tape),
            classify_mlp: self.classify_mlp.bind(tape),
            m_lo: self.config.m_lo,
            m_hi: self.config.m_hi,
        }
    }

    /// One untaped step on a single sample.
    pub fn step(&self, state: &MarkState, stimulus: &[f64]) -> Result<MarkState> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let m = tape.leaf(&state.marks);
        let s = tape.constant(vec![stimulus.len()], stimulus.to_vec())?;
        let next = vars.step(&mut tape, m, s)?;
        Ok(MarkState { marks: tape.tensor(next.marks) })
    }

    pub fn classify(&self, state: &MarkState) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let m = tape.leaf(&state.marks);
        let logits = vars.classify(&mut tape, m)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Mark states after each step of `sequence` (excluding the initial one).
    pub fn trace(&self, sequence: &[Vec<f64>]) -> Result<Vec<MarkState>> {
        let mut state = self.init_state(None);
        sequence
            .iter()
            .map(|s| {
                state = self.step(&state, s)?;
                Ok(state.clone())
            })
            .collect()
    }

    /// Logits for a single sequence.
    pub fn forward(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let steps = sequence
            .iter()
            .map(|s| tape.constant(vec![s.len()], s.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let init = tape.leaf(&self.init_state(None).marks);
        let logits = vars.forward(&mut tape, init, &steps)?;
        Ok(tape.value(logits).to_vec())
    }
}

impl SmRnnVars {
    /// Records one mark update and returns its intermediates.
    pub fn step(&self, tape: &mut Tape, marks: Var, stimulus: Var) -> Result<StepVars> {
        let pd = self.proj_deposit.forward(tape, marks)?;
        let pr = self.proj_removal.forward(tape, marks)?;
        let din = tape.concat(&[stimulus, pd])?;
        let rin = tape.concat(&[stimulus, pr])?;
        let deposit = self.deposit_mlp.forward(tape, din)?;
        let removal = self.removal_mlp.forward(tape, rin)?;
        let net = tape.sub(deposit, removal)?;
        let moved = tape.add(marks, net)?;
        let marks = tape.clamp(moved, self.m_lo, self.m_hi)?;
        Ok(StepVars { deposit, removal, marks })
    }

    pub fn classify(&self, tape: &mut Tape, marks: Var) -> Result<Var> {
        self.classify_mlp.forward(tape, marks)
    }

    /// Folds [`SmRnnVars::step`] over `steps` from `init`, then classifies.
    pub fn forward(&self, tape: &mut Tape, init: Var, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut marks = init;
        for &s in steps {
            marks = self.step(tape, marks, s)?.marks;
        }
        self.classify(tape, marks)
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        self.proj_deposit.vars(out);
        self.proj_removal.vars(out);
        self.deposit_mlp.vars(out);
        self.removal_mlp.vars(out);
        self.classify_mlp.vars(out);
    }
}

impl Parameterized for SmRnn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.proj_deposit.visit_params(&p("proj_deposit"), f);
        self.proj_removal.visit_params(&p("proj_removal"), f);
        self.deposit_mlp.visit_params(&p("deposit_mlp"), f);
        self.removal_mlp.visit_params(&p("removal_mlp"), f);
        self.classify_mlp.visit_params(&p("classify_mlp"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.proj_deposit.visit_params_mut(f);
        self.proj_removal.visit_params_mut(f);
        self.deposit_mlp.visit_params_mut(f);
        self.removal_mlp.visit_params_mut(f);
        self.classify_mlp.visit_params_mut(f);
    }
}

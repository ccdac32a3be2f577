//! A single handle over every classifier, with JSON persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{FfConfig, FfNn, Lstm, LstmConfig, RnnConfig, VanillaRnn};
use crate::nn::{NamedParam, ParamKind, Parameterized};
use crate::smrnn::{SmConfig, SmRnn};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sm-rnn")]
    SmRnn,
    #[serde(rename = "ff-nn")]
    FfNn,
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "lstm")]
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::SmRnn, ModelKind::FfNn, ModelKind::Rnn, ModelKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SmRnn => "sm-rnn",
            ModelKind::FfNn => "ff-nn",
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (sm-rnn, ff-nn, rnn, lstm)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spatial,
    Temporal,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Spatial => "spatial",
            DatasetKind::Temporal => "temporal",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(DatasetKind::Spatial),
            "temporal" => Ok(DatasetKind::Temporal),
            _ => Err(Error::Config(format!("unknown dataset {s:?} (spatial, temporal)"))),
        }
    }
}

/// Architecture description, enough to rebuild a zero-initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config")]
pub enum ModelConfig {
    #[serde(rename = "sm-rnn")]
    SmRnn(SmConfig),
    #[serde(rename = "ff-nn")]
    FfNn(FfConfig),
    #[serde(rename = "rnn")]
    Rnn(RnnConfig),
    #[serde(rename = "lstm")]
    Lstm(LstmConfig),
}

impl ModelConfig {
    /// Benchmark configuration for a (model, dataset) pairing.
    pub fn preset(kind: ModelKind, dataset: DatasetKind) -> Result<Self> {
        use DatasetKind::*;
        Ok(match (kind, dataset) {
            (ModelKind::SmRnn, Spatial) => ModelConfig::SmRnn(SmConfig::spatial()),
            (ModelKind::SmRnn, Temporal) => ModelConfig::SmRnn(SmConfig::temporal()),
            (ModelKind::FfNn, Spatial) => ModelConfig::FfNn(FfConfig::spatial()),
            (ModelKind::FfNn, Temporal) => {
                return Err(Error::Config("ff-nn needs fixed-size input; it only pairs with spatial".into()))
            }
            (ModelKind::Rnn, Spatial) => ModelConfig::Rnn(RnnConfig::spatial()),
            (ModelKind::Rnn, Temporal) => ModelConfig::Rnn(RnnConfig::temporal()),
            (ModelKind::Lstm, Spatial) => ModelConfig::Lstm(LstmConfig::spatial()),
            (ModelKind::Lstm, Temporal) => ModelConfig::Lstm(LstmConfig::temporal()),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::SmRnn(_) => ModelKind::SmRnn,
            ModelConfig::FfNn(_) => ModelKind::FfNn,
            ModelConfig::Rnn(_) => ModelKind::Rnn,
            ModelConfig::Lstm(_) => ModelKind::Lstm,
        }
    }
}

/// Sequence classifier that records its forward pass on a tape.
pub trait SequenceModel: Parameterized {
    /// Records the forward pass over `steps` (each `[S]` or `[B, S]`) and
    /// returns the logits together with the bound parameter vars, in
    /// visiting order.
    fn forward_tape(&self, tape: &mut Tape, steps: &[Var]) -> Result<(Var, Vec<Var>)>;

    /// Logits for one sequence.
    fn logits(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let steps = sequence
            .iter()
            .map(|s| tape.constant(vec![s.len()], s.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (logits, _) = self.forward_tape(&mut tape, &steps)?;
        Ok(tape.value(logits).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    SmRnn(SmRnn),
    FfNn(FfNn),
    Rnn(VanillaRnn),
    Lstm(Lstm),
}

/// On-disk form of a model: architecture plus named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
}

impl Model {
    /// Zero-initialized model for `config`.
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(match config {
            ModelConfig::SmRnn(c) => Model::SmRnn(SmRnn::new(c.clone())?),
            ModelConfig::FfNn(c) => Model::FfNn(FfNn::new(c.clone())),
            ModelConfig::Rnn(c) => Model::Rnn(VanillaRnn::new(c.clone())),
            ModelConfig::Lstm(c) => Model::Lstm(Lstm::new(c.clone())?),
        })
    }

    /// Preset model with parameters drawn from `seed`.
    pub fn build(kind: ModelKind, dataset: DatasetKind, seed: u64) -> Result<Self> {
        let mut model = Self::from_config(&ModelConfig::preset(kind, dataset)?)?;
        model.init_params(seed);
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::SmRnn(_) => ModelKind::SmRnn,
            Model::FfNn(_) => ModelKind::FfNn,
            Model::Rnn(_) => ModelKind::Rnn,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::SmRnn(m) => ModelConfig::SmRnn(m.config.clone()),
            Model::FfNn(m) => ModelConfig::FfNn(m.config.clone()),
            Model::Rnn(m) => ModelConfig::Rnn(m.config.clone()),
            Model::Lstm(m) => ModelConfig::Lstm(m.config.clone()),
        }
    }

    fn inner(&self) -> &dyn Parameterized {
        match self {
            Model::SmRnn(m) => m,
            Model::FfNn(m) => m,
            Model::Rnn(m) => m,
            Model::Lstm(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Parameterized {
        match self {
            Model::SmRnn(m) => m,
            Model::FfNn(m) => m,
            Model::Rnn(m) => m,
            Model::Lstm(m) => m,
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument { config: self.config(), params: self.to_named_params() }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let mut model = Self::from_config(&doc.config)?;
        model.load_named_params(&doc.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Parameterized for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.inner().visit_params(prefix, f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor)) {
        self.inner_mut().visit_params_mut(f)
    }
}

impl SequenceModel for Model {
    fn forward_tape(&self, tape: &mut Tape, steps: &[Var]) -> Result<(Var, Vec<Var>)> {
        let mut vars = Vec::new();
        let logits = match self {
            Model::SmRnn(m) => {
                let bound = m.bind(tape);
                bound.vars(&mut vars);
                let first = steps.first().ok_or(Error::EmptySequence)?;
                let rows = match tape.shape(*first) {
                    [b, _] => Some(*b),
                    _ => None,
                };
                let init = tape.leaf(&m.init_state(rows).marks);
                bound.forward(tape, init, steps)?
            }
            Model::FfNn(m) => {
                let bound = m.bind(tape);
                bound.vars(&mut vars);
                FfNn::forward(&bound, tape, steps)?
            }
            Model::Rnn(m) => {
                let bound = m.bind(tape);
                bound.vars(&mut vars);
                bound.forward(tape, steps)?
            }
            Model::Lstm(m) => {
                let bound = m.bind(tape);
                bound.vars(&mut vars);
                bound.forward(tape, steps)?
            }
        };
        Ok((logits, vars))
    }
}

//! Parameterised layers on top of the tape, and the parameter store that owns
//! their weights.

mod checkpoint;
mod embedding;
mod lstm;
mod mlp;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub(crate) use embedding::EMBEDDING_INIT_BOUND;
pub use embedding::{EmbeddingTable, PAD_ROW, UNK_ROW};
pub use lstm::{
    bilstm_encode, bilstm_encode_batch, lstm_step, run_lstm, run_lstm_projected, LstmParams,
};
pub use mlp::MlpParams;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    trainable: bool,
    /// Row that must stay at its initial value (embedding padding).
    frozen_row: Option<usize>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn frozen_row(&self) -> Option<usize> {
        self.frozen_row
    }
}

/// Named parameters keyed by hierarchical dotted names such as
/// `encoder0.lstm_fwd.w_ih`.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        self.register_with_frozen_row(name, tensor, trainable, None)
    }

    pub fn register_with_frozen_row(
        &mut self,
        name: &str,
        tensor: Tensor,
        trainable: bool,
        frozen_row: Option<usize>,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(trainable),
            trainable,
            frozen_row,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Parameters in name order, the order used for serialization.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.by_name.values().map(|&id| (id, &self.params[id.0]))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records parameter `id` as a node on `tape`.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.param(id, &p.tensor, p.trainable)
    }

    /// Drops all gradient buffers.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.set_grad(None).unwrap();
        }
    }

    /// Adds tape gradients into the per-parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            if p.tensor.grad().is_none() {
                p.tensor.set_grad(Some(vec![0.0; n])).unwrap();
            }
            g.add_to(p.tensor.grad_mut().unwrap());
        }
    }
}

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("positive dimensions")
}

/// Forward-pass mode. Dropout is only active in training.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(v),
            Mode::Train { dropout, rng } => tape.dropout(v, *dropout, *rng),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParameterStore::new();
        store.register("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.register("a.w", Tensor::zeros(&[2]), true).is_err());
        assert_eq!(store.id("a.w").unwrap().index(), 0);
        assert!(matches!(store.id("b"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn sorted_iteration_is_by_name() {
        let mut store = ParameterStore::new();
        store.register("z", Tensor::zeros(&[1]), true).unwrap();
        store.register("a", Tensor::zeros(&[1]), true).unwrap();
        store.register("m", Tensor::zeros(&[1]), false).unwrap();
        let names: Vec<_> = store
            .iter_sorted()
            .map(|(_, p)| p.name().to_string())
            .collect();
        assert_eq!(names, ["a", "m", "z"]);
        assert_eq!(store.trainable_count(), 2);
    }

    #[test]
    fn fan_in_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = uniform_fan_in(&[16, 16], 16, &mut rng);
        assert!(t.values().iter().all(|v| v.abs() <= 0.25));
        assert!(t.values().iter().any(|v| v.abs() > 0.2));
    }
}

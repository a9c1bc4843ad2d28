use rand_chacha::ChaCha8Rng;

use super::{uniform_fan_in, Mode, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ParamId, Tape, Var};

/// Multi-layer perceptron: affine layers with `activation` (and dropout in
/// training) between them, nothing after the last layer.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<(ParamId, ParamId)>,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpParams {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "perceptron `{prefix}` needs at least one layer, got dims {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, out) = (pair[0], pair[1]);
            let w = store.register(
                &format!("{prefix}.layer{k}.w"),
                uniform_fan_in(&[fan_in, out], fan_in, rng),
                true,
            )?;
            let b = store.register(
                &format!("{prefix}.layer{k}.b"),
                uniform_fan_in(&[out], fan_in, rng),
                true,
            )?;
            layers.push((w, b));
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
            activation,
        })
    }

    pub fn bind(store: &ParameterStore, prefix: &str, activation: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        let mut dims = Vec::new();
        for k in 0.. {
            let Ok(w) = store.id(&format!("{prefix}.layer{k}.w")) else {
                break;
            };
            let b = store.id(&format!("{prefix}.layer{k}.b"))?;
            let shape = store.tensor(w).shape();
            if dims.is_empty() {
                dims.push(shape[0]);
            }
            dims.push(shape[1]);
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::UnknownParameter(format!("{prefix}.layer0.w")));
        }
        Ok(Self {
            layers,
            dims,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Applies the perceptron to `[in]` or `[batch, in]`.
    pub fn forward(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let vector = shape.len() == 1;
        if shape.last() != Some(&self.input_width()) || shape.len() > 2 {
            return Err(Error::shape("mlp_forward", &shape, &[self.input_width()]));
        }
        let mut h = if vector {
            tape.reshape(x, &[1, shape[0]])?
        } else {
            x
        };
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = store.var(tape, w);
            let bv = store.var(tape, b);
            let z = tape.matmul(h, wv)?;
            h = tape.add_bias(z, bv)?;
            if k < last {
                h = tape.activation(h, self.activation);
                h = mode.dropout(tape, h)?;
            }
        }
        if vector {
            h = tape.reshape(h, &[self.output_width()])?;
        }
        Ok(h)
    }
}

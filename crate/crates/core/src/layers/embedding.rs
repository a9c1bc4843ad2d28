use rand_chacha::ChaCha8Rng;

use super::{uniform, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Padding row of word tables; always zero.
pub const PAD_ROW: usize = 0;
/// Row that out-of-vocabulary tokens map to.
pub const UNK_ROW: usize = 1;

/// Scale of the uniform initialisation for rows without pretrained values.
pub(crate) const EMBEDDING_INIT_BOUND: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    param: ParamId,
    rows: usize,
    dim: usize,
    padding_row: Option<usize>,
    trainable: bool,
}

impl EmbeddingTable {
    /// Registers a randomly initialised table. When `with_padding` is set,
    /// row [`PAD_ROW`] is zero and receives no gradient.
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        rows: usize,
        dim: usize,
        with_padding: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut weights = uniform(&[rows, dim], EMBEDDING_INIT_BOUND, rng);
        let padding_row = with_padding.then_some(PAD_ROW);
        if with_padding {
            weights.values_mut()[..dim].fill(0.0);
        }
        Self::from_weights(store, name, weights, padding_row, trainable)
    }

    /// Registers a table with the given weights.
    pub fn from_weights(
        store: &mut ParameterStore,
        name: &str,
        weights: Tensor,
        padding_row: Option<usize>,
        trainable: bool,
    ) -> Result<Self> {
        let shape = weights.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "embedding table `{name}` must be 2-D, got {shape:?}"
            )));
        }
        if let Some(p) = padding_row {
            if weights.values()[p * shape[1]..(p + 1) * shape[1]]
                .iter()
                .any(|&v| v != 0.0)
            {
                return Err(Error::Config(format!(
                    "padding row of `{name}` must be zero"
                )));
            }
        }
        let param = store.register_with_frozen_row(name, weights, trainable, padding_row)?;
        Ok(Self {
            param,
            rows: shape[0],
            dim: shape[1],
            padding_row,
            trainable,
        })
    }

    /// Re-binds to an existing parameter of the store (after loading).
    pub fn bind(store: &ParameterStore, name: &str, padding_row: Option<usize>) -> Result<Self> {
        let param = store.id(name)?;
        let p = store.param(param);
        let shape = p.tensor().shape();
        Ok(Self {
            param,
            rows: shape[0],
            dim: shape[1],
            padding_row,
            trainable: p.trainable(),
        })
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn padding_row(&self) -> Option<usize> {
        self.padding_row
    }

    /// Gathers rows `indices` as a `[len, dim]` node.
    pub fn lookup(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        indices: &[usize],
    ) -> Result<Var> {
        tape.embedding(
            self.param,
            store.tensor(self.param),
            indices,
            self.padding_row,
            self.trainable,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numeric_gradient, relative_error, GradBuf};
    use rand::SeedableRng;

    fn table(trainable: bool) -> (ParameterStore, EmbeddingTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let t =
            EmbeddingTable::register(&mut store, "word", 6, 3, true, trainable, &mut rng).unwrap();
        (store, t)
    }

    #[test]
    fn padding_lookup_is_zero_and_repeats_match() {
        let (store, t) = table(true);
        let mut tape = Tape::new();
        let pad = t.lookup(&store, &mut tape, &[PAD_ROW]).unwrap();
        assert_eq!(tape.value(pad), &[0.0; 3]);
        let twice = t.lookup(&store, &mut tape, &[2, 2]).unwrap();
        let v = tape.value(twice);
        assert_eq!(v[..3], v[3..]);
        assert_eq!(&v[..3], &store.tensor(t.param()).values()[6..9]);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let (store, t) = table(true);
        let mut tape = Tape::new();
        assert!(matches!(
            t.lookup(&store, &mut tape, &[6]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_touches_only_looked_up_row_and_matches_differences() {
        let (store, t) = table(true);
        let mut tape = Tape::new();
        let e = t.lookup(&store, &mut tape, &[3]).unwrap();
        let sq = tape.mul(e, e).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut dense = vec![0.0; 18];
        match tape.param_grads().get(t.param()).unwrap() {
            g @ GradBuf::Rows { rows, .. } => {
                assert_eq!(rows.keys().copied().collect::<Vec<_>>(), vec![3]);
                g.add_to(&mut dense);
            }
            other => panic!("{other:?}"),
        }
        let weights = store.tensor(t.param()).values().to_vec();
        let numeric =
            numeric_gradient(|w| Ok(w[9..12].iter().map(|x| x * x).sum()), &weights, 1e-5).unwrap();
        for (a, n) in dense.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-6);
        }
        assert!(dense[..9].iter().chain(&dense[12..]).all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_table_produces_no_gradient() {
        let (store, t) = table(false);
        let mut tape = Tape::new();
        let e = t.lookup(&store, &mut tape, &[3, 4]).unwrap();
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        assert!(tape.param_grads().is_empty());
    }
}

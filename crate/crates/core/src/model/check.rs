//! Finite-difference check of the full model's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncodedSentence, EntityGraph, GpGnn, ModelConfig, MARK_FIRST, MARK_NONE, MARK_SECOND};
use crate::error::Result;
use crate::layers::{uniform, Mode, ParameterStore, PAD_ROW};
use crate::tensor::{Activation, Tape, RELATIVE_ERROR_FLOOR};

/// Scale used when comparing gradients of a loss of magnitude `loss`.
///
/// A central difference carries rounding noise of about `eps * |loss| / step`;
/// gradients smaller than ten times that noise divided by `tolerance` cannot be
/// resolved to `tolerance` and are compared on this absolute scale instead.
pub fn resolution_floor(loss: f64, step: f64, tolerance: f64) -> f64 {
    let noise = f64::EPSILON * loss.abs().max(1.0) / step;
    (10.0 * noise / tolerance).max(RELATIVE_ERROR_FLOOR)
}

/// Per-parameter outcome of [`check_model_gradients`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
}

#[derive(Clone, Debug)]
pub struct ModelGradReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub loss: f64,
}

impl ModelGradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn coordinates(&self) -> usize {
        self.params.iter().map(|p| p.coordinates).sum()
    }
}

fn loss_value(model: &GpGnn, store: &ParameterStore, sentence: &EncodedSentence) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = model.sentence_loss(store, &mut tape, sentence, 1.0, &mut Mode::Eval)?;
    Ok(tape.value(loss)[0])
}

/// Compares the tape gradient of the sentence loss (evaluation mode) with
/// central differences for every trainable coordinate; frozen rows are
/// skipped.
#[allow(clippy::needless_range_loop)]
pub fn check_model_gradients(
    model: &GpGnn,
    store: &ParameterStore,
    sentence: &EncodedSentence,
    step: f64,
    tolerance: f64,
) -> Result<ModelGradReport> {
    let mut tape = Tape::new();
    let loss = model.sentence_loss(store, &mut tape, sentence, 1.0, &mut Mode::Eval)?;
    let value = tape.value(loss)[0];
    let floor = resolution_floor(value, step, tolerance);
    tape.backward(loss)?;
    let grads = tape.take_param_grads();

    let mut probe = store.clone();
    let mut params = Vec::new();
    for (id, p) in store.iter_sorted() {
        if !p.trainable() {
            continue;
        }
        let n = p.tensor().numel();
        let mut analytic = vec![0.0; n];
        if let Some(g) = grads.get(id) {
            g.add_to(&mut analytic);
        }
        let width = p.tensor().shape().last().copied().unwrap_or(1);
        let frozen = p.frozen_row().map(|r| r * width..(r + 1) * width);
        let mut worst = (0, 0.0);
        let mut checked = 0;
        for k in 0..n {
            if frozen.as_ref().is_some_and(|f| f.contains(&k)) {
                continue;
            }
            let orig = p.tensor().values()[k];
            probe.tensor_mut(id).values_mut()[k] = orig + step;
            let up = loss_value(model, &probe, sentence)?;
            probe.tensor_mut(id).values_mut()[k] = orig - step;
            let down = loss_value(model, &probe, sentence)?;
            probe.tensor_mut(id).values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.1 {
                worst = (k, err);
            }
            checked += 1;
        }
        params.push(ParamCheck {
            name: p.name().to_string(),
            coordinates: checked,
            max_relative_error: worst.1,
            worst_coordinate: worst.0,
        });
    }
    Ok(ModelGradReport {
        params,
        tolerance,
        floor,
        loss: value,
    })
}

/// Small model configuration used for gradient checks.
pub fn toy_config(layers: usize) -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        position_dim: 3,
        hidden_size: 5,
        node_dim: 4,
        layers,
        activation: Activation::Relu,
        dropout: 0.0,
        tied: false,
        train_word_embeddings: true,
    }
}

/// A random `m`-entity sentence of single-token mentions, with one gold class
/// per ordered pair, and a freshly initialised toy model.
pub fn toy_problem(
    config: &ModelConfig,
    m: usize,
    relations: usize,
    seed: u64,
) -> Result<(ParameterStore, GpGnn, EncodedSentence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 10;
    let mut words = uniform(&[vocab, config.word_dim], 0.5, &mut rng);
    words.values_mut()[PAD_ROW * config.word_dim..(PAD_ROW + 1) * config.word_dim].fill(0.0);
    let mut store = ParameterStore::new();
    let model = GpGnn::register(&mut store, config, words, relations, &mut rng)?;

    let len = 2 * m + 1;
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
    let graph = EntityGraph::new(m)?;
    let markers = graph
        .edges
        .iter()
        .map(|&(i, j)| {
            (0..len)
                .map(|t| match t {
                    t if t == 2 * i + 1 => MARK_FIRST,
                    t if t == 2 * j + 1 => MARK_SECOND,
                    _ => MARK_NONE,
                })
                .collect()
        })
        .collect();
    let labels = graph
        .edges
        .iter()
        .map(|_| Some(rng.gen_range(0..relations)))
        .collect();
    let sentence = EncodedSentence {
        id: format!("toy-{m}"),
        tokens,
        graph,
        markers,
        labels,
        kb_ids: vec![None; m],
    };
    Ok((store, model, sentence))
}

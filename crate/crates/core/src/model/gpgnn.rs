use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{initial_states, pair_representation, propagate_layer, EncodedSentence};
use crate::error::{Error, Result};
use crate::layers::{
    run_lstm_projected, uniform, EmbeddingTable, LstmParams, MlpParams, Mode, ParameterStore,
    PAD_ROW,
};
use crate::tensor::{softmax, Activation, Tape, Tensor, Var};

/// Number of position markers (neither, first entity, second entity).
pub const MARKER_COUNT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub position_dim: usize,
    /// LSTM state width and hidden width of both perceptrons.
    pub hidden_size: usize,
    /// Node state width `d_n`; must be even.
    pub node_dim: usize,
    /// Number of propagation layers `K`.
    pub layers: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// Share one edge encoder across all layers.
    pub tied: bool,
    pub train_word_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 50,
            position_dim: 5,
            hidden_size: 256,
            node_dim: 12,
            layers: 2,
            activation: Activation::Relu,
            dropout: 0.5,
            tied: false,
            train_word_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.node_dim == 0 || !self.node_dim.is_multiple_of(2) {
            return bad(format!(
                "node_dim must be a positive even integer, got {}",
                self.node_dim
            ));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.word_dim == 0 || self.position_dim == 0 || self.hidden_size == 0 {
            return bad("word_dim, position_dim and hidden_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    fn encoder_count(&self) -> usize {
        if self.tied {
            1
        } else {
            self.layers
        }
    }
}

/// BiLSTM plus perceptron producing one transition matrix per edge.
#[derive(Clone, Debug)]
pub struct EdgeEncoder {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub mlp: MlpParams,
}

/// Parameter handles of the full model.
#[derive(Clone, Debug)]
pub struct GpGnn {
    pub config: ModelConfig,
    pub word: EmbeddingTable,
    pub position: EmbeddingTable,
    pub encoders: Vec<EdgeEncoder>,
    pub head: MlpParams,
    pub relations: usize,
}

fn encoder_prefix(n: usize) -> String {
    format!("encoder{n}")
}

impl GpGnn {
    /// Registers all parameters. `word_weights` is `[vocab, word_dim]` with a
    /// zero padding row.
    pub fn register(
        store: &mut ParameterStore,
        config: &ModelConfig,
        word_weights: Tensor,
        relations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if word_weights.shape().len() != 2 || word_weights.shape()[1] != config.word_dim {
            return Err(Error::shape(
                "word embeddings",
                word_weights.shape(),
                &[0, config.word_dim],
            ));
        }
        if relations < 2 {
            return Err(Error::Config("need NA and at least one relation".into()));
        }
        let word = EmbeddingTable::from_weights(
            store,
            "embed.word",
            word_weights,
            Some(PAD_ROW),
            config.train_word_embeddings,
        )?;
        let position = EmbeddingTable::from_weights(
            store,
            "embed.position",
            uniform(&[MARKER_COUNT, config.position_dim], 0.5, rng),
            None,
            true,
        )?;
        let input = config.word_dim + config.position_dim;
        let h = config.hidden_size;
        let dn = config.node_dim;
        let mut encoders = Vec::new();
        for n in 0..config.encoder_count() {
            let prefix = encoder_prefix(n);
            encoders.push(EdgeEncoder {
                fwd: LstmParams::register(store, &format!("{prefix}.lstm_fwd"), input, h, rng)?,
                bwd: LstmParams::register(store, &format!("{prefix}.lstm_bwd"), input, h, rng)?,
                mlp: MlpParams::register(
                    store,
                    &format!("{prefix}.mlp"),
                    &[2 * h, h, dn * dn],
                    config.activation,
                    rng,
                )?,
            });
        }
        let head = MlpParams::register(
            store,
            "head",
            &[config.layers * dn, h, relations],
            config.activation,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            word,
            position,
            encoders,
            head,
            relations,
        })
    }

    /// Binds to parameters of a loaded store, checking shapes against `config`.
    pub fn bind(store: &ParameterStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let word = EmbeddingTable::bind(store, "embed.word", Some(PAD_ROW))?;
        let position = EmbeddingTable::bind(store, "embed.position", None)?;
        let mut encoders = Vec::new();
        for n in 0..config.encoder_count() {
            let prefix = encoder_prefix(n);
            encoders.push(EdgeEncoder {
                fwd: LstmParams::bind(store, &format!("{prefix}.lstm_fwd"))?,
                bwd: LstmParams::bind(store, &format!("{prefix}.lstm_bwd"))?,
                mlp: MlpParams::bind(store, &format!("{prefix}.mlp"), config.activation)?,
            });
        }
        let head = MlpParams::bind(store, "head", config.activation)?;
        let model = Self {
            config: config.clone(),
            word,
            position,
            relations: head.output_width(),
            encoders,
            head,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let dn2 = c.node_dim * c.node_dim;
        let ok = self.word.dim() == c.word_dim
            && self.position.dim() == c.position_dim
            && self.position.rows() == MARKER_COUNT
            && self.encoders.iter().all(|e| {
                e.fwd.input == c.word_dim + c.position_dim
                    && e.bwd.input == e.fwd.input
                    && e.fwd.hidden == c.hidden_size
                    && e.bwd.hidden == c.hidden_size
                    && e.mlp.input_width() == 2 * c.hidden_size
                    && e.mlp.output_width() == dn2
            })
            && self.head.input_width() == c.layers * c.node_dim;
        if !ok {
            return Err(Error::Config(
                "stored parameter shapes do not match the model configuration".into(),
            ));
        }
        Ok(())
    }

    /// Embedded context of a single edge, `[l, word_dim + position_dim]`.
    pub fn encode_edge_context(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        sentence: &EncodedSentence,
        edge: usize,
    ) -> Result<Var> {
        let words = self.word.lookup(store, tape, &sentence.tokens)?;
        let marks = self.position.lookup(store, tape, &sentence.markers[edge])?;
        tape.concat(&[words, marks], 1)
    }

    /// Transition matrices `[E, d_n, d_n]` for every layer, computed once per
    /// sentence. With tied weights all layers share one node.
    pub fn transition_matrices(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        sentence: &EncodedSentence,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        let steps = sentence.len();
        if steps == 0 {
            return Err(Error::EmptySequence("sentence"));
        }
        let edges = sentence.graph.edge_count();
        let dn = self.config.node_dim;
        let words = self.word.lookup(store, tape, &sentence.tokens)?;
        let marks = self.position.lookup(store, tape, &[0, 1, 2])?;

        // Time-major rows: row t * E + e is token t of edge e.
        let mut word_rows = Vec::with_capacity(steps * edges);
        let mut mark_rows = Vec::with_capacity(steps * edges);
        for t in 0..steps {
            for e in 0..edges {
                word_rows.push(t);
                mark_rows.push(sentence.markers[e][t]);
            }
        }

        let mut out = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let mut finals = Vec::with_capacity(2);
            for (lstm, reverse) in [(&enc.fwd, false), (&enc.bwd, true)] {
                // The input projection splits into a per-token word part and
                // a per-marker part, so it is computed once per token.
                let w = store.var(tape, lstm.w_ih);
                let w_word = tape.narrow(w, 0, 0, self.config.word_dim)?;
                let w_mark = tape.narrow(w, 0, self.config.word_dim, self.config.position_dim)?;
                let xw = tape.matmul(words, w_word)?;
                let pw = tape.matmul(marks, w_mark)?;
                let xw = tape.gather_rows(xw, &word_rows)?;
                let pw = tape.gather_rows(pw, &mark_rows)?;
                let projected = tape.add(xw, pw)?;
                let b = store.var(tape, lstm.bias);
                let projected = tape.add_bias(projected, b)?;
                finals.push(run_lstm_projected(
                    store, tape, lstm, projected, steps, edges, reverse,
                )?);
            }
            let encoded = tape.concat(&finals, 1)?;
            let encoded = mode.dropout(tape, encoded)?;
            let flat = enc.mlp.forward(store, tape, encoded, mode)?;
            if enc.mlp.output_width() != dn * dn {
                return Err(Error::shape(
                    "transition matrices",
                    tape.shape(flat),
                    &[edges, dn * dn],
                ));
            }
            out.push(tape.reshape(flat, &[edges, dn, dn])?);
        }
        if self.config.tied {
            out = vec![out[0]; self.config.layers];
        }
        Ok(out)
    }

    /// Node states after each of the `K` layers for the stacked `targets`.
    pub fn propagate(
        &self,
        tape: &mut Tape,
        sentence: &EncodedSentence,
        transitions: &[Var],
        targets: &[(usize, usize)],
    ) -> Result<Vec<Var>> {
        let graph = &sentence.graph;
        let h0 = initial_states(graph.m, targets, self.config.node_dim)?;
        let mut h = tape.leaf(&h0);
        let mut layers = Vec::with_capacity(transitions.len());
        for &a in transitions {
            h = propagate_layer(tape, h, a, graph, targets.len(), self.config.activation)?;
            layers.push(h);
        }
        Ok(layers)
    }

    /// Relation logits `[P, |R|]` for the target pairs.
    pub fn logits(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        sentence: &EncodedSentence,
        targets: &[(usize, usize)],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let transitions = self.transition_matrices(store, tape, sentence, mode)?;
        let layers = self.propagate(tape, sentence, &transitions, targets)?;
        let r = pair_representation(tape, &layers, targets, sentence.graph.m)?;
        self.head.forward(store, tape, r, mode)
    }

    /// Summed cross entropy over every ordered pair. Pairs whose gold class is
    /// `NA` (class 0) are weighted by `na_weight`.
    pub fn sentence_loss(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        sentence: &EncodedSentence,
        na_weight: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let labels = sentence.complete_labels()?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.relations) {
            return Err(Error::IndexOutOfRange {
                what: "relation class",
                index: bad,
                len: self.relations,
            });
        }
        let weights: Vec<f64> = labels
            .iter()
            .map(|&l| if l == 0 { na_weight } else { 1.0 })
            .collect();
        let logits = self.logits(store, tape, sentence, &sentence.graph.edges, mode)?;
        tape.softmax_cross_entropy_rows(logits, &labels, &weights)
    }

    /// Probability vectors for every ordered pair, in graph edge order.
    pub fn predict(
        &self,
        store: &ParameterStore,
        sentence: &EncodedSentence,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let logits = self.logits(
            store,
            &mut tape,
            sentence,
            &sentence.graph.edges,
            &mut Mode::Eval,
        )?;
        Ok(tape
            .value(logits)
            .chunks(self.relations)
            .map(softmax)
            .collect())
    }
}

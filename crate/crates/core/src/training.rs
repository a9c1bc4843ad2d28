//! Mini-batch training with adaptive moments, gradient clipping and early
//! stopping on validation macro-F1.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{PretrainedEmbeddings, Vocabulary, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::evaluation::{sentence_metrics, PredictionRecord, SentenceMetrics};
use crate::layers::{uniform, Mode, ParameterStore, EMBEDDING_INIT_BOUND, PAD_ROW};
use crate::model::{EncodedSentence, GpGnn, ModelConfig, RelationVocab};
use crate::tensor::{Activation, ParamGrads, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    #[default]
    Untied,
    Tied,
}

/// Training configuration. Defaults follow the reference hyper-parameters:
/// learning rate 0.001, 50 sentences per batch, dropout 0.5, hidden size
/// 256, relu, node width 8 for one layer and 12 otherwise, untied encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden_size: usize,
    pub activation: Activation,
    /// Node state width; `None` picks 8 for one layer and 12 otherwise.
    pub node_dim: Option<usize>,
    pub adjacency: Adjacency,
    pub layers: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Loss weight of pairs whose gold label is NA, in (0, 1].
    pub na_weight: f64,
    pub clip_norm: f64,
    pub word_dim: usize,
    pub position_dim: usize,
    pub train_word_embeddings: bool,
    pub workers: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate the training split after every epoch.
    pub track_train_accuracy: bool,
    /// Stop as soon as training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    /// Include wall-clock time in epoch events (breaks byte-identical logs).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 50,
            dropout: 0.5,
            hidden_size: 256,
            activation: Activation::Relu,
            node_dim: None,
            adjacency: Adjacency::Untied,
            layers: 2,
            epochs: 200,
            patience: 10,
            seed: 7,
            na_weight: 1.0,
            clip_norm: 5.0,
            word_dim: EMBEDDING_DIM,
            position_dim: 5,
            train_word_embeddings: false,
            workers: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            track_train_accuracy: false,
            stop_at_train_accuracy: None,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn resolved_node_dim(&self) -> usize {
        self.node_dim
            .unwrap_or(if self.layers == 1 { 8 } else { 12 })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            position_dim: self.position_dim,
            hidden_size: self.hidden_size,
            node_dim: self.resolved_node_dim(),
            layers: self.layers,
            activation: self.activation,
            dropout: self.dropout,
            tied: self.adjacency == Adjacency::Tied,
            train_word_embeddings: self.train_word_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be positive".into());
        }
        if !(self.na_weight > 0.0 && self.na_weight <= 1.0) {
            return bad(format!(
                "na_weight must lie in (0, 1], got {}",
                self.na_weight
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Resolved configuration as written to the run log.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["node_dim"] = json!(self.resolved_node_dim());
        v["optimizer"] = json!({
            "name": "adam",
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        });
        v
    }
}

/// Derives an independent seed for the named random stream.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adam moment buffers, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.tensor(id).numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_config(store: &ParameterStore, config: &TrainConfig) -> Self {
        Self::new(store, config.beta1, config.beta2, config.epsilon)
    }
}

/// Bias-corrected Adam update of every trainable parameter from its gradient
/// buffer; frozen rows stay untouched. Gradient buffers are cleared.
pub fn adam_step(state: &mut OptimizerState, store: &mut ParameterStore, lr: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let p = store.param(id);
        if p.trainable() && p.tensor().grad().is_none() {
            return Err(Error::MissingGradient(p.name().to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in ids {
        let p = store.param_mut(id);
        if !p.trainable() {
            continue;
        }
        let frozen = p.frozen_row().map(|r| {
            let width = p.tensor().shape().last().copied().unwrap_or(1);
            r * width..(r + 1) * width
        });
        let grad = p.tensor().grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let values = p.tensor_mut().values_mut();
        for k in 0..values.len() {
            if frozen.as_ref().is_some_and(|f| f.contains(&k)) {
                continue;
            }
            let g = grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    store.clear_grads();
    Ok(())
}

/// Registers a fresh model. Word rows come from `pretrained` where available
/// and are otherwise drawn at random; the padding row is zero.
pub fn build_model(
    config: &TrainConfig,
    vocab: &Vocabulary,
    pretrained: Option<&PretrainedEmbeddings>,
    relations: &RelationVocab,
) -> Result<(ParameterStore, GpGnn)> {
    config.validate()?;
    let model_config = config.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "init"));
    let words = match pretrained {
        Some(p) => {
            if model_config.word_dim != EMBEDDING_DIM {
                return Err(Error::Config(format!(
                    "pretrained vectors have width {EMBEDDING_DIM}, word_dim is {}",
                    model_config.word_dim
                )));
            }
            p.table_weights(vocab, &mut rng).0
        }
        None => {
            let mut w = uniform(
                &[vocab.len(), model_config.word_dim],
                EMBEDDING_INIT_BOUND,
                &mut rng,
            );
            let d = model_config.word_dim;
            w.values_mut()[PAD_ROW * d..(PAD_ROW + 1) * d].fill(0.0);
            w
        }
    };
    let mut store = ParameterStore::new();
    let model = GpGnn::register(&mut store, &model_config, words, relations.len(), &mut rng)?;
    Ok((store, model))
}

/// Applies `f` to every item on up to `workers` threads, keeping input order.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Prediction records for every ordered pair of every sentence.
pub fn predict_records(
    model: &GpGnn,
    store: &ParameterStore,
    sentences: &[EncodedSentence],
    workers: usize,
) -> Result<Vec<PredictionRecord>> {
    let per_sentence = parallel_map(
        sentences,
        workers,
        |_, s| -> Result<Vec<PredictionRecord>> {
            let probs = model.predict(store, s)?;
            Ok(s.graph
                .edges
                .iter()
                .zip(probs)
                .zip(&s.labels)
                .map(|((&(i, j), probabilities), &gold)| PredictionRecord {
                    sentence_id: s.id.clone(),
                    subject: i,
                    object: j,
                    subject_kb: s.kb_ids.get(i).cloned().flatten(),
                    object_kb: s.kb_ids.get(j).cloned().flatten(),
                    probabilities,
                    gold,
                })
                .collect())
        },
    );
    let mut out = Vec::new();
    for r in per_sentence {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean per-sentence loss (weighted as in training) and sentence metrics.
pub fn evaluate(
    model: &GpGnn,
    store: &ParameterStore,
    sentences: &[EncodedSentence],
    na_weight: f64,
    workers: usize,
) -> Result<(f64, SentenceMetrics)> {
    let records = predict_records(model, store, sentences, workers)?;
    let mut loss = 0.0;
    for r in &records {
        if let Some(g) = r.gold {
            let w = if g == 0 { na_weight } else { 1.0 };
            loss -= w * r.probabilities[g].max(f64::MIN_POSITIVE).ln();
        }
    }
    let metrics = sentence_metrics(&records)?;
    Ok((loss / sentences.len().max(1) as f64, metrics))
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch when there is
    /// no validation data).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub best_valid_macro_f1: Option<f64>,
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub last_train_accuracy: Option<f64>,
}

fn dropout_rng(seed: u64, epoch: usize, sentence: usize) -> ChaCha8Rng {
    let base = sub_seed(seed, "dropout");
    ChaCha8Rng::seed_from_u64(splitmix(
        base ^ splitmix((epoch as u64) << 32 | sentence as u64),
    ))
}

fn epoch_event(epoch: usize, split: &str, loss: f64, metrics: Option<&SentenceMetrics>) -> Value {
    json!({
        "event": "epoch",
        "epoch": epoch,
        "split": split,
        "loss": loss,
        "acc": metrics.map(|m| m.accuracy),
        "macro_f1": metrics.map(|m| m.macro_f1),
    })
}

/// Trains `model` in `store`. Events (configuration, per-epoch train and
/// validation records, the final summary) are passed to `on_event` as they
/// happen.
pub fn run_training(
    config: &TrainConfig,
    model: &GpGnn,
    store: &mut ParameterStore,
    train: &[EncodedSentence],
    valid: &[EncodedSentence],
    on_event: &mut dyn FnMut(&Value) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in train.iter().chain(valid) {
        s.complete_labels()?;
    }
    let mut echo = config.echo();
    echo["event"] = json!("config");
    echo["train_sentences"] = json!(train.len());
    echo["valid_sentences"] = json!(valid.len());
    echo["trainable_parameters"] = json!(store.trainable_count());
    on_event(&echo)?;

    let mut optimizer = OptimizerState::for_config(store, config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_f1: Option<f64> = None;
    let mut since_best = 0;
    let mut epoch_losses = Vec::new();
    let mut last_train_accuracy = None;
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = parallel_map(
                batch,
                config.workers,
                |_, &idx| -> Result<(f64, ParamGrads)> {
                    let sentence = &train[idx];
                    let mut rng = dropout_rng(config.seed, epoch, idx);
                    let mut mode = Mode::Train {
                        dropout: config.dropout,
                        rng: &mut rng,
                    };
                    let mut tape = Tape::new();
                    let loss = model.sentence_loss(
                        store,
                        &mut tape,
                        sentence,
                        config.na_weight,
                        &mut mode,
                    )?;
                    let value = tape.value(loss)[0];
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss {value} on sentence `{}` (epoch {epoch})",
                            sentence.id
                        )));
                    }
                    tape.backward(loss)?;
                    Ok((value, tape.take_param_grads()))
                },
            );
            let mut grads = ParamGrads::new();
            for r in results {
                let (value, g) = r?;
                epoch_loss += value;
                grads.merge(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm {norm} in batch starting with sentence `{}` (epoch {epoch})",
                    train[batch[0]].id
                )));
            }
            if norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
            store.accumulate(&grads);
            adam_step(&mut optimizer, store, config.learning_rate)?;
        }
        let mean_loss = epoch_loss / train.len() as f64;
        epoch_losses.push(mean_loss);

        let train_metrics =
            if config.track_train_accuracy || config.stop_at_train_accuracy.is_some() {
                let (_, m) = evaluate(model, store, train, config.na_weight, config.workers)?;
                last_train_accuracy = Some(m.accuracy);
                Some(m)
            } else {
                None
            };
        let mut event = epoch_event(epoch, "train", mean_loss, train_metrics.as_ref());
        if config.log_wall_time {
            event["wall_ms"] = json!(started.elapsed().as_millis() as u64);
        }
        on_event(&event)?;

        let mut improved = false;
        if valid.is_empty() {
            best = store.clone();
            best_epoch = epoch;
        } else {
            let (vloss, vm) = evaluate(model, store, valid, config.na_weight, config.workers)?;
            let mut event = epoch_event(epoch, "valid", vloss, Some(&vm));
            if config.log_wall_time {
                event["wall_ms"] = json!(started.elapsed().as_millis() as u64);
            }
            on_event(&event)?;
            if best_f1.is_none_or(|b| vm.macro_f1 > b) {
                best_f1 = Some(vm.macro_f1);
                best = store.clone();
                best_epoch = epoch;
                improved = true;
            }
        }
        let reached = matches!(
            (config.stop_at_train_accuracy, last_train_accuracy),
            (Some(target), Some(acc)) if acc >= target
        );
        if reached {
            if valid.is_empty() {
                best = store.clone();
                best_epoch = epoch;
            }
            log::info!("training accuracy target reached at epoch {epoch}");
            break;
        }
        if !valid.is_empty() {
            since_best = if improved { 0 } else { since_best + 1 };
            if since_best >= config.patience {
                log::info!("no validation improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }
    let epochs_run = epoch_losses.len();
    on_event(&json!({
        "event": "done",
        "epochs": epochs_run,
        "best_epoch": best_epoch,
        "best_valid_macro_f1": best_f1,
        "last_train_accuracy": last_train_accuracy,
    }))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_macro_f1: best_f1,
        epochs_run,
        epoch_losses,
        last_train_accuracy,
    })
}

/// Checkpoint metadata needed to rebuild the model and its inputs.
pub fn checkpoint_metadata(
    config: &TrainConfig,
    relations: &RelationVocab,
    vocab: &Vocabulary,
) -> Value {
    json!({
        "model": config.model_config(),
        "train_config": config,
        "relations": relations.names(),
        "inverses": relations.inverse_map(),
        "vocabulary": vocab.tokens(),
    })
}

/// Everything restored from checkpoint metadata.
pub struct RestoredModel {
    pub model: GpGnn,
    pub store: ParameterStore,
    pub relations: RelationVocab,
    pub vocab: Vocabulary,
    pub train_config: TrainConfig,
}

pub fn restore_model(checkpoint: crate::layers::Checkpoint) -> Result<RestoredModel> {
    let meta = &checkpoint.metadata;
    let field = |name: &str| {
        meta.get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{name}`")))
    };
    let model_config: ModelConfig = serde_json::from_value(field("model")?)?;
    let train_config: TrainConfig = serde_json::from_value(field("train_config")?)?;
    let names: Vec<String> = serde_json::from_value(field("relations")?)?;
    let inverses: std::collections::BTreeMap<String, String> =
        serde_json::from_value(field("inverses")?)?;
    let relations = RelationVocab::new(names)?.with_inverses(&inverses)?;
    let vocab = Vocabulary::from_tokens(serde_json::from_value(field("vocabulary")?)?)?;
    let model = GpGnn::bind(&checkpoint.store, &model_config)?;
    if model.relations != relations.len() {
        return Err(Error::Checkpoint(format!(
            "classifier has {} outputs but {} relations are listed",
            model.relations,
            relations.len()
        )));
    }
    Ok(RestoredModel {
        model,
        store: checkpoint.store,
        relations,
        vocab,
        train_config,
    })
}

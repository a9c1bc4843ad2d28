mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gpgnn::corpus::synth::{synthesize_multihop_corpus, SynthSpec};
use gpgnn::corpus::{
    load_embedding_file, normalize_corpus, parse_corpus_file, split_dense_subset,
    write_corpus_file, Sentence, Vocabulary,
};
use gpgnn::evaluation::{metrics_report, write_pr_csv, write_predictions, Population};
use gpgnn::layers::{load_checkpoint, save_checkpoint};
use gpgnn::model::{
    check_model_gradients, toy_config, toy_problem, EncodedSentence, RelationVocab,
};
use gpgnn::training::{
    build_model, checkpoint_metadata, predict_records, restore_model, run_training, TrainConfig,
};
use gpgnn::{Error, Result};
use manifest::Manifest;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gpgnn",
    version,
    about = "Graph neural network relation extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of propagation layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Data-parallel sentence workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise corpus splits: merge mentions, add reversed and NA triples.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Corpus files (JSON lines); each is written under the same name.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// JSON array of relation names, `NA` first.
        #[arg(long)]
        relations: PathBuf,
        /// JSON object mapping relations to their inverses.
        #[arg(long)]
        inverses: Option<PathBuf>,
        /// Also split every file into dense and rest subsets.
        #[arg(long)]
        dense: bool,
    },
    /// Generate the synthetic compositional corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on `<data>/train.jsonl`, selecting on `valid.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with train.jsonl, valid.jsonl, relations.json and
        /// optionally inverses.json.
        #[arg(long)]
        data: PathBuf,
        /// Pretrained 50-dimensional word vectors (text format).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on labelled sentences.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Ranked population for P@K%.
        #[arg(long, value_parser = ["predictions", "gold-size"], default_value = "predictions")]
        population: String,
    },
    /// Write relation distributions for every entity pair.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the full model on a toy sentence.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Preprocess {
            common,
            inputs,
            relations,
            inverses,
            dense,
        } => preprocess(&common, &inputs, &relations, inverses.as_deref(), dense),
        Command::Synth { common } => synth(&common),
        Command::Train {
            common,
            data,
            embeddings,
        } => train(&common, &data, embeddings.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            input,
            population,
        } => eval(&common, &checkpoint, &input, &population),
        Command::Predict {
            common,
            checkpoint,
            input,
        } => predict(&common, &checkpoint, &input),
        Command::Gradcheck { common } => gradcheck(&common),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

/// Parses a corpus file; malformed lines are reported and make the run fail.
fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let parsed = parse_corpus_file(path)?;
    if let Some(first) = parsed.errors.first() {
        for e in &parsed.errors {
            log::error!("{}: {e}", path.display());
        }
        return Err(Error::Data(format!(
            "{}: {} malformed line(s), first: {first}",
            path.display(),
            parsed.errors.len()
        )));
    }
    Ok(parsed.sentences)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

fn preprocess(
    common: &Common,
    inputs: &[PathBuf],
    relations: &Path,
    inverses: Option<&Path>,
    dense: bool,
) -> Result<u8> {
    let vocab = RelationVocab::load(relations, inverses)?;
    create_dir(&common.out)?;
    let config = json!({ "dense": dense, "inputs": inputs.len() });
    let mut manifest = Manifest::new("preprocess", config, None);
    manifest.input("relations", relations)?;
    if let Some(p) = inverses {
        manifest.input("inverses", p)?;
    }
    let mut outputs = Vec::new();
    let mut reports = serde_json::Map::new();
    for path in inputs {
        let stem = file_stem(path);
        manifest.input(&stem, path)?;
        let raw = read_corpus(path)?;
        let (kept, report) = normalize_corpus(&raw, &vocab)?;
        log::info!(
            "{}: kept {} of {} sentences, skipped {}",
            path.display(),
            report.kept,
            report.input,
            report.skipped_total()
        );
        let mut entry = serde_json::to_value(&report)?;
        entry["skipped_total"] = json!(report.skipped_total());
        let out = common.out.join(format!("{stem}.jsonl"));
        write_corpus_file(&out, &kept)?;
        outputs.push(out);
        if dense {
            let (d, rest) = split_dense_subset(kept);
            entry["dense"] = json!(d.len());
            entry["rest"] = json!(rest.len());
            for (suffix, part) in [("dense", d), ("rest", rest)] {
                let out = common.out.join(format!("{stem}.{suffix}.jsonl"));
                write_corpus_file(&out, &part)?;
                outputs.push(out);
            }
        }
        reports.insert(stem, entry);
    }
    let rel_out = common.out.join("relations.json");
    fs::write(&rel_out, serde_json::to_string(vocab.names())?).map_err(|e| Error::File {
        path: rel_out.clone(),
        source: e,
    })?;
    outputs.push(rel_out);
    if !vocab.inverse_map().is_empty() {
        let inv_out = common.out.join("inverses.json");
        fs::write(&inv_out, serde_json::to_string(vocab.inverse_map())?).map_err(|e| {
            Error::File {
                path: inv_out.clone(),
                source: e,
            }
        })?;
        outputs.push(inv_out);
    }
    manifest.details = json!({ "normalization": reports });
    manifest.outputs(&outputs)?;
    manifest.write(&common.out)?;
    Ok(0)
}

fn synth(common: &Common) -> Result<u8> {
    let mut spec: SynthSpec = read_json_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let corpus = synthesize_multihop_corpus(&spec)?;
    corpus.write(&common.out)?;
    let mut manifest = Manifest::new("synth", serde_json::to_value(&spec)?, Some(spec.seed));
    if let Some(p) = &common.config {
        manifest.input("config", p)?;
    }
    manifest.details = json!({
        "train": corpus.train.len(),
        "valid": corpus.valid.len(),
        "test": corpus.test.len(),
        "implied_relations": corpus.implied,
    });
    let outputs: Vec<PathBuf> = ["train.jsonl", "valid.jsonl", "test.jsonl", "relations.json"]
        .iter()
        .map(|f| common.out.join(f))
        .collect();
    manifest.outputs(&outputs)?;
    manifest.write(&common.out)?;
    log::info!(
        "wrote {} / {} / {} sentences to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        common.out.display()
    );
    Ok(0)
}

fn encode_all(
    sentences: &[Sentence],
    vocab: &Vocabulary,
    relations: &RelationVocab,
) -> Result<Vec<EncodedSentence>> {
    sentences
        .iter()
        .map(|s| EncodedSentence::new(s, vocab, relations))
        .collect()
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut config: TrainConfig = read_json_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(k) = common.layers {
        config.layers = k;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn train(common: &Common, data: &Path, embeddings: Option<&Path>) -> Result<u8> {
    let config = train_config(common)?;
    let rel_path = data.join("relations.json");
    let inv_path = data.join("inverses.json");
    let inverses = inv_path.exists().then_some(inv_path.as_path());
    let relations = RelationVocab::load(&rel_path, inverses)?;
    let train_path = data.join("train.jsonl");
    let valid_path = data.join("valid.jsonl");
    let train_raw = read_corpus(&train_path)?;
    let valid_raw = if valid_path.exists() {
        read_corpus(&valid_path)?
    } else {
        log::warn!("no validation split; keeping the last epoch");
        Vec::new()
    };
    let vocab = Vocabulary::build(&train_raw);
    let pretrained = embeddings.map(load_embedding_file).transpose()?;
    if let Some(p) = &pretrained {
        for e in &p.errors {
            log::warn!("embeddings: {e}");
        }
    }
    let train_set = encode_all(&train_raw, &vocab, &relations)?;
    let valid_set = encode_all(&valid_raw, &vocab, &relations)?;
    let (mut store, model) = build_model(&config, &vocab, pretrained.as_ref(), &relations)?;

    create_dir(&common.out)?;
    let log_path = common.out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::File {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    let mut sink = |event: &Value| -> Result<()> {
        if event["event"] == "epoch" {
            log::info!(
                "epoch {} {}: loss {:.4} acc {} macro-F1 {}",
                event["epoch"],
                event["split"].as_str().unwrap_or(""),
                event["loss"].as_f64().unwrap_or(f64::NAN),
                event["acc"],
                event["macro_f1"]
            );
        }
        writeln!(log, "{event}")?;
        log.flush()?;
        Ok(())
    };
    let outcome = run_training(
        &config, &model, &mut store, &train_set, &valid_set, &mut sink,
    )?;
    drop(log);

    let ckpt_path = common.out.join("checkpoint.bin");
    save_checkpoint(
        &outcome.best,
        &checkpoint_metadata(&config, &relations, &vocab),
        &ckpt_path,
    )?;
    let vocab_path = common.out.join("vocab.json");
    vocab.save(&vocab_path)?;

    let mut manifest = Manifest::new("train", config.echo(), Some(config.seed));
    manifest.input("train", &train_path)?;
    if !valid_raw.is_empty() {
        manifest.input("valid", &valid_path)?;
    }
    manifest.input("relations", &rel_path)?;
    if let Some(p) = inverses {
        manifest.input("inverses", p)?;
    }
    if let Some(p) = embeddings {
        manifest.input("embeddings", p)?;
    }
    if let Some(p) = &common.config {
        manifest.input("config", p)?;
    }
    manifest.details = json!({
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_valid_macro_f1": outcome.best_valid_macro_f1,
        "vocabulary": vocab.len(),
        "pretrained_found": pretrained.as_ref().map(|p| vocab.tokens().iter().filter(|t| p.vectors.contains_key(t.as_str())).count()),
    });
    manifest.outputs(&[log_path, ckpt_path, vocab_path])?;
    manifest.write(&common.out)?;
    Ok(0)
}

fn load_for_inference(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
) -> Result<(
    gpgnn::training::RestoredModel,
    Vec<EncodedSentence>,
    Manifest,
)> {
    let restored = restore_model(load_checkpoint(checkpoint)?)?;
    let sentences = read_corpus(input)?;
    let encoded = encode_all(&sentences, &restored.vocab, &restored.relations)?;
    let mut config = restored.train_config.clone();
    if let Some(w) = common.workers {
        config.workers = w;
    }
    let mut manifest = Manifest::new("", config.echo(), Some(config.seed));
    manifest.input("checkpoint", checkpoint)?;
    manifest.input("input", input)?;
    create_dir(&common.out)?;
    Ok((restored, encoded, manifest))
}

fn eval(common: &Common, checkpoint: &Path, input: &Path, population: &str) -> Result<u8> {
    let (restored, encoded, mut manifest) = load_for_inference(common, checkpoint, input)?;
    manifest.command = "eval".into();
    for s in &encoded {
        s.complete_labels()?;
    }
    let workers = common.workers.unwrap_or(1);
    let records = predict_records(&restored.model, &restored.store, &encoded, workers)?;
    let population = match population {
        "gold-size" => Population::GoldSize,
        _ => Population::Predictions,
    };
    let (report, curve) = metrics_report(&records, population)?;
    let report_path = common.out.join("metrics.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| {
        Error::File {
            path: report_path.clone(),
            source: e,
        }
    })?;
    let pr_path = common.out.join("pr_curve.csv");
    write_pr_csv(&curve, &pr_path)?;
    let pred_path = common.out.join("predictions.jsonl");
    write_predictions(&records, &pred_path)?;
    log::info!(
        "accuracy {:.4} macro-F1 {:.4} over {} pairs",
        report.accuracy,
        report.macro_f1,
        records.len()
    );
    manifest.details = json!({ "population": population, "records": records.len() });
    manifest.outputs(&[report_path, pr_path, pred_path])?;
    manifest.write(&common.out)?;
    Ok(0)
}

fn predict(common: &Common, checkpoint: &Path, input: &Path) -> Result<u8> {
    let (restored, encoded, mut manifest) = load_for_inference(common, checkpoint, input)?;
    manifest.command = "predict".into();
    let workers = common.workers.unwrap_or(1);
    let records = predict_records(&restored.model, &restored.store, &encoded, workers)?;
    let pred_path = common.out.join("predictions.jsonl");
    write_predictions(&records, &pred_path)?;
    manifest.details = json!({ "records": records.len(), "relations": restored.relations.names() });
    manifest.outputs(&[pred_path])?;
    manifest.write(&common.out)?;
    Ok(0)
}

fn gradcheck(common: &Common) -> Result<u8> {
    let seed = common.seed.unwrap_or(7);
    let layers = common.layers.unwrap_or(2);
    let config = toy_config(layers);
    config.validate()?;
    let (step, tolerance) = (1e-5, 1e-4);
    let (store, model, sentence) = toy_problem(&config, 3, 4, seed)?;
    let report = check_model_gradients(&model, &store, &sentence, step, tolerance)?;
    let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {worst}; tolerance {tolerance:e})",
        report.max_relative_error(),
        report.coordinates()
    );
    create_dir(&common.out)?;
    let mut manifest = Manifest::new(
        "gradcheck",
        json!({ "layers": layers, "step": step, "tolerance": tolerance, "entities": 3 }),
        Some(seed),
    );
    manifest.details = json!({
        "max_relative_error": report.max_relative_error(),
        "coordinates": report.coordinates(),
        "passed": report.passed(),
    });
    manifest.write(&common.out)?;
    Ok(if report.passed() { 0 } else { EXIT_NUMERIC })
}

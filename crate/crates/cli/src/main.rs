use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hast_core::{
    encode_spans, evaluate, export_attention, init_model, load_bio_corpus, load_checkpoint,
    load_embeddings, load_lexicon, preprocess_tokens, save_checkpoint, train, Checkpoint, Corpus,
    Error, ModelConfig, Sentence, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "hast",
    version,
    about = "Aspect term extraction with history attention and selective transformation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train {
        /// key=value configuration file
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Held-out corpus used to pick the best epoch
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Word vectors, one `word v1 v2 ...` per line
        #[arg(long)]
        embeddings: PathBuf,
        /// Opinion words, one per line
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable truncated history attention
        #[arg(long)]
        no_tha: bool,
        /// Disable the selective transformation network
        #[arg(long)]
        no_stn: bool,
    },
    /// Score a labelled corpus and print chunk precision, recall and F1.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Tag a corpus, writing the corpus format with predicted labels.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the opinion and history attention rows for one position.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated tokens
        #[arg(long)]
        sentence: String,
        /// 1-based target position
        #[arg(long)]
        pos: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Dimension { .. } => 2,
        Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Integrity(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn run(command: Command) -> hast_core::Result<()> {
    match command {
        Command::Train {
            config,
            train,
            dev,
            embeddings,
            lexicon,
            out,
            seed,
            no_tha,
            no_stn,
        } => {
            let mut config = read_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            config.use_tha &= !no_tha;
            config.use_stn &= !no_stn;
            config.validate()?;
            run_train(config, &train, dev.as_deref(), &embeddings, &lexicon, &out)
        }
        Command::Eval { ckpt, data } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let corpus = load_for(&ckpt.vocab, &data)?;
            let evaluation = evaluate(&ckpt.params, &ckpt.config, &corpus)?;
            println!("{}", evaluation.report);
            Ok(())
        }
        Command::Predict { ckpt, data } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let raw = load_bio_corpus(&data)?;
            let corpus = load_for(&ckpt.vocab, &data)?;
            let evaluation = evaluate(&ckpt.params, &ckpt.config, &corpus)?;
            let mut tagged = raw;
            for (s, e) in tagged.sentences.iter_mut().zip(&evaluation.sentences) {
                s.aspect_labels = encode_spans(&e.predicted, s.len())?;
            }
            let stdout = io::stdout().lock();
            tagged
                .write_to(io::BufWriter::new(stdout))
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
        }
        Command::Attn {
            ckpt,
            sentence,
            pos,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let raw: Vec<&str> = sentence.split_whitespace().collect();
            if raw.is_empty() {
                return Err(Error::Usage("--sentence has no tokens".into()));
            }
            let mut s = Sentence::from_tokens(preprocess_tokens(&raw)?)?;
            s.token_ids = s.tokens.iter().map(|t| ckpt.vocab.lookup(t)).collect();
            let export = export_attention(&ckpt.params, &ckpt.config, &s, pos)?;
            let csv = export.to_csv()?;
            io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
        }
    }
}

fn read_config(path: &Path) -> hast_core::Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ModelConfig::parse(&text)
}

fn load_for(vocab: &Vocabulary, path: &Path) -> hast_core::Result<Corpus> {
    let mut corpus = load_bio_corpus(path)?;
    corpus.preprocess()?;
    corpus.index(vocab);
    Ok(corpus)
}

fn run_train(
    config: ModelConfig,
    train_path: &Path,
    dev_path: Option<&Path>,
    embeddings: &Path,
    lexicon: &Path,
    out: &Path,
) -> hast_core::Result<()> {
    let lexicon = load_lexicon(lexicon)?;
    let prepare = |path: &Path| -> hast_core::Result<Corpus> {
        let mut corpus = load_bio_corpus(path)?;
        if corpus.is_empty() {
            return Err(Error::Data(format!(
                "{} contains no sentences",
                path.display()
            )));
        }
        corpus.preprocess()?;
        corpus.apply_lexicon(&lexicon);
        Ok(corpus)
    };
    let mut train_corpus = prepare(train_path)?;
    let mut dev = dev_path.map(prepare).transpose()?;

    let dev_tokens = dev
        .iter()
        .flat_map(|c| c.iter())
        .flat_map(|s| s.tokens.iter().map(String::as_str));
    let vocab = Vocabulary::build(&train_corpus, dev_tokens)?;
    train_corpus.index(&vocab);
    if let Some(dev) = dev.as_mut() {
        dev.index(&vocab);
    }
    log::info!(
        "{} training sentences, {} aspect spans, vocabulary {}",
        train_corpus.len(),
        train_corpus.aspect_span_count(),
        vocab.len()
    );

    let matrix = load_embeddings(embeddings, &vocab, config.seed)?;
    log::info!(
        "{} of {} rows pretrained",
        matrix.pretrained_rows,
        vocab.len()
    );
    let params = init_model(&config, &vocab, &matrix)?;
    let outcome = train(params, &config, &train_corpus, dev.as_ref(), |_| {})?;

    let ckpt = Checkpoint {
        config,
        vocab,
        params: outcome.params,
    };
    save_checkpoint(&ckpt, out)?;
    println!(
        "best epoch {} saved to {}",
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

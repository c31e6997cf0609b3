use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use higen::config::{Config, ConfigError};
use higen::corpus::{self, build_pretrain_example, generate_synthetic, read_jsonl, write_jsonl, CorpusError, Example};
use higen::evaluator::{self, efficiency_table, nearest_centroid_predictions, score_report, EvalError};
use higen::gradcheck::run_gradchecks;
use higen::model::checkpoint::{load_checkpoint, save_checkpoint};
use higen::model::{ModelConfig, ModelError, Seq2Seq};
use higen::taxonomy::{LabelSequence, Taxonomy, TaxonomyError};
use higen::tokenizer::{TokenizerError, Vocabulary};
use higen::trainer::{self, Outcome, Splits, Task, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";

/// Everything a command needs from the data directory.
struct Data {
    taxonomy: Taxonomy,
    vocab: Vocabulary,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
    pretrain: Vec<Example>,
}

impl Data {
    fn splits(&self) -> Splits<'_> {
        Splits { train: &self.train, val: &self.val, test: &self.test }
    }
}

pub struct Context {
    cfg: Config,
    out: PathBuf,
    data_dir: PathBuf,
}

impl Context {
    pub fn new(cfg: Config, out: PathBuf) -> Result<Self> {
        cfg.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train.weights.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let data_dir = cfg.data_dir.clone().unwrap_or_else(|| out.clone());
        let ctx = Self { cfg, out, data_dir };
        write_text(&ctx.out_path("config.txt"), &ctx.cfg.render())?;
        Ok(ctx)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    fn load_data(&self) -> Result<Data> {
        let taxonomy = Taxonomy::read_tsv(open(&self.data_path(TAXONOMY_FILE))?)?;
        let vocab = Vocabulary::read_tsv(open(&self.data_path(VOCAB_FILE))?)?;
        let read = |name: &str| -> Result<Vec<Example>> { Ok(read_jsonl(&taxonomy, open(&self.data_path(name))?)?) };
        Ok(Data {
            train: read("train.jsonl")?,
            val: read("val.jsonl")?,
            test: read("test.jsonl")?,
            pretrain: read("pretrain.jsonl")?,
            taxonomy,
            vocab,
        })
    }

    fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig { vocab_size: vocab.len(), ..self.cfg.model.clone() }
    }

    fn task<'a>(&self, data: &'a Data, model: &ModelConfig) -> Result<Task<'a>> {
        Ok(Task::new(&data.taxonomy, &data.vocab, model.max_len)?)
    }

    /// The `paths.init` checkpoint when set, otherwise fresh parameters.
    fn initial_model(&self, vocab: &Vocabulary) -> Result<Seq2Seq<f32>> {
        match &self.cfg.init {
            Some(p) => {
                let m = load_checkpoint(p)?;
                if m.config.vocab_size != vocab.len() {
                    return Err(CliError::Usage(format!(
                        "{} has vocabulary size {}, data has {}",
                        p.display(),
                        m.config.vocab_size,
                        vocab.len()
                    )));
                }
                Ok(m)
            }
            None => Ok(Seq2Seq::new(self.model_config(vocab), self.cfg.seed)?),
        }
    }

    fn write_outcome(&self, outcome: &Outcome, ckpt: &str, prefix: &str) -> Result<()> {
        save_checkpoint(&outcome.model, &self.out_path(ckpt))?;
        let p = self.out_path(&format!("{prefix}history.csv"));
        let mut w = create(&p)?;
        trainer::write_history_csv(&outcome.history, &mut w).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        let p = self.out_path(&format!("{prefix}epochs.csv"));
        let mut w = create(&p)?;
        trainer::write_epochs_csv(&outcome.epochs, &mut w).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        #[derive(Serialize)]
        struct Summary {
            best_epoch: usize,
            initial_val_lm: f64,
            epochs: usize,
        }
        let s = Summary { best_epoch: outcome.best_epoch, initial_val_lm: outcome.initial_val_lm, epochs: outcome.epochs.len() };
        write_json(&self.out_path(&format!("{prefix}summary.json")), &s)
    }

    pub fn gen_data(&self) -> Result<()> {
        let spec = self.cfg.data_spec();
        let data = generate_synthetic(&spec)?;
        let (train, val, test) = corpus::stratified_split(&data.examples, self.cfg.split, self.cfg.seed)?;
        let docs = data.examples.iter().chain(&data.pretrain).map(|e| e.doc.as_slice());
        let vocab = Vocabulary::build(docs, &data.taxonomy, self.cfg.min_count)?;

        let p = self.out_path(TAXONOMY_FILE);
        let mut w = create(&p)?;
        data.taxonomy.write_tsv(&mut w).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        let p = self.out_path(VOCAB_FILE);
        let mut w = create(&p)?;
        vocab.write_tsv(&mut w).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        for (name, split) in [("train.jsonl", &train), ("val.jsonl", &val), ("test.jsonl", &test)] {
            let p = self.out_path(name);
            let mut w = create(&p)?;
            write_jsonl(&data.taxonomy, split, None, &mut w)?;
            w.flush().map_err(io_err(&p))?;
        }
        // One recorded masking draw per pretraining example; training redraws each epoch.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let masked: Vec<LabelSequence> = data
            .pretrain
            .iter()
            .map(|ex| Ok(build_pretrain_example(ex, &data.taxonomy, &vocab, &self.cfg.train.mask, self.cfg.model.max_len, &mut rng)?.1))
            .collect::<Result<_>>()?;
        let p = self.out_path("pretrain.jsonl");
        let mut w = create(&p)?;
        write_jsonl(&data.taxonomy, &data.pretrain, Some(&masked), &mut w)?;
        w.flush().map_err(io_err(&p))?;

        let oracle = evaluator::micro_macro_f1(&nearest_centroid_predictions(&train, &test))?;
        #[derive(Serialize)]
        struct Summary {
            nodes: usize,
            leaves: usize,
            vocab: usize,
            train: usize,
            val: usize,
            test: usize,
            pretrain: usize,
            oracle: evaluator::Scores,
        }
        let s = Summary {
            nodes: data.taxonomy.len(),
            leaves: data.taxonomy.leaves().len(),
            vocab: vocab.len(),
            train: train.len(),
            val: val.len(),
            test: test.len(),
            pretrain: data.pretrain.len(),
            oracle,
        };
        write_json(&self.out_path("data.json"), &s)?;
        println!(
            "{} train / {} val / {} test, {} pretraining documents, vocabulary {}; bag-of-words oracle Micro-F1 {:.4}",
            s.train, s.val, s.test, s.pretrain, s.vocab, s.oracle.micro_f1
        );
        Ok(())
    }

    pub fn pretrain(&self) -> Result<()> {
        let data = self.load_data()?;
        let mc = self.model_config(&data.vocab);
        let task = self.task(&data, &mc)?;
        let init = Seq2Seq::new(mc, self.cfg.seed)?;
        let out = trainer::pretrain(&self.cfg.train_config(), &task, &data.pretrain, init)?;
        self.write_outcome(&out, PRETRAIN_CKPT, "pretrain_")?;
        let best = out.epochs.get(out.best_epoch.saturating_sub(1)).map_or(f64::NAN, |e| e.val_lm);
        println!("pretrained {} epochs; best held-out LM loss {best:.4} at epoch {}", out.epochs.len(), out.best_epoch);
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let data = self.load_data()?;
        let init = self.initial_model(&data.vocab)?;
        let task = self.task(&data, &init.config)?;
        let out = trainer::finetune(&self.cfg.train_config(), &task, &data.train, &data.val, init)?;
        self.write_outcome(&out, MODEL_CKPT, "")?;
        let best = out.epochs.get(out.best_epoch.saturating_sub(1)).and_then(|e| e.val_micro_f1).unwrap_or(f64::NAN);
        println!("fine-tuned {} epochs; best validation Micro-F1 {best:.4} at epoch {}", out.epochs.len(), out.best_epoch);
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let data = self.load_data()?;
        let path = self.cfg.model_path.clone().unwrap_or_else(|| self.out_path(MODEL_CKPT));
        let model = load_checkpoint(&path)?;
        let task = self.task(&data, &model.config)?;
        let tc = self.cfg.train_config();
        let records = trainer::predict(&model, &task, &data.test, &tc.decode, tc.exec)?;
        let report = score_report(&data.taxonomy, &records)?;
        write_json(&self.out_path("report.json"), &report)?;
        let table = report.to_table("synthetic");
        write_text(&self.out_path("report.txt"), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn ablate(&self) -> Result<()> {
        let data = self.load_data()?;
        let mc = self.model_config(&data.vocab);
        let task = self.task(&data, &mc)?;
        let seeds = self.cfg.seeds(self.cfg.ablation_seeds);
        let rows = trainer::run_ablation(&self.cfg.train_config(), &task, &data.splits(), &data.pretrain, &mc, &seeds)?;
        write_json(&self.out_path("ablation.json"), &rows)?;
        let mut table = format!("{:<14}  {:>8}  {:>8}\n", "Variant", "Micro-F1", "Macro-F1");
        for r in &rows {
            table.push_str(&format!("{:<14}  {:>8.2}  {:>8.2}\n", r.variant, 100.0 * r.median_micro_f1, 100.0 * r.median_macro_f1));
        }
        write_text(&self.out_path("ablation.txt"), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn grid(&self) -> Result<()> {
        let data = self.load_data()?;
        let init = self.initial_model(&data.vocab)?;
        let task = self.task(&data, &init.config)?;
        let rows = trainer::grid_run(&self.cfg.train_config(), &task, &data.splits(), &init, &self.cfg.grid_lambda1, &self.cfg.grid_lambda2)?;
        write_json(&self.out_path("grid.json"), &rows)?;
        let mut table = format!("{:>8}  {:>8}  {:>8}  {:>8}\n", "lambda1", "lambda2", "Micro-F1", "Macro-F1");
        for r in &rows {
            table.push_str(&format!("{:>8.0e}  {:>8.0e}  {:>8.2}  {:>8.2}\n", r.lambda1, r.lambda2, 100.0 * r.micro_f1, 100.0 * r.macro_f1));
        }
        write_text(&self.out_path("grid.txt"), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn gradcheck(&self) -> Result<()> {
        let report = run_gradchecks(&self.cfg.gradcheck, self.cfg.seed)?;
        write_json(&self.out_path("gradcheck.json"), &report)?;
        for c in &report.checks {
            println!(
                "{:<22} {} points ({} redrawn)  max rel err {:.2e}  {}",
                c.name,
                c.points,
                c.resampled,
                c.max_rel_err,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        if report.passed {
            Ok(())
        } else {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            Err(CliError::GradcheckFailed(failed.join(", ")))
        }
    }

    pub fn data_efficiency(&self) -> Result<()> {
        let data = self.load_data()?;
        let init = self.initial_model(&data.vocab)?;
        let task = self.task(&data, &init.config)?;
        let seeds = self.cfg.seeds(self.cfg.efficiency_seeds);
        let rows = trainer::data_efficiency(&self.cfg.train_config(), &task, &data.splits(), &init, &self.cfg.efficiency_proportions, &seeds)?;
        write_json(&self.out_path("efficiency.json"), &rows)?;
        let table = efficiency_table(&rows);
        write_text(&self.out_path("efficiency.txt"), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn overlap(&self) -> Result<()> {
        let (Some(a), Some(b)) = (&self.cfg.overlap_a, &self.cfg.overlap_b) else {
            return Err(CliError::Usage("overlap needs overlap.a and overlap.b".into()));
        };
        let taxonomy = Taxonomy::read_tsv(open(&self.data_path(TAXONOMY_FILE))?)?;
        let da = read_jsonl(&taxonomy, open(a)?)?;
        let db = read_jsonl(&taxonomy, open(b)?)?;
        let score = corpus::jaccard_overlap(&da, &db, corpus::STOP_WORDS);
        #[derive(Serialize)]
        struct Overlap {
            a: String,
            b: String,
            jaccard: f64,
        }
        let o = Overlap { a: a.display().to_string(), b: b.display().to_string(), jaccard: score };
        write_json(&self.out_path("overlap.json"), &o)?;
        println!("{score:.4}");
        Ok(())
    }
}

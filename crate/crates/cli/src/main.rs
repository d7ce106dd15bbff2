//! `kilab` command-line front end.
//!
//! Every subcommand starts from an experiment config (the `--config` file or
//! the built-in defaults) and applies flag overrides on top. Failures print
//! one JSON line `{"error": {"kind": ..., "message": ...}}` on stderr and
//! exit with status 1; unparseable arguments report kind `usage`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kilab::caption::{apply_paraphrase, generate_corpus, read_corpus, write_corpus, CaptionRecord};
use kilab::encoder::write_loss_trace;
use kilab::experiment::{
    caption_seed, emit_report, init_seed, run_experiment, seed_data, train_on_corpus, Arm,
    ExperimentConfig, ExperimentResult, ParaphraseMode, ReportFormat,
};
use kilab::paraphrase::ParaphraseConfig;
use kilab::world::{read_dataset, write_dataset, LabeledExample};
use kilab::zero_shot::{build_prompt_pairs, evaluate};
use kilab::{EncoderParams, Error, Granularity, KnowledgeBase, Result, TrainConfig, Vocabulary};

#[derive(Parser)]
#[command(
    name = "kilab",
    version,
    about = "Knowledge-injection lab for cross-modality learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a knowledge base.
    ValidateKb(Common),
    /// Sample a dataset and render its captions.
    GenCaptions {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one dual encoder on one caption granularity.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Existing corpus (JSONL); generated when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding checkpoint.json and vocab.txt.
        #[arg(long)]
        model: PathBuf,
        /// Labelled dataset (JSONL); the seed's eval split when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Full seed sweep over caption arms with paired t-tests.
    Experiment(Common),
    /// Re-emit report tables from an experiment directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// csv, markdown, or both.
        #[arg(long, default_value = "both")]
        format: String,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Knowledge base file; overrides the config.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// mock, off, or an endpoint base URL.
    #[arg(long)]
    paraphrase: Option<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Labelled dataset (JSONL); sampled from the world when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of examples to sample; the config's n_train when absent.
    #[arg(long)]
    n: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(kb) = &self.kb {
            cfg.kb_path = Some(kb.clone());
        }
        if let Some(mode) = &self.paraphrase {
            cfg.paraphrase = parse_paraphrase(mode, &cfg.paraphrase);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn granularity(&self) -> Granularity {
        self.granularity.unwrap_or(Granularity::Medium)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn parse_paraphrase(mode: &str, current: &ParaphraseMode) -> ParaphraseMode {
    match mode {
        "off" => ParaphraseMode::Off,
        "mock" => ParaphraseMode::Mock,
        url => {
            let base = match current {
                ParaphraseMode::Endpoint(c) => c.clone(),
                _ => ParaphraseConfig::default(),
            };
            ParaphraseMode::Endpoint(ParaphraseConfig {
                base_url: url.to_string(),
                ..base
            })
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

/// Dataset for caption/train commands: a file, or the seed's train split.
fn training_data(
    cfg: &ExperimentConfig,
    kb: &KnowledgeBase,
    seed: u64,
    data: &DataArgs,
) -> Result<Vec<LabeledExample>> {
    let mut dataset = match &data.dataset {
        Some(p) => read_dataset(p)?,
        None => {
            let mut cfg = cfg.clone();
            if let Some(n) = data.n {
                cfg.n_train = n;
            }
            seed_data(&cfg, kb, seed)?.train
        }
    };
    if let (Some(n), Some(_)) = (data.n, &data.dataset) {
        dataset.truncate(n);
    }
    Ok(dataset)
}

fn captions(
    cfg: &ExperimentConfig,
    kb: &KnowledgeBase,
    dataset: &[LabeledExample],
    g: Granularity,
    seed: u64,
) -> Result<(Vec<CaptionRecord>, usize)> {
    let inputs = kilab::world::caption_inputs(kb, dataset);
    let corpus = generate_corpus(kb, &inputs, g, caption_seed(seed))?;
    match cfg.paraphrase.client()? {
        Some(client) => {
            let out = apply_paraphrase(&corpus, &client)?;
            Ok((out.corpus, out.failures))
        }
        None => Ok((corpus, 0)),
    }
}

fn validate_kb(common: &Common) -> Result<()> {
    let kb = common.config()?.knowledge_base()?;
    print_json(json!({
        "ok": true,
        "phenotypes": kb.phenotypes.len(),
        "diseases": kb.diseases.len(),
    }));
    Ok(())
}

fn gen_captions(common: &Common, data: &DataArgs) -> Result<()> {
    let cfg = common.config()?;
    let kb = cfg.knowledge_base()?;
    let out = common.out_dir()?;
    let seed = common.seed();
    let dataset = training_data(&cfg, &kb, seed, data)?;
    let (corpus, failures) = captions(&cfg, &kb, &dataset, common.granularity(), seed)?;
    mkdir(out)?;
    write_dataset(out.join("dataset.jsonl"), &dataset)?;
    write_corpus(out.join("corpus.jsonl"), &corpus)?;
    print_json(json!({
        "records": corpus.len(),
        "granularity": common.granularity().as_str(),
        "paraphrase_failures": failures,
        "corpus": out.join("corpus.jsonl"),
    }));
    Ok(())
}

fn train_cmd(common: &Common, data: &DataArgs, corpus_path: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let kb = cfg.knowledge_base()?;
    let out = common.out_dir()?;
    let seed = common.seed();
    let dataset = training_data(&cfg, &kb, seed, data)?;
    let corpus = match corpus_path {
        Some(p) => read_corpus(p, &kb, false)?,
        None => captions(&cfg, &kb, &dataset, common.granularity(), seed)?.0,
    };
    let train_cfg = TrainConfig {
        seed: init_seed(seed),
        ..cfg.train.clone()
    };
    let (vocab, trained) = train_on_corpus(&dataset, &corpus, &train_cfg, cfg.min_count)?;
    mkdir(out)?;
    write_dataset(out.join("dataset.jsonl"), &dataset)?;
    write_corpus(out.join("corpus.jsonl"), &corpus)?;
    vocab.write_file(out.join("vocab.txt"))?;
    trained
        .params
        .write_checkpoint(out.join("checkpoint.json"))?;
    write_loss_trace(out.join("loss.csv"), &trained.loss_trace)?;
    write_text(
        &out.join("train_config.json"),
        &serde_json::to_string_pretty(&train_cfg).expect("config serializes"),
    )?;
    print_json(json!({
        "examples": dataset.len(),
        "vocab_size": vocab.len(),
        "epochs": trained.loss_trace.len(),
        "final_loss": trained.loss_trace.last(),
        "tau": trained.params.tau(),
    }));
    Ok(())
}

fn eval_cmd(common: &Common, model: &Path, dataset: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let kb = cfg.knowledge_base()?;
    let params = EncoderParams::read_checkpoint(model.join("checkpoint.json"))?;
    let vocab = Vocabulary::read_file(model.join("vocab.txt"))?;
    let data = match dataset {
        Some(p) => read_dataset(p)?,
        None => seed_data(&cfg, &kb, common.seed())?.eval,
    };
    let prompts = build_prompt_pairs(&kb, common.granularity.unwrap_or(cfg.eval_prompts))?;
    let report = evaluate(&params, &data, &prompts, &vocab)?;
    let out = common.out.as_deref().unwrap_or(model);
    mkdir(out)?;
    write_text(&out.join("eval.csv"), &report.to_csv())?;
    write_text(&out.join("eval.md"), &report.to_markdown())?;
    let per_class: serde_json::Map<String, serde_json::Value> = report
        .per_class_accuracy
        .iter()
        .map(|(id, a)| (id.clone(), json!(a)))
        .collect();
    print_json(json!({
        "n_examples": report.n_examples,
        "average": report.average,
        "per_class": per_class,
    }));
    Ok(())
}

fn experiment_cmd(common: &Common) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(g) = common.granularity {
        cfg.granularities = vec![g];
    }
    if cfg.output_dir.is_none() {
        return Err(Error::Config(
            "an output directory is required (--out)".into(),
        ));
    }
    let result = run_experiment(&cfg)?;
    for &arm in &result.arms {
        print_json(json!({
            "arm": arm.to_string(),
            "mean_average": result.mean_average(arm),
            "per_seed": result.averages(arm),
        }));
    }
    for c in &result.comparisons {
        print_json(json!({
            "better": c.better.to_string(),
            "worse": c.worse.to_string(),
            "mean_difference": c.mean_difference,
            "t": c.test.map(|t| t.t),
            "df": c.test.map(|t| t.df),
        }));
    }
    Ok(())
}

fn report_cmd(common: &Common, format: &str) -> Result<()> {
    let dir = common.out_dir()?;
    let path = dir.join("result.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut result: ExperimentResult = serde_json::from_str(&text).map_err(|e| Error::Format {
        line: e.line(),
        message: e.to_string(),
    })?;
    if let Some(g) = common.granularity {
        result.arms.retain(|a| *a == Arm::Template(g));
        result.runs.retain(|r| r.arm == Arm::Template(g));
    }
    let formats = match format {
        "both" => vec![ReportFormat::Csv, ReportFormat::Markdown],
        other => vec![other.parse()?],
    };
    let written = formats
        .into_iter()
        .map(|f| emit_report(&result, f, dir))
        .collect::<Result<Vec<_>>>()?;
    print_json(json!({ "written": written }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::ValidateKb(c) => validate_kb(c),
        Command::GenCaptions { common, data } => gen_captions(common, data),
        Command::Train {
            common,
            data,
            corpus,
        } => train_cmd(common, data, corpus.as_deref()),
        Command::Eval {
            common,
            model,
            dataset,
        } => eval_cmd(common, model, dataset.as_deref()),
        Command::Experiment(c) => experiment_cmd(c),
        Command::Report { common, format } => report_cmd(common, format),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": { "kind": kind, "message": message } })
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

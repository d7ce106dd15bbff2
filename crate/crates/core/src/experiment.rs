//! Knowledge-density experiment: for every seed and caption arm, sample a
//! world, caption the training set, train a dual encoder, evaluate it with
//! a fixed prompt set, then compare arms with paired t-tests across seeds.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption::{
    apply_paraphrase, generate_corpus, generate_human_emulated_corpus, write_corpus, CaptionRecord,
    Granularity,
};
use crate::encoder::{train, write_loss_trace, EncoderParams, TrainConfig, TrainOutput};
use crate::error::{Error, Result, ResultExt};
use crate::exec::Exec;
use crate::hash::{hash64, sha256_hex};
use crate::knowledge::KnowledgeBase;
use crate::paraphrase::{MockKind, ParaphraseClient, ParaphraseConfig};
use crate::text::{build_vocab, encode_text, Vocabulary};
use crate::world::{caption_inputs, make_world, sample_dataset, LabeledExample, WorldConfig};
use crate::zero_shot::{build_prompt_pairs, evaluate, paired_t_test, AccuracyReport, Alpha, TTest};

/// Optional overrides of the synthetic world defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldOverrides {
    pub feature_dim: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub disease_prevalence: Option<f64>,
    pub p_typ_given_disease: Option<f64>,
    pub p_phen_background: Option<f64>,
}

impl WorldOverrides {
    pub fn apply(&self, kb: KnowledgeBase, seed: u64) -> WorldConfig {
        let base = WorldConfig::new(kb);
        WorldConfig {
            feature_dim: self.feature_dim.unwrap_or(base.feature_dim),
            noise_sigma: self.noise_sigma.unwrap_or(base.noise_sigma),
            disease_prevalence: self.disease_prevalence.unwrap_or(base.disease_prevalence),
            p_typ_given_disease: self.p_typ_given_disease.unwrap_or(base.p_typ_given_disease),
            p_phen_background: self.p_phen_background.unwrap_or(base.p_phen_background),
            seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphraseMode {
    #[default]
    Off,
    Mock,
    Endpoint(ParaphraseConfig),
}

impl ParaphraseMode {
    pub fn client(&self) -> Result<Option<ParaphraseClient>> {
        match self {
            ParaphraseMode::Off => Ok(None),
            ParaphraseMode::Mock => Ok(Some(ParaphraseClient::mock(MockKind::Identity))),
            ParaphraseMode::Endpoint(cfg) => ParaphraseClient::http(cfg.clone()).map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Knowledge file; the shipped knowledge base when absent.
    pub kb_path: Option<PathBuf>,
    pub world: WorldOverrides,
    pub train: TrainConfig,
    pub granularities: Vec<Granularity>,
    /// Adds a human-report emulation arm with this phenotype dropout rate.
    pub human_emulation_dropout: Option<f64>,
    pub n_train: usize,
    pub n_eval: usize,
    pub seeds: Vec<u64>,
    pub paraphrase: ParaphraseMode,
    pub eval_prompts: Granularity,
    pub min_count: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kb_path: None,
            world: WorldOverrides::default(),
            train: TrainConfig::default(),
            granularities: Granularity::ALL.to_vec(),
            human_emulation_dropout: None,
            n_train: 2000,
            n_eval: 1000,
            seeds: (0..5).collect(),
            paraphrase: ParaphraseMode::Off,
            eval_prompts: Granularity::Medium,
            min_count: 1,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.granularities.is_empty() && self.human_emulation_dropout.is_none() {
            return Err(Error::Config("no caption arms selected".into()));
        }
        if let Some(p) = self.human_emulation_dropout {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout must be in [0, 1], got {p}")));
            }
        }
        if self.n_train < self.train.batch_size {
            return Err(Error::Config(format!(
                "n_train {} is smaller than batch_size {}",
                self.n_train, self.train.batch_size
            )));
        }
        if self.n_eval == 0 {
            return Err(Error::Config("n_eval must be positive".into()));
        }
        self.train.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        match &self.kb_path {
            Some(p) => KnowledgeBase::parse_file(p),
            None => Ok(KnowledgeBase::default_kb()),
        }
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut arms: Vec<Arm> = self
            .granularities
            .iter()
            .copied()
            .map(Arm::Template)
            .collect();
        if let Some(dropout) = self.human_emulation_dropout {
            arms.push(Arm::HumanEmulated { dropout });
        }
        arms
    }

    /// The config without its output location, as recorded in artifacts.
    pub fn portable(&self) -> Self {
        Self {
            output_dir: None,
            ..self.clone()
        }
    }

    /// Digest of the portable config; independent of `output_dir`.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.portable())
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Source of training captions for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Template(Granularity),
    HumanEmulated { dropout: f64 },
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Template(g) => write!(f, "{g}"),
            Arm::HumanEmulated { .. } => f.write_str("human-emulated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub arm: Arm,
    pub report: AccuracyReport,
    pub final_loss: Option<f64>,
    pub tau: f64,
    pub paraphrase_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Arm,
    pub worse: Arm,
    pub mean_difference: f64,
    /// `None` when the per-seed differences have zero variance.
    pub test: Option<TTest>,
}

impl Comparison {
    pub fn significant(&self, alpha: Alpha) -> bool {
        self.test.is_some_and(|t| t.significant(alpha))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub class_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Ordered by arm, then seed.
    pub runs: Vec<RunResult>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentResult {
    pub fn runs_for(&self, arm: Arm) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    /// Per-seed average accuracies of one arm, in seed order.
    pub fn averages(&self, arm: Arm) -> Vec<f64> {
        self.runs_for(arm).map(|r| r.report.average).collect()
    }

    pub fn mean_average(&self, arm: Arm) -> Option<f64> {
        let v = self.averages(arm);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn comparison(&self, better: Arm, worse: Arm) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.better == better && c.worse == worse)
    }
}

/// Trains one encoder on a captioned dataset.
pub fn train_on_corpus(
    dataset: &[LabeledExample],
    corpus: &[CaptionRecord],
    train_cfg: &TrainConfig,
    min_count: usize,
) -> Result<(Vocabulary, TrainOutput)> {
    if dataset.len() != corpus.len() {
        return Err(Error::LengthMismatch(dataset.len(), corpus.len()));
    }
    let vocab = build_vocab(corpus, min_count)?;
    let pairs = dataset
        .iter()
        .zip(corpus)
        .map(|(ex, rec)| {
            if ex.image_id != rec.image_id {
                return Err(Error::Config(format!(
                    "corpus record {} does not match example {}",
                    rec.image_id, ex.image_id
                )));
            }
            Ok((ex.features.clone(), encode_text(&vocab, &rec.text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = dataset
        .first()
        .map(|ex| ex.features.len())
        .ok_or(Error::EmptyCorpus)?;
    let init = EncoderParams::init(train_cfg, vocab.len(), feature_dim);
    let out = train(&init, &pairs, train_cfg)?;
    Ok((vocab, out))
}

/// Train and eval sets of one seed, sampled from that seed's world.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub train: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

/// Seed of the caption generator for one experiment seed.
pub fn caption_seed(seed: u64) -> u64 {
    hash64(seed, "captions")
}

/// Seed of the parameter initializer for one experiment seed.
pub fn init_seed(seed: u64) -> u64 {
    hash64(seed, "init")
}

pub fn seed_data(cfg: &ExperimentConfig, kb: &KnowledgeBase, seed: u64) -> Result<SeedData> {
    let world = make_world(cfg.world.apply(kb.clone(), hash64(seed, "world")))?;
    Ok(SeedData {
        seed,
        train: sample_dataset(&world, cfg.n_train, hash64(seed, "train"))?,
        eval: sample_dataset(&world, cfg.n_eval, hash64(seed, "eval"))?,
    })
}

fn run_dir(root: &Path, seed: u64, arm: Arm) -> PathBuf {
    root.join("runs")
        .join(format!("seed{seed}"))
        .join(arm.to_string())
}

fn run_one(
    cfg: &ExperimentConfig,
    kb: &KnowledgeBase,
    data: &SeedData,
    arm: Arm,
    client: Option<&ParaphraseClient>,
) -> Result<RunResult> {
    let inputs = caption_inputs(kb, &data.train);
    let captions_seed = caption_seed(data.seed);
    let mut corpus = match arm {
        Arm::Template(g) => generate_corpus(kb, &inputs, g, captions_seed)?,
        Arm::HumanEmulated { dropout } => {
            generate_human_emulated_corpus(kb, &inputs, dropout, captions_seed)?
        }
    };
    let mut paraphrase_failures = 0;
    if let Some(client) = client {
        let out = apply_paraphrase(&corpus, client)?;
        corpus = out.corpus;
        paraphrase_failures = out.failures;
    }
    let train_cfg = TrainConfig {
        seed: init_seed(data.seed),
        ..cfg.train.clone()
    };
    let (vocab, out) = train_on_corpus(&data.train, &corpus, &train_cfg, cfg.min_count)?;
    let prompts = build_prompt_pairs(kb, cfg.eval_prompts)?;
    let report = evaluate(&out.params, &data.eval, &prompts, &vocab)?;

    if let Some(root) = &cfg.output_dir {
        let dir = run_dir(root, data.seed, arm);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_corpus(dir.join("corpus.jsonl"), &corpus)?;
        vocab.write_file(dir.join("vocab.txt"))?;
        out.params.write_checkpoint(dir.join("checkpoint.json"))?;
        write_loss_trace(dir.join("loss.csv"), &out.loss_trace)?;
        let path = dir.join("report.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    }

    Ok(RunResult {
        seed: data.seed,
        arm,
        final_loss: out.loss_trace.last().copied(),
        tau: out.params.tau(),
        report,
        paraphrase_failures,
    })
}

fn compare(result: &ExperimentResult, better: Arm, worse: Arm) -> Option<Comparison> {
    let a = result.averages(better);
    let b = result.averages(worse);
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let mean_difference = a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64;
    Some(Comparison {
        better,
        worse,
        mean_difference,
        test: paired_t_test(&a, &b).ok(),
    })
}

/// Runs every (seed, arm) combination and the between-arm t-tests.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let kb = cfg.knowledge_base()?;
    let client = cfg.paraphrase.client()?;
    let exec = Exec::default();

    let data = exec.try_map_slice(&cfg.seeds, |&seed| {
        seed_data(cfg, &kb, seed).context_with(|| format!("seed {seed}"))
    })?;
    let arms = cfg.arms();
    let jobs: Vec<(Arm, &SeedData)> = arms
        .iter()
        .flat_map(|&arm| data.iter().map(move |d| (arm, d)))
        .collect();
    let runs = exec.try_map_slice(&jobs, |&(arm, d)| {
        run_one(cfg, &kb, d, arm, client.as_ref())
            .context_with(|| format!("seed {}, arm {arm}", d.seed))
    })?;

    let mut result = ExperimentResult {
        class_ids: kb.diseases.iter().map(|d| d.id.clone()).collect(),
        seeds: cfg.seeds.clone(),
        arms: arms.clone(),
        runs,
        comparisons: Vec::new(),
    };
    let mut grans: Vec<Granularity> = cfg.granularities.clone();
    grans.sort();
    grans.dedup();
    let mut pairs: Vec<(Arm, Arm)> = grans
        .windows(2)
        .rev()
        .map(|w| (Arm::Template(w[1]), Arm::Template(w[0])))
        .collect();
    if grans.len() > 2 {
        pairs.push((
            Arm::Template(grans[grans.len() - 1]),
            Arm::Template(grans[0]),
        ));
    }
    if let Some(dropout) = cfg.human_emulation_dropout {
        if let Some(&top) = grans.last() {
            pairs.push((Arm::Template(top), Arm::HumanEmulated { dropout }));
        }
    }
    result.comparisons = pairs
        .into_iter()
        .filter_map(|(a, b)| compare(&result, a, b))
        .collect();

    if let Some(root) = &cfg.output_dir {
        write_outputs(cfg, &result, root)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

/// One report row: label, seed column, per-class values, average.
struct Row {
    arm: String,
    seed: String,
    values: Vec<f64>,
    avg: f64,
}

fn report_rows(result: &ExperimentResult) -> Vec<Row> {
    let mut rows = Vec::new();
    for &arm in &result.arms {
        let runs: Vec<&RunResult> = result.runs_for(arm).collect();
        for r in &runs {
            rows.push(Row {
                arm: arm.to_string(),
                seed: r.seed.to_string(),
                values: r
                    .report
                    .per_class_accuracy
                    .iter()
                    .map(|(_, a)| *a)
                    .collect(),
                avg: r.report.average,
            });
        }
        if runs.is_empty() {
            continue;
        }
        let k = result.class_ids.len();
        let values: Vec<f64> = (0..k)
            .map(|c| {
                runs.iter()
                    .map(|r| r.report.per_class_accuracy[c].1)
                    .sum::<f64>()
                    / runs.len() as f64
            })
            .collect();
        let avg = values.iter().sum::<f64>() / k as f64;
        rows.push(Row {
            arm: arm.to_string(),
            seed: "mean".into(),
            values,
            avg,
        });
    }
    rows
}

/// Renders the accuracy table. Values are printed in shortest round-trip
/// form so both formats carry identical numbers.
pub fn render_report(result: &ExperimentResult, format: ReportFormat) -> Result<String> {
    if result.runs.is_empty() {
        return Err(Error::Config("experiment result has no runs".into()));
    }
    let rows = report_rows(result);
    let mut header: Vec<String> = vec!["granularity".into(), "seed".into()];
    header.extend(result.class_ids.iter().cloned());
    header.push("Avg".into());
    let cells = |r: &Row| -> Vec<String> {
        let mut c = vec![r.arm.clone(), r.seed.clone()];
        c.extend(r.values.iter().map(|v| v.to_string()));
        c.push(r.avg.to_string());
        c
    };
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in &rows {
                out.push_str(&cells(r).join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            let rule: Vec<&str> = header
                .iter()
                .enumerate()
                .map(|(i, _)| if i < 2 { "---" } else { "---:" })
                .collect();
            out.push_str(&format!("| {} |\n", rule.join(" | ")));
            for r in &rows {
                out.push_str(&format!("| {} |\n", cells(r).join(" | ")));
            }
        }
    }
    Ok(out)
}

/// Writes `report.csv` or `report.md` into `dir`.
pub fn emit_report(result: &ExperimentResult, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    let text = render_report(result, format)?;
    let name = match format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Markdown => "report.md",
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn render_comparisons(result: &ExperimentResult) -> String {
    let mut out =
        String::from("better,worse,mean_difference,t,df,significant_0.05,significant_0.01\n");
    for c in &result.comparisons {
        let (t, df) = match c.test {
            Some(t) => (t.t.to_string(), t.df.to_string()),
            None => ("".into(), "".into()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.better,
            c.worse,
            c.mean_difference,
            t,
            df,
            c.significant(Alpha::P05),
            c.significant(Alpha::P01)
        ));
    }
    out
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest {
    config_sha256: String,
    files: Vec<ManifestEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let write = |name: &str, text: String| {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(
        "config.json",
        serde_json::to_string_pretty(&cfg.portable()).expect("config serializes"),
    )?;
    write(
        "result.json",
        serde_json::to_string_pretty(result).expect("result serializes"),
    )?;
    write("ttests.csv", render_comparisons(result))?;
    emit_report(result, ReportFormat::Csv, root)?;
    emit_report(result, ReportFormat::Markdown, root)?;

    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let entries = files
        .into_iter()
        .map(|rel| {
            let path = root.join(&rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config_sha256: cfg.digest(),
        files: entries,
    };
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

//! Caption generation at three knowledge granularities.
//!
//! * coarse: disease names only ("Pneumonia")
//! * medium: disease names with their typical phenotypes
//! * fine: medium plus one aggregated absence clause over the excluded
//!   phenotypes of every present disease ("No evidence of X or Y")
//!
//! Rendering is a pure function of the knowledge base, the label set, the
//! granularity and a 64-bit seed. The seed only picks the surface template;
//! with [`DESIGNATED_SEED`] the plain "Disease with phenotypes" form is used.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::exec::Exec;
use crate::hash::hash64;
use crate::knowledge::KnowledgeBase;
use crate::paraphrase::ParaphraseClient;

/// Template seed whose rendering is the canonical "Disease with phenotypes.
/// No evidence of ..." form.
pub const DESIGNATED_SEED: u64 = 0;

/// Knowledge density of a caption; ordered coarse < medium < fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Coarse,
    Medium,
    Fine,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Coarse, Granularity::Medium, Granularity::Fine];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Medium => "medium",
            Granularity::Fine => "fine",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coarse" => Ok(Granularity::Coarse),
            "medium" => Ok(Granularity::Medium),
            "fine" => Ok(Granularity::Fine),
            other => Err(Error::Config(format!("unknown granularity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Template,
    Paraphrased(String),
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: String,
    pub labels: Vec<String>,
    pub granularity: Granularity,
    pub text: String,
    pub source: CaptionSource,
}

/// Per-caption framing: an optional lead-in and the connective between a
/// disease and its phenotype list.
struct Template {
    lead: &'static str,
    connective: &'static str,
    coarse_tail: &'static str,
}

const TEMPLATES: [Template; 3] = [
    Template {
        lead: "",
        connective: " with ",
        coarse_tail: "",
    },
    Template {
        lead: "Findings consistent with ",
        connective: ", showing ",
        coarse_tail: "",
    },
    Template {
        lead: "",
        connective: " is seen with ",
        coarse_tail: " is seen",
    },
];

fn template_for(seed: u64) -> &'static Template {
    &TEMPLATES[(seed % TEMPLATES.len() as u64) as usize]
}

/// "a", "a and b", "a, b and c".
fn join_and(items: &[&str]) -> String {
    join_list(items, " and ")
}

/// "a", "a or b", "a, b or c".
fn join_or(items: &[&str]) -> String {
    join_list(items, " or ")
}

fn join_list(items: &[&str], last_sep: &str) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{}{last_sep}{last}", init.join(", ")),
    }
}

/// Resolves a label set to KB class indices, sorted and deduplicated.
fn label_indices(kb: &KnowledgeBase, labels: &[String]) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut idx = labels
        .iter()
        .map(|l| kb.disease_index(l))
        .collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Phenotype ids named in the absence clause for a set of present diseases:
/// the union of excluded sets in KB order, minus anything already named as
/// typical of another present disease.
pub fn absence_phenotypes<'a>(kb: &'a KnowledgeBase, present: &[usize]) -> Vec<&'a str> {
    let typical: Vec<&str> = present
        .iter()
        .flat_map(|&i| kb.diseases[i].typical.iter().map(String::as_str))
        .collect();
    let mut out: Vec<&str> = Vec::new();
    for &i in present {
        for p in &kb.diseases[i].excluded {
            if !typical.contains(&p.as_str()) && !out.contains(&p.as_str()) {
                out.push(p);
            }
        }
    }
    out
}

fn display<'a>(kb: &'a KnowledgeBase, phenotype_ids: &[&str]) -> Vec<&'a str> {
    phenotype_ids
        .iter()
        .map(|id| {
            kb.phenotype(id)
                .expect("validated reference")
                .display_name
                .as_str()
        })
        .collect()
}

fn medium_clauses(kb: &KnowledgeBase, present: &[usize], t: &Template) -> Vec<String> {
    present
        .iter()
        .map(|&i| {
            let d = &kb.diseases[i];
            let typ: Vec<&str> = d.typical.iter().map(String::as_str).collect();
            format!(
                "{}{}{}",
                d.display_name,
                t.connective,
                join_and(&display(kb, &typ))
            )
        })
        .collect()
}

/// Renders one caption.
pub fn render_caption(
    kb: &KnowledgeBase,
    labels: &[String],
    granularity: Granularity,
    seed: u64,
) -> Result<String> {
    let present = label_indices(kb, labels)?;
    let t = template_for(seed);
    let body = match granularity {
        Granularity::Coarse => present
            .iter()
            .map(|&i| format!("{}{}", kb.diseases[i].display_name, t.coarse_tail))
            .collect::<Vec<_>>()
            .join("; "),
        Granularity::Medium | Granularity::Fine => medium_clauses(kb, &present, t).join("; "),
    };
    let mut text = format!("{}{}", t.lead, body);
    if granularity == Granularity::Fine {
        let absent = absence_phenotypes(kb, &present);
        if !absent.is_empty() {
            text.push_str(". No evidence of ");
            text.push_str(&join_or(&display(kb, &absent)));
        }
    }
    Ok(text)
}

/// Caption standing in for a human report: coarse framing, each typical
/// phenotype kept with probability `1 - dropout`, never any absence clause.
pub fn render_human_emulated(
    kb: &KnowledgeBase,
    labels: &[String],
    dropout: f64,
    seed: u64,
) -> Result<String> {
    let present = label_indices(kb, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = &TEMPLATES[0];
    let clauses: Vec<String> = present
        .iter()
        .map(|&i| {
            let d = &kb.diseases[i];
            let kept: Vec<&str> = d
                .typical
                .iter()
                .map(String::as_str)
                .filter(|_| rng.random::<f64>() >= dropout)
                .collect();
            if kept.is_empty() {
                d.display_name.clone()
            } else {
                format!(
                    "{}{}{}",
                    d.display_name,
                    t.connective,
                    join_and(&display(kb, &kept))
                )
            }
        })
        .collect();
    Ok(clauses.join("; "))
}

/// One labelled item to caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionInput {
    pub image_id: String,
    pub labels: Vec<String>,
}

fn canonical_labels(kb: &KnowledgeBase, labels: &[String]) -> Result<Vec<String>> {
    Ok(label_indices(kb, labels)?
        .into_iter()
        .map(|i| kb.diseases[i].id.clone())
        .collect())
}

/// One record per input, in input order; record seeds are
/// `hash64(seed, image_id)`.
pub fn generate_corpus(
    kb: &KnowledgeBase,
    dataset: &[CaptionInput],
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    generate_corpus_with(Exec::default(), kb, dataset, granularity, seed)
}

pub fn generate_corpus_with(
    exec: Exec,
    kb: &KnowledgeBase,
    dataset: &[CaptionInput],
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    exec.try_map_slice(dataset, |item| {
        let record_seed = hash64(seed, &item.image_id);
        let text = render_caption(kb, &item.labels, granularity, record_seed)
            .context_with(|| format!("image {}", item.image_id))?;
        Ok(CaptionRecord {
            image_id: item.image_id.clone(),
            labels: canonical_labels(kb, &item.labels)?,
            granularity,
            text,
            source: CaptionSource::Template,
        })
    })
}

/// Human-report emulation corpus (see [`render_human_emulated`]).
pub fn generate_human_emulated_corpus(
    kb: &KnowledgeBase,
    dataset: &[CaptionInput],
    dropout: f64,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    Exec::default().try_map_slice(dataset, |item| {
        let record_seed = hash64(seed, &item.image_id);
        let text = render_human_emulated(kb, &item.labels, dropout, record_seed)
            .context_with(|| format!("image {}", item.image_id))?;
        Ok(CaptionRecord {
            image_id: item.image_id.clone(),
            labels: canonical_labels(kb, &item.labels)?,
            granularity: Granularity::Coarse,
            text,
            source: CaptionSource::Template,
        })
    })
}

/// Outcome of a paraphrase pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParaphraseOutcome {
    pub corpus: Vec<CaptionRecord>,
    /// Records that kept their template text because every attempt failed.
    pub failures: usize,
}

const PARAPHRASE_SEED_SALT: u64 = 0x7061_7261_7068_7261;

/// Rewrites every record through `client`, falling back to the original
/// text per record on failure. Output order equals input order.
pub fn apply_paraphrase(
    corpus: &[CaptionRecord],
    client: &ParaphraseClient,
) -> Result<ParaphraseOutcome> {
    client.config().validate()?;
    let results: Vec<Mutex<Option<Result<String>>>> =
        corpus.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = client.max_in_flight().clamp(1, corpus.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= corpus.len() {
                    break;
                }
                let rec = &corpus[i];
                let seed = hash64(PARAPHRASE_SEED_SALT, &rec.image_id);
                let r = client.paraphrase(&rec.text, seed).map(|p| p.text);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let tag = client.config().model_tag.clone();
    let mut failures = 0;
    let corpus = corpus
        .iter()
        .zip(results)
        .map(|(rec, slot)| {
            let mut rec = rec.clone();
            match slot.into_inner().expect("result slot") {
                Some(Ok(text)) => {
                    rec.text = text;
                    rec.source = CaptionSource::Paraphrased(tag.clone());
                }
                _ => failures += 1,
            }
            rec
        })
        .collect();
    Ok(ParaphraseOutcome { corpus, failures })
}

/// Writes a corpus as JSONL (one record per line, LF endings).
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for rec in corpus {
        serde_json::to_writer(&mut out, rec).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Reads a JSONL corpus. Records are marked as coming from an external file
/// unless `keep_source` is set.
pub fn read_corpus(
    path: impl AsRef<Path>,
    kb: &KnowledgeBase,
    keep_source: bool,
) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: n + 1,
            message: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(Error::Format {
                line: n + 1,
                message: "caption text is empty".into(),
            });
        }
        rec.labels =
            canonical_labels(kb, &rec.labels).context_with(|| format!("line {}", n + 1))?;
        if !keep_source {
            rec.source = CaptionSource::ExternalFile;
        }
        out.push(rec);
    }
    Ok(out)
}

//! Zero-shot presence/absence classification, accuracy metrics and the
//! paired t-test used to compare training arms.
//!
//! Each disease gets two candidate texts. An example is predicted positive
//! for a disease when its image embedding is strictly closer (cosine) to
//! the presence text than to the absence text.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::caption::{render_caption, Granularity, DESIGNATED_SEED};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result, ResultExt};
use crate::exec::Exec;
use crate::knowledge::KnowledgeBase;
use crate::text::{encode_text, Vocabulary};
use crate::world::LabeledExample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub disease_id: String,
    pub presence_text: String,
    pub absence_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub granularity: Granularity,
    pub pairs: Vec<PromptPair>,
}

pub fn absence_prompt(display_name: &str, granularity: Granularity) -> String {
    match granularity {
        Granularity::Fine => {
            format!("No evidence of {display_name}, other findings may be present")
        }
        _ => format!("No evidence of {display_name}"),
    }
}

/// One presence/absence pair per disease, in KB order.
pub fn build_prompt_pairs(kb: &KnowledgeBase, granularity: Granularity) -> Result<PromptSet> {
    let pairs = kb
        .diseases
        .iter()
        .map(|d| {
            Ok(PromptPair {
                disease_id: d.id.clone(),
                presence_text: render_caption(kb, &[d.id.clone()], granularity, DESIGNATED_SEED)?,
                absence_text: absence_prompt(&d.display_name, granularity),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet { granularity, pairs })
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let denom = (a.dot(&a) * b.dot(&b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(&b) / denom
    }
}

/// Index of the candidate with the highest cosine similarity to `image`;
/// ties go to the smallest index.
pub fn predict_label(image: ArrayView1<f64>, candidates: &[Array1<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in candidates.iter().enumerate() {
        if c.len() != image.len() {
            return Err(Error::DimMismatch {
                expected: image.len(),
                actual: c.len(),
            });
        }
        let s = cosine(image, c.view());
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k).ok_or(Error::EmptyCandidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub disease_id: String,
    pub predicted_present: bool,
    pub similarity_present: f64,
    pub similarity_absent: f64,
}

/// Text embeddings of a prompt set under one model.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    pub disease_ids: Vec<String>,
    /// `[absence, presence]` per disease; index 1 means "present".
    pub candidates: Vec<[Array1<f64>; 2]>,
}

impl PromptEmbeddings {
    pub fn new(params: &EncoderParams, prompts: &PromptSet, vocab: &Vocabulary) -> Result<Self> {
        let mut candidates = Vec::with_capacity(prompts.pairs.len());
        for pair in &prompts.pairs {
            let embed = |text: &str| {
                encode_text(vocab, text)
                    .and_then(|t| params.encode_text(&t))
                    .context_with(|| format!("prompt '{text}'"))
            };
            candidates.push([embed(&pair.absence_text)?, embed(&pair.presence_text)?]);
        }
        Ok(Self {
            disease_ids: prompts.pairs.iter().map(|p| p.disease_id.clone()).collect(),
            candidates,
        })
    }

    pub fn predict(&self, image: ArrayView1<f64>) -> Result<Vec<Prediction>> {
        self.candidates
            .iter()
            .zip(&self.disease_ids)
            .map(|(pair, id)| {
                let k = predict_label(image, pair)?;
                Ok(Prediction {
                    disease_id: id.clone(),
                    predicted_present: k == 1,
                    similarity_present: cosine(image, pair[1].view()),
                    similarity_absent: cosine(image, pair[0].view()),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// `(disease id, accuracy)` in KB order.
    pub per_class_accuracy: Vec<(String, f64)>,
    pub average: f64,
    pub n_examples: usize,
}

impl AccuracyReport {
    /// Builds a report from per-class correct counts.
    pub fn from_counts(ids: &[String], correct: &[usize], n_examples: usize) -> Self {
        let per_class_accuracy: Vec<(String, f64)> = ids
            .iter()
            .zip(correct)
            .map(|(id, &c)| (id.clone(), c as f64 / n_examples as f64))
            .collect();
        let average = mean(per_class_accuracy.iter().map(|(_, a)| *a));
        Self {
            per_class_accuracy,
            average,
            n_examples,
        }
    }

    pub fn accuracy(&self, disease_id: &str) -> Option<f64> {
        self.per_class_accuracy
            .iter()
            .find(|(id, _)| id == disease_id)
            .map(|(_, a)| *a)
    }

    /// `class,accuracy` rows followed by an `Avg` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,accuracy\n");
        for (id, a) in &self.per_class_accuracy {
            out.push_str(&format!("{id},{a:.6}\n"));
        }
        out.push_str(&format!("Avg,{:.6}\n", self.average));
        out
    }

    /// One-row markdown table, classes as columns, values in percent.
    pub fn to_markdown(&self) -> String {
        let mut header = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for (id, a) in &self.per_class_accuracy {
            header.push_str(&format!(" {id} |"));
            rule.push_str(" ---: |");
            row.push_str(&format!(" {:.1} |", 100.0 * a));
        }
        header.push_str(" Avg |");
        rule.push_str(" ---: |");
        row.push_str(&format!(" {:.1} |", 100.0 * self.average));
        format!("{header}\n{rule}\n{row}\n")
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Zero-shot per-class accuracy over a labelled dataset.
pub fn evaluate(
    params: &EncoderParams,
    dataset: &[LabeledExample],
    prompts: &PromptSet,
    vocab: &Vocabulary,
) -> Result<AccuracyReport> {
    evaluate_with(Exec::default(), params, dataset, prompts, vocab)
}

pub fn evaluate_with(
    exec: Exec,
    params: &EncoderParams,
    dataset: &[LabeledExample],
    prompts: &PromptSet,
    vocab: &Vocabulary,
) -> Result<AccuracyReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let emb = PromptEmbeddings::new(params, prompts, vocab)?;
    let k = emb.disease_ids.len();
    let hits = exec.try_map_slice(dataset, |ex| {
        if ex.labels.len() != k {
            return Err(Error::LengthMismatch(ex.labels.len(), k)
                .context(format!("example {}", ex.image_id)));
        }
        let image = params
            .encode_image(ex.features.view())
            .context_with(|| format!("example {}", ex.image_id))?;
        let preds = emb.predict(image.view())?;
        Ok(preds
            .iter()
            .zip(&ex.labels)
            .map(|(p, &truth)| p.predicted_present == truth)
            .collect::<Vec<bool>>())
    })?;
    let mut correct = vec![0usize; k];
    for row in &hits {
        for (c, &hit) in correct.iter_mut().zip(row) {
            *c += hit as usize;
        }
    }
    Ok(AccuracyReport::from_counts(
        &emb.disease_ids,
        &correct,
        dataset.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
}

/// Paired t statistic of `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_d = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean_d).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean_d / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest { t, df: n - 1 })
}

/// Two-sided critical values of Student's t for df = 1..=30.
const T_CRIT_05: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];
const T_CRIT_01: [f64; 30] = [
    63.657, 9.925, 5.841, 4.604, 4.032, 3.707, 3.499, 3.355, 3.250, 3.169, 3.106, 3.055, 3.012,
    2.977, 2.947, 2.921, 2.898, 2.878, 2.861, 2.845, 2.831, 2.819, 2.807, 2.797, 2.787, 2.779,
    2.771, 2.763, 2.756, 2.750,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alpha {
    #[serde(rename = "0.05")]
    P05,
    #[serde(rename = "0.01")]
    P01,
}

/// Two-sided critical |t|; beyond df 30 the normal limit is used.
pub fn critical_t(df: usize, alpha: Alpha) -> f64 {
    let table = match alpha {
        Alpha::P05 => &T_CRIT_05,
        Alpha::P01 => &T_CRIT_01,
    };
    match df {
        0 => f64::INFINITY,
        1..=30 => table[df - 1],
        _ => match alpha {
            Alpha::P05 => 1.960,
            Alpha::P01 => 2.576,
        },
    }
}

impl TTest {
    pub fn significant(&self, alpha: Alpha) -> bool {
        self.t.abs() > critical_t(self.df, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TrainConfig;
    use crate::text::build_vocab_from_texts;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn prompt_pairs() {
        let kb = KnowledgeBase::default_kb();
        let p = build_prompt_pairs(&kb, Granularity::Coarse).unwrap();
        let pn = p.pairs.iter().find(|x| x.disease_id == "P").unwrap();
        assert_eq!(pn.presence_text, "Pneumonia");
        assert_eq!(pn.absence_text, "No evidence of Pneumonia");

        let m = build_prompt_pairs(&kb, Granularity::Medium).unwrap();
        assert_eq!(m.pairs.len(), 11);
        let mut all: Vec<&str> = m
            .pairs
            .iter()
            .flat_map(|x| [x.presence_text.as_str(), x.absence_text.as_str()])
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 22);
        assert_eq!(m, build_prompt_pairs(&kb, Granularity::Medium).unwrap());

        let f = build_prompt_pairs(&kb, Granularity::Fine).unwrap();
        assert!(f.pairs[0]
            .absence_text
            .ends_with(", other findings may be present"));
    }

    #[test]
    fn argmax_rules() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(predict_label(b.view(), &[a.clone(), b.clone()]).unwrap(), 1);
        assert_eq!(predict_label(b.view(), &[b.clone(), b.clone()]).unwrap(), 0);
        assert!(matches!(
            predict_label(b.view(), &[]),
            Err(Error::EmptyCandidates)
        ));
        let i = array![0.3, 0.2];
        let k = predict_label(i.view(), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(predict_label((&i * 17.0).view(), &[a, b]).unwrap(), k);
    }

    #[test]
    fn ties_predict_absent() {
        let e = array![1.0, 0.0];
        let emb = PromptEmbeddings {
            disease_ids: vec!["d".into()],
            candidates: vec![[e.clone(), e.clone()]],
        };
        let p = emb.predict(e.view()).unwrap();
        assert!(!p[0].predicted_present);
        assert_eq!(p[0].similarity_present, p[0].similarity_absent);
    }

    #[test]
    fn report_arithmetic() {
        let r = AccuracyReport::from_counts(&["A".into(), "B".into()], &[4, 2], 4);
        assert_eq!(r.accuracy("A"), Some(1.0));
        assert_eq!(r.accuracy("B"), Some(0.5));
        assert_eq!(r.average, 0.75);
        let r = AccuracyReport::from_counts(&["A".into()], &[3], 4);
        assert_eq!(r.accuracy("A"), Some(0.75));
        assert!(r.to_csv().contains("Avg,0.750000"));
        assert!(r.to_markdown().contains("| 75.0 |"));
    }

    /// Two-class world where the model is constructed by hand: the image
    /// embedding is the feature vector itself and text embeddings are the
    /// token rows, so every prediction is known in advance.
    fn hand_model() -> (EncoderParams, Vocabulary, PromptSet) {
        let vocab = build_vocab_from_texts(["alpha beta"], 1).unwrap();
        let mut p = EncoderParams::init(
            &TrainConfig {
                embed_dim: 2,
                ..TrainConfig::default()
            },
            vocab.len(),
            2,
        );
        p.w_img = ndarray::Array2::eye(2);
        p.w_txt = ndarray::Array2::eye(2);
        p.e_tok.row_mut(0).assign(&array![1.0, -1.0]);
        p.e_tok.row_mut(vocab.id("alpha")).assign(&array![1.0, 0.0]);
        p.e_tok.row_mut(vocab.id("beta")).assign(&array![0.0, 1.0]);
        let prompts = PromptSet {
            granularity: Granularity::Coarse,
            pairs: vec![
                PromptPair {
                    disease_id: "A".into(),
                    presence_text: "alpha".into(),
                    absence_text: "zzz".into(),
                },
                PromptPair {
                    disease_id: "B".into(),
                    presence_text: "beta".into(),
                    absence_text: "zzz".into(),
                },
            ],
        };
        (p, vocab, prompts)
    }

    fn example(i: usize, features: [f64; 2], labels: [bool; 2]) -> LabeledExample {
        LabeledExample {
            image_id: format!("e{i}"),
            features: Array1::from(features.to_vec()),
            labels: labels.to_vec(),
            phenotypes_present: vec![],
        }
    }

    #[test]
    fn evaluation_counts() {
        let (p, vocab, prompts) = hand_model();
        // all-absent classifier: images point at the unknown token
        let absent: Vec<_> = (0..3)
            .map(|i| example(i, [-1.0, -1.0], [false, false]))
            .collect();
        let r = evaluate(&p, &absent, &prompts, &vocab).unwrap();
        assert_eq!(
            r.per_class_accuracy.iter().map(|x| x.1).collect::<Vec<_>>(),
            [1.0, 1.0]
        );

        let ds = vec![
            example(0, [1.0, 0.1], [true, false]),
            example(1, [1.0, 0.1], [true, false]),
            example(2, [1.0, 0.1], [true, false]),
            example(3, [1.0, 0.1], [false, false]),
        ];
        let r = evaluate(&p, &ds, &prompts, &vocab).unwrap();
        assert_eq!(r.accuracy("A"), Some(0.75));
        assert_eq!(r.accuracy("B"), Some(1.0));
        assert_eq!(r.average, 0.875);

        let doubled: Vec<_> = ds.iter().chain(&ds).cloned().collect();
        let r2 = evaluate(&p, &doubled, &prompts, &vocab).unwrap();
        assert_eq!(r.per_class_accuracy, r2.per_class_accuracy);
        assert_eq!(r2.n_examples, 8);
        let seq = evaluate_with(Exec::Sequential, &p, &doubled, &prompts, &vocab).unwrap();
        assert_eq!(seq, r2);
        assert!(evaluate(&p, &[], &prompts, &vocab).is_err());
    }

    #[test]
    fn t_test_hand_value() {
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((t.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.df, 2);
        assert!((t.t - 3.4641).abs() < 1e-4);
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            paired_t_test(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch(1, 2))
        ));
        let neg = paired_t_test(&[-1.0, -2.0, -3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(neg.t, -t.t);
        assert_eq!(neg.df, t.df);
    }

    #[test]
    fn critical_values() {
        assert_eq!(critical_t(4, Alpha::P05), 2.776);
        assert_eq!(critical_t(4, Alpha::P01), 4.604);
        assert!(TTest { t: -3.0, df: 4 }.significant(Alpha::P05));
        assert!(!TTest { t: 2.7, df: 4 }.significant(Alpha::P05));
    }

    proptest! {
        #[test]
        fn t_is_antisymmetric(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..10)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Ok(x), Ok(y)) = (paired_t_test(&a, &b), paired_t_test(&b, &a)) {
                prop_assert!((x.t + y.t).abs() < 1e-9 * (1.0 + x.t.abs()));
            }
        }

        #[test]
        fn argmax_scale_invariant(v in prop::collection::vec(-1.0f64..1.0, 4), scale in 0.01f64..100.0,
                                  c in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..5)) {
            let image = Array1::from(v);
            prop_assume!(image.dot(&image) > 1e-6);
            let cands: Vec<Array1<f64>> = c.into_iter().map(Array1::from).collect();
            let k = predict_label(image.view(), &cands).unwrap();
            prop_assert_eq!(predict_label((&image * scale).view(), &cands).unwrap(), k);
        }

        #[test]
        fn average_is_mean_of_classes(counts in prop::collection::vec(0usize..=50, 1..12)) {
            let ids: Vec<String> = (0..counts.len()).map(|i| i.to_string()).collect();
            let r = AccuracyReport::from_counts(&ids, &counts, 50);
            let m = r.per_class_accuracy.iter().map(|x| x.1).sum::<f64>() / counts.len() as f64;
            prop_assert!((r.average - m).abs() < 1e-12);
        }
    }
}

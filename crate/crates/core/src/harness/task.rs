//! Seeded synthetic tasks shaped like single-sentence classification,
//! sentence-pair classification and sentence-pair regression.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::MetricKind;
use crate::model::Batch;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 3;
/// Upper end of the regression score range.
pub const MAX_SCORE: f64 = 5.0;
const SCORE_NOISE_STD: f64 = 0.1;
/// Overlap threshold of the pair-classification rule.
pub const PAIR_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleSentenceClassification,
    PairClassification,
    PairRegression,
}

impl TaskKind {
    pub fn is_pair(self) -> bool {
        self != TaskKind::SingleSentenceClassification
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Ignored for regression, which always uses one output.
    #[serde(default = "default_labels")]
    pub num_labels: usize,
    pub vocab_size: usize,
    /// Tokens per text segment.
    pub segment_len: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Reported metric; defaults to accuracy (classification) or Pearson (regression).
    #[serde(default)]
    pub metric: Option<MetricKind>,
}

fn default_labels() -> usize {
    2
}

impl TaskSpec {
    /// Planted-overlap pair classification at toy scale.
    pub fn pair_classification(seed: u64, train_size: usize, val_size: usize) -> Self {
        TaskSpec {
            kind: TaskKind::PairClassification,
            num_labels: 2,
            vocab_size: 64,
            segment_len: 8,
            seed,
            train_size,
            val_size,
            metric: None,
        }
    }

    /// Output width the model head needs.
    pub fn head_labels(&self) -> usize {
        if self.kind == TaskKind::PairRegression {
            1
        } else {
            self.num_labels
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.metric.unwrap_or(if self.kind == TaskKind::PairRegression {
            MetricKind::Pearson
        } else {
            MetricKind::Accuracy
        })
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`.
    pub fn seq_len(&self) -> usize {
        if self.kind.is_pair() {
            2 * self.segment_len + 3
        } else {
            self.segment_len + 2
        }
    }

    fn content(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT)
    }

    /// Marker ids of class `c ≥ 1` in the single-sentence task: two per class.
    fn markers(c: usize) -> [usize; 2] {
        let base = FIRST_CONTENT + 2 * (c - 1);
        [base, base + 1]
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Task(m));
        if self.segment_len == 0 {
            return bad("segment_len must be at least 1".into());
        }
        if self.train_size == 0 || self.val_size == 0 {
            return bad("train_size and val_size must be positive".into());
        }
        match self.kind {
            TaskKind::SingleSentenceClassification => {
                if self.num_labels < 2 {
                    return bad("classification needs num_labels >= 2".into());
                }
                let marker_ids = 2 * (self.num_labels - 1);
                if self.content() < marker_ids + 2 {
                    return bad(format!(
                        "vocab_size {} leaves no filler tokens beside {marker_ids} markers",
                        self.vocab_size
                    ));
                }
            }
            TaskKind::PairClassification | TaskKind::PairRegression => {
                if self.kind == TaskKind::PairClassification && self.num_labels != 2 {
                    return bad("pair classification is binary (num_labels = 2)".into());
                }
                if self.content() < 2 * self.segment_len {
                    return bad(format!(
                        "vocab_size {} too small for two disjoint segments of {}",
                        self.vocab_size, self.segment_len
                    ));
                }
            }
        }
        match self.metric() {
            MetricKind::Pearson if self.kind != TaskKind::PairRegression => {
                bad("pearson needs a regression task".into())
            }
            MetricKind::Accuracy | MetricKind::F1 | MetricKind::Mcc
                if self.kind == TaskKind::PairRegression =>
            {
                bad(format!("{} needs a classification task", self.metric()))
            }
            MetricKind::F1 | MetricKind::Mcc if self.num_labels != 2 => {
                bad(format!("{} needs binary labels", self.metric()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub text_a: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<Vec<usize>>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
}

/// `|set(a) ∩ set(b)| / min(|set(a)|, |set(b)|)`
pub fn overlap_coefficient(a: &[usize], b: &[usize]) -> f64 {
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    let m = sa.len().min(sb.len());
    if m == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / m as f64
}

/// Label the generator plants for a record's text.
pub fn planted_label(spec: &TaskSpec, text_a: &[usize], text_b: Option<&[usize]>) -> Label {
    match spec.kind {
        TaskKind::SingleSentenceClassification => {
            let class = (1..spec.num_labels)
                .find(|&c| TaskSpec::markers(c).iter().any(|m| text_a.contains(m)))
                .unwrap_or(0);
            Label::Class(class)
        }
        TaskKind::PairClassification => {
            let o = overlap_coefficient(text_a, text_b.unwrap_or(&[]));
            Label::Class(usize::from(o >= PAIR_THRESHOLD))
        }
        TaskKind::PairRegression => {
            Label::Score(MAX_SCORE * overlap_coefficient(text_a, text_b.unwrap_or(&[])))
        }
    }
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    pool.choose_multiple(rng, n).copied().collect()
}

fn single_record(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> DatasetRecord {
    let n_markers = 2 * (spec.num_labels - 1);
    let filler: Vec<usize> = (FIRST_CONTENT + n_markers..spec.vocab_size).collect();
    let class = rng.random_range(0..spec.num_labels);
    let mut text: Vec<usize> = (0..spec.segment_len)
        .map(|_| *filler.choose(rng).unwrap())
        .collect();
    if class > 0 {
        let pos = rng.random_range(0..spec.segment_len);
        text[pos] = *TaskSpec::markers(class).choose(rng).unwrap();
    }
    DatasetRecord {
        text_a: text,
        text_b: None,
        label: Label::Class(class),
    }
}

fn pair_record(spec: &TaskSpec, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> DatasetRecord {
    let n = spec.segment_len;
    let pool: Vec<usize> = (FIRST_CONTENT..spec.vocab_size).collect();
    let a = sample_distinct(rng, &pool, n);
    let rest: Vec<usize> = pool.iter().copied().filter(|t| !a.contains(t)).collect();
    let shared = match spec.kind {
        TaskKind::PairClassification => {
            if rng.random_bool(0.5) {
                // Paraphrase: at most a quarter of the tokens are replaced.
                n - rng.random_range(0..=n / 4)
            } else {
                0
            }
        }
        _ => rng.random_range(0..=n),
    };
    let mut b = sample_distinct(rng, &a, shared);
    b.extend(sample_distinct(rng, &rest, n - shared));
    b.shuffle(rng);
    let label = match spec.kind {
        TaskKind::PairRegression => {
            let clean = MAX_SCORE * overlap_coefficient(&a, &b);
            Label::Score((clean + noise.sample(rng)).clamp(0.0, MAX_SCORE))
        }
        _ => planted_label(spec, &a, Some(&b)),
    };
    DatasetRecord {
        text_a: a,
        text_b: Some(b),
        label,
    }
}

/// Deterministic train/validation split for `spec`.
pub fn generate_task(spec: &TaskSpec) -> Result<Task, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, SCORE_NOISE_STD).unwrap();
    let mut gen = |count: usize| -> Vec<DatasetRecord> {
        (0..count)
            .map(|_| match spec.kind {
                TaskKind::SingleSentenceClassification => single_record(spec, &mut rng),
                _ => pair_record(spec, &mut rng, &noise),
            })
            .collect()
    };
    let train = gen(spec.train_size);
    let val = gen(spec.val_size);
    Ok(Task {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Pack records into a padded batch with `[CLS]`/`[SEP]` framing and segment ids.
pub fn encode(records: &[&DatasetRecord]) -> Result<Batch, HarnessError> {
    let seqs: Vec<(Vec<usize>, Vec<usize>)> = records
        .iter()
        .map(|r| {
            let mut ids = vec![CLS];
            ids.extend(&r.text_a);
            ids.push(SEP);
            let mut types = vec![0; ids.len()];
            if let Some(b) = &r.text_b {
                ids.extend(b);
                ids.push(SEP);
                types.resize(ids.len(), 1);
            }
            (ids, types)
        })
        .collect();
    let seq = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(records.len() * seq);
    let mut type_ids = Vec::with_capacity(records.len() * seq);
    let mut mask = Vec::with_capacity(records.len() * seq);
    for (ids, types) in &seqs {
        let pad = seq - ids.len();
        tokens.extend(ids.iter().copied().chain(std::iter::repeat_n(PAD, pad)));
        type_ids.extend(types.iter().copied().chain(std::iter::repeat_n(0, pad)));
        mask.extend(std::iter::repeat_n(true, ids.len()).chain(std::iter::repeat_n(false, pad)));
    }
    Ok(Batch::new(tokens, type_ids, Some(mask), records.len(), seq)?)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(records: &[DatasetRecord], mut w: W) -> Result<(), HarnessError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| HarnessError::Task(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Task(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

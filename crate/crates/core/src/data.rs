//! Prescription records: JSONL ingestion, the hashed toy embedder and a
//! synthetic generator with planted, recoverable labels.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::Targets;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantityTag {
    Standard,
    #[serde(rename = "PRN")]
    Prn,
    #[serde(rename = "APPP")]
    Appp,
    Complex,
    #[serde(alias = "NS", alias = "Not Specified")]
    NotSpecified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Indication {
    Cardiac,
    Tremors,
    Migraine,
    #[serde(alias = "Others")]
    Other,
    #[serde(alias = "Not Annotated")]
    NA,
}

impl QuantityTag {
    pub const ALL: [QuantityTag; 5] = [
        QuantityTag::Standard,
        QuantityTag::Prn,
        QuantityTag::Appp,
        QuantityTag::Complex,
        QuantityTag::NotSpecified,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Data(format!("quantity tag index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        ["Standard", "PRN", "APPP", "Complex", "NotSpecified"][self.index()]
    }
}

impl Indication {
    pub const ALL: [Indication; 5] = [
        Indication::Cardiac,
        Indication::Tremors,
        Indication::Migraine,
        Indication::Other,
        Indication::NA,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Data(format!("indication index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        ["Cardiac", "Tremors", "Migraine", "Other", "NA"][self.index()]
    }
}

impl fmt::Display for QuantityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Indication {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One annotated prescription.
#[derive(Clone, Debug, PartialEq)]
pub struct PrescriptionRecord {
    pub id: String,
    pub tokens: Option<Vec<String>>,
    /// `L × d_model`, `L >= 1`.
    pub embeddings: Tensor,
    pub quantity: f64,
    pub quantity_tag: QuantityTag,
    pub indication: Indication,
}

impl PrescriptionRecord {
    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn targets(&self) -> Targets {
        Targets {
            quantity: self.quantity,
            tag: self.quantity_tag.index(),
            indication: self.indication.index(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("field `id` is empty".into()));
        }
        if !self.quantity.is_finite() || self.quantity < 0.0 {
            return Err(Error::Data(format!(
                "field `quantity` must be a non-negative number, got {}",
                self.quantity
            )));
        }
        if (self.quantity * 2.0).fract() != 0.0 {
            return Err(Error::Data(format!(
                "field `quantity` must be a multiple of 0.5, got {}",
                self.quantity
            )));
        }
        if self.embeddings.shape().len() != 2 {
            return Err(Error::Data("field `embeddings` must be a matrix".into()));
        }
        if !self.embeddings.is_finite() {
            return Err(Error::Data("field `embeddings` contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Settings for the hashed toy embedder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSpec {
    pub d_model: usize,
    pub seed: u64,
}

fn token_vector(token: &str, d_model: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let v: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Map each token to a fixed unit vector derived from a seeded hash of the token text.
pub fn toy_embed(tokens: &[String], d_model: usize, seed: u64) -> Result<Tensor> {
    if tokens.is_empty() || d_model == 0 {
        return Err(Error::Data("toy_embed needs at least one token and d_model >= 1".into()));
    }
    let data = tokens
        .iter()
        .flat_map(|t| token_vector(t, d_model, seed))
        .collect();
    Tensor::matrix(tokens.len(), d_model, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<Vec<Vec<f64>>>,
    quantity: f64,
    quantity_tag: QuantityTag,
    indication: Indication,
}

fn record_from_line(line: RecordLine, embed: &EmbedSpec) -> Result<PrescriptionRecord> {
    let embeddings = match (&line.embeddings, &line.tokens) {
        (Some(rows), _) => {
            if rows.is_empty() {
                return Err(Error::Data("field `embeddings` has no rows".into()));
            }
            if rows.iter().any(|r| r.len() != embed.d_model) {
                return Err(Error::Data(format!(
                    "field `embeddings` rows must have width d_model = {}",
                    embed.d_model
                )));
            }
            Tensor::from_rows(rows)?
        }
        (None, Some(tokens)) => {
            if tokens.is_empty() {
                return Err(Error::Data("field `tokens` is empty".into()));
            }
            toy_embed(tokens, embed.d_model, embed.seed)?
        }
        (None, None) => {
            return Err(Error::Data("record needs `tokens` or `embeddings`".into()));
        }
    };
    let rec = PrescriptionRecord {
        id: line.id,
        tokens: line.tokens,
        embeddings,
        quantity: line.quantity,
        quantity_tag: line.quantity_tag,
        indication: line.indication,
    };
    rec.validate()?;
    Ok(rec)
}

/// Parse JSONL records from a reader; blank lines are skipped.
pub fn read_dataset<R: BufRead>(reader: R, embed: &EmbedSpec) -> Result<Vec<PrescriptionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let rec = record_from_line(parsed, embed).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("line {line_no}: {m}")),
            other => other,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Data(format!("line {line_no}: duplicate id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, embed: &EmbedSpec) -> Result<Vec<PrescriptionRecord>> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), embed)
}

/// Write records as JSONL. Records with tokens are written without embeddings.
pub fn write_dataset<W: Write>(mut w: W, records: &[PrescriptionRecord]) -> Result<()> {
    for r in records {
        let embeddings = match r.tokens {
            Some(_) => None,
            None => Some(
                (0..r.len())
                    .map(|i| r.embeddings.row(i).to_vec())
                    .collect(),
            ),
        };
        let line = RecordLine {
            id: r.id.clone(),
            tokens: r.tokens.clone(),
            embeddings,
            quantity: r.quantity,
            quantity_tag: r.quantity_tag,
            indication: r.indication,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Which labels the token sequence carries, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantedTask {
    /// The tag is named by a dedicated token.
    Content,
    /// Every record contains the same three marker tokens; the tag is the
    /// order in which they appear.
    Order,
}

/// Class proportions for quantity tag and indication in the prescription corpus.
pub const CORPUS_TAG_PROPORTIONS: [f64; 5] = [0.906, 0.023, 0.010, 0.008, 0.053];
pub const CORPUS_INDICATION_PROPORTIONS: [f64; 5] = [0.774, 0.021, 0.018, 0.004, 0.184];

pub const QUANTITY_VALUES: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 6.0];
const MARKERS: [&str; 3] = ["mark_a", "mark_b", "mark_c"];
/// Marker orders assigned to tag classes 0..5 (the sixth ordering is unused).
const MARKER_ORDERS: [[usize; 3]; 5] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub task: PlantedTask,
    pub tag_proportions: [f64; 5],
    pub indication_proportions: [f64; 5],
    pub filler_vocab: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub embed: EmbedSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task: PlantedTask::Content,
            tag_proportions: CORPUS_TAG_PROPORTIONS,
            indication_proportions: CORPUS_INDICATION_PROPORTIONS,
            filler_vocab: 12,
            min_fillers: 3,
            max_fillers: 6,
            embed: EmbedSpec { d_model: 8, seed: 0 },
        }
    }
}

impl SynthSpec {
    /// Balanced classes, labels carried by marker order.
    pub fn order_task(d_model: usize) -> Self {
        Self {
            task: PlantedTask::Order,
            tag_proportions: [0.2; 5],
            indication_proportions: [0.2; 5],
            embed: EmbedSpec { d_model, seed: 0 },
            ..Self::default()
        }
    }
}

/// Class counts for `n` records that follow `props` as closely as integers allow.
fn quota(n: usize, props: &[f64; 5]) -> Vec<usize> {
    let total: f64 = props.iter().sum();
    let exact: Vec<f64> = props.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts
}

fn shuffled_labels(n: usize, props: &[f64; 5], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = quota(n, props)
        .into_iter()
        .enumerate()
        .flat_map(|(c, k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

fn quantity_token(q: f64) -> String {
    format!("qty_{q}")
}

/// Deterministic synthetic records whose labels are recoverable from the tokens.
pub fn synth_dataset(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<PrescriptionRecord>> {
    if n < 10 {
        return Err(Error::Data(format!("synth_dataset needs n >= 10, got {n}")));
    }
    if spec.filler_vocab == 0 || spec.min_fillers > spec.max_fillers {
        return Err(Error::Config("invalid filler settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tags = shuffled_labels(n, &spec.tag_proportions, &mut rng);
    let inds = shuffled_labels(n, &spec.indication_proportions, &mut rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (tag, ind) = (tags[i], inds[i]);
        let quantity = QUANTITY_VALUES[rng.random_range(0..QUANTITY_VALUES.len())];
        let n_fill = rng.random_range(spec.min_fillers..=spec.max_fillers);
        let mut tokens: Vec<String> = (0..n_fill)
            .map(|_| format!("w{}", rng.random_range(0..spec.filler_vocab)))
            .collect();
        let insert = |tokens: &mut Vec<String>, tok: String, rng: &mut ChaCha8Rng| {
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, tok);
        };
        insert(&mut tokens, quantity_token(quantity), &mut rng);
        insert(&mut tokens, format!("ind_{ind}"), &mut rng);
        match spec.task {
            PlantedTask::Content => insert(&mut tokens, format!("tag_{tag}"), &mut rng),
            PlantedTask::Order => {
                let at = rng.random_range(0..=tokens.len());
                for (k, &m) in MARKER_ORDERS[tag].iter().enumerate() {
                    tokens.insert(at + k, MARKERS[m].to_string());
                }
            }
        }
        let embeddings = toy_embed(&tokens, spec.embed.d_model, spec.embed.seed)?;
        out.push(PrescriptionRecord {
            id: format!("synth-{seed}-{i:05}"),
            tokens: Some(tokens),
            embeddings,
            quantity,
            quantity_tag: QuantityTag::from_index(tag)?,
            indication: Indication::from_index(ind)?,
        });
    }
    Ok(out)
}

/// Read the planted labels straight off a synthetic token sequence.
pub fn decode_planted(tokens: &[String], task: PlantedTask) -> Option<(f64, usize, usize)> {
    let quantity = tokens
        .iter()
        .find_map(|t| t.strip_prefix("qty_").and_then(|v| v.parse().ok()))?;
    let ind = tokens
        .iter()
        .find_map(|t| t.strip_prefix("ind_").and_then(|v| v.parse().ok()))?;
    let tag = match task {
        PlantedTask::Content => tokens
            .iter()
            .find_map(|t| t.strip_prefix("tag_").and_then(|v| v.parse().ok()))?,
        PlantedTask::Order => {
            let order: Vec<usize> = tokens
                .iter()
                .filter_map(|t| MARKERS.iter().position(|m| m == t))
                .collect();
            MARKER_ORDERS.iter().position(|o| o.as_slice() == order)?
        }
    };
    Some((quantity, tag, ind))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMBED: EmbedSpec = EmbedSpec { d_model: 4, seed: 1 };

    fn parse(text: &str) -> Result<Vec<PrescriptionRecord>> {
        read_dataset(text.as_bytes(), &EMBED)
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn parses_a_cardiac_standard_record() {
        let recs = parse(
            r#"{"id":"r6","tokens":["1","tabl","morgonen","en","halv"],"quantity":1.5,"quantity_tag":"Standard","indication":"Cardiac"}"#,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].quantity, 1.5);
        assert_eq!(recs[0].quantity_tag, QuantityTag::Standard);
        assert_eq!(recs[0].indication, Indication::Cardiac);
        assert_eq!(recs[0].embeddings.shape(), &[5, 4]);
    }

    #[test]
    fn rejects_quantity_not_multiple_of_half() {
        let err = parse(
            r#"{"id":"x","tokens":["a"],"quantity":1.3,"quantity_tag":"PRN","indication":"NA"}"#,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("quantity")), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"quantity":1,"quantity_tag":"APPP","indication":"Tremors"}"#,
            "\n",
            r#"{"id":"b","tokens":["x"],"quantity":1,"quantity_tag":"Bogus","indication":"NA"}"#
        );
        assert!(matches!(parse(text), Err(Error::Parse { line: 2, .. })));
        let unknown = r#"{"id":"a","tokens":["x"],"quantity":1,"quantity_tag":"PRN","indication":"NA","extra":1}"#;
        assert!(matches!(parse(unknown), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rejects_duplicates_and_bad_embeddings() {
        let line = r#"{"id":"a","tokens":["x"],"quantity":1,"quantity_tag":"PRN","indication":"NA"}"#;
        assert!(matches!(parse(&format!("{line}\n{line}")), Err(Error::Data(_))));
        let narrow = r#"{"id":"a","embeddings":[[1,2]],"quantity":1,"quantity_tag":"PRN","indication":"NA"}"#;
        assert!(matches!(parse(narrow), Err(Error::Data(_))));
        let neither = r#"{"id":"a","quantity":1,"quantity_tag":"PRN","indication":"NA"}"#;
        assert!(matches!(parse(neither), Err(Error::Data(_))));
    }

    #[test]
    fn accepts_precomputed_embeddings() {
        let line = r#"{"id":"e","embeddings":[[1,0,0,0],[0,1,0,0]],"quantity":0,"quantity_tag":"NS","indication":"Others"}"#;
        let r = &parse(line).unwrap()[0];
        assert_eq!(r.embeddings.shape(), &[2, 4]);
        assert_eq!(r.quantity_tag, QuantityTag::NotSpecified);
        assert_eq!(r.indication, Indication::Other);
    }

    #[test]
    fn toy_embed_is_deterministic_unit_norm() {
        let toks: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let e1 = toy_embed(&toks, 16, 7).unwrap();
        let e2 = toy_embed(&toks, 16, 7).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.row(0), e1.row(2));
        assert_ne!(e1.row(0), e1.row(1));
        for i in 0..3 {
            let n: f64 = e1.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_embed_has_no_collisions_on_a_large_vocabulary() {
        let toks: Vec<String> = (0..10_000).map(|i| format!("tok{i}")).collect();
        let e = toy_embed(&toks, 8, 3).unwrap();
        let mut seen = HashSet::new();
        for i in 0..toks.len() {
            let key: Vec<u64> = e.row(i).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "collision at token {i}");
        }
    }

    #[test]
    fn quota_matches_proportions() {
        let q = quota(1000, &CORPUS_TAG_PROPORTIONS);
        assert_eq!(q.iter().sum::<usize>(), 1000);
        assert_eq!(q[0], 906);
    }

    #[test]
    fn synth_is_deterministic_and_recoverable() {
        for task in [PlantedTask::Content, PlantedTask::Order] {
            let spec = SynthSpec {
                task,
                ..SynthSpec::default()
            };
            let a = synth_dataset(200, 5, &spec).unwrap();
            let b = synth_dataset(200, 5, &spec).unwrap();
            assert_eq!(a, b);
            for r in &a {
                let (q, t, i) = decode_planted(r.tokens.as_ref().unwrap(), task).unwrap();
                assert_eq!(q, r.quantity);
                assert_eq!(t, r.quantity_tag.index());
                assert_eq!(i, r.indication.index());
                r.validate().unwrap();
            }
        }
        assert!(synth_dataset(9, 0, &SynthSpec::default()).is_err());
    }

    #[test]
    fn order_task_shares_token_multisets_across_classes() {
        let recs = synth_dataset(100, 2, &SynthSpec::order_task(8)).unwrap();
        for r in &recs {
            let toks = r.tokens.as_ref().unwrap();
            let markers = toks.iter().filter(|t| t.starts_with("mark_")).count();
            assert_eq!(markers, 3);
            assert!(!toks.iter().any(|t| t.starts_with("tag_")));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = synth_dataset(12, 1, &SynthSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &recs).unwrap();
        let back = read_dataset(&buf[..], &SynthSpec::default().embed).unwrap();
        assert_eq!(back, recs);
    }
}

//! Line-delimited JSON manifests.
//!
//! An optional first record `{"corpus": "mvsa" | "tumemo"}` declares the label
//! space (default `mvsa`). Every other line is one sample carrying exactly one
//! label form: `label`, `text_label` + `image_label`, or `annotations`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aggregate::{resolve_multiple, resolve_single, DropReason, Polarity};
use super::{validate_id, Corpus, Dataset, DatasetError, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub text: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_norm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<[String; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    corpus: Corpus,
}

/// Counts of samples discarded during aggregation, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub polarity_conflict: usize,
    pub no_majority: usize,
}

impl DropReport {
    pub fn record(&mut self, reason: DropReason) {
        match reason {
            DropReason::PolarityConflict => self.polarity_conflict += 1,
            DropReason::NoMajority => self.no_majority += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.polarity_conflict + self.no_majority
    }
}

pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| DatasetError::InvalidUtf8)?;
    parse_manifest(&text)
}

pub fn parse_manifest(input: &str) -> Result<Dataset, DatasetError> {
    let mut corpus = None;
    let mut samples = Vec::new();
    let mut drops = DropReport::default();
    let mut seen = HashSet::new();

    for (idx, raw) in input.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse { line, message };
        if corpus.is_none() && seen.is_empty() {
            if let Ok(header) = serde_json::from_str::<Header>(raw) {
                corpus = Some(header.corpus);
                continue;
            }
        }
        let corpus = *corpus.get_or_insert(Corpus::Mvsa);
        let record: ManifestRecord = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        validate_id(&record.id).map_err(parse_err)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        match resolve_label(corpus, &record).map_err(|e| parse_err(e.to_string()))? {
            Ok(label) => samples.push(Sample {
                id: record.id,
                text: record.text,
                text_norm: record.text_norm.unwrap_or_default(),
                image_ref: record.image,
                label,
            }),
            Err(reason) => drops.record(reason),
        }
    }

    let mut dataset = Dataset::new(corpus.unwrap_or_default(), samples)?;
    dataset.drops = drops;
    Ok(dataset)
}

fn resolve_label(corpus: Corpus, record: &ManifestRecord) -> Result<Result<usize, DropReason>, DatasetError> {
    let forms = [
        record.label.is_some(),
        record.text_label.is_some() || record.image_label.is_some(),
        record.annotations.is_some(),
    ];
    match forms.iter().filter(|f| **f).count() {
        0 => return Err(DatasetError::InvalidParameters("record has no label".into())),
        1 => {}
        _ => return Err(DatasetError::InvalidParameters("record mixes label forms".into())),
    }
    if let Some(label) = &record.label {
        return Ok(Ok(corpus.class_index(label)?));
    }
    if corpus != Corpus::Mvsa {
        return Err(DatasetError::InvalidParameters(
            "per-modality labels are only defined for sentiment corpora".into(),
        ));
    }
    let to_index = |r: Result<Polarity, DropReason>| r.map(Polarity::class_index);
    if let Some(pairs) = &record.annotations {
        let pairs = pairs
            .iter()
            .map(|[t, i]| Ok((Polarity::from_token(t)?, Polarity::from_token(i)?)))
            .collect::<Result<Vec<_>, DatasetError>>()?;
        return Ok(to_index(resolve_multiple(&pairs)?));
    }
    match (&record.text_label, &record.image_label) {
        (Some(t), Some(i)) => Ok(to_index(resolve_single(Polarity::from_token(t)?, Polarity::from_token(i)?))),
        _ => Err(DatasetError::InvalidParameters(
            "text_label and image_label must appear together".into(),
        )),
    }
}

/// Serializes a dataset with resolved labels. The output reloads to the same
/// samples (drop counts are not carried).
pub fn write_manifest(dataset: &Dataset) -> String {
    let mut out = String::new();
    let header = Header { corpus: dataset.corpus };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).unwrap();
    for s in &dataset.samples {
        let record = ManifestRecord {
            id: s.id.clone(),
            text: s.text.clone(),
            image: s.image_ref.clone(),
            text_norm: (!s.text_norm.is_empty()).then(|| s.text_norm.clone()),
            label: Some(dataset.corpus.class_name(s.label).to_string()),
            text_label: None,
            image_label: None,
            annotations: None,
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_manifest() {
        let m = r#"{"id":"a","text":"hi","image":"a.jpg","label":"positive"}
{"id":"b","text":"meh","image":"b.jpg","label":"neutral"}
{"id":"c","text":"bad","image":"c.jpg","label":"negative"}
"#;
        let ds = parse_manifest(m).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.corpus, Corpus::Mvsa);
        assert_eq!(ds.samples[2].label, 2);
    }

    #[test]
    fn duplicate_id_is_named() {
        let m = r#"{"id":"a","text":"x","image":"a.jpg","label":"positive"}
{"id":"a","text":"y","image":"b.jpg","label":"neutral"}"#;
        match parse_manifest(m) {
            Err(DatasetError::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let m = "{\"corpus\":\"mvsa\"}\n\n{\"id\":\"a\",\"text\":\"x\",\"image\":\"a\",\"label\":\"positive\"}\n{oops";
        match parse_manifest(m) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pairs_are_aggregated_and_drops_counted() {
        let m = r#"{"id":"a","text":"x","image":"a","text_label":"positive","image_label":"neutral"}
{"id":"b","text":"x","image":"b","text_label":"positive","image_label":"negative"}
{"id":"c","text":"x","image":"c","annotations":[["positive","positive"],["neutral","positive"],["negative","positive"]]}"#;
        let ds = parse_manifest(m).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].id, "a");
        assert_eq!(ds.drops.polarity_conflict, 1);
        assert_eq!(ds.drops.no_majority, 1);
    }

    #[test]
    fn tumemo_header_switches_label_space() {
        let m = "{\"corpus\":\"tumemo\"}\n{\"id\":\"a\",\"text\":\"x\",\"image\":\"a\",\"label\":\"loving\"}";
        let ds = parse_manifest(m).unwrap();
        assert_eq!(ds.num_classes(), 7);
        assert_eq!(ds.samples[0].label, 5);
        assert!(parse_manifest("{\"corpus\":\"tumemo\"}\n{\"id\":\"a\",\"text\":\"x\",\"image\":\"a\",\"label\":\"positive\"}").is_err());
    }

    #[test]
    fn mixed_label_forms_rejected() {
        let m = r#"{"id":"a","text":"x","image":"a","label":"positive","text_label":"positive","image_label":"positive"}"#;
        assert!(matches!(parse_manifest(m), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_field_rejected() {
        let m = r#"{"id":"a","text":"x","image":"a","label":"positive","extra":1}"#;
        assert!(matches!(parse_manifest(m), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let ds = parse_manifest("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.drops.total(), 0);
    }

    #[test]
    fn write_then_parse_preserves_samples() {
        let m = r#"{"id":"a","text":"x y","image":"a","text_label":"negative","image_label":"neutral"}
{"id":"b","text":"z","image":"b","label":"positive"}"#;
        let ds = parse_manifest(m).unwrap();
        let again = parse_manifest(&write_manifest(&ds)).unwrap();
        assert_eq!(again.samples, ds.samples);
        assert_eq!(again.corpus, ds.corpus);
    }
}

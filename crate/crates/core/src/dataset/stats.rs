use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError};
use crate::encoders::{BranchId, FeatureBundle};

/// Percentages of samples with a present face, object and OCR feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceRatios {
    pub face: f64,
    pub object: f64,
    pub ocr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub count: usize,
    pub ratios: PresenceRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    /// Classes with no samples are omitted.
    pub per_class: Vec<ClassStats>,
    pub overall: PresenceRatios,
}

#[derive(Default)]
struct Tally {
    count: usize,
    face: usize,
    object: usize,
    ocr: usize,
}

impl Tally {
    fn add(&mut self, bundle: &FeatureBundle) {
        self.count += 1;
        self.face += bundle.record(BranchId::Face).present as usize;
        self.object += bundle.record(BranchId::Object).present as usize;
        self.ocr += bundle.record(BranchId::Ocr).present as usize;
    }

    fn ratios(&self) -> PresenceRatios {
        let pct = |n: usize| if self.count == 0 { 0.0 } else { 100.0 * n as f64 / self.count as f64 };
        PresenceRatios {
            face: pct(self.face),
            object: pct(self.object),
            ocr: pct(self.ocr),
        }
    }
}

pub fn compute_stats(dataset: &Dataset, bundles: &HashMap<String, FeatureBundle>) -> Result<DatasetStats, DatasetError> {
    let mut classes: Vec<Tally> = (0..dataset.num_classes()).map(|_| Tally::default()).collect();
    let mut overall = Tally::default();
    for s in &dataset.samples {
        let bundle = bundles.get(&s.id).ok_or_else(|| DatasetError::MissingBundle(s.id.clone()))?;
        classes[s.label].add(bundle);
        overall.add(bundle);
    }
    let per_class = classes
        .iter()
        .enumerate()
        .filter(|(_, t)| t.count > 0)
        .map(|(label, t)| ClassStats {
            class: dataset.corpus.class_name(label).to_string(),
            count: t.count,
            ratios: t.ratios(),
        })
        .collect();
    Ok(DatasetStats {
        total: overall.count,
        per_class,
        overall: overall.ratios(),
    })
}

impl DatasetStats {
    /// Plain-text table: class, count, face %, object %, OCR %.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8} {:>8} {:>8}\n", "Class", "Count", "Face", "Object", "OCR");
        let mut row = |name: &str, count: usize, r: &PresenceRatios| {
            writeln!(out, "{name:<10} {count:>8} {:>8.2} {:>8.2} {:>8.2}", r.face, r.object, r.ocr).unwrap();
        };
        for c in &self.per_class {
            row(&c.class, c.count, &c.ratios);
        }
        row("All", self.total, &self.overall);
        out
    }
}

//! Labeled text datasets: loading, seed sampling and JSONL export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_fields;
use crate::rng::substream;
use crate::OOD_LABEL;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
    pub id: String,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        LabeledExample {
            text: text.into(),
            label: label.into(),
            id: id.into(),
        }
    }
}

/// An immutable collection of labeled examples with an ordered class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    classes: Vec<String>,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    /// Builds a dataset whose class set is the sorted set of distinct labels.
    pub fn new(name: impl Into<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let classes: Vec<String> = examples
            .iter()
            .map(|e| e.label.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_classes(name, classes, examples)
    }

    pub fn with_classes(
        name: impl Into<String>,
        classes: Vec<String>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let class_set: HashSet<&str> = classes.iter().map(String::as_str).collect();
        if class_set.len() != classes.len() {
            return Err(Error::InvalidDataset("duplicate class names".into()));
        }
        if class_set.contains(OOD_LABEL) {
            return Err(Error::InvalidDataset(format!(
                "label `{OOD_LABEL}` is reserved"
            )));
        }
        let mut ids = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if ex.text.trim().is_empty() {
                return Err(Error::InvalidDataset(format!("example `{}` has blank text", ex.id)));
            }
            if !class_set.contains(ex.label.as_str()) {
                return Err(Error::UnknownClass(ex.label.clone()));
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id `{}`", ex.id)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            classes,
            examples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.classes.iter().any(|c| c == class)
    }

    pub fn examples_of<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a LabeledExample> + 'a {
        self.examples.iter().filter(move |e| e.label == class)
    }

    /// Examples grouped by class, in class order.
    pub fn by_class(&self) -> BTreeMap<&str, Vec<&LabeledExample>> {
        let mut map: BTreeMap<&str, Vec<&LabeledExample>> =
            self.classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
        for ex in &self.examples {
            map.entry(ex.label.as_str()).or_default().push(ex);
        }
        map
    }

    /// Checks the seed-data invariant: every class has at least one example.
    pub fn ensure_seed_ready(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::EmptyDataset(self.name.clone()));
        }
        for (class, exs) in self.by_class() {
            if exs.is_empty() {
                return Err(Error::EmptyClass(class.to_string()));
            }
        }
        Ok(())
    }

    /// Keeps only the examples with the given ids; the class set is kept.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            name: self.name.clone(),
            classes: self.classes.clone(),
            examples: self
                .examples
                .iter()
                .filter(|e| keep.contains(e.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> DatasetFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

/// A dataset plus non-fatal findings from loading it.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawRow {
    text: Option<String>,
    label: Option<String>,
    id: Option<String>,
}

/// Loads a dataset, logging any warnings.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let loaded = load_dataset_report(path, format)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded.dataset)
}

pub fn load_dataset_report(path: &Path, format: DatasetFormat) -> Result<Loaded> {
    let rows = match format {
        DatasetFormat::Jsonl => read_jsonl_rows(path)?,
        DatasetFormat::Csv => read_csv_rows(path)?,
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }

    let mut warnings = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let mut examples = Vec::with_capacity(rows.len());
    for (index, (line, row)) in rows.into_iter().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let text = row.text.ok_or_else(|| parse_err("missing `text`".into()))?;
        if text.trim().is_empty() {
            return Err(parse_err("`text` is blank".into()));
        }
        let label = row
            .label
            .map(|l| l.trim().to_string())
            .ok_or_else(|| parse_err("missing `label`".into()))?;
        if label.is_empty() {
            return Err(parse_err("`label` is blank".into()));
        }
        if label == OOD_LABEL {
            return Err(parse_err(format!("label `{OOD_LABEL}` is reserved")));
        }
        if let Some(first) = seen.insert((text.clone(), label.clone()), line) {
            warnings.push(format!(
                "line {line}: duplicate of line {first} (text/label pair retained)"
            ));
        }
        let id = match row.id {
            Some(id) if !id.trim().is_empty() => id,
            _ => derive_id(index, &text, &label),
        };
        examples.push(LabeledExample { text, label, id });
    }
    let dataset = Dataset::new(name, examples)?;
    Ok(Loaded { dataset, warnings })
}

/// Deterministic id from row position and content.
pub fn derive_id(row: usize, text: &str, label: &str) -> String {
    let hash = sha256_fields(&[label, text]);
    format!("{row:06}-{}", &hash[..8])
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<(usize, RawRow)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        rows.push((line_no, row));
    }
    Ok(rows)
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, RawRow)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for required in ["text", "label"] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("header is missing required column `{required}`"),
            });
        }
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<RawRow>() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rows.len() + 2;
        rows.push((line, record));
    }
    Ok(rows)
}

#[derive(Serialize)]
struct OutRow<'a> {
    text: &'a str,
    label: &'a str,
    id: &'a str,
}

/// Serializes examples as JSONL (`text`, `label`, `id`), LF-terminated.
pub fn dataset_to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for ex in dataset.examples() {
        let row = OutRow {
            text: &ex.text,
            label: &ex.label,
            id: &ex.id,
        };
        out.push_str(&serde_json::to_string(&row).expect("string fields serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(dataset_to_jsonl(dataset).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub shots_per_class: usize,
    pub rng_seed: u64,
    pub selected_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SeedSelection {
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        dataset.subset(&self.selected_ids)
    }
}

/// Samples `shots` examples per class without replacement.
///
/// Each class draws from its own substream keyed by `(rng_seed, class)`
/// with a partial Fisher-Yates shuffle over the class's examples in dataset
/// order. Selected ids are listed class by class, in dataset order.
pub fn sample_seed(dataset: &Dataset, shots: usize, rng_seed: u64) -> Result<SeedSelection> {
    if shots == 0 {
        return Err(Error::Precondition("shots must be at least 1".into()));
    }
    let mut selected_ids = Vec::new();
    let mut warnings = Vec::new();
    for (class, members) in dataset.by_class() {
        if members.is_empty() {
            return Err(Error::EmptyClass(class.to_string()));
        }
        let take = shots.min(members.len());
        if take < shots {
            warnings.push(format!(
                "class `{class}` has only {} examples (< {shots} shots); all selected",
                members.len()
            ));
        }
        let mut rng = substream(rng_seed, &["seed_sample", class]);
        let mut order: Vec<usize> = (0..members.len()).collect();
        for i in 0..take {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut chosen = order[..take].to_vec();
        chosen.sort_unstable();
        selected_ids.extend(chosen.into_iter().map(|i| members[i].id.clone()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SeedSelection {
        shots_per_class: shots,
        rng_seed,
        selected_ids,
        warnings,
    })
}

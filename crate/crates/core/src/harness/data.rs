//! File formats and dataset ingestion.
//!
//! * Annotations: JSON lines `{"example_id": str, "annotator_id": str,
//!   "grade": 1..=K, "count": n}` (`count` defaults to 1).
//! * Features: IDX (big-endian header, `u8` payload scaled by 1/255) or a
//!   text matrix with one `id<TAB>v1 v2 ...` row per line.
//! * Labels / truth: IDX label files (byte `b` is grade `b+1`) or text lines
//!   `id grade` with 1-based grades.
//!
//! IDX rows take the ids `"0"`, `"1"`, ... in file order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{AnnotationRecord, AnnotationSet};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub example_id: String,
    pub annotator_id: String,
    pub grade: usize,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path, classes: usize) -> Result<Vec<RawAnnotation>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawAnnotation = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if rec.grade == 0 || rec.grade > classes {
            return Err(parse_err(path, i + 1, format!("grade {} outside 1..={classes}", rec.grade)));
        }
        if rec.count == 0 {
            return Err(parse_err(path, i + 1, "count must be positive"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// One line per (example, annotator, grade) with the grade count.
pub fn annotations_to_jsonl(set: &AnnotationSet, example_ids: &[String], annotator_ids: &[String]) -> Result<String> {
    if example_ids.len() != set.len() || annotator_ids.len() != set.annotators() {
        return Err(Error::Dimension("id lists do not match the annotation set".into()));
    }
    let mut s = String::new();
    for rec in set.iter() {
        for (c, &n) in rec.counts().iter().enumerate() {
            let n = n.round();
            if n > 0.0 {
                let line = RawAnnotation {
                    example_id: example_ids[rec.example].clone(),
                    annotator_id: annotator_ids[rec.annotator].clone(),
                    grade: c + 1,
                    count: n as u32,
                };
                s.push_str(&serde_json::to_string(&line)?);
                s.push('\n');
            }
        }
    }
    Ok(s)
}

fn is_idx(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 0x08 && (1..=4).contains(&bytes[3])
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if !is_idx(bytes) {
        return Err(parse_err(path, 0, "not an unsigned-byte IDX file"));
    }
    let nd = bytes[3] as usize;
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(parse_err(path, 0, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(parse_err(path, 0, format!("IDX payload has {} bytes, header says {n}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn idx_bytes(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub values: Tensor,
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let bytes = read_bytes(path)?;
    if is_idx(&bytes) {
        let (dims, payload) = parse_idx(path, &bytes)?;
        let n = dims[0];
        let per: usize = dims[1..].iter().product();
        let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
        return Ok(FeatureTable { ids: index_ids(n), values: Tensor::new(&[n, per], data)? });
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 0, "neither IDX nor UTF-8 text"))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap().to_string();
        let before = data.len();
        for tok in parts {
            let v: f64 = tok.parse().map_err(|_| parse_err(path, i + 1, format!("bad number {tok:?}")))?;
            data.push(v);
        }
        let w = data.len() - before;
        if w == 0 || *width.get_or_insert(w) != w {
            return Err(parse_err(path, i + 1, format!("row has {w} values, expected {}", width.unwrap_or(w))));
        }
        ids.push(id);
    }
    let n = ids.len();
    if n == 0 {
        return Err(parse_err(path, 0, "no feature rows"));
    }
    Ok(FeatureTable { ids, values: Tensor::new(&[n, width.unwrap()], data)? })
}

pub fn features_to_text(ids: &[String], values: &Tensor) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        s.push('\t');
        let row: Vec<String> = values.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFormat {
    Idx,
    Text,
}

/// Grades are stored 0-based in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    pub ids: Vec<String>,
    pub classes: Vec<usize>,
    pub format: LabelFormat,
}

pub fn read_labels(path: &Path, classes: usize) -> Result<LabelTable> {
    let bytes = read_bytes(path)?;
    if is_idx(&bytes) {
        let (dims, payload) = parse_idx(path, &bytes)?;
        if dims.len() != 1 {
            return Err(parse_err(path, 0, "label IDX must be one-dimensional"));
        }
        if let Some(b) = payload.iter().find(|&&b| b as usize >= classes) {
            return Err(parse_err(path, 0, format!("label byte {b} outside 0..{classes}")));
        }
        let labels = payload.iter().map(|&b| b as usize).collect();
        return Ok(LabelTable { ids: index_ids(dims[0]), classes: labels, format: LabelFormat::Idx });
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 0, "neither IDX nor UTF-8 text"))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(path, i + 1, "expected `id grade`"));
        }
        let g: usize = parts[1].parse().map_err(|_| parse_err(path, i + 1, format!("bad grade {:?}", parts[1])))?;
        if g == 0 || g > classes {
            return Err(parse_err(path, i + 1, format!("grade {g} outside 1..={classes}")));
        }
        ids.push(parts[0].to_string());
        labels.push(g - 1);
    }
    Ok(LabelTable { ids, classes: labels, format: LabelFormat::Text })
}

pub fn labels_bytes(table: &LabelTable) -> Result<Vec<u8>> {
    match table.format {
        LabelFormat::Idx => {
            let payload = table
                .classes
                .iter()
                .map(|&c| u8::try_from(c).map_err(|_| Error::Contract(format!("class {c} does not fit a byte"))))
                .collect::<Result<Vec<u8>>>()?;
            Ok(idx_bytes(&[payload.len()], &payload))
        }
        LabelFormat::Text => {
            let mut s = Vec::new();
            for (id, c) in table.ids.iter().zip(&table.classes) {
                writeln!(s, "{id} {}", c + 1).expect("write to Vec");
            }
            Ok(s)
        }
    }
}

/// Maps each id to its label, failing on ids missing from `ids`.
fn align_labels(path: &Path, table: &LabelTable, ids: &[String]) -> Result<Vec<usize>> {
    let pos: HashMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    ids.iter()
        .map(|id| {
            pos.get(id.as_str())
                .map(|&i| table.classes[i])
                .ok_or_else(|| parse_err(path, 0, format!("no label for example {id:?}")))
        })
        .collect()
}

/// Uniform value in [0, 1) from the SHA-256 of an id.
pub fn id_hash_unit(id: &str) -> f64 {
    let d = Sha256::digest(id.as_bytes());
    let v = u64::from_be_bytes(d[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic 80/10/10 split by id hash.
pub fn hash_split(id: &str) -> Split {
    let u = id_hash_unit(id);
    if u < 0.8 {
        Split::Train
    } else if u < 0.9 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Examples joined with their collapsed, lumped annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: Tensor,
    /// Annotator indices are head indices after lumping.
    pub annotations: AnnotationSet,
    pub truth: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub examples: usize,
    pub annotated_examples: usize,
    /// Distinct raw annotator ids, sorted.
    pub annotator_ids: Vec<String>,
    /// Labeled examples per raw annotator.
    pub annotator_counts: Vec<usize>,
    /// Head index of each raw annotator.
    pub head_of: Vec<usize>,
    pub heads: usize,
    pub lumped: usize,
    /// Share of grades per class over all annotations.
    pub class_distribution: Vec<f64>,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "ingest: N={} annotated={} A={} heads={} lumped={}",
            self.examples,
            self.annotated_examples,
            self.annotator_ids.len(),
            self.heads,
            self.lumped
        )?;
        for ((id, n), h) in self.annotator_ids.iter().zip(&self.annotator_counts).zip(&self.head_of) {
            writeln!(f, "  annotator {id}: {n} examples -> head {h}")?;
        }
        let dist: Vec<String> = self.class_distribution.iter().map(|q| format!("{q:.4}")).collect();
        write!(f, "  class distribution: [{}]", dist.join(", "))
    }
}

/// Head map for raw annotators: annotators with at least `threshold` labeled
/// examples keep their own head in sorted-id order; the rest share one
/// composite head placed last. Everyone is lumped only if nobody qualifies.
pub fn lump_annotators(counts: &[usize], threshold: usize) -> (Vec<usize>, usize) {
    let mut head_of = vec![0; counts.len()];
    let mut next = 0;
    for (a, &n) in counts.iter().enumerate() {
        if n >= threshold {
            head_of[a] = next;
            next += 1;
        }
    }
    let rare = counts.iter().filter(|&&n| n < threshold).count();
    if rare > 0 {
        for (a, &n) in counts.iter().enumerate() {
            if n < threshold {
                head_of[a] = next;
            }
        }
    }
    (head_of, rare)
}

/// Joins annotations to feature rows, collapses repeat grades into one record
/// per (example, annotator) and lumps rare annotators.
pub fn build_dataset(
    features: FeatureTable,
    raw: &[RawAnnotation],
    source: &Path,
    classes: usize,
    lump_threshold: usize,
) -> Result<(Dataset, IngestSummary)> {
    let pos: HashMap<&str, usize> = features.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if pos.len() != features.ids.len() {
        return Err(Error::Contract("duplicate example ids in features".into()));
    }
    let annotator_ids: Vec<String> = {
        let mut v: Vec<String> = raw.iter().map(|r| r.annotator_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let ann_pos: HashMap<&str, usize> = annotator_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    // (example, raw annotator) -> per-class counts
    let mut cells: BTreeMap<(usize, usize), Vec<u32>> = BTreeMap::new();
    let mut class_totals = vec![0.0; classes];
    for (line, r) in raw.iter().enumerate() {
        let ex = *pos
            .get(r.example_id.as_str())
            .ok_or_else(|| parse_err(source, line + 1, format!("unknown example id {:?}", r.example_id)))?;
        let a = ann_pos[r.annotator_id.as_str()];
        cells.entry((ex, a)).or_insert_with(|| vec![0; classes])[r.grade - 1] += r.count;
        class_totals[r.grade - 1] += r.count as f64;
    }
    let mut annotator_counts = vec![0usize; annotator_ids.len()];
    for &(_, a) in cells.keys() {
        annotator_counts[a] += 1;
    }
    let (head_of, lumped) = lump_annotators(&annotator_counts, lump_threshold);
    let heads = head_of.iter().max().map_or(0, |m| m + 1);
    let n = features.ids.len();
    let mut by_example = vec![Vec::new(); n];
    for ((ex, a), counts) in cells {
        by_example[ex].push(AnnotationRecord::from_counts(ex, a, &counts)?);
    }
    let raw_set = AnnotationSet::new(classes, annotator_ids.len(), by_example)?;
    let annotations = raw_set.remap_annotators(&head_of)?;
    let total: f64 = class_totals.iter().sum();
    let summary = IngestSummary {
        examples: n,
        annotated_examples: annotations.by_example().iter().filter(|r| !r.is_empty()).count(),
        annotator_ids,
        annotator_counts,
        head_of,
        heads,
        lumped,
        class_distribution: class_totals.iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect(),
    };
    Ok((Dataset { ids: features.ids, features: features.values, annotations, truth: None }, summary))
}

/// Single-annotator labels as annotations from annotator `"labels"`.
pub fn labels_as_annotations(table: &LabelTable) -> Vec<RawAnnotation> {
    table
        .ids
        .iter()
        .zip(&table.classes)
        .map(|(id, &c)| RawAnnotation { example_id: id.clone(), annotator_id: "labels".into(), grade: c + 1, count: 1 })
        .collect()
}

/// Reads features plus either annotations or labels, and optional truth.
pub fn ingest(
    features: &Path,
    annotations: Option<&Path>,
    labels: Option<&Path>,
    truth: Option<&Path>,
    classes: usize,
    lump_threshold: usize,
) -> Result<(Dataset, IngestSummary)> {
    let table = read_features(features)?;
    let (raw, source) = match (annotations, labels) {
        (Some(a), None) => (read_annotations(a, classes)?, a),
        (None, Some(l)) => (labels_as_annotations(&read_labels(l, classes)?), l),
        _ => return Err(Error::Config("need exactly one of annotations or labels".into())),
    };
    let (mut ds, summary) = build_dataset(table, &raw, source, classes, lump_threshold)?;
    if let Some(t) = truth {
        ds.truth = Some(align_labels(t, &read_labels(t, classes)?, &ds.ids)?);
    }
    Ok((ds, summary))
}

/// Features with truth only (held-out test files).
pub fn read_eval_set(features: &Path, truth: &Path, classes: usize) -> Result<(Vec<String>, Tensor, Vec<usize>)> {
    let table = read_features(features)?;
    let labels = align_labels(truth, &read_labels(truth, classes)?, &table.ids)?;
    Ok((table.ids, table.values, labels))
}

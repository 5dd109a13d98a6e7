//! Line-oriented report documents: `key=value` lines followed by named CSV
//! blocks.
//!
//! ```text
//! # llns score report
//! kind=score
//! model_id=toy-encoder
//! [table layers]
//! layer,cka,importance,degenerate
//! 1,0.0,1.0,true
//! [end]
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so rendering the
//! same values always yields the same bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::importance::{ImportanceVector, SelectionPlan, Strategy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Document(format!("table {} lacks column {name}", self.name)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Reads what [`Table::to_csv`] wrote.
    pub fn parse_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Document("empty CSV".into()))?;
        let header: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::Document(format!(
                    "CSV row {} has {} cells",
                    n + 2,
                    row.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            name: name.to_string(),
            header,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl Document {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Document(format!("{} report lacks field {key:?}", self.kind)))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Document(format!("field {key}={v:?} does not parse")))
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Document(format!("{} report lacks table {name:?}", self.kind)))
    }

    pub fn render(&self) -> String {
        let mut out = format!("# llns {} report\nkind={}\n", self.kind, self.kind);
        for (k, v) in &self.fields {
            let _ = writeln!(out, "{k}={v}");
        }
        for t in &self.tables {
            let _ = writeln!(out, "[table {}]", t.name);
            out.push_str(&t.to_csv());
            out.push_str("[end]\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::Document(format!("line {}: {m}", n + 1));
        let mut kind = None;
        let mut fields = Vec::new();
        let mut tables = Vec::new();
        let mut lines = text.lines().enumerate();
        while let Some((n, line)) = lines.next() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line
                .strip_prefix("[table ")
                .and_then(|s| s.strip_suffix(']'))
            {
                let (_, header) = lines.next().ok_or_else(|| bad(n, "table without header"))?;
                let mut table = Table {
                    name: name.to_string(),
                    header: header.split(',').map(str::to_string).collect(),
                    rows: Vec::new(),
                };
                loop {
                    let (m, row) = lines.next().ok_or_else(|| bad(n, "unterminated table"))?;
                    if row == "[end]" {
                        break;
                    }
                    let cells: Vec<String> = row.split(',').map(str::to_string).collect();
                    if cells.len() != table.header.len() {
                        return Err(bad(m, "row width differs from header"));
                    }
                    table.rows.push(cells);
                }
                tables.push(table);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(n, "expected key=value"))?;
            if k == "kind" {
                if kind.replace(v.to_string()).is_some() {
                    return Err(bad(n, "duplicate kind"));
                }
            } else if fields.iter().any(|(f, _): &(String, String)| f == k) {
                return Err(bad(n, "duplicate key"));
            } else {
                fields.push((k.to_string(), v.to_string()));
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| Error::Document("missing kind".into()))?,
            fields,
            tables,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind == kind {
            Ok(self)
        } else {
            Err(Error::Document(format!(
                "expected a {kind} report, found {}",
                self.kind
            )))
        }
    }
}

/// Shortest round-trip float formatting.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_layers(layers: &BTreeSet<usize>) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_layers(s: &str) -> Result<BTreeSet<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Document(format!("bad layer index {t:?}")))
        })
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Document(format!("bad boolean {other:?}"))),
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Document(format!("bad number {s:?}")))
}

/// Importance scores with the CKA behind each one.
pub fn score_document(iv: &ImportanceVector, sample_count: usize, dataset_id: &str) -> Document {
    let mut doc = Document::new("score");
    doc.set("model_id", &iv.model_id);
    doc.set("architecture", iv.architecture);
    doc.set("layer_count", iv.layer_count());
    doc.set("sample_count", sample_count);
    doc.set("dataset_id", dataset_id);
    doc.set("degenerate_layers", fmt_layers(&iv.degenerate_layers));
    let mut t = Table::new("layers", &["layer", "cka", "importance", "degenerate"]);
    for (i, (s, c)) in iv.scores.iter().zip(&iv.cka).enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            fmt_f64(c.value),
            fmt_f64(*s),
            c.degenerate.to_string(),
        ]);
    }
    doc.tables.push(t);
    doc
}

/// Rebuilds the importance vector from a score document.
pub fn importance_from_document(doc: &Document) -> Result<ImportanceVector> {
    let arch = Architecture::parse(doc.get("architecture")?)
        .ok_or_else(|| Error::Document("bad architecture".into()))?;
    let t = doc.table("layers")?;
    let (li, si, di) = (
        t.column("layer")?,
        t.column("importance")?,
        t.column("degenerate")?,
    );
    let mut scores = Vec::with_capacity(t.rows.len());
    let mut degenerate = BTreeSet::new();
    for (i, row) in t.rows.iter().enumerate() {
        if row[li] != (i + 1).to_string() {
            return Err(Error::Document(format!(
                "layer rows out of order at {}",
                row[li]
            )));
        }
        scores.push(parse_f64(&row[si])?);
        if parse_bool(&row[di])? {
            degenerate.insert(i + 1);
        }
    }
    if scores.len() != doc.parse_field::<usize>("layer_count")? {
        return Err(Error::Document(
            "layer_count disagrees with the table".into(),
        ));
    }
    ImportanceVector::from_scores(scores, degenerate, arch, doc.get("model_id")?)
}

/// Parameter accounting that accompanies a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanCounts {
    pub preset: String,
    pub rank: usize,
    pub alpha: f64,
    pub targets: String,
    pub plan_params: u64,
    pub baseline_params: u64,
}

pub fn plan_document(plan: &SelectionPlan, counts: &PlanCounts) -> Document {
    let mut doc = Document::new("plan");
    doc.set("model_id", &plan.model_id);
    doc.set("preset", &counts.preset);
    doc.set("strategy", plan.strategy);
    doc.set("n_layers", plan.n_layers);
    doc.set("layer_count", plan.layer_count);
    doc.set("selected", fmt_layers(&plan.selected));
    doc.set("excluded_candidates", fmt_layers(&plan.excluded_candidates));
    doc.set("rank", counts.rank);
    doc.set("alpha", fmt_f64(counts.alpha));
    doc.set("targets", &counts.targets);
    doc.set("plan_params", counts.plan_params);
    doc.set("baseline_params", counts.baseline_params);
    doc
}

pub fn plan_from_document(doc: &Document) -> Result<SelectionPlan> {
    let strategy = Strategy::parse(doc.get("strategy")?).ok_or_else(|| {
        Error::Document(format!(
            "unknown strategy {:?}",
            doc.get("strategy").unwrap_or("")
        ))
    })?;
    let plan = SelectionPlan {
        selected: parse_layers(doc.get("selected")?)?,
        strategy,
        n_layers: doc.parse_field("n_layers")?,
        layer_count: doc.parse_field("layer_count")?,
        excluded_candidates: parse_layers(doc.get("excluded_candidates")?)?,
        model_id: doc.get("model_id")?.to_string(),
    };
    plan.validate()?;
    Ok(plan)
}

//! JSONL completion-point datasets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionPoint {
    pub id: String,
    /// Code before the cursor, dereference operator included.
    pub prefix: String,
    /// Static-analysis order.
    pub candidates: Vec<String>,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baselines: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IssueKind {
    Parse { message: String },
    Schema { field: String },
    TruthNotInCandidates,
    DuplicateCandidate { candidate: String },
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IssueKind::Parse { message } => write!(f, "parse error: {message}"),
            IssueKind::Schema { field } => write!(f, "schema error in field {field:?}"),
            IssueKind::TruthNotInCandidates => f.write_str("truth-not-in-candidates"),
            IssueKind::DuplicateCandidate { candidate } => {
                write!(f, "duplicate candidate {candidate:?} dropped")
            }
        }
    }
}

/// A rejected line or a warning, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineIssue {
    pub line: usize,
    #[serde(flatten)]
    pub kind: IssueKind,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub points: Vec<CompletionPoint>,
    pub rejected: Vec<LineIssue>,
    pub warnings: Vec<LineIssue>,
}

impl Dataset {
    pub fn parse(text: &str) -> Self {
        let mut out = Dataset::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match parse_point(line) {
                Ok((point, dups)) => {
                    out.warnings
                        .extend(dups.into_iter().map(|candidate| LineIssue {
                            line: line_no,
                            kind: IssueKind::DuplicateCandidate { candidate },
                        }));
                    out.points.push(point);
                }
                Err(kind) => out.rejected.push(LineIssue {
                    line: line_no,
                    kind,
                }),
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    /// Rejections and warnings in line order.
    pub fn issues(&self) -> Vec<&LineIssue> {
        let mut all: Vec<&LineIssue> = self.rejected.iter().chain(&self.warnings).collect();
        all.sort_by_key(|i| i.line);
        all
    }
}

fn schema(field: &str) -> IssueKind {
    IssueKind::Schema {
        field: field.to_string(),
    }
}

fn string_list(v: &Value, field: &str) -> Result<Vec<String>, IssueKind> {
    let items = v.as_array().ok_or_else(|| schema(field))?;
    items
        .iter()
        .map(|s| match s.as_str() {
            Some(s) if !s.is_empty() => Ok(s.to_string()),
            _ => Err(schema(field)),
        })
        .collect()
}

fn parse_point(line: &str) -> Result<(CompletionPoint, Vec<String>), IssueKind> {
    let value: Value = serde_json::from_str(line).map_err(|e| IssueKind::Parse {
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| schema("<root>"))?;
    let text = |field: &str| -> Result<String, IssueKind> {
        obj.get(field)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| schema(field))
    };
    let id = text("id")?;
    let prefix = text("prefix")?;
    if prefix.is_empty() {
        return Err(schema("prefix"));
    }
    let raw = string_list(
        obj.get("candidates").ok_or_else(|| schema("candidates"))?,
        "candidates",
    )?;
    if raw.is_empty() {
        return Err(schema("candidates"));
    }
    let ground_truth = text("ground_truth")?;
    let mut baselines = BTreeMap::new();
    if let Some(b) = obj.get("baselines") {
        let map = b.as_object().ok_or_else(|| schema("baselines"))?;
        for (name, list) in map {
            baselines.insert(name.clone(), string_list(list, "baselines")?);
        }
    }
    let meta = match obj.get("meta") {
        None | Some(Value::Null) => serde_json::Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(schema("meta")),
    };

    let mut seen = HashSet::new();
    let mut candidates = Vec::with_capacity(raw.len());
    let mut dups = Vec::new();
    for c in raw {
        if seen.insert(c.clone()) {
            candidates.push(c);
        } else {
            dups.push(c);
        }
    }
    if !seen.contains(&ground_truth) {
        return Err(IssueKind::TruthNotInCandidates);
    }
    Ok((
        CompletionPoint {
            id,
            prefix,
            candidates,
            ground_truth,
            baselines,
            meta,
        },
        dups,
    ))
}

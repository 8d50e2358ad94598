//! Labeled sample sets and their columnar text serialization.
//!
//! File layout (tab separated, UTF-8):
//!
//! ```text
//! # discds-samples v1
//! # dim=2
//! # <key>=<value>            (zero or more metadata lines, sorted by key)
//! x0  x1  label  soft_label  provenance  policy  neg_class  seed
//! <one row per sample>
//! ```
//!
//! Coordinates use the shortest representation that parses back to the same
//! `f64`, so writing and re-reading a set is bit-exact. Absent optional
//! fields are written as `-`; soft labels are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{check_dim, Error, Result};

const MAGIC: &str = "# discds-samples v1";
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Real,
    /// Stage-1 reference sample, with the generating policy name.
    Reference { policy: String },
    Synthetic {
        policy: String,
        neg_class: Option<usize>,
    },
}

impl Provenance {
    pub fn kind(&self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Reference { .. } => "reference",
            Provenance::Synthetic { .. } => "synthetic",
        }
    }

    pub fn policy(&self) -> Option<&str> {
        match self {
            Provenance::Real => None,
            Provenance::Reference { policy } | Provenance::Synthetic { policy, .. } => Some(policy),
        }
    }

    pub fn neg_class(&self) -> Option<usize> {
        match self {
            Provenance::Synthetic { neg_class, .. } => *neg_class,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub x: Vec<f64>,
    pub label: usize,
    pub soft_label: Option<Vec<f64>>,
    pub provenance: Provenance,
    /// Seed of the RNG substream that produced this row.
    pub seed: u64,
}

impl Row {
    pub fn new(x: Vec<f64>, label: usize, provenance: Provenance, seed: u64) -> Self {
        Self {
            x,
            label,
            soft_label: None,
            provenance,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSampleSet {
    dim: usize,
    rows: Vec<Row>,
    /// Free-form header metadata (config hash, stage, ...).
    pub meta: BTreeMap<String, String>,
}

impl LabeledSampleSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Row> {
        self.rows.iter()
    }

    pub fn push(&mut self, row: Row) -> Result<()> {
        check_dim(self.dim, row.x.len())?;
        if let Some(soft) = &row.soft_label {
            validate_soft_label(soft, row.label)?;
        }
        if let Some(policy) = row.provenance.policy() {
            if policy.is_empty() || policy.contains(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "policy name {policy:?} must be non-empty without whitespace"
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: LabeledSampleSet) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        self.rows.extend(other.rows);
        Ok(())
    }

    /// Rows with label `class`.
    pub fn class_rows(&self, class: usize) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.label == class)
    }

    pub fn class_points(&self, class: usize) -> Vec<Vec<f64>> {
        self.class_rows(class).map(|r| r.x.clone()).collect()
    }

    /// Per-class row counts for classes `0..classes`.
    pub fn counts(&self, classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0; classes];
        for r in &self.rows {
            *counts.get_mut(r.label).ok_or(Error::UnknownClass {
                class: r.label,
                classes,
            })? += 1;
        }
        Ok(counts)
    }

    pub fn max_label(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.label).max()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "# dim={}", self.dim);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let mut header: Vec<String> = (0..self.dim).map(|d| format!("x{d}")).collect();
        header.extend(
            ["label", "soft_label", "provenance", "policy", "neg_class", "seed"].map(String::from),
        );
        out.push_str(&header.join("\t"));
        out.push('\n');
        for r in &self.rows {
            for v in &r.x {
                let _ = write!(out, "{v:?}\t");
            }
            let soft = match &r.soft_label {
                None => "-".to_string(),
                Some(s) => s
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
            };
            let neg = r
                .provenance
                .neg_class()
                .map_or_else(|| "-".to_string(), |c| c.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.label,
                soft,
                r.provenance.kind(),
                r.provenance.policy().unwrap_or("-"),
                neg,
                r.seed
            );
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses the columnar format; `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("missing `{MAGIC}` header"))),
        }
        let mut dim = None;
        let mut meta = BTreeMap::new();
        let mut header_seen = false;
        let mut set = LabeledSampleSet::default();
        for (no, line) in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                if header_seen {
                    return Err(err(no, "metadata after column header".into()));
                }
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| err(no, format!("malformed metadata line {line:?}")))?;
                if k == "dim" {
                    dim = Some(
                        v.parse::<usize>()
                            .map_err(|e| err(no, format!("bad dim {v:?}: {e}")))?,
                    );
                } else {
                    meta.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let dim = dim.ok_or_else(|| err(no, "missing `# dim=` line".into()))?;
            if !header_seen {
                let cols = line.split('\t').count();
                if cols != dim + 6 || !line.starts_with(if dim > 0 { "x0" } else { "label" }) {
                    return Err(err(no, format!("bad column header {line:?}")));
                }
                header_seen = true;
                set = LabeledSampleSet::new(dim);
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != dim + 6 {
                return Err(err(
                    no,
                    format!("expected {} fields, found {}", dim + 6, fields.len()),
                ));
            }
            let mut x = Vec::with_capacity(dim);
            for f in &fields[..dim] {
                x.push(
                    f.parse::<f64>()
                        .map_err(|e| err(no, format!("bad coordinate {f:?}: {e}")))?,
                );
            }
            let rest = &fields[dim..];
            let label = rest[0]
                .parse::<usize>()
                .map_err(|e| err(no, format!("bad label {:?}: {e}", rest[0])))?;
            let soft_label = match rest[1] {
                "-" => None,
                s => Some(
                    s.split(',')
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(no, format!("bad soft label {s:?}: {e}")))?,
                ),
            };
            let policy = rest[3];
            let neg_class = match rest[4] {
                "-" => None,
                s => Some(
                    s.parse::<usize>()
                        .map_err(|e| err(no, format!("bad neg_class {s:?}: {e}")))?,
                ),
            };
            let provenance = match (rest[2], policy) {
                ("real", "-") if neg_class.is_none() => Provenance::Real,
                ("reference", p) if p != "-" && neg_class.is_none() => Provenance::Reference {
                    policy: p.to_string(),
                },
                ("synthetic", p) if p != "-" => Provenance::Synthetic {
                    policy: p.to_string(),
                    neg_class,
                },
                (k, p) => {
                    return Err(err(
                        no,
                        format!("inconsistent provenance {k:?} with policy {p:?}"),
                    ))
                }
            };
            let seed = rest[5]
                .parse::<u64>()
                .map_err(|e| err(no, format!("bad seed {:?}: {e}", rest[5])))?;
            let row = Row {
                x,
                label,
                soft_label,
                provenance,
                seed,
            };
            set.push(row).map_err(|e| err(no, e.to_string()))?;
        }
        if !header_seen {
            let dim = dim.ok_or_else(|| err(1, "missing `# dim=` line".into()))?;
            set = LabeledSampleSet::new(dim);
        }
        set.meta = meta;
        Ok(set)
    }
}

impl<'a> IntoIterator for &'a LabeledSampleSet {
    type Item = &'a Row;
    type IntoIter = std::slice::Iter<'a, Row>;

    fn into_iter(self) -> Self::IntoIter {
        self.rows.iter()
    }
}

fn validate_soft_label(soft: &[f64], label: usize) -> Result<()> {
    if label >= soft.len() {
        return Err(Error::Data(format!(
            "label {label} outside soft label of length {}",
            soft.len()
        )));
    }
    if soft.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Data("soft label has negative or NaN entries".into()));
    }
    let sum: f64 = soft.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Data(format!("soft label sums to {sum}, not 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> LabeledSampleSet {
        let mut s = LabeledSampleSet::new(2);
        s.meta.insert("config_hash".into(), "abc123".into());
        s.push(Row::new(vec![0.1, -2.5e-300], 0, Provenance::Real, 7))
            .unwrap();
        s.push(Row::new(
            vec![1.0 / 3.0, 1e17],
            2,
            Provenance::Synthetic {
                policy: "disc_ds".into(),
                neg_class: Some(1),
            },
            u64::MAX,
        ))
        .unwrap();
        let mut soft = Row::new(
            vec![-0.0, 4.0],
            1,
            Provenance::Reference {
                policy: "cads".into(),
            },
            3,
        );
        soft.soft_label = Some(vec![0.25, 0.75, 0.0]);
        s.push(soft).unwrap();
        s
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = sample_set();
        let text = s.to_text();
        let back = LabeledSampleSet::parse(&text, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
        assert!(back.rows()[0].x[1].to_bits() == (-2.5e-300f64).to_bits());
        assert!(back.rows()[2].x[0].is_sign_negative());
    }

    #[test]
    fn empty_set_round_trips() {
        let s = LabeledSampleSet::new(3);
        let back = LabeledSampleSet::parse(&s.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let mut text = sample_set().to_text();
        text.push_str("1.0\tnot-a-number\t0\t-\treal\t-\t-\t1\n");
        match LabeledSampleSet::parse(&text, Path::new("bad.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_field_count_and_bad_provenance() {
        let base = LabeledSampleSet::new(1).to_text();
        let short = format!("{base}1.0\t0\n");
        assert!(matches!(
            LabeledSampleSet::parse(&short, Path::new("m")),
            Err(Error::Parse { line: 4, .. })
        ));
        let bad = format!("{base}1.0\t0\t-\treal\tcfg\t-\t1\n");
        assert!(LabeledSampleSet::parse(&bad, Path::new("m")).is_err());
        assert!(LabeledSampleSet::parse("garbage", Path::new("m")).is_err());
    }

    #[test]
    fn soft_labels_must_lie_on_simplex() {
        let mut s = LabeledSampleSet::new(1);
        let mut r = Row::new(vec![0.0], 0, Provenance::Real, 0);
        r.soft_label = Some(vec![0.6, 0.6]);
        assert!(s.push(r.clone()).is_err());
        r.soft_label = Some(vec![0.5, 0.5]);
        assert!(s.push(r).is_ok());
    }

    #[test]
    fn counts_and_dimension_checks() {
        let s = sample_set();
        assert_eq!(s.counts(3).unwrap(), vec![1, 1, 1]);
        assert!(s.counts(2).is_err());
        let mut t = LabeledSampleSet::new(3);
        assert!(t
            .push(Row::new(vec![0.0], 0, Provenance::Real, 0))
            .is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_rows_round_trip(
            xs in proptest::collection::vec(proptest::collection::vec(any::<f64>(), 3), 0..20),
            seed in any::<u64>(),
        ) {
            let mut s = LabeledSampleSet::new(3);
            for (i, x) in xs.into_iter().enumerate() {
                let prov = if i % 2 == 0 {
                    Provenance::Real
                } else {
                    Provenance::Synthetic { policy: "p".into(), neg_class: Some(i % 3) }
                };
                s.push(Row::new(x, i % 4, prov, seed ^ i as u64)).unwrap();
            }
            let text = s.to_text();
            let back = LabeledSampleSet::parse(&text, Path::new("p")).unwrap();
            prop_assert_eq!(back.to_text(), text);
            for (a, b) in back.rows().iter().zip(s.rows()) {
                for (u, v) in a.x.iter().zip(&b.x) {
                    prop_assert_eq!(u.to_bits(), v.to_bits());
                }
            }
        }
    }
}

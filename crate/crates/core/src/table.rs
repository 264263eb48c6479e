//! Tables, columns, label spaces, and corpus splits.
//!
//! Corpora live on disk as CSV tables plus a line-oriented manifest. Each
//! manifest line is a set of tab-separated `key=value` fields:
//!
//! ```text
//! # comment
//! label=City
//! label=Country Code
//! split=train	table=tables/t00000.csv	column=0	label=City
//! ```
//!
//! `label=` lines declare the label space in order. When none are present
//! the space is the sorted union of record labels. Record fields always
//! appear in the order `split`, `table`, `column`, `label`; `table` is a path
//! relative to the manifest's directory and doubles as the table id.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{write_atomic, Error, Result};

/// Where a column came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnSource {
    pub table: String,
    pub column: usize,
}

impl fmt::Display for ColumnSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.table, self.column)
    }
}

impl ColumnSource {
    pub fn new(table: impl Into<String>, column: usize) -> Self {
        Self {
            table: table.into(),
            column,
        }
    }
}

/// An ordered list of cell values. Numeric cells keep their textual form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub values: Vec<String>,
    pub source: ColumnSource,
}

impl Column {
    pub fn new(values: Vec<String>, source: ColumnSource) -> Self {
        Self { values, source }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub id: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }
}

/// Parses CSV text whose first row is a header. The header is discarded.
pub fn parse_table(csv_text: &str, id: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(csv_text.as_bytes());
    let header_width = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .len();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header_width];
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != header_width {
            return Err(Error::RaggedRows {
                row: row + 1,
                expected: header_width,
                found: record.len(),
            });
        }
        for (column, field) in columns.iter_mut().zip(record.iter()) {
            column.push(field.to_string());
        }
        rows += 1;
    }
    if rows == 0 || header_width == 0 {
        return Err(Error::EmptyTable);
    }
    let columns = columns
        .into_iter()
        .enumerate()
        .map(|(i, values)| Column::new(values, ColumnSource::new(id, i)))
        .collect();
    Ok(Table {
        id: id.to_string(),
        columns,
    })
}

/// Renders a table as CSV with a synthetic `c0,c1,...` header.
pub fn table_to_csv(table: &Table) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..table.columns.len()).map(|i| format!("c{i}")).collect();
    writer
        .write_record(&header)
        .map_err(|e| Error::Csv(e.to_string()))?;
    for row in 0..table.row_count() {
        writer
            .write_record(table.columns.iter().map(|c| c.values[row].as_str()))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

/// Trim + case-fold form used for label comparisons.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Ordered set of distinct labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidSpec("label space is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(Error::InvalidSpec("empty label".into()));
            }
            if !seen.insert(canonical_label(label)) {
                return Err(Error::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledColumn {
    pub column: Column,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<LabeledColumn>,
    pub validation: Vec<LabeledColumn>,
    pub test: Vec<LabeledColumn>,
    pub label_space: LabelSpace,
}

impl CorpusSplit {
    pub fn split(&self, split: Split) -> &[LabeledColumn] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every column is non-empty and carries a label from the space.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            for lc in self.split(split) {
                if lc.column.is_empty() {
                    return Err(Error::EmptyColumn(lc.column.source.to_string()));
                }
                if !self.label_space.contains(&lc.label) {
                    return Err(Error::UnknownLabel(lc.label.clone()));
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest and one CSV file per table id under `dir`.
    ///
    /// Columns that share a table id must have indices `0..n` and equal
    /// lengths so the table can be reassembled.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let mut tables: BTreeMap<&str, BTreeMap<usize, &Column>> = BTreeMap::new();
        for split in Split::ALL {
            for lc in self.split(split) {
                let src = &lc.column.source;
                check_relative(&src.table)?;
                tables
                    .entry(src.table.as_str())
                    .or_default()
                    .insert(src.column, &lc.column);
            }
        }
        for (id, columns) in &tables {
            let ordered: Vec<Column> = columns.values().map(|c| (*c).clone()).collect();
            if columns.keys().copied().ne(0..columns.len()) {
                return Err(Error::Csv(format!("table {id}: column indices are not contiguous")));
            }
            if ordered.iter().any(|c| c.len() != ordered[0].len()) {
                return Err(Error::Csv(format!("table {id}: columns differ in length")));
            }
            let table = Table {
                id: id.to_string(),
                columns: ordered,
            };
            write_atomic(&dir.join(id), table_to_csv(&table)?.as_bytes())?;
        }
        write_atomic(&dir.join(MANIFEST_NAME), self.manifest_text().as_bytes())
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from("# ctalab manifest v1\n");
        for label in self.label_space.labels() {
            out.push_str(&format!("label={label}\n"));
        }
        for split in Split::ALL {
            for lc in self.split(split) {
                out.push_str(&format!(
                    "split={}\ttable={}\tcolumn={}\tlabel={}\n",
                    split.as_str(),
                    lc.column.source.table,
                    lc.column.source.column,
                    lc.label
                ));
            }
        }
        out
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

fn check_relative(id: &str) -> Result<()> {
    let path = Path::new(id);
    let ok = !id.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(Error::Csv(format!("table id `{id}` is not a safe relative path")))
    }
}

struct ManifestRecord {
    line: usize,
    split: Split,
    table: String,
    column: usize,
    label: String,
}

/// Loads a corpus from a manifest file.
pub fn load_labeled_corpus(manifest_path: &Path) -> Result<CorpusSplit> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bad = |line: usize, message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        line,
        message,
    };

    let mut declared = Vec::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<(&str, &str)> = trimmed
            .split('\t')
            .map(|f| f.split_once('=').ok_or_else(|| bad(line, format!("field `{f}` lacks `=`"))))
            .collect::<Result<_>>()?;
        match fields.as_slice() {
            [("label", label)] => declared.push(label.to_string()),
            [("split", split), ("table", table), ("column", column), ("label", label)] => {
                let split = Split::parse(split).ok_or_else(|| bad(line, format!("unknown split `{split}`")))?;
                let column = column
                    .parse()
                    .map_err(|_| bad(line, format!("bad column index `{column}`")))?;
                records.push(ManifestRecord {
                    line,
                    split,
                    table: table.to_string(),
                    column,
                    label: label.to_string(),
                });
            }
            _ => return Err(bad(line, "expected `label=` or `split= table= column= label=`".into())),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyTable);
    }

    let label_space = if declared.is_empty() {
        let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
        labels.sort();
        labels.dedup();
        LabelSpace::new(labels)?
    } else {
        LabelSpace::new(declared)?
    };

    let mut cache: BTreeMap<String, Table> = BTreeMap::new();
    let mut corpus = CorpusSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        label_space,
    };
    for rec in records {
        if !corpus.label_space.contains(&rec.label) {
            return Err(Error::UnknownLabel(rec.label));
        }
        if !cache.contains_key(&rec.table) {
            let path = base.join(&rec.table);
            let csv_text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            cache.insert(rec.table.clone(), parse_table(&csv_text, &rec.table)?);
        }
        let table = &cache[&rec.table];
        let column = table
            .columns
            .get(rec.column)
            .ok_or_else(|| bad(rec.line, format!("table {} has no column {}", rec.table, rec.column)))?;
        let values: Vec<String> = column.values.iter().filter(|v| !v.is_empty()).cloned().collect();
        if values.is_empty() {
            return Err(Error::EmptyColumn(column.source.to_string()));
        }
        let lc = LabeledColumn {
            column: Column::new(values, column.source.clone()),
            label: rec.label,
        };
        match rec.split {
            Split::Train => corpus.train.push(lc),
            Split::Validation => corpus.validation.push(lc),
            Split::Test => corpus.test.push(lc),
        }
    }
    Ok(corpus)
}

/// Gold-label counts of a split.
pub fn label_distribution(split: &[LabeledColumn]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for lc in split {
        *counts.entry(lc.label.clone()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_running_example() {
        let t = parse_table("h1,h2\nLondon,GB\nBoston,US", "t").unwrap();
        assert_eq!(t.columns.len(), 2);
        assert_eq!(t.columns[0].values, vec!["London", "Boston"]);
        assert_eq!(t.columns[1].values, vec!["GB", "US"]);
        assert_eq!(t.columns[1].source, ColumnSource::new("t", 1));
    }

    #[test]
    fn minimal_and_degenerate_tables() {
        let t = parse_table("h1\nx", "t").unwrap();
        assert_eq!(t.columns.len(), 1);
        assert_eq!(t.columns[0].values, vec!["x"]);
        assert!(matches!(parse_table("h1,h2\na", "t"), Err(Error::RaggedRows { .. })));
        assert!(matches!(parse_table("h1,h2\n", "t"), Err(Error::EmptyTable)));
        assert!(matches!(parse_table("", "t"), Err(Error::EmptyTable)));
    }

    #[test]
    fn quoted_cells_and_numbers_stay_text() {
        let t = parse_table("a,b\n\"Rio, Brazil\",007\n\"say \"\"hi\"\"\",1.50", "t").unwrap();
        assert_eq!(t.columns[0].values, vec!["Rio, Brazil", "say \"hi\""]);
        assert_eq!(t.columns[1].values, vec!["007", "1.50"]);
    }

    #[test]
    fn label_space_rejects_canonical_duplicates() {
        assert!(LabelSpace::new(["Date", " date "]).is_err());
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
        let space = LabelSpace::new(["B", "A"]).unwrap();
        assert_eq!(space.labels(), &["B", "A"]);
    }

    fn lc(label: &str) -> LabeledColumn {
        LabeledColumn {
            column: Column::new(vec!["v".into()], ColumnSource::new("t", 0)),
            label: label.into(),
        }
    }

    #[test]
    fn distribution_counts() {
        let d = label_distribution(&[lc("A"), lc("A"), lc("B")]);
        assert_eq!(d, BTreeMap::from([("A".to_string(), 2), ("B".to_string(), 1)]));
        assert!(label_distribution(&[]).is_empty());
        let all_a: Vec<_> = (0..100).map(|_| lc("A")).collect();
        assert_eq!(label_distribution(&all_a)["A"], 100);
    }

    fn write(dir: &Path, name: &str, text: &str) {
        let path = dir.join(name);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn loads_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "t1.csv", "x,y\na,1\nb,2\n");
        write(dir.path(), "t2.csv", "x\nq\n");
        write(
            dir.path(),
            "manifest.txt",
            "label=A\nlabel=B\n\
             split=train\ttable=t1.csv\tcolumn=0\tlabel=A\n\
             split=train\ttable=t1.csv\tcolumn=1\tlabel=B\n\
             split=train\ttable=t2.csv\tcolumn=0\tlabel=A\n\
             split=test\ttable=t2.csv\tcolumn=0\tlabel=B\n",
        );
        let corpus = load_labeled_corpus(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(corpus.train.len(), 3);
        assert_eq!(corpus.test.len(), 1);
        assert_eq!(corpus.label_space.len(), 2);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "t.csv", "x\na\n");
        write(
            dir.path(),
            "bad_label.txt",
            "label=A\nsplit=train\ttable=t.csv\tcolumn=0\tlabel=B\n",
        );
        assert!(matches!(
            load_labeled_corpus(&dir.path().join("bad_label.txt")),
            Err(Error::UnknownLabel(l)) if l == "B"
        ));
        write(dir.path(), "empty.txt", "# nothing\n");
        assert!(matches!(
            load_labeled_corpus(&dir.path().join("empty.txt")),
            Err(Error::EmptyTable)
        ));
        write(
            dir.path(),
            "missing.txt",
            "split=train\ttable=nope.csv\tcolumn=0\tlabel=A\n",
        );
        assert!(matches!(
            load_labeled_corpus(&dir.path().join("missing.txt")),
            Err(Error::MissingFile(_))
        ));
        assert!(matches!(
            load_labeled_corpus(&dir.path().join("absent.txt")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn empty_cells_dropped_and_empty_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "t.csv", "x,y\na,\n,\nb,\n");
        write(dir.path(), "ok.txt", "split=train\ttable=t.csv\tcolumn=0\tlabel=A\n");
        let corpus = load_labeled_corpus(&dir.path().join("ok.txt")).unwrap();
        assert_eq!(corpus.train[0].column.values, vec!["a", "b"]);
        write(dir.path(), "bad.txt", "split=train\ttable=t.csv\tcolumn=1\tlabel=A\n");
        assert!(matches!(
            load_labeled_corpus(&dir.path().join("bad.txt")),
            Err(Error::EmptyColumn(_))
        ));
    }

    #[test]
    fn inferred_label_space_is_sorted_union() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "t.csv", "x,y\na,b\n");
        write(
            dir.path(),
            "m.txt",
            "split=train\ttable=t.csv\tcolumn=0\tlabel=Zed\nsplit=test\ttable=t.csv\tcolumn=1\tlabel=Alpha\n",
        );
        let corpus = load_labeled_corpus(&dir.path().join("m.txt")).unwrap();
        assert_eq!(corpus.label_space.labels(), &["Alpha", "Zed"]);
    }

    fn arb_corpus() -> impl Strategy<Value = CorpusSplit> {
        let value = "[a-zA-Z0-9 ,\"'.-]{1,12}";
        let column = (prop::collection::vec(value, 1..6), 0usize..3, 0usize..3);
        prop::collection::vec(column, 1..12).prop_map(|cols| {
            let labels = ["City", "Date", "Status Type"];
            let mut corpus = CorpusSplit {
                train: vec![],
                validation: vec![],
                test: vec![],
                label_space: LabelSpace::new(labels).unwrap(),
            };
            for (i, (values, label, split)) in cols.into_iter().enumerate() {
                let lc = LabeledColumn {
                    column: Column::new(values, ColumnSource::new(format!("tables/t{i:03}.csv"), 0)),
                    label: labels[label].to_string(),
                };
                match split {
                    0 => corpus.train.push(lc),
                    1 => corpus.validation.push(lc),
                    _ => corpus.test.push(lc),
                }
            }
            corpus
        })
    }

    proptest! {
        #[test]
        fn parsed_tables_are_rectangular(rows in prop::collection::vec(
            prop::collection::vec("[a-z0-9\" ,]{0,5}", 1..4), 1..6)) {
            let mut text = String::new();
            for row in &rows {
                let quoted: Vec<String> = row.iter().map(|c| format!("\"{}\"", c.replace('"', "\"\""))).collect();
                text.push_str(&quoted.join(","));
                text.push('\n');
            }
            match parse_table(&text, "t") {
                Ok(t) => {
                    let n = t.row_count();
                    prop_assert!(n >= 1);
                    prop_assert!(t.columns.iter().all(|c| c.len() == n));
                }
                Err(Error::RaggedRows { .. }) | Err(Error::EmptyTable) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn distribution_sums_to_len(labels in prop::collection::vec("[A-C]", 0..50)) {
            let split: Vec<_> = labels.iter().map(|l| lc(l)).collect();
            prop_assert_eq!(label_distribution(&split).values().sum::<usize>(), split.len());
        }

        #[test]
        fn manifest_round_trip(corpus in arb_corpus()) {
            let dir = tempfile::tempdir().unwrap();
            corpus.write_to_dir(dir.path()).unwrap();
            let back = load_labeled_corpus(&dir.path().join(MANIFEST_NAME)).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }
}

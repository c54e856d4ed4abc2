//! Tabular datasets with a designated target and sensitive attribute.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{median, rng_for};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited file: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("column {column:?} holds non-numeric value {value:?} but the task needs real values")]
    NonNumeric { column: String, value: String },
    #[error("no rows left after dropping missing labels")]
    Empty,
    #[error("{column} has {classes} distinct class(es); at least 2 required")]
    DegenerateLabels { column: String, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[serde(alias = "clf")]
    Classification,
    #[serde(alias = "reg")]
    Regression,
}

impl FromStr for TaskKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clf" | "classification" => Ok(TaskKind::Classification),
            "reg" | "regression" => Ok(TaskKind::Regression),
            other => Err(DataError::InvalidArgument(format!(
                "unknown task kind {other:?} (expected clf or reg)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification => f.write_str("clf"),
            TaskKind::Regression => f.write_str("reg"),
        }
    }
}

/// Feature matrix plus target and sensitive labels.
///
/// Classification targets and the sensitive attribute are stored as integer
/// class codes `0..n_classes`. Regression targets are raw reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    matrix: Array2<f64>,
    feature_names: Vec<String>,
    target: Vec<f64>,
    sensitive: Vec<usize>,
    task_kind: TaskKind,
    dataset_id: String,
}

impl Dataset {
    pub fn new(
        matrix: Array2<f64>,
        feature_names: Vec<String>,
        target: Vec<f64>,
        sensitive: Vec<usize>,
        task_kind: TaskKind,
        dataset_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let rows = matrix.nrows();
        if target.len() != rows || sensitive.len() != rows {
            return Err(DataError::Shape(format!(
                "{rows} matrix rows but {} targets and {} sensitive labels",
                target.len(),
                sensitive.len()
            )));
        }
        if feature_names.len() != matrix.ncols() {
            return Err(DataError::Shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                matrix.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
        }
        if task_kind == TaskKind::Classification {
            if target.iter().any(|t| t.fract() != 0.0 || *t < 0.0) {
                return Err(DataError::Shape(
                    "classification targets must be non-negative integer codes".into(),
                ));
            }
            let classes = count_distinct(target.iter().map(|&t| t as usize));
            if rows > 0 && classes < 2 {
                return Err(DataError::DegenerateLabels {
                    column: "target".into(),
                    classes,
                });
            }
        }
        Ok(Self {
            matrix,
            feature_names,
            target,
            sensitive,
            task_kind,
            dataset_id: dataset_id.into(),
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Target as class codes. Only meaningful for classification.
    pub fn target_classes(&self) -> Vec<usize> {
        self.target.iter().map(|&t| t as usize).collect()
    }

    pub fn sensitive(&self) -> &[usize] {
        &self.sensitive
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.ncols()
    }

    /// Same labels, different features.
    pub fn with_features(
        &self,
        matrix: Array2<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        Self::new(
            matrix,
            feature_names,
            self.target.clone(),
            self.sensitive.clone(),
            self.task_kind,
            self.dataset_id.clone(),
        )
    }

    /// Rows in the given order. Indices must be in range.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            matrix: self.matrix.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            target: rows.iter().map(|&r| self.target[r]).collect(),
            sensitive: rows.iter().map(|&r| self.sensitive[r]).collect(),
            task_kind: self.task_kind,
            dataset_id: self.dataset_id.clone(),
        }
    }
}

fn count_distinct(it: impl Iterator<Item = usize>) -> usize {
    it.collect::<HashSet<_>>().len()
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty()
        || c == "?"
        || c.eq_ignore_ascii_case("na")
        || c.eq_ignore_ascii_case("nan")
        || c.eq_ignore_ascii_case("null")
}

/// Maps distinct strings to codes. Numeric-looking labels are ordered by
/// value, anything else lexicographically, so codes are stable per load.
fn encode_labels<'a>(cells: impl Iterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let distinct: Vec<&str> = cells
        .collect::<HashSet<_>>()
        .into_iter()
        .collect::<Vec<_>>();
    let mut sorted = distinct;
    let numeric = sorted.iter().all(|s| s.parse::<f64>().is_ok());
    if numeric {
        sorted.sort_by(|a, b| {
            let x: f64 = a.parse().unwrap();
            let y: f64 = b.parse().unwrap();
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    } else {
        sorted.sort_unstable();
    }
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i))
        .collect()
}

/// Loads a delimited text file with a header row.
///
/// Rows missing the target or sensitive value are dropped. Non-numeric
/// feature columns are label-encoded; missing feature cells take the column
/// median of the remaining rows.
pub fn load_dataset(
    path: impl AsRef<Path>,
    target_col: &str,
    sensitive_col: &str,
    task_kind: TaskKind,
    opts: &LoadOptions,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let target_idx = find(target_col)?;
    let sensitive_idx = find(sensitive_col)?;
    if target_idx == sensitive_idx {
        return Err(DataError::InvalidArgument(
            "target and sensitive column must differ".into(),
        ));
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let cells: Vec<String> = record.iter().map(str::to_string).collect();
        if is_missing(&cells[target_idx]) || is_missing(&cells[sensitive_idx]) {
            continue;
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }

    let target: Vec<f64> = match task_kind {
        TaskKind::Classification => {
            let codes = encode_labels(rows.iter().map(|r| r[target_idx].as_str()));
            rows.iter()
                .map(|r| codes[r[target_idx].as_str()] as f64)
                .collect()
        }
        TaskKind::Regression => rows
            .iter()
            .map(|r| {
                r[target_idx]
                    .parse::<f64>()
                    .map_err(|_| DataError::NonNumeric {
                        column: target_col.to_string(),
                        value: r[target_idx].clone(),
                    })
            })
            .collect::<Result<_, _>>()?,
    };
    let sensitive_codes = encode_labels(rows.iter().map(|r| r[sensitive_idx].as_str()));
    let sensitive: Vec<usize> = rows
        .iter()
        .map(|r| sensitive_codes[r[sensitive_idx].as_str()])
        .collect();

    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != target_idx && c != sensitive_idx)
        .collect();
    let mut matrix = Array2::<f64>::zeros((rows.len(), feature_cols.len()));
    for (j, &c) in feature_cols.iter().enumerate() {
        let present = || rows.iter().map(|r| r[c].as_str()).filter(|s| !is_missing(s));
        let numeric = present().all(|s| s.parse::<f64>().map(f64::is_finite).unwrap_or(false));
        let values: Vec<Option<f64>> = if numeric {
            rows.iter()
                .map(|r| (!is_missing(&r[c])).then(|| r[c].parse().unwrap()))
                .collect()
        } else {
            let codes = encode_labels(present());
            rows.iter()
                .map(|r| (!is_missing(&r[c])).then(|| codes[r[c].as_str()] as f64))
                .collect()
        };
        let observed: Vec<f64> = values.iter().flatten().copied().collect();
        let fill = median(&observed).unwrap_or(0.0);
        for (i, v) in values.iter().enumerate() {
            matrix[[i, j]] = v.unwrap_or(fill);
        }
    }
    let names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(matrix, names, target, sensitive, task_kind, id)
}

/// A disjoint train/test partition of one dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub seed: u64,
}

/// Row indices for a seeded train/test split. Classification targets are
/// stratified when every class has at least two members.
pub fn split_indices(
    d: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    match d.task_kind() {
        TaskKind::Classification => {
            stratified_indices(Some(&d.target_classes()), d.n_rows(), test_fraction, seed)
        }
        TaskKind::Regression => stratified_indices(None, d.n_rows(), test_fraction, seed),
    }
}

/// Seeded split of `0..n`, stratified on `classes` when given and every
/// class has at least two members. Both index lists come back sorted.
pub fn stratified_indices(
    classes: Option<&[usize]>,
    n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(DataError::InvalidArgument(format!(
            "test fraction {test_fraction} on {n} rows leaves an empty part"
        )));
    }
    let mut rng = rng_for(seed, 0x5911);

    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if let Some(classes) = classes {
        for (i, &c) in classes.iter().enumerate() {
            strata.entry(c).or_default().push(i);
        }
    }
    let stratify = !strata.is_empty() && strata.values().all(|m| m.len() >= 2);
    if classes.is_some() && !stratify {
        log::warn!("a class has fewer than 2 rows; splitting without stratification");
    }

    let mut test = Vec::with_capacity(n_test);
    let mut train = Vec::with_capacity(n - n_test);
    if stratify {
        // Largest-remainder allocation of the test quota across classes.
        let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
        let quotas: Vec<f64> = sizes
            .iter()
            .map(|&m| m as f64 * n_test as f64 / n as f64)
            .collect();
        let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = n_test - alloc.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        while left > 0 {
            let before = left;
            for &k in &order {
                if left > 0 && alloc[k] + 1 < sizes[k] {
                    alloc[k] += 1;
                    left -= 1;
                }
            }
            if left == before {
                break;
            }
        }
        for (k, members) in strata.values().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            test.extend_from_slice(&members[..alloc[k]]);
            train.extend_from_slice(&members[alloc[k]..]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..n_test]);
        train.extend_from_slice(&all[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(d: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitPair, DataError> {
    let (train_rows, test_rows) = split_indices(d, test_fraction, seed)?;
    Ok(SplitPair {
        train: d.select_rows(&train_rows),
        test: d.select_rows(&test_rows),
        train_rows,
        test_rows,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn toy(n: usize, classes: &[usize]) -> Dataset {
        let matrix = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let target: Vec<f64> = (0..n).map(|i| classes[i % classes.len()] as f64).collect();
        Dataset::new(
            matrix,
            vec!["a".into(), "b".into()],
            target,
            vec![0; n],
            TaskKind::Classification,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn identity_load() {
        let f = write_tmp("x,y,t,s\n1.5,2,0,a\n3,4.25,1,b\n");
        let d = load_dataset(f.path(), "t", "s", TaskKind::Classification, &Default::default())
            .unwrap();
        assert_eq!(d.matrix(), &array![[1.5, 2.0], [3.0, 4.25]]);
        assert_eq!(d.feature_names(), &["x".to_string(), "y".to_string()]);
        assert_eq!(d.target(), &[0.0, 1.0]);
        assert_eq!(d.sensitive(), &[0, 1]);
    }

    #[test]
    fn median_imputation() {
        let f = write_tmp("x,t,s\n1,0,a\n3,1,b\n,1,a\n");
        let d = load_dataset(f.path(), "t", "s", TaskKind::Classification, &Default::default())
            .unwrap();
        assert_eq!(d.matrix()[[2, 0]], 2.0);
    }

    #[test]
    fn missing_labels_drop_rows_and_categoricals_encode() {
        let f = write_tmp("c,t,s\nred,0,a\nblue,,a\nred,1,?\ngreen,1,b\nblue,0,b\n");
        let d = load_dataset(f.path(), "t", "s", TaskKind::Classification, &Default::default())
            .unwrap();
        assert_eq!(d.n_rows(), 3);
        // blue < green < red
        assert_eq!(d.matrix().column(0).to_vec(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn schema_and_io_errors() {
        let f = write_tmp("x,t,s\n1,0,a\n");
        let err = load_dataset(f.path(), "nope", "s", TaskKind::Classification, &Default::default());
        assert!(matches!(err, Err(DataError::MissingColumn(c)) if c == "nope"));
        let err = load_dataset("/no/such/file.csv", "t", "s", TaskKind::Regression, &Default::default());
        assert!(matches!(err, Err(DataError::Io { .. })));
        let f = write_tmp("x,t,s\n1,,a\n2,1,\n");
        let err = load_dataset(f.path(), "t", "s", TaskKind::Regression, &Default::default());
        assert!(matches!(err, Err(DataError::Empty)));
    }

    #[test]
    fn single_class_target_rejected() {
        let f = write_tmp("x,t,s\n1,0,a\n2,0,b\n");
        let err = load_dataset(f.path(), "t", "s", TaskKind::Classification, &Default::default());
        assert!(matches!(err, Err(DataError::DegenerateLabels { .. })));
    }

    #[test]
    fn custom_delimiter() {
        let f = write_tmp("x;t;s\n1;0;a\n2;1;b\n");
        let opts = LoadOptions { delimiter: b';' };
        let d = load_dataset(f.path(), "t", "s", TaskKind::Classification, &opts).unwrap();
        assert_eq!(d.n_features(), 1);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let d = toy(100, &[0, 1]);
        let a = split_dataset(&d, 0.2, 7).unwrap();
        let b = split_dataset(&d, 0.2, 7).unwrap();
        assert_eq!(a.train.n_rows(), 80);
        assert_eq!(a.test.n_rows(), 20);
        assert_eq!(a.test_rows, b.test_rows);
        assert_eq!(a.train_rows, b.train_rows);
        let mut all: Vec<usize> = a.train_rows.iter().chain(&a.test_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_split_counts() {
        let d = toy(10, &[0, 1]);
        let s = split_dataset(&d, 0.2, 3).unwrap();
        let mut counts = [0usize; 2];
        for c in s.test.target_classes() {
            counts[c] += 1;
        }
        assert_eq!(counts, [1, 1]);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let d = toy(2, &[0, 1]);
        assert!(matches!(split_dataset(&d, 0.999, 1), Err(DataError::InvalidArgument(_))));
        assert!(matches!(split_dataset(&d, 0.0, 1), Err(DataError::InvalidArgument(_))));
        assert!(matches!(split_dataset(&d, 1.5, 1), Err(DataError::InvalidArgument(_))));
    }
}

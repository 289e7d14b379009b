//! DARWIN handwriting features: loading, subject-level splits, z-scoring and
//! per-task views.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const TASKS: usize = 25;
pub const FEATURES_PER_TASK: usize = 18;
pub const FULL_DIM: usize = TASKS * FEATURES_PER_TASK;

pub const EXPECTED_SUBJECTS: usize = 174;
pub const EXPECTED_PATIENTS: usize = 89;

/// Per-task feature names, in the order used for every task block.
pub const FEATURE_NAMES: [&str; FEATURES_PER_TASK] = [
    "total_time",
    "air_time",
    "paper_time",
    "mean_speed_on_paper",
    "mean_speed_in_air",
    "mean_acc_on_paper",
    "mean_acc_in_air",
    "mean_jerk_on_paper",
    "mean_jerk_in_air",
    "gmrt_on_paper",
    "gmrt_in_air",
    "mean_gmrt",
    "num_of_pendown",
    "max_x_extension",
    "max_y_extension",
    "disp_index",
    "pressure_mean",
    "pressure_var",
];

/// Column name of feature `f` on task `t` (both zero-based).
pub fn column_name(t: usize, f: usize) -> String {
    format!("{}{}", FEATURE_NAMES[f], t + 1)
}

/// The 450 column names, task-major.
pub fn full_column_names() -> Vec<String> {
    (0..TASKS)
        .flat_map(|t| (0..FEATURES_PER_TASK).map(move |f| column_name(t, f)))
        .collect()
}

/// Splits `air_time12` into `(air_time index, task index 11)`.
fn parse_column(name: &str) -> Option<(usize, usize)> {
    let digits = name.len() - name.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let (feature, task) = name.split_at(name.len() - digits);
    let f = FEATURE_NAMES.iter().position(|&n| n == feature)?;
    let t: usize = task.parse().ok()?;
    (1..=TASKS).contains(&t).then(|| (f, t - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// 1 = patient, 0 = healthy.
    pub labels: Vec<u8>,
    pub subject_ids: Vec<String>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        subject_ids: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("dataset labels", features.rows(), labels.len()));
        }
        if subject_ids.len() != features.rows() {
            return Err(Error::shape("dataset subject ids", features.rows(), subject_ids.len()));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::shape(
                "dataset feature names",
                features.cols(),
                feature_names.len(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        Ok(Self {
            features,
            labels,
            subject_ids,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            subject_ids: rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    fn with_features(&self, features: Matrix) -> Dataset {
        Dataset {
            features,
            ..self.clone()
        }
    }

    fn require_full(&self) -> Result<()> {
        if self.dim() != FULL_DIM {
            return Err(Error::shape("task decomposition", FULL_DIM, self.dim()));
        }
        Ok(())
    }

    /// The 18 columns of task `t` (zero-based).
    pub fn task_view(&self, t: usize) -> Result<Dataset> {
        self.require_full()?;
        if t >= TASKS {
            return Err(Error::Argument(format!("task {t} out of range 0..{TASKS}")));
        }
        let (lo, hi) = (t * FEATURES_PER_TASK, (t + 1) * FEATURES_PER_TASK);
        Ok(Dataset {
            features: self.features.select_cols(lo, hi)?,
            labels: self.labels.clone(),
            subject_ids: self.subject_ids.clone(),
            feature_names: self.feature_names[lo..hi].to_vec(),
        })
    }
}

/// All 25 task views. Split before calling this so that a subject's tasks stay
/// on one side.
pub fn task_views(data: &Dataset) -> Result<Vec<Dataset>> {
    data.require_full()?;
    (0..TASKS).map(|t| data.task_view(t)).collect()
}

/// One row per (subject, task), subject-major, 18 columns. Labels and subject
/// ids are repeated for each task; ids get a `#t<k>` suffix.
pub fn stack_tasks(data: &Dataset) -> Result<Dataset> {
    data.require_full()?;
    let n = data.len();
    let mut values = Vec::with_capacity(n * FULL_DIM);
    let mut labels = Vec::with_capacity(n * TASKS);
    let mut ids = Vec::with_capacity(n * TASKS);
    for r in 0..n {
        let row = data.features.row(r);
        for t in 0..TASKS {
            values.extend_from_slice(&row[t * FEATURES_PER_TASK..(t + 1) * FEATURES_PER_TASK]);
            labels.push(data.labels[r]);
            ids.push(format!("{}#t{}", data.subject_ids[r], t + 1));
        }
    }
    Dataset::new(
        Matrix::new(n * TASKS, FEATURES_PER_TASK, values)?,
        labels,
        ids,
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

pub fn load_darwin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_darwin(file)
}

/// Parses a DARWIN-format CSV. Feature columns may come in any order; they
/// are rearranged task-major with [`FEATURE_NAMES`] order inside each task.
pub fn read_darwin<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |want: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(want));
    let id_col = find("id").ok_or_else(|| Error::MissingColumn("ID".into()))?;
    let class_col = find("class").ok_or_else(|| Error::MissingColumn("class".into()))?;

    // source column for each of the 450 target slots
    let mut source = vec![None; FULL_DIM];
    for (c, h) in headers.iter().enumerate() {
        if c == id_col || c == class_col {
            continue;
        }
        let (f, t) = parse_column(h).ok_or_else(|| Error::Data(format!("unknown column `{h}`")))?;
        let slot = t * FEATURES_PER_TASK + f;
        if source[slot].replace(c).is_some() {
            return Err(Error::Data(format!("duplicate column `{h}`")));
        }
    }
    if let Some(missing) = source.iter().position(Option::is_none) {
        return Err(Error::MissingColumn(column_name(
            missing / FEATURES_PER_TASK,
            missing % FEATURES_PER_TASK,
        )));
    }
    let source: Vec<usize> = source.into_iter().flatten().collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        for &c in &source {
            let cell = &rec[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("`{cell}` is not a number"),
            })?;
            values.push(v);
        }
        labels.push(match &rec[class_col] {
            "P" | "p" => 1,
            "H" | "h" => 0,
            other => {
                return Err(Error::Parse {
                    row,
                    column: headers[class_col].to_string(),
                    message: format!("unknown class `{other}`, expected P or H"),
                })
            }
        });
        ids.push(rec[id_col].to_string());
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let data = Dataset::new(Matrix::new(n, FULL_DIM, values)?, labels, ids, full_column_names())?;
    if n != EXPECTED_SUBJECTS || data.positives() != EXPECTED_PATIENTS {
        log::warn!(
            "expected {EXPECTED_SUBJECTS} subjects with {EXPECTED_PATIENTS} patients, found {n} with {}",
            data.positives()
        );
    }
    Ok(data)
}

/// Writes a dataset in the layout [`read_darwin`] accepts.
pub fn write_darwin(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["ID".to_string()];
    header.extend(data.feature_names.iter().cloned());
    header.push("class".into());
    w.write_record(&header)?;
    for r in 0..data.len() {
        let mut rec = vec![data.subject_ids[r].clone()];
        rec.extend(data.features.row(r).iter().map(|v| v.to_string()));
        rec.push(if data.labels[r] == 1 { "P" } else { "H" }.into());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Training share of `n`, rounded half up.
pub fn train_size(n: usize) -> usize {
    (0.75 * n as f64 + 0.5).floor() as usize
}

/// Seeded shuffle of `0..n`; the first [`train_size`] indices train.
pub fn split_subjects(n: usize, seed: u64) -> Result<Split> {
    if n < 4 {
        return Err(Error::Argument(format!("need at least 4 subjects to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::seed_from(seed).shuffle(&mut idx);
    let test = idx.split_off(train_size(n));
    Ok(Split { train: idx, test, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at `1e-8`.
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Data("cannot fit a standardizer on zero rows".into()));
        }
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((v, &a), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *v += (a - m) * (a - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("standardize", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Z-scores `apply_to` with statistics fitted on `train`.
pub fn standardize(train: &Matrix, apply_to: &Matrix) -> Result<Matrix> {
    Standardizer::fit(train)?.transform(apply_to)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// Applies `split` and z-scores both sides with the training statistics.
pub fn prepare(data: &Dataset, split: &Split) -> Result<TrainTest> {
    if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= data.len()) {
        return Err(Error::Argument(format!(
            "split index {bad} outside a dataset of {}",
            data.len()
        )));
    }
    let train = data.select(&split.train);
    let test = data.select(&split.test);
    let s = Standardizer::fit(&train.features)?;
    Ok(TrainTest {
        train: train.with_features(s.transform(&train.features)?),
        test: test.with_features(s.transform(&test.features)?),
    })
}

/// DARWIN-shaped random data: 450 named columns, `n_pos` patients first in
/// generation order, then shuffled. Patients get a shift on a subset of
/// features so that the classes are partly separable.
pub fn synthetic_darwin(n: usize, n_pos: usize, seed: u64) -> Result<Dataset> {
    if n_pos > n {
        return Err(Error::Argument(format!("{n_pos} patients out of {n} subjects")));
    }
    let mut rng = Rng::seed_from(seed);
    let shift: Vec<f64> = (0..FULL_DIM)
        .map(|_| {
            if rng.next_f64() < 0.2 {
                rng.uniform(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let scale: Vec<f64> = (0..FULL_DIM).map(|_| rng.uniform(0.5, 200.0)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut values = vec![0.0; n * FULL_DIM];
    let mut labels = vec![0; n];
    for (k, &r) in order.iter().enumerate() {
        let y = u8::from(k < n_pos);
        labels[r] = y;
        for c in 0..FULL_DIM {
            values[r * FULL_DIM + c] = scale[c] * (rng.normal() + f64::from(y) * shift[c] + 3.0);
        }
    }
    Dataset::new(
        Matrix::new(n, FULL_DIM, values)?,
        labels,
        (1..=n).map(|i| format!("id_{i}")).collect(),
        full_column_names(),
    )
}

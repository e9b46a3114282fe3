//! Censored time-to-event data with a typed covariate schema.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Boolean,
    /// Integer-coded ordered categories.
    Ordinal,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub covariates: Vec<Covariate>,
    pub time_column: String,
    pub event_column: String,
    #[serde(default)]
    pub time_unit: String,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Schema("schema has no covariates".into()));
        }
        if self.time_column.is_empty() || self.event_column.is_empty() {
            return Err(Error::Schema("time and event columns must be named".into()));
        }
        if self.time_column == self.event_column {
            return Err(Error::Schema("time and event columns must differ".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if c.name.is_empty() {
                return Err(Error::Schema("empty covariate name".into()));
            }
            if c.name == self.time_column || c.name == self.event_column {
                return Err(Error::Schema(format!(
                    "covariate `{}` collides with the time/event column",
                    c.name
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.covariates.iter().map(|c| c.name.as_str())
    }
}

/// Immutable survival dataset. Rows are patients, columns follow the schema
/// covariate order.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    schema: FeatureSchema,
    rows: Array2<f64>,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl SurvivalDataset {
    pub fn new(
        schema: FeatureSchema,
        rows: Array2<f64>,
        times: Vec<f64>,
        events: Vec<bool>,
    ) -> Result<Self> {
        schema.validate()?;
        let n = rows.nrows();
        if rows.ncols() != schema.len() {
            return Err(Error::Dimension {
                expected: schema.len(),
                got: rows.ncols(),
            });
        }
        if times.len() != n || events.len() != n {
            return Err(Error::Validation(format!(
                "row count {} does not match {} times / {} events",
                n,
                times.len(),
                events.len()
            )));
        }
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 patients, got {n}")));
        }
        if let Some(i) = times.iter().position(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Validation(format!(
                "row {i}: time {} is not a non-negative number",
                times[i]
            )));
        }
        for (j, cov) in schema.covariates.iter().enumerate() {
            for (i, &v) in rows.column(j).iter().enumerate() {
                check_value(cov, v).map_err(|m| Error::Validation(format!("row {i}: {m}")))?;
            }
        }
        Ok(Self {
            schema,
            rows,
            times,
            events,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Rows at `indices`, in that order (duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.schema.clone(),
            self.rows.select(Axis(0), indices),
            indices.iter().map(|&i| self.times[i]).collect(),
            indices.iter().map(|&i| self.events[i]).collect(),
        )
    }

    /// Write as CSV with columns time, event, covariates.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec![self.schema.time_column.clone(), self.schema.event_column.clone()];
        header.extend(self.schema.covariates.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.times[i].to_string(),
                u8::from(self.events[i]).to_string(),
            ];
            rec.extend(self.rows.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn check_value(cov: &Covariate, v: f64) -> std::result::Result<(), String> {
    if !v.is_finite() {
        return Err(format!("`{}` is not finite", cov.name));
    }
    match cov.kind {
        FeatureKind::Boolean if v != 0.0 && v != 1.0 => {
            Err(format!("boolean `{}` has value {v}", cov.name))
        }
        FeatureKind::Ordinal if v.fract() != 0.0 => {
            Err(format!("ordinal `{}` has non-integer value {v}", cov.name))
        }
        _ => Ok(()),
    }
}

/// Result of [`load_dataset`]: the dataset and how many rows were rejected
/// for missing values.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: SurvivalDataset,
    pub dropped_rows: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL" | "?")
}

/// Load a comma-separated file with a header row. Rows with a missing value
/// in any schema column are dropped and counted.
pub fn load_dataset(path: &Path, schema: &FeatureSchema) -> Result<LoadedDataset> {
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let time_col = find(&schema.time_column)?;
    let event_col = find(&schema.event_column)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut dropped = 0;
    let parse = |cell: &str, row: usize, column: &str| -> Result<f64> {
        cell.parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{cell}` is not numeric"),
        })
    };

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let mut needed = vec![time_col, event_col];
        needed.extend(&cov_cols);
        if needed.iter().any(|&c| is_missing(cell(c))) {
            dropped += 1;
            continue;
        }
        let time = parse(cell(time_col), row, &schema.time_column)?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Validation(format!("row {row}: negative or non-finite time {time}")));
        }
        let event = parse(cell(event_col), row, &schema.event_column)?;
        let event = if event == 0.0 {
            false
        } else if event == 1.0 {
            true
        } else {
            return Err(Error::Validation(format!(
                "row {row}: event value {event} is not 0 or 1"
            )));
        };
        for (cov, &c) in schema.covariates.iter().zip(&cov_cols) {
            let v = parse(cell(c), row, &cov.name)?;
            check_value(cov, v).map_err(|m| Error::Validation(format!("row {row}: {m}")))?;
            values.push(v);
        }
        times.push(time);
        events.push(event);
    }

    let n = times.len();
    let rows = Array2::from_shape_vec((n, schema.len()), values)
        .expect("row-major buffer matches shape");
    let dataset = SurvivalDataset::new(schema.clone(), rows, times, events)?;
    Ok(LoadedDataset {
        dataset,
        dropped_rows: dropped,
    })
}

/// Event-stratified train/test partition of `0..events.len()`. Within each
/// event class the train share is `round(fraction * class_size)`, clamped so
/// both sides receive at least one member. Both index lists are sorted.
pub fn stratified_split_indices(
    events: &[bool],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = rng::rng_from(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut members: Vec<usize> = (0..events.len()).filter(|&i| events[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Validation(format!(
                "stratification needs at least 2 {} patients, found {}",
                if class { "event" } else { "censored" },
                members.len()
            )));
        }
        let k = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split(
    ds: &SurvivalDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SurvivalDataset, SurvivalDataset)> {
    let (train, test) = stratified_split_indices(ds.events(), train_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// Resample `indices` with replacement, separately within the event and
/// censored classes so both class counts are preserved.
pub fn stratified_resample(indices: &[usize], events: &[bool], rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(indices.len());
    for class in [false, true] {
        let members: Vec<usize> = indices.iter().copied().filter(|&i| events[i] == class).collect();
        for _ in 0..members.len() {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

pub fn bootstrap_indices(events: &[bool], seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (0..events.len()).collect();
    stratified_resample(&all, events, &mut rng::rng_from(seed))
}

/// Event-stratified bootstrap resample of the whole dataset.
pub fn bootstrap_sample(ds: &SurvivalDataset, seed: u64) -> Result<SurvivalDataset> {
    ds.subset(&bootstrap_indices(ds.events(), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema(names: &[&str]) -> FeatureSchema {
        FeatureSchema {
            covariates: names
                .iter()
                .map(|n| Covariate {
                    name: n.to_string(),
                    kind: FeatureKind::Real,
                    unit: String::new(),
                })
                .collect(),
            time_column: "time".into(),
            event_column: "event".into(),
            time_unit: "months".into(),
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_valid_file() {
        let f = write("time,event,x1\n1.5,1,3\n2,0,4\n3,1,5\n");
        let loaded = load_dataset(f.path(), &schema(&["x1"])).unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.dataset.events(), &[true, false, true]);
        assert_eq!(loaded.dataset.rows()[[2, 0]], 5.0);
    }

    #[test]
    fn drops_rows_with_missing_values() {
        let f = write("time,event,x1\n1,1,3\n2,0,\n3,1,5\n4,0,NA\n");
        let loaded = load_dataset(f.path(), &schema(&["x1"])).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        assert_eq!(loaded.dropped_rows, 2);
    }

    #[test]
    fn load_errors() {
        let f = write("time,event\n1,1\n2,0\n");
        assert!(matches!(load_dataset(f.path(), &schema(&["x1"])), Err(Error::Schema(_))));

        let f = write("time,event,x1\n1,1,3\n2,0,abc\n");
        match load_dataset(f.path(), &schema(&["x1"])) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "x1");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let f = write("time,event,x1\n1,2,3\n2,0,4\n");
        assert!(matches!(load_dataset(f.path(), &schema(&["x1"])), Err(Error::Validation(_))));

        let mut s = schema(&["x1"]);
        s.covariates[0].kind = FeatureKind::Boolean;
        let f = write("time,event,x1\n1,1,3\n2,0,1\n");
        assert!(matches!(load_dataset(f.path(), &s), Err(Error::Validation(_))));
    }

    #[test]
    fn schema_rejects_collisions() {
        let mut s = schema(&["a", "a"]);
        assert!(s.validate().is_err());
        s = schema(&["time"]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_allocates_proportionally() {
        let events: Vec<bool> = (0..100).map(|i| i < 40).collect();
        let (train, test) = stratified_split_indices(&events, 0.75, 3).unwrap();
        assert_eq!(train.iter().filter(|&&i| events[i]).count(), 30);
        assert_eq!(train.iter().filter(|&&i| !events[i]).count(), 45);
        assert_eq!(train.len() + test.len(), 100);
        let again = stratified_split_indices(&events, 0.75, 3).unwrap();
        assert_eq!((train, test), again);
    }

    #[test]
    fn split_needs_two_per_class() {
        let events = vec![true, false, false, false];
        assert!(matches!(
            stratified_split_indices(&events, 0.5, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bootstrap_of_singleton_classes_is_fixed() {
        let events = vec![true, false];
        for seed in 0..20 {
            let mut idx = bootstrap_indices(&events, seed);
            idx.sort_unstable();
            assert_eq!(idx, vec![0, 1]);
        }
    }

    #[test]
    fn bootstrap_preserves_event_count() {
        let events: Vec<bool> = (0..10).map(|i| i % 5 < 2).collect();
        for seed in 0..50 {
            let idx = bootstrap_indices(&events, seed);
            assert_eq!(idx.len(), 10);
            assert_eq!(idx.iter().filter(|&&i| events[i]).count(), 4);
        }
    }
}

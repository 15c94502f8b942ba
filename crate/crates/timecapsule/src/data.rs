//! CSV ingestion, chronological splitting, train-statistics
//! standardization, and sliding-window extraction.
//!
//! Splits are ratio-based on a tenths scale, with boundaries at
//! floor(n*a/10) and floor(n*(a+b)/10). Windows are fully contained
//! within one split so no lookback or horizon ever crosses a boundary.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no data rows")]
    Empty,
    #[error("row {row}, column {col}: non-numeric value {value:?}")]
    NonNumeric {
        row: usize,
        col: String,
        value: String,
    },
    #[error("row {row}, column {col}: non-finite value")]
    NonFinite { row: usize, col: String },
    #[error("timestamps are not strictly increasing at row {0}")]
    NonMonotonic(usize),
    #[error("split ratios {0:?} must be positive and sum to 10")]
    BadRatios((usize, usize, usize)),
    #[error("{rows} rows cannot fit a {t_x}+{t_y} window in every split")]
    TooShort {
        rows: usize,
        t_x: usize,
        t_y: usize,
    },
    #[error("variate {0:?} has zero variance in the training split")]
    ZeroVariance(String),
    #[error("variate count mismatch: scaler has {0}, frame has {1}")]
    VariateMismatch(usize, usize),
}

/// A fully ingested series: rows are time steps, columns are variates.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    pub names: Vec<String>,
    /// Raw timestamp strings of the optional leading date column.
    pub timestamps: Option<Vec<String>>,
    /// Row-major [rows x cols] values, time-major.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl SeriesFrame {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Sub-frame of rows [start, end).
    fn slice_rows(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            names: self.names.clone(),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|t| t[start..end].to_vec()),
            values: self.values[start * self.cols..end * self.cols].to_vec(),
            rows: end - start,
            cols: self.cols,
        }
    }
}

fn looks_like_date_column(name: &str) -> bool {
    let n = name.trim().to_ascii_lowercase();
    n == "date" || n == "time" || n == "datetime" || n == "timestamp"
}

/// Timestamp ordering check: compares parsed date-times when a common
/// format matches, falling back to lexicographic order (valid for
/// ISO-style stamps).
fn timestamps_increasing(ts: &[String]) -> Result<(), DataError> {
    let formats = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M", "%Y-%m-%d"];
    let parse = |s: &str| {
        formats.iter().find_map(|f| {
            chrono::NaiveDateTime::parse_from_str(s, f)
                .ok()
                .or_else(|| {
                    chrono::NaiveDate::parse_from_str(s, f)
                        .ok()
                        .map(|d| d.and_hms_opt(0, 0, 0).unwrap())
                })
        })
    };
    for i in 1..ts.len() {
        let ordered = match (parse(&ts[i - 1]), parse(&ts[i])) {
            (Some(a), Some(b)) => a < b,
            _ => ts[i - 1] < ts[i],
        };
        if !ordered {
            return Err(DataError::NonMonotonic(i));
        }
    }
    Ok(())
}

/// Loads a headered CSV. A leading column named date/time/datetime/
/// timestamp is kept as timestamps; all remaining columns must parse as
/// finite numbers. Missing values are a hard error, never imputed.
pub fn load_csv(path: &Path) -> Result<SeriesFrame, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(DataError::Empty);
    }
    let has_date = looks_like_date_column(&headers[0]);
    let first_value_col = usize::from(has_date);
    let names: Vec<String> = headers[first_value_col..].to_vec();
    if names.is_empty() {
        return Err(DataError::Empty);
    }

    let mut timestamps = has_date.then(Vec::new);
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if let Some(ts) = timestamps.as_mut() {
            ts.push(record.get(0).unwrap_or("").to_string());
        }
        for (c, name) in names.iter().enumerate() {
            let raw = record.get(first_value_col + c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| DataError::NonNumeric {
                row: r,
                col: name.clone(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    row: r,
                    col: name.clone(),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    if let Some(ts) = &timestamps {
        timestamps_increasing(ts)?;
    }
    Ok(SeriesFrame {
        cols: names.len(),
        names,
        timestamps,
        values,
        rows,
    })
}

/// Chronological three-way split on a tenths scale, e.g. (6,2,2) or
/// (7,1,2). Each split must fit at least one (t_x, t_y) window.
pub fn split(
    frame: &SeriesFrame,
    ratios: (usize, usize, usize),
    t_x: usize,
    t_y: usize,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame), DataError> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 || a + b + c != 10 {
        return Err(DataError::BadRatios(ratios));
    }
    let n = frame.rows;
    let cut1 = n * a / 10;
    let cut2 = n * (a + b) / 10;
    let min = t_x + t_y;
    if cut1 < min || cut2 - cut1 < min || n - cut2 < min {
        return Err(DataError::TooShort {
            rows: n,
            t_x,
            t_y,
        });
    }
    Ok((
        frame.slice_rows(0, cut1),
        frame.slice_rows(cut1, cut2),
        frame.slice_rows(cut2, n),
    ))
}

/// Per-variate standardization statistics, fitted on the training split.
#[derive(Debug, Clone)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &SeriesFrame) -> Result<Self, DataError> {
        let (rows, cols) = (train.rows, train.cols);
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        for c in 0..cols {
            let mut m = 0.0;
            for r in 0..rows {
                m += train.get(r, c);
            }
            m /= rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                let d = train.get(r, c) - m;
                var += d * d;
            }
            var /= rows as f64;
            if var == 0.0 {
                return Err(DataError::ZeroVariance(train.names[c].clone()));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, frame: &SeriesFrame) -> Result<SeriesFrame, DataError> {
        if self.mean.len() != frame.cols {
            return Err(DataError::VariateMismatch(self.mean.len(), frame.cols));
        }
        let mut out = frame.clone();
        for r in 0..frame.rows {
            for c in 0..frame.cols {
                out.values[r * frame.cols + c] =
                    (frame.get(r, c) - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }
}

/// Z-scores all three splits with statistics from the training split only.
pub fn standardize(
    train: &SeriesFrame,
    val: &SeriesFrame,
    test: &SeriesFrame,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame, Scaler), DataError> {
    let scaler = Scaler::fit(train)?;
    Ok((
        scaler.transform(train)?,
        scaler.transform(val)?,
        scaler.transform(test)?,
        scaler,
    ))
}

/// Start indices of every (lookback, horizon) window inside one split.
pub fn window_starts(
    rows: usize,
    t_x: usize,
    t_y: usize,
    stride: usize,
) -> Result<Vec<usize>, DataError> {
    if rows < t_x + t_y {
        return Err(DataError::TooShort { rows, t_x, t_y });
    }
    Ok((0..=rows - t_x - t_y).step_by(stride.max(1)).collect())
}

/// Seeded in-place shuffle of a window order; identical seeds give
/// identical orders.
pub fn shuffle_windows(starts: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    starts.shuffle(&mut rng);
}

/// Extracts one window as variate-major ([v x t_x], [v x t_y]) pairs, the
/// layout the model consumes. The frame stores time-major rows.
pub fn extract_window(
    frame: &SeriesFrame,
    start: usize,
    t_x: usize,
    t_y: usize,
) -> (Vec<f64>, Vec<f64>) {
    let v = frame.cols;
    let mut x = vec![0.0; v * t_x];
    let mut y = vec![0.0; v * t_y];
    for i in 0..v {
        for j in 0..t_x {
            x[i * t_x + j] = frame.get(start + j, i);
        }
        for j in 0..t_y {
            y[i * t_y + j] = frame.get(start + t_x + j, i);
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    /// ETT-style frame: date column plus `cols` numeric variates.
    fn synthetic_frame(rows: usize, cols: usize) -> SeriesFrame {
        let mut content = String::from("date");
        for c in 0..cols {
            content.push_str(&format!(",v{c}"));
        }
        content.push('\n');
        for r in 0..rows {
            content.push_str(&format!(
                "2016-07-01 {:02}:{:02}:00",
                (r / 60) % 24,
                r % 60
            ));
            for c in 0..cols {
                content.push_str(&format!(",{}", (r * cols + c) as f64 * 0.5 - 3.0));
            }
            content.push('\n');
        }
        load_csv(write_csv(&content).path()).unwrap()
    }

    #[test]
    fn loads_ett_and_weather_shaped_files() {
        let ett = synthetic_frame(30, 7);
        assert_eq!(ett.cols, 7);
        assert_eq!(ett.rows, 30);
        assert!(ett.timestamps.is_some());

        let weather = synthetic_frame(12, 21);
        assert_eq!(weather.cols, 21);
    }

    #[test]
    fn no_date_column_treats_all_columns_as_variates() {
        let f = write_csv("a,b\n1,2\n3,4\n");
        let frame = load_csv(f.path()).unwrap();
        assert_eq!(frame.cols, 2);
        assert!(frame.timestamps.is_none());
        assert_eq!(frame.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_and_malformed_files_error() {
        assert!(matches!(
            load_csv(write_csv("").path()),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            load_csv(write_csv("date,a\n").path()),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            load_csv(write_csv("a\n1\nx\n").path()),
            Err(DataError::NonNumeric { .. })
        ));
        assert!(matches!(
            load_csv(write_csv("a\nNaN\n").path()),
            Err(DataError::NonFinite { .. })
        ));
        assert!(load_csv(Path::new("/nonexistent/file.csv")).is_err());
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let f = write_csv("date,a\n2020-01-02,1\n2020-01-01,2\n");
        assert!(matches!(
            load_csv(f.path()),
            Err(DataError::NonMonotonic(1))
        ));
        // equal stamps are also rejected (strictly increasing)
        let f = write_csv("date,a\n2020-01-01,1\n2020-01-01,2\n");
        assert!(load_csv(f.path()).is_err());
    }

    #[test]
    fn split_boundaries_match_the_floor_formula() {
        let frame = synthetic_frame(10, 1);
        let (tr, va, te) = split(&frame, (6, 2, 2), 1, 1).unwrap();
        assert_eq!((tr.rows, va.rows, te.rows), (6, 2, 2));
        // row content is contiguous and chronological
        assert_eq!(tr.get(5, 0), frame.get(5, 0));
        assert_eq!(va.get(0, 0), frame.get(6, 0));
        assert_eq!(te.get(0, 0), frame.get(8, 0));

        let frame = synthetic_frame(100, 2);
        let (tr, va, te) = split(&frame, (7, 1, 2), 2, 2).unwrap();
        assert_eq!((tr.rows, va.rows, te.rows), (70, 10, 20));
    }

    #[test]
    fn split_rejects_bad_ratios_and_short_frames() {
        let frame = synthetic_frame(40, 1);
        assert!(matches!(
            split(&frame, (5, 2, 2), 1, 1),
            Err(DataError::BadRatios(_))
        ));
        assert!(matches!(
            split(&frame, (6, 0, 4), 1, 1),
            Err(DataError::BadRatios(_))
        ));
        assert!(matches!(
            split(&frame, (6, 2, 2), 8, 4),
            Err(DataError::TooShort { .. })
        ));
    }

    #[test]
    fn standardized_train_split_has_zero_mean_unit_std() {
        let frame = synthetic_frame(50, 3);
        let (tr, va, te) = split(&frame, (6, 2, 2), 2, 2).unwrap();
        let (str_, _, _, scaler) = standardize(&tr, &va, &te).unwrap();
        for c in 0..3 {
            let mut m = 0.0;
            for r in 0..str_.rows {
                m += str_.get(r, c);
            }
            m /= str_.rows as f64;
            assert!(m.abs() < 1e-10);
            let mut var = 0.0;
            for r in 0..str_.rows {
                var += (str_.get(r, c) - m) * (str_.get(r, c) - m);
            }
            var /= str_.rows as f64;
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert_eq!(scaler.mean.len(), 3);
    }

    #[test]
    fn scaling_twice_is_not_idempotent() {
        let frame = synthetic_frame(50, 2);
        let (tr, va, te) = split(&frame, (6, 2, 2), 2, 2).unwrap();
        let (_, va1, _, scaler) = standardize(&tr, &va, &te).unwrap();
        let va2 = scaler.transform(&va1).unwrap();
        // the second application shifts the mean again
        let mean = |f: &SeriesFrame| {
            (0..f.rows).map(|r| f.get(r, 0)).sum::<f64>() / f.rows as f64
        };
        assert!((mean(&va1) - mean(&va2)).abs() > 1e-9);
    }

    #[test]
    fn scaler_matches_scalar_stats_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = (64, 4);
        let frame = SeriesFrame {
            names: (0..cols).map(|c| format!("v{c}")).collect(),
            timestamps: None,
            values: (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            rows,
            cols,
        };
        let scaler = Scaler::fit(&frame).unwrap();
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| frame.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / rows as f64;
            assert!((scaler.mean[c] - m).abs() < 1e-12);
            assert!((scaler.std[c] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_variate_rejected() {
        let f = write_csv("a,b\n1,5\n2,5\n3,5\n");
        let frame = load_csv(f.path()).unwrap();
        assert!(matches!(
            Scaler::fit(&frame),
            Err(DataError::ZeroVariance(name)) if name == "b"
        ));
    }

    #[test]
    fn window_count_identity() {
        // length 100, 96+4 -> exactly 1 window
        assert_eq!(window_starts(100, 96, 4, 1).unwrap(), vec![0]);
        for (rows, t_x, t_y) in [(50, 8, 4), (31, 16, 8), (200, 96, 24)] {
            let n = window_starts(rows, t_x, t_y, 1).unwrap().len();
            assert_eq!(n, rows - t_x - t_y + 1);
        }
        assert!(window_starts(10, 8, 4, 1).is_err());
    }

    #[test]
    fn windows_stay_inside_their_split() {
        // values equal the global row index, so leakage is detectable
        let rows = 60;
        let frame = SeriesFrame {
            names: vec!["v0".into()],
            timestamps: None,
            values: (0..rows).map(|r| r as f64).collect(),
            rows,
            cols: 1,
        };
        let (t_x, t_y) = (6, 4);
        let (tr, va, te) = split(&frame, (6, 2, 2), t_x, t_y).unwrap();
        let max_tr = window_starts(tr.rows, t_x, t_y, 1)
            .unwrap()
            .into_iter()
            .map(|s| {
                let (_, y) = extract_window(&tr, s, t_x, t_y);
                y[t_y - 1] as usize
            })
            .max()
            .unwrap();
        let min_va = va.get(0, 0) as usize;
        let min_te = te.get(0, 0) as usize;
        assert!(max_tr < min_va);
        assert!(min_va < min_te);
    }

    #[test]
    fn extract_window_is_variate_major_and_adjacent() {
        let frame = SeriesFrame {
            names: vec!["a".into(), "b".into()],
            timestamps: None,
            // rows: [0,100], [1,101], [2,102], [3,103]
            values: vec![0., 100., 1., 101., 2., 102., 3., 103.],
            rows: 4,
            cols: 2,
        };
        let (x, y) = extract_window(&frame, 0, 2, 2);
        assert_eq!(x, vec![0., 1., 100., 101.]);
        assert_eq!(y, vec![2., 3., 102., 103.]);
    }

    #[test]
    fn shuffle_is_seeded_and_deterministic() {
        let base: Vec<usize> = (0..100).collect();
        let mut a = base.clone();
        let mut b = base.clone();
        shuffle_windows(&mut a, 2021);
        shuffle_windows(&mut b, 2021);
        assert_eq!(a, b);
        assert_ne!(a, base, "shuffle left the order untouched");
        let mut c = base.clone();
        shuffle_windows(&mut c, 2022);
        assert_ne!(a, c);
    }

    #[test]
    fn stride_skips_starts() {
        assert_eq!(window_starts(20, 4, 2, 5).unwrap(), vec![0, 5, 10]);
    }
}

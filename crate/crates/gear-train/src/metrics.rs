//! Per-worker metrics rows and their CSV form: header row,
//! comma-separated, `.` decimal point, UTF-8. Counter columns are
//! cumulative within a worker; loss/accuracy are per-step values and are
//! left empty on rows from workers that do not compute a loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::TrainError;

pub const CSV_HEADER: &str = "run_id,worker,step,time,loss,accuracy,dense_forward_count,\
dense_update_count,cache_hits,cache_misses,skips,dropped_grad_batches";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub worker: String,
    pub step: u64,
    pub time: u64,
    pub loss: Option<f32>,
    pub accuracy: Option<f32>,
    pub dense_forward_count: u64,
    pub dense_update_count: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub skips: u64,
    pub dropped_grad_batches: u64,
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.worker,
            self.step,
            self.time,
            fmt_opt(self.loss),
            fmt_opt(self.accuracy),
            self.dense_forward_count,
            self.dense_update_count,
            self.cache_hits,
            self.cache_misses,
            self.skips,
            self.dropped_grad_batches
        )
    }

    pub fn parse_csv(line: &str, lineno: usize) -> Result<Self, TrainError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(TrainError::Csv {
                line: lineno,
                reason: format!("expected 12 fields, got {}", fields.len()),
            });
        }
        let int = |i: usize| -> Result<u64, TrainError> {
            fields[i]
                .parse()
                .map_err(|e| TrainError::Csv { line: lineno, reason: format!("field {i}: {e}") })
        };
        let opt = |i: usize| -> Result<Option<f32>, TrainError> {
            if fields[i].is_empty() {
                return Ok(None);
            }
            fields[i]
                .parse()
                .map(Some)
                .map_err(|e| TrainError::Csv { line: lineno, reason: format!("field {i}: {e}") })
        };
        Ok(Self {
            run_id: fields[0].to_string(),
            worker: fields[1].to_string(),
            step: int(2)?,
            time: int(3)?,
            loss: opt(4)?,
            accuracy: opt(5)?,
            dense_forward_count: int(6)?,
            dense_update_count: int(7)?,
            cache_hits: int(8)?,
            cache_misses: int(9)?,
            skips: int(10)?,
            dropped_grad_batches: int(11)?,
        })
    }
}

pub fn write_csv<W: Write>(w: &mut W, rows: &[MetricsRow]) -> Result<(), TrainError> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv())?;
    }
    Ok(())
}

pub fn write_csv_file(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv_file(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(TrainError::Csv { line: 1, reason: format!("bad header {header:?}") })
        }
        None => return Err(TrainError::Csv { line: 1, reason: "empty file".into() }),
    }
    lines.map(|(i, line)| MetricsRow::parse_csv(line, i + 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricsRow {
        MetricsRow {
            run_id: "gear-seed42".into(),
            worker: "fastgear-0".into(),
            step: 7,
            time: 14,
            loss: Some(1.25),
            accuracy: Some(0.5),
            dense_forward_count: 0,
            dense_update_count: 0,
            cache_hits: 3,
            cache_misses: 4,
            skips: 0,
            dropped_grad_batches: 0,
        }
    }

    #[test]
    fn row_round_trips_through_csv() {
        let row = sample_row();
        assert_eq!(MetricsRow::parse_csv(&row.to_csv(), 2).unwrap(), row);
        let slowgear_row =
            MetricsRow { loss: None, accuracy: None, worker: "slowgear-0".into(), ..row };
        let line = slowgear_row.to_csv();
        assert!(line.contains(",,"), "empty loss/accuracy fields: {line}");
        assert_eq!(MetricsRow::parse_csv(&line, 3).unwrap(), slowgear_row);
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("worker.csv");
        let rows = vec![sample_row(), MetricsRow { step: 8, loss: Some(0.75), ..sample_row() }];
        write_csv_file(&path, &rows).unwrap();
        let first = fs::read(&path).unwrap();
        assert_eq!(read_csv_file(&path).unwrap(), rows);
        write_csv_file(&path, &rows).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(first.starts_with(CSV_HEADER.as_bytes()));
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, format!("{CSV_HEADER}\n1,2,3\n")).unwrap();
        match read_csv_file(&path) {
            Err(TrainError::Csv { line: 2, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        fs::write(&path, "nope\n").unwrap();
        assert!(matches!(read_csv_file(&path), Err(TrainError::Csv { line: 1, .. })));
    }
}

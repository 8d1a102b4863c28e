//! CSV metrics emission: one row per (run, epoch, split, metric).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const HEADER: &str = "run_id,epoch,split,metric_name,value,seed,wall_seconds";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        // f64 Display always uses '.' and prints enough digits to round-trip
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            self.split,
            self.metric_name,
            self.value,
            self.seed,
            self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    Append,
    Truncate,
}

/// Write rows, emitting the header only when the file starts empty; flushed
/// before returning.
pub fn write_metrics(rows: &[MetricsRow], path: &Path, mode: WriteMode) -> Result<()> {
    let mut options = OpenOptions::new();
    options.create(true).write(true);
    match mode {
        WriteMode::Append => options.append(true),
        WriteMode::Truncate => options.truncate(true),
    };
    let mut file = options.open(path)?;
    let need_header = file.metadata()?.len() == 0;
    let mut out = String::new();
    if need_header {
        out.push_str(HEADER);
        out.push('\n');
    }
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    file.write_all(out.as_bytes())?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, value: f64) -> MetricsRow {
        MetricsRow {
            run_id: "r0".into(),
            epoch,
            split: "test".into(),
            metric_name: "natural_acc".into(),
            value,
            seed: 0,
            wall_seconds: 1.25,
        }
    }

    #[test]
    fn append_twice_keeps_a_single_header() {
        let dir = std::env::temp_dir().join(format!("datk-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("single_header.csv");
        let _ = std::fs::remove_file(&path);
        write_metrics(&[row(0, 0.5)], &path, WriteMode::Append).unwrap();
        write_metrics(&[row(1, 0.75)], &path, WriteMode::Append).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], HEADER);
        assert!(lines[1].starts_with("r0,0,test,natural_acc,0.5,0,"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn empty_rows_write_header_only() {
        let dir = std::env::temp_dir().join(format!("datk-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("header_only.csv");
        let _ = std::fs::remove_file(&path);
        write_metrics(&[], &path, WriteMode::Truncate).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{HEADER}\n"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn values_keep_full_precision_and_dot_separator() {
        let r = row(0, 0.5123456);
        let line = r.to_csv();
        assert!(line.contains(",0.5123456,"), "{line}");
    }
}

//! Line-delimited scenario datasets.
//!
//! One self-contained JSON record per line, tagged with a schema version.
//! Text is UTF-8; record field order is fixed by the type definitions, so
//! identical scenarios always serialize to identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Scenario;

/// Version tag every record must carry.
pub const SCHEMA_VERSION: &str = "sv1";

/// Streaming dataset writer (one record per line).
pub struct DatasetWriter {
    out: BufWriter<File>,
    written: usize,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(DatasetWriter { out: BufWriter::new(File::create(path)?), written: 0 })
    }

    pub fn write(&mut self, scenario: &Scenario) -> Result<()> {
        if scenario.schema != SCHEMA_VERSION {
            return Err(Error::domain(
                "DatasetWriter",
                format!("record schema {:?} is not {SCHEMA_VERSION:?}", scenario.schema),
            ));
        }
        serde_json::to_writer(&mut self.out, scenario)?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    /// Flush and return the number of records written.
    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.written)
    }
}

/// Streaming dataset reader; yields one scenario per line and reports
/// malformed records with their 1-based line number.
pub struct DatasetReader {
    lines: Lines<BufReader<File>>,
    line: usize,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(DatasetReader { lines: BufReader::new(File::open(path)?).lines(), line: 0 })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Scenario>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = match self.lines.next()? {
                Ok(raw) => raw,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<Scenario, _> = serde_json::from_str(&raw);
            return Some(match parsed {
                Ok(scenario) if scenario.schema == SCHEMA_VERSION => Ok(scenario),
                Ok(scenario) => Err(Error::Parse {
                    line: Some(self.line),
                    details: format!(
                        "unsupported schema {:?} (expected {SCHEMA_VERSION:?})",
                        scenario.schema
                    ),
                }),
                Err(e) => Err(Error::Parse { line: Some(self.line), details: e.to_string() }),
            });
        }
    }
}

/// Write all scenarios to `path`, returning the record count.
pub fn write_dataset(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<usize> {
    let mut writer = DatasetWriter::create(path)?;
    for s in scenarios {
        writer.write(s)?;
    }
    writer.finish()
}

/// Read an entire dataset into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    DatasetReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{gen_scenario, ScenarioKind};

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("scene_dataset_{tag}_{}.jsonl", std::process::id()))
    }

    fn sample(n: usize) -> Vec<Scenario> {
        (0..n)
            .map(|i| gen_scenario(ScenarioKind::Mixed, 3, 100 + i as u64).unwrap())
            .collect()
    }

    #[test]
    fn round_trip_is_value_identical() {
        let path = temp_path("round_trip");
        let scenarios = sample(3);
        assert_eq!(write_dataset(&path, &scenarios).unwrap(), 3);
        let back = read_dataset(&path).unwrap();
        assert_eq!(scenarios, back);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn file_has_one_line_per_record() {
        let path = temp_path("line_count");
        let scenarios = sample(4);
        write_dataset(&path, &scenarios).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let path_a = temp_path("bytes_a");
        let path_b = temp_path("bytes_b");
        let scenarios = sample(2);
        write_dataset(&path_a, &scenarios).unwrap();
        write_dataset(&path_b, &scenarios).unwrap();
        assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
        std::fs::remove_file(&path_a).unwrap();
        std::fs::remove_file(&path_b).unwrap();
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let path = temp_path("malformed");
        let scenarios = sample(2);
        let mut text = String::new();
        text.push_str(&serde_json::to_string(&scenarios[0]).unwrap());
        text.push('\n');
        text.push_str("{\"schema\": \"sv1\", truncated");
        text.push('\n');
        text.push_str(&serde_json::to_string(&scenarios[1]).unwrap());
        text.push('\n');
        std::fs::write(&path, text).unwrap();

        let results: Vec<_> = DatasetReader::open(&path).unwrap().collect();
        assert_eq!(results.len(), 3);
        assert!(results[0].is_ok());
        assert!(results[2].is_ok());
        match results[1].as_ref().unwrap_err() {
            Error::Parse { line: Some(2), .. } => {}
            other => panic!("expected a parse error at line 2, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn wrong_schema_reports_its_line() {
        let path = temp_path("schema");
        let mut scenario = sample(1).remove(0);
        scenario.schema = "sv0".into();
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&scenario).unwrap())).unwrap();
        let results: Vec<_> = DatasetReader::open(&path).unwrap().collect();
        match results[0].as_ref().unwrap_err() {
            Error::Parse { line: Some(1), details } => {
                assert!(details.contains("sv0"));
            }
            other => panic!("expected a schema error at line 1, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn writer_rejects_foreign_schema() {
        let path = temp_path("writer_guard");
        let mut scenario = sample(1).remove(0);
        scenario.schema = "sv9".into();
        let mut writer = DatasetWriter::create(&path).unwrap();
        assert!(writer.write(&scenario).is_err());
        drop(writer);
        std::fs::remove_file(&path).unwrap();
    }
}

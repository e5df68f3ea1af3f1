//! `{"text": str, "label": int}` per line, UTF-8.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Line {
    text: String,
    label: i64,
}

#[derive(Serialize)]
struct LineOut<'a> {
    text: &'a str,
    label: usize,
}

/// Parses JSONL from any reader. Blank lines are skipped.
pub fn read_jsonl(reader: impl BufRead, num_classes: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty text".into(),
            });
        }
        if parsed.label < 0 || parsed.label as u64 >= num_classes as u64 {
            return Err(Error::InvalidLabel {
                line: line_no,
                label: parsed.label,
                num_classes,
            });
        }
        examples.push(LabeledExample::new(parsed.text, parsed.label as usize));
    }
    Dataset::new(examples, num_classes)
}

pub fn load_jsonl(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    read_jsonl(BufReader::new(File::open(path)?), num_classes)
}

pub fn write_jsonl(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    for ex in dataset.examples() {
        serde_json::to_writer(
            &mut out,
            &LineOut {
                text: &ex.text,
                label: ex.label,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(dataset, BufWriter::new(File::create(path)?))
}

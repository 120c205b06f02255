use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{Dataset, Payload, Sample};
use crate::error::{Result, ShuntError};
use crate::prob::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl FromStr for RecordFormat {
    type Err = ShuntError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Ok(RecordFormat::Jsonl),
            "csv" => Ok(RecordFormat::Csv),
            other => Err(ShuntError::config(format!("unknown record format `{other}`"))),
        }
    }
}

impl RecordFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| ShuntError::config(format!("cannot infer format of {}", path.display())))?
            .parse()
    }
}

/// One JSONL line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    payload: Payload,
    #[serde(default)]
    gold_label: Option<ClassId>,
    #[serde(default)]
    category: Option<String>,
}

/// One CSV row. Exactly one of `text` / `features` is set; features are
/// whitespace-separated numbers.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    features: Option<String>,
    #[serde(default)]
    gold_label: Option<ClassId>,
    #[serde(default)]
    category: Option<String>,
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.is_empty())
}

struct Collector {
    samples: Vec<Sample>,
    seen: HashSet<String>,
}

impl Collector {
    fn new() -> Self {
        Self {
            samples: Vec::new(),
            seen: HashSet::new(),
        }
    }

    fn push(&mut self, line: usize, sample: Sample) -> Result<()> {
        sample.validate().map_err(|e| ShuntError::Record {
            line,
            message: e.to_string(),
        })?;
        if !self.seen.insert(sample.id.clone()) {
            return Err(ShuntError::Record {
                line,
                message: format!("duplicate sample id `{}`", sample.id),
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    fn finish(self) -> Result<Dataset> {
        Dataset::new(self.samples)
    }
}

/// Reads line-delimited JSON. Blank lines are skipped; line numbers are 1-based.
pub fn read_jsonl<R: Read>(reader: R) -> Result<Dataset> {
    let mut out = Collector::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: JsonRecord = serde_json::from_str(&line).map_err(|e| ShuntError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(
            line_no,
            Sample {
                id: r.id,
                payload: r.payload,
                gold_label: r.gold_label,
                category: r.category,
            },
        )?;
    }
    out.finish()
}

/// Reads CSV with a header row. Line numbers count the header as line 1.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
    let mut out = Collector::new();
    for (i, row) in rdr.deserialize::<CsvRecord>().enumerate() {
        let fallback_line = i + 2;
        let r = row.map_err(|e| ShuntError::Record {
            line: e.position().map_or(fallback_line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let payload = match (non_empty(r.text), non_empty(r.features)) {
            (Some(t), None) => Payload::Text(t),
            (None, Some(f)) => Payload::Features(
                f.split_whitespace()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| ShuntError::Record {
                            line: fallback_line,
                            message: format!("bad feature value `{v}`"),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            (None, None) => {
                return Err(ShuntError::Record {
                    line: fallback_line,
                    message: "record has no payload".into(),
                })
            }
            (Some(_), Some(_)) => {
                return Err(ShuntError::Record {
                    line: fallback_line,
                    message: "record has both text and features".into(),
                })
            }
        };
        out.push(
            fallback_line,
            Sample {
                id: r.id,
                payload,
                gold_label: non_empty(r.gold_label),
                category: non_empty(r.category),
            },
        )?;
    }
    out.finish()
}

pub fn ingest(path: &Path, format: RecordFormat) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    match format {
        RecordFormat::Jsonl => read_jsonl(file),
        RecordFormat::Csv => read_csv(file),
    }
}

pub fn write_jsonl<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    for s in data {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in data {
        let (text, features) = match &s.payload {
            Payload::Text(t) => (Some(t.clone()), None),
            Payload::Features(_) => (None, Some(s.payload.to_wire_string())),
        };
        wtr.serialize(CsvRecord {
            id: s.id.clone(),
            text,
            features,
            gold_label: s.gold_label.clone(),
            category: s.category.clone(),
        })
        .map_err(|e| ShuntError::protocol(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_dataset(data: &Dataset, path: &Path, format: RecordFormat) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        RecordFormat::Jsonl => write_jsonl(data, file),
        RecordFormat::Csv => write_csv(data, file),
    }
}

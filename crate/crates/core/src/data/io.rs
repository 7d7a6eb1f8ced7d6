use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{FeatureDims, FeatureRecord, GeneratorConfig, MissingFlags, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_FORMAT: &str = "taemi-records";
pub const RECORD_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "taemi-manifest";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dims: FeatureDims,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    frames: usize,
    data: String,
}

/// On-disk form of a record. Feature arrays are base64 little-endian f64,
/// so they round-trip bit-exactly; targets stay readable decimals.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    target: Vec<f64>,
    missing: MissingFlags,
    audio: Option<SequenceLine>,
    vision: Option<SequenceLine>,
    text: Option<String>,
}

/// Records plus the feature widths declared in their file header.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    pub dims: FeatureDims,
    pub records: Vec<FeatureRecord>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_records(path: &Path, dims: &FeatureDims, records: &[FeatureRecord]) -> Result<()> {
    for r in records {
        r.validate(dims, 0)?;
    }
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
        dims: *dims,
        count: records.len(),
    };
    writeln!(out, "{}", json(&header)).map_err(io)?;
    for r in records {
        let seq = |t: &Option<Tensor>| {
            t.as_ref().map(|t| SequenceLine {
                frames: t.rows(),
                data: encode(t.data()),
            })
        };
        let line = RecordLine {
            id: r.id.clone(),
            target: r.target.clone(),
            missing: r.missing(),
            audio: seq(&r.audio),
            vision: seq(&r.vision),
            text: r.text.as_deref().map(encode),
        };
        writeln!(out, "{}", json(&line)).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

pub fn read_records(path: &Path) -> Result<RecordSet> {
    let io = |e| Error::io(path, e);
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty file, expected a header line".into(),
        })?
        .map_err(io)?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != RECORD_FORMAT || header.version != RECORD_VERSION {
        return Err(Error::Schema {
            line: 1,
            field: "format".into(),
            message: format!(
                "expected {RECORD_FORMAT} v{RECORD_VERSION}, found {} v{}",
                header.format, header.version
            ),
        });
    }
    header.dims.validate()?;
    let dims = header.dims;

    let mut records = Vec::with_capacity(header.count);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(parse_record(raw, &dims, line_no)?);
    }
    if records.len() != header.count {
        return Err(Error::Schema {
            line: 1,
            field: "count".into(),
            message: format!("header declares {} records, file holds {}", header.count, records.len()),
        });
    }
    Ok(RecordSet { dims, records })
}

fn parse_record(raw: RecordLine, dims: &FeatureDims, line: usize) -> Result<FeatureRecord> {
    let schema = |field: &str, message: String| Error::Schema {
        line,
        field: field.into(),
        message,
    };
    let seq = |field: &str, s: Option<SequenceLine>, width: usize, missing: bool| -> Result<Option<Tensor>> {
        match (s, missing) {
            (None, true) => Ok(None),
            (Some(_), true) | (None, false) => Err(schema(
                &format!("missing.{field}"),
                "missing flag disagrees with data presence".into(),
            )),
            (Some(s), false) => {
                let data = decode(&s.data).map_err(|m| schema(&format!("{field}.data"), m))?;
                if s.frames == 0 || data.len() != s.frames * width {
                    return Err(schema(
                        &format!("{field}.data"),
                        format!("{} values for {} frames of width {width}", data.len(), s.frames),
                    ));
                }
                Ok(Some(Tensor::matrix(s.frames, width, data)?))
            }
        }
    };
    let audio = seq("audio", raw.audio, dims.audio, raw.missing.audio)?;
    let vision = seq("vision", raw.vision, dims.vision, raw.missing.vision)?;
    let text = match (raw.text, raw.missing.text) {
        (None, true) => None,
        (Some(s), false) => Some(decode(&s).map_err(|m| schema("text", m))?),
        _ => return Err(schema("missing.text", "missing flag disagrees with data presence".into())),
    };
    let record = FeatureRecord {
        id: raw.id,
        target: raw.target,
        audio,
        vision,
        text,
    };
    record.validate(dims, line)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    /// Record file path relative to the manifest's directory.
    pub path: String,
    pub count: usize,
}

/// Split → record file index, plus the generator parameters that produced
/// the files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub generator: Option<GeneratorConfig>,
    pub splits: BTreeMap<String, SplitEntry>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>, generator: Option<GeneratorConfig>) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: RECORD_VERSION,
            generator,
            splits: BTreeMap::new(),
            dir: dir.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("manifest {}: {e}", path.display()),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Schema {
                line: 1,
                field: "format".into(),
                message: format!("expected {MANIFEST_FORMAT}, found {}", m.format),
            });
        }
        m.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain data serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn path_of(&self, split: Split) -> Result<PathBuf> {
        self.splits
            .get(split.name())
            .map(|e| self.dir.join(&e.path))
            .ok_or_else(|| Error::Validation(format!("manifest has no `{}` split", split.name())))
    }

    pub fn load(&self, split: Split) -> Result<RecordSet> {
        read_records(&self.path_of(split)?)
    }
}

//! Binary activation traces (`.vtrc`) and replay JSON-lines.
//!
//! `.vtrc` layout, all integers little-endian:
//!
//! ```text
//! "VTRC"  u32 version  u32 header_len  header_len bytes of UTF-8 JSON
//! repeated: u64 example_id  u8 label (0, 1, 255 = unlabeled)
//!           u32 prompt_token_count  n_layers*n_heads*d_head f32 values
//! ```
//!
//! Replay files hold one JSON object per line:
//! `{"context_sha256": .., "candidates": [{"text", "token_logprobs", "activations"}]}`.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ByteTokenizer, ModelDims, Tokenizer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTRC";
pub const VERSION: u32 = 1;
pub const LABEL_UNLABELED: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub model_id: String,
    pub dtype: String,
}

impl TraceHeader {
    pub fn new(dims: &ModelDims, model_id: impl Into<String>) -> Self {
        Self {
            n_layers: dims.n_layers,
            n_heads: dims.n_heads,
            d_head: dims.d_head,
            model_id: model_id.into(),
            dtype: "f32".into(),
        }
    }

    pub fn values_per_record(&self) -> usize {
        self.n_layers * self.n_heads * self.d_head
    }

    /// Dims of a model that replays this trace through the byte tokenizer.
    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(
            self.n_layers,
            self.n_heads,
            self.d_head,
            ByteTokenizer.vocab_size(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub example_id: u64,
    pub label: Option<bool>,
    pub prompt_token_count: u32,
    pub activations: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

pub fn write_trace<W: Write>(mut w: W, trace: &Trace) -> Result<()> {
    let io = |e| Error::io("writing trace", e);
    let header = serde_json::to_vec(&trace.header)?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let n = trace.header.values_per_record();
    for r in &trace.records {
        if r.activations.len() != n {
            return Err(Error::validation(format!(
                "record {} has {} activations, header expects {n}",
                r.example_id,
                r.activations.len()
            )));
        }
        w.write_all(&r.example_id.to_le_bytes()).map_err(io)?;
        let label = match r.label {
            Some(true) => 1u8,
            Some(false) => 0,
            None => LABEL_UNLABELED,
        };
        w.write_all(&[label]).map_err(io)?;
        w.write_all(&r.prompt_token_count.to_le_bytes())
            .map_err(io)?;
        for v in &r.activations {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, trace: &Trace) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(f);
    write_trace(&mut w, trace)?;
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn parse_trace(bytes: &[u8]) -> Result<Trace> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected VTRC".into(),
        });
    }
    let version_at = c.pos as u64;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}"),
        });
    }
    let header_len = c.u32("header length")? as usize;
    let header_at = c.pos as u64;
    let header: TraceHeader =
        serde_json::from_slice(c.take(header_len, "header")?).map_err(|e| Error::Format {
            offset: header_at,
            message: format!("header json: {e}"),
        })?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            offset: header_at,
            message: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    if header.values_per_record() == 0 {
        return Err(Error::Format {
            offset: header_at,
            message: "header dims must be positive".into(),
        });
    }
    let n = header.values_per_record();
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let example_id = u64::from_le_bytes(c.take(8, "example id")?.try_into().expect("8 bytes"));
        let label_at = c.pos as u64;
        let label = match c.take(1, "label")?[0] {
            0 => Some(false),
            1 => Some(true),
            LABEL_UNLABELED => None,
            other => {
                return Err(Error::Format {
                    offset: label_at,
                    message: format!(
                        "invalid label byte {other}; header dims may not match the records"
                    ),
                })
            }
        };
        let prompt_token_count = c.u32("prompt token count")?;
        let values_at = c.pos as u64;
        let raw = c.take(4 * n, "activations")?;
        let activations: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = activations.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: values_at + 4 * i as u64,
                message: "non-finite activation".into(),
            });
        }
        records.push(TraceRecord {
            example_id,
            label,
            prompt_token_count,
            activations,
        });
    }
    Ok(Trace { header, records })
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Trace> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("reading trace", e))?;
    parse_trace(&buf)
}

pub fn read_trace_file(path: &Path) -> Result<Trace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_trace(&bytes)
}

pub fn context_hash(context: &str) -> String {
    hex::encode(Sha256::digest(context.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCandidate {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub activations: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLine {
    pub context_sha256: String,
    pub candidates: Vec<ReplayCandidate>,
}

/// Builds replay lines keyed by context text, rejecting hash collisions.
#[derive(Debug, Default)]
pub struct ReplayBuilder {
    lines: Vec<ReplayLine>,
    contexts: HashMap<String, String>,
}

impl ReplayBuilder {
    pub fn add(&mut self, context: &str, candidates: Vec<ReplayCandidate>) -> Result<()> {
        let hash = context_hash(context);
        match self.contexts.get(&hash) {
            Some(existing) if existing != context => {
                return Err(Error::validation(format!(
                    "context hash collision on {hash}"
                )));
            }
            Some(_) => {
                return Err(Error::validation(format!("context {hash} recorded twice")));
            }
            None => {}
        }
        self.contexts.insert(hash.clone(), context.to_string());
        self.lines.push(ReplayLine {
            context_sha256: hash,
            candidates,
        });
        Ok(())
    }

    pub fn finish(self) -> Vec<ReplayLine> {
        self.lines
    }
}

pub fn write_replay<W: Write>(mut w: W, lines: &[ReplayLine]) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing replay", e))?;
    }
    Ok(())
}

pub fn write_replay_file(path: &Path, lines: &[ReplayLine]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(f);
    write_replay(&mut w, lines)?;
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_replay<R: BufRead>(r: R, path: &Path) -> Result<Vec<ReplayLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReplayLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn read_replay_file(path: &Path) -> Result<Vec<ReplayLine>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_replay(std::io::BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_trace() -> Trace {
        let dims = ModelDims::new(2, 2, 3, 257).unwrap();
        Trace {
            header: TraceHeader::new(&dims, "toy"),
            records: (0..3)
                .map(|i| TraceRecord {
                    example_id: 100 + i,
                    label: [Some(true), Some(false), None][i as usize],
                    prompt_token_count: 7 * i as u32,
                    activations: (0..12).map(|j| j as f32 * 0.25 - i as f32).collect(),
                })
                .collect(),
        }
    }

    fn encode(t: &Trace) -> Vec<u8> {
        let mut buf = Vec::new();
        write_trace(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn layout_is_little_endian_with_json_header() {
        let buf = encode(&sample_trace());
        assert_eq!(&buf[..4], b"VTRC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let hl = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[12..12 + hl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["n_heads"], 2);
        let rec = 12 + hl;
        assert_eq!(
            u64::from_le_bytes(buf[rec..rec + 8].try_into().unwrap()),
            100
        );
        assert_eq!(buf[rec + 8], 1);
        assert_eq!(buf.len(), rec + 3 * (8 + 1 + 4 + 12 * 4));
    }

    #[test]
    fn truncation_reports_field_offset() {
        let buf = encode(&sample_trace());
        let hl = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let second = 12 + hl + (8 + 1 + 4 + 48);
        // cut in the middle of the second record's activations
        let cut = second + 13 + 10;
        match parse_trace(&buf[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (second + 13) as u64),
            other => panic!("unexpected {other:?}"),
        }
        match parse_trace(&buf[..6]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_header_dims_are_format_errors() {
        let mut t = sample_trace();
        t.header.d_head = 2;
        t.header.n_layers = 1;
        // write with the original record width, then claim fewer values per record
        let mut good = sample_trace();
        let buf = encode(&good);
        let header = serde_json::to_vec(&t.header).unwrap();
        let old_hl = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let mut forged = Vec::new();
        forged.extend_from_slice(&buf[..8]);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(&header);
        forged.extend_from_slice(&buf[12 + old_hl..]);
        assert!(matches!(parse_trace(&forged), Err(Error::Format { .. })));
        good.records[0].activations.pop();
        assert!(write_trace(Vec::new(), &good).is_err());
    }

    #[test]
    fn replay_builder_rejects_duplicate_contexts() {
        let mut b = ReplayBuilder::default();
        b.add("ctx", vec![]).unwrap();
        assert!(b.add("ctx", vec![]).is_err());
        b.add("other", vec![]).unwrap();
        assert_eq!(b.finish().len(), 2);
    }

    #[test]
    fn replay_parse_error_names_line() {
        let text = "{\"context_sha256\":\"ab\",\"candidates\":[]}\nnot json\n";
        match read_replay(text.as_bytes(), Path::new("r.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn trace_roundtrip(
            values in proptest::collection::vec(-1e6f32..1e6, 12),
            id in any::<u64>(),
            label in proptest::option::of(any::<bool>()),
        ) {
            let mut t = sample_trace();
            t.records[1] = TraceRecord { example_id: id, label, prompt_token_count: 3, activations: values };
            prop_assert_eq!(parse_trace(&encode(&t)).unwrap(), t);
        }

        #[test]
        fn replay_roundtrip(values in proptest::collection::vec(-1e3f32..1e3, 1..20), lp in -50.0f64..0.0) {
            let line = ReplayLine {
                context_sha256: context_hash("q"),
                candidates: vec![ReplayCandidate {
                    text: "Step 1 : x".into(),
                    token_logprobs: vec![lp, 0.0],
                    activations: values,
                    token_ids: None,
                    truncated: false,
                }],
            };
            let mut buf = Vec::new();
            write_replay(&mut buf, std::slice::from_ref(&line)).unwrap();
            let back = read_replay(buf.as_slice(), Path::new("x")).unwrap();
            prop_assert_eq!(back, vec![line]);
        }
    }
}

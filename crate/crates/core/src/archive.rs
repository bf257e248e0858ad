//! On-disk formats.
//!
//! A signal archive is a directory holding `manifest.json` plus flat
//! little-endian `f32` files in row-major (one trace or block after the
//! other) layout. Two kinds exist:
//!
//! * **trace sets** (`kind = "traces"`): a single `traces.f32` whose row
//!   lengths and trigger offsets are listed in the manifest;
//! * **block libraries** (`kind = "library"`): one `<prev>__<cur>.f32`
//!   per pair key with a fixed block length.
//!
//! Baselines are a standalone JSON document. External captures enter
//! through [`ingest_csv`]: one trace per CSV row plus a sidecar with one
//! trigger index per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{Baseline, PValueMode};
use crate::error::{Error, Result};
use crate::eval::Dataset;
use crate::library::{BlockLibrary, PairKey, Provenance, SignalBlock};
use crate::sim::{Origin, Trace};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const TRACE_DATA: &str = "traces.f32";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn encode_f32(rows: impl IntoIterator<Item = impl AsRef<[f64]>>) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        for &v in row.as_ref() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn check_header(kind: &str, expected: &str, version: u32) -> Result<()> {
    if kind != expected {
        return Err(Error::Format(format!(
            "expected a `{expected}` archive, found `{kind}`"
        )));
    }
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {version}"
        )));
    }
    Ok(())
}

/// Traces of one program path with the geometry needed to preprocess them.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub program: String,
    pub origin: Origin,
    pub path_id: Option<usize>,
    /// Nominal cycle count of the captured path.
    pub path_cycles: usize,
    pub samples_per_cycle: usize,
    pub config_digest: Option<String>,
    pub traces: Vec<Trace>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    schema_version: u32,
    kind: String,
    program: String,
    origin: Origin,
    path_id: Option<usize>,
    path_cycles: usize,
    samples_per_cycle: usize,
    config_digest: Option<String>,
    data_file: String,
    count: usize,
    lengths: Vec<usize>,
    alignments: Vec<Option<usize>>,
}

pub fn save_traces(dir: &Path, set: &TraceSet) -> Result<()> {
    create_dir(dir)?;
    let manifest = TraceManifest {
        schema_version: SCHEMA_VERSION,
        kind: "traces".into(),
        program: set.program.clone(),
        origin: set.origin,
        path_id: set.path_id,
        path_cycles: set.path_cycles,
        samples_per_cycle: set.samples_per_cycle,
        config_digest: set.config_digest.clone(),
        data_file: TRACE_DATA.into(),
        count: set.traces.len(),
        lengths: set.traces.iter().map(Trace::len).collect(),
        alignments: set.traces.iter().map(|t| t.alignment).collect(),
    };
    write(
        &dir.join(TRACE_DATA),
        &encode_f32(set.traces.iter().map(|t| &t.samples)),
    )?;
    write(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_traces(dir: &Path) -> Result<TraceSet> {
    let m: TraceManifest = serde_json::from_slice(&read(&dir.join(MANIFEST))?)?;
    check_header(&m.kind, "traces", m.schema_version)?;
    if m.lengths.len() != m.count || m.alignments.len() != m.count {
        return Err(Error::Format(
            "manifest row tables disagree with count".into(),
        ));
    }
    let data_path = dir.join(&m.data_file);
    let data = decode_f32(&read(&data_path)?, &data_path)?;
    if data.len() != m.lengths.iter().sum::<usize>() {
        return Err(Error::Format(format!(
            "{} holds {} samples, manifest lists {}",
            data_path.display(),
            data.len(),
            m.lengths.iter().sum::<usize>()
        )));
    }
    let mut rest = data.as_slice();
    let mut traces = Vec::with_capacity(m.count);
    for (len, alignment) in m.lengths.iter().zip(&m.alignments) {
        let (row, tail) = rest.split_at(*len);
        rest = tail;
        traces.push(Trace {
            samples: row.to_vec(),
            samples_per_cycle: m.samples_per_cycle,
            origin: m.origin,
            path_id: m.path_id,
            alignment: *alignment,
        });
    }
    Ok(TraceSet {
        program: m.program,
        origin: m.origin,
        path_id: m.path_id,
        path_cycles: m.path_cycles,
        samples_per_cycle: m.samples_per_cycle,
        config_digest: m.config_digest,
        traces,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairEntry {
    #[serde(flatten)]
    key: PairKey,
    file: String,
    block_len: usize,
    count: usize,
    capture_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryManifest {
    schema_version: u32,
    kind: String,
    samples_per_cycle: usize,
    catalog_digest: String,
    config_digest: String,
    seed: u64,
    pairs: Vec<PairEntry>,
}

pub fn save_library(dir: &Path, library: &BlockLibrary) -> Result<()> {
    library.check_invariants()?;
    create_dir(dir)?;
    let mut pairs = Vec::with_capacity(library.entries.len());
    for (key, blocks) in &library.entries {
        let file = format!("{}.f32", key.file_stem());
        write(
            &dir.join(&file),
            &encode_f32(blocks.iter().map(|b| &b.samples)),
        )?;
        pairs.push(PairEntry {
            key: key.clone(),
            file,
            block_len: blocks[0].samples.len(),
            count: blocks.len(),
            capture_ids: blocks.iter().map(|b| b.capture_id).collect(),
        });
    }
    let manifest = LibraryManifest {
        schema_version: SCHEMA_VERSION,
        kind: "library".into(),
        samples_per_cycle: library.samples_per_cycle,
        catalog_digest: library.provenance.catalog_digest.clone(),
        config_digest: library.provenance.config_digest.clone(),
        seed: library.provenance.seed,
        pairs,
    };
    write(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_library(dir: &Path) -> Result<BlockLibrary> {
    let m: LibraryManifest = serde_json::from_slice(&read(&dir.join(MANIFEST))?)?;
    check_header(&m.kind, "library", m.schema_version)?;
    let mut entries = BTreeMap::new();
    for entry in m.pairs {
        let path = dir.join(&entry.file);
        let data = decode_f32(&read(&path)?, &path)?;
        if entry.count == 0
            || entry.block_len == 0
            || data.len() != entry.block_len * entry.count
            || entry.capture_ids.len() != entry.count
        {
            return Err(Error::Format(format!(
                "{}: expected {} blocks of {} samples",
                path.display(),
                entry.count,
                entry.block_len
            )));
        }
        let blocks = data
            .chunks_exact(entry.block_len)
            .zip(&entry.capture_ids)
            .map(|(row, &capture_id)| SignalBlock {
                key: entry.key.clone(),
                samples: row.to_vec(),
                capture_id,
            })
            .collect();
        entries.insert(entry.key, blocks);
    }
    let library = BlockLibrary {
        samples_per_cycle: m.samples_per_cycle,
        entries,
        provenance: Provenance {
            config_digest: m.config_digest,
            catalog_digest: m.catalog_digest,
            seed: m.seed,
        },
    };
    library.check_invariants()?;
    Ok(library)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBaseline {
    pub path_cycles: usize,
    pub samples_per_cycle: usize,
    #[serde(flatten)]
    pub baseline: Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub schema_version: u32,
    pub kind: String,
    pub kappa: usize,
    pub p_value_mode: PValueMode,
    pub baselines: Vec<PathBaseline>,
}

impl BaselineFile {
    pub fn new(kappa: usize, p_value_mode: PValueMode, baselines: Vec<PathBaseline>) -> Self {
        BaselineFile {
            schema_version: SCHEMA_VERSION,
            kind: "baselines".into(),
            kappa,
            p_value_mode,
            baselines,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: BaselineFile = serde_json::from_slice(&read(path)?)?;
        check_header(&f.kind, "baselines", f.schema_version)?;
        if f.baselines
            .iter()
            .any(|b| b.baseline.scores.windows(2).any(|w| w[0] > w[1]))
        {
            return Err(Error::Format(
                "baseline scores must be sorted ascending".into(),
            ));
        }
        Ok(f)
    }
}

/// Parses external captures: `csv` holds one trace per row, `triggers` one
/// loop-start sample index per row. Samples before the trigger are dropped,
/// so the resulting traces start at the loop.
pub fn ingest_csv(
    csv: &str,
    triggers: &str,
    program: &str,
    path_cycles: usize,
    samples_per_cycle: usize,
) -> Result<TraceSet> {
    let rows: Vec<(usize, &str)> = csv
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let trig: Vec<(usize, &str)> = triggers
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if rows.len() != trig.len() {
        return Err(Error::Format(format!(
            "{} trace rows but {} trigger indices",
            rows.len(),
            trig.len()
        )));
    }
    let traces = rows
        .iter()
        .zip(&trig)
        .map(|(&(line, row), &(tline, t))| {
            let samples = row
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad sample `{}`", v.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let start: usize = t.parse().map_err(|_| Error::Parse {
                line: tline,
                msg: format!("bad trigger index `{t}`"),
            })?;
            if start >= samples.len() {
                return Err(Error::Parse {
                    line: tline,
                    msg: format!("trigger {start} beyond a {}-sample trace", samples.len()),
                });
            }
            Ok(Trace {
                samples: samples[start..].to_vec(),
                samples_per_cycle,
                origin: Origin::Ingested,
                path_id: None,
                alignment: Some(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceSet {
        program: program.to_string(),
        origin: Origin::Ingested,
        path_id: None,
        path_cycles,
        samples_per_cycle,
        config_digest: None,
        traces,
    })
}

/// Sub-directory names used by [`save_dataset`].
pub const DATASET_DIRS: [&str; 5] = [
    "program_a",
    "program_b",
    "synthetic_b",
    "malicious_easy",
    "malicious_hard",
];

pub fn dataset_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

pub fn save_dataset(root: &Path, data: &Dataset, config_digest: Option<String>) -> Result<()> {
    let sets: [(&str, &Vec<Trace>, Origin, usize); 5] = [
        ("program_a", &data.a, Origin::Simulated, data.cycles_a),
        ("program_b", &data.b, Origin::Simulated, data.cycles_b),
        (
            "synthetic_b",
            &data.synthetic_b,
            Origin::Synthetic,
            data.cycles_b,
        ),
        (
            "malicious_easy",
            &data.easy,
            Origin::Simulated,
            data.cycles_b,
        ),
        (
            "malicious_hard",
            &data.hard,
            Origin::Simulated,
            data.cycles_b,
        ),
    ];
    for (name, traces, origin, cycles) in sets {
        save_traces(
            &dataset_dir(root, name),
            &TraceSet {
                program: name.into(),
                origin,
                path_id: traces.first().and_then(|t| t.path_id),
                path_cycles: cycles,
                samples_per_cycle: data.samples_per_cycle,
                config_digest: config_digest.clone(),
                traces: traces.clone(),
            },
        )?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut sets = DATASET_DIRS
        .iter()
        .map(|name| load_traces(&dataset_dir(root, name)))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || sets.next().expect("five sets");
    let (a, b, s, e, h) = (next(), next(), next(), next(), next());
    if [&b, &s, &e, &h]
        .iter()
        .any(|x| x.samples_per_cycle != a.samples_per_cycle)
    {
        return Err(Error::Format(
            "corpus sets disagree on samples_per_cycle".into(),
        ));
    }
    Ok(Dataset {
        samples_per_cycle: a.samples_per_cycle,
        cycles_a: a.path_cycles,
        cycles_b: b.path_cycles,
        a: a.traces,
        b: b.traces,
        synthetic_b: s.traces,
        easy: e.traces,
        hard: h.traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_crops_at_trigger() {
        let set = ingest_csv("0,0,1,2,3\n5,1,2\n", "2\n0\n", "ext", 1, 3).unwrap();
        assert_eq!(set.traces[0].samples, vec![1.0, 2.0, 3.0]);
        assert_eq!(set.traces[1].samples, vec![5.0, 1.0, 2.0]);
        assert!(set.traces.iter().all(|t| t.origin == Origin::Ingested));
    }

    #[test]
    fn ingest_errors() {
        assert!(matches!(
            ingest_csv("1,2\n", "", "x", 1, 2),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            ingest_csv("1,2\n1,zz\n", "0\n0\n", "x", 1, 2),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ingest_csv("1,2\n", "2\n", "x", 1, 2),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

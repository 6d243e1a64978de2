//! Dataset container.
//!
//! ```text
//! CGNN-DATASET v1
//! config-sha256 <hex of the config block>
//! runs <count>
//! states-per-run <n_t + 1>
//! points <grid_n²>
//! config-bytes <length of the config block>
//! <config block: TOML of DatasetHeader>
//! END-HEADER
//! ```
//!
//! followed by `runs` binary records, all little-endian:
//! `u64 location, u64 location_ordinal, u64 direction_index, 3 × f64
//! direction`, then per state `f64 applied_force, f64 max_speed, f64
//! max_residual, points × 3 × f64 positions (mm)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::msm::{plan_dataset_excluding, simulate_runs, IndentationRun, MsmConfig, StaticState};
use crate::rng::Rng;

pub const DATASET_MAGIC: &str = "CGNN-DATASET";
pub const DATASET_VERSION: u32 = 1;

/// Runs simulated in parallel before being flushed to disk.
const WRITE_BATCH: usize = 64;

/// What determines a dataset's contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub seed: u64,
    /// Grid points that were never indented.
    pub excluded_locations: Vec<usize>,
    pub msm: MsmConfig,
}

impl DatasetHeader {
    fn block(&self) -> String {
        toml::to_string(self).expect("header serialises")
    }

    /// SHA-256 of the canonical TOML block.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.block().as_bytes())
    }

    fn states_per_run(&self) -> usize {
        self.msm.n_t + 1
    }

    fn num_points(&self) -> usize {
        self.msm.num_points()
    }
}

/// Streams runs into a temporary file and renames it into place on
/// [`DatasetWriter::finish`]. Dropping an unfinished writer leaves nothing
/// behind.
pub struct DatasetWriter {
    header: DatasetHeader,
    expected_runs: usize,
    written: usize,
    path: PathBuf,
    out: BufWriter<NamedTempFile>,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: DatasetHeader, num_runs: usize) -> Result<Self> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut out = BufWriter::new(NamedTempFile::new_in(dir)?);
        let block = header.block();
        write!(
            out,
            "{DATASET_MAGIC} v{DATASET_VERSION}\nconfig-sha256 {}\nruns {num_runs}\nstates-per-run {}\npoints {}\nconfig-bytes {}\n{block}END-HEADER\n",
            sha256_hex(block.as_bytes()),
            header.states_per_run(),
            header.num_points(),
            block.len(),
        )?;
        Ok(DatasetWriter { header, expected_runs: num_runs, written: 0, path: path.to_path_buf(), out })
    }

    pub fn append(&mut self, run: &IndentationRun) -> Result<()> {
        if self.written == self.expected_runs {
            return Err(Error::InvalidArgument(format!("dataset already holds its {} runs", self.expected_runs)));
        }
        if run.states.len() != self.header.states_per_run() {
            return Err(Error::shape(&[run.states.len()], &[self.header.states_per_run()], "dataset run states"));
        }
        let mut buf = Vec::with_capacity(48 + run.states.len() * (24 + self.header.num_points() * 24));
        for v in [run.location, run.location_ordinal, run.direction_index] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for c in run.direction {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for s in &run.states {
            if s.positions.len() != self.header.num_points() {
                return Err(Error::shape(&[s.positions.len()], &[self.header.num_points()], "dataset state points"));
            }
            for v in [s.applied_force, s.max_speed, s.max_residual] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for p in &s.positions {
                for c in p {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.written != self.expected_runs {
            return Err(Error::InvalidArgument(format!(
                "dataset declared {} runs but {} were written",
                self.expected_runs, self.written
            )));
        }
        let tmp = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

/// Summary of a [`simulate_to_file`] call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub runs: usize,
    /// Loaded (non-rest) static states.
    pub states: usize,
    /// Deepest contact displacement over all runs, mm.
    pub max_depth_mm: f64,
    pub run_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Plans the dataset for `header`, simulates it in batches and streams the
/// runs to `path`.
pub fn simulate_to_file(path: &Path, header: &DatasetHeader) -> Result<SimulationSummary> {
    let start = Instant::now();
    let mut rng = Rng::new(header.seed);
    let specs = plan_dataset_excluding(&header.msm, &mut rng, &header.excluded_locations)?;
    let mut writer = DatasetWriter::create(path, header.clone(), specs.len())?;
    let mut run_seconds = Vec::with_capacity(specs.len());
    let mut max_depth: f64 = 0.0;
    for batch in specs.chunks(WRITE_BATCH) {
        for (run, secs) in simulate_runs(&header.msm, batch)? {
            max_depth = run.contact_displacements().into_iter().fold(max_depth, f64::max);
            writer.append(&run)?;
            run_seconds.push(secs);
        }
    }
    writer.finish()?;
    Ok(SimulationSummary {
        runs: specs.len(),
        states: specs.len() * header.msm.n_t,
        max_depth_mm: max_depth,
        run_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

fn header_line<R: BufRead>(r: &mut R, key: &str) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let line = line.strip_suffix('\n').ok_or_else(|| Error::Format(format!("truncated header at '{key}'")))?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.to_string()),
        _ => Err(Error::Format(format!("expected header field '{key}', found '{line}'"))),
    }
}

fn parse_count(v: &str, key: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Format(format!("bad value '{v}' for '{key}'")))
}

struct Layout {
    header: DatasetHeader,
    hash: String,
    runs: usize,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Layout> {
    let version = header_line(r, DATASET_MAGIC).map_err(|_| Error::Format("not a dataset file".into()))?;
    if version != format!("v{DATASET_VERSION}") {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let hash = header_line(r, "config-sha256")?;
    let runs = parse_count(&header_line(r, "runs")?, "runs")?;
    let states = parse_count(&header_line(r, "states-per-run")?, "states-per-run")?;
    let points = parse_count(&header_line(r, "points")?, "points")?;
    let len = parse_count(&header_line(r, "config-bytes")?, "config-bytes")?;
    let mut block = vec![0u8; len];
    r.read_exact(&mut block)?;
    let mut end = String::new();
    r.read_line(&mut end)?;
    if end != "END-HEADER\n" {
        return Err(Error::Format("missing END-HEADER".into()));
    }
    let found = sha256_hex(&block);
    if found != hash {
        return Err(Error::HashMismatch { expected: hash, found });
    }
    let text = String::from_utf8(block).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let header: DatasetHeader = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if header.states_per_run() != states || header.num_points() != points {
        return Err(Error::Format("header counts disagree with the config block".into()));
    }
    Ok(Layout { header, hash, runs })
}

/// Header and config hash without loading the runs.
pub fn read_dataset_header(path: &Path) -> Result<(DatasetHeader, String)> {
    let layout = read_header(&mut BufReader::new(File::open(path)?))?;
    Ok((layout.header, layout.hash))
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64], buf: &mut Vec<u8>) -> Result<()> {
    buf.resize(out.len() * 8, 0);
    r.read_exact(buf).map_err(|_| Error::Format("dataset payload is truncated".into()))?;
    for (o, b) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(b.try_into().expect("8 bytes"));
    }
    Ok(())
}

/// Header, config hash and every run.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, String, Vec<IndentationRun>)> {
    let mut r = BufReader::new(File::open(path)?);
    let layout = read_header(&mut r)?;
    let (states, points) = (layout.header.states_per_run(), layout.header.num_points());
    let mut buf = Vec::new();
    let mut runs = Vec::with_capacity(layout.runs);
    for _ in 0..layout.runs {
        let mut ids = [0u8; 24];
        r.read_exact(&mut ids).map_err(|_| Error::Format("dataset payload is truncated".into()))?;
        let id = |i: usize| u64::from_le_bytes(ids[i * 8..i * 8 + 8].try_into().expect("8 bytes")) as usize;
        let mut direction = [0.0; 3];
        read_f64s(&mut r, &mut direction, &mut buf)?;
        let mut recorded = Vec::with_capacity(states);
        let mut coords = vec![0.0; points * 3];
        for _ in 0..states {
            let mut meta = [0.0; 3];
            read_f64s(&mut r, &mut meta, &mut buf)?;
            read_f64s(&mut r, &mut coords, &mut buf)?;
            recorded.push(StaticState {
                positions: coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                applied_force: meta[0],
                max_speed: meta[1],
                max_residual: meta[2],
            });
        }
        let run = IndentationRun {
            location: id(0),
            location_ordinal: id(1),
            direction_index: id(2),
            direction,
            states: recorded,
        };
        if run.location >= points {
            return Err(Error::Format(format!("run location {} outside the {points}-point grid", run.location)));
        }
        runs.push(run);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last run".into()));
    }
    Ok((layout.header, layout.hash, runs))
}

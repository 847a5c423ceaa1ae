//! On-disk session datasets.
//!
//! A session is a directory:
//!
//! ```text
//! <session>/
//!   annotations.csv      subject,task,kind,start_s,end_s
//!   calibration.txt      sx sy tx ty (NIR -> FIR)
//!   landmarks.csv        timestamp_s,nose_x,nose_y,chin_y,valid
//!   reference.csv        timestamp_s,thorax,abdomen
//!   metadata.csv         key,value              (optional)
//!   nir/timestamps.csv   file,timestamp_s       (+ 16-bit grayscale PNG frames)
//!   fir/timestamps.csv   file,timestamp_s
//!   signals/ta_fir.csv   timestamp_s,value      (optional, extracted signals)
//!   signals/rm_nir.csv   timestamp_s,p00,p01,...
//!   signals/rm_fir.csv   timestamp_s,p00,p01,...
//! ```
//!
//! `annotations.csv` always names the subject and task; a session without
//! apnea events has a single row with empty `kind`, `start_s` and `end_s`.
//! Frame intensities map linearly from `[0, 1]` onto the full 16-bit range.
//! Floating-point values are written in shortest round-trip form, so a
//! write/read cycle is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{extract_signals, PipelineConfig, SessionSignals, SessionVideo, WindowRecord, RECORD_COLUMNS};
use crate::protocol::{ApneaInterval, ApneaKind, Task};
use crate::roi::{AffineTransform, LandmarkFrame};
use crate::signals::VelocityProfileSet;
use crate::sim::{synth_frames, synth_signals, SessionSpec};
use crate::timebase::{check_times, Frame, FrameSource, RespSignal, SignalSource, Spectrum};

pub const ANNOTATIONS: &str = "annotations.csv";
pub const CALIBRATION: &str = "calibration.txt";
pub const LANDMARKS: &str = "landmarks.csv";
pub const REFERENCE: &str = "reference.csv";
pub const METADATA: &str = "metadata.csv";
pub const TIMESTAMPS: &str = "timestamps.csv";
pub const SIGNALS_DIR: &str = "signals";

const ANNOTATION_COLUMNS: [&str; 5] = ["subject", "task", "kind", "start_s", "end_s"];
const LANDMARK_COLUMNS: [&str; 5] = ["timestamp_s", "nose_x", "nose_y", "chin_y", "valid"];
const REFERENCE_COLUMNS: [&str; 3] = ["timestamp_s", "thorax", "abdomen"];
const METADATA_COLUMNS: [&str; 2] = ["key", "value"];
const TIMESTAMP_COLUMNS: [&str; 2] = ["file", "timestamp_s"];

/// Subject, task and annotations of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub subject: String,
    pub task: Task,
    pub apnea_intervals: Vec<ApneaInterval>,
    /// Free-form key/value pairs, e.g. `sex`, used to group metrics.
    pub metadata: BTreeMap<String, String>,
}

fn spectrum_dir(s: Spectrum) -> &'static str {
    match s {
        Spectrum::Nir => "nir",
        Spectrum::Fir => "fir",
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(path, format!("line {line}: not a finite number: {field:?}")))
}

/// Rows of a CSV file whose header must start with `columns`.
fn read_table(path: &Path, columns: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::format(path, "file is missing or unreadable"),
        _ => Error::from(e),
    })?;
    let header = rdr.headers()?.clone();
    if header.len() < columns.len() || header.iter().zip(columns).any(|(h, c)| h.trim() != *c) {
        return Err(Error::format(path, format!("expected header starting with {}", columns.join(","))));
    }
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(rows)
}

fn write_table<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse `annotations.csv` into subject, task and intervals.
pub fn read_annotations(path: &Path) -> Result<(String, Task, Vec<ApneaInterval>)> {
    let rows = read_table(path, &ANNOTATION_COLUMNS)?;
    let Some(first) = rows.first() else {
        return Err(Error::format(path, "no rows; subject and task are required"));
    };
    let subject = first[0].trim().to_string();
    if subject.is_empty() {
        return Err(Error::format(path, "empty subject id"));
    }
    let task: Task = first[1].trim().parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
    let mut intervals = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        if row[0].trim() != subject || row[1].trim() != first[1].trim() {
            return Err(Error::format(path, format!("line {line}: subject and task must match the first row")));
        }
        let kind = row.get(2).unwrap_or("").trim();
        if kind.is_empty() {
            continue;
        }
        let kind: ApneaKind = kind.parse().map_err(|e: Error| Error::format(path, format!("line {line}: {e}")))?;
        let start = parse_f64(path, line, row.get(3).unwrap_or(""))?;
        let end = parse_f64(path, line, row.get(4).unwrap_or(""))?;
        if !(end > start && start >= 0.0) {
            return Err(Error::format(path, format!("line {line}: interval [{start}, {end}] is empty or negative")));
        }
        intervals.push(ApneaInterval { start, end, kind });
    }
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok((subject, task, intervals))
}

pub fn write_annotations(path: &Path, subject: &str, task: Task, intervals: &[ApneaInterval]) -> Result<()> {
    let rows: Vec<Vec<String>> = if intervals.is_empty() {
        vec![vec![subject.into(), task.name().into(), String::new(), String::new(), String::new()]]
    } else {
        intervals
            .iter()
            .map(|a| {
                vec![subject.into(), task.name().into(), a.kind.name().into(), fmt_f64(a.start), fmt_f64(a.end)]
            })
            .collect()
    };
    write_table(path, &ANNOTATION_COLUMNS, rows)
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let rows = read_table(path, &METADATA_COLUMNS)?;
    let mut out = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let key = row[0].trim();
        if key.is_empty() || out.insert(key.to_string(), row.get(1).unwrap_or("").trim().to_string()).is_some() {
            return Err(Error::format(path, format!("line {}: empty or duplicate key", i + 2)));
        }
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    write_table(path, &METADATA_COLUMNS, metadata.iter().map(|(k, v)| vec![k.clone(), v.clone()]))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkFrame>> {
    let rows = read_table(path, &LANDMARK_COLUMNS)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        let num = |k: usize| parse_f64(path, line, row.get(k).unwrap_or(""));
        let valid = match row.get(4).unwrap_or("").trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(path, format!("line {line}: valid must be 0 or 1, got {other:?}"))),
        };
        out.push(LandmarkFrame { timestamp: num(0)?, nose: (num(1)?, num(2)?), chin_y: num(3)?, valid });
    }
    let times: Vec<f64> = out.iter().map(|l| l.timestamp).collect();
    check_times(&times).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out)
}

pub fn write_landmarks(path: &Path, landmarks: &[LandmarkFrame]) -> Result<()> {
    write_table(
        path,
        &LANDMARK_COLUMNS,
        landmarks.iter().map(|l| {
            vec![
                fmt_f64(l.timestamp),
                fmt_f64(l.nose.0),
                fmt_f64(l.nose.1),
                fmt_f64(l.chin_y),
                u8::from(l.valid).to_string(),
            ]
        }),
    )
}

/// Read a CSV of `timestamp_s` followed by one or more value columns.
fn read_columns(path: &Path, first: &[&str]) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let rows = read_table(path, first)?;
    let header: Vec<String> = csv::Reader::from_path(path)?.headers()?.iter().map(str::to_string).collect();
    let ncol = header.len() - 1;
    if ncol == 0 {
        return Err(Error::format(path, "no value columns"));
    }
    let mut times = Vec::with_capacity(rows.len());
    let mut cols = vec![Vec::with_capacity(rows.len()); ncol];
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        if row.len() != ncol + 1 {
            return Err(Error::format(path, format!("line {line}: expected {} fields", ncol + 1)));
        }
        times.push(parse_f64(path, line, &row[0])?);
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(parse_f64(path, line, &row[c + 1])?);
        }
    }
    check_times(&times).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header[1..].to_vec(), times, cols))
}

fn write_columns(path: &Path, header: &[&str], times: &[f64], cols: &[&[f64]]) -> Result<()> {
    write_table(
        path,
        header,
        times.iter().enumerate().map(|(i, t)| {
            let mut row = vec![fmt_f64(*t)];
            row.extend(cols.iter().map(|c| fmt_f64(c[i])));
            row
        }),
    )
}

/// Thorax and abdomen effort from `reference.csv`.
pub fn read_reference(path: &Path) -> Result<(RespSignal, RespSignal)> {
    let (_, times, cols) = read_columns(path, &REFERENCE_COLUMNS)?;
    let thorax = RespSignal::new(SignalSource::RefThorax, times.clone(), cols[0].clone())?;
    let abdomen = RespSignal::new(SignalSource::RefAbdomen, times, cols[1].clone())?;
    Ok((thorax, abdomen))
}

pub fn write_reference(path: &Path, thorax: &RespSignal, abdomen: &RespSignal) -> Result<()> {
    if thorax.times() != abdomen.times() {
        return Err(Error::InvalidParameter("thorax and abdomen must share timestamps".into()));
    }
    write_columns(path, &REFERENCE_COLUMNS, thorax.times(), &[thorax.values(), abdomen.values()])
}

pub fn read_ta(path: &Path) -> Result<RespSignal> {
    let (_, times, cols) = read_columns(path, &["timestamp_s", "value"])?;
    RespSignal::new(SignalSource::TaFir, times, cols.into_iter().next().unwrap_or_default())
}

pub fn write_ta(path: &Path, signal: &RespSignal) -> Result<()> {
    write_columns(path, &["timestamp_s", "value"], signal.times(), &[signal.values()])
}

pub fn read_profiles(path: &Path, source: SignalSource) -> Result<VelocityProfileSet> {
    let (_, times, profiles) = read_columns(path, &["timestamp_s"])?;
    Ok(VelocityProfileSet { source, times, profiles })
}

pub fn write_profiles(path: &Path, set: &VelocityProfileSet) -> Result<()> {
    let names: Vec<String> = (0..set.profiles.len()).map(|p| format!("p{p:02}")).collect();
    let header: Vec<&str> = std::iter::once("timestamp_s").chain(names.iter().map(String::as_str)).collect();
    let cols: Vec<&[f64]> = set.profiles.iter().map(Vec::as_slice).collect();
    write_columns(path, &header, &set.times, &cols)
}

/// Frames stored as image files, decoded on demand.
#[derive(Debug, Clone)]
pub struct DiskFrames {
    spectrum: Spectrum,
    dims: (usize, usize),
    times: Vec<f64>,
    paths: Vec<PathBuf>,
}

impl DiskFrames {
    /// Open the frame directory of one spectrum, checking that timestamps
    /// increase and every listed file exists.
    pub fn open(dir: &Path, spectrum: Spectrum) -> Result<Self> {
        let index = dir.join(TIMESTAMPS);
        let rows = read_table(&index, &TIMESTAMP_COLUMNS)?;
        if rows.is_empty() {
            return Err(Error::format(&index, "no frames listed"));
        }
        let mut times = Vec::with_capacity(rows.len());
        let mut paths = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let file = dir.join(row[0].trim());
            if !file.is_file() {
                return Err(Error::format(&index, format!("line {}: {} does not exist", i + 2, file.display())));
            }
            paths.push(file);
            times.push(parse_f64(&index, i + 2, row.get(1).unwrap_or(""))?);
        }
        check_times(&times).map_err(|e| Error::format(&index, e.to_string()))?;
        let (w, h) = image::image_dimensions(&paths[0])?;
        Ok(DiskFrames { spectrum, dims: (w as usize, h as usize), times, paths })
    }
}

impl FrameSource for DiskFrames {
    fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn timestamps(&self) -> &[f64] {
        &self.times
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("frame {index} of {}", self.paths.len())))?;
        let img = image::open(path)?.into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (w, h) != self.dims {
            return Err(Error::format(path, format!("frame is {w}x{h}, expected {}x{}", self.dims.0, self.dims.1)));
        }
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / f64::from(u16::MAX)).collect();
        Frame::new(w, h, data)
    }
}

fn encode_frame(frame: &Frame, path: &Path) -> Result<()> {
    let px: Vec<u16> = frame.data.iter().map(|v| (v.clamp(0.0, 1.0) * f64::from(u16::MAX)).round() as u16).collect();
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(frame.width as u32, frame.height as u32, px)
        .ok_or_else(|| Error::InvalidParameter("frame buffer size mismatch".into()))?;
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    img.write_with_encoder(PngEncoder::new_with_quality(file, CompressionType::Fast, FilterType::Sub))?;
    Ok(())
}

/// Write every frame of `source` plus its timestamp index into `dir`.
pub fn write_frames(dir: &Path, source: &dyn FrameSource) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..source.len()).map(|i| format!("{i:06}.png")).collect();
    names.par_iter().enumerate().try_for_each(|(i, name)| encode_frame(&source.frame(i)?, &dir.join(name)))?;
    write_table(
        &dir.join(TIMESTAMPS),
        &TIMESTAMP_COLUMNS,
        names.into_iter().zip(source.timestamps()).map(|(n, t)| vec![n, fmt_f64(*t)]),
    )
}

/// A session directory with its annotations loaded.
#[derive(Debug, Clone)]
pub struct SessionDir {
    pub root: PathBuf,
    pub meta: SessionMeta,
}

impl SessionDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let (subject, task, apnea_intervals) = read_annotations(&root.join(ANNOTATIONS))?;
        let metadata_path = root.join(METADATA);
        let metadata = if metadata_path.exists() { read_metadata(&metadata_path)? } else { BTreeMap::new() };
        let id = root.file_name().map_or_else(|| subject.clone(), |n| n.to_string_lossy().into_owned());
        Ok(SessionDir { root, meta: SessionMeta { id, subject, task, apnea_intervals, metadata } })
    }

    pub fn has_frames(&self, s: Spectrum) -> bool {
        self.root.join(spectrum_dir(s)).join(TIMESTAMPS).is_file()
    }

    pub fn has_signals(&self) -> bool {
        let dir = self.root.join(SIGNALS_DIR);
        SignalSource::CAMERA.iter().any(|s| dir.join(format!("{}.csv", s.name())).is_file())
    }

    pub fn frames(&self, s: Spectrum) -> Result<Option<DiskFrames>> {
        if !self.has_frames(s) {
            return Ok(None);
        }
        DiskFrames::open(&self.root.join(spectrum_dir(s)), s).map(Some)
    }

    pub fn landmarks(&self) -> Result<Vec<LandmarkFrame>> {
        read_landmarks(&self.root.join(LANDMARKS))
    }

    pub fn calibration(&self) -> Result<AffineTransform> {
        let path = self.root.join(CALIBRATION);
        let text = fs::read_to_string(&path).map_err(|_| Error::format(&path, "file is missing or unreadable"))?;
        AffineTransform::parse_calibration(&text)
    }

    pub fn reference(&self) -> Result<Option<(RespSignal, RespSignal)>> {
        let path = self.root.join(REFERENCE);
        if !path.exists() {
            return Ok(None);
        }
        read_reference(&path).map(Some)
    }

    /// Camera signals stored under `signals/`; channels without a file are
    /// left empty.
    pub fn stored_signals(&self) -> Result<SessionSignals> {
        let dir = self.root.join(SIGNALS_DIR);
        let file = |s: SignalSource| Some(dir.join(format!("{}.csv", s.name()))).filter(|p| p.is_file());
        Ok(SessionSignals {
            ta_fir: file(SignalSource::TaFir).map(|p| read_ta(&p)).transpose()?,
            rm_nir: file(SignalSource::RmNir).map(|p| read_profiles(&p, SignalSource::RmNir)).transpose()?,
            rm_fir: file(SignalSource::RmFir).map(|p| read_profiles(&p, SignalSource::RmFir)).transpose()?,
            ref_thorax: None,
        })
    }

    /// Run signal extraction on the stored frames.
    pub fn extract(&self, cfg: &PipelineConfig) -> Result<SessionSignals> {
        let nir = self.frames(Spectrum::Nir)?;
        let fir = self.frames(Spectrum::Fir)?;
        if nir.is_none() && fir.is_none() {
            return Err(Error::format(&self.root, "no nir/ or fir/ frames"));
        }
        let landmarks = self.landmarks()?;
        let video = SessionVideo {
            nir: nir.as_ref().map(|f| f as &dyn FrameSource),
            fir: fir.as_ref().map(|f| f as &dyn FrameSource),
            landmarks: &landmarks,
            calibration: self.calibration()?,
        };
        extract_signals(&video, cfg)
    }

    /// Camera signals from `signals/` when present, extracted from frames
    /// otherwise, with the thorax reference attached.
    pub fn load_signals(&self, cfg: &PipelineConfig) -> Result<SessionSignals> {
        let mut signals = if self.has_signals() { self.stored_signals()? } else { self.extract(cfg)? };
        signals.ref_thorax = self.reference()?.map(|(thorax, _)| thorax);
        Ok(signals)
    }

    /// Check the layout without decoding frames.
    pub fn validate(&self) -> Result<()> {
        let mut any = self.has_signals();
        for s in [Spectrum::Nir, Spectrum::Fir] {
            any |= self.frames(s)?.is_some();
        }
        if !any {
            return Err(Error::format(&self.root, "neither frames nor extracted signals present"));
        }
        if self.has_frames(Spectrum::Nir) || self.has_frames(Spectrum::Fir) {
            self.landmarks()?;
            self.calibration()?;
        }
        if self.has_signals() {
            self.stored_signals()?;
        }
        self.reference()?;
        Ok(())
    }

    /// Write camera signals under `signals/`.
    pub fn write_signals(&self, signals: &SessionSignals) -> Result<()> {
        write_signals(&self.root, signals)
    }
}

pub fn write_signals(root: &Path, signals: &SessionSignals) -> Result<()> {
    let dir = root.join(SIGNALS_DIR);
    fs::create_dir_all(&dir)?;
    if let Some(ta) = &signals.ta_fir {
        write_ta(&dir.join("ta_fir.csv"), ta)?;
    }
    for p in [&signals.rm_nir, &signals.rm_fir].into_iter().flatten() {
        write_profiles(&dir.join(format!("{}.csv", p.source.name())), p)?;
    }
    Ok(())
}

/// Write a simulated session into `root`: annotations, metadata and the
/// reference belts, plus either rendered video (with landmarks and
/// calibration) or the analytic camera signals under `signals/`.
pub fn write_simulated(
    root: &Path,
    spec: &SessionSpec,
    frames: bool,
    metadata: &BTreeMap<String, String>,
) -> Result<SessionDir> {
    fs::create_dir_all(root)?;
    let signals = synth_signals(spec)?;
    write_annotations(&root.join(ANNOTATIONS), &spec.subject.id, spec.task, &spec.apnea_intervals)?;
    if !metadata.is_empty() {
        write_metadata(&root.join(METADATA), metadata)?;
    }
    write_reference(&root.join(REFERENCE), &signals.ref_thorax, &signals.ref_abdomen)?;
    if frames {
        let video = synth_frames(spec)?;
        write_frames(&root.join(spectrum_dir(Spectrum::Nir)), &video.nir)?;
        write_frames(&root.join(spectrum_dir(Spectrum::Fir)), &video.fir)?;
        write_landmarks(&root.join(LANDMARKS), &video.landmarks)?;
        fs::write(root.join(CALIBRATION), video.calibration.to_calibration_string())?;
    } else {
        write_signals(root, &SessionSignals::from(&signals))?;
    }
    SessionDir::open(root)
}

/// Sessions under `root`: `root` itself when it holds an `annotations.csv`,
/// otherwise every immediate subdirectory that does, in name order.
pub fn discover_sessions(root: &Path) -> Result<Vec<SessionDir>> {
    if root.join(ANNOTATIONS).is_file() {
        return Ok(vec![SessionDir::open(root)?]);
    }
    if !root.is_dir() {
        return Err(Error::format(root, "not a directory"));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ANNOTATIONS).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no session directories found"));
    }
    dirs.into_iter().map(SessionDir::open).collect()
}

/// Write the per-window table.
pub fn write_records(path: &Path, records: &[WindowRecord]) -> Result<()> {
    write_table(path, &RECORD_COLUMNS, records.iter().map(WindowRecord::to_fields))
}

pub fn read_records(path: &Path) -> Result<Vec<WindowRecord>> {
    let rows = read_table(path, &RECORD_COLUMNS)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let fields: Vec<&str> = row.iter().collect();
            WindowRecord::from_fields(&fields).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect()
}

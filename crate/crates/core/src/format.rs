//! On-disk formats: the survey container (binary or CSV) and the submap map file.
//!
//! Binary survey layout, little-endian:
//!
//! ```text
//! magic "BSURVEY\0" | version u32 | flags u32 (bit 0: truth present) | ping count u64
//! "PING" | per ping: timestamp f64, beam count u32, beams as 3 x f64
//! "DRNV" | per ping: x y z roll pitch yaw as f64
//! "TRUE" | per ping: x y z roll pitch yaw as f64   (only with bit 0)
//! ```
//!
//! Map file: magic "BSMAP001" | submap count u64 | per submap: id u64, ping
//! range start/end u64, anchor as 6 x f64, point count u64, points as 3 x f64.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::measurement::{validate_pings, Ping, Submap};

pub const SURVEY_MAGIC: &[u8; 8] = b"BSURVEY\0";
pub const SURVEY_VERSION: u32 = 1;
pub const MAP_MAGIC: &[u8; 8] = b"BSMAP001";
pub const SURVEY_CSV_HEADER: &str = "# bathy-slam survey csv v1";

const CSV_COLUMNS: &str = "ping,timestamp,dr_x,dr_y,dr_z,dr_roll,dr_pitch,dr_yaw,\
truth_x,truth_y,truth_z,truth_roll,truth_pitch,truth_yaw,beam_x,beam_y,beam_z";

/// Pings with their DR poses and, for synthetic data, the true poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    /// Each ping's `sensor_pose` is its DR pose.
    pub pings: Vec<Ping>,
    pub truth: Option<Vec<Pose3>>,
}

impl Survey {
    pub fn new(pings: Vec<Ping>, truth: Option<Vec<Pose3>>) -> Result<Self> {
        validate_pings(&pings)?;
        if let Some(t) = &truth {
            if t.len() != pings.len() {
                return Err(Error::InvalidInput(format!(
                    "{} truth poses for {} pings",
                    t.len(),
                    pings.len()
                )));
            }
        }
        Ok(Self { pings, truth })
    }

    pub fn dr_poses(&self) -> Vec<Pose3> {
        self.pings.iter().map(|p| p.sensor_pose).collect()
    }

    pub fn beam_count(&self) -> usize {
        self.pings.iter().map(|p| p.beams.len()).sum()
    }
}

fn pose_fields(p: &Pose3) -> [f64; 6] {
    [p.x, p.y, p.z, p.roll, p.pitch, p.yaw]
}

fn pose_from(v: &[f64]) -> Pose3 {
    Pose3::new(v[0], v[1], v[2], v[3], v[4], v[5])
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn pose(&mut self, p: &Pose3) {
        for v in pose_fields(p) {
            self.f64(v);
        }
    }
    fn point(&mut self, p: &Point3<f64>) {
        self.f64(p.x);
        self.f64(p.y);
        self.f64(p.z);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            path: Default::default(),
            detail: format!("at byte {}: {}", self.pos, detail.into()),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.bad(format!("truncated, wanted {n} more bytes")));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(item_bytes as u64) > left {
            return Err(self.bad(format!("count {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn pose(&mut self) -> Result<Pose3> {
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = self.f64()?;
        }
        Ok(pose_from(&v))
    }
    fn point(&mut self) -> Result<Point3<f64>> {
        Ok(Point3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn tag(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(self.bad(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.bad(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_survey(survey: &Survey) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(SURVEY_MAGIC);
    w.u32(SURVEY_VERSION);
    w.u32(u32::from(survey.truth.is_some()));
    w.u64(survey.pings.len() as u64);
    w.bytes(b"PING");
    for p in &survey.pings {
        w.f64(p.timestamp);
        w.u32(p.beams.len() as u32);
        for b in &p.beams {
            w.point(b);
        }
    }
    w.bytes(b"DRNV");
    for p in &survey.pings {
        w.pose(&p.sensor_pose);
    }
    if let Some(truth) = &survey.truth {
        w.bytes(b"TRUE");
        for t in truth {
            w.pose(t);
        }
    }
    w.0
}

pub fn decode_survey(data: &[u8]) -> Result<Survey> {
    let mut r = Reader { data, pos: 0, kind: "survey" };
    if r.take(8)? != SURVEY_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != SURVEY_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    if flags > 1 {
        return Err(r.bad(format!("unknown flags {flags:#x}")));
    }
    let n = r.count(12)?;
    r.tag(b"PING")?;
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let t = r.f64()?;
        let beams = r.u32()? as usize;
        let pts = (0..beams).map(|_| r.point()).collect::<Result<Vec<_>>>()?;
        raw.push((t, pts));
    }
    r.tag(b"DRNV")?;
    let dr = (0..n).map(|_| r.pose()).collect::<Result<Vec<_>>>()?;
    let truth = if flags & 1 == 1 {
        r.tag(b"TRUE")?;
        Some((0..n).map(|_| r.pose()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.finish()?;
    let pings = raw
        .into_iter()
        .zip(dr)
        .map(|((timestamp, beams), sensor_pose)| Ping { timestamp, sensor_pose, beams })
        .collect();
    Survey::new(pings, truth)
}

/// One row per beam; pose columns repeat per ping, truth columns empty when absent.
pub fn survey_to_csv(survey: &Survey) -> String {
    let mut out = format!("{SURVEY_CSV_HEADER}\n{CSV_COLUMNS}\n");
    for (k, p) in survey.pings.iter().enumerate() {
        let dr = pose_fields(&p.sensor_pose);
        let truth = survey.truth.as_ref().map(|t| pose_fields(&t[k]));
        for b in &p.beams {
            let _ = write!(out, "{k},{:e}", p.timestamp);
            for v in dr {
                let _ = write!(out, ",{v:e}");
            }
            match truth {
                Some(t) => t.iter().for_each(|v| {
                    let _ = write!(out, ",{v:e}");
                }),
                None => out.push_str(",,,,,,"),
            }
            let _ = writeln!(out, ",{:e},{:e},{:e}", b.x, b.y, b.z);
        }
    }
    out
}

pub fn survey_from_csv(text: &str) -> Result<Survey> {
    let bad = |line: usize, d: String| Error::Format {
        kind: "survey csv",
        path: Default::default(),
        detail: format!("line {line}: {d}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SURVEY_CSV_HEADER => {}
        _ => return Err(bad(1, format!("expected header {SURVEY_CSV_HEADER:?}"))),
    }
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_COLUMNS => {}
        _ => return Err(bad(2, "unexpected column names".into())),
    }
    let mut pings: Vec<Ping> = Vec::new();
    let mut truth: Vec<Option<Pose3>> = Vec::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 17 {
            return Err(bad(ln, format!("expected 17 fields, got {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(ln, format!("field {}: {e}", k + 1)));
        let ping: usize = f[0].parse().map_err(|e| bad(ln, format!("ping index: {e}")))?;
        let beam = Point3::new(num(14)?, num(15)?, num(16)?);
        if ping + 1 == pings.len() {
            pings[ping].beams.push(beam);
            continue;
        }
        if ping != pings.len() {
            return Err(bad(ln, format!("ping index {ping} out of order")));
        }
        let dr = (2..8).map(num).collect::<Result<Vec<_>>>()?;
        let t = if f[8..14].iter().all(|s| s.is_empty()) {
            None
        } else {
            Some(pose_from(&(8..14).map(num).collect::<Result<Vec<_>>>()?))
        };
        pings.push(Ping { timestamp: num(1)?, sensor_pose: pose_from(&dr), beams: vec![beam] });
        truth.push(t);
    }
    let truth = if truth.iter().all(Option::is_some) && !truth.is_empty() {
        Some(truth.into_iter().flatten().collect())
    } else if truth.iter().all(Option::is_none) {
        None
    } else {
        return Err(bad(0, "truth columns present for some pings only".into()));
    };
    Survey::new(pings, truth)
}

pub fn encode_submaps(submaps: &[Submap]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(MAP_MAGIC);
    w.u64(submaps.len() as u64);
    for s in submaps {
        w.u64(s.id as u64);
        w.u64(s.ping_range.start as u64);
        w.u64(s.ping_range.end as u64);
        w.pose(&s.anchor);
        w.u64(s.points.len() as u64);
        for p in &s.points {
            w.point(p);
        }
    }
    w.0
}

pub fn decode_submaps(data: &[u8]) -> Result<Vec<Submap>> {
    let mut r = Reader { data, pos: 0, kind: "submap map" };
    if r.take(8)? != MAP_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let n = r.count(88)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64()? as usize;
        let start = r.u64()? as usize;
        let end = r.u64()? as usize;
        let anchor = r.pose()?;
        let count = r.count(24)?;
        let points = (0..count).map(|_| r.point()).collect::<Result<Vec<_>>>()?;
        out.push(Submap::new(id, anchor, points, start..end));
    }
    r.finish()?;
    Ok(out)
}

/// What a file on disk turned out to be.
#[derive(Debug, Clone)]
pub enum Loaded {
    Survey(Survey),
    Submaps(Vec<Submap>),
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { kind, detail, .. } => Error::Format { kind, path: path.to_path_buf(), detail },
        other => other,
    }
}

/// Reads a survey (binary or CSV) or a submap map file, by content.
pub fn load(path: &Path) -> Result<Loaded> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if data.starts_with(SURVEY_MAGIC) {
        decode_survey(&data).map(Loaded::Survey)
    } else if data.starts_with(MAP_MAGIC) {
        decode_submaps(&data).map(Loaded::Submaps)
    } else if data.starts_with(SURVEY_CSV_HEADER.as_bytes()) {
        let text = String::from_utf8(data).map_err(|e| Error::Format {
            kind: "survey csv",
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        survey_from_csv(&text).map(Loaded::Survey)
    } else {
        Err(Error::Format {
            kind: "input",
            path: path.to_path_buf(),
            detail: "not a survey or submap map file (unrecognised header)".into(),
        })
    };
    parsed.map_err(|e| with_path(e, path))
}

pub fn load_survey(path: &Path) -> Result<Survey> {
    match load(path)? {
        Loaded::Survey(s) => Ok(s),
        Loaded::Submaps(_) => Err(Error::Format {
            kind: "survey",
            path: path.to_path_buf(),
            detail: "file holds submaps, not a survey".into(),
        }),
    }
}

/// Writes `data` to `path`, creating parent directories.
pub fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Writes a survey as CSV when the extension is `.csv`, binary otherwise.
pub fn save_survey(path: &Path, survey: &Survey) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_file(path, survey_to_csv(survey))
    } else {
        write_file(path, encode_survey(survey))
    }
}

//! Dataset directory layout and CSV formats.
//!
//! | file               | columns                                   |
//! |--------------------|-------------------------------------------|
//! | `imu.csv`          | `t,gx,gy,gz,ax,ay,az,mx,my,mz` (mag optional, empty) |
//! | `dvl.csv`          | `t,vx,vy,vz`                              |
//! | `mbes.csv`         | `t,beam_angle,range`, one row per beam    |
//! | `truth_poses.csv`  | `t,x,y,z,qw,qx,qy,qz` (optional)          |
//! | `metadata.json`    | name, d and declared units (optional)     |
//!
//! Consecutive `mbes.csv` rows sharing a timestamp form one ping. Floats
//! are written in shortest round-trip form, so loading and saving a
//! canonical dataset reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dead_reckoning::{DvlSample, ImuSample};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::submap::{Beam, SonarPing};

pub const IMU_FILE: &str = "imu.csv";
pub const DVL_FILE: &str = "dvl.csv";
pub const MBES_FILE: &str = "mbes.csv";
pub const TRUTH_FILE: &str = "truth_poses.csv";
pub const METADATA_FILE: &str = "metadata.json";

const IMU_HEADER: [&str; 10] = ["t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"];
const DVL_HEADER: [&str; 4] = ["t", "vx", "vy", "vz"];
const MBES_HEADER: [&str; 3] = ["t", "beam_angle", "range"];
const TRUTH_HEADER: [&str; 8] = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"];

/// Units every file is read in.
pub fn canonical_units() -> BTreeMap<String, String> {
    [
        ("time", "s"),
        ("angle", "rad"),
        ("length", "m"),
        ("angular_velocity", "rad/s"),
        ("acceleration", "m/s^2"),
        ("velocity", "m/s"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    /// Evaluation distance, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default = "canonical_units")]
    pub units: BTreeMap<String, String>,
    /// Free-form extras (seed, scenario parameters, ...).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Metadata {
    pub fn new(name: impl Into<String>, d: Option<f64>) -> Self {
        Self {
            name: name.into(),
            d,
            units: canonical_units(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn check_units(&self) -> Result<()> {
        let canonical = canonical_units();
        for (quantity, found) in &self.units {
            if let Some(expected) = canonical.get(quantity) {
                if expected != found {
                    return Err(Error::UnitMismatch {
                        quantity: quantity.clone(),
                        expected: expected.clone(),
                        found: found.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<DvlSample>,
    pub pings: Vec<SonarPing>,
    pub truth: Option<Vec<Pose>>,
    pub metadata: Metadata,
}

struct Rows {
    file: PathBuf,
    reader: csv::Reader<File>,
}

impl Rows {
    fn open(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let file = dir.join(name);
        if !file.is_file() {
            return Err(Error::MissingFile(file));
        }
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(&file)
            .map_err(|e| parse_error(&file, 1, e.to_string()))?;
        let found: Vec<String> = reader
            .headers()
            .map_err(|e| parse_error(&file, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if found != header {
            return Err(parse_error(
                &file,
                1,
                format!("expected header {}, found {}", header.join(","), found.join(",")),
            ));
        }
        Ok(Self { file, reader })
    }

    /// Calls `f(line, fields)` for each data row with exactly `width` fields.
    fn each(mut self, width: usize, mut f: impl FnMut(u64, &[&str]) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self
                .reader
                .read_record(&mut record)
                .map_err(|e| parse_error(&self.file, e.position().map_or(0, |p| p.line()), e.to_string()))?;
            if !more {
                return Ok(());
            }
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != width {
                return Err(parse_error(
                    &self.file,
                    line,
                    format!("expected {width} columns, found {}", record.len()),
                ));
            }
            let fields: Vec<&str> = record.iter().collect();
            f(line, &fields).map_err(|e| match e {
                Error::Parse { message, .. } => parse_error(&self.file, line, message),
                other => other,
            })?;
        }
    }
}

fn parse_error(file: &Path, line: u64, message: String) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message,
    }
}

fn number(field: &str, column: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(Path::new(""), 0, format!("column {column}: '{field}' is not a finite number"))),
    }
}

fn vector(fields: &[&str], columns: &[&str]) -> Result<Vector3<f64>> {
    Ok(Vector3::new(
        number(fields[0], columns[0])?,
        number(fields[1], columns[1])?,
        number(fields[2], columns[2])?,
    ))
}

fn increasing(last: &mut f64, t: f64, strict: bool) -> Result<()> {
    let ok = if strict { t > *last } else { t >= *last };
    if !ok {
        return Err(parse_error(
            Path::new(""),
            0,
            format!("timestamp {t} does not follow {last}"),
        ));
    }
    *last = t;
    Ok(())
}

pub fn read_imu(dir: &Path) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    Rows::open(dir, IMU_FILE, &IMU_HEADER)?.each(IMU_HEADER.len(), |_, f| {
        let t = number(f[0], "t")?;
        increasing(&mut last, t, true)?;
        let mag = &f[7..10];
        let magnetic_field = match mag.iter().filter(|s| s.is_empty()).count() {
            3 => None,
            0 => Some(vector(mag, &IMU_HEADER[7..])?),
            _ => return Err(parse_error(Path::new(""), 0, "magnetometer columns partially empty".into())),
        };
        out.push(ImuSample {
            timestamp: t,
            angular_velocity: vector(&f[1..4], &IMU_HEADER[1..4])?,
            linear_acceleration: vector(&f[4..7], &IMU_HEADER[4..7])?,
            magnetic_field,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_dvl(dir: &Path) -> Result<Vec<DvlSample>> {
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    Rows::open(dir, DVL_FILE, &DVL_HEADER)?.each(DVL_HEADER.len(), |_, f| {
        let t = number(f[0], "t")?;
        increasing(&mut last, t, true)?;
        out.push(DvlSample {
            timestamp: t,
            velocity: vector(&f[1..4], &DVL_HEADER[1..4])?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_mbes(dir: &Path) -> Result<Vec<SonarPing>> {
    let mut out: Vec<SonarPing> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    Rows::open(dir, MBES_FILE, &MBES_HEADER)?.each(MBES_HEADER.len(), |_, f| {
        let t = number(f[0], "t")?;
        increasing(&mut last, t, false)?;
        let beam = Beam {
            angle: number(f[1], "beam_angle")?,
            range: number(f[2], "range")?,
        };
        match out.last_mut() {
            Some(ping) if ping.timestamp == t => ping.beams.push(beam),
            _ => out.push(SonarPing {
                timestamp: t,
                beams: vec![beam],
            }),
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn read_truth(dir: &Path) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    Rows::open(dir, TRUTH_FILE, &TRUTH_HEADER)?.each(TRUTH_HEADER.len(), |_, f| {
        let t = number(f[0], "t")?;
        increasing(&mut last, t, true)?;
        let position = vector(&f[1..4], &TRUTH_HEADER[1..4])?;
        let q = Quaternion::new(
            number(f[4], "qw")?,
            number(f[5], "qx")?,
            number(f[6], "qy")?,
            number(f[7], "qz")?,
        );
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(parse_error(Path::new(""), 0, format!("quaternion norm {} is not 1", q.norm())));
        }
        // keep already-normalised input bit for bit
        let q = if (q.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        let pose = Pose::from_quaternion(&q, position, t)
            .map_err(|e| parse_error(Path::new(""), 0, e.to_string()))?;
        out.push(pose);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_metadata(dir: &Path) -> Result<Option<Metadata>> {
    let path = dir.join(METADATA_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let metadata: Metadata = serde_json::from_reader(std::io::BufReader::new(File::open(&path)?))
        .map_err(|e| parse_error(&path, e.line() as u64, e.to_string()))?;
    metadata.check_units()?;
    Ok(Some(metadata))
}

/// Loads and validates a dataset directory. `imu.csv`, `dvl.csv` and
/// `mbes.csv` are required.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let metadata = match read_metadata(dir)? {
        Some(m) => m,
        None => Metadata::new(
            dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            None,
        ),
    };
    let truth = if dir.join(TRUTH_FILE).is_file() {
        Some(read_truth(dir)?)
    } else {
        None
    };
    Ok(Dataset {
        imu: read_imu(dir)?,
        dvl: read_dvl(dir)?,
        pings: read_mbes(dir)?,
        truth,
        metadata,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn write_imu<W: Write>(mut out: W, imu: &[ImuSample]) -> Result<()> {
    writeln!(out, "{}", IMU_HEADER.join(","))?;
    for s in imu {
        let (g, a) = (s.angular_velocity, s.linear_acceleration);
        write!(out, "{},{},{},{},{},{},{},", s.timestamp, g.x, g.y, g.z, a.x, a.y, a.z)?;
        match s.magnetic_field {
            Some(m) => writeln!(out, "{},{},{}", m.x, m.y, m.z)?,
            None => writeln!(out, ",,")?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_dvl<W: Write>(mut out: W, dvl: &[DvlSample]) -> Result<()> {
    writeln!(out, "{}", DVL_HEADER.join(","))?;
    for s in dvl {
        writeln!(out, "{},{},{},{}", s.timestamp, s.velocity.x, s.velocity.y, s.velocity.z)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_mbes<W: Write>(mut out: W, pings: &[SonarPing]) -> Result<()> {
    writeln!(out, "{}", MBES_HEADER.join(","))?;
    for p in pings {
        for b in &p.beams {
            writeln!(out, "{},{},{}", p.timestamp, b.angle, b.range)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_truth<W: Write>(mut out: W, poses: &[Pose]) -> Result<()> {
    writeln!(out, "{}", TRUTH_HEADER.join(","))?;
    for p in poses {
        let (t, q) = (p.position(), p.quaternion());
        let q = q.quaternion();
        writeln!(out, "{},{},{},{},{},{},{},{}", p.timestamp(), t.x, t.y, t.z, q.w, q.i, q.j, q.k)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metadata<W: Write>(mut out: W, metadata: &Metadata) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, metadata)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_imu(create(dir, IMU_FILE)?, &dataset.imu)?;
    write_dvl(create(dir, DVL_FILE)?, &dataset.dvl)?;
    write_mbes(create(dir, MBES_FILE)?, &dataset.pings)?;
    if let Some(truth) = &dataset.truth {
        write_truth(create(dir, TRUTH_FILE)?, truth)?;
    }
    write_metadata(create(dir, METADATA_FILE)?, &dataset.metadata)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn minimal(dir: &Path) {
        write(dir, IMU_FILE, "t,gx,gy,gz,ax,ay,az,mx,my,mz\n0,0,0,0,0,0,-9.8,,,\n0.1,0,0,0.1,0,0,-9.8,0.5,0,-0.86\n");
        write(dir, DVL_FILE, "t,vx,vy,vz\n0,1,0,0\n");
        write(dir, MBES_FILE, "t,beam_angle,range\n0,-0.1,20\n0,0.1,20.5\n0.5,0,19\n");
    }

    #[test]
    fn loads_minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        minimal(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.imu.len(), 2);
        assert_eq!(ds.imu[0].magnetic_field, None);
        assert!(ds.imu[1].magnetic_field.is_some());
        assert_eq!(ds.pings.len(), 2);
        assert_eq!(ds.pings[0].beams.len(), 2);
        assert!(ds.truth.is_none());
        assert_eq!(ds.metadata.units, canonical_units());
    }

    #[test]
    fn short_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        minimal(dir.path());
        write(dir.path(), IMU_FILE, "t,gx,gy,gz,ax,ay,az,mx,my,mz\n0,0,0,0,0,0,-9.8,,,\n0.1,0,0,0,0\n");
        let err = load_dataset(dir.path()).unwrap_err();
        match &err {
            Error::Parse { file, line, .. } => {
                assert!(file.ends_with(IMU_FILE));
                assert_eq!(*line, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("imu.csv:3"));
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        minimal(dir.path());
        fs::remove_file(dir.path().join(DVL_FILE)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));

        minimal(dir.path());
        write(dir.path(), DVL_FILE, "t,vx,vy,vz\n1,1,0,0\n0.5,1,0,0\n");
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 3, .. })));

        minimal(dir.path());
        write(dir.path(), MBES_FILE, "t,beam_angle,range\n0,0,20\n0,x,20\n");
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 3, .. })));

        minimal(dir.path());
        write(dir.path(), DVL_FILE, "t,vel_x,vy,vz\n0,1,0,0\n");
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 1, .. })));

        minimal(dir.path());
        write(dir.path(), METADATA_FILE, r#"{"name":"x","units":{"angle":"deg"}}"#);
        assert!(matches!(load_dataset(dir.path()), Err(Error::UnitMismatch { .. })));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        minimal(dir.path());
        write(dir.path(), TRUTH_FILE, "t,x,y,z,qw,qx,qy,qz\n0,1.5,-2,0,1,0,0,0\n");
        let first = load_dataset(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_dataset(out.path(), &first).unwrap();
        let second = load_dataset(out.path()).unwrap();
        assert_eq!(first.imu, second.imu);
        assert_eq!(first.pings, second.pings);
        let again = tempfile::tempdir().unwrap();
        save_dataset(again.path(), &second).unwrap();
        for name in [IMU_FILE, DVL_FILE, MBES_FILE, TRUTH_FILE, METADATA_FILE] {
            assert_eq!(fs::read(out.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap(), "{name}");
        }
    }
}

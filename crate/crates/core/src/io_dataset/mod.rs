//! Sensor logs on disk, TUM trajectories and the synthetic world generator.
//!
//! A log is a directory of CSV files:
//!
//! | file           | columns                                         |
//! |----------------|-------------------------------------------------|
//! | `radar.csv`    | `t,x,y,z,doppler,intensity,scan_id`              |
//! | `imu.csv`      | `t,wx,wy,wz,ax,ay,az[,qw,qx,qy,qz]`              |
//! | `joints.csv`   | `t,q0..q11,dq0..dq11` (legs FL, FR, RL, RR)      |
//! | `contacts.csv` | `t,c0,c1,c2,c3` (0 or 1)                         |
//! | `gt.txt`       | TUM trajectory, optional                         |
//! | `meta.txt`     | `key = value` lines, optional                    |
//!
//! Units are seconds, metres and radians. Doppler is positive for receding
//! points.

pub mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::geom::{Rot3, Vec3};
use crate::leg_kin::{ContactState, JointState, NUM_LEGS};
use crate::radar_ego::{RadarPoint, RadarScan};

pub const RADAR_FILE: &str = "radar.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const JOINTS_FILE: &str = "joints.csv";
pub const CONTACTS_FILE: &str = "contacts.csv";
pub const GT_FILE: &str = "gt.txt";
pub const META_FILE: &str = "meta.txt";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: u64,
        msg: String,
    },
    #[error("{file}: {msg}")]
    Schema { file: String, msg: String },
    #[error("{file}:{line}: timestamp goes backwards")]
    Monotonicity { file: String, line: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Body frame, rad/s.
    pub angular_velocity: Vec3,
    /// Specific force in the body frame, m/s^2.
    pub linear_acceleration: Vec3,
    /// World-from-body attitude reported by the IMU, when available.
    pub orientation: Option<Rot3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub p: Vec3,
    pub r: Rot3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Total distance travelled, m.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].p - w[0].p).norm())
            .sum()
    }

    pub fn duration(&self) -> f64 {
        match (self.poses.first(), self.poses.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorLog {
    pub radar: Vec<RadarScan>,
    pub imu: Vec<ImuSample>,
    pub joints: Vec<JointState>,
    pub contacts: Vec<ContactState>,
    pub ground_truth: Option<Trajectory>,
    pub meta: BTreeMap<String, String>,
}

impl SensorLog {
    /// First and last timestamp over all sensor streams.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut see = |t: f64| {
            lo = lo.min(t);
            hi = hi.max(t);
        };
        self.radar.iter().for_each(|s| see(s.timestamp));
        self.imu.iter().for_each(|s| see(s.timestamp));
        self.joints.iter().for_each(|s| see(s.timestamp));
        self.contacts.iter().for_each(|s| see(s.timestamp));
        (lo <= hi).then_some((lo, hi))
    }

    pub fn summary(&self) -> String {
        let span = self.time_span().map(|(a, b)| b - a).unwrap_or(0.0);
        format!(
            "{} radar scans, {} imu, {} joint, {} contact samples over {:.2} s",
            self.radar.len(),
            self.imu.len(),
            self.joints.len(),
            self.contacts.len(),
            span
        )
    }
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<(u64, Vec<f64>)>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, names: &[String]) -> Result<Vec<usize>, LogError> {
        names
            .iter()
            .map(|n| {
                self.column(n).ok_or_else(|| LogError::Schema {
                    file: self.file.clone(),
                    msg: format!("missing column `{n}`"),
                })
            })
            .collect()
    }

    fn check_sorted(&self) -> Result<(), LogError> {
        let t = self.require(&["t".to_string()])?[0];
        for w in self.rows.windows(2) {
            if w[1].1[t] < w[0].1[t] {
                return Err(LogError::Monotonicity {
                    file: self.file.clone(),
                    line: w[1].0,
                });
            }
        }
        Ok(())
    }
}

fn read_table(dir: &Path, name: &str) -> Result<Table, LogError> {
    let path = dir.join(name);
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| LogError::Schema {
            file: name.to_string(),
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| LogError::Parse {
            file: name.to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let vals = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|e| LogError::Parse {
                        file: name.to_string(),
                        line,
                        msg: format!("`{f}`: {e}"),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((line, vals));
    }
    Ok(Table {
        file: name.to_string(),
        headers,
        rows,
    })
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn parse_radar(t: &Table) -> Result<Vec<RadarScan>, LogError> {
    t.check_sorted()?;
    let c = t.require(&strs(&[
        "t",
        "x",
        "y",
        "z",
        "doppler",
        "intensity",
        "scan_id",
    ]))?;
    let mut scans: Vec<RadarScan> = Vec::new();
    let mut current_id: Option<f64> = None;
    for (line, r) in &t.rows {
        let id = r[c[6]];
        if current_id != Some(id) {
            scans.push(RadarScan {
                timestamp: r[c[0]],
                points: Vec::new(),
            });
            current_id = Some(id);
        }
        let scan = scans.last_mut().expect("scan pushed above");
        if r[c[0]] != scan.timestamp {
            return Err(LogError::Parse {
                file: t.file.clone(),
                line: *line,
                msg: "points of one scan must share a timestamp".into(),
            });
        }
        scan.points.push(RadarPoint {
            position: Vec3::new(r[c[1]], r[c[2]], r[c[3]]),
            doppler: r[c[4]],
            intensity: r[c[5]],
        });
    }
    Ok(scans)
}

fn parse_imu(t: &Table) -> Result<Vec<ImuSample>, LogError> {
    t.check_sorted()?;
    let c = t.require(&strs(&["t", "wx", "wy", "wz", "ax", "ay", "az"]))?;
    let q = t.require(&strs(&["qw", "qx", "qy", "qz"])).ok();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let orientation = match &q {
            Some(q) if q.iter().all(|&k| r[k].is_finite()) => {
                let quat = Quaternion::new(r[q[0]], r[q[1]], r[q[2]], r[q[3]]);
                if quat.norm() < 1e-9 {
                    return Err(LogError::Parse {
                        file: t.file.clone(),
                        line: *line,
                        msg: "zero quaternion".into(),
                    });
                }
                Some(Rot3::from_quaternion(&UnitQuaternion::from_quaternion(
                    quat,
                )))
            }
            _ => None,
        };
        out.push(ImuSample {
            timestamp: r[c[0]],
            angular_velocity: Vec3::new(r[c[1]], r[c[2]], r[c[3]]),
            linear_acceleration: Vec3::new(r[c[4]], r[c[5]], r[c[6]]),
            orientation,
        });
    }
    Ok(out)
}

fn parse_joints(t: &Table) -> Result<Vec<JointState>, LogError> {
    t.check_sorted()?;
    let tc = t.require(&strs(&["t"]))?[0];
    let qc = t.require(&names("q", 3 * NUM_LEGS))?;
    let dc = t.require(&names("dq", 3 * NUM_LEGS))?;
    Ok(t.rows
        .iter()
        .map(|(_, r)| {
            let mut js = JointState {
                timestamp: r[tc],
                angles: [0.0; 3 * NUM_LEGS],
                velocities: [0.0; 3 * NUM_LEGS],
            };
            for k in 0..3 * NUM_LEGS {
                js.angles[k] = r[qc[k]];
                js.velocities[k] = r[dc[k]];
            }
            js
        })
        .collect())
}

fn parse_contacts(t: &Table) -> Result<Vec<ContactState>, LogError> {
    t.check_sorted()?;
    let tc = t.require(&strs(&["t"]))?[0];
    let cc = t.require(&names("c", NUM_LEGS))?;
    Ok(t.rows
        .iter()
        .map(|(_, r)| {
            let mut c = ContactState {
                timestamp: r[tc],
                in_contact: [false; NUM_LEGS],
            };
            for k in 0..NUM_LEGS {
                c.in_contact[k] = r[cc[k]] > 0.5;
            }
            c
        })
        .collect())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>, LogError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut meta = BTreeMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(meta)
}

/// Loads a log directory. `gt.txt` and `meta.txt` are optional.
pub fn load_log(dir: &Path) -> Result<SensorLog, LogError> {
    let radar = parse_radar(&read_table(dir, RADAR_FILE)?)?;
    let imu = parse_imu(&read_table(dir, IMU_FILE)?)?;
    let joints = parse_joints(&read_table(dir, JOINTS_FILE)?)?;
    let contacts = parse_contacts(&read_table(dir, CONTACTS_FILE)?)?;
    let gt_path = dir.join(GT_FILE);
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        read_meta(&meta_path)?
    } else {
        BTreeMap::new()
    };
    Ok(SensorLog {
        radar,
        imu,
        joints,
        contacts,
        ground_truth,
        meta,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, LogError> {
    let f = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> LogError + '_ {
    move |e| LogError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes a log directory. Values are printed in shortest round-trip form,
/// so `load_log` reproduces them exactly.
pub fn write_log(log: &SensorLog, dir: &Path) -> Result<(), LogError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join(RADAR_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "x", "y", "z", "doppler", "intensity", "scan_id"])
        .map_err(csv_io(&path))?;
    for (id, scan) in log.radar.iter().enumerate() {
        for p in &scan.points {
            w.write_record(&[
                scan.timestamp.to_string(),
                p.position.x.to_string(),
                p.position.y.to_string(),
                p.position.z.to_string(),
                p.doppler.to_string(),
                p.intensity.to_string(),
                id.to_string(),
            ])
            .map_err(csv_io(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(IMU_FILE);
    let mut w = csv_writer(&path)?;
    let with_q = log.imu.iter().any(|s| s.orientation.is_some());
    let mut header = strs(&["t", "wx", "wy", "wz", "ax", "ay", "az"]);
    if with_q {
        header.extend(strs(&["qw", "qx", "qy", "qz"]));
    }
    w.write_record(&header).map_err(csv_io(&path))?;
    for s in &log.imu {
        let mut rec = vec![s.timestamp.to_string()];
        rec.extend(s.angular_velocity.iter().map(|v| v.to_string()));
        rec.extend(s.linear_acceleration.iter().map(|v| v.to_string()));
        if with_q {
            match &s.orientation {
                Some(r) => {
                    let q = r.to_quaternion();
                    rec.extend([q.w, q.i, q.j, q.k].iter().map(|v| v.to_string()));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&rec).map_err(csv_io(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(JOINTS_FILE);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["t".to_string()];
    header.extend(names("q", 3 * NUM_LEGS));
    header.extend(names("dq", 3 * NUM_LEGS));
    w.write_record(&header).map_err(csv_io(&path))?;
    for s in &log.joints {
        let mut rec = vec![s.timestamp.to_string()];
        rec.extend(s.angles.iter().map(|v| v.to_string()));
        rec.extend(s.velocities.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(CONTACTS_FILE);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["t".to_string()];
    header.extend(names("c", NUM_LEGS));
    w.write_record(&header).map_err(csv_io(&path))?;
    for s in &log.contacts {
        let mut rec = vec![s.timestamp.to_string()];
        rec.extend(
            s.in_contact
                .iter()
                .map(|&c| if c { "1" } else { "0" }.to_string()),
        );
        w.write_record(&rec).map_err(csv_io(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    if let Some(gt) = &log.ground_truth {
        write_trajectory(gt, &dir.join(GT_FILE))?;
    }
    let path = dir.join(META_FILE);
    let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut meta = log.meta.clone();
    meta.entry("doppler_sign".into())
        .or_insert_with(|| "positive_receding".into());
    meta.entry("units".into())
        .or_insert_with(|| "s,m,rad".into());
    for (k, v) in &meta {
        writeln!(f, "{k} = {v}").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

/// `%.{sig}g`-style formatting: `sig` significant digits, trailing zeros removed.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        let mant = trim_zeros(mant);
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One TUM line: `timestamp tx ty tz qx qy qz qw`.
pub fn format_pose(p: &Pose) -> String {
    let q = p.r.to_quaternion();
    let f = |v: f64| format_sig(v, 9);
    format!(
        "{:.9} {} {} {} {} {} {} {}",
        p.timestamp,
        f(p.p.x),
        f(p.p.y),
        f(p.p.z),
        f(q.i),
        f(q.j),
        f(q.k),
        f(q.w)
    )
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), LogError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for p in &traj.poses {
        writeln!(f, "{}", format_pose(p)).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, LogError> {
    let file = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let f = File::open(path).map_err(io_err(path))?;
    let mut poses: Vec<Pose> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i as u64 + 1;
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| LogError::Parse {
                file: file.clone(),
                line: lineno,
                msg: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(LogError::Parse {
                file: file.clone(),
                line: lineno,
                msg: format!("expected 8 fields, got {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(LogError::Parse {
                file: file.clone(),
                line: lineno,
                msg: "zero quaternion".into(),
            });
        }
        if poses.last().is_some_and(|p| vals[0] < p.timestamp) {
            return Err(LogError::Monotonicity { file, line: lineno });
        }
        poses.push(Pose {
            timestamp: vals[0],
            p: Vec3::new(vals[1], vals[2], vals[3]),
            r: Rot3::from_quaternion(&UnitQuaternion::from_quaternion(q)),
        });
    }
    Ok(Trajectory { poses })
}

//! Timed pose lists and their CSV form `time,x,y,theta`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;

pub const TRAJECTORY_CSV_HEADER: &str = "time,x,y,theta";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub time: f64,
    pub pose: Pose2,
}

impl TimedPose {
    pub fn new(time: f64, pose: Pose2) -> Self {
        Self { time, pose }
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Parses numeric CSV rows under a header that must contain `columns` in order.
///
/// Extra trailing columns are ignored. Line numbers are 1-based and count the header.
pub fn read_numeric_csv<R: Read>(reader: R, columns: &[&str]) -> Result<Vec<Vec<f64>>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CsvError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let positions: Vec<usize> = columns
        .iter()
        .map(|c| {
            header.iter().position(|h| h == *c).ok_or_else(|| CsvError::Malformed {
                line: 1,
                message: format!("missing column `{c}`"),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CsvError::Malformed {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(CsvError::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let row = positions
            .iter()
            .map(|&i| {
                let field = &record[i];
                field.parse::<f64>().map_err(|_| CsvError::Malformed {
                    line,
                    message: format!("bad number `{field}` in column `{}`", &header[i]),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_trajectory_csv<W: Write>(poses: &[TimedPose], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
    for p in poses {
        writeln!(out, "{},{},{},{}", p.time, p.pose.x, p.pose.y, p.pose.theta)?;
    }
    out.flush()
}

pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<TimedPose>, CsvError> {
    let rows = read_numeric_csv(reader, &["time", "x", "y", "theta"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if let Some(prev) = out.last().map(|p: &TimedPose| p.time) {
            if r[0] < prev {
                return Err(CsvError::Malformed {
                    line: i + 2,
                    message: "timestamps must be non-decreasing".into(),
                });
            }
        }
        out.push(TimedPose::new(r[0], Pose2::new(r[1], r[2], r[3])));
    }
    Ok(out)
}

pub fn save_trajectory(poses: &[TimedPose], path: &Path) -> Result<(), CsvError> {
    let io = |source| CsvError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    write_trajectory_csv(poses, std::io::BufWriter::new(file)).map_err(io)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TimedPose>, CsvError> {
    let file = std::fs::File::open(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_trajectory_csv(std::io::BufReader::new(file))
}

/// Pose at time `t`, moving at constant twist between samples and clamped at the ends.
pub fn interpolate_pose(poses: &[TimedPose], t: f64) -> Pose2 {
    assert!(!poses.is_empty(), "interpolating an empty trajectory");
    let i = poses.partition_point(|p| p.time <= t);
    if i == 0 {
        return poses[0].pose;
    }
    if i == poses.len() {
        return poses[i - 1].pose;
    }
    let (a, b) = (&poses[i - 1], &poses[i]);
    let span = b.time - a.time;
    if span <= 0.0 || t == a.time {
        return a.pose;
    }
    let s = (t - a.time) / span;
    let (tx, ty, phi) = a.pose.between(&b.pose).log();
    a.pose.compose(&Pose2::exp(s * tx, s * ty, s * phi))
}

/// Cumulative travelled distance at each pose.
pub fn arc_lengths(poses: &[TimedPose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.pose.translation() - poses[i - 1].pose.translation()).norm();
        }
        out.push(acc);
    }
    out
}

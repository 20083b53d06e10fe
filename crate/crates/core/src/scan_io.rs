//! On-disk formats for [`PolarScan`].
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "RPSC"
//! version      u32      1
//! n_azimuth    u32
//! n_range      u32
//! gamma        f64
//! scan_time    f64
//! angles       n_azimuth x f64
//! times        n_azimuth x f64
//! intensities  n_azimuth * n_range x f32, row-major by azimuth
//! ```
//!
//! The CSV variant is meant for hand-written fixtures: optional
//! `# gamma = ...` and `# scan_time = ...` comment lines, then one row per
//! azimuth `encoder_angle,azimuth_time,i_0,...,i_{N_r-1}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::preprocessing::PolarScan;

pub const SCAN_MAGIC: [u8; 4] = *b"RPSC";
pub const SCAN_VERSION: u32 = 1;
pub const SCAN_EXTENSION: &str = "rps";

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a polar scan file (bad magic)")]
    BadMagic,
    #[error("unsupported polar scan version {0}")]
    UnsupportedVersion(u32),
    #[error("polar scan truncated")]
    Truncated,
    #[error("invalid polar scan: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
}

fn truncated(e: std::io::Error) -> ScanIoError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ScanIoError::Truncated
    } else {
        ScanIoError::Io {
            path: PathBuf::new(),
            source: e,
        }
    }
}

pub fn write_scan<W: Write>(scan: &PolarScan, mut w: W) -> std::io::Result<()> {
    w.write_all(&SCAN_MAGIC)?;
    w.write_u32::<LittleEndian>(SCAN_VERSION)?;
    w.write_u32::<LittleEndian>(scan.n_azimuth as u32)?;
    w.write_u32::<LittleEndian>(scan.n_range as u32)?;
    w.write_f64::<LittleEndian>(scan.gamma)?;
    w.write_f64::<LittleEndian>(scan.scan_time)?;
    for a in &scan.encoder_angles {
        w.write_f64::<LittleEndian>(*a)?;
    }
    for t in &scan.azimuth_times {
        w.write_f64::<LittleEndian>(*t)?;
    }
    let mut buf = Vec::with_capacity(scan.intensities.len() * 4);
    for v in &scan.intensities {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_scan<R: Read>(mut r: R) -> Result<PolarScan, ScanIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != SCAN_MAGIC {
        return Err(ScanIoError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != SCAN_VERSION {
        return Err(ScanIoError::UnsupportedVersion(version));
    }
    let n_azimuth = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let n_range = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let gamma = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let scan_time = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let n_bins = n_azimuth
        .checked_mul(n_range)
        .filter(|n| *n <= (1 << 31))
        .ok_or_else(|| ScanIoError::Invalid(format!("implausible size {n_azimuth} x {n_range}")))?;
    let mut encoder_angles = vec![0.0; n_azimuth];
    r.read_f64_into::<LittleEndian>(&mut encoder_angles).map_err(truncated)?;
    let mut azimuth_times = vec![0.0; n_azimuth];
    r.read_f64_into::<LittleEndian>(&mut azimuth_times).map_err(truncated)?;
    let mut intensities = vec![0.0f32; n_bins];
    r.read_f32_into::<LittleEndian>(&mut intensities).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(truncated)? != 0 {
        return Err(ScanIoError::Invalid("trailing bytes after intensity block".into()));
    }
    let scan = PolarScan {
        n_azimuth,
        n_range,
        gamma,
        scan_time,
        encoder_angles,
        azimuth_times,
        intensities,
    };
    scan.validate().map_err(ScanIoError::Invalid)?;
    Ok(scan)
}

pub fn save_scan(scan: &PolarScan, path: &Path) -> Result<(), ScanIoError> {
    let io = |source| ScanIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_scan(scan, BufWriter::new(file)).map_err(io)
}

/// Loads a scan, choosing the CSV reader for `.csv` files.
pub fn load_scan(path: &Path) -> Result<PolarScan, ScanIoError> {
    let io = |source| ScanIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.extension().is_some_and(|e| e == "csv") {
        let text = std::fs::read_to_string(path).map_err(io)?;
        return parse_scan_csv(&text);
    }
    let file = File::open(path).map_err(io)?;
    read_scan(BufReader::new(file)).map_err(|e| match e {
        ScanIoError::Io { source, .. } => ScanIoError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Scan files in `dir` (binary or CSV), sorted by file name.
pub fn list_scan_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e == SCAN_EXTENSION || e == "csv")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scan_"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn scan_file_name(index: usize) -> String {
    format!("scan_{index:06}.{SCAN_EXTENSION}")
}

pub fn parse_scan_csv(text: &str) -> Result<PolarScan, ScanIoError> {
    let mut gamma = 0.0596;
    let mut scan_time: Option<f64> = None;
    let mut angles = Vec::new();
    let mut times = Vec::new();
    let mut intensities = Vec::new();
    let mut n_range: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ScanIoError::Csv {
            line: line_no,
            message,
        };
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let value: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad number `{}`", v.trim())))?;
                match k.trim() {
                    "gamma" => gamma = value,
                    "scan_time" => scan_time = Some(value),
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad number `{}`", f.trim())))
            })
            .collect::<Result<_, _>>()?;
        if fields.len() < 3 {
            return Err(err("expected angle, time and at least one intensity".into()));
        }
        let row_len = fields.len() - 2;
        match n_range {
            None => n_range = Some(row_len),
            Some(n) if n != row_len => {
                return Err(err(format!("expected {n} intensities, found {row_len}")));
            }
            _ => {}
        }
        angles.push(fields[0]);
        times.push(fields[1]);
        intensities.extend(fields[2..].iter().map(|v| *v as f32));
    }
    let n_range = n_range.ok_or(ScanIoError::Csv {
        line: 0,
        message: "no azimuth rows".into(),
    })?;
    let scan = PolarScan {
        n_azimuth: angles.len(),
        n_range,
        gamma,
        scan_time: scan_time.unwrap_or(times[0]),
        encoder_angles: angles,
        azimuth_times: times,
        intensities,
    };
    scan.validate().map_err(ScanIoError::Invalid)?;
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PolarScan {
        let mut scan = PolarScan::zeros(4, 6, 0.0596, 12.5, 0.25);
        scan.row_mut(1)[3] = 81.5;
        scan.row_mut(3)[0] = 200.0;
        scan.encoder_angles[2] += 1e-3;
        scan
    }

    #[test]
    fn binary_roundtrip_and_size() {
        let scan = sample();
        let mut bytes = Vec::new();
        write_scan(&scan, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 12 + 16 + 4 * 16 + 24 * 4);
        assert_eq!(read_scan(bytes.as_slice()).unwrap(), scan);
    }

    #[test]
    fn binary_errors() {
        let mut bytes = Vec::new();
        write_scan(&sample(), &mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_scan(cut), Err(ScanIoError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_scan(bad.as_slice()), Err(ScanIoError::BadMagic)));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_scan(ver.as_slice()), Err(ScanIoError::UnsupportedVersion(9))));
    }

    #[test]
    fn csv_fixture() {
        let text = "# gamma = 0.05\n# scan_time = 3.0\n0.0, 3.0, 10, 70, 65, 80\n1.5, 3.1, 0, 0, 0, 90\n";
        let scan = parse_scan_csv(text).unwrap();
        assert_eq!((scan.n_azimuth, scan.n_range), (2, 4));
        assert_eq!(scan.gamma, 0.05);
        assert_eq!(scan.scan_time, 3.0);
        assert_eq!(scan.row(0), &[10.0, 70.0, 65.0, 80.0]);
        let err = parse_scan_csv("0,0,1,2\n0.1,0.1,1\n").unwrap_err();
        assert!(matches!(err, ScanIoError::Csv { line: 2, .. }));
        let err = parse_scan_csv("0,0,1,x\n").unwrap_err();
        assert!(matches!(err, ScanIoError::Csv { line: 1, .. }));
    }
}

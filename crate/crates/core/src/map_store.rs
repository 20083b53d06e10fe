//! Teach graph persistence.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic "RTRM" | version u32 | node_count u32
//! meta section:  len u32 | utf-8 key=value text | crc32 u32
//! node sections: len u32 | payload | crc32 u32        (node_count times)
//!
//! node payload:
//!   id u64 | x f64 | y f64 | theta f64 | timestamp f64 | n_points u32
//!   per point: mean 2xf64 | normal 2xf64 | cov_xx cov_xy cov_yy f64 | n_samples u32
//! ```
//!
//! Surface points are kept in each node's own frame, so replacing node poses
//! never touches stored geometry.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix2, Vector2};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::Pose2;
use crate::odometry::Keyframe;
use crate::surface_points::{SurfacePoint, SurfacePointSet};

pub const MAP_MAGIC: [u8; 4] = *b"RTRM";
pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("refusing to save an empty map")]
    EmptyGraph,
    #[error("no pose given for node {0}")]
    MissingNode(usize),
    #[error("node {0} given more than once")]
    DuplicateNode(usize),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapMeta {
    /// Pipeline configuration used to build the map, as `key = value` text.
    pub config: String,
    /// Timestamp of the last scan that went into the map.
    pub created_at: f64,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeachGraph {
    pub nodes: Vec<Keyframe>,
    pub meta: MapMeta,
}

impl TeachGraph {
    pub fn new(nodes: Vec<Keyframe>, mut config: String, created_at: f64) -> Self {
        if !config.is_empty() && !config.ends_with('\n') {
            config.push('\n');
        }
        Self {
            nodes,
            meta: MapMeta {
                config,
                created_at,
                format_version: MAP_VERSION,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: String| Err(MapError::InvariantViolation(m));
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node at position {i} has id {}", node.id));
            }
            if !node.pose.is_finite() || !node.timestamp.is_finite() {
                return bad(format!("node {i} has a non-finite pose or timestamp"));
            }
            if node.surface_points.is_empty() {
                return bad(format!("node {i} has no surface points"));
            }
            for sp in &node.surface_points.points {
                let finite = sp.mean.iter().chain(sp.normal.iter()).chain(sp.covariance.iter()).all(|v| v.is_finite());
                if !finite {
                    return bad(format!("node {i} has a non-finite surface point"));
                }
            }
        }
        Ok(())
    }
}

fn meta_text(meta: &MapMeta) -> String {
    format!("created_at = {:?}\n{}", meta.created_at, meta.config)
}

fn node_payload(node: &Keyframe) -> Vec<u8> {
    let n = node.surface_points.len();
    let mut buf = Vec::with_capacity(44 + n * 60);
    buf.write_u64::<LittleEndian>(node.id as u64).unwrap();
    for v in [node.pose.x, node.pose.y, node.pose.theta, node.timestamp] {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    buf.write_u32::<LittleEndian>(n as u32).unwrap();
    for sp in &node.surface_points.points {
        for v in [
            sp.mean.x,
            sp.mean.y,
            sp.normal.x,
            sp.normal.y,
            sp.covariance[(0, 0)],
            sp.covariance[(0, 1)],
            sp.covariance[(1, 1)],
        ] {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
        buf.write_u32::<LittleEndian>(sp.n_samples as u32).unwrap();
    }
    buf
}

fn write_section<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(payload.len() as u32)?;
    w.write_all(payload)?;
    w.write_u32::<LittleEndian>(crc32fast::hash(payload))
}

pub fn write_map<W: Write>(graph: &TeachGraph, mut w: W) -> Result<(), MapError> {
    if graph.is_empty() {
        return Err(MapError::EmptyGraph);
    }
    graph.validate()?;
    let io = |source| MapError::Io {
        path: PathBuf::new(),
        source,
    };
    w.write_all(&MAP_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(MAP_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(graph.nodes.len() as u32).map_err(io)?;
    write_section(&mut w, meta_text(&graph.meta).as_bytes()).map_err(io)?;
    for node in &graph.nodes {
        write_section(&mut w, &node_payload(node)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn corrupt(what: &str) -> impl Fn(std::io::Error) -> MapError + '_ {
    move |e| MapError::CorruptPayload(format!("{what}: {e}"))
}

fn read_section<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>, MapError> {
    let len = r.read_u32::<LittleEndian>().map_err(corrupt(what))? as usize;
    if len > (1 << 30) {
        return Err(MapError::CorruptPayload(format!("{what}: implausible length {len}")));
    }
    let mut payload = Vec::new();
    r.by_ref().take(len as u64).read_to_end(&mut payload).map_err(corrupt(what))?;
    if payload.len() != len {
        return Err(MapError::CorruptPayload(format!("{what}: truncated")));
    }
    let crc = r.read_u32::<LittleEndian>().map_err(corrupt(what))?;
    if crc != crc32fast::hash(&payload) {
        return Err(MapError::CorruptPayload(format!("{what}: checksum mismatch")));
    }
    Ok(payload)
}

fn parse_node(payload: &[u8]) -> Result<Keyframe, MapError> {
    let mut c = Cursor::new(payload);
    let short = corrupt("node payload");
    let id = c.read_u64::<LittleEndian>().map_err(&short)? as usize;
    let mut head = [0.0; 4];
    c.read_f64_into::<LittleEndian>(&mut head).map_err(&short)?;
    let n = c.read_u32::<LittleEndian>().map_err(&short)? as usize;
    if payload.len() != 44 + n * 60 {
        return Err(MapError::CorruptPayload(format!("node {id}: length does not match {n} points")));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = [0.0; 7];
        c.read_f64_into::<LittleEndian>(&mut v).map_err(&short)?;
        let n_samples = c.read_u32::<LittleEndian>().map_err(&short)? as usize;
        points.push(SurfacePoint {
            mean: Vector2::new(v[0], v[1]),
            normal: Vector2::new(v[2], v[3]),
            covariance: Matrix2::new(v[4], v[5], v[5], v[6]),
            n_samples,
        });
    }
    Ok(Keyframe {
        id,
        pose: Pose2 {
            x: head[0],
            y: head[1],
            theta: head[2],
        },
        surface_points: SurfacePointSet {
            points,
            origin_pose: Pose2::identity(),
        },
        timestamp: head[3],
    })
}

fn parse_meta(text: &str) -> Result<MapMeta, MapError> {
    let mut created_at = None;
    let mut config = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "created_at" => {
                created_at = Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| MapError::CorruptPayload(format!("bad created_at `{}`", v.trim())))?,
                );
            }
            _ => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    Ok(MapMeta {
        config,
        created_at: created_at.ok_or_else(|| MapError::CorruptPayload("meta lacks created_at".into()))?,
        format_version: MAP_VERSION,
    })
}

pub fn read_map<R: Read>(mut r: R) -> Result<TeachGraph, MapError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt("header"))?;
    if magic != MAP_MAGIC {
        return Err(MapError::VersionMismatch(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt("header"))?;
    if version != MAP_VERSION {
        return Err(MapError::VersionMismatch(format!("file version {version}, expected {MAP_VERSION}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(corrupt("header"))? as usize;
    let meta_bytes = read_section(&mut r, "meta")?;
    let meta_str = String::from_utf8(meta_bytes).map_err(|_| MapError::CorruptPayload("meta is not utf-8".into()))?;
    let meta = parse_meta(&meta_str)?;
    let mut nodes = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let payload = read_section(&mut r, &format!("node {i}"))?;
        nodes.push(parse_node(&payload)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(corrupt("trailer"))? != 0 {
        return Err(MapError::CorruptPayload("trailing bytes after last node".into()));
    }
    let graph = TeachGraph { nodes, meta };
    if graph.is_empty() {
        return Err(MapError::InvariantViolation("map has no nodes".into()));
    }
    graph.validate()?;
    Ok(graph)
}

pub fn save_map(graph: &TeachGraph, path: &Path) -> Result<(), MapError> {
    let mut buf = Vec::new();
    write_map(graph, &mut buf)?;
    std::fs::write(path, buf).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_map(path: &Path) -> Result<TeachGraph, MapError> {
    let bytes = std::fs::read(path).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_map(bytes.as_slice())
}

/// Replaces every node pose; `poses` must cover each node exactly once.
pub fn import_optimized_poses(graph: &TeachGraph, poses: &[(usize, Pose2)]) -> Result<TeachGraph, MapError> {
    let mut by_id = BTreeMap::new();
    for (id, pose) in poses {
        if *id >= graph.len() {
            return Err(MapError::UnknownNode(*id));
        }
        if by_id.insert(*id, *pose).is_some() {
            return Err(MapError::DuplicateNode(*id));
        }
    }
    let mut out = graph.clone();
    for node in &mut out.nodes {
        node.pose = *by_id.get(&node.id).ok_or(MapError::MissingNode(node.id))?;
    }
    out.validate()?;
    Ok(out)
}

#[derive(Serialize)]
struct PoseRecord {
    id: usize,
    timestamp: f64,
    x: f64,
    y: f64,
    theta: f64,
}

/// Node poses as a JSON array, for plotting.
pub fn poses_json(graph: &TeachGraph) -> String {
    let records: Vec<PoseRecord> = graph
        .nodes
        .iter()
        .map(|n| PoseRecord {
            id: n.id,
            timestamp: n.timestamp,
            x: n.pose.x,
            y: n.pose.y,
            theta: n.pose.theta,
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("pose records always serialize")
}

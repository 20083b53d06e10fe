use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub const BUILD_ID: &str = env!("RADAR_TR_BUILD_ID");

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub n_scans: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    pub fn from_latencies(latencies_ms: &[f64]) -> Option<Timing> {
        if latencies_ms.is_empty() {
            return None;
        }
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Timing {
            n_scans: n,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            p95_ms: p95,
            max_ms: sorted[n - 1],
        })
    }
}

/// Record of one command run, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub build_id: String,
    /// Pipeline configuration in effect, as `key = value` text.
    pub config: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub wall_clock_s: f64,
    pub timing: Option<Timing>,
    pub notes: Vec<String>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            arguments: std::env::args().skip(1).collect(),
            build_id: BUILD_ID.to_string(),
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            wall_clock_s: 0.0,
            timing: None,
            notes: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    /// Stops the clock and writes the manifest through a temporary file and a rename.
    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        if let Some(t) = self.started {
            self.wall_clock_s = t.elapsed().as_secs_f64();
        }
        let json = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        write_atomic(path, json.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

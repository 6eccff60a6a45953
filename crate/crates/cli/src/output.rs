//! CSV and JSON writers. Everything written here is a pure function of the
//! config, so reruns are byte-identical.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use cavwave::geometry::SpectralBasis;
use cavwave::membrane::ModalSeries;
use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `p[1,0]` style label of a basis mode.
pub fn mode_label(prefix: &str, basis: &SpectralBasis, n: usize) -> String {
    let idx: Vec<String> = basis.modes()[n].index.iter().map(|i| i.to_string()).collect();
    if idx.is_empty() {
        // point piston
        return format!("{prefix}[0]");
    }
    format!("{prefix}[{}]", idx.join(","))
}

/// Files written by one run, in write order.
pub struct OutDir {
    pub dir: PathBuf,
    pub written: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> io::Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.written.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        self.put(name, bytes)
    }

    /// RFC 4180 table with LF line endings.
    pub fn csv(&mut self, name: &str, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> io::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(header).map_err(io::Error::other)?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        self.put(name, bytes)
    }
}

/// `t`, then `re`/`im` columns per series channel, every `stride`-th sample.
pub fn complex_table(
    times: &[f64],
    labels: &[String],
    channels: &[&[Complex64]],
    stride: usize,
) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut header = vec!["t".to_string()];
    for l in labels {
        header.push(format!("{l}_re"));
        header.push(format!("{l}_im"));
    }
    let rows = (0..times.len())
        .step_by(stride)
        .map(|j| {
            let mut r = Vec::with_capacity(1 + 2 * channels.len());
            r.push(times[j]);
            for ch in channels {
                r.push(ch[j].re);
                r.push(ch[j].im);
            }
            r
        })
        .collect();
    (header, rows)
}

pub fn series_channels(s: &ModalSeries) -> Vec<&[Complex64]> {
    s.modes.iter().map(|m| m.as_slice()).collect()
}

//! Text and binary formats for densities, paths and trajectories.
//!
//! Density CSV: header `cell_index,value`, one row per cell.
//! Density binary (version 1): magic `VSCD`, `u32` version, `u64` cell count,
//! then the cells as `f64`, all little endian.
//! Path CSV: `s,cell_0,...,cell_{N-1}`.
//! Trajectory CSV: `t,energy,dissipation_running,min_cell,cell_0,...`.
//! Floats are written in Rust's shortest round-trip form. Loaded densities
//! with zero cells are boundary densities.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::metric::GeodesicPath;
use crate::state::StepDensity;

const MAGIC: &[u8; 4] = b"VSCD";
pub const BINARY_VERSION: u32 = 1;

pub fn density_to_csv(p: &StepDensity) -> String {
    let mut s = String::from("cell_index,value\n");
    for (i, v) in p.cells().iter().enumerate() {
        writeln!(s, "{i},{v}").expect("write to string");
    }
    s
}

/// Parses the density CSV; cells may be listed in any order but every index
/// in `0..N` must appear exactly once.
pub fn density_from_csv(text: &str) -> Result<StepDensity> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "cell_index,value" => {}
        other => return Err(Error::Parse(format!("expected header 'cell_index,value', got {other:?}"))),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let (Some(i), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse(format!("line {}: expected two fields", lineno + 2)));
        };
        let i: usize = i.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        let v: f64 = v.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        rows.push((i, v));
    }
    let n = rows.len();
    let mut cells = vec![f64::NAN; n];
    for (i, v) in rows {
        if i >= n || !cells[i].is_nan() {
            return Err(Error::Parse(format!("cell index {i} is out of range or repeated")));
        }
        cells[i] = v;
    }
    density_from_cells(cells)
}

pub fn density_to_bytes(p: &StepDensity) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * p.n());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.n() as u64).to_le_bytes());
    for v in p.cells() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn density_from_bytes(bytes: &[u8]) -> Result<StepDensity> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not a density dump (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return Err(Error::Parse(format!("unsupported density dump version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::Parse(format!("dump declares {n} cells but has {} payload bytes", bytes.len() - 16)));
    }
    let cells = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    density_from_cells(cells)
}

fn density_from_cells(cells: Vec<f64>) -> Result<StepDensity> {
    if cells.contains(&0.0) {
        StepDensity::boundary(cells)
    } else {
        StepDensity::new(cells)
    }
}

pub fn path_to_csv(path: &GeodesicPath) -> String {
    let n = path.knots.first().map_or(0, |k| k.n());
    let mut s = String::from("s");
    for i in 0..n {
        write!(s, ",cell_{i}").expect("write to string");
    }
    s.push('\n');
    for (si, q) in path.s.iter().zip(&path.knots) {
        write!(s, "{si}").expect("write to string");
        for v in q.cells() {
            write!(s, ",{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn trajectory_to_csv(tr: &Trajectory) -> String {
    let mut s = String::from("t,energy,dissipation_running,min_cell");
    for i in 0..tr.n {
        write!(s, ",cell_{i}").expect("write to string");
    }
    s.push('\n');
    for (((t, p), e), d) in tr.times.iter().zip(&tr.states).zip(&tr.energies).zip(&tr.dissipation) {
        write!(s, "{t},{e},{d},{}", p.min_cell()).expect("write to string");
        for v in p.cells() {
            write!(s, ",{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let p = StepDensity::new(vec![0.25, 1.75, 1.1, 0.9]).unwrap();
        let text = density_to_csv(&p);
        assert!(text.starts_with("cell_index,value\n0,0.25\n"));
        assert_eq!(density_from_csv(&text).unwrap(), p);
        assert!(density_from_csv("cell_index,value\n0,1\n0,1\n").is_err());
        assert!(density_from_csv("a,b\n").is_err());
        assert!(density_from_csv("cell_index,value\n0,0\n1,2\n").unwrap().is_boundary());
        assert!(density_from_csv("cell_index,value\n0,-1\n1,3\n").is_err());
    }

    #[test]
    fn binary_round_trip() {
        let p = StepDensity::new(vec![0.1, 1.9, 1.0 / 3.0, 5.0 / 3.0]).unwrap();
        let b = density_to_bytes(&p);
        assert_eq!(b.len(), 16 + 32);
        assert_eq!(density_from_bytes(&b).unwrap(), p);
        assert!(density_from_bytes(&b[..20]).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(density_from_bytes(&bad).is_err());
    }
}

//! Field persistence.
//!
//! Binary layout: one ASCII header line
//! `FIELD2D T1=<f64> T2=<f64> n1=<u32> n2=<u32> d=<usize>\n` followed by the
//! node values as little-endian `f64`, row-major in `(i, j)` with the `d`
//! components innermost. CSV layout: header `t1,t2,v_1..v_d`, one row per node.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, Path1D};

const MAGIC: &str = "FIELD2D";

pub fn write_field_binary(f: &Field2D, out: &mut impl Write) -> Result<()> {
    let g = f.grid();
    let [t1, t2] = g.horizons();
    let [n1, n2] = g.levels();
    writeln!(out, "{MAGIC} T1={t1:e} T2={t2:e} n1={n1} n2={n2} d={}", f.dim())?;
    let mut buf = Vec::with_capacity(f.values().len() * 8);
    for v in f.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()))
}

pub fn read_field_binary(input: &mut impl BufRead) -> Result<Field2D> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad("missing FIELD2D header"));
    }
    let mut get = |key: &str| -> Result<String> {
        let p = parts.next().ok_or_else(|| bad(format!("header lacks {key}")))?;
        p.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}=..., got {p}")))
    };
    let num = |s: String| s.parse::<f64>().map_err(|e| bad(e.to_string()));
    let int = |s: String| s.parse::<u64>().map_err(|e| bad(e.to_string()));
    let t1 = num(get("T1")?)?;
    let t2 = num(get("T2")?)?;
    let n1 = int(get("n1")?)? as u32;
    let n2 = int(get("n2")?)? as u32;
    let d = int(get("d")?)? as usize;
    let grid = Grid2D::new(t1, t2, n1, n2)?;
    let count = grid.node_count() * d;
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Field2D::new(grid, d, values)
}

pub fn write_field_csv(f: &Field2D, out: &mut impl Write) -> Result<()> {
    let d = f.dim();
    let mut head = vec!["t1".to_string(), "t2".to_string()];
    head.extend((1..=d).map(|k| format!("v_{k}")));
    writeln!(out, "{}", head.join(","))?;
    let g = f.grid();
    let [m1, m2] = g.nodes();
    for i in 0..m1 {
        for j in 0..m2 {
            let [t1, t2] = g.node(i, j);
            write!(out, "{t1:.16e},{t2:.16e}")?;
            for v in f.get(i, j) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads a CSV written by [`write_field_csv`] on the grid `grid`.
pub fn read_field_csv(input: &mut impl BufRead, grid: Grid2D) -> Result<Field2D> {
    let mut lines = input.lines();
    let head = lines.next().ok_or_else(|| bad("empty CSV"))??;
    let d = head.split(',').count().checked_sub(2).filter(|d| *d > 0).ok_or_else(|| bad("CSV needs t1,t2 and values"))?;
    let mut values = Vec::with_capacity(grid.node_count() * d);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',').skip(2) {
            values.push(cell.trim().parse::<f64>().map_err(|e| bad(format!("{e}: {cell}")))?);
        }
    }
    Field2D::new(grid, d, values)
}

/// CSV with columns `t,v_1..v_d`.
pub fn write_path_csv(p: &Path1D, out: &mut impl Write) -> Result<()> {
    let mut head = vec!["t".to_string()];
    head.extend((1..=p.dim()).map(|k| format!("v_{k}")));
    writeln!(out, "{}", head.join(","))?;
    for i in 0..p.len() {
        write!(out, "{:.16e}", p.time(i))?;
        for v in p.get(i) {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

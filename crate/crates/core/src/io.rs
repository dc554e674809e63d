//! Field and measure dumps: long-format CSV (`t,y,value`) and a binary
//! column dump.
//!
//! Binary layout, little endian: magic `MDPF`, version `u32`, role `u32`,
//! `nx` and `nt` as `u64`, `L` and `T` as `f64`, then the frames in time
//! order, each holding `nx + 1` values.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::grid::{Field, FieldPath, Grid};
use crate::measures::SignedMeasurePath;

pub const MAGIC: &[u8; 4] = b"MDPF";
pub const VERSION: u32 = 1;

/// What the values of a dump represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Field,
    MeasureDensity,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Field => "field",
            Role::MeasureDensity => "measure-density",
        }
    }

    fn code(self) -> u32 {
        match self {
            Role::Field => 0,
            Role::MeasureDensity => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Role::Field),
            1 => Ok(Role::MeasureDensity),
            _ => Err(LabError::Config(format!("unknown role code {c}"))),
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "field" => Ok(Role::Field),
            "measure-density" => Ok(Role::MeasureDensity),
            _ => Err(LabError::Config(format!("unknown role tag `{s}`"))),
        }
    }
}

/// A decoded dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub role: Role,
    pub grid: Grid,
    pub path: FieldPath,
}

fn check_shape(path: &FieldPath, grid: &Grid) -> Result<()> {
    if path.len() != grid.nt + 1 || path.frame(0).len() != grid.len() {
        return Err(LabError::ShapeMismatch(format!(
            "path is {} x {}, grid needs {} x {}",
            path.len(),
            path.frame(0).len(),
            grid.nt + 1,
            grid.len()
        )));
    }
    Ok(())
}

/// Write a path as CSV. The first line is a `# role=...` comment.
pub fn write_csv(out: impl Write, path: &FieldPath, grid: &Grid, role: Role) -> Result<()> {
    check_shape(path, grid)?;
    let mut w = BufWriter::new(out);
    writeln!(w, "# role={}", role.tag())?;
    writeln!(w, "t,y,value")?;
    for (k, frame) in path.frames().iter().enumerate() {
        let t = grid.time(k);
        for (i, v) in frame.values().iter().enumerate() {
            writeln!(w, "{t:e},{:e},{v:e}", grid.node(i))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| LabError::Config(format!("line {line}: cannot parse `{}`: {e}", s.trim())))
}

/// Read a CSV dump written by [`write_csv`] back onto `grid`.
pub fn read_csv(input: impl Read, grid: &Grid) -> Result<(Role, FieldPath)> {
    let mut role = Role::Field;
    let n = grid.len();
    let mut values = Vec::with_capacity((grid.nt + 1) * n);
    for (no, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if let Some(tag) = line.strip_prefix("# role=") {
            role = Role::from_tag(tag.trim())?;
            continue;
        }
        if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(LabError::Config(format!("line {}: expected 3 columns", no + 1)));
        }
        values.push(parse_num(cols[2], no + 1)?);
    }
    if values.len() != (grid.nt + 1) * n {
        return Err(LabError::ShapeMismatch(format!(
            "csv holds {} values, grid needs {}",
            values.len(),
            (grid.nt + 1) * n
        )));
    }
    let frames = values.chunks(n).map(|c| Field::new(c.to_vec())).collect::<Result<Vec<_>>>()?;
    Ok((role, FieldPath::new(frames)?))
}

/// Read a single field from a two-column `y,value` CSV, interpolating
/// linearly onto the grid nodes and holding the end values outside the
/// sampled range.
pub fn read_field_csv(input: impl Read, grid: &Grid) -> Result<Field> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (no, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(|c: char| c.is_alphabetic()) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 {
            return Err(LabError::Config(format!("line {}: expected `y,value`", no + 1)));
        }
        pts.push((parse_num(cols[0], no + 1)?, parse_num(cols[1], no + 1)?));
    }
    if pts.is_empty() {
        return Err(LabError::Config("field file has no samples".into()));
    }
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(LabError::Config("field file must have strictly increasing y".into()));
    }
    Field::from_fn(grid, |y| {
        let j = pts.partition_point(|p| p.0 <= y);
        if j == 0 {
            pts[0].1
        } else if j == pts.len() {
            pts[pts.len() - 1].1
        } else {
            let (y0, v0) = pts[j - 1];
            let (y1, v1) = pts[j];
            v0 + (v1 - v0) * (y - y0) / (y1 - y0)
        }
    })
}

pub fn write_binary(out: impl Write, path: &FieldPath, grid: &Grid, role: Role) -> Result<()> {
    check_shape(path, grid)?;
    let mut w = BufWriter::new(out);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&role.code().to_le_bytes())?;
    w.write_all(&(grid.nx as u64).to_le_bytes())?;
    w.write_all(&(grid.nt as u64).to_le_bytes())?;
    w.write_all(&grid.half_width.to_le_bytes())?;
    w.write_all(&grid.horizon.to_le_bytes())?;
    for frame in path.frames() {
        for v in frame.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_binary(input: impl Read) -> Result<Dump> {
    let mut r = BufReader::new(input);
    if &take::<4>(&mut r)? != MAGIC {
        return Err(LabError::Config("not an MDPF dump".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(LabError::Config(format!("unsupported dump version {version}")));
    }
    let role = Role::from_code(u32::from_le_bytes(take(&mut r)?))?;
    let nx = u64::from_le_bytes(take(&mut r)?) as usize;
    let nt = u64::from_le_bytes(take(&mut r)?) as usize;
    let half_width = f64::from_le_bytes(take(&mut r)?);
    let horizon = f64::from_le_bytes(take(&mut r)?);
    let grid = Grid::new(half_width, nx, horizon, nt)?;
    let mut frames = Vec::with_capacity(nt + 1);
    for _ in 0..=nt {
        let mut v = Vec::with_capacity(nx + 1);
        for _ in 0..=nx {
            v.push(f64::from_le_bytes(take(&mut r)?));
        }
        frames.push(Field::new(v)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(LabError::ShapeMismatch(format!("{} trailing bytes after the last frame", rest.len())));
    }
    Ok(Dump {
        role,
        grid,
        path: FieldPath::new(frames)?,
    })
}

/// Write a field path to `dir/stem.csv` and `dir/stem.mdpf`.
pub fn dump_path(dir: &Path, stem: &str, path: &FieldPath, grid: &Grid, role: Role) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?, path, grid, role)?;
    write_binary(std::fs::File::create(dir.join(format!("{stem}.mdpf")))?, path, grid, role)
}

/// Measure paths use the field formats with the `measure-density` role.
pub fn dump_measure_path(dir: &Path, stem: &str, mu: &SignedMeasurePath, grid: &Grid) -> Result<()> {
    let frames = (0..mu.len())
        .map(|k| Field::new(mu.frame(k).density().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    dump_path(dir, stem, &FieldPath::new(frames)?, grid, Role::MeasureDensity)
}

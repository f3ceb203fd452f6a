//! Result persistence: CSV tables and the raw binary field dump.
//!
//! The dump format is a 16-byte header - magic `SSL1`, grid `n` as a 32-bit
//! little-endian integer, a 32-bit kind tag (1 = node scalar, 2 = velocity),
//! 4 reserved zero bytes - followed by the dof values as little-endian f64
//! (velocity: component 1 then component 2).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, NodeField, VelocityField};
use crate::numeric::csum;
use crate::spectral::{EigenBasis, SolveTrace, TraceKind};

pub const DUMP_MAGIC: &[u8; 4] = b"SSL1";
pub const KIND_NODE: u32 = 1;
pub const KIND_VELOCITY: u32 = 2;

fn write_header(out: &mut impl Write, n: usize, kind: u32) -> Result<()> {
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&(n as u32).to_le_bytes())?;
    out.write_all(&kind.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    Ok(())
}

pub fn write_node_field_dump(path: &Path, field: &NodeField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, field.grid().n(), KIND_NODE)?;
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_velocity_field_dump(path: &Path, field: &VelocityField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, field.grid().n(), KIND_VELOCITY)?;
    for v in field.comp1().iter().chain(field.comp2()) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// A field read back from the dump format.
pub enum FieldDump {
    Node(NodeField),
    Velocity(VelocityField),
}

pub fn read_field_dump(path: &Path) -> Result<FieldDump> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[0..4] != DUMP_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a field dump",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let kind = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let grid = Grid::new(n)?;
    let values: Vec<f64> = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    match kind {
        KIND_NODE => Ok(FieldDump::Node(NodeField::from_values(grid, values)?)),
        KIND_VELOCITY => {
            let e = grid.edge_count();
            if values.len() != 2 * e {
                return Err(Error::ShapeMismatch {
                    expected: 2 * e,
                    got: values.len(),
                });
            }
            let (c1, c2) = values.split_at(e);
            Ok(FieldDump::Velocity(VelocityField::from_components(
                grid,
                c1.to_vec(),
                c2.to_vec(),
            )?))
        }
        other => Err(Error::InvalidInput(format!("unknown dump kind {other}"))),
    }
}

/// One dof per row: `index,x,y,value`.
pub fn write_node_field_csv(path: &Path, field: &NodeField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "index,x,y,value")?;
    let grid = field.grid();
    let n = grid.n();
    for iy in 0..n {
        for ix in 0..n {
            let idx = grid.node_index(ix, iy);
            let (x, y) = grid.node_coord(ix, iy);
            writeln!(out, "{idx},{x},{y},{}", field.values()[idx])?;
        }
    }
    Ok(())
}

/// Both components, global dof index (component 1 first), edge midpoints.
pub fn write_velocity_field_csv(path: &Path, field: &VelocityField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "index,x,y,value")?;
    let grid = field.grid();
    let n = grid.n();
    let e = grid.edge_count();
    for ix in 0..n {
        for ey in 0..n + 1 {
            let idx = grid.comp1_index(ix, ey);
            let (x, y) = grid.comp1_midpoint(ix, ey);
            writeln!(out, "{idx},{x},{y},{}", field.comp1()[idx])?;
        }
    }
    for ex in 0..n + 1 {
        for iy in 0..n {
            let idx = grid.comp2_index(ex, iy);
            let (x, y) = grid.comp2_midpoint(ex, iy);
            writeln!(out, "{},{x},{y},{}", e + idx, field.comp2()[idx])?;
        }
    }
    Ok(())
}

/// Trace table: `t, |u|_Omega, |u|_omega, energy_residual` per sample. The
/// per-sample residual column is only meaningful for free traces and is left
/// empty otherwise.
pub fn write_trace_csv(path: &Path, basis: &EigenBasis, trace: &SolveTrace) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,norm_omega,norm_region,energy_residual")?;
    let a = trace.initial_vorticity_modes();
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let u0_sq = csum(a.iter().zip(&lambdas).map(|(c, l)| c * c / l));
    for (k, &t) in trace.times().iter().enumerate() {
        let region = trace
            .region_norms()
            .map(|r| r[k].to_string())
            .unwrap_or_default();
        let residual = if trace.kind() == TraceKind::Free && u0_sq > 0.0 {
            let u_sq = trace.velocity_norms()[k].powi(2);
            let dissipated = csum(
                a.iter()
                    .zip(&lambdas)
                    .map(|(c, l)| c * c * (-(-2.0 * l * t).exp_m1()) / l),
            );
            ((u_sq + dissipated - u0_sq).abs() / u0_sq).to_string()
        } else {
            String::new()
        };
        writeln!(out, "{t},{},{region},{residual}", trace.velocity_norms()[k])?;
    }
    Ok(())
}

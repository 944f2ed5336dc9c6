//! CSV and JSON output. Floats use shortest round-trip text.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::analysis::EquilibriumProfile;
use crate::state::{DiagnosticsRecord, Grid, StateMeasure};
use crate::{Error, Result};

pub const STATE_HEADER: [&str; 5] = ["cell_index", "left", "right", "pivot", "count"];

pub const DIAGNOSTICS_HEADER: [&str; 23] = [
    "t",
    "dt",
    "m_neg1",
    "m_neg_alpha",
    "m0",
    "m1",
    "m2",
    "atom",
    "exited_mass",
    "entropy",
    "residual_phi1",
    "d1",
    "d2",
    "d3",
    "coag_gain",
    "coag_overflow",
    "coag_loss",
    "boundary_sink",
    "frag_loss",
    "frag_gain",
    "source",
    "atom_sink",
    "dissipation",
];

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn write_cells<W: Write>(w: W, grid: &Grid, counts: &[f64], atom: f64) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(STATE_HEADER)?;
    let e = grid.edges();
    for (i, (&x, &c)) in grid.pivots().iter().zip(counts).enumerate() {
        wr.write_record([i.to_string(), num(e[i]), num(e[i + 1]), num(x), num(c)])?;
    }
    wr.write_record(["atom".to_string(), num(1.0), num(1.0), num(1.0), num(atom)])?;
    wr.flush()?;
    Ok(())
}

pub fn write_state_csv<W: Write>(w: W, s: &StateMeasure) -> Result<()> {
    write_cells(w, s.grid(), s.cells(), s.atom())
}

/// Reads a state written by [`write_state_csv`]; the edges must match `grid`.
pub fn read_state_csv<R: Read>(r: R, grid: Arc<Grid>) -> Result<StateMeasure> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(STATE_HEADER) {
        return Err(Error::Parse(format!("state header must be {STATE_HEADER:?}, got {header:?}")));
    }
    let n = grid.len();
    let mut cells = vec![f64::NAN; n];
    let mut atom = None;
    let e = grid.edges();
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("not a number: {s:?}")));
    for rec in rdr.records() {
        let rec = rec?;
        let count = parse(&rec[4])?;
        if &rec[0] == "atom" {
            atom = Some(count);
            continue;
        }
        let i: usize = rec[0].parse().map_err(|_| Error::Parse(format!("bad cell index {:?}", &rec[0])))?;
        if i >= n {
            return Err(Error::Parse(format!("cell index {i} out of range for {n} cells")));
        }
        let (l, r) = (parse(&rec[1])?, parse(&rec[2])?);
        let tol = 1e-12 * e[i + 1];
        if (l - e[i]).abs() > tol || (r - e[i + 1]).abs() > tol {
            return Err(Error::Config(format!("cell {i} edges ({l}, {r}] do not match the grid ({}, {}]", e[i], e[i + 1])));
        }
        cells[i] = count;
    }
    if let Some(i) = cells.iter().position(|c| c.is_nan()) {
        return Err(Error::Parse(format!("state file is missing cell {i}")));
    }
    StateMeasure::new(grid, cells, atom.unwrap_or(0.0))
}

pub fn write_diagnostics_csv<W: Write>(w: W, records: &[DiagnosticsRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(DIAGNOSTICS_HEADER)?;
    for d in records {
        let c = &d.contributions;
        let diss = match (d.d1, d.d2, d.d3) {
            (Some(a), Some(b), Some(e)) => Some(a + b + e),
            _ => None,
        };
        wr.write_record([
            num(d.t),
            num(d.dt),
            num(d.m_neg1),
            num(d.m_neg_alpha),
            num(d.m0),
            num(d.m1),
            num(d.m2),
            num(d.atom),
            num(d.exited_mass),
            opt(d.entropy),
            opt(d.residual_phi1),
            opt(d.d1),
            opt(d.d2),
            opt(d.d3),
            num(c.coag_gain),
            num(c.coag_overflow),
            num(c.coag_loss),
            num(c.boundary_sink),
            num(c.frag_loss),
            num(c.frag_gain),
            num(c.source),
            num(c.atom_sink),
            opt(diss),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// The equilibrium as a state file: counts are density times width.
pub fn write_equilibrium_csv<W: Write>(w: W, grid: &Grid, eq: &EquilibriumProfile) -> Result<()> {
    let counts: Vec<f64> = eq.values.iter().zip(grid.widths()).map(|(v, w)| v * w).collect();
    write_cells(w, grid, &counts, 0.0)
}

/// Run manifest: everything needed to reproduce the outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<S: Serialize> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub scenario: S,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

pub fn write_manifest<W: Write, S: Serialize>(w: W, m: &Manifest<S>) -> Result<()> {
    serde_json::to_writer_pretty(w, m)?;
    Ok(())
}

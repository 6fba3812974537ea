//! Ego-centric dynamic occupancy grids.
//!
//! A state-action image stacks seven planes of `height_cells x
//! width_cells`, in this order:
//!
//! | plane | content                                  |
//! |-------|------------------------------------------|
//! | 0     | neighbor occupancy                       |
//! | 1     | neighbor `v_s` relative to ego / v_norm  |
//! | 2     | neighbor `v_d` relative to ego / v_norm  |
//! | 3     | lane boundaries                          |
//! | 4     | ego occupancy over the action window     |
//! | 5     | ego `v_s` relative to anchor / v_norm    |
//! | 6     | ego `v_d` relative to anchor / v_norm    |
//!
//! Rows run along the road (row index grows with `s`), columns across it.
//! The anchor sits at `(height_cells / 2, width_cells / 2)`. A cell is
//! occupied iff its center lies inside a footprint.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scene::{Pose, RoadSpec, VehicleState};

pub const STATE_PLANES: usize = 4;
pub const ACTION_PLANES: usize = 3;
pub const PAIR_PLANES: usize = STATE_PLANES + ACTION_PLANES;

const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Meters per cell.
    pub resolution: f64,
    /// Lateral cells.
    pub width_cells: usize,
    /// Longitudinal cells.
    pub height_cells: usize,
    /// Speed normalization (m/s).
    pub v_norm: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::full()
    }
}

impl GridSpec {
    /// 32 x 128 cells at 0.5 m.
    pub fn full() -> Self {
        GridSpec {
            resolution: 0.5,
            width_cells: 32,
            height_cells: 128,
            v_norm: 24.0,
        }
    }

    /// 16 x 64 cells at 1.0 m: same coverage, a sixteenth of the pixels.
    pub fn desk() -> Self {
        GridSpec {
            resolution: 1.0,
            width_cells: 16,
            height_cells: 64,
            v_norm: 24.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !(self.v_norm > 0.0) {
            return Err(Error::Config("grid resolution and v_norm must be positive".into()));
        }
        if self.width_cells == 0
            || self.height_cells == 0
            || self.width_cells % 2 != 0
            || self.height_cells % 2 != 0
        {
            return Err(Error::Config("grid dimensions must be positive and even".into()));
        }
        Ok(())
    }

    pub fn plane_len(&self) -> usize {
        self.width_cells * self.height_cells
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height_cells / 2, self.width_cells / 2)
    }

    /// (lateral, longitudinal) coverage in meters.
    pub fn coverage(&self) -> (f64, f64) {
        (
            self.width_cells as f64 * self.resolution,
            self.height_cells as f64 * self.resolution,
        )
    }

    /// Shape `[planes, height, width]` of a full state-action image.
    pub fn pair_shape(&self) -> [usize; 3] {
        [PAIR_PLANES, self.height_cells, self.width_cells]
    }
}

/// A stack of equally sized planes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(count: usize, spec: &GridSpec) -> Self {
        Planes {
            count,
            height: spec.height_cells,
            width: spec.width_cells,
            data: vec![0.0; count * spec.plane_len()],
        }
    }

    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn at(&self, p: usize, row: usize, col: usize) -> f64 {
        self.data[(p * self.height + row) * self.width + col]
    }
}

/// Full 7-plane input for one (state, action) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionImage {
    pub planes: Planes,
    pub anchor: VehicleState,
}

/// Cell containing `(target_s, target_d)`, or `None` when outside the grid.
pub fn to_cell(spec: &GridSpec, anchor: &VehicleState, target_s: f64, target_d: f64) -> Option<(usize, usize)> {
    let (r0, c0) = spec.center();
    let row = r0 as i64 + ((target_s - anchor.s) / spec.resolution).round() as i64;
    let col = c0 as i64 + ((target_d - anchor.d) / spec.resolution).round() as i64;
    let inside = (0..spec.height_cells as i64).contains(&row) && (0..spec.width_cells as i64).contains(&col);
    inside.then_some((row as usize, col as usize))
}

/// Inclusive index range of cells whose centers fall in `[lo, hi]`
/// (offsets in meters from the anchor), clipped to `0..n`.
fn cell_span(lo: f64, hi: f64, res: f64, n: usize) -> Option<(usize, usize)> {
    let half = (n / 2) as f64;
    let first = ((lo / res) - EDGE_EPS).ceil() + half;
    let last = ((hi / res) + EDGE_EPS).floor() + half;
    let first = first.max(0.0);
    let last = last.min(n as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Writes a footprint into an occupancy plane and two velocity planes.
/// `planes` points at the start of the occupancy plane.
#[allow(clippy::too_many_arguments)]
fn rasterize(
    planes: &mut [f64],
    spec: &GridSpec,
    anchor: &VehicleState,
    s: f64,
    d: f64,
    length: f64,
    width: f64,
    rel_vs: f64,
    rel_vd: f64,
) {
    let rel_s = s - anchor.s;
    let rel_d = d - anchor.d;
    let Some((r_lo, r_hi)) = cell_span(rel_s - 0.5 * length, rel_s + 0.5 * length, spec.resolution, spec.height_cells) else {
        return;
    };
    let Some((c_lo, c_hi)) = cell_span(rel_d - 0.5 * width, rel_d + 0.5 * width, spec.resolution, spec.width_cells) else {
        return;
    };
    let n = spec.plane_len();
    let w = spec.width_cells;
    for row in r_lo..=r_hi {
        for col in c_lo..=c_hi {
            let i = row * w + col;
            planes[i] = 1.0;
            planes[n + i] = rel_vs;
            planes[2 * n + i] = rel_vd;
        }
    }
}

fn write_state(out: &mut [f64], snapshot: &[VehicleState], road: &RoadSpec, anchor: &VehicleState, spec: &GridSpec) {
    for v in snapshot {
        rasterize(
            out,
            spec,
            anchor,
            v.s,
            v.d,
            v.length,
            v.width,
            (v.v_s - anchor.v_s) / spec.v_norm,
            (v.v_d - anchor.v_d) / spec.v_norm,
        );
    }
    let n = spec.plane_len();
    let lanes = &mut out[3 * n..4 * n];
    let (r0, c0) = spec.center();
    for k in 0..=road.lane_count {
        let boundary = k as f64 * road.lane_width;
        let col = c0 as i64 + ((boundary - anchor.d) / spec.resolution).round() as i64;
        if !(0..spec.width_cells as i64).contains(&col) {
            continue;
        }
        for row in 0..spec.height_cells {
            let s = anchor.s + (row as f64 - r0 as f64) * spec.resolution;
            if (0.0..=road.length).contains(&s) {
                lanes[row * spec.width_cells + col as usize] = 1.0;
            }
        }
    }
}

fn write_action(out: &mut [f64], window: &[Pose], anchor: &VehicleState, spec: &GridSpec) -> Result<()> {
    if window.is_empty() {
        return Err(domain("action window is empty"));
    }
    for p in window {
        rasterize(
            out,
            spec,
            anchor,
            p.s,
            p.d,
            anchor.length,
            anchor.width,
            (p.v_s - anchor.v_s) / spec.v_norm,
            (p.v_d - anchor.v_d) / spec.v_norm,
        );
    }
    Ok(())
}

/// Neighbor dynamic OGM plus lane-marking plane (4 planes).
pub fn encode_state(snapshot: &[VehicleState], road: &RoadSpec, anchor: &VehicleState, spec: &GridSpec) -> Planes {
    let mut planes = Planes::zeros(STATE_PLANES, spec);
    write_state(&mut planes.data, snapshot, road, anchor, spec);
    planes
}

/// Ego dynamic OGM over an action window (3 planes). Later poses overwrite
/// earlier ones where footprints overlap.
pub fn encode_action(window: &[Pose], anchor: &VehicleState, spec: &GridSpec) -> Result<Planes> {
    let mut planes = Planes::zeros(ACTION_PLANES, spec);
    write_action(&mut planes.data, window, anchor, spec)?;
    Ok(planes)
}

/// Encodes a full pair into `out`, which must hold `7 * plane_len` values;
/// it is cleared first.
pub fn encode_pair_into(
    out: &mut [f64],
    snapshot: &[VehicleState],
    road: &RoadSpec,
    anchor: &VehicleState,
    window: &[Pose],
    spec: &GridSpec,
) -> Result<()> {
    let n = spec.plane_len();
    if out.len() != PAIR_PLANES * n {
        return Err(domain(format!("pair buffer holds {} values, need {}", out.len(), PAIR_PLANES * n)));
    }
    out.fill(0.0);
    write_state(&mut out[..STATE_PLANES * n], snapshot, road, anchor, spec);
    write_action(&mut out[STATE_PLANES * n..], window, anchor, spec)
}

pub fn encode_pair(
    snapshot: &[VehicleState],
    road: &RoadSpec,
    anchor: &VehicleState,
    window: &[Pose],
    spec: &GridSpec,
) -> Result<StateActionImage> {
    let mut planes = Planes::zeros(PAIR_PLANES, spec);
    encode_pair_into(&mut planes.data, snapshot, road, anchor, window, spec)?;
    Ok(StateActionImage { planes, anchor: *anchor })
}

/// Writes one plane as a binary (P5) PGM. Values are mapped affinely from
/// `[min, max]` onto `[0, 255]`; a constant plane maps to 0. The first
/// image row is the farthest-forward grid row.
pub fn write_pgm(plane: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if plane.len() != height * width {
        return Err(domain("plane size does not match dimensions"));
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot render non-finite plane".into()));
    }
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..width {
            let v = plane[row * width + col];
            let px = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
            bytes.push(px);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Renders every plane to `<prefix>_<index>.pgm` and returns the paths.
pub fn render_pgm(planes: &Planes, prefix: &Path) -> Result<Vec<PathBuf>> {
    let stem = prefix.to_string_lossy();
    (0..planes.count)
        .map(|p| {
            let path = PathBuf::from(format!("{stem}_{p}.pgm"));
            write_pgm(planes.plane(p), planes.height, planes.width, &path)?;
            Ok(path)
        })
        .collect()
}

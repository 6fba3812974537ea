//! Road-frame geometry shared by every other module.
//!
//! The road is straight, so the Frenet frame `(s, d)` is just a renamed
//! Cartesian frame: `s` runs along the road and `d` is the lateral offset
//! from the right road edge. Vehicle footprints are axis-aligned rectangles
//! in that frame.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const DEFAULT_LANE_WIDTH: f64 = 3.7;
pub const DEFAULT_VEHICLE_LENGTH: f64 = 4.5;
pub const DEFAULT_VEHICLE_WIDTH: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal position of the footprint center (m).
    pub s: f64,
    /// Lateral position of the footprint center (m).
    pub d: f64,
    pub v_s: f64,
    pub v_d: f64,
    pub length: f64,
    pub width: f64,
    pub lane_id: i32,
}

impl VehicleState {
    /// The same vehicle relocated to a pose, keeping its footprint.
    pub fn at_pose(&self, pose: &Pose) -> VehicleState {
        VehicleState {
            s: pose.s,
            d: pose.d,
            v_s: pose.v_s,
            v_d: pose.v_d,
            ..*self
        }
    }

    pub fn footprint(&self) -> Footprint {
        Footprint {
            s: self.s,
            d: self.d,
            length: self.length,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSpec {
    pub lane_count: usize,
    pub lane_width: f64,
    /// Total road length (m).
    pub length: f64,
    pub speed_limit: f64,
}

impl Default for RoadSpec {
    fn default() -> Self {
        RoadSpec {
            lane_count: 3,
            lane_width: DEFAULT_LANE_WIDTH,
            length: 2000.0,
            speed_limit: 24.0,
        }
    }
}

impl RoadSpec {
    /// Lateral extent `[0, lane_count * lane_width]`.
    pub fn lateral_bounds(&self) -> (f64, f64) {
        (0.0, self.lane_count as f64 * self.lane_width)
    }
}

/// One sample of a trajectory. Velocities are carried alongside the
/// position so that action images can be encoded without differencing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub s: f64,
    pub d: f64,
    /// Time offset from the instance anchor (s).
    pub t: f64,
    pub v_s: f64,
    pub v_d: f64,
}

/// Axis-aligned rectangle in the road frame, centered at `(s, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub s: f64,
    pub d: f64,
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub fn lateral_extent(&self) -> (f64, f64) {
        (self.d - 0.5 * self.width, self.d + 0.5 * self.width)
    }
}

pub fn lane_center(road: &RoadSpec, lane_id: i32) -> Result<f64> {
    if lane_id < 0 || lane_id as usize >= road.lane_count {
        return Err(domain(format!(
            "lane {lane_id} outside road with {} lanes",
            road.lane_count
        )));
    }
    Ok((lane_id as f64 + 0.5) * road.lane_width)
}

/// Lane containing lateral offset `d`, clamped to the existing lanes.
/// A point on a lane boundary belongs to the upper lane.
pub fn lane_of(road: &RoadSpec, d: f64) -> i32 {
    let raw = (d / road.lane_width).floor();
    let max = road.lane_count.saturating_sub(1) as f64;
    raw.clamp(0.0, max) as i32
}

/// True iff the two footprints intersect with positive area. Touching
/// edges do not count.
pub fn rect_overlap(a: &VehicleState, b: &VehicleState) -> bool {
    footprints_overlap(&a.footprint(), &b.footprint())
}

pub fn footprints_overlap(a: &Footprint, b: &Footprint) -> bool {
    (a.s - b.s).abs() < 0.5 * (a.length + b.length) && (a.d - b.d).abs() < 0.5 * (a.width + b.width)
}

/// Longitudinal bumper-to-bumper gap from `rear` to `front`; negative when
/// the footprints overlap longitudinally.
pub fn longitudinal_gap(rear: &Footprint, front: &Footprint) -> f64 {
    (front.s - 0.5 * front.length) - (rear.s + 0.5 * rear.length)
}

/// True iff the lateral extents of the two footprints overlap with
/// positive width.
pub fn laterally_overlapping(a: &Footprint, b: &Footprint) -> bool {
    (a.d - b.d).abs() < 0.5 * (a.width + b.width)
}

//! Per-timestep state-action pairs.
//!
//! A trajectory over a horizon of `H` steps yields `H - W` pairs, where
//! `W` is the action window in steps: pair `t` combines the replayed
//! neighbors at step `t` (anchored at the ego pose at `t`) with the ego
//! poses `t ..= t + W`.

use crate::dataset::{DemonstrationInstance, ReplayWorld};
use crate::error::{domain, Result};
use crate::neural::Tensor;
use crate::ogm::{encode_pair_into, GridSpec, PAIR_PLANES};
use crate::scene::{lane_of, Pose, RoadSpec, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pairing {
    pub window_steps: usize,
    pub grid: GridSpec,
}

impl Pairing {
    pub fn new(window_s: f64, dt: f64, grid: GridSpec) -> Result<Self> {
        if !(dt > 0.0) || !(window_s >= 0.0) {
            return Err(domain("action window and dt must be non-negative / positive"));
        }
        Ok(Pairing {
            window_steps: (window_s / dt).round() as usize,
            grid,
        })
    }

    pub fn pair_len(&self) -> usize {
        PAIR_PLANES * self.grid.plane_len()
    }

    /// Number of pairs over a trajectory of `poses_len` poses.
    pub fn pair_count(&self, poses_len: usize) -> usize {
        match poses_len.saturating_sub(1) {
            0 => 0,
            horizon => horizon.saturating_sub(self.window_steps).max(1),
        }
    }

    /// Encodes pair `t` of an ego trajectory against a replayed world.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_into(
        &self,
        out: &mut [f64],
        ego: &VehicleState,
        poses: &[Pose],
        world: &ReplayWorld,
        road: &RoadSpec,
        t: usize,
    ) -> Result<()> {
        if t >= poses.len() {
            return Err(domain(format!("pair step {t} outside trajectory of {} poses", poses.len())));
        }
        let end = (t + self.window_steps).min(poses.len() - 1);
        let mut anchor = ego.at_pose(&poses[t]);
        anchor.lane_id = lane_of(road, anchor.d);
        encode_pair_into(out, world.at_step(t)?, road, &anchor, &poses[t..=end], &self.grid)
    }

    pub fn encode(&self, ego: &VehicleState, poses: &[Pose], world: &ReplayWorld, road: &RoadSpec, t: usize) -> Result<Tensor> {
        let mut data = vec![0.0; self.pair_len()];
        self.encode_into(&mut data, ego, poses, world, road, t)?;
        Tensor::from_vec(&self.grid.pair_shape(), data)
    }

    /// Demonstration pairs of one instance, every `step_stride` steps.
    pub fn demo_pairs(&self, inst: &DemonstrationInstance, step_stride: usize) -> Result<Vec<Tensor>> {
        let world = ReplayWorld::from_instance(inst);
        let n = self.pair_count(inst.ego_track.len());
        (0..n)
            .step_by(step_stride.max(1))
            .map(|t| self.encode(&inst.ego, &inst.ego_track, &world, &inst.road, t))
            .collect()
    }
}

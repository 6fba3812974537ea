//! Sample-based Frenet planner.
//!
//! Candidates combine a quintic lateral profile with a cubic speed profile.
//! Each is checked against the constraint model at every timestep of the
//! horizon and the cheapest survivor is returned.

use std::cmp::Ordering;
use std::path::Path;

use crate::constraint::ConstraintModel;
use crate::dataset::{CostSpec, DemonstrationInstance, ReplayWorld};
use crate::error::{domain, Error, Result};
use crate::pairs::Pairing;
use crate::scene::{lane_center, lane_of, Pose, RoadSpec, VehicleState};

/// Jerk normalization in the cost (m/s^3).
pub const JERK_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub lateral_count: usize,
    pub speed_count: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            lateral_count: 7,
            speed_count: 13,
            speed_min: 0.0,
            speed_max: 24.0,
            horizon: 5.0,
            dt: 0.1,
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lateral_count == 0 || self.speed_count == 0 {
            return Err(Error::Config("lateral_count and speed_count must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0) || self.speed_max < self.speed_min {
            return Err(Error::Config("invalid horizon, dt or speed range".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn candidate_count(&self) -> usize {
        self.lateral_count * self.speed_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub lateral: f64,
    pub speed: f64,
}

fn spaced(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| match (n, i) {
        (1, _) => 0.5 * (lo + hi),
        (_, 0) => lo,
        (_, i) if i == n - 1 => hi,
        _ => lo + (hi - lo) * i as f64 / (n - 1) as f64,
    })
}

/// Lateral-major grid of targets: index `i_lat * speed_count + i_speed`.
pub fn sample_targets(spec: &SamplingSpec, ego: &VehicleState, road: &RoadSpec) -> Result<Vec<Target>> {
    spec.validate()?;
    let lane = lane_of(road, ego.d);
    let last = road.lane_count as i32 - 1;
    let lo = lane_center(road, (lane - 1).max(0))?;
    let hi = lane_center(road, (lane + 1).min(last))?;
    let speeds: Vec<f64> = spaced(spec.speed_min, spec.speed_max, spec.speed_count).collect();
    Ok(spaced(lo, hi, spec.lateral_count)
        .flat_map(|lateral| speeds.iter().map(move |&speed| Target { lateral, speed }))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrajectory {
    pub target_lateral: f64,
    pub target_speed: f64,
    pub poses: Vec<Pose>,
    /// `(lateral, longitudinal)` jerk at each pose time.
    pub jerk_profile: Vec<(f64, f64)>,
}

/// Quintic `d(t)` from `(d0, v0, 0)` to `(d1, 0, 0)` over `T`; returns
/// coefficients `c0..c5`.
fn quintic(d0: f64, v0: f64, d1: f64, t: f64) -> [f64; 6] {
    let delta = d1 - d0;
    let (t2, t3) = (t * t, t * t * t);
    [
        d0,
        v0,
        0.0,
        (20.0 * delta - 12.0 * v0 * t) / (2.0 * t3),
        (-30.0 * delta + 16.0 * v0 * t) / (2.0 * t3 * t),
        (12.0 * delta - 6.0 * v0 * t) / (2.0 * t3 * t2),
    ]
}

pub fn generate_candidate(ego: &VehicleState, target: Target, spec: &SamplingSpec) -> CandidateTrajectory {
    let big_t = spec.horizon;
    let c = quintic(ego.d, ego.v_d, target.lateral, big_t);
    let dv = target.speed - ego.v_s;
    let steps = spec.steps();
    let mut poses = Vec::with_capacity(steps + 1);
    let mut jerk = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = if k == steps { big_t } else { k as f64 * spec.dt };
        let tau = t / big_t;
        let d = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let v_d = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let j_lat = 6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5]);
        let v_s = ego.v_s + dv * tau * tau * (3.0 - 2.0 * tau);
        let s = ego.s + ego.v_s * t + dv * big_t * tau * tau * tau * (1.0 - 0.5 * tau);
        let j_lon = dv * (6.0 - 12.0 * tau) / (big_t * big_t);
        poses.push(Pose { s, d, t, v_s, v_d });
        jerk.push((j_lat, j_lon));
    }
    CandidateTrajectory {
        target_lateral: target.lateral,
        target_speed: target.speed,
        poses,
        jerk_profile: jerk,
    }
}

pub fn candidate_cost(candidate: &CandidateTrajectory, cost: &CostSpec, road: &RoadSpec) -> f64 {
    let n = candidate.jerk_profile.len().max(1) as f64;
    let mean_jerk = candidate.jerk_profile.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / n;
    let end = candidate.poses.last().expect("candidate has poses");
    let w = &cost.weights;
    w.jerk * mean_jerk / (JERK_NORM * JERK_NORM)
        + w.speed * ((end.v_s - cost.speed_limit) / cost.speed_limit).powi(2)
        + w.lane * ((end.d - cost.target_lane_center) / road.lane_width).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateStatus {
    Feasible,
    /// First timestep classified as constrained.
    ConstrainedAt(usize),
    /// Not evaluated (first-feasible search stopped earlier).
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub target: Target,
    pub cost: f64,
    pub status: CandidateStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Chosen {
        index: usize,
        candidate: CandidateTrajectory,
        cost: f64,
    },
    NoSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerResult {
    pub outcome: Outcome,
    pub feasible_count: usize,
    pub records: Vec<CandidateRecord>,
}

impl PlannerResult {
    pub fn chosen(&self) -> Option<(usize, &CandidateTrajectory, f64)> {
        match &self.outcome {
            Outcome::Chosen { index, candidate, cost } => Some((*index, candidate, *cost)),
            Outcome::NoSolution => None,
        }
    }

    /// Per-candidate CSV: index, target_lateral, target_speed, cost,
    /// constrained_at (empty when feasible, `skipped` when not evaluated).
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut text = String::from("index,target_lateral,target_speed,cost,constrained_at\n");
        for (i, r) in self.records.iter().enumerate() {
            let at = match r.status {
                CandidateStatus::Feasible => String::new(),
                CandidateStatus::ConstrainedAt(t) => t.to_string(),
                CandidateStatus::Skipped => "skipped".into(),
            };
            text.push_str(&format!("{i},{:?},{:?},{:?},{at}\n", r.target.lateral, r.target.speed, r.cost));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Search {
    /// Check every candidate; `feasible_count` is exact.
    #[default]
    Exhaustive,
    /// Check in ranking order and stop at the first feasible candidate.
    /// Picks the same candidate as `Exhaustive`; `feasible_count` is 0 or 1.
    FirstFeasible,
}

/// First timestep at which `model` flags a pair of this trajectory, or
/// `None`. `buf` must hold `pairing.pair_len()` values.
pub fn first_constrained(
    model: &ConstraintModel,
    ego: &VehicleState,
    poses: &[Pose],
    world: &ReplayWorld,
    road: &RoadSpec,
    pairing: &Pairing,
    buf: &mut [f64],
) -> Result<Option<usize>> {
    for t in 0..pairing.pair_count(poses.len()) {
        pairing.encode_into(buf, ego, poses, world, road, t)?;
        if model.is_constrained(buf)? {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

fn rank(a: &(f64, f64, usize), b: &(f64, f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// All candidates for an instance, in target order.
pub fn candidates(inst: &DemonstrationInstance, spec: &SamplingSpec) -> Result<Vec<CandidateTrajectory>> {
    let ego = inst.ego_state_at(0);
    Ok(sample_targets(spec, &ego, &inst.road)?
        .into_iter()
        .map(|t| generate_candidate(&inst.ego, t, spec))
        .collect())
}

pub fn plan(
    inst: &DemonstrationInstance,
    model: Option<&ConstraintModel>,
    spec: &SamplingSpec,
    pairing: &Pairing,
) -> Result<PlannerResult> {
    plan_with(inst, model, spec, pairing, Search::Exhaustive)
}

pub fn plan_with(
    inst: &DemonstrationInstance,
    model: Option<&ConstraintModel>,
    spec: &SamplingSpec,
    pairing: &Pairing,
    search: Search,
) -> Result<PlannerResult> {
    spec.validate()?;
    if (spec.dt - inst.dt).abs() > 1e-9 {
        return Err(domain(format!("planner dt {} differs from instance dt {}", spec.dt, inst.dt)));
    }
    if inst.horizon_steps() < spec.steps() {
        return Err(domain(format!(
            "instance {} covers {} steps, planner horizon needs {}",
            inst.id,
            inst.horizon_steps(),
            spec.steps()
        )));
    }
    let cands = candidates(inst, spec)?;
    let mut records: Vec<CandidateRecord> = cands
        .iter()
        .map(|c| CandidateRecord {
            target: Target {
                lateral: c.target_lateral,
                speed: c.target_speed,
            },
            cost: candidate_cost(c, &inst.cost_spec, &inst.road),
            status: CandidateStatus::Skipped,
        })
        .collect();
    let mut order: Vec<(f64, f64, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.cost, (r.target.lateral - inst.ego.d).abs(), i))
        .collect();
    order.sort_by(rank);

    let world = model.map(|_| ReplayWorld::from_instance(inst));
    let mut buf = vec![0.0; if model.is_some() { pairing.pair_len() } else { 0 }];
    let mut best: Option<usize> = None;
    let mut feasible_count = 0;
    for &(_, _, i) in &order {
        let status = match (model, &world) {
            (Some(m), Some(w)) => {
                match first_constrained(m, &inst.ego, &cands[i].poses, w, &inst.road, pairing, &mut buf)? {
                    Some(t) => CandidateStatus::ConstrainedAt(t),
                    None => CandidateStatus::Feasible,
                }
            }
            _ => CandidateStatus::Feasible,
        };
        records[i].status = status;
        if status == CandidateStatus::Feasible {
            feasible_count += 1;
            best.get_or_insert(i);
            if search == Search::FirstFeasible {
                break;
            }
        }
    }
    let outcome = match best {
        Some(index) => Outcome::Chosen {
            index,
            cost: records[index].cost,
            candidate: cands.into_iter().nth(index).expect("index in range"),
        },
        None => Outcome::NoSolution,
    };
    Ok(PlannerResult {
        outcome,
        feasible_count,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DEFAULT_LANE_WIDTH;

    fn ego(d: f64, v: f64) -> VehicleState {
        VehicleState {
            s: 100.0,
            d,
            v_s: v,
            v_d: 0.0,
            length: 4.5,
            width: 1.8,
            lane_id: 1,
        }
    }

    #[test]
    fn targets_middle_lane() {
        let road = RoadSpec::default();
        let t = sample_targets(&SamplingSpec::default(), &ego(5.55, 10.0), &road).unwrap();
        assert_eq!(t.len(), 91);
        let speeds: Vec<f64> = t[..13].iter().map(|x| x.speed).collect();
        assert_eq!(speeds, (0..13).map(|k| 2.0 * k as f64).collect::<Vec<_>>());
        assert_eq!(t[0].lateral, 1.85);
        assert_eq!(t[90].lateral, 9.25);
        assert!((t[13].lateral - t[0].lateral - 7.4 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn targets_edge_lane_keep_count() {
        let road = RoadSpec::default();
        let t = sample_targets(&SamplingSpec::default(), &ego(1.0, 10.0), &road).unwrap();
        assert_eq!(t.len(), 91);
        assert_eq!(t[0].lateral, 1.85);
        assert_eq!(t[90].lateral, 1.85 + DEFAULT_LANE_WIDTH);
    }

    #[test]
    fn straight_candidate_has_zero_jerk_and_cost() {
        let e = ego(5.55, 20.0);
        let c = generate_candidate(&e, Target { lateral: 5.55, speed: 20.0 }, &SamplingSpec::default());
        assert!(c.jerk_profile.iter().all(|&(a, b)| a == 0.0 && b == 0.0));
        assert!((c.poses.last().unwrap().s - 200.0).abs() < 1e-9);
        let spec = CostSpec {
            speed_limit: 20.0,
            target_lane_center: 5.55,
            weights: Default::default(),
        };
        assert_eq!(candidate_cost(&c, &spec, &RoadSpec::default()), 0.0);
        let half = CostSpec { speed_limit: 40.0, ..spec };
        assert!((candidate_cost(&c, &half, &RoadSpec::default()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn boundary_conditions() {
        let mut e = ego(4.0, 10.0);
        e.v_d = 0.7;
        let c = generate_candidate(&e, Target { lateral: 9.25, speed: 20.0 }, &SamplingSpec::default());
        let end = c.poses.last().unwrap();
        assert!((end.d - 9.25).abs() < 1e-9);
        assert!((end.v_s - 20.0).abs() < 1e-9);
        assert!(end.v_d.abs() < 1e-9);
        assert!((end.s - e.s - 75.0).abs() < 1e-9);
        assert!((c.poses[0].v_d - 0.7).abs() < 1e-12);
        assert_eq!(c.poses.len(), 51);
    }
}

//! Demonstration instances and the replay transition model.
//!
//! Instances come either from the synthetic expert simulator
//! ([`generate_synthetic`]) or from NGSIM-format CSV ([`ingest_ngsim`]).
//! Each instance covers `T_steps + 1` samples (`t = 0, dt, .., T`) so the
//! whole horizon including both endpoints is available to the planner.
//!
//! # Dataset cache
//!
//! [`save_cache`] writes one JSON object per line, one line per instance,
//! with fields in this order: `id`, `vehicle_id`, `anchor_frame`, `dt`,
//! `split`, `road`, `cost_spec`, `ego`, `ego_track`, `neighbor_tracks`.
//! Floats are written in shortest round-trip form, so [`load_cache`]
//! restores every value bit for bit.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kv::KvMap;
use crate::scene::{
    lane_center, lane_of, laterally_overlapping, longitudinal_gap, Pose, RoadSpec, VehicleState,
};

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub jerk: f64,
    pub speed: f64,
    pub lane: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            jerk: 1.0,
            speed: 1.0,
            lane: 1.0,
        }
    }
}

/// Per-instance planning objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub speed_limit: f64,
    pub target_lane_center: f64,
    pub weights: CostWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calib,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTrack {
    pub vehicle_id: i64,
    /// Horizon step of `states[0]`; tracks may start late or end early
    /// when a vehicle leaves the recorded area.
    pub first_step: usize,
    pub states: Vec<VehicleState>,
}

impl NeighborTrack {
    pub fn state_at(&self, step: usize) -> Option<&VehicleState> {
        step.checked_sub(self.first_step)
            .and_then(|i| self.states.get(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationInstance {
    pub id: String,
    pub vehicle_id: i64,
    pub anchor_frame: i64,
    pub dt: f64,
    pub split: Split,
    pub road: RoadSpec,
    pub cost_spec: CostSpec,
    /// Ego state at the anchor frame; also carries the ego footprint.
    pub ego: VehicleState,
    pub ego_track: Vec<Pose>,
    pub neighbor_tracks: Vec<NeighborTrack>,
}

impl DemonstrationInstance {
    /// Number of steps in the horizon (`ego_track.len() - 1`).
    pub fn horizon_steps(&self) -> usize {
        self.ego_track.len().saturating_sub(1)
    }

    pub fn ego_state_at(&self, step: usize) -> VehicleState {
        let mut st = self.ego.at_pose(&self.ego_track[step]);
        st.lane_id = lane_of(&self.road, st.d);
        st
    }

    /// Ego trajectory with every pose shifted longitudinally by `ds`.
    pub fn with_ego_shift(&self, ds: f64) -> DemonstrationInstance {
        let mut out = self.clone();
        out.ego.s += ds;
        for p in &mut out.ego_track {
            p.s += ds;
        }
        out
    }
}

/// Recorded neighbor snapshots for the horizon of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayWorld {
    pub start_frame: i64,
    pub dt: f64,
    pub frames: Vec<Vec<VehicleState>>,
}

impl ReplayWorld {
    pub fn from_instance(inst: &DemonstrationInstance) -> Self {
        let frames = (0..inst.ego_track.len())
            .map(|k| {
                inst.neighbor_tracks
                    .iter()
                    .filter_map(|tr| tr.state_at(k).copied())
                    .collect()
            })
            .collect();
        ReplayWorld {
            start_frame: inst.anchor_frame,
            dt: inst.dt,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Snapshot by horizon step (0 = anchor frame).
    pub fn at_step(&self, step: usize) -> Result<&[VehicleState]> {
        self.frames
            .get(step)
            .map(Vec::as_slice)
            .ok_or_else(|| domain(format!("step {step} outside replay of {} frames", self.frames.len())))
    }
}

/// Neighbor states at absolute frame `t`. Depends on `t` only: the
/// recorded vehicles never react to the ego.
pub fn replay_step(world: &ReplayWorld, t: i64) -> Result<&[VehicleState]> {
    let step = t - world.start_frame;
    if step < 0 {
        return Err(domain(format!("frame {t} precedes replay start {}", world.start_frame)));
    }
    world.at_step(step as usize)
}

/// Smallest bumper gap from the ego to any laterally overlapping vehicle
/// ahead of it over the horizon; `+inf` when there is none.
pub fn min_leader_gap(ego: &VehicleState, poses: &[Pose], world: &ReplayWorld) -> f64 {
    let mut best = f64::INFINITY;
    for (k, pose) in poses.iter().enumerate() {
        let Ok(snapshot) = world.at_step(k) else { break };
        let me = ego.at_pose(pose).footprint();
        for other in snapshot {
            let fp = other.footprint();
            if other.s >= pose.s && laterally_overlapping(&me, &fp) {
                best = best.min(longitudinal_gap(&me, &fp));
            }
        }
    }
    best
}

/// Which vehicles around the ego at the anchor frame are recorded as
/// neighbors: centers within `lon` meters longitudinally and `lat` meters
/// laterally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborWindow {
    pub lon: f64,
    pub lat: f64,
}

impl Default for NeighborWindow {
    fn default() -> Self {
        NeighborWindow { lon: 32.0, lat: 8.0 }
    }
}

impl NeighborWindow {
    fn contains(&self, ego: &VehicleState, other: &VehicleState) -> bool {
        (other.s - ego.s).abs() <= self.lon && (other.d - ego.d).abs() <= self.lat
    }
}

// ---------------------------------------------------------------------------
// Synthetic expert
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub lanes: usize,
    pub lane_width: f64,
    pub vehicles: usize,
    pub duration_s: f64,
    pub dt_s: f64,
    /// Ground-truth minimum bumper gap to any leader (m).
    pub gap_m: f64,
    /// Minimum time headway used for spacing and lane-change admission (s).
    pub headway_s: f64,
    pub seed: u64,
    pub stride: usize,
    pub horizon_s: f64,
    /// Length of road over which vehicles are spawned (m).
    pub spawn_length_m: f64,
    pub v_des_min: f64,
    pub v_des_max: f64,
    pub v_max: f64,
    /// Base lane-change attempt rate (1/s); tripled when blocked.
    pub lane_change_rate: f64,
    pub lane_change_duration_s: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub window: NeighborWindow,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lanes: 3,
            lane_width: crate::scene::DEFAULT_LANE_WIDTH,
            vehicles: 30,
            duration_s: 120.0,
            dt_s: 0.1,
            gap_m: 8.0,
            headway_s: 0.8,
            seed: 0,
            stride: 10,
            horizon_s: 5.0,
            spawn_length_m: 500.0,
            v_des_min: 10.0,
            v_des_max: 22.0,
            v_max: 30.0,
            lane_change_rate: 0.03,
            lane_change_duration_s: 4.0,
            vehicle_length: crate::scene::DEFAULT_VEHICLE_LENGTH,
            vehicle_width: crate::scene::DEFAULT_VEHICLE_WIDTH,
            window: NeighborWindow::default(),
        }
    }
}

impl SynthConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lanes",
        "lane_width",
        "vehicles",
        "duration_s",
        "dt_s",
        "gap_m",
        "headway_s",
        "seed",
        "stride",
        "horizon_s",
        "spawn_length_m",
        "v_des_min",
        "v_des_max",
        "lane_change_rate",
    ];

    /// Reads the recognised keys from `kv`, leaving other keys alone.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            lanes: kv.get_or("lanes", d.lanes)?,
            lane_width: kv.get_or("lane_width", d.lane_width)?,
            vehicles: kv.get_or("vehicles", d.vehicles)?,
            duration_s: kv.get_or("duration_s", d.duration_s)?,
            dt_s: kv.get_or("dt_s", d.dt_s)?,
            gap_m: kv.get_or("gap_m", d.gap_m)?,
            headway_s: kv.get_or("headway_s", d.headway_s)?,
            seed: kv.get_or("seed", d.seed)?,
            stride: kv.get_or("stride", d.stride)?,
            horizon_s: kv.get_or("horizon_s", d.horizon_s)?,
            spawn_length_m: kv.get_or("spawn_length_m", d.spawn_length_m)?,
            v_des_min: kv.get_or("v_des_min", d.v_des_min)?,
            v_des_max: kv.get_or("v_des_max", d.v_des_max)?,
            lane_change_rate: kv.get_or("lane_change_rate", d.lane_change_rate)?,
            ..d
        })
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lanes == 0 {
            return bad("lanes must be >= 1");
        }
        if self.vehicles == 0 {
            return bad("vehicles must be >= 1");
        }
        if !(self.dt_s > 0.0) || !(self.duration_s > 0.0) || !(self.horizon_s > 0.0) {
            return bad("dt_s, duration_s and horizon_s must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if !(self.gap_m >= 0.0) || !(self.headway_s >= 0.0) {
            return bad("gap_m and headway_s must be non-negative");
        }
        if !(self.v_des_min > 0.0) || self.v_des_max < self.v_des_min || self.v_des_max > self.v_max {
            return bad("desired speed range must satisfy 0 < v_des_min <= v_des_max <= v_max");
        }
        let per_lane = self.vehicles.div_ceil(self.lanes);
        let min_slot = self.vehicle_length + self.gap_m + self.headway_s * self.v_des_max;
        if per_lane as f64 * min_slot > self.spawn_length_m {
            return Err(Error::Config(format!(
                "{} vehicles over {} lanes need {:.1} m per lane to keep the minimum gap of {} m \
                 (gap_m) plus {} s headway, but spawn_length_m is {}",
                self.vehicles,
                self.lanes,
                per_lane as f64 * min_slot,
                self.gap_m,
                self.headway_s,
                self.spawn_length_m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LaneChange {
    from: usize,
    to: usize,
    start: f64,
}

#[derive(Debug, Clone)]
struct SimVehicle {
    id: i64,
    s: f64,
    d: f64,
    v: f64,
    v_d: f64,
    lane: usize,
    change: Option<LaneChange>,
    v_des: f64,
    length: f64,
    width: f64,
}

impl SimVehicle {
    fn occupies(&self, lane: usize) -> bool {
        self.lane == lane || self.change.is_some_and(|c| c.from == lane)
    }

    fn shares_lane(&self, other: &SimVehicle) -> bool {
        self.occupies(other.lane) || other.change.is_some_and(|c| self.occupies(c.from))
    }

    fn front(&self) -> f64 {
        self.s + 0.5 * self.length
    }

    fn rear(&self) -> f64 {
        self.s - 0.5 * self.length
    }
}

/// Every vehicle of a recorded or simulated scene, frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLog {
    pub dt: f64,
    pub road: RoadSpec,
    pub first_frame: i64,
    /// `frames[k]` lists `(vehicle_id, state)` pairs present at frame
    /// `first_frame + k`, sorted by id.
    pub frames: Vec<Vec<(i64, VehicleState)>>,
    /// Desired speed per vehicle when known (synthetic data only).
    pub desired_speed: BTreeMap<i64, f64>,
}

/// Runs the synthetic expert traffic. Every vehicle follows a simplified
/// intelligent-driver law whose output is clamped so that the bumper gap
/// to any vehicle ahead sharing one of its lanes never drops below
/// `gap_m`; lane changes are Poisson-triggered and admitted only into gaps
/// of at least `gap_m + headway_s * v` on both sides.
pub fn simulate(cfg: &SynthConfig) -> Result<TrafficLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let road = RoadSpec {
        lane_count: cfg.lanes,
        lane_width: cfg.lane_width,
        length: cfg.spawn_length_m + cfg.duration_s * cfg.v_max,
        speed_limit: cfg.v_des_max,
    };
    let centers: Vec<f64> = (0..cfg.lanes)
        .map(|k| (k as f64 + 0.5) * cfg.lane_width)
        .collect();

    let per_lane = cfg.vehicles.div_ceil(cfg.lanes);
    let slot = cfg.spawn_length_m / per_lane as f64;
    let min_slot = cfg.vehicle_length + cfg.gap_m + cfg.headway_s * cfg.v_des_max;
    let mut vehicles: Vec<SimVehicle> = Vec::with_capacity(cfg.vehicles);
    for i in 0..cfg.vehicles {
        let lane = i % cfg.lanes;
        let j = i / cfg.lanes;
        let jitter = rng.random::<f64>() * (slot - min_slot).max(0.0);
        let v_des = cfg.v_des_min + rng.random::<f64>() * (cfg.v_des_max - cfg.v_des_min);
        vehicles.push(SimVehicle {
            id: i as i64,
            s: j as f64 * slot + jitter + 0.5 * cfg.vehicle_length,
            d: centers[lane],
            v: v_des * (0.7 + 0.3 * rng.random::<f64>()),
            v_d: 0.0,
            lane,
            change: None,
            v_des,
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
        });
    }

    let n_frames = cfg.frame_count();
    let dt = cfg.dt_s;
    let mut frames = Vec::with_capacity(n_frames);
    let record = |vs: &[SimVehicle]| -> Vec<(i64, VehicleState)> {
        let mut snap: Vec<(i64, VehicleState)> = vs
            .iter()
            .map(|v| {
                (
                    v.id,
                    VehicleState {
                        s: v.s,
                        d: v.d,
                        v_s: v.v,
                        v_d: v.v_d,
                        length: v.length,
                        width: v.width,
                        lane_id: lane_of(&road, v.d),
                    },
                )
            })
            .collect();
        snap.sort_by_key(|(id, _)| *id);
        snap
    };
    frames.push(record(&vehicles));

    const A_MAX: f64 = 1.5;
    const B_COMF: f64 = 2.0;
    let p_change = 1.0 - (-cfg.lane_change_rate * dt).exp();

    for k in 1..n_frames {
        let now = k as f64 * dt;

        // Lane-change triggering against the current configuration.
        for i in 0..vehicles.len() {
            if vehicles[i].change.is_some() {
                continue;
            }
            let blocked = vehicles[i].v < vehicles[i].v_des - 1.5;
            let p = if blocked { 3.0 * p_change } else { p_change };
            if rng.random::<f64>() >= p {
                continue;
            }
            let lane = vehicles[i].lane;
            let mut options = Vec::with_capacity(2);
            if lane > 0 {
                options.push(lane - 1);
            }
            if lane + 1 < cfg.lanes {
                options.push(lane + 1);
            }
            let Some(&target) = options.choose(&mut rng) else { continue };
            let me = &vehicles[i];
            let admissible = vehicles.iter().filter(|o| o.id != me.id && o.occupies(target)).all(|o| {
                if o.s >= me.s {
                    o.rear() - me.front() >= cfg.gap_m + cfg.headway_s * me.v
                } else {
                    me.rear() - o.front() >= cfg.gap_m + cfg.headway_s * o.v
                }
            });
            if admissible {
                let v = &mut vehicles[i];
                v.change = Some(LaneChange {
                    from: lane,
                    to: target,
                    start: now - dt,
                });
                v.lane = target;
            }
        }

        // Longitudinal update, front to back so leaders are already final.
        let mut order: Vec<usize> = (0..vehicles.len()).collect();
        order.sort_by(|&a, &b| {
            vehicles[b]
                .s
                .total_cmp(&vehicles[a].s)
                .then(vehicles[a].id.cmp(&vehicles[b].id))
        });
        let old_s: Vec<f64> = vehicles.iter().map(|v| v.s).collect();
        for (rank, &i) in order.iter().enumerate() {
            let me = vehicles[i].clone();
            let leader = order[..rank]
                .iter()
                .map(|&j| &vehicles[j])
                .filter(|o| old_s[o.id as usize] >= me.s && o.shares_lane(&me))
                .min_by(|a, b| a.rear().total_cmp(&b.rear()));
            let free = 1.0 - (me.v / me.v_des).powi(4);
            let interaction = match leader {
                Some(l) => {
                    let gap = (l.rear() - me.front()).max(0.1);
                    let dv = me.v - l.v;
                    let desired = cfg.gap_m
                        + me.v * cfg.headway_s
                        + me.v * dv / (2.0 * (A_MAX * B_COMF).sqrt());
                    (desired.max(cfg.gap_m) / gap).powi(2)
                }
                None => 0.0,
            };
            let acc = A_MAX * (free - interaction);
            let mut v_new = (me.v + acc * dt).clamp(0.0, cfg.v_max);
            let mut s_new = me.s + 0.5 * (me.v + v_new) * dt;
            if let Some(l) = leader {
                let bound = l.rear() - cfg.gap_m - 0.5 * me.length;
                if s_new > bound {
                    s_new = bound.max(me.s);
                    v_new = v_new.min(((s_new - me.s) / dt).max(0.0)).min(l.v);
                }
            }
            let v = &mut vehicles[i];
            v.s = s_new;
            v.v = v_new;
        }

        // Lateral motion along a quintic lane-change profile.
        for v in &mut vehicles {
            if let Some(c) = v.change {
                let p = ((now - c.start) / cfg.lane_change_duration_s).min(1.0);
                let delta = centers[c.to] - centers[c.from];
                let shape = p * p * p * (10.0 - 15.0 * p + 6.0 * p * p);
                let rate = 30.0 * p * p * (1.0 - p) * (1.0 - p) / cfg.lane_change_duration_s;
                v.d = centers[c.from] + delta * shape;
                v.v_d = delta * rate;
                if p >= 1.0 {
                    v.change = None;
                    v.d = centers[c.to];
                    v.v_d = 0.0;
                }
            }
        }

        frames.push(record(&vehicles));
    }

    Ok(TrafficLog {
        dt,
        road,
        first_frame: 0,
        frames,
        desired_speed: vehicles.iter().map(|v| (v.id, v.v_des)).collect(),
    })
}

/// Slices a traffic log into demonstration instances: one per vehicle and
/// anchor frame for which the vehicle is present at all `horizon_steps`
/// following frames, with anchors taken every `stride` frames.
pub fn slice_instances(
    log: &TrafficLog,
    horizon_steps: usize,
    stride: usize,
    window: NeighborWindow,
    weights: CostWeights,
) -> Result<Vec<DemonstrationInstance>> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let lookup: Vec<BTreeMap<i64, VehicleState>> = log
        .frames
        .iter()
        .map(|f| f.iter().copied().collect())
        .collect();
    let mut ids: Vec<i64> = lookup.iter().flat_map(|f| f.keys().copied()).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut out = Vec::new();
    for &vid in &ids {
        let mut last_anchor: Option<usize> = None;
        for anchor in 0..log.frames.len() {
            if anchor + horizon_steps >= log.frames.len() {
                break;
            }
            if !(anchor..=anchor + horizon_steps).all(|k| lookup[k].contains_key(&vid)) {
                continue;
            }
            if let Some(prev) = last_anchor {
                if anchor - prev < stride {
                    continue;
                }
            }
            last_anchor = Some(anchor);
            out.push(build_instance(log, &lookup, vid, anchor, horizon_steps, window, weights)?);
        }
    }
    Ok(out)
}

fn build_instance(
    log: &TrafficLog,
    lookup: &[BTreeMap<i64, VehicleState>],
    vid: i64,
    anchor: usize,
    horizon_steps: usize,
    window: NeighborWindow,
    weights: CostWeights,
) -> Result<DemonstrationInstance> {
    let ego = lookup[anchor][&vid];
    let ego_track: Vec<Pose> = (0..=horizon_steps)
        .map(|k| {
            let st = lookup[anchor + k][&vid];
            Pose {
                s: st.s,
                d: st.d,
                t: k as f64 * log.dt,
                v_s: st.v_s,
                v_d: st.v_d,
            }
        })
        .collect();

    let mut neighbor_tracks = Vec::new();
    for (&nid, other) in &lookup[anchor] {
        if nid == vid || !window.contains(&ego, other) {
            continue;
        }
        let states: Vec<VehicleState> = (0..=horizon_steps)
            .map_while(|k| lookup[anchor + k].get(&nid).copied())
            .collect();
        neighbor_tracks.push(NeighborTrack {
            vehicle_id: nid,
            first_step: 0,
            states,
        });
    }

    let final_d = ego_track[horizon_steps].d;
    let target_lane_center = lane_center(&log.road, lane_of(&log.road, final_d))?;
    let speed_limit = log
        .desired_speed
        .get(&vid)
        .copied()
        .unwrap_or(log.road.speed_limit);
    let anchor_frame = log.first_frame + anchor as i64;
    Ok(DemonstrationInstance {
        id: format!("v{vid}_f{anchor_frame}"),
        vehicle_id: vid,
        anchor_frame,
        dt: log.dt,
        split: Split::Train,
        road: log.road,
        cost_spec: CostSpec {
            speed_limit,
            target_lane_center,
            weights,
        },
        ego,
        ego_track,
        neighbor_tracks,
    })
}

/// Simulates the synthetic expert and slices it into instances.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<DemonstrationInstance>> {
    let log = simulate(cfg)?;
    slice_instances(
        &log,
        cfg.horizon_steps(),
        cfg.stride,
        cfg.window,
        CostWeights::default(),
    )
}

/// Assigns splits by vehicle so that no vehicle contributes ego tracks to
/// more than one split.
pub fn assign_splits(instances: &mut [DemonstrationInstance], calib_frac: f64, test_frac: f64, seed: u64) {
    let mut ids: Vec<i64> = instances.iter().map(|i| i.vehicle_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_calib = ((n as f64) * calib_frac).round() as usize;
    let mut split_of = BTreeMap::new();
    for (rank, id) in ids.into_iter().enumerate() {
        let split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_calib {
            Split::Calib
        } else {
            Split::Train
        };
        split_of.insert(id, split);
    }
    for inst in instances {
        inst.split = split_of[&inst.vehicle_id];
    }
}

const SPLIT_SALT: u64 = 0x5eed_5011_7000_0001;

// ---------------------------------------------------------------------------
// NGSIM CSV
// ---------------------------------------------------------------------------

pub const NGSIM_HEADER: [&str; 6] = ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "Lane_ID"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub dt: f64,
    pub window: NeighborWindow,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub weights: CostWeights,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            dt: 0.1,
            window: NeighborWindow::default(),
            vehicle_length: crate::scene::DEFAULT_VEHICLE_LENGTH,
            vehicle_width: crate::scene::DEFAULT_VEHICLE_WIDTH,
            weights: CostWeights::default(),
        }
    }
}

/// Reads an NGSIM-style CSV into a traffic log. `Local_X` is lateral and
/// `Local_Y` longitudinal, both in feet; `v_Vel` is in ft/s. Optional
/// `v_Length` / `v_Width` columns (feet) override the default footprint.
pub fn read_ngsim(path: &Path, road: RoadSpec, opts: &IngestOptions) -> Result<TrafficLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
    };
    let idx: Vec<usize> = NGSIM_HEADER.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let len_col = headers.iter().position(|h| h == "v_Length");
    let width_col = headers.iter().position(|h| h == "v_Width");

    // vehicle -> ordered (frame, lateral, longitudinal, speed, length, width)
    let mut tracks: BTreeMap<i64, Vec<(i64, f64, f64, f64, f64, f64)>> = BTreeMap::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Format(format!("row {}: too few fields", row_no + 2)))
        };
        let num = |i: usize| -> Result<f64> {
            let raw = field(i)?;
            raw.parse::<f64>()
                .map_err(|_| Error::Format(format!("row {}: bad number `{raw}`", row_no + 2)))
        };
        let vid = num(idx[0])? as i64;
        let frame = num(idx[1])? as i64;
        let length = match len_col {
            Some(c) => num(c)? * FEET_TO_METERS,
            None => opts.vehicle_length,
        };
        let width = match width_col {
            Some(c) => num(c)? * FEET_TO_METERS,
            None => opts.vehicle_width,
        };
        let entry = tracks.entry(vid).or_default();
        if let Some(last) = entry.last() {
            if frame <= last.0 {
                return Err(Error::Data(format!(
                    "vehicle {vid}: Frame_ID {frame} does not increase (previous {})",
                    last.0
                )));
            }
        }
        entry.push((
            frame,
            num(idx[2])? * FEET_TO_METERS,
            num(idx[3])? * FEET_TO_METERS,
            num(idx[4])? * FEET_TO_METERS,
            length,
            width,
        ));
    }

    let first_frame = tracks.values().filter_map(|t| t.first()).map(|r| r.0).min().unwrap_or(0);
    let last_frame = tracks.values().filter_map(|t| t.last()).map(|r| r.0).max().unwrap_or(-1);
    let n_frames = (last_frame - first_frame + 1).max(0) as usize;
    let mut frames: Vec<Vec<(i64, VehicleState)>> = vec![Vec::new(); n_frames];
    for (&vid, rows) in &tracks {
        for (i, &(frame, d, s, v, length, width)) in rows.iter().enumerate() {
            // Lateral speed from the lateral track; one-sided at the ends
            // and across frame gaps.
            let prev = i.checked_sub(1).map(|j| rows[j]).filter(|r| r.0 == frame - 1);
            let next = rows.get(i + 1).copied().filter(|r| r.0 == frame + 1);
            let v_d = match (prev, next) {
                (Some(p), Some(n)) => (n.1 - p.1) / (2.0 * opts.dt),
                (None, Some(n)) => (n.1 - d) / opts.dt,
                (Some(p), None) => (d - p.1) / opts.dt,
                (None, None) => 0.0,
            };
            frames[(frame - first_frame) as usize].push((
                vid,
                VehicleState {
                    s,
                    d,
                    v_s: v,
                    v_d,
                    length,
                    width,
                    lane_id: lane_of(&road, d),
                },
            ));
        }
    }
    for f in &mut frames {
        f.sort_by_key(|(id, _)| *id);
    }
    Ok(TrafficLog {
        dt: opts.dt,
        road,
        first_frame,
        frames,
        desired_speed: BTreeMap::new(),
    })
}

pub fn ingest_ngsim(
    path: &Path,
    road: RoadSpec,
    horizon_steps: usize,
    stride: usize,
    opts: &IngestOptions,
) -> Result<Vec<DemonstrationInstance>> {
    let log = read_ngsim(path, road, opts)?;
    slice_instances(&log, horizon_steps, stride, opts.window, opts.weights)
}

/// Writes a traffic log in NGSIM column layout (feet, ft/s).
pub fn write_ngsim(log: &TrafficLog, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", NGSIM_HEADER.join(",")).map_err(io)?;
    let mut rows: Vec<(i64, i64, &VehicleState)> = Vec::new();
    for (k, frame) in log.frames.iter().enumerate() {
        for (vid, st) in frame {
            rows.push((*vid, log.first_frame + k as i64, st));
        }
    }
    rows.sort_by_key(|(vid, frame, _)| (*vid, *frame));
    for (vid, frame, st) in rows {
        writeln!(
            w,
            "{vid},{frame},{:?},{:?},{:?},{}",
            st.d / FEET_TO_METERS,
            st.s / FEET_TO_METERS,
            st.v_s / FEET_TO_METERS,
            st.lane_id + 1
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

pub fn save_cache(path: &Path, instances: &[DemonstrationInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)
            .map_err(|e| Error::Format(format!("serialize {}: {e}", inst.id)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<Vec<DemonstrationInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: DemonstrationInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_vehicle() -> SynthConfig {
        SynthConfig {
            lanes: 2,
            vehicles: 1,
            duration_s: 60.0,
            dt_s: 0.1,
            horizon_s: 5.0,
            stride: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_vehicle_instance_count() {
        let inst = generate_synthetic(&one_vehicle()).unwrap();
        assert_eq!(inst.len(), 550);
        assert!(inst.iter().all(|i| i.ego_track.len() == 51));
    }

    #[test]
    fn stride_subsamples_anchors() {
        let cfg = SynthConfig {
            stride: 10,
            ..one_vehicle()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap().len(), 55);
    }

    #[test]
    fn infeasible_density_names_gap() {
        let cfg = SynthConfig {
            vehicles: 200,
            spawn_length_m: 100.0,
            ..SynthConfig::default()
        };
        let err = generate_synthetic(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("gap"));
    }

    #[test]
    fn replay_is_recorded_track() {
        let cfg = SynthConfig {
            vehicles: 12,
            duration_s: 30.0,
            ..SynthConfig::default()
        };
        let inst = generate_synthetic(&cfg).unwrap();
        let i = inst.iter().find(|i| !i.neighbor_tracks.is_empty()).unwrap();
        let world = ReplayWorld::from_instance(i);
        let first = replay_step(&world, i.anchor_frame).unwrap();
        let stored: Vec<VehicleState> = i.neighbor_tracks.iter().map(|t| t.states[0]).collect();
        assert_eq!(first, stored.as_slice());
        assert!(replay_step(&world, i.anchor_frame - 1).is_err());
        assert!(replay_step(&world, i.anchor_frame + 51).is_err());
    }

    #[test]
    fn ngsim_unit_conversion_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(
            &p,
            "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID\n1,10,6.0,328.084,30,1\n",
        )
        .unwrap();
        let log = read_ngsim(&p, RoadSpec::default(), &IngestOptions::default()).unwrap();
        assert!((log.frames[0][0].1.s - 100.0).abs() < 1e-4);

        std::fs::write(&p, "Vehicle_ID,Frame_ID,Local_X,v_Vel,Lane_ID\n1,1,2,3,4\n").unwrap();
        assert!(matches!(
            read_ngsim(&p, RoadSpec::default(), &IngestOptions::default()),
            Err(Error::Format(_))
        ));

        std::fs::write(
            &p,
            "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID\n1,2,0,0,0,1\n1,1,0,0,0,1\n",
        )
        .unwrap();
        assert!(matches!(
            read_ngsim(&p, RoadSpec::default(), &IngestOptions::default()),
            Err(Error::Data(_))
        ));
    }
}

//! Single-horizon evaluation and reporting.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::constraint::{drivable_region, ConstraintModel, RegionContext};
use crate::dataset::{DemonstrationInstance, ReplayWorld, Split};
use crate::density::{recon_error, VaeModel};
use crate::error::{domain, Error, Result};
use crate::ogm::write_pgm;
use crate::pairs::Pairing;
use crate::planner::{plan_with, CandidateTrajectory, SamplingSpec, Search};
use crate::scene::{laterally_overlapping, longitudinal_gap, rect_overlap, RoadSpec, VehicleState};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_instances: usize,
    pub collision_count: usize,
    pub out_of_road_count: usize,
    pub no_solution_count: usize,
    pub collision_pct: f64,
    pub out_of_road_pct: f64,
    pub no_solution_pct: f64,
    pub baseline: Option<Box<EvalReport>>,
}

impl EvalReport {
    pub fn from_counts(n: usize, collision: usize, out_of_road: usize, no_solution: usize) -> Self {
        let solved = n - no_solution;
        let pct = |k: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * k as f64 / d as f64 };
        EvalReport {
            n_instances: n,
            collision_count: collision,
            out_of_road_count: out_of_road,
            no_solution_count: no_solution,
            collision_pct: pct(collision, solved),
            out_of_road_pct: pct(out_of_road, solved),
            no_solution_pct: pct(no_solution, n),
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Rollout {
    pub collision: bool,
    pub out_of_road: bool,
}

/// Rolls a trajectory against the replayed neighbors.
pub fn rollout(ego: &VehicleState, cand: &CandidateTrajectory, world: &ReplayWorld, road: &RoadSpec) -> Result<Rollout> {
    let (lo, hi) = road.lateral_bounds();
    let mut out = Rollout::default();
    for (k, pose) in cand.poses.iter().enumerate() {
        let me = ego.at_pose(pose);
        let (left, right) = me.footprint().lateral_extent();
        out.out_of_road |= left < lo || right > hi;
        out.collision |= world.at_step(k)?.iter().any(|v| rect_overlap(&me, v));
    }
    Ok(out)
}

/// Plans every instance once and scores the chosen trajectories.
pub fn evaluate(
    instances: &[DemonstrationInstance],
    model: Option<&ConstraintModel>,
    spec: &SamplingSpec,
    pairing: &Pairing,
) -> Result<EvalReport> {
    if let Some(inst) = instances.iter().find(|i| i.split == Split::Train) {
        return Err(domain(format!("instance {} belongs to the training split", inst.id)));
    }
    let outcomes: Vec<Option<Rollout>> = instances
        .par_iter()
        .map(|inst| {
            let res = plan_with(inst, model, spec, pairing, Search::FirstFeasible)?;
            match res.chosen() {
                None => Ok(None),
                Some((_, cand, _)) => {
                    let world = ReplayWorld::from_instance(inst);
                    rollout(&inst.ego, cand, &world, &inst.road).map(Some)
                }
            }
        })
        .collect::<Result<_>>()?;
    let count = |f: fn(&Rollout) -> bool| outcomes.iter().flatten().filter(|r| f(r)).count();
    Ok(EvalReport::from_counts(
        instances.len(),
        count(|r| r.collision),
        count(|r| r.out_of_road),
        outcomes.iter().filter(|o| o.is_none()).count(),
    ))
}

/// Evaluates `model` and attaches the unconstrained planner as baseline.
pub fn evaluate_with_baseline(
    instances: &[DemonstrationInstance],
    model: &ConstraintModel,
    spec: &SamplingSpec,
    pairing: &Pairing,
) -> Result<EvalReport> {
    let mut report = evaluate(instances, Some(model), spec, pairing)?;
    report.baseline = Some(Box::new(evaluate(instances, None, spec, pairing)?));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationResult {
    pub mean_error_in: f64,
    pub mean_error_perturbed: f64,
    pub used: usize,
    /// Demonstrations without a leader at the anchor frame.
    pub skipped: usize,
}

impl PerturbationResult {
    pub fn ratio(&self) -> f64 {
        self.mean_error_perturbed / self.mean_error_in
    }
}

/// Bumper gap to the nearest laterally overlapping vehicle ahead at the
/// anchor frame.
pub fn leader_gap(inst: &DemonstrationInstance) -> Option<f64> {
    let me = inst.ego.footprint();
    inst.neighbor_tracks
        .iter()
        .filter_map(|tr| tr.state_at(0))
        .filter(|v| v.s >= inst.ego.s && laterally_overlapping(&me, &v.footprint()))
        .map(|v| longitudinal_gap(&me, &v.footprint()))
        .min_by(f64::total_cmp)
}

/// Compares reconstruction error on the anchor pair of each demonstration
/// against the same pair with the ego moved to within `shift` meters of
/// its leader.
pub fn perturbation_study(
    vae: &VaeModel,
    demos: &[DemonstrationInstance],
    shift: f64,
    pairing: &Pairing,
) -> Result<PerturbationResult> {
    let scored: Vec<Option<(f64, f64)>> = demos
        .par_iter()
        .map(|inst| {
            let Some(gap) = leader_gap(inst) else { return Ok(None) };
            let moved = inst.with_ego_shift(gap - gap.min(shift));
            let score = |i: &DemonstrationInstance| -> Result<f64> {
                let world = ReplayWorld::from_instance(i);
                let x = pairing.encode(&i.ego, &i.ego_track, &world, &i.road, 0)?;
                recon_error(vae, &x.data)
            };
            Ok(Some((score(inst)?, score(&moved)?)))
        })
        .collect::<Result<_>>()?;
    let used: Vec<(f64, f64)> = scored.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(domain("no demonstration has a leader"));
    }
    let n = used.len() as f64;
    Ok(PerturbationResult {
        mean_error_in: used.iter().map(|p| p.0).sum::<f64>() / n,
        mean_error_perturbed: used.iter().map(|p| p.1).sum::<f64>() / n,
        used: used.len(),
        skipped: scored.len() - used.len(),
    })
}

pub const TABLE_COLUMNS: [&str; 3] = ["Collision %", "Out of road %", "No MoP solution %"];

fn table_row(label: &str, c: f64, o: f64, n: f64) -> String {
    format!(
        "{label:<12} | {c:>w0$.3} | {o:>w1$.3} | {n:>w2$.3}\n",
        w0 = TABLE_COLUMNS[0].len(),
        w1 = TABLE_COLUMNS[1].len(),
        w2 = TABLE_COLUMNS[2].len()
    )
}

pub fn report_table(report: &EvalReport) -> String {
    let mut s = format!("{:<12} | {}\n", "", TABLE_COLUMNS.join(" | "));
    s.push_str(&table_row("planner", report.collision_pct, report.out_of_road_pct, report.no_solution_pct));
    if let Some(b) = &report.baseline {
        s.push_str(&table_row("baseline", b.collision_pct, b.out_of_road_pct, b.no_solution_pct));
        s.push_str(&table_row(
            "delta",
            report.collision_pct - b.collision_pct,
            report.out_of_road_pct - b.out_of_road_pct,
            report.no_solution_pct - b.no_solution_pct,
        ));
    }
    s.push_str(&format!("instances: {}\n", report.n_instances));
    s
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("row,n_instances,collision_pct,out_of_road_pct,no_solution_pct\n");
    let mut row = |name: &str, r: &EvalReport| {
        s.push_str(&format!(
            "{name},{},{:?},{:?},{:?}\n",
            r.n_instances, r.collision_pct, r.out_of_road_pct, r.no_solution_pct
        ));
    };
    row("planner", report);
    if let Some(b) = &report.baseline {
        row("baseline", b);
    }
    s
}

/// Parses the CSV written by [`report_csv`].
pub fn parse_report_csv(text: &str) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("bad report row '{line}'")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number '{s}': {e}")));
        rows.push(EvalReport {
            n_instances: f[1].parse().map_err(|e| Error::Format(format!("bad count: {e}")))?,
            collision_count: 0,
            out_of_road_count: 0,
            no_solution_count: 0,
            collision_pct: num(f[2])?,
            out_of_road_pct: num(f[3])?,
            no_solution_pct: num(f[4])?,
            baseline: None,
        });
    }
    let mut it = rows.into_iter();
    let mut first = it.next().ok_or_else(|| Error::Format("empty report".into()))?;
    first.baseline = it.next().map(Box::new);
    Ok(first)
}

/// Drivable-region rendering request.
pub struct RegionRender<'a> {
    pub model: &'a ConstraintModel,
    pub instances: &'a [DemonstrationInstance],
    pub count: usize,
    pub pairing: &'a Pairing,
}

/// Offsets covering the grid at its resolution, centered on the ego.
pub fn region_offsets(pairing: &Pairing) -> (Vec<f64>, Vec<f64>) {
    let g = &pairing.grid;
    let (r0, c0) = g.center();
    let s = (0..g.height_cells).map(|r| (r as f64 - r0 as f64) * g.resolution).collect();
    let d = (0..g.width_cells).map(|c| (c as f64 - c0 as f64) * g.resolution).collect();
    (s, d)
}

/// Writes `report.txt`, `report.csv` and optional drivable-region PGMs.
pub fn render_report(report: &EvalReport, out_dir: &Path, regions: Option<&RegionRender<'_>>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, body) in [("report.txt", report_table(report)), ("report.csv", report_csv(report))] {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    if let Some(r) = regions {
        let (s_off, d_off) = region_offsets(r.pairing);
        for inst in r.instances.iter().take(r.count) {
            let snapshot = ReplayWorld::from_instance(inst);
            let ctx = RegionContext {
                snapshot: snapshot.at_step(0)?,
                road: &inst.road,
                ego: &inst.ego,
            };
            let mask = drivable_region(r.model, &ctx, &s_off, &d_off, r.pairing, inst.dt)?;
            let p = out_dir.join(format!("region_{}.pgm", sanitize(&inst.id)));
            write_pgm(&mask.to_plane(), mask.rows, mask.cols, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denominators() {
        let r = EvalReport::from_counts(10, 1, 2, 5);
        assert_eq!(r.collision_pct, 20.0);
        assert_eq!(r.out_of_road_pct, 40.0);
        assert_eq!(r.no_solution_pct, 50.0);
        let all = EvalReport::from_counts(4, 0, 0, 4);
        assert_eq!(all.collision_pct, 0.0);
        assert_eq!(all.no_solution_pct, 100.0);
    }

    #[test]
    fn table_and_csv() {
        let mut r = EvalReport::from_counts(1000, 5, 3, 16);
        r.collision_pct = 0.5;
        r.out_of_road_pct = 0.3;
        r.no_solution_pct = 1.6;
        let t = report_table(&r);
        assert!(t.contains("Collision % | Out of road % | No MoP solution %"));
        let back = parse_report_csv(&report_csv(&r)).unwrap();
        assert!((back.collision_pct - 0.5).abs() < 1e-9);
        assert!((back.out_of_road_pct - 0.3).abs() < 1e-9);
        assert!((back.no_solution_pct - 1.6).abs() < 1e-9);
        assert_eq!(back.n_instances, 1000);
    }
}

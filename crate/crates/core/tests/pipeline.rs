//! Small-scale behavior of the constraint model, the inference loop and
//! evaluation.

use cinfer::constraint::{
    constraint_loss, drivable_region, init_from_vae, Label, LabeledExample, RegionContext,
};
use cinfer::dataset::{generate_synthetic, DemonstrationInstance, ReplayWorld, Split, SynthConfig};
use cinfer::density::{Backbone, DensityThreshold, VaeConfig, VaeModel};
use cinfer::evaluate::{
    evaluate, parse_report_csv, perturbation_study, region_offsets, render_report, report_table, EvalReport,
    RegionRender, TABLE_COLUMNS,
};
use cinfer::inference::{label_epoch, run_inference, Density, InferenceConfig, LabelSettings};
use cinfer::neural::{ParamSet, Tensor};
use cinfer::ogm::GridSpec;
use cinfer::pairs::Pairing;
use cinfer::planner::SamplingSpec;

fn pairing() -> Pairing {
    Pairing::new(1.0, 0.1, GridSpec::desk()).unwrap()
}

fn vae(seed: u64) -> VaeModel {
    VaeModel::new(
        &pairing().grid.pair_shape(),
        &VaeConfig { backbone: Backbone::Mlp { hidden: 6 }, latent_dim: 4, seed },
    )
    .unwrap()
}

fn traffic(vehicles: usize, seed: u64, split: Split) -> Vec<DemonstrationInstance> {
    let cfg = SynthConfig {
        vehicles,
        duration_s: 30.0,
        spawn_length_m: 300.0,
        seed,
        stride: 25,
        ..Default::default()
    };
    let mut v = generate_synthetic(&cfg).unwrap();
    for i in &mut v {
        i.split = split;
    }
    v
}

fn image(k: f64) -> Tensor {
    let shape = pairing().grid.pair_shape();
    let n: usize = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|i| ((i as f64 * 0.37 + k).sin() * 0.5).max(0.0)).collect()).unwrap()
}

fn labeled(k: f64, label: Label) -> LabeledExample {
    LabeledExample { image: image(k), label, instance_id: format!("e{k}"), t: 0 }
}

#[test]
fn init_classifies_as_prior_and_copies_backbone() {
    let v = vae(1);
    for prior in [0.1, 0.5] {
        let m = init_from_vae(&v, prior, 2).unwrap();
        assert!(m.backbone.same_parameters(&v));
        for k in 0..4 {
            assert!((m.classify(&image(k as f64).data).unwrap() - prior).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_terms_and_routing() {
    let m = init_from_vae(&vae(3), 0.5, 3).unwrap();
    let planner = [labeled(1.0, Label::PlannerConstrained)];
    let out = constraint_loss(&m, &[], &planner, 0.5, &[]).unwrap();
    assert!((out.parts.planner_bce - std::f64::consts::LN_2).abs() < 1e-6);
    assert_eq!(out.parts.rmse, 0.0);
    assert_eq!(out.parts.kl_term, 0.0);
    assert!(out.grads.backbone.decoder.iter().all(|t| t.data.iter().all(|&g| g == 0.0)));

    let demo = [labeled(2.0, Label::DemoUnconstrained), labeled(3.0, Label::DemoUnconstrained)];
    let noise = vec![vec![0.3, -0.1, 0.2, 0.0]; 2];
    let out = constraint_loss(&m, &demo, &planner, 0.5, &noise).unwrap();
    let total = out.parts.total();
    assert!((total - out.loss).abs() <= 1e-12 * out.loss.abs());
    assert!(out.parts.rmse > 0.0 && out.parts.kl_term > 0.0);
    assert!((out.parts.demo_bce - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn region_limits() {
    let p = pairing();
    let inst = &traffic(12, 4, Split::Test)[0];
    let world = ReplayWorld::from_instance(inst);
    let ctx = RegionContext { snapshot: world.at_step(0).unwrap(), road: &inst.road, ego: &inst.ego };
    let (s, d) = region_offsets(&p);
    let (s, d): (Vec<f64>, Vec<f64>) = (s.into_iter().step_by(8).collect(), d.into_iter().step_by(4).collect());

    let mut open = init_from_vae(&vae(5), 0.9, 5).unwrap();
    open.decision_threshold = 1.0;
    let mask = drivable_region(&open, &ctx, &s, &d, &p, inst.dt).unwrap();
    assert_eq!((mask.rows, mask.cols), (s.len(), d.len()));
    assert!(mask.drivable.iter().all(|&b| b));

    open.decision_threshold = 0.5;
    let mask = drivable_region(&open, &ctx, &s, &d, &p, inst.dt).unwrap();
    assert!(mask.drivable.iter().all(|&b| !b));
}

#[test]
fn infinite_threshold_labels_nothing() {
    let v = vae(6);
    let m = init_from_vae(&v, 0.1, 6).unwrap();
    let spec = SamplingSpec::default();
    let p = pairing();
    let inst = traffic(12, 6, Split::Train);
    let density = Density { vae: &v, threshold: DensityThreshold::unbounded() };
    let settings = LabelSettings { spec: &spec, pairing: &p, demo_stride: 4, gap_m: Some(8.0) };
    let labels = label_epoch(&inst[..5], &m, &density, &settings).unwrap();
    assert_eq!(labels.stats.labeled_constrained, 0);
    assert!(labels.planner.is_empty());
    assert!(labels.stats.planner_pairs_total > 0);
    assert!(labels.demo.iter().all(|e| e.label == Label::DemoUnconstrained));
}

#[test]
fn zero_threshold_labels_every_chosen_pair() {
    let v = vae(7);
    let m = init_from_vae(&v, 0.1, 7).unwrap();
    let spec = SamplingSpec::default();
    let p = pairing();
    let inst = traffic(12, 7, Split::Train);
    let density = Density { vae: &v, threshold: DensityThreshold { e_th: 0.0, calibration_quantile: 0.0 } };
    let settings = LabelSettings { spec: &spec, pairing: &p, demo_stride: 4, gap_m: None };
    let labels = label_epoch(&inst[..5], &m, &density, &settings).unwrap();
    assert_eq!(labels.stats.labeled_constrained, labels.stats.planner_pairs_total);
    assert_eq!(labels.planner.len(), labels.stats.labeled_constrained);
    assert!(labels.planner.iter().all(|e| e.label == Label::PlannerConstrained));
    assert!(labels.demo.iter().all(|e| e.label == Label::DemoUnconstrained));
}

fn small_cfg() -> InferenceConfig {
    InferenceConfig {
        max_epochs: 2,
        planner_batch: 4,
        steps_per_epoch: 3,
        batch_size: 8,
        demo_stride: 10,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn inference_loop_bounds_and_determinism() {
    let v = vae(8);
    let spec = SamplingSpec::default();
    let p = pairing();
    let inst = traffic(12, 8, Split::Train);
    let density = Density { vae: &v, threshold: DensityThreshold { e_th: 0.0, calibration_quantile: 0.0 } };

    let one = InferenceConfig { max_epochs: 1, ..small_cfg() };
    assert_eq!(run_inference(&inst, &density, &one, &spec, &p, None).unwrap().reports.len(), 1);

    let a = run_inference(&inst, &density, &small_cfg(), &spec, &p, None).unwrap();
    let b = run_inference(&inst, &density, &small_cfg(), &spec, &p, None).unwrap();
    assert_eq!(a.reports, b.reports);
    assert!(a.model.same_parameters(&b.model));
    assert!(a.reports.iter().all(|r| r.stats.labeled_constrained <= r.stats.planner_pairs_total));
    // Every chosen pair was constrained, so the model has been trained.
    assert!(!a.model.same_parameters(&init_from_vae(&v, 0.1, 11).unwrap()));

    let loose = InferenceConfig { convergence_new_constrained_frac: 1.0, ..small_cfg() };
    let calm = Density { vae: &v, threshold: DensityThreshold::unbounded() };
    let run = run_inference(&inst, &calm, &loose, &spec, &p, None).unwrap();
    assert_eq!(run.reports.len(), 1);
    assert!(run.reports[0].converged);
}

#[test]
fn hook_sees_every_epoch() {
    let v = vae(9);
    let spec = SamplingSpec::default();
    let p = pairing();
    let inst = traffic(12, 9, Split::Train);
    let density = Density { vae: &v, threshold: DensityThreshold { e_th: 0.0, calibration_quantile: 0.0 } };
    let mut seen = Vec::new();
    let mut hook = |r: &cinfer::inference::EpochReport, _: &cinfer::constraint::ConstraintModel, l: &cinfer::inference::EpochLabels| {
        assert_eq!(l.planner.len(), l.stats.labeled_constrained);
        seen.push(r.epoch);
        Ok(())
    };
    let run = run_inference(&inst, &density, &small_cfg(), &spec, &p, Some(&mut hook)).unwrap();
    assert_eq!(seen, run.reports.iter().map(|r| r.epoch).collect::<Vec<_>>());
}

#[test]
fn empty_road_is_clean() {
    let p = pairing();
    let inst = traffic(1, 10, Split::Test);
    assert!(inst.iter().all(|i| i.neighbor_tracks.is_empty()));
    let r = evaluate(&inst, None, &SamplingSpec::default(), &p).unwrap();
    assert_eq!((r.collision_pct, r.out_of_road_pct, r.no_solution_pct), (0.0, 0.0, 0.0));
}

#[test]
fn blocking_model_has_no_solutions() {
    let p = pairing();
    let inst = traffic(12, 12, Split::Test);
    let m = init_from_vae(&vae(12), 0.9, 12).unwrap();
    let r = evaluate(&inst[..4], Some(&m), &SamplingSpec::default(), &p).unwrap();
    assert_eq!(r.no_solution_pct, 100.0);
    assert_eq!((r.collision_pct, r.out_of_road_pct), (0.0, 0.0));
}

#[test]
fn evaluation_refuses_training_split() {
    let inst = traffic(12, 13, Split::Train);
    assert!(evaluate(&inst[..1], None, &SamplingSpec::default(), &pairing()).is_err());
}

#[test]
fn huge_shift_is_identity() {
    let inst = traffic(24, 14, Split::Calib);
    let r = perturbation_study(&vae(14), &inst, 1e6, &pairing()).unwrap();
    assert!(r.used > 0);
    assert_eq!(r.ratio(), 1.0);
}

#[test]
fn report_rendering_round_trips() {
    let mut report = EvalReport::from_counts(1000, 5, 3, 16);
    report.baseline = Some(Box::new(EvalReport::from_counts(1000, 70, 0, 0)));
    let table = report_table(&report);
    assert!(table.contains(&TABLE_COLUMNS.join(" | ")));
    assert_eq!(TABLE_COLUMNS, ["Collision %", "Out of road %", "No MoP solution %"]);

    let p = pairing();
    let inst = traffic(12, 15, Split::Test);
    let m = init_from_vae(&vae(15), 0.1, 15).unwrap();
    let regions = RegionRender { model: &m, instances: &inst, count: 2, pairing: &p };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let fa = render_report(&report, &a, Some(&regions)).unwrap();
    let fb = render_report(&report, &b, Some(&regions)).unwrap();
    assert_eq!(fa.len(), 4);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let back = parse_report_csv(&std::fs::read_to_string(a.join("report.csv")).unwrap()).unwrap();
    assert!((back.collision_pct - report.collision_pct).abs() < 1e-9);
    assert!((back.out_of_road_pct - report.out_of_road_pct).abs() < 1e-9);
    assert!((back.no_solution_pct - report.no_solution_pct).abs() < 1e-9);
    let base = back.baseline.unwrap();
    assert!((base.collision_pct - 7.0).abs() < 1e-9);
}

#[test]
fn checkpoint_bytes_are_stable() {
    let m = init_from_vae(&vae(16), 0.1, 16).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    m.write_to(&mut a).unwrap();
    m.clone().write_to(&mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.tensors().len(), m.backbone.tensors().len() + 4);
}

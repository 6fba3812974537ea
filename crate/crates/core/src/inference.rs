//! The outer constraint-inference loop.
//!
//! Each epoch plans a batch of demonstrations with the current constraint
//! model, labels demonstration pairs unconstrained and low-density pairs of
//! the chosen trajectories constrained, then takes gradient steps on the
//! classifier loss. Constrained labels are kept across epochs; demonstration
//! pairs come from the current batch.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraint::{
    batch_loss, init_from_vae, BatchEntry, ConstraintModel, ConstraintParts, Label, LabeledExample,
};
use crate::dataset::{min_leader_gap, DemonstrationInstance, ReplayWorld};
use crate::density::{draw_noise, recon_error, DensityThreshold, VaeModel, CHUNK};
use crate::error::{domain, Error, Result};
use crate::neural::OptimizerState;
use crate::pairs::Pairing;
use crate::planner::{plan_with, SamplingSpec, Search};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub max_epochs: usize,
    /// Instances planned per epoch.
    pub planner_batch: usize,
    pub steps_per_epoch: usize,
    pub convergence_new_constrained_frac: f64,
    pub seed: u64,
    /// Examples per gradient step, split evenly between the classes when
    /// both are present.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub bias_prior: f64,
    pub decision_threshold: f64,
    pub freeze_backbone: bool,
    /// Keep every `demo_stride`-th demonstration pair.
    pub demo_stride: usize,
    /// Ground-truth minimum gap, used only for reporting violations.
    pub gap_m: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            max_epochs: 10,
            planner_batch: 64,
            steps_per_epoch: 200,
            convergence_new_constrained_frac: 0.02,
            seed: 0,
            batch_size: 32,
            learning_rate: 1e-3,
            beta: 1e-3,
            bias_prior: 0.1,
            decision_threshold: 0.5,
            freeze_backbone: false,
            demo_stride: 4,
            gap_m: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.planner_batch == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs, planner_batch and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.convergence_new_constrained_frac) {
            return Err(Error::Config("convergence fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The frozen density model used for labeling.
#[derive(Debug, Clone, Copy)]
pub struct Density<'a> {
    pub vae: &'a VaeModel,
    pub threshold: DensityThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabelStats {
    pub instances: usize,
    pub planner_pairs_total: usize,
    pub labeled_constrained: usize,
    pub no_solution_count: usize,
    /// Chosen trajectories closer than the ground-truth gap to a leader.
    pub gap_violations: usize,
}

impl LabelStats {
    fn add(&mut self, o: &LabelStats) {
        self.instances += o.instances;
        self.planner_pairs_total += o.planner_pairs_total;
        self.labeled_constrained += o.labeled_constrained;
        self.no_solution_count += o.no_solution_count;
        self.gap_violations += o.gap_violations;
    }

    pub fn gap_violation_frac(&self) -> f64 {
        let solved = self.instances - self.no_solution_count;
        if solved == 0 {
            0.0
        } else {
            self.gap_violations as f64 / solved as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLabels {
    pub demo: Vec<LabeledExample>,
    pub planner: Vec<LabeledExample>,
    pub stats: LabelStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSettings<'a> {
    pub spec: &'a SamplingSpec,
    pub pairing: &'a Pairing,
    pub demo_stride: usize,
    pub gap_m: Option<f64>,
}

fn label_instance(
    inst: &DemonstrationInstance,
    model: &ConstraintModel,
    density: &Density<'_>,
    set: &LabelSettings<'_>,
) -> Result<EpochLabels> {
    let ctx = |e: Error| match e {
        Error::Domain(m) => Error::Domain(format!("instance {}: {m}", inst.id)),
        other => other,
    };
    let demo = set
        .pairing
        .demo_pairs(inst, set.demo_stride)
        .map_err(ctx)?
        .into_iter()
        .enumerate()
        .map(|(k, image)| LabeledExample {
            image,
            label: Label::DemoUnconstrained,
            instance_id: inst.id.clone(),
            t: k * set.demo_stride.max(1),
        })
        .collect();
    let mut stats = LabelStats {
        instances: 1,
        ..LabelStats::default()
    };
    let mut planner = Vec::new();
    let result = plan_with(inst, Some(model), set.spec, set.pairing, Search::FirstFeasible).map_err(ctx)?;
    match result.chosen() {
        None => stats.no_solution_count = 1,
        Some((_, cand, _)) => {
            let world = ReplayWorld::from_instance(inst);
            if let Some(g) = set.gap_m {
                if min_leader_gap(&inst.ego, &cand.poses, &world) < g {
                    stats.gap_violations = 1;
                }
            }
            let n = set.pairing.pair_count(cand.poses.len());
            stats.planner_pairs_total = n;
            for t in 0..n {
                let image = set
                    .pairing
                    .encode(&inst.ego, &cand.poses, &world, &inst.road, t)
                    .map_err(ctx)?;
                if density.threshold.is_low_density(recon_error(density.vae, &image.data)?) {
                    planner.push(LabeledExample {
                        image,
                        label: Label::PlannerConstrained,
                        instance_id: inst.id.clone(),
                        t,
                    });
                }
            }
            stats.labeled_constrained = planner.len();
        }
    }
    Ok(EpochLabels { demo, planner, stats })
}

/// Plans every instance with `model` and labels the resulting pairs.
pub fn label_epoch(
    instances: &[DemonstrationInstance],
    model: &ConstraintModel,
    density: &Density<'_>,
    settings: &LabelSettings<'_>,
) -> Result<EpochLabels> {
    let parts: Vec<EpochLabels> = instances
        .par_iter()
        .map(|inst| label_instance(inst, model, density, settings))
        .collect::<Result<_>>()?;
    let mut out = EpochLabels {
        demo: Vec::new(),
        planner: Vec::new(),
        stats: LabelStats::default(),
    };
    for p in parts {
        out.demo.extend(p.demo);
        out.planner.extend(p.planner);
        out.stats.add(&p.stats);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub stats: LabelStats,
    /// Demonstration examples trained on this epoch.
    pub demo_examples: usize,
    /// Constrained examples trained on this epoch (all epochs so far).
    pub planner_examples: usize,
    /// Mean per-step loss terms.
    pub mean_loss_parts: ConstraintParts,
    pub converged: bool,
    /// Training diverged; the model was rolled back to the start of the
    /// epoch and the loop stopped.
    pub diverged: bool,
}

impl EpochReport {
    pub fn constrained_frac(&self) -> f64 {
        if self.stats.planner_pairs_total == 0 {
            0.0
        } else {
            self.stats.labeled_constrained as f64 / self.stats.planner_pairs_total as f64
        }
    }
}

pub fn write_reports_csv(reports: &[EpochReport], path: &Path) -> Result<()> {
    let mut text = String::from(
        "epoch,instances,planner_pairs_total,labeled_constrained,no_solution_count,gap_violations,\
         demo_examples,planner_examples,demo_bce,planner_bce,rmse,kl_term,converged,diverged\n",
    );
    for r in reports {
        let s = &r.stats;
        let p = &r.mean_loss_parts;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:?},{:?},{:?},{:?},{},{}\n",
            r.epoch,
            s.instances,
            s.planner_pairs_total,
            s.labeled_constrained,
            s.no_solution_count,
            s.gap_violations,
            r.demo_examples,
            r.planner_examples,
            p.demo_bce,
            p.planner_bce,
            p.rmse,
            p.kl_term,
            r.converged,
            r.diverged
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Called after every epoch with the report, the model and the labels.
pub type EpochHook<'a> = dyn FnMut(&EpochReport, &ConstraintModel, &EpochLabels) -> Result<()> + 'a;

struct Trainer {
    opt_enc: OptimizerState,
    opt_dec: OptimizerState,
    opt_head: OptimizerState,
}

impl Trainer {
    fn new(m: &ConstraintModel, lr: f64) -> Self {
        Trainer {
            opt_enc: OptimizerState::new(&m.backbone.encoder, lr),
            opt_dec: OptimizerState::new(&m.backbone.decoder, lr),
            opt_head: OptimizerState::new(&m.head, lr),
        }
    }

    /// One gradient step on a balanced minibatch; returns the loss parts.
    fn step(
        &mut self,
        model: &mut ConstraintModel,
        demo: &[&LabeledExample],
        planner: &[&LabeledExample],
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConstraintParts> {
        let wd = if demo.is_empty() { 0.0 } else { 1.0 / demo.len() as f64 };
        let wp = if planner.is_empty() { 0.0 } else { 1.0 / planner.len() as f64 };
        let l = model.backbone.latent_dim;
        let noise: Vec<Vec<f64>> = demo.iter().map(|_| draw_noise(l, rng)).collect();
        let jobs: Vec<BatchEntry<'_>> = demo
            .iter()
            .zip(&noise)
            .map(|(&example, eps)| BatchEntry { example, eps, weight: wd })
            .chain(planner.iter().map(|&example| BatchEntry { example, eps: &[], weight: wp }))
            .collect();
        let m = &*model;
        let partials: Vec<Result<_>> = jobs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = m.zero_grads();
                let parts = batch_loss(m, chunk, beta, &mut g)?;
                Ok((g, parts))
            })
            .collect();
        let mut grads = model.zero_grads();
        let mut parts = ConstraintParts::default();
        for p in partials {
            let (g, pp) = p?;
            grads.add(&g);
            parts.add(&pp);
        }
        if !parts.total().is_finite() {
            return Err(Error::Numeric("non-finite constraint loss".into()));
        }
        self.opt_head.step(&mut model.head, &grads.head)?;
        if !model.freeze_backbone {
            self.opt_enc.step(&mut model.backbone.encoder, &grads.backbone.encoder)?;
            self.opt_dec.step(&mut model.backbone.decoder, &grads.backbone.decoder)?;
        }
        Ok(parts)
    }
}

pub struct InferenceRun {
    pub model: ConstraintModel,
    pub reports: Vec<EpochReport>,
}

/// Runs the loop on `instances` (the training split).
pub fn run_inference(
    instances: &[DemonstrationInstance],
    density: &Density<'_>,
    cfg: &InferenceConfig,
    spec: &SamplingSpec,
    pairing: &Pairing,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<InferenceRun> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(domain("no training instances"));
    }
    let mut model = init_from_vae(density.vae, cfg.bias_prior, cfg.seed)?;
    model.decision_threshold = cfg.decision_threshold;
    model.freeze_backbone = cfg.freeze_backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(&model, cfg.learning_rate);
    let settings = LabelSettings {
        spec,
        pairing,
        demo_stride: cfg.demo_stride,
        gap_m: cfg.gap_m,
    };

    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut constrained_pool: Vec<LabeledExample> = Vec::new();
    let mut reports = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let take = cfg.planner_batch.min(instances.len());
        let batch: Vec<DemonstrationInstance> = (0..take)
            .map(|k| instances[order[(cursor + k) % order.len()]].clone())
            .collect();
        cursor = (cursor + take) % order.len();

        let labels = label_epoch(&batch, &model, density, &settings)?;
        let mut report = EpochReport {
            epoch,
            stats: labels.stats,
            demo_examples: 0,
            planner_examples: 0,
            mean_loss_parts: ConstraintParts::default(),
            converged: false,
            diverged: false,
        };
        report.converged = report.constrained_frac() < cfg.convergence_new_constrained_frac;
        constrained_pool.extend(labels.planner.iter().cloned());

        if !report.converged && !labels.demo.is_empty() {
            report.demo_examples = labels.demo.len();
            report.planner_examples = constrained_pool.len();
            let snapshot = model.clone();
            let trainer_snapshot = (trainer.opt_enc.clone(), trainer.opt_dec.clone(), trainer.opt_head.clone());
            let demo_refs: Vec<&LabeledExample> = labels.demo.iter().collect();
            let pool_refs: Vec<&LabeledExample> = constrained_pool.iter().collect();
            let per_class = if pool_refs.is_empty() { cfg.batch_size } else { cfg.batch_size.div_ceil(2) };
            let mut sum = ConstraintParts::default();
            for _ in 0..cfg.steps_per_epoch {
                let d: Vec<&LabeledExample> = (0..per_class).map(|_| *demo_refs.choose(&mut rng).expect("non-empty")).collect();
                let p: Vec<&LabeledExample> = if pool_refs.is_empty() {
                    Vec::new()
                } else {
                    (0..per_class).map(|_| *pool_refs.choose(&mut rng).expect("non-empty")).collect()
                };
                match trainer.step(&mut model, &d, &p, cfg.beta, &mut rng) {
                    Ok(parts) => sum.add(&parts),
                    Err(Error::Numeric(_)) => {
                        model = snapshot;
                        (trainer.opt_enc, trainer.opt_dec, trainer.opt_head) = trainer_snapshot;
                        report.diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !report.diverged && cfg.steps_per_epoch > 0 {
                let k = cfg.steps_per_epoch as f64;
                report.mean_loss_parts = ConstraintParts {
                    demo_bce: sum.demo_bce / k,
                    planner_bce: sum.planner_bce / k,
                    rmse: sum.rmse / k,
                    kl_term: sum.kl_term / k,
                };
            }
        }
        if let Some(h) = hook.as_mut() {
            h(&report, &model, &labels)?;
        }
        let stop = report.converged || report.diverged;
        reports.push(report);
        if stop {
            break;
        }
    }
    Ok(InferenceRun { model, reports })
}

//! The `cinfer` command line: synthetic data, VAE density training,
//! constraint inference, planning and evaluation, each writing into one
//! run directory with a content-hashed manifest.

pub mod config;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cinfer::constraint::{
    drivable_region, load_checkpoint, write_vae_checkpoint, Checkpoint, ConstraintModel, RegionContext,
};
use cinfer::dataset::{
    assign_splits, generate_synthetic, ingest_ngsim, load_cache, save_cache, DemonstrationInstance, IngestOptions,
    ReplayWorld, Split,
};
use cinfer::density::{calibrate_threshold, train_vae, write_training_log, DensityThreshold, EpochLog, VaeModel};
use cinfer::evaluate::{evaluate_with_baseline, region_offsets, render_report, report_table, EvalReport};
use cinfer::inference::{
    run_inference, write_reports_csv, Density, EpochHook, EpochLabels, EpochReport, InferenceRun,
};
use cinfer::kv::KvMap;
use cinfer::neural::Tensor;
use cinfer::ogm::{render_pgm, write_pgm, Planes, PAIR_PLANES};
use cinfer::planner::{plan, Outcome};
use cinfer::scene::RoadSpec;

pub use config::RunConfig;
pub use error::{CliError, EXIT_INVALID, EXIT_MISSING};

pub const DATA: &str = "data.jsonl";
pub const VAE: &str = "vae.ckpt";
pub const THRESHOLD: &str = "vae_threshold.bin";
pub const VAE_LOG: &str = "vae_log.csv";
pub const CONSTRAINT: &str = "constraint.ckpt";
pub const EPOCHS: &str = "epochs.csv";
pub const REPORT_DIR: &str = "report";
pub const RENDER_DIR: &str = "render";

#[derive(Debug, Parser)]
#[command(name = "cinfer", version, about = "Learn driving constraints from demonstrations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run directory for every artifact.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed; `CF_SEED` is used when neither is set.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Any config key, e.g. `--set quantile=0.9`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrafficFlags {
    /// Lane count.
    #[arg(long)]
    pub lanes: Option<usize>,
    /// Simulated vehicles.
    #[arg(long)]
    pub vehicles: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Ground-truth minimum gap (m).
    #[arg(long)]
    pub gap: Option<f64>,
    /// Minimum time headway (s).
    #[arg(long)]
    pub headway: Option<f64>,
    /// Anchor-frame subsampling.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate synthetic expert traffic and cache its instances.
    GenData(TrafficFlags),
    /// Slice an NGSIM-format CSV into cached instances.
    Ingest {
        /// NGSIM-format trajectory CSV (feet).
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        traffic: TrafficFlags,
    },
    /// Train the VAE density model and calibrate its threshold.
    TrainVae,
    /// Run the constraint inference loop.
    TrainConstraint,
    /// Plan one instance and print the chosen target.
    Plan {
        /// Instance id from the cached dataset.
        #[arg(long)]
        instance: String,
        /// Plan without the learned constraint.
        #[arg(long)]
        no_constraint: bool,
    },
    /// Evaluate the constrained planner against the unconstrained one.
    Evaluate,
    /// Render state-action planes and drivable regions as PGM images.
    Render {
        /// Instance id; defaults to the first test instance.
        #[arg(long)]
        instance: Option<String>,
        /// Pair index within the instance.
        #[arg(long, default_value_t = 0)]
        t: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Ingest { .. } => "ingest",
            Command::TrainVae => "train-vae",
            Command::TrainConstraint => "train-constraint",
            Command::Plan { .. } => "plan",
            Command::Evaluate => "evaluate",
            Command::Render { .. } => "render",
        }
    }
}

fn flag_overrides(cli: &Cli) -> Result<KvMap, CliError> {
    let mut kv = KvMap::new();
    for item in &cli.global.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("--set expects KEY=VALUE, got `{item}`")))?;
        kv.set(k.trim(), v.trim());
    }
    let traffic = match &cli.command {
        Command::GenData(t) | Command::Ingest { traffic: t, .. } => Some(t),
        _ => None,
    };
    if let Some(t) = traffic {
        let pairs = [
            ("lanes", t.lanes.map(|v| v.to_string())),
            ("vehicles", t.vehicles.map(|v| v.to_string())),
            ("duration_s", t.duration.map(|v| v.to_string())),
            ("gap_m", t.gap.map(|v| v.to_string())),
            ("headway_s", t.headway.map(|v| v.to_string())),
            ("stride", t.stride.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
    }
    if let Some(s) = cli.global.seed {
        kv.set("seed", s.to_string());
    }
    Ok(kv)
}

/// Everything a command needs: the merged config and the run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    inputs: Vec<String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `path` inside the run directory, or exit code 2.
    fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::missing(&p))
        }
    }

    /// Records an input by its name relative to the run directory, or by
    /// file name when it lives elsewhere.
    fn note_input(&mut self, path: &Path) -> Result<(), CliError> {
        let name = match path.strip_prefix(&self.out) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        self.inputs.push(format!("input {} {name}", manifest::file_hash(path)?));
        Ok(())
    }

    fn load_data(&mut self) -> Result<Vec<DemonstrationInstance>, CliError> {
        let p = self.require(DATA)?;
        self.note_input(&p)?;
        Ok(load_cache(&p)?)
    }

    fn load_vae(&mut self) -> Result<(VaeModel, DensityThreshold), CliError> {
        let p = self.require(VAE)?;
        let t = self.require(THRESHOLD)?;
        self.note_input(&p)?;
        self.note_input(&t)?;
        let vae = match load_checkpoint(&p)? {
            Checkpoint::Vae(v) => v,
            Checkpoint::Constraint(_) => return Err(CliError::invalid(format!("{} is not a VAE checkpoint", p.display()))),
        };
        let bytes = std::fs::read(&t).map_err(|e| CliError::invalid(format!("{}: {e}", t.display())))?;
        Ok((vae, DensityThreshold::read_from(&mut bytes.as_slice())?))
    }

    fn load_constraint(&mut self) -> Result<ConstraintModel, CliError> {
        let p = self.require(CONSTRAINT)?;
        self.note_input(&p)?;
        match load_checkpoint(&p)? {
            Checkpoint::Constraint(m) => Ok(m),
            Checkpoint::Vae(_) => Err(CliError::invalid(format!("{} is not a constraint checkpoint", p.display()))),
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn finish(&self, command: &str) -> Result<(), CliError> {
        let mut lines = vec![format!("seed = {}", self.cfg.seed()?), format!("config = {}", self.cfg.hash())];
        lines.extend(self.inputs.iter().cloned());
        manifest::record(&self.out, command, &lines)?;
        Ok(())
    }
}

pub fn split_of(instances: &[DemonstrationInstance], split: Split) -> Vec<DemonstrationInstance> {
    instances.iter().filter(|i| i.split == split).cloned().collect()
}

fn split_counts(instances: &[DemonstrationInstance]) -> [usize; 3] {
    let n = |s| instances.iter().filter(|i| i.split == s).count();
    [n(Split::Train), n(Split::Calib), n(Split::Test)]
}

/// Assigns train/calib/test splits from the configured fractions and seed.
pub fn split_dataset(cfg: &RunConfig, instances: &mut [DemonstrationInstance]) -> Result<(), CliError> {
    assign_splits(instances, cfg.get("calib_frac")?, cfg.get("test_frac")?, cfg.seed()?);
    Ok(())
}

fn save_instances(run: &Run, mut instances: Vec<DemonstrationInstance>, origin: &str) -> Result<(), CliError> {
    split_dataset(&run.cfg, &mut instances)?;
    save_cache(&run.path(DATA), &instances)?;
    let [tr, ca, te] = split_counts(&instances);
    println!("{origin}: {} instances (train {tr}, calib {ca}, test {te})", instances.len());
    Ok(())
}

/// Demonstration pairs of `instances` at the configured pair stride.
pub fn density_pairs(cfg: &RunConfig, instances: &[DemonstrationInstance]) -> Result<Vec<Tensor>, CliError> {
    let pairing = cfg.pairing()?;
    let stride: usize = cfg.get("pair_stride")?;
    let mut out = Vec::new();
    for inst in instances {
        out.extend(pairing.demo_pairs(inst, stride)?);
    }
    Ok(out)
}

pub struct FittedDensity {
    pub vae: VaeModel,
    pub threshold: DensityThreshold,
    pub log: Vec<EpochLog>,
    pub train_pairs: usize,
}

/// Trains the VAE on the train split and calibrates `e_th` on the calib split.
pub fn fit_density(cfg: &RunConfig, data: &[DemonstrationInstance]) -> Result<FittedDensity, CliError> {
    let train = density_pairs(cfg, &split_of(data, Split::Train))?;
    let calib = density_pairs(cfg, &split_of(data, Split::Calib))?;
    if train.is_empty() || calib.is_empty() {
        return Err(CliError::invalid("training and calibration splits must both be non-empty"));
    }
    let shape = cfg.pairing()?.grid.pair_shape();
    let mut vae = VaeModel::new(&shape, &cfg.vae()?)?;
    let log = train_vae(&mut vae, &train, &cfg.vae_training()?)?;
    let threshold = calibrate_threshold(&vae, &calib, cfg.get("quantile")?)?;
    Ok(FittedDensity {
        vae,
        threshold,
        log,
        train_pairs: train.len(),
    })
}

/// Runs constraint inference on the train split.
pub fn infer_constraints(
    cfg: &RunConfig,
    data: &[DemonstrationInstance],
    density: &Density<'_>,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<InferenceRun, CliError> {
    let train = split_of(data, Split::Train);
    Ok(run_inference(
        &train,
        density,
        &cfg.inference()?,
        &cfg.sampling()?,
        &cfg.pairing()?,
        hook,
    )?)
}

/// The first `eval_limit` test instances.
pub fn evaluation_set(cfg: &RunConfig, data: &[DemonstrationInstance]) -> Result<Vec<DemonstrationInstance>, CliError> {
    let limit: usize = cfg.get("eval_limit")?;
    let test: Vec<_> = split_of(data, Split::Test).into_iter().take(limit).collect();
    if test.is_empty() {
        return Err(CliError::invalid("the test split is empty"));
    }
    Ok(test)
}

/// Scores `model` and the unconstrained baseline on the evaluation set.
pub fn evaluate_run(cfg: &RunConfig, data: &[DemonstrationInstance], model: &ConstraintModel) -> Result<EvalReport, CliError> {
    let test = evaluation_set(cfg, data)?;
    Ok(evaluate_with_baseline(&test, model, &cfg.sampling()?, &cfg.pairing()?)?)
}

fn cmd_train_vae(run: &mut Run) -> Result<(), CliError> {
    let data = run.load_data()?;
    let FittedDensity {
        vae,
        threshold,
        log,
        train_pairs,
    } = fit_density(&run.cfg, &data)?;

    let mut ckpt = Vec::new();
    write_vae_checkpoint(&mut ckpt, &vae).map_err(|e| CliError::invalid(e.to_string()))?;
    run.write(VAE, &ckpt)?;
    let mut th = Vec::new();
    threshold.write_to(&mut th).map_err(|e| CliError::invalid(e.to_string()))?;
    run.write(THRESHOLD, &th)?;
    write_training_log(&log, &run.path(VAE_LOG))?;
    if let Some(last) = log.last() {
        println!("vae: {train_pairs} pairs, final rmse {:.5}, kl {:.3}", last.rmse, last.kl);
    }
    println!("threshold: e_th {:.6} at quantile {}", threshold.e_th, threshold.calibration_quantile);
    Ok(())
}

fn cmd_train_constraint(run: &mut Run) -> Result<(), CliError> {
    let data = run.load_data()?;
    let (vae, threshold) = run.load_vae()?;
    let ckpt_dir = format!("checkpoints/s{}_{}", run.cfg.seed()?, &run.cfg.hash()[..12]);
    let density = Density { vae: &vae, threshold };
    let out = run.out.clone();
    let mut hook = |r: &EpochReport, m: &ConstraintModel, _: &EpochLabels| -> cinfer::Result<()> {
        println!(
            "epoch {}: constrained {}/{} ({:.4}), no solution {}, gap violations {:.4}{}",
            r.epoch,
            r.stats.labeled_constrained,
            r.stats.planner_pairs_total,
            r.constrained_frac(),
            r.stats.no_solution_count,
            r.stats.gap_violation_frac(),
            if r.converged { ", converged" } else { "" }
        );
        let dir = out.join(&ckpt_dir);
        std::fs::create_dir_all(&dir).map_err(|e| cinfer::Error::Data(format!("{}: {e}", dir.display())))?;
        m.save(&dir.join(format!("epoch_{:03}.ckpt", r.epoch)))
    };
    let result = infer_constraints(&run.cfg, &data, &density, Some(&mut hook))?;
    result.model.save(&run.path(CONSTRAINT))?;
    write_reports_csv(&result.reports, &run.path(EPOCHS))?;
    Ok(())
}

fn find<'a>(instances: &'a [DemonstrationInstance], id: &str) -> Result<&'a DemonstrationInstance, CliError> {
    instances
        .iter()
        .find(|i| i.id == id)
        .ok_or_else(|| CliError::invalid(format!("no instance `{id}` in the dataset")))
}

fn cmd_plan(run: &mut Run, id: &str, no_constraint: bool) -> Result<(), CliError> {
    let data = run.load_data()?;
    let model = if no_constraint { None } else { Some(run.load_constraint()?) };
    let inst = find(&data, id)?;
    let res = plan(inst, model.as_ref(), &run.cfg.sampling()?, &run.cfg.pairing()?)?;
    res.write_trace(&run.path(&format!("plan_{id}.csv")))?;
    match &res.outcome {
        Outcome::Chosen { candidate, cost, .. } => println!(
            "chosen target_lateral={:.4} target_speed={:.4} cost={:.6} feasible={}",
            candidate.target_lateral, candidate.target_speed, cost, res.feasible_count
        ),
        Outcome::NoSolution => println!("no solution"),
    }
    Ok(())
}

fn cmd_evaluate(run: &mut Run) -> Result<(), CliError> {
    let data = run.load_data()?;
    let model = run.load_constraint()?;
    let report = evaluate_run(&run.cfg, &data, &model)?;
    render_report(&report, &run.path(REPORT_DIR), None)?;
    print!("{}", report_table(&report));
    Ok(())
}

fn cmd_render(run: &mut Run, id: Option<&str>, t: usize) -> Result<(), CliError> {
    let data = run.load_data()?;
    let test = split_of(&data, Split::Test);
    let inst = match id {
        Some(id) => find(&data, id)?,
        None => test.first().ok_or_else(|| CliError::invalid("the test split is empty"))?,
    };
    let pairing = run.cfg.pairing()?;
    let world = ReplayWorld::from_instance(inst);
    let image = pairing.encode(&inst.ego, &inst.ego_track, &world, &inst.road, t)?;
    let planes = Planes {
        count: PAIR_PLANES,
        height: pairing.grid.height_cells,
        width: pairing.grid.width_cells,
        data: image.data,
    };
    let dir = run.path(RENDER_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?;
    let written = render_pgm(&planes, &dir.join(format!("{}_t{t}", inst.id)))?;
    println!("rendered {} planes of {} at t={t}", written.len(), inst.id);

    if run.path(CONSTRAINT).exists() {
        let model = run.load_constraint()?;
        let (s_off, d_off) = region_offsets(&pairing);
        let count: usize = run.cfg.get("regions")?;
        for inst in test.iter().take(count) {
            let world = ReplayWorld::from_instance(inst);
            let ctx = RegionContext { snapshot: world.at_step(0)?, road: &inst.road, ego: &inst.ego };
            let mask = drivable_region(&model, &ctx, &s_off, &d_off, &pairing, inst.dt)?;
            write_pgm(&mask.to_plane(), mask.rows, mask.cols, &dir.join(format!("region_{}.pgm", inst.id)))?;
            let open = mask.drivable.iter().filter(|&&b| b).count();
            println!("region {}: {open}/{} cells drivable", inst.id, mask.drivable.len());
        }
    }
    Ok(())
}

/// Runs one parsed command line; `env_seed` is the value of `CF_SEED`.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::invalid("--threads must be >= 1"));
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let flags = flag_overrides(cli)?;
    let cfg = RunConfig::load(cli.global.config.as_deref(), &flags, env_seed)?;
    std::fs::create_dir_all(&cli.global.out)
        .map_err(|e| CliError::invalid(format!("{}: {e}", cli.global.out.display())))?;
    let mut run = Run { cfg, out: cli.global.out.clone(), inputs: Vec::new() };
    if let Some(p) = &cli.global.config {
        run.note_input(p)?;
    }
    match &cli.command {
        Command::GenData(_) => {
            let instances = generate_synthetic(&run.cfg.synth()?)?;
            save_instances(&run, instances, "generated")?;
        }
        Command::Ingest { csv, .. } => {
            if !csv.exists() {
                return Err(CliError::missing(csv));
            }
            run.note_input(csv)?;
            let synth = run.cfg.synth()?;
            let road = RoadSpec {
                lane_count: synth.lanes,
                lane_width: synth.lane_width,
                ..RoadSpec::default()
            };
            let opts = IngestOptions { dt: synth.dt_s, ..IngestOptions::default() };
            let instances = ingest_ngsim(csv, road, synth.horizon_steps(), synth.stride, &opts)?;
            save_instances(&run, instances, "ingested")?;
        }
        Command::TrainVae => cmd_train_vae(&mut run)?,
        Command::TrainConstraint => cmd_train_constraint(&mut run)?,
        Command::Plan { instance, no_constraint } => cmd_plan(&mut run, instance, *no_constraint)?,
        Command::Evaluate => cmd_evaluate(&mut run)?,
        Command::Render { instance, t } => cmd_render(&mut run, instance.as_deref(), *t)?,
    }
    run.finish(cli.command.name())
}

//! Shared fixtures for the benchmarks.

use cinfer::constraint::{init_from_vae, ConstraintModel};
use cinfer::dataset::{generate_synthetic, DemonstrationInstance, SynthConfig};
use cinfer::density::{Backbone, VaeConfig, VaeModel};
use cinfer::ogm::GridSpec;
use cinfer::pairs::Pairing;

pub struct Fixture {
    pub instances: Vec<DemonstrationInstance>,
    pub pairing: Pairing,
    pub vae: VaeModel,
    pub model: ConstraintModel,
}

/// A small synthetic dataset plus untrained desk-preset models.
pub fn fixture() -> Fixture {
    let cfg = SynthConfig {
        vehicles: 20,
        duration_s: 30.0,
        seed: 11,
        ..SynthConfig::default()
    };
    let instances = generate_synthetic(&cfg).expect("synthetic data");
    let pairing = Pairing::new(1.0, cfg.dt_s, GridSpec::desk()).expect("pairing");
    let vae = VaeModel::new(
        &pairing.grid.pair_shape(),
        &VaeConfig {
            backbone: Backbone::Mlp { hidden: 64 },
            latent_dim: 16,
            seed: 1,
        },
    )
    .expect("vae");
    let model = init_from_vae(&vae, 0.1, 2).expect("constraint model");
    Fixture {
        instances,
        pairing,
        vae,
        model,
    }
}

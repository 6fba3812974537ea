//! Run configuration: schema defaults, then a config file, then flags.

use std::path::Path;
use std::str::FromStr;

use cinfer::density::{Backbone, BetaSchedule, TrainConfig, VaeConfig};
use cinfer::dataset::SynthConfig;
use cinfer::inference::InferenceConfig;
use cinfer::kv::KvMap;
use cinfer::ogm::GridSpec;
use cinfer::pairs::Pairing;
use cinfer::planner::SamplingSpec;

use crate::error::CliError;
use crate::manifest::blob_hash;

/// Every accepted key with its default. The defaults form the desk preset.
pub const SCHEMA: &[(&str, &str)] = &[
    // traffic
    ("lanes", "3"),
    ("lane_width", "3.7"),
    ("vehicles", "45"),
    ("duration_s", "100"),
    ("dt_s", "0.1"),
    ("gap_m", "8"),
    ("headway_s", "0.8"),
    ("stride", "10"),
    ("horizon_s", "5"),
    ("spawn_length_m", "500"),
    ("v_des_min", "10"),
    ("v_des_max", "22"),
    ("lane_change_rate", "0.03"),
    ("calib_frac", "0.15"),
    ("test_frac", "0.35"),
    // encoding
    ("grid", "desk"),
    ("window_s", "1.0"),
    ("pair_stride", "20"),
    // density model
    ("backbone", "mlp"),
    ("hidden", "64"),
    ("channels", "8"),
    ("latent_dim", "16"),
    ("vae_epochs", "20"),
    ("vae_batch", "32"),
    ("vae_lr", "0.001"),
    ("beta_max", "0.001"),
    ("cycle_len", "400"),
    ("ramp_ratio", "0.5"),
    ("quantile", "0.95"),
    // constraint inference
    ("max_epochs", "10"),
    ("planner_batch", "64"),
    ("steps_per_epoch", "200"),
    ("convergence_frac", "0.02"),
    ("batch_size", "32"),
    ("learning_rate", "0.001"),
    ("beta", "0.001"),
    ("bias_prior", "0.1"),
    ("decision_threshold", "0.5"),
    ("freeze_backbone", "false"),
    ("demo_stride", "4"),
    // evaluation
    ("eval_limit", "300"),
    ("regions", "3"),
    ("seed", "0"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    kv: KvMap,
}

fn schema_keys() -> Vec<&'static str> {
    SCHEMA.iter().map(|(k, _)| *k).collect()
}

fn invalid(e: cinfer::Error) -> CliError {
    CliError::invalid(e.to_string())
}

impl RunConfig {
    /// Layers `file` over the defaults and `flags` over both. The seed falls
    /// back to `env_seed` (the `CF_SEED` variable) when neither layer sets it.
    pub fn build(file: Option<&KvMap>, flags: &KvMap, env_seed: Option<&str>) -> Result<Self, CliError> {
        let keys = schema_keys();
        let mut kv = KvMap::new();
        for (k, v) in SCHEMA {
            kv.set(*k, *v);
        }
        if let Some(s) = env_seed {
            kv.set("seed", s);
        }
        if let Some(f) = file {
            f.reject_unknown(&keys).map_err(invalid)?;
            kv = kv.merged(f);
        }
        flags.reject_unknown(&keys).map_err(invalid)?;
        let cfg = RunConfig { kv: kv.merged(flags) };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, flags: &KvMap, env_seed: Option<&str>) -> Result<Self, CliError> {
        let file = match path {
            None => None,
            Some(p) if !p.exists() => return Err(CliError::missing(p)),
            Some(p) => Some(KvMap::load(p).map_err(invalid)?),
        };
        Self::build(file.as_ref(), flags, env_seed)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.kv
            .get(key)
            .map_err(invalid)?
            .ok_or_else(|| CliError::invalid(format!("missing key `{key}`")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn text(&self) -> String {
        self.kv.to_text()
    }

    pub fn hash(&self) -> String {
        blob_hash(self.text().as_bytes())
    }

    /// Parses every key once so type errors surface before any work.
    fn validate(&self) -> Result<(), CliError> {
        self.synth()?;
        self.sampling()?;
        self.pairing()?;
        self.vae()?;
        self.vae_training()?;
        self.inference()?.validate().map_err(invalid)?;
        for k in ["calib_frac", "test_frac", "quantile"] {
            let v: f64 = self.get(k)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::invalid(format!("`{k}` must lie in [0, 1]")));
            }
        }
        self.get::<usize>("eval_limit")?;
        self.get::<usize>("regions")?;
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        SynthConfig::from_kv(&self.kv).map_err(invalid)
    }

    pub fn sampling(&self) -> Result<SamplingSpec, CliError> {
        let spec = SamplingSpec {
            horizon: self.get("horizon_s")?,
            dt: self.get("dt_s")?,
            ..SamplingSpec::default()
        };
        spec.validate().map_err(invalid)?;
        Ok(spec)
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        match self.get::<String>("grid")?.as_str() {
            "desk" => Ok(GridSpec::desk()),
            "full" => Ok(GridSpec::full()),
            other => Err(CliError::invalid(format!("`grid` must be desk or full, got `{other}`"))),
        }
    }

    pub fn pairing(&self) -> Result<Pairing, CliError> {
        Pairing::new(self.get("window_s")?, self.get("dt_s")?, self.grid()?).map_err(invalid)
    }

    pub fn vae(&self) -> Result<VaeConfig, CliError> {
        let backbone = match self.get::<String>("backbone")?.as_str() {
            "mlp" => Backbone::Mlp { hidden: self.get("hidden")? },
            "conv" => Backbone::Conv { channels: self.get("channels")? },
            other => return Err(CliError::invalid(format!("`backbone` must be mlp or conv, got `{other}`"))),
        };
        Ok(VaeConfig {
            backbone,
            latent_dim: self.get("latent_dim")?,
            seed: self.seed()?,
        })
    }

    pub fn vae_training(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.get("vae_epochs")?,
            batch_size: self.get("vae_batch")?,
            learning_rate: self.get("vae_lr")?,
            schedule: BetaSchedule {
                cycle_len: self.get("cycle_len")?,
                ramp_ratio: self.get("ramp_ratio")?,
                beta_max: self.get("beta_max")?,
            },
            seed: self.seed()?,
        })
    }

    pub fn inference(&self) -> Result<InferenceConfig, CliError> {
        Ok(InferenceConfig {
            max_epochs: self.get("max_epochs")?,
            planner_batch: self.get("planner_batch")?,
            steps_per_epoch: self.get("steps_per_epoch")?,
            convergence_new_constrained_frac: self.get("convergence_frac")?,
            seed: self.seed()?,
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            beta: self.get("beta")?,
            bias_prior: self.get("bias_prior")?,
            decision_threshold: self.get("decision_threshold")?,
            freeze_backbone: self.get("freeze_backbone")?,
            demo_stride: self.get("demo_stride")?,
            gap_m: Some(self.get("gap_m")?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> KvMap {
        KvMap::parse(text).unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = kv("vehicles = 20\nquantile = 0.9\nhidden = 32\n");
        let flags = kv("vehicles = 12\n");
        let cfg = RunConfig::build(Some(&file), &flags, None).unwrap();
        assert_eq!(cfg.get::<usize>("vehicles").unwrap(), 12);
        assert_eq!(cfg.get::<f64>("quantile").unwrap(), 0.9);
        assert_eq!(cfg.get::<usize>("latent_dim").unwrap(), 16);
        assert_eq!(cfg.get::<usize>("hidden").unwrap(), 32);
    }

    #[test]
    fn seed_fallback_order() {
        let none = KvMap::new();
        assert_eq!(RunConfig::build(None, &none, None).unwrap().seed().unwrap(), 0);
        assert_eq!(RunConfig::build(None, &none, Some("5")).unwrap().seed().unwrap(), 5);
        let file = kv("seed = 6");
        assert_eq!(RunConfig::build(Some(&file), &none, Some("5")).unwrap().seed().unwrap(), 6);
        let flags = kv("seed = 7");
        assert_eq!(RunConfig::build(Some(&file), &flags, Some("5")).unwrap().seed().unwrap(), 7);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let none = KvMap::new();
        assert_eq!(RunConfig::build(Some(&kv("colour = red")), &none, None).unwrap_err().code, 1);
        assert_eq!(RunConfig::build(None, &kv("vehicles = many"), None).unwrap_err().code, 1);
        assert_eq!(RunConfig::build(None, &kv("quantile = 2"), None).unwrap_err().code, 1);
        assert_eq!(RunConfig::build(None, &kv("grid = huge"), None).unwrap_err().code, 1);
    }

    #[test]
    fn hash_tracks_content() {
        let none = KvMap::new();
        let a = RunConfig::build(None, &none, None).unwrap();
        let b = RunConfig::build(None, &kv("seed = 1"), None).unwrap();
        assert_eq!(a.hash(), RunConfig::build(None, &none, None).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }
}

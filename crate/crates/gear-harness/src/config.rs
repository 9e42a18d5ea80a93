//! The experiment config file: TOML, one file per experiment, one
//! canonical example under `configs/`. Parsing is strict — unknown keys
//! or missing required fields fail before anything is launched, with the
//! offending field named.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use gear_core::data::{cifar_to_dataset, load_cifar100, synth_generate_shared, Dataset};
use gear_core::optim::AdamHyper;
use gear_train::engine::{ClockMode, Mode, RunParams, TransportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeCfg {
    Gear,
    Nogear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportCfg {
    Inproc,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockCfg {
    Logical,
    Wall,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub num_fastgear: usize,
    pub num_slowgear: usize,
    #[serde(default = "one")]
    pub num_param_servers: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheCfg {
    /// DFV lifetime in clock units (logical ticks or milliseconds).
    pub ttl: u64,
    /// Gradient batches averaged per dense update.
    pub m: usize,
    /// Reserved: replaying stored activations from DFV-creation time is
    /// not implemented; only `false` is accepted.
    #[serde(default)]
    pub stale_replay: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub dense_hidden: Vec<usize>,
    pub sparse_hidden: Vec<usize>,
    pub dfv_dim: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerCfg {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self { lr: h.lr, beta1: h.beta1, beta2: h.beta2, epsilon: h.epsilon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar100,
}

/// Dataset selection plus the union of per-kind fields; which fields are
/// required (and which are rejected) depends on `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub kind: DatasetKind,
    pub num_samples: Option<usize>,
    /// Distinct dense blobs; samples cycle over them. Defaults to
    /// `num_samples`.
    pub num_images: Option<usize>,
    pub sparse_dim: Option<usize>,
    pub dense_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub noise: Option<f64>,
    pub data_seed: Option<u64>,
    pub path: Option<PathBuf>,
    /// Cap on CIFAR records read from the file.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Defaults to a deterministic slug derived from the knobs.
    pub run_id: Option<String>,
    pub mode: ModeCfg,
    #[serde(default = "default_transport")]
    pub transport: TransportCfg,
    #[serde(default = "default_clock")]
    pub clock: ClockCfg,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    pub output_dir: PathBuf,
    pub topology: Topology,
    pub cache: CacheCfg,
    pub model: ModelCfg,
    #[serde(default)]
    pub optimizer: OptimizerCfg,
    pub dataset: DatasetCfg,
}

fn one() -> usize {
    1
}

fn default_transport() -> TransportCfg {
    TransportCfg::Inproc
}

fn default_clock() -> ClockCfg {
    ClockCfg::Logical
}

fn default_max_inflight() -> usize {
    4
}

impl Config {
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Field-level validation beyond what the schema can express.
    /// Returns non-fatal warnings for the caller to surface.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.steps == 0 {
            bail!("steps must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if self.max_inflight == 0 {
            bail!("max_inflight must be at least 1");
        }
        if self.topology.num_fastgear == 0 {
            bail!("topology.num_fastgear must be at least 1");
        }
        if self.mode == ModeCfg::Gear && self.topology.num_slowgear == 0 {
            bail!("topology.num_slowgear must be at least 1 in gear mode");
        }
        if self.topology.num_param_servers == 0 {
            bail!("topology.num_param_servers must be at least 1");
        }
        if self.cache.m == 0 {
            bail!("cache.m must be at least 1");
        }
        if self.cache.stale_replay {
            bail!("cache.stale_replay: replaying creation-time activations is not implemented; set it to false");
        }
        if self.model.dfv_dim == 0 {
            bail!("model.dfv_dim must be at least 1");
        }
        self.validate_dataset()?;

        let mut warnings = Vec::new();
        if self.mode == ModeCfg::Gear && self.topology.num_fastgear != self.topology.num_slowgear {
            warnings.push(format!(
                "topology: {} fastgear vs {} slowgear — unequal worker counts make the baseline comparison lopsided",
                self.topology.num_fastgear, self.topology.num_slowgear
            ));
        }
        Ok(warnings)
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                for (name, missing) in [
                    ("num_samples", d.num_samples.is_none()),
                    ("sparse_dim", d.sparse_dim.is_none()),
                    ("dense_dim", d.dense_dim.is_none()),
                    ("num_classes", d.num_classes.is_none()),
                    ("data_seed", d.data_seed.is_none()),
                ] {
                    if missing {
                        bail!("dataset.{name} is required for kind = \"synthetic\"");
                    }
                }
                for (name, present) in
                    [("path", d.path.is_some()), ("limit", d.limit.is_some())]
                {
                    if present {
                        bail!("dataset.{name} does not apply to kind = \"synthetic\"");
                    }
                }
                if d.num_classes == Some(0) || d.num_classes == Some(1) {
                    bail!("dataset.num_classes must be at least 2");
                }
                if d.num_samples == Some(0) {
                    bail!("dataset.num_samples must be at least 1");
                }
            }
            DatasetKind::Cifar100 => {
                if d.path.is_none() {
                    bail!("dataset.path is required for kind = \"cifar100\"");
                }
                for (name, present) in [
                    ("num_samples", d.num_samples.is_some()),
                    ("num_images", d.num_images.is_some()),
                    ("sparse_dim", d.sparse_dim.is_some()),
                    ("dense_dim", d.dense_dim.is_some()),
                    ("num_classes", d.num_classes.is_some()),
                    ("noise", d.noise.is_some()),
                    ("data_seed", d.data_seed.is_some()),
                ] {
                    if present {
                        bail!("dataset.{name} does not apply to kind = \"cifar100\"");
                    }
                }
            }
        }
        Ok(())
    }

    /// The run id, either configured or a deterministic slug.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let mode = match self.mode {
            ModeCfg::Gear => "gear",
            ModeCfg::Nogear => "nogear",
        };
        let kind = match self.dataset.kind {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar100 => "cifar100",
        };
        format!("{mode}-{kind}-ttl{}-m{}-seed{}", self.cache.ttl, self.cache.m, self.seed)
    }

    pub fn to_run_params(&self) -> RunParams {
        RunParams {
            run_id: self.run_id(),
            mode: match self.mode {
                ModeCfg::Gear => Mode::Gear,
                ModeCfg::Nogear => Mode::Nogear,
            },
            transport: match self.transport {
                TransportCfg::Inproc => TransportKind::Inproc,
                TransportCfg::Socket => TransportKind::Socket,
            },
            clock: match self.clock {
                ClockCfg::Logical => ClockMode::Logical,
                ClockCfg::Wall => ClockMode::Wall,
            },
            num_fastgear: self.topology.num_fastgear,
            num_slowgear: self.topology.num_slowgear,
            num_param_servers: self.topology.num_param_servers,
            ttl: self.cache.ttl,
            m: self.cache.m,
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            max_inflight: self.max_inflight,
            hyper: AdamHyper {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
            },
            dense_hidden: self.model.dense_hidden.clone(),
            sparse_hidden: self.model.sparse_hidden.clone(),
            dfv_dim: self.model.dfv_dim,
            log_messages: false,
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                let n = d.num_samples.unwrap();
                Ok(synth_generate_shared(
                    d.data_seed.unwrap(),
                    n,
                    d.num_images.unwrap_or(n),
                    d.sparse_dim.unwrap(),
                    d.dense_dim.unwrap(),
                    d.num_classes.unwrap(),
                    d.noise.unwrap_or(0.5),
                ))
            }
            DatasetKind::Cifar100 => {
                let path = d.path.as_ref().unwrap();
                let mut records = load_cifar100(path)
                    .with_context(|| format!("loading {}", path.display()))?;
                if let Some(limit) = d.limit {
                    records.truncate(limit);
                }
                if records.is_empty() {
                    bail!("dataset.path {}: no records", path.display());
                }
                Ok(cifar_to_dataset(&records)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        mode = "gear"
        seed = 7
        steps = 10
        batch_size = 2
        output_dir = "runs/x"

        [topology]
        num_fastgear = 1
        num_slowgear = 1

        [cache]
        ttl = 5
        m = 2

        [model]
        dense_hidden = [4]
        sparse_hidden = [4]
        dfv_dim = 3

        [dataset]
        kind = "synthetic"
        num_samples = 8
        sparse_dim = 3
        dense_dim = 3
        num_classes = 2
        data_seed = 1
    "#;

    fn parse(text: &str) -> Config {
        toml::from_str(text).unwrap()
    }

    fn validate_err(text: &str) -> String {
        parse(text).validate().unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse(MINIMAL);
        assert!(cfg.validate().unwrap().is_empty());
        assert_eq!(cfg.transport, TransportCfg::Inproc);
        assert_eq!(cfg.clock, ClockCfg::Logical);
        assert_eq!(cfg.max_inflight, 4);
        assert_eq!(cfg.topology.num_param_servers, 1);
        let h = AdamHyper::default();
        assert_eq!(cfg.optimizer.lr, h.lr);
        assert_eq!(cfg.optimizer.epsilon, h.epsilon);
        assert!(!cfg.cache.stale_replay);
    }

    #[test]
    fn run_id_defaults_to_a_knob_slug_unless_configured() {
        let mut cfg = parse(MINIMAL);
        assert_eq!(cfg.run_id(), "gear-synthetic-ttl5-m2-seed7");
        cfg.run_id = Some("my-run".into());
        assert_eq!(cfg.run_id(), "my-run");
    }

    #[test]
    fn unknown_keys_are_rejected_at_parse_time() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\n        speling = 1");
        let err = toml::from_str::<Config>(&text).unwrap_err().to_string();
        assert!(err.contains("speling"), "{err}");
    }

    #[test]
    fn validation_names_the_offending_field() {
        for (mangle, needle) in [
            (("steps = 10", "steps = 0"), "steps must be at least 1"),
            (("batch_size = 2", "batch_size = 0"), "batch_size must be at least 1"),
            (("num_fastgear = 1", "num_fastgear = 0"), "topology.num_fastgear"),
            (("num_slowgear = 1", "num_slowgear = 0"), "topology.num_slowgear"),
            (("m = 2", "m = 0"), "cache.m must be at least 1"),
            (("dfv_dim = 3", "dfv_dim = 0"), "model.dfv_dim"),
            (("num_classes = 2", "num_classes = 1"), "dataset.num_classes"),
        ] {
            let text = MINIMAL.replace(mangle.0, mangle.1);
            let err = validate_err(&text);
            assert!(err.contains(needle), "wanted {needle:?} in {err:?}");
        }
    }

    #[test]
    fn nogear_mode_does_not_need_slowgear_workers() {
        let text = MINIMAL
            .replace("mode = \"gear\"", "mode = \"nogear\"")
            .replace("num_slowgear = 1", "num_slowgear = 0");
        assert!(parse(&text).validate().is_ok());
    }

    #[test]
    fn stale_replay_is_rejected_with_an_explanation() {
        let text = MINIMAL.replace("m = 2", "m = 2\n        stale_replay = true");
        let err = validate_err(&text);
        assert!(err.contains("stale_replay"), "{err}");
        assert!(err.contains("not implemented"), "{err}");
    }

    #[test]
    fn unequal_worker_counts_warn_but_pass() {
        let text = MINIMAL.replace("num_fastgear = 1", "num_fastgear = 3");
        let warnings = parse(&text).validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("3 fastgear vs 1 slowgear"), "{}", warnings[0]);
    }

    #[test]
    fn dataset_fields_are_checked_per_kind() {
        let missing = MINIMAL.replace("num_samples = 8\n", "");
        assert!(validate_err(&missing).contains("dataset.num_samples is required"));

        let extra = MINIMAL.replace("data_seed = 1", "data_seed = 1\n        limit = 5");
        assert!(validate_err(&extra).contains("dataset.limit does not apply"));

        let cifar = MINIMAL.replace(
            "kind = \"synthetic\"\n        num_samples = 8\n        sparse_dim = 3\n        dense_dim = 3\n        num_classes = 2\n        data_seed = 1",
            "kind = \"cifar100\"",
        );
        assert!(validate_err(&cifar).contains("dataset.path is required"));

        let mixed = cifar.replace("kind = \"cifar100\"", "kind = \"cifar100\"\n        path = \"x.bin\"\n        noise = 0.5");
        assert!(validate_err(&mixed).contains("dataset.noise does not apply"));
    }

    #[test]
    fn synthetic_datasets_are_deterministic_for_a_seed() {
        let cfg = parse(MINIMAL);
        let a = cfg.build_dataset().unwrap();
        let b = cfg.build_dataset().unwrap();
        assert_eq!(a.samples.len(), 8);
        assert_eq!(a.samples[0].sparse_input, b.samples[0].sparse_input);
        assert_eq!(a.dense_inputs, b.dense_inputs);
    }
}

//! Run configuration: the line-based `key = value` config format with
//! bracketed sections, plus typed views of the network, training, and data
//! settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::gra::GraMode;
use crate::losda::LosdaFlags;
use crate::pointcloud::ClassMap;

/// Architecture switches and sizes.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub class_count: usize,
    /// Per-point input width; the first three entries are coordinates.
    pub input_width: usize,
    pub k: usize,
    pub points_per_block: usize,
    pub decimation: usize,
    pub encoder_widths: Vec<usize>,
    pub initial_lift_width: usize,
    pub gra_mode: GraMode,
    pub losda: LosdaFlags,
    pub use_batch_norm: bool,
    pub interpolation_k: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            class_count: 9,
            input_width: 5,
            k: 32,
            points_per_block: 4096,
            decimation: 4,
            encoder_widths: vec![64, 128, 256],
            initial_lift_width: 32,
            gra_mode: GraMode::Mode1,
            losda: LosdaFlags::all(),
            use_batch_norm: true,
            interpolation_k: 1,
            seed: 1,
        }
    }
}

impl NetworkConfig {
    /// A small configuration for fast end-to-end checks and the overfit
    /// demo: 64-point blocks, K=4, widths [8, 16, 32]. Batch norm is off
    /// because the coarsest encoder level holds a single point.
    pub fn miniature() -> Self {
        NetworkConfig {
            class_count: 3,
            points_per_block: 64,
            k: 4,
            encoder_widths: vec![8, 16, 32],
            initial_lift_width: 8,
            use_batch_norm: false,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.input_width < 4 {
            return Err(Error::Config(
                "input_width must cover 3 coordinates plus at least one attribute".into(),
            ));
        }
        if self.k == 0 || self.points_per_block == 0 {
            return Err(Error::Config(
                "k and points_per_block must be positive".into(),
            ));
        }
        if self.decimation < 2 {
            return Err(Error::Config("decimation must be at least 2".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "encoder_widths must be strictly increasing".into(),
            ));
        }
        if self.interpolation_k != 1 && self.interpolation_k != 3 {
            return Err(Error::Config("interpolation_k must be 1 or 3".into()));
        }
        if !(self.losda.use_sde || self.losda.use_dfe) {
            return Err(Error::Config(
                "at least one of use_sde/use_dfe must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Point counts at every encoder level, starting at the full block.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.points_per_block];
        for _ in 0..self.encoder_widths.len() {
            let prev = *sizes.last().unwrap();
            sizes.push(prev.div_ceil(self.decimation));
        }
        sizes
    }

    pub fn class_map(&self, names: Option<&[String]>) -> Result<ClassMap> {
        match names {
            Some(n) => {
                if n.len() != self.class_count {
                    return Err(Error::Config(format!(
                        "{} class names for class_count {}",
                        n.len(),
                        self.class_count
                    )));
                }
                ClassMap::new(n.to_vec())
            }
            None if self.class_count == 9 => Ok(ClassMap::isprs()),
            None => ClassMap::numbered(self.class_count),
        }
    }
}

/// Optimization protocol.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub decay_step_epochs: usize,
    pub max_epochs: usize,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            decay_factor: 0.7,
            decay_step_epochs: 100,
            max_epochs: 1000,
            class_weights: None,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.decay_step_epochs == 0 {
            return Err(Error::Config("decay_step_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Input/output paths and preprocessing switches.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Fraction of training subblocks held out when no validation file is
    /// given; 0 disables the split (validation then runs on training data).
    pub validation_fraction: f64,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub hag: bool,
    pub hag_cell_size: f64,
    pub block: f64,
    pub sub: f64,
    pub stride: f64,
    pub class_names: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            validation: None,
            validation_fraction: 0.1,
            test: None,
            output_dir: PathBuf::from("runs/default"),
            hag: false,
            hag_cell_size: 25.0,
            block: 100.0,
            sub: 25.0,
            stride: 12.5,
            class_names: None,
        }
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if let Some(w) = &self.training.class_weights {
            if w.len() != self.network.class_count {
                return Err(Error::Config(format!(
                    "{} class weights for class_count {}",
                    w.len(),
                    self.network.class_count
                )));
            }
        }
        if !(self.data.stride > 0.0 && self.data.stride <= self.data.sub) {
            return Err(Error::Config("tiling requires 0 < stride <= sub".into()));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got '{v}'"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{v}'")))
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, key))
        .collect()
}

/// Parses the sectioned `key = value` text format. Lines starting with `#`
/// are comments; keys are `section.key` internally.
pub fn parse_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let full = if section.is_empty() {
            key.trim().to_string()
        } else {
            format!("{section}.{}", key.trim())
        };
        out.insert(full, value.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_sections(text)?;
        let mut cfg = RunConfig::default();
        for (key, value) in &map {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.training;
        let d = &mut self.data;
        match key {
            "network.class_count" => n.class_count = parse_num(v, key)?,
            "network.input_width" => n.input_width = parse_num(v, key)?,
            "network.k" => n.k = parse_num(v, key)?,
            "network.points_per_block" => n.points_per_block = parse_num(v, key)?,
            "network.decimation" => n.decimation = parse_num(v, key)?,
            "network.encoder_widths" => n.encoder_widths = parse_list(v, key)?,
            "network.initial_lift_width" => n.initial_lift_width = parse_num(v, key)?,
            "network.gra_mode" => n.gra_mode = GraMode::parse(v)?,
            "network.use_sde" => n.losda.use_sde = parse_bool(v, key)?,
            "network.use_dfe" => n.losda.use_dfe = parse_bool(v, key)?,
            "network.use_ede" => n.losda.use_ede = parse_bool(v, key)?,
            "network.use_attention_pool" => n.losda.use_attention_pool = parse_bool(v, key)?,
            "network.ede_relative_z" => n.losda.ede_relative_z = parse_bool(v, key)?,
            "network.use_batch_norm" => n.use_batch_norm = parse_bool(v, key)?,
            "network.interpolation_k" => n.interpolation_k = parse_num(v, key)?,
            "network.seed" => n.seed = parse_num(v, key)?,
            "training.learning_rate" => t.learning_rate = parse_num(v, key)?,
            "training.beta1" => t.beta1 = parse_num(v, key)?,
            "training.beta2" => t.beta2 = parse_num(v, key)?,
            "training.eps" => t.eps = parse_num(v, key)?,
            "training.batch_size" => t.batch_size = parse_num(v, key)?,
            "training.decay_factor" => t.decay_factor = parse_num(v, key)?,
            "training.decay_step_epochs" => t.decay_step_epochs = parse_num(v, key)?,
            "training.max_epochs" => t.max_epochs = parse_num(v, key)?,
            "training.class_weights" => t.class_weights = Some(parse_list(v, key)?),
            "training.seed" => t.seed = parse_num(v, key)?,
            "data.train" => d.train = Some(PathBuf::from(v)),
            "data.validation" => d.validation = Some(PathBuf::from(v)),
            "data.validation_fraction" => d.validation_fraction = parse_num(v, key)?,
            "data.test" => d.test = Some(PathBuf::from(v)),
            "data.output_dir" => d.output_dir = PathBuf::from(v),
            "data.hag" => d.hag = parse_bool(v, key)?,
            "data.hag_cell_size" => d.hag_cell_size = parse_num(v, key)?,
            "data.block" => d.block = parse_num(v, key)?,
            "data.sub" => d.sub = parse_num(v, key)?,
            "data.stride" => d.stride = parse_num(v, key)?,
            "data.class_names" => {
                d.class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect())
            }
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }
}

impl NetworkConfig {
    /// Serializes the `[network]` section; embedded in checkpoints so a
    /// saved model can be rebuilt without the original config file.
    pub fn to_section_text(&self) -> String {
        let mut s = String::from("[network]\n");
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        writeln!(s, "class_count = {}", self.class_count).unwrap();
        writeln!(s, "input_width = {}", self.input_width).unwrap();
        writeln!(s, "k = {}", self.k).unwrap();
        writeln!(s, "points_per_block = {}", self.points_per_block).unwrap();
        writeln!(s, "decimation = {}", self.decimation).unwrap();
        writeln!(s, "encoder_widths = {}", widths.join(",")).unwrap();
        writeln!(s, "initial_lift_width = {}", self.initial_lift_width).unwrap();
        writeln!(s, "gra_mode = {}", self.gra_mode.as_str()).unwrap();
        writeln!(s, "use_sde = {}", self.losda.use_sde).unwrap();
        writeln!(s, "use_dfe = {}", self.losda.use_dfe).unwrap();
        writeln!(s, "use_ede = {}", self.losda.use_ede).unwrap();
        writeln!(s, "use_attention_pool = {}", self.losda.use_attention_pool).unwrap();
        writeln!(s, "ede_relative_z = {}", self.losda.ede_relative_z).unwrap();
        writeln!(s, "use_batch_norm = {}", self.use_batch_norm).unwrap();
        writeln!(s, "interpolation_k = {}", self.interpolation_k).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }

    pub fn from_section_text(text: &str) -> Result<Self> {
        let map = parse_sections(text)?;
        let mut run = RunConfig::default();
        for (key, value) in &map {
            if key.starts_with("network.") {
                run.apply(key, value)?;
            }
        }
        run.network.validate()?;
        Ok(run.network)
    }
}

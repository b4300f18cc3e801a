//! Run configuration: a flat key=value file, with CLI flags taking
//! precedence over file values and defaults filling the rest.

use std::path::Path;
use std::str::FromStr;

use qgn_core::model::{PropagationScheme, QgnConfig};
use qgn_core::train::TrainConfig;
use qgn_core::QgnError;

use crate::runs::CliError;

/// Synthetic task selector for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// random axis-aligned rectangles over a background
    Shapes,
    /// left half class 1, right half class 2
    Halves,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub levels: u8,
    pub classes: u16,
    pub width: u32,
    pub height: u32,
    pub task: Task,
    pub shapes: u32,
    pub dataset: usize,
    pub batch: usize,
    pub hflip: bool,
    pub iters: u64,
    pub lr0: f64,
    pub decay_power: f64,
    pub momentum: f64,
    pub reweight_interval: u64,
    pub eval_interval: u64,
    pub weight_mode: String,
    pub gamma: f64,
    pub delta: f64,
    pub scheme: PropagationScheme,
    pub seed: u64,
    pub report: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            classes: 4,
            width: 64,
            height: 64,
            task: Task::Shapes,
            shapes: 6,
            dataset: 24,
            batch: 4,
            hflip: false,
            iters: 2000,
            lr0: 0.02,
            decay_power: 0.9,
            momentum: 0.0,
            reweight_interval: 500,
            eval_interval: 100,
            weight_mode: "fixed".into(),
            gamma: 0.75,
            delta: 0.99,
            scheme: PropagationScheme::All,
            seed: 0,
            report: "text".into(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by the config file if given, overlaid by flags.
    pub fn load(
        file: Option<&Path>,
        seed: Option<u64>,
        scheme: Option<&str>,
        levels: Option<u8>,
        report: Option<&str>,
    ) -> Result<Self, CliError> {
        let mut rc = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::from(QgnError::Io(e)))?;
            rc.apply_file(&text)?;
        }
        if let Some(s) = seed {
            rc.seed = s;
        }
        if let Some(s) = scheme {
            rc.scheme = PropagationScheme::from_str(s).map_err(CliError::from)?;
        }
        if let Some(l) = levels {
            rc.levels = l;
        }
        if let Some(r) = report {
            rc.report = r.to_string();
        }
        rc.validate()?;
        Ok(rc)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(format!("line {}: expected key=value", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            self.apply(key, value)
                .map_err(|m| bad(format!("line {}: {m}", lineno + 1)))?;
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value '{value}' for {key}"))
        }
        match key {
            "levels" => self.levels = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "task" => {
                self.task = match value {
                    "shapes" => Task::Shapes,
                    "halves" => Task::Halves,
                    _ => return Err(format!("unknown task '{value}'")),
                }
            }
            "shapes" => self.shapes = num(key, value)?,
            "dataset" => self.dataset = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "hflip" => self.hflip = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "decay_power" => self.decay_power = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "reweight_interval" => self.reweight_interval = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "weight_mode" => match value {
                "fixed" | "adaptive" => self.weight_mode = value.into(),
                _ => return Err(format!("unknown weight_mode '{value}'")),
            },
            "gamma" => self.gamma = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "scheme" => {
                self.scheme =
                    PropagationScheme::from_str(value).map_err(|e| e.to_string())?
            }
            "seed" => self.seed = num(key, value)?,
            "report" => match value {
                "text" | "csv" => self.report = value.into(),
                _ => return Err(format!("unknown report format '{value}'")),
            },
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let div = 1u32 << self.levels;
        if self.width % div != 0 || self.height % div != 0 {
            return Err(bad(format!(
                "width/height must be divisible by 2^levels = {div}"
            )));
        }
        if self.task == Task::Halves && self.classes != 2 {
            return Err(bad("task=halves requires classes=2".into()));
        }
        if self.batch == 0 || self.dataset == 0 || self.iters == 0 {
            return Err(bad("batch, dataset and iters must be positive".into()));
        }
        Ok(())
    }

    /// The full configuration in the key=value file format; parsing the
    /// result reproduces this config exactly.
    pub fn to_file_string(&self) -> String {
        let task = match self.task {
            Task::Shapes => "shapes",
            Task::Halves => "halves",
        };
        format!(
            "levels={}\nclasses={}\nwidth={}\nheight={}\ntask={task}\nshapes={}\n\
             dataset={}\nbatch={}\nhflip={}\niters={}\nlr0={}\ndecay_power={}\n\
             momentum={}\nreweight_interval={}\neval_interval={}\nweight_mode={}\n\
             gamma={}\ndelta={}\nscheme={}\nseed={}\nreport={}\n",
            self.levels,
            self.classes,
            self.width,
            self.height,
            self.shapes,
            self.dataset,
            self.batch,
            self.hflip,
            self.iters,
            self.lr0,
            self.decay_power,
            self.momentum,
            self.reweight_interval,
            self.eval_interval,
            self.weight_mode,
            self.gamma,
            self.delta,
            self.scheme,
            self.seed,
            self.report,
        )
    }

    /// Model hyper-parameters implied by this run: encoder widths double
    /// per block from 8 (capped at 128), decoder mirrors the encoder.
    pub fn model_config(&self) -> QgnConfig {
        let levels = self.levels as usize;
        let enc: Vec<usize> = (0..=levels).map(|l| (8usize << l).min(128)).collect();
        let mut dec = vec![8usize];
        dec.extend(enc.iter().take(levels).cloned());
        QgnConfig {
            levels: self.levels,
            num_classes: self.classes,
            in_channels: self.classes as usize,
            encoder_channels: enc,
            decoder_channels: dec,
            units_per_block: 2,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            decay_power: self.decay_power,
            iters: self.iters,
            reweight_interval: self.reweight_interval,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

fn bad(message: String) -> CliError {
    CliError::from(QgnError::Config(message))
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::discretization::{heuristic_grid, GridKind, LearnableTimeParams, TimeGrid, DEFAULT_CLIP_FRACTION};
use crate::error::{Error, Result};
use crate::score::GaussianMixture;
use crate::solver::{init_preset, Prediction, Preset, PresetContext, SolverCoefficients, SolverKind};
use crate::teacher::TeacherConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// No training; the preset itself.
    Baseline,
    S4s,
    S4sAlt,
    Joint,
    ScheduleOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Baseline,
        TrainMode::S4s,
        TrainMode::S4sAlt,
        TrainMode::Joint,
        TrainMode::ScheduleOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::S4s => "s4s",
            TrainMode::S4sAlt => "s4s-alt",
            TrainMode::Joint => "joint",
            TrainMode::ScheduleOnly => "schedule-only",
        }
    }

    /// Whether the mode learns time parameters.
    pub fn learns_time(self) -> bool {
        matches!(self, TrainMode::S4sAlt | TrainMode::Joint | TrainMode::ScheduleOnly)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown training mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSpec {
    pub schedule: NoiseSchedule,
    pub model: GaussianMixture,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::vp_linear(),
            model: GaussianMixture::default_toy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub order: usize,
    pub preset: Preset,
    pub prediction: Prediction,
    pub tied: bool,
    /// Evaluation budget the solver is trained for.
    pub nfe: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: SolverKind::Lms,
            order: 3,
            preset: Preset::Ipndm,
            prediction: Prediction::Data,
            tied: false,
            nfe: 6,
        }
    }
}

/// Number of solver steps that spend exactly `nfe` evaluations, if any.
pub fn steps_for_nfe(kind: SolverKind, order: usize, nfe: usize) -> Option<usize> {
    let n = match kind {
        SolverKind::Lms => nfe,
        SolverKind::Ss if order > 0 && nfe.is_multiple_of(order) => nfe / order,
        SolverKind::Ss => return None,
        SolverKind::Pc => nfe.checked_sub(1)?,
    };
    (order >= 1 && n >= order).then_some(n)
}

impl SolverSpec {
    pub fn label(&self) -> String {
        format!(
            "{}-k{}-{}-{}",
            self.kind,
            self.order,
            self.preset,
            match self.prediction {
                Prediction::Noise => "noise",
                Prediction::Data => "data",
            }
        )
    }

    /// Steps for `nfe`, or why the cell is infeasible.
    pub fn steps(&self, nfe: usize) -> std::result::Result<usize, String> {
        steps_for_nfe(self.kind, self.order, nfe).ok_or_else(|| {
            format!("order {} {} solver cannot spend exactly {nfe} evaluations", self.order, self.kind)
        })
    }

    pub fn initialize(
        &self,
        schedule: &NoiseSchedule,
        grid: &TimeGrid,
        seed: u64,
    ) -> Result<SolverCoefficients> {
        let ctx = PresetContext {
            schedule,
            grid,
            prediction: self.prediction,
            tied: self.tied,
            seed,
        };
        init_preset(self.kind, self.order, grid.n(), self.preset, &ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub kind: GridKind,
    /// Exponent of the EDM grid.
    pub rho: f64,
    pub clip_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            kind: GridKind::LogSnr,
            rho: 7.0,
            clip_fraction: DEFAULT_CLIP_FRACTION,
        }
    }
}

impl GridSpec {
    pub fn build(&self, schedule: &NoiseSchedule, n: usize) -> Result<TimeGrid> {
        heuristic_grid(schedule, n, self.kind, self.rho)
    }

    pub fn learnable(&self, grid: &TimeGrid) -> Result<LearnableTimeParams> {
        LearnableTimeParams::from_grid(grid, self.clip_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub train: usize,
    pub validation: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            train: 700,
            validation: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub nfe: Vec<usize>,
    /// Fresh noise draws per evaluation cell.
    pub fresh: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            nfe: vec![4, 6, 8],
            fresh: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub schedules: Vec<NamedSchedule>,
    pub solvers: Vec<SolverSpec>,
    pub nfe: Vec<usize>,
    pub modes: Vec<TrainMode>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            schedules: vec![
                NamedSchedule {
                    name: "vp".into(),
                    schedule: NoiseSchedule::vp_linear(),
                },
                NamedSchedule {
                    name: "edm".into(),
                    schedule: NoiseSchedule::edm(),
                },
            ],
            solvers: vec![SolverSpec::default()],
            nfe: vec![4, 6, 8],
            modes: vec![TrainMode::S4s],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Source of every random draw in the experiment.
    pub seed: u64,
    pub output: PathBuf,
    pub problem: ProblemSpec,
    pub solver: SolverSpec,
    pub grid: GridSpec,
    pub teacher: TeacherConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output: PathBuf::from("out"),
            problem: ProblemSpec::default(),
            solver: SolverSpec::default(),
            grid: GridSpec::default(),
            teacher: TeacherConfig::default(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Per-purpose seeds, all derived from the config seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
    pub preset: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.problem
            .schedule
            .validate()
            .map_err(|e| Error::Config(format!("problem.schedule: {e}")))?;
        self.problem
            .model
            .validate()
            .map_err(|e| Error::Config(format!("problem.model: {e}")))?;
        self.teacher.validate()?;
        self.train.validate()?;
        if self.data.train == 0 {
            return Err(Error::Config("data.train must be at least 1".into()));
        }
        if self.eval.fresh == 0 {
            return Err(Error::Config("eval.fresh must be at least 1".into()));
        }
        if self.solver.order == 0 {
            return Err(Error::Config("solver.order must be at least 1".into()));
        }
        self.solver
            .steps(self.solver.nfe)
            .map_err(|m| Error::Config(format!("solver: {m}")))?;
        if !(self.grid.clip_fraction >= 0.0 && self.grid.clip_fraction < 1.0) {
            return Err(Error::Config("grid.clip_fraction must lie in [0, 1)".into()));
        }
        for s in &self.sweep.schedules {
            s.schedule
                .validate()
                .map_err(|e| Error::Config(format!("sweep schedule `{}`: {e}", s.name)))?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let mix = |tag: u64| self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag);
        Seeds {
            data: mix(1),
            train: mix(2),
            eval: mix(3),
            preset: mix(4),
        }
    }

    /// Trainer config with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    /// Hex SHA-256 of everything that determines a trained checkpoint;
    /// output paths and evaluation settings are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.eval = EvalSpec::default();
        c.sweep = SweepSpec::default();
        let text = c.to_toml().expect("configs always serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output.join("dataset.bin")
    }

    pub fn checkpoint_path(&self, mode: TrainMode) -> PathBuf {
        self.output.join(format!("checkpoint-{mode}.bin"))
    }

    pub fn history_path(&self, mode: TrainMode) -> PathBuf {
        self.output.join(format!("history-{mode}.csv"))
    }
}

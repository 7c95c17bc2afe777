//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use enkf_core::measures::Observable;
use enkf_core::model::{DataRecord, Model, ModelSpec};
use enkf_core::truefilter::GridPolicy;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Exactness,
    McRate,
    EpsScaling,
    Chaos,
    LipschitzSuite,
    DgConvergence,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exactness => "exactness",
            Self::McRate => "mc-rate",
            Self::EpsScaling => "eps-scaling",
            Self::Chaos => "chaos",
            Self::LipschitzSuite => "lipschitz-suite",
            Self::DgConvergence => "dg-convergence",
        }
    }
}

/// Law the ensemble averages of an `mc-rate` experiment are compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Kalman,
    MeanField,
    TrueFilter,
}

/// Which vector field the entries of `eps_list` are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsTarget {
    #[default]
    Dynamics,
    Observation,
    Both,
}

/// Uniform grid `[lo, hi]` with `cells` cells on every state axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    /// Cells on each observation axis; defaults to `cells`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_cells: Option<usize>,
}

impl GridConfig {
    pub fn policy(&self, dim_u: usize) -> Result<GridPolicy> {
        self.policy_with(dim_u, self.cells)
    }

    /// The same box with `cells` state cells; the observation cells scale in proportion.
    pub fn policy_with(&self, dim_u: usize, cells: usize) -> Result<GridPolicy> {
        let mut p = GridPolicy::uniform(dim_u, self.lo, self.hi, cells)?;
        if let Some(y) = self.y_cells {
            p.y_cells = (y * cells).div_ceil(self.cells).max(1);
        }
        Ok(p)
    }
}

/// Pass/fail thresholds. Each kind reads its own subset; see [`ExperimentConfig::validate`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// exactness: largest |mean|/|cov| gap between the mean-field and Kalman recursions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_error: Option<f64>,
    /// exactness: largest gap between the grid filter and the Kalman recursion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_max_abs_error: Option<f64>,
    /// exactness: minimum error reduction per refinement level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement_factor: Option<f64>,
    /// exactness: refinement pairs whose coarse error is below this are at round-off and skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement_floor: Option<f64>,
    /// exactness: largest conditioning/transport discrepancy over random joints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<f64>,
    /// mc-rate, eps-scaling, chaos: accepted log-log slope band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
    /// mc-rate with `eps_list`: the local slope over the smallest sizes must be at most this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decrease_slope_max: Option<f64>,
    /// mc-rate with `eps_list`: the local slope over the largest sizes must be at least this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau_slope_min: Option<f64>,
    /// chaos: largest max/min ratio of `sqrt(N) D_J`; dg-convergence: largest ratio of
    /// successive differences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_max: Option<f64>,
    /// lipschitz-suite: numerical slack on every inequality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<f64>,
    /// lipschitz-suite: allowed |slope - 1| of the perturbation linearity suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Seed of every random stream of the experiment.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Inline model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Model document, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    /// Number of assimilation steps J.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Seed of the synthetic truth and observations, simulated from `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// Data record document, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    /// Ascending state cell counts for refinement studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_target: Option<EpsTarget>,
    /// mc-rate: the ε values whose RMSE curve must decrease and then plateau; all by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_eps: Option<Vec<f64>>,
    /// mc-rate: number of ensemble sizes at each end used for the local slopes and plateaus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    /// Observable ids such as `u0`, `u0*u1`, `sqnorm`, `const:1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observables: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_resamples: Option<usize>,
    /// lipschitz-suite: randomized instances per suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    /// exactness: random joint Gaussians for the conditioning identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// exactness: `[dim_u, dim_y]` of the random joints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_dims: Option<[usize; 2]>,
    pub tolerances: Tolerances,
    /// Output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn invalid(field: &str, message: impl Into<String>) -> LabError {
    LabError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

fn require<'a, T>(value: &'a Option<T>, field: &str, kind: ExperimentKind) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| invalid(field, format!("required for kind `{}`", kind.as_str())))
}

fn nonempty<T>(list: &[T], field: &str) -> Result<()> {
    if list.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    Ok(())
}

fn ascending<T: PartialOrd>(list: &[T], field: &str) -> Result<()> {
    nonempty(list, field)?;
    if list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid(field, "must be strictly increasing"));
    }
    Ok(())
}

fn at_least<T>(list: &[T], n: usize, field: &str) -> Result<()> {
    if list.len() < n {
        return Err(invalid(field, format!("needs at least {n} entries, got {}", list.len())));
    }
    Ok(())
}

fn positive(value: usize, field: &str) -> Result<()> {
    if value == 0 {
        return Err(invalid(field, "must be positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse a JSON document. Syntax and type errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Read, parse, resolve referenced files against the config's directory, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inline the model and data documents named by `model_file` and `data_file`.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        if let Some(rel) = &self.model_file {
            if self.model.is_some() {
                return Err(invalid("model_file", "conflicts with an inline `model`"));
            }
            let path = base.join(rel);
            let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
            let spec = ModelSpec::from_json(&text).map_err(|e| invalid("model_file", format!("{}: {e}", path.display())))?;
            self.model = Some(spec);
            self.model_file = None;
        }
        if let Some(rel) = &self.data_file {
            self.data_file = Some(base.join(rel));
        }
        Ok(())
    }

    /// Kind-specific presence and range checks, plus model validation.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        if self.model_file.is_some() {
            return Err(invalid("model_file", "unresolved; load the config through `ExperimentConfig::load`"));
        }
        if self.data_seed.is_some() && self.data_file.is_some() {
            return Err(invalid("data_file", "conflicts with `data_seed`"));
        }
        if let Some(g) = &self.grid {
            if !(g.lo < g.hi) || !g.lo.is_finite() || !g.hi.is_finite() {
                return Err(invalid("grid", "needs finite lo < hi"));
            }
            positive(g.cells, "grid.cells")?;
            if g.y_cells == Some(0) {
                return Err(invalid("grid.y_cells", "must be positive"));
            }
        }
        for (field, list) in [("n_list", &self.n_list), ("refinement", &self.refinement)] {
            if let Some(l) = list {
                ascending(l, field)?;
                if l.contains(&0) {
                    return Err(invalid(field, "entries must be positive"));
                }
            }
        }
        if let Some(l) = &self.eps_list {
            ascending(l, "eps_list")?;
            if l.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
                return Err(invalid("eps_list", "entries must be positive and finite"));
            }
        }
        if let Some(l) = &self.shape_eps {
            nonempty(l, "shape_eps")?;
            let eps = require(&self.eps_list, "eps_list", kind)?;
            if let Some(e) = l.iter().find(|e| !eps.contains(e)) {
                return Err(invalid("shape_eps", format!("{e} is not in `eps_list`")));
            }
        }
        if let Some(obs) = &self.observables {
            nonempty(obs, "observables")?;
            for o in obs {
                o.parse::<Observable>().map_err(|e| invalid("observables", e.to_string()))?;
            }
        }
        for (field, value) in [
            ("replicates", self.replicates),
            ("instances", self.instances),
            ("trials", self.trials),
            ("bootstrap_resamples", self.bootstrap_resamples),
            ("tail_points", self.tail_points),
        ] {
            if let Some(v) = value {
                positive(v, field)?;
            }
        }
        if let Some(m) = &self.model {
            Model::new(m.clone()).map_err(|e| invalid("model", e.to_string()))?;
            for o in self.observables.iter().flatten() {
                let phi: Observable = o.parse().map_err(|e: enkf_core::Error| invalid("observables", e.to_string()))?;
                if phi.max_index().is_some_and(|i| i >= m.dim_u) {
                    return Err(invalid("observables", format!("`{o}` indexes past dimension {}", m.dim_u)));
                }
            }
        }

        let t = &self.tolerances;
        match kind {
            ExperimentKind::Exactness => {
                if self.model.is_none() && self.trials.is_none() {
                    return Err(invalid("model", "exactness needs a `model`, `trials`, or both"));
                }
                if let Some(m) = &self.model {
                    if !(m.dynamics.is_affine() && m.observation.is_affine()) {
                        return Err(invalid("model", "exactness needs affine dynamics and observation"));
                    }
                    self.require_data()?;
                    require(&t.max_abs_error, "tolerances.max_abs_error", kind)?;
                }
                if self.grid.is_some() {
                    require(&self.model, "model", kind)?;
                    require(&t.grid_max_abs_error, "tolerances.grid_max_abs_error", kind)?;
                }
                if let Some(r) = &self.refinement {
                    require(&self.grid, "grid", kind)?;
                    at_least(r, 2, "refinement")?;
                    require(&t.refinement_factor, "tolerances.refinement_factor", kind)?;
                }
                if self.trials.is_some() {
                    require(&t.equivalence, "tolerances.equivalence", kind)?;
                }
            }
            ExperimentKind::McRate => {
                self.require_model()?;
                self.require_data()?;
                at_least(require(&self.n_list, "n_list", kind)?, 3, "n_list")?;
                require(&self.replicates, "replicates", kind)?;
                require(&self.observables, "observables", kind)?;
                let reference = *require(&self.reference, "reference", kind)?;
                let affine = self.model.as_ref().is_some_and(|m| m.dynamics.is_affine() && m.observation.is_affine());
                if reference == ReferenceKind::Kalman && (!affine || self.eps_list.is_some()) {
                    return Err(invalid("reference", "`kalman` needs an affine model and no `eps_list`"));
                }
                if reference == ReferenceKind::TrueFilter || (reference == ReferenceKind::MeanField && (!affine || self.eps_list.is_some())) {
                    require(&self.grid, "grid", kind)?;
                }
                if self.eps_list.is_some() {
                    self.require_perturbation()?;
                    let tail = self.tail_points.unwrap_or(3);
                    if tail < 2 || 2 * tail > self.n_list.as_ref().map_or(0, |l| l.len()) + 1 {
                        return Err(invalid("tail_points", "needs 2 <= tail_points and two tails that fit in `n_list`"));
                    }
                    require(&t.decrease_slope_max, "tolerances.decrease_slope_max", kind)?;
                    require(&t.plateau_slope_min, "tolerances.plateau_slope_min", kind)?;
                } else {
                    require(&t.slope_min, "tolerances.slope_min", kind)?;
                    require(&t.slope_max, "tolerances.slope_max", kind)?;
                }
            }
            ExperimentKind::EpsScaling => {
                self.require_model()?;
                self.require_data()?;
                require(&self.grid, "grid", kind)?;
                at_least(require(&self.eps_list, "eps_list", kind)?, 3, "eps_list")?;
                self.require_perturbation()?;
                require(&t.slope_min, "tolerances.slope_min", kind)?;
                require(&t.slope_max, "tolerances.slope_max", kind)?;
            }
            ExperimentKind::Chaos => {
                let m = self.require_model()?;
                if !(m.dynamics.is_affine() && m.observation.is_affine()) {
                    require(&self.grid, "grid", kind)?;
                }
                self.require_data()?;
                at_least(require(&self.n_list, "n_list", kind)?, 2, "n_list")?;
                require(&self.replicates, "replicates", kind)?;
                require(&t.ratio_max, "tolerances.ratio_max", kind)?;
                if t.slope_min.is_some() != t.slope_max.is_some() {
                    return Err(invalid("tolerances", "`slope_min` and `slope_max` go together"));
                }
                if t.slope_min.is_some() {
                    at_least(self.n_list.as_deref().unwrap_or(&[]), 3, "n_list")?;
                }
            }
            ExperimentKind::LipschitzSuite => {
                require(&self.instances, "instances", kind)?;
                require(&t.slack, "tolerances.slack", kind)?;
                require(&t.slope_deviation, "tolerances.slope_deviation", kind)?;
            }
            ExperimentKind::DgConvergence => {
                self.require_model()?;
                self.require_data()?;
                require(&self.grid, "grid", kind)?;
                at_least(require(&self.refinement, "refinement", kind)?, 3, "refinement")?;
                require(&t.ratio_max, "tolerances.ratio_max", kind)?;
            }
        }
        Ok(())
    }

    fn require_model(&self) -> Result<&ModelSpec> {
        require(&self.model, "model", self.kind)
    }

    fn require_data(&self) -> Result<()> {
        if self.data_file.is_none() {
            require(&self.data_seed, "data_seed", self.kind)?;
            require(&self.steps, "steps", self.kind)?;
        }
        Ok(())
    }

    fn require_perturbation(&self) -> Result<()> {
        let m = self.require_model()?;
        let target = self.eps_target.unwrap_or_default();
        let ok = match target {
            EpsTarget::Dynamics => m.dynamics.perturbation().is_some(),
            EpsTarget::Observation => m.observation.perturbation().is_some(),
            EpsTarget::Both => m.dynamics.perturbation().is_some() && m.observation.perturbation().is_some(),
        };
        if !ok {
            return Err(invalid("model", "the field scaled by `eps_list` needs a `perturbation`"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        let spec = self.require_model()?;
        Ok(Model::new(spec.clone())?)
    }

    /// The model with the perturbation amplitude of the targeted fields set to `eps`.
    pub fn model_at(&self, eps: f64) -> Result<Model> {
        let spec = self.require_model()?;
        let target = self.eps_target.unwrap_or_default();
        let mut spec = spec.clone();
        if matches!(target, EpsTarget::Dynamics | EpsTarget::Both) {
            spec.dynamics = spec.dynamics.with_epsilon(eps)?;
        }
        if matches!(target, EpsTarget::Observation | EpsTarget::Both) {
            spec.observation = spec.observation.with_epsilon(eps)?;
        }
        Ok(Model::new(spec)?)
    }

    /// Observations simulated from `model` with `data_seed`, or read from `data_file` and
    /// truncated to `steps` when given.
    pub fn data(&self, model: &Model) -> Result<DataRecord> {
        match (&self.data_file, self.data_seed, self.steps) {
            (Some(path), _, steps) => {
                let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
                let record =
                    DataRecord::from_json(&text).map_err(|e| invalid("data_file", format!("{}: {e}", path.display())))?;
                if record.truth()[0].len() != model.dim_u() {
                    return Err(invalid("data_file", "state dimension disagrees with the model"));
                }
                match steps {
                    Some(j) if j > record.steps() => Err(invalid(
                        "steps",
                        format!("{j} exceeds the {} steps in the data file", record.steps()),
                    )),
                    Some(j) => Ok(record.truncated(j)),
                    None => Ok(record),
                }
            }
            (None, Some(seed), Some(j)) => Ok(enkf_core::model::simulate_truth(model, j, seed)),
            _ => Err(invalid("data_seed", "required together with `steps`")),
        }
    }

    pub fn observables(&self) -> Result<Vec<Observable>> {
        let ids = require(&self.observables, "observables", self.kind)?;
        ids.iter()
            .map(|s| s.parse::<Observable>().map_err(|e| invalid("observables", e.to_string())))
            .collect()
    }

    /// Directory name used when neither the CLI nor the config names one.
    pub fn default_output_dir(&self) -> PathBuf {
        PathBuf::from("out").join(self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string()))
    }
}

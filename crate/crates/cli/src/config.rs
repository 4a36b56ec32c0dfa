//! Experiment configuration: one JSON document per run, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vws_core::lab::{Ball, DivCurlConfig, FluxRecipe, WeightRecipe};
use vws_core::operators::{build_operator, OperatorKind};
use vws_core::report::InequalityId;
use vws_core::solvers::SolverConfig;
use vws_core::truncation::TruncationConfig;
use vws_core::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Truncate,
    WeightsAp,
    Verify,
    Divcurl,
    Dirac,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Truncate => "truncate",
            Self::WeightsAp => "weights-ap",
            Self::Verify => "verify",
            Self::Divcurl => "divcurl",
            Self::Dirac => "dirac",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Centered,
    DyadicShifted,
}

/// Seeded corpus of boundary-vanishing scalar fields and the truncation
/// levels applied to each, as multiples of the field's mean `|∇g|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationBlock {
    pub corpus: usize,
    pub levels: Vec<f64>,
    #[serde(default)]
    pub config: TruncationConfig,
    /// Dump the truncations of the first corpus field.
    #[serde(default)]
    pub dump: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraBlock {
    pub deltas: Vec<f64>,
    pub cap: f64,
    #[serde(default = "default_random_directions")]
    pub random_directions: usize,
}

fn default_random_directions() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiracBlock {
    pub point: Point,
    /// One amplitude per component.
    pub amplitude: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must agree with the subcommand when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ladder: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rhs: Vec<FluxRecipe>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<WeightRecipe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inequality: Option<InequalityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub balls: Vec<Ball>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algebra: Option<AlgebraBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divcurl: Option<DivCurlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirac: Option<DiracBlock>,
    /// Run directories aggregated by `report`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<PathBuf>,
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<String>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration problem(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

pub fn load(path: &Path) -> Result<ExperimentConfig, ValidationErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ValidationErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ExperimentConfig, ValidationErrors> {
    serde_json::from_str(text).map_err(|e| ValidationErrors(vec![format!("config: {e}")]))
}

impl ExperimentConfig {
    /// Checks everything `command` will need, collecting all problems.
    pub fn validate(&self, command: Command) -> Result<(), ValidationErrors> {
        let mut errs = Vec::new();
        if let Some(c) = self.command {
            if c != command {
                errs.push(format!("config is for `{c}` but `{command}` was invoked"));
            }
        }
        if self.seed.is_none() {
            errs.push("seed is missing (set it in the config or pass --seed)".into());
        }
        if self.out.is_none() {
            errs.push("output directory is missing (set `out` or pass --out)".into());
        }
        let needs_ladder = !matches!(command, Command::Divcurl | Command::Report)
            && !(command == Command::Verify && self.inequality == Some(InequalityId::Algebra));
        if needs_ladder {
            if self.ladder.is_empty() {
                errs.push("ladder is empty".into());
            }
            for &m in &self.ladder {
                if m < 2 {
                    errs.push(format!("ladder entry {m} is below 2"));
                }
            }
        }
        self.check_solver(&mut errs);
        match command {
            Command::Solve => {
                self.need_operator(&mut errs, false);
                self.need_rhs(&mut errs);
            }
            Command::Dirac => {
                self.need_operator(&mut errs, false);
                self.need_q(&mut errs, "q", self.q, false);
                match &self.dirac {
                    None => errs.push("dirac block is missing".into()),
                    Some(d) => {
                        if d.amplitude.is_empty() {
                            errs.push("dirac amplitude is empty".into());
                        }
                        if !d.point.iter().all(|c| *c > 0.0 && *c < 1.0) {
                            errs.push(format!("dirac point {:?} is not interior to the unit square", d.point));
                        }
                    }
                }
            }
            Command::Truncate => {
                self.need_truncation(&mut errs);
                self.need_p(&mut errs, false);
            }
            Command::WeightsAp => {
                self.need_weights(&mut errs);
                self.need_p(&mut errs, true);
            }
            Command::Divcurl => {
                if self.divcurl.is_none() {
                    errs.push("divcurl block is missing".into());
                }
            }
            Command::Report => {
                if self.runs.is_empty() {
                    errs.push("runs is empty".into());
                }
            }
            Command::Verify => match self.inequality {
                None => errs.push("inequality is missing".into()),
                Some(InequalityId::Keyest) => {
                    self.need_operator(&mut errs, true);
                    self.need_rhs(&mut errs);
                    self.need_weights(&mut errs);
                    self.need_p(&mut errs, false);
                }
                Some(InequalityId::Unlocal) => {
                    self.need_operator(&mut errs, true);
                    self.need_rhs(&mut errs);
                    self.need_weights(&mut errs);
                    self.need_p(&mut errs, false);
                    self.need_q(&mut errs, "q_tilde", self.q_tilde, true);
                    if self.balls.is_empty() {
                        errs.push("balls is empty".into());
                    }
                    for b in &self.balls {
                        if !(b.radius > 0.0) {
                            errs.push(format!("ball radius {} is not positive", b.radius));
                        }
                    }
                }
                Some(InequalityId::Apriori | InequalityId::Apriori2) => {
                    self.need_operator(&mut errs, false);
                    self.need_rhs(&mut errs);
                    self.need_q(&mut errs, "q", self.q, true);
                }
                Some(InequalityId::Apriori3) => {
                    self.need_operator(&mut errs, false);
                    self.need_rhs(&mut errs);
                    self.need_weights(&mut errs);
                    self.need_p(&mut errs, false);
                }
                Some(InequalityId::ItmWeight) => {
                    self.need_truncation(&mut errs);
                    self.need_p(&mut errs, false);
                }
                Some(InequalityId::Algebra) => {
                    self.need_operator(&mut errs, false);
                    match &self.algebra {
                        None => errs.push("algebra block is missing".into()),
                        Some(a) => {
                            if a.deltas.is_empty() || a.deltas.iter().any(|d| !(*d > 0.0)) {
                                errs.push("algebra deltas must be a nonempty list of positive numbers".into());
                            }
                            if !(a.cap > 0.0) {
                                errs.push(format!("algebra cap {} is not positive", a.cap));
                            }
                        }
                    }
                }
            },
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errs))
        }
    }

    fn check_solver(&self, errs: &mut Vec<String>) {
        let s = &self.solver;
        if !(s.tol > 0.0) || !(s.inner_tol > 0.0) {
            errs.push("solver tolerances must be positive".into());
        }
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            errs.push(format!("solver theta {} is outside (0, 1]", s.theta));
        }
        if s.max_iters == 0 || s.krylov_max_iters == 0 {
            errs.push("solver iteration caps must be positive".into());
        }
    }

    fn need_operator(&self, errs: &mut Vec<String>, linear: bool) {
        match &self.operator {
            None => errs.push("operator is missing".into()),
            Some(kind) => {
                if let Err(e) = build_operator(kind, 1) {
                    errs.push(format!("operator {}: {e}", kind.label()));
                }
                if linear && !kind.is_linear() {
                    errs.push(format!("operator {} is not linear", kind.label()));
                }
            }
        }
    }

    fn need_rhs(&self, errs: &mut Vec<String>) {
        if self.rhs.is_empty() {
            errs.push("rhs is empty".into());
        }
        for r in &self.rhs {
            match r {
                FluxRecipe::Spike { height, radius } if !height.is_finite() || !(*radius >= 0.0) => {
                    errs.push(format!("rhs {}: height must be finite and radius nonnegative", r.descriptor()))
                }
                FluxRecipe::RoughRandom { cells, .. } if *cells == 0 => {
                    errs.push(format!("rhs {}: cells must be positive", r.descriptor()))
                }
                _ => {}
            }
        }
    }

    fn need_weights(&self, errs: &mut Vec<String>) {
        if self.weights.is_empty() {
            errs.push("weights is empty".into());
        }
    }

    fn need_p(&self, errs: &mut Vec<String>, allow_one: bool) {
        match self.p {
            None => errs.push("p is missing".into()),
            Some(p) if allow_one && !(p >= 1.0) => errs.push(format!("p = {p} must be at least 1")),
            Some(p) if !allow_one && !(p > 1.0) => errs.push(format!("p = {p} must exceed 1")),
            _ => {}
        }
    }

    fn need_q(&self, errs: &mut Vec<String>, name: &str, value: Option<f64>, allow_two: bool) {
        match value {
            None => errs.push(format!("{name} is missing")),
            Some(q) if !(q > 1.0 && (q < 2.0 || allow_two && q == 2.0)) => {
                let hi = if allow_two { "2]" } else { "2)" };
                errs.push(format!("{name} = {q} must lie in (1, {hi}"))
            }
            _ => {}
        }
    }

    fn need_truncation(&self, errs: &mut Vec<String>) {
        match &self.truncation {
            None => errs.push("truncation block is missing".into()),
            Some(t) => {
                if t.corpus == 0 {
                    errs.push("truncation corpus is empty".into());
                }
                if t.levels.is_empty() || t.levels.iter().any(|l| !(*l > 0.0)) {
                    errs.push("truncation levels must be a nonempty list of positive numbers".into());
                }
            }
        }
    }
}

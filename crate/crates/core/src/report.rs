//! Estimate reports shared by the truncation, solver and lab modules.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// The inequality an [`EstimateReport`] measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InequalityId {
    Keyest,
    Unlocal,
    Apriori,
    Apriori2,
    Apriori3,
    ItmWeight,
    Algebra,
}

impl InequalityId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Keyest => "keyest",
            Self::Unlocal => "unlocal",
            Self::Apriori => "apriori",
            Self::Apriori2 => "apriori2",
            Self::Apriori3 => "apriori3",
            Self::ItmWeight => "itm_weight",
            Self::Algebra => "algebra",
        }
    }
}

impl fmt::Display for InequalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Both sides of one inequality. `ratio` is `None` for `0/0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub id: InequalityId,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    /// Grid size, exponents, weight descriptor, measured A_p and so on.
    pub context: BTreeMap<String, String>,
}

impl EstimateReport {
    pub fn new(id: InequalityId, lhs: f64, rhs: f64) -> Self {
        Self {
            id,
            lhs,
            rhs,
            ratio: ratio(lhs, rhs),
            context: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.context.insert(key.to_string(), value.to_string());
        self
    }
}

/// Least-squares slope of `log y` against `log x` over the pairs with both
/// coordinates positive; `None` with fewer than two such pairs.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// `lhs / rhs`, with `None` standing for `0/0` and `+∞` for `x/0`, `x > 0`.
pub fn ratio(lhs: f64, rhs: f64) -> Option<f64> {
    if rhs == 0.0 {
        if lhs == 0.0 {
            None
        } else {
            Some(f64::INFINITY)
        }
    } else {
        Some(lhs / rhs)
    }
}

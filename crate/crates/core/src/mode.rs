use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Regression against ground-truth depth.
    Supervised,
    /// View synthesis from monocular video.
    SelfPred,
    /// View synthesis plus sparse depth input and sparse supervision.
    SelfComp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::SelfPred => "self_pred",
            Mode::SelfComp => "self_comp",
        }
    }

    pub fn is_self_supervised(self) -> bool {
        !matches!(self, Mode::Supervised)
    }

    pub fn uses_sparse_input(self) -> bool {
        matches!(self, Mode::SelfComp)
    }

    /// Monocular self-supervision is only defined up to scale; sparse
    /// supervision and ground-truth regression produce metric depth.
    pub fn needs_median_scaling(self) -> bool {
        matches!(self, Mode::SelfPred)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "self_pred" => Ok(Mode::SelfPred),
            "self_comp" => Ok(Mode::SelfComp),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected supervised, self_pred or self_comp)"
            ))),
        }
    }
}

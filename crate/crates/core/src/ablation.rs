//! K–M sweep plans and stage-corruption masks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::noise::{inject_noise, NoiseSpec};
use crate::strategy::{Stage, StageArtifacts};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub k_values: Vec<u32>,
    pub m_values: Vec<u32>,
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
}

impl SweepPlan {
    /// K in 5..=8 and M in 1..=3 at temperature 0.8, top-p 0.95, one sample.
    pub fn published() -> Self {
        Self {
            k_values: (5..=8).collect(),
            m_values: (1..=3).collect(),
            temperature: 0.8,
            top_p: 0.95,
            n: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.m_values.is_empty() {
            return Err(Error::Parameter("sweep needs at least one K and one M".into()));
        }
        if self.n == 0 {
            return Err(Error::Parameter("sweep needs n >= 1".into()));
        }
        for (k, m) in self.cells_unchecked() {
            if m == 0 || m > k {
                return Err(Error::Parameter(format!("sweep cell K={k}, M={m} violates 1 <= M <= K")));
            }
        }
        Ok(())
    }

    fn cells_unchecked(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.k_values
            .iter()
            .flat_map(move |&k| self.m_values.iter().map(move |&m| (k, m)))
    }

    /// Grid cells ordered by K, then M.
    pub fn cells(&self) -> Result<Vec<(u32, u32)>> {
        self.validate()?;
        Ok(self.cells_unchecked().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: u32,
    pub m: u32,
    /// pass@1 as a percentage.
    pub pass_at_1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    /// Highest-scoring cell; the first in grid order wins ties.
    pub fn best(&self) -> Option<SweepCell> {
        self.cells.iter().copied().fold(None, |best: Option<SweepCell>, c| match best {
            Some(b) if b.pass_at_1 >= c.pass_at_1 => Some(b),
            _ => Some(c),
        })
    }

    /// One `(K, pass@1)` series per M, each sorted by K.
    pub fn series_by_m(&self) -> Vec<(u32, Vec<(u32, f64)>)> {
        let mut ms: Vec<u32> = self.cells.iter().map(|c| c.m).collect();
        ms.sort_unstable();
        ms.dedup();
        ms.into_iter()
            .map(|m| {
                let mut points: Vec<(u32, f64)> = self
                    .cells
                    .iter()
                    .filter(|c| c.m == m)
                    .map(|c| (c.k, c.pass_at_1))
                    .collect();
                points.sort_by_key(|p| p.0);
                (m, points)
            })
            .collect()
    }
}

/// Which stage artifacts get corrupted before the second pipeline step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageMask {
    pub recall: bool,
    pub evaluation: bool,
    pub planning: bool,
}

impl StageMask {
    pub const CLEAN: StageMask = StageMask { recall: false, evaluation: false, planning: false };
    pub const ALL: StageMask = StageMask { recall: true, evaluation: true, planning: true };

    /// The seven ablation rows. A row keeps its checked stages clean and
    /// corrupts the rest; the last row is the clean reference.
    pub fn table_rows() -> [StageMask; 7] {
        let kept = [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ];
        kept.map(|(r, e, p)| StageMask { recall: !r, evaluation: !e, planning: !p })
    }

    pub fn is_clean(&self) -> bool {
        *self == Self::CLEAN
    }

    /// Whether `stage` stays clean (a check mark in the ablation table).
    pub fn keeps(&self, stage: Stage) -> bool {
        match stage {
            Stage::Recall => !self.recall,
            Stage::Evaluation => !self.evaluation,
            Stage::Planning => !self.planning,
            Stage::Guidance => true,
        }
    }

    /// Last stage produced by the first step: the latest corrupted stage, or
    /// recall for the clean pipeline.
    pub fn split_point(&self) -> Stage {
        if self.planning {
            Stage::Planning
        } else if self.evaluation {
            Stage::Evaluation
        } else {
            Stage::Recall
        }
    }

    pub fn label(&self) -> String {
        if self.is_clean() {
            return "clean".into();
        }
        let mut parts = Vec::new();
        if self.recall {
            parts.push("recall");
        }
        if self.evaluation {
            parts.push("evaluation");
        }
        if self.planning {
            parts.push("planning");
        }
        parts.join("+")
    }

    /// Corrupts the masked artifacts in place: recalled problem statements,
    /// the evaluation text and the plan. Each artifact draws from its own
    /// stream derived from `noise.seed`.
    pub fn corrupt(&self, artifacts: &mut StageArtifacts, noise: &NoiseSpec) -> Result<()> {
        noise.validate()?;
        if self.recall {
            for (i, example) in artifacts.recalled.iter_mut().enumerate() {
                let spec = noise.with_seed(noise.seed.wrapping_add(i as u64));
                example.problem = inject_noise(&example.problem, &spec)?;
            }
        }
        if self.evaluation {
            if let Some(text) = artifacts.evaluation.as_mut() {
                *text = inject_noise(text, &noise.with_seed(noise.seed.wrapping_add(1_000)))?;
            }
        }
        if self.planning {
            if let Some(text) = artifacts.plan.as_mut() {
                *text = inject_noise(text, &noise.with_seed(noise.seed.wrapping_add(2_000)))?;
            }
        }
        Ok(())
    }
}

impl FromStr for StageMask {
    type Err = Error;

    /// `clean`, or `+`/`,`-separated stage names (`recall+planning`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut mask = StageMask::CLEAN;
        if s.eq_ignore_ascii_case("clean") || s.is_empty() {
            return Ok(mask);
        }
        for part in s.split(['+', ',']).map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "recall" | "recalling" => mask.recall = true,
                "evaluation" => mask.evaluation = true,
                "planning" | "plan" => mask.planning = true,
                "all" => mask = StageMask::ALL,
                other => return Err(Error::Config(format!("unknown stage {other:?}"))),
            }
        }
        Ok(mask)
    }
}

impl core::fmt::Display for StageMask {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.label())
    }
}

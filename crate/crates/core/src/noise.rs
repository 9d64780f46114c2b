//! Seeded character noise for stage-corruption ablations.

use alloc::string::String;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const PRINTABLE_FIRST: u8 = 0x20;
const PRINTABLE_COUNT: u8 = 95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Every `period`-th character is a corruption candidate.
    pub period: usize,
    /// Probability that a candidate character is replaced.
    pub level: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { period: 10, level: 0.5, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Parameter("noise period must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::Parameter("noise level must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Replaces characters at indices `i` with `(i + 1) % period == 0`, each with
/// probability `level`, by a printable ASCII character different from the
/// original. Draws happen left to right from a ChaCha8 stream seeded with
/// `spec.seed`: one `f64` per candidate, plus one index draw per replacement.
/// Character count is preserved.
pub fn inject_noise(text: &str, spec: &NoiseSpec) -> Result<String> {
    spec.validate()?;
    if spec.level == 0.0 {
        return Ok(text.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = String::with_capacity(text.len());
    for (i, ch) in text.chars().enumerate() {
        if (i + 1) % spec.period != 0 {
            out.push(ch);
            continue;
        }
        let draw: f64 = rng.random();
        if draw < spec.level {
            out.push(replacement(&mut rng, ch));
        } else {
            out.push(ch);
        }
    }
    Ok(out)
}

fn replacement(rng: &mut ChaCha8Rng, original: char) -> char {
    let original_printable = original.is_ascii() && (0x20..0x7f).contains(&(original as u8));
    if original_printable {
        // Uniform over the 94 printable characters other than `original`.
        let mut idx = rng.random_range(0..PRINTABLE_COUNT - 1);
        if idx >= original as u8 - PRINTABLE_FIRST {
            idx += 1;
        }
        (PRINTABLE_FIRST + idx) as char
    } else {
        (PRINTABLE_FIRST + rng.random_range(0..PRINTABLE_COUNT)) as char
    }
}

use rand::seq::index;
use rand::Rng;

use crate::conditioning::{compose_actions, negate};
use crate::error::{Error, Result};
use crate::world::NavAction;

/// One training goal: frame at `source + shift` and the composed action
/// that reaches it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub shift: isize,
    pub target: usize,
    pub action: NavAction,
}

/// Range of frame shifts used as goals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftRange {
    pub max_steps: usize,
    pub allow_backward: bool,
}

impl ShiftRange {
    /// Shifts that stay inside an episode of `len` frames from `source`.
    pub fn candidates(&self, source: usize, len: usize) -> Vec<isize> {
        let mut out = Vec::new();
        if self.allow_backward {
            for k in (1..=self.max_steps).rev() {
                if k <= source {
                    out.push(-(k as isize));
                }
            }
        }
        for k in 1..=self.max_steps {
            if source + k < len {
                out.push(k as isize);
            }
        }
        out
    }
}

/// Action for moving from frame `source` by `shift` frames. Forward shifts
/// sum the per-step actions; backward shifts negate the summed actions of
/// the skipped steps.
pub fn goal_action(actions: &[NavAction], source: usize, shift: isize) -> Result<NavAction> {
    if shift > 0 {
        let end = source + shift as usize;
        if end > actions.len() {
            return Err(Error::invalid("shift runs past the episode"));
        }
        compose_actions(&actions[source..end])
    } else if shift < 0 {
        let start = source.checked_sub(shift.unsigned_abs()).ok_or_else(|| Error::invalid("shift runs before the episode"))?;
        Ok(negate(&compose_actions(&actions[start..source])?))
    } else {
        Err(Error::invalid("zero shift"))
    }
}

/// Draws `g` distinct shifts uniformly from the allowed range and pairs
/// each with its composed action. `actions[i]` moves frame `i` to `i + 1`.
pub fn sample_goals<R: Rng + ?Sized>(actions: &[NavAction], source: usize, g: usize, range: &ShiftRange, rng: &mut R) -> Result<Vec<Goal>> {
    let len = actions.len() + 1;
    if source >= len {
        return Err(Error::invalid(format!("source frame {source} outside episode of {len} frames")));
    }
    let cands = range.candidates(source, len);
    if cands.len() < g || g == 0 {
        return Err(Error::invalid(format!("{} valid shifts from frame {source}, need {g}", cands.len())));
    }
    index::sample(rng, cands.len(), g)
        .into_iter()
        .map(|i| {
            let shift = cands[i];
            Ok(Goal { shift, target: (source as isize + shift) as usize, action: goal_action(actions, source, shift)? })
        })
        .collect()
}

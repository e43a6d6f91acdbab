//! Central finite-difference checks of tape gradients.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::rng::Rng;
use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Step used for central differences.
pub const STEP: f64 = 1e-4;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively: `rel = |a - n| / max(|a|, |n|, FLOOR)`.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.max_rel_error() < tol
    }
}

/// Picks `count` (parameter, flat index) pairs: one per listed parameter
/// first (in random order), then uniformly over all their scalars.
pub fn sample_entries(
    store: &ParamStore,
    ids: &[ParamId],
    count: usize,
    rng: &mut Rng,
) -> Vec<(ParamId, usize)> {
    let mut picks = Vec::with_capacity(count);
    let mut order = ids.to_vec();
    order.shuffle(rng);
    for &id in order.iter().take(count) {
        picks.push((id, rng.gen_range(0..store.get(id).numel())));
    }
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    while picks.len() < count && total > 0 {
        let mut k = rng.gen_range(0..total);
        for &id in ids {
            let n = store.get(id).numel();
            if k < n {
                picks.push((id, k));
                break;
            }
            k -= n;
        }
    }
    picks
}

/// Compares the tape gradient of `loss_fn` against central differences at
/// each of `entries`.
pub fn check<F>(store: &ParamStore, entries: &[(ParamId, usize)], loss_fn: F) -> Result<Report>
where
    F: Fn(&Tape) -> Result<Var>,
{
    let tape = Tape::with_params(store);
    let loss = loss_fn(&tape)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let t = Tape::with_params(work);
        let l = loss_fn(&t)?;
        let v = t.value(l).data()[0];
        Ok(v)
    };
    let mut probes = Vec::with_capacity(entries.len());
    for &(id, index) in entries {
        let analytic = grads.param(id).map_or(0.0, |g| g[index]);
        let orig = work.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = orig + STEP;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[index] = orig - STEP;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        probes.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(Report { probes })
}

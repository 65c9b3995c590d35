use alloc::vec::Vec;

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const STEP: f64 = 1e-5;
// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    Ok((tape.scalar(out), tape.kink_signature()))
}

fn check_coords<F>(
    f: &F,
    params: &ParamStore,
    coords: &[(usize, usize)],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let names: Vec<&str> = params.names().collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let mut probe = params.clone();
    for &(p, k) in coords {
        let name = names[p];
        let orig = params.get(name).expect("listed").data()[k];
        probe.get_mut(name).expect("listed").data_mut()[k] = orig + STEP;
        let (plus, sig_plus) = evaluate(f, &probe)?;
        probe.get_mut(name).expect("listed").data_mut()[k] = orig - STEP;
        let (minus, sig_minus) = evaluate(f, &probe)?;
        probe.get_mut(name).expect("listed").data_mut()[k] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[k]);
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every parameter coordinate of `f` at `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.len()).map(move |k| (p, k)))
        .collect();
    check_coords(&f, params, &coords, tolerance)
}

/// Checks `samples` uniformly drawn coordinates; suited to wide networks.
pub fn grad_check_sampled<F, R>(
    f: F,
    params: &ParamStore,
    samples: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.len()).map(move |k| (p, k)))
        .collect();
    if all.is_empty() {
        return check_coords(&f, params, &[], tolerance);
    }
    let coords: Vec<(usize, usize)> = (0..samples)
        .map(|_| all[rng.random_range(0..all.len())])
        .collect();
    check_coords(&f, params, &coords, tolerance)
}

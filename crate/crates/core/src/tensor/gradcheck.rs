//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever calls the forward closure on perturbed
//! parameter copies; it never reads anything produced by `backward`.

use super::matrix::Matrix;
use super::nn::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
    /// Norms below `norm_floor * max(1, |f|)` are raised to it when forming
    /// the ratio, since central-difference rounding noise grows with `|f|`.
    pub norm_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            norm_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over the probed
    /// coordinates; see [`GradCheckOptions::norm_floor`].
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    Ok(tape.value(out).get(0, 0))
}

fn probe_coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < len && cap > 0 => {
            let stride = len as f64 / cap as f64;
            (0..cap).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic = bound.gradients(store, &grads);
    let floor = opts.norm_floor * tape.value(out).get(0, 0).abs().max(1.0);

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let coords = probe_coords(store.get(id).len(), opts.max_coords_per_param);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let numeric = central_difference(&mut work, id, c, opts.step, &f)?;
            let a = analytic[id.index()].as_slice()[c];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        report.params.push(ParamCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: diff2.sqrt() / an.max(nn).max(floor),
        });
    }
    Ok(report)
}

fn central_difference<F>(work: &mut ParamStore, id: ParamId, coord: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let orig = work.get(id).as_slice()[coord];
    work.get_mut(id).as_mut_slice()[coord] = orig + h;
    let plus = evaluate(work, f)?;
    work.get_mut(id).as_mut_slice()[coord] = orig - h;
    let minus = evaluate(work, f)?;
    work.get_mut(id).as_mut_slice()[coord] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Scalar probe `sum(out * weights)` used to reduce matrix-valued ops.
pub fn probe(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    tape.dot(out, weights.clone())
}

//! Central finite-difference checks of the analytic loss gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::LabeledImage;
use crate::error::{contract, Result};
use crate::trainer::{build_objective, ImageCache, Objective, StepConfig, TrainState};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Ce,
    Nsc,
    Spm,
    Sfp,
    Total,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Ce, Term::Nsc, Term::Spm, Term::Sfp, Term::Total];

    pub fn name(self) -> &'static str {
        match self {
            Term::Ce => "ce",
            Term::Nsc => "nsc",
            Term::Spm => "spm",
            Term::Sfp => "sfp",
            Term::Total => "total",
        }
    }
}

fn term_var(obj: &mut Objective, term: Term) -> Result<Var> {
    let sum = |obj: &mut Objective, vars: Vec<Var>| -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| contract(format!("term `{}` is inactive", term.name())))?;
        let mut acc = first;
        for &v in rest {
            acc = obj.tape.add(acc, v)?;
        }
        Ok(acc)
    };
    match term {
        Term::Ce => Ok(obj.ce),
        Term::Nsc => obj.nsc.ok_or_else(|| contract("term `nsc` is inactive")),
        Term::Spm => sum(obj, obj.spm.clone()),
        Term::Sfp => sum(obj, obj.sfp.clone()),
        Term::Total => Ok(obj.total),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients of `term` on one batch against central
/// differences with step `h` at `count` randomly drawn parameters.
#[allow(clippy::too_many_arguments)]
pub fn check_term(
    state: &TrainState,
    data: &[LabeledImage],
    cache: &[ImageCache],
    batch: &[usize],
    cfg: &StepConfig,
    term: Term,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let mut obj = build_objective(state, data, cache, batch, cfg)?;
    let root = term_var(&mut obj, term)?;
    let grads = obj.tape.backward(root);
    let sizes: Vec<usize> = state.net.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let names = state.net.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for flat in sample(&mut rng, total, count.min(total)).into_iter() {
        let (mut p, mut i) = (0, flat);
        while i >= sizes[p] {
            i -= sizes[p];
            p += 1;
        }
        let analytic = grads.get(obj.params[p]).data()[i];
        let eval = |delta: f64| -> Result<f64> {
            let mut s = state.clone();
            s.net.params_mut()[p].data_mut()[i] += delta;
            let mut o = build_objective(&s, data, cache, batch, cfg)?;
            let v = term_var(&mut o, term)?;
            Ok(o.tape.scalar_value(v))
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        out.push(GradCheck {
            param: names[p].clone(),
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(out)
}

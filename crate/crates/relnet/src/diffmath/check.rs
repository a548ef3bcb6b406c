//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward implementation it is checking. Run in 64-bit mode.

use rand::seq::SliceRandom;
use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences with step `h`, over at most `max_checks` randomly chosen
/// parameter coordinates.
///
/// `loss_fn` must bind the store on the tape it is given and return the
/// scalar loss plus the binding; it must be a pure function of the store
/// contents so that perturbed re-evaluations are meaningful.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    h: f64,
    max_checks: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> (Var, Bound),
{
    let mut tape = Tape::new();
    let (loss, bound) = loss_fn(store, &mut tape);
    tape.backward(loss);
    let analytic = tape.param_grads(&bound);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in store.values().iter().enumerate() {
        for ei in 0..p.len() {
            coords.push((pi, ei));
        }
    }
    coords.shuffle(rng);
    coords.truncate(max_checks);

    let mut eval = |store: &ParamStore<f64>| -> f64 {
        let mut t = Tape::new();
        let (l, _) = loss_fn(store, &mut t);
        t.value(l).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: coords.len(),
        worst_param: String::new(),
    };
    for (pi, ei) in coords {
        let orig = store.values()[pi].data()[ei];
        store.values_mut()[pi].data_mut()[ei] = orig + h;
        let up = eval(store);
        store.values_mut()[pi].data_mut()[ei] = orig - h;
        let down = eval(store);
        store.values_mut()[pi].data_mut()[ei] = orig;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi].data()[ei];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = format!(
                "{}[{}] analytic={a:.6e} numeric={numeric:.6e}",
                store.name(super::params::ParamId(pi)),
                ei
            );
        }
    }
    report
}

//! Central-difference gradient verification against the tape's reverse mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

/// Compare analytic gradients against `(f(x+h) - f(x-h)) / 2h` at `sample`
/// random parameter coordinates. Returns the max relative error
/// `|a - n| / max(1e-8, |a| + |n|)`. `forward` must be deterministic.
pub fn grad_check<F>(
    forward: F,
    store: &mut ParamStore,
    h: f64,
    sample: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    if sample == 0 {
        return Ok(0.0);
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.backward(loss, store);

    // flatten coordinate space: (param name, flat index)
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.value(n).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..sample {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let cols = store.value(name).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let analytic = store.grad(name)[[r, c]];

        let orig = store.value(name)[[r, c]];
        store.value_mut(name)[[r, c]] = orig + h;
        let mut t = Tape::new();
        let id = forward(store, &mut t)?;
        let fp = t.scalar(id);
        store.value_mut(name)[[r, c]] = orig - h;
        let mut t = Tape::new();
        let id = forward(store, &mut t)?;
        let fm = t.scalar(id);
        store.value_mut(name)[[r, c]] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

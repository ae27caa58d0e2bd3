//! Central-difference validation of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to round-off do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index (into the checked tensor, or the sampled parameter list) of the worst entry.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check (scalar output)",
            lhs: t.shape().to_vec(),
            rhs: vec![1],
        });
    }
    Ok(t.data()[0])
}

fn finite(index: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { index, value })
    }
}

struct Worst(GradCheckReport);

impl Worst {
    fn new() -> Self {
        Worst(GradCheckReport {
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        })
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.0.checked += 1;
        if e > self.0.max_rel_err || self.0.checked == 1 {
            self.0.max_rel_err = e;
            self.0.worst = index;
            self.0.analytic = analytic;
            self.0.numeric = numeric;
        }
    }
}

/// Compares the gradient of scalar `f` at `x` against `(f(x+εe)−f(x−εe))/2ε`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    finite(0, scalar_of(&g, out)?)?;
    let grads = g.backward(out);
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = Worst::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        finite(i, analytic[i])?;
        let orig = probe.data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            let mut g = Graph::new();
            let xv = g.input(probe.clone());
            let out = f(&mut g, xv)?;
            finite(i, scalar_of(&g, out)?)
        };
        let plus = eval(orig + eps)?;
        let minus = eval(orig - eps)?;
        probe.data_mut()[i] = orig;
        worst.record(i, analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(worst.0)
}

/// Gradient check over model parameters. Checks every parameter scalar, or a
/// seeded sample of `max_samples` of them.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    finite(0, scalar_of(&g, out)?)?;
    let grads = g.backward(out);
    let pg = g.param_grads(&grads);

    // (param, element) pairs over every parameter the loss reached.
    let mut slots: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for e in 0..store.get(id).len() {
            slots.push((id, e));
        }
    }
    let chosen: Vec<usize> = match max_samples {
        Some(n) if n < slots.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, slots.len(), n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..slots.len()).collect(),
    };

    let mut work = store.clone();
    let mut worst = Worst::new();
    for (k, &si) in chosen.iter().enumerate() {
        let (id, e) = slots[si];
        let a = pg
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or(0.0, |(_, gr)| gr[e]);
        finite(k, a)?;
        let orig = work.get(id).data()[e];
        let mut eval = |v: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[e] = v;
            let mut g = Graph::inference(&work);
            let out = f(&mut g)?;
            finite(k, scalar_of(&g, out)?)
        };
        let plus = eval(orig + eps)?;
        let minus = eval(orig - eps)?;
        work.get_mut(id).data_mut()[e] = orig;
        worst.record(k, a, (plus - minus) / (2.0 * eps));
    }
    Ok(worst.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.37 - 1.0);
        let r = grad_check(
            |g, x| {
                let sq = g.unary(x, super::super::Unary::Square);
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn non_finite_is_reported_with_index() {
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum_all(l))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}

//! Central finite-difference verification of tape gradients.
//!
//! Rectifiers, max pooling and loss clamps make the loss piecewise smooth. A
//! central difference straddling a kink measures a one-sided mix and is not
//! a test of the analytic gradient, so every probe compares the tape's
//! [`Tape::kink_signature`] with the unperturbed one. When a probe crosses a
//! kink the step is shrunk; if it still crosses at the smallest step, the
//! one-sided difference on the matching side is used, and if neither side
//! matches the coordinate is skipped and counted.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{CodError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Smallest step tried when a probe crosses a kink.
    pub min_step: f64,
    /// Denominator floor of the relative error
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_step: 1e-8,
            floor: 1e-6,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Coordinates whose probe crossed a kink on both sides at every step.
    pub skipped: usize,
    /// Coordinates that needed a smaller or one-sided step.
    pub adjusted: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.adjusted += other.adjusted;
    }
}

/// Builds a scalar loss from the bound parameters and the given inputs.
pub trait LossFn: Sync {
    fn loss(&self, ctx: &Ctx, inputs: &[Var]) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&Ctx, &[Var]) -> Result<Var> + Sync,
{
    fn loss(&self, ctx: &Ctx, inputs: &[Var]) -> Result<Var> {
        self(ctx, inputs)
    }
}

fn evaluate(f: &dyn LossFn, store: &ParamStore, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = f.loss(&ctx, &vars)?;
    Ok((tape.scalar(l), tape.kink_signature()))
}

/// A coordinate: parameter tensor `i` or input tensor `i`, flat offset.
#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize, usize),
    Input(usize, usize),
}

struct Probe<'a> {
    f: &'a dyn LossFn,
    sig0: u64,
    cfg: GradCheckConfig,
}

impl Probe<'_> {
    fn numeric(&self, store: &mut ParamStore, inputs: &mut [Tensor], slot: Slot) -> Result<(Option<f64>, bool)> {
        let get = |store: &mut ParamStore, inputs: &mut [Tensor]| -> f64 {
            match slot {
                Slot::Param(i, k) => store.get(store.ids().nth(i).expect("param index")).data()[k],
                Slot::Input(i, k) => inputs[i].data()[k],
            }
        };
        let set = |store: &mut ParamStore, inputs: &mut [Tensor], v: f64| match slot {
            Slot::Param(i, k) => {
                let id = store.ids().nth(i).expect("param index");
                store.get_mut(id).data_mut()[k] = v;
            }
            Slot::Input(i, k) => inputs[i].data_mut()[k] = v,
        };
        let x0 = get(store, inputs);
        let mut h = self.cfg.step;
        let mut adjusted = false;
        let result = loop {
            set(store, inputs, x0 + h);
            let (fp, sp) = evaluate(self.f, store, inputs)?;
            set(store, inputs, x0 - h);
            let (fm, sm) = evaluate(self.f, store, inputs)?;
            set(store, inputs, x0);
            if sp == self.sig0 && sm == self.sig0 {
                break Some((fp - fm) / (2.0 * h));
            }
            adjusted = true;
            if h / 10.0 >= self.cfg.min_step {
                h /= 10.0;
                continue;
            }
            let (f0, _) = evaluate(self.f, store, inputs)?;
            break if sp == self.sig0 {
                Some((fp - f0) / h)
            } else if sm == self.sig0 {
                Some((f0 - fm) / h)
            } else {
                None
            };
        };
        Ok((result, adjusted))
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare analytic and numeric gradients of `f` with respect to every
/// parameter in `store` and every tensor in `inputs`.
pub fn check_gradients(
    f: &dyn LossFn,
    store: &ParamStore,
    inputs: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f.loss(&ctx, &vars)?;
    let sig0 = tape.kink_signature();
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match cfg.max_per_tensor {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };
    let mut work: Vec<(Slot, String, f64)> = Vec::new();
    for (i, (id, &pv)) in store.ids().zip(ctx.param_vars()).enumerate() {
        let g = grads.get_or_zeros(pv, store.get(id).shape());
        for k in pick(g.numel()) {
            work.push((Slot::Param(i, k), format!("{}[{k}]", store.name(id)), g.data()[k]));
        }
    }
    for (i, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.get_or_zeros(v, t.shape());
        for k in pick(g.numel()) {
            work.push((Slot::Input(i, k), format!("input{i}[{k}]"), g.data()[k]));
        }
    }
    if work.is_empty() {
        return Err(CodError::InvalidInput("nothing to check".into()));
    }

    let probe = Probe { f, sig0, cfg };
    work.par_iter()
        .map_init(
            || (store.clone(), inputs.to_vec()),
            |(st, inp), (slot, name, analytic)| -> Result<GradCheckReport> {
                let (numeric, adjusted) = probe.numeric(st, inp, *slot)?;
                let mut r = GradCheckReport {
                    adjusted: adjusted as usize,
                    ..Default::default()
                };
                match numeric {
                    Some(n) => {
                        r.checked = 1;
                        r.max_rel_error = rel_error(*analytic, n, cfg.floor);
                        r.worst = name.clone();
                        r.analytic_at_worst = *analytic;
                        r.numeric_at_worst = n;
                    }
                    None => r.skipped = 1,
                }
                Ok(r)
            },
        )
        .try_reduce(GradCheckReport::default, |mut a, b| {
            a.absorb(b);
            Ok(a)
        })
}

/// Fixed pseudo-random weights for projecting a tensor to a scalar loss.
pub fn projection(shape: [usize; 4], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// `sum(x * r)` on the tape.
pub fn project(tape: &Tape, x: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.leaf(r.clone());
    let m = tape.mul(x, rv)?;
    Ok(tape.sum(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvNorm, ParamBuilder};

    #[test]
    fn conv_block_passes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 4, 3, 1).unwrap();
        let x = projection([1, 2, 5, 5], 1);
        let r = projection([1, 4, 5, 5], 2);
        let f = |ctx: &Ctx, inputs: &[Var]| -> Result<Var> {
            let y = block.forward(ctx, inputs[0])?;
            project(ctx.tape, y, &r)
        };
        let rep = check_gradients(&f, &store, &[x], GradCheckConfig::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert_eq!(rep.checked + rep.skipped, store.num_scalars() + 50);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A leaf used through a stop-gradient copy has a true gradient the
        // tape cannot see.
        let store = ParamStore::new();
        let f = |ctx: &Ctx, inputs: &[Var]| -> Result<Var> {
            let copy = ctx.tape.leaf(ctx.tape.value(inputs[0]).as_ref().clone());
            let y = ctx.tape.mul(copy, inputs[0])?;
            Ok(ctx.tape.sum(y))
        };
        let rep = check_gradients(&f, &store, &[projection([1, 1, 2, 2], 3)], GradCheckConfig::default()).unwrap();
        assert!(rep.max_rel_error > 0.4, "{rep:?}");
    }
}

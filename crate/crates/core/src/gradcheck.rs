//! Central finite-difference verification of graph gradients in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Lower bound on the denominator of the relative error; see [`GradReport`].
pub const NORM_FLOOR: f64 = 1e-4;

/// Outcome of [`check_gradients`].
///
/// The relative error of one tensor is `|g_a - g_n| / max(|g_a|, |g_n|)` in
/// the L2 sense over all its elements, where `g_a` is the analytic and `g_n`
/// the numeric gradient. The denominator is floored at [`NORM_FLOOR`] so
/// gradients that vanish identically (a key bias under softmax, for example)
/// are judged by their absolute error instead of round-off ratios.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name of the tensor with the largest relative error.
    pub worst: String,
    pub max_abs_error: f64,
    /// Number of scalar entries checked.
    pub checked: usize,
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(ParamId),
}

/// Overwrite every trainable entry with uniform values in `[-scale, scale]`.
/// Normalization gains are drawn around one so features stay well scaled.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if !store.entry(id).trainable {
            continue;
        }
        let centre = if store.entry(id).name.contains("norm") && store.entry(id).name.ends_with("weight") {
            1.0
        } else {
            0.0
        };
        for v in store.get_mut(id).data_mut() {
            *v = centre + rng.random_range(-scale..=scale);
        }
    }
}

/// Compare analytic gradients of `sum(c * build(inputs))` against central
/// differences with step `step`, for every input and every trainable
/// parameter reached by `build`. `c` is a fixed pseudo-random weighting.
///
/// With `train` set, batch normalization uses batch statistics; dropout is
/// always off so the function is deterministic.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    train: bool,
    step: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Ctx<f64>, &mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let forward = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], weights: Option<&[f64]>, grads: bool| {
        let mut ctx = if train {
            Ctx::training(store, 0.0, 0)
        } else {
            Ctx::tracking(store)
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut ctx, &mut g, &ids)?;
        let n = g.value(out).len();
        let c = match weights {
            Some(c) => c.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
        };
        let root = g.dot_const(out, c.clone())?;
        let value = g.value(root).data()[0];
        let mut found = Vec::new();
        if grads {
            let mut gr = g.backward(root)?;
            for (i, &id) in ids.iter().enumerate() {
                found.push((format!("input{i}"), Target::Input(i), gr.take(id)));
            }
            let bound: Vec<_> = ctx.bound_params().collect();
            for (pid, node) in bound {
                found.push((store.entry(pid).name.clone(), Target::Param(pid), gr.take(node)));
            }
        }
        Ok::<_, crate::error::Error>((value, c, found))
    };

    let (_, weights, analytic) = forward(store, inputs, None, true)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    for (name, target, grad) in analytic {
        let len = match target {
            Target::Param(p) if !store.entry(p).trainable => continue,
            Target::Param(p) => store.get(p).len(),
            Target::Input(i) => inputs[i].len(),
        };
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                match target {
                    Target::Param(p) => {
                        let orig = store.get(p).data()[e];
                        work_store.get_mut(p).data_mut()[e] = orig + delta;
                        let v = forward(&work_store, &work_inputs, Some(&weights), false)?.0;
                        work_store.get_mut(p).data_mut()[e] = orig;
                        Ok(v)
                    }
                    Target::Input(i) => {
                        let orig = inputs[i].data()[e];
                        work_inputs[i].data_mut()[e] = orig + delta;
                        let v = forward(&work_store, &work_inputs, Some(&weights), false)?.0;
                        work_inputs[i].data_mut()[e] = orig;
                        Ok(v)
                    }
                }
            };
            let plus = eval_at(step)?;
            let minus = eval_at(-step)?;
            *slot = (plus - minus) / (2.0 * step);
        }
        let ana = grad.map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; len]);
        let diff: f64 = ana.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(NORM_FLOOR);
        let abs = ana.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += len;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = name;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ParamBuilder::new(&mut store, &mut rng).uniform("w", &[3, 2], 1.0, true);
        let x = Tensor::new(&[1, 2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let ok = check_gradients(&store, std::slice::from_ref(&x), false, 1e-4, |ctx, g, xs| {
            let wn = ctx.p(g, w);
            let y = g.linear(xs[0], wn, None)?;
            g.gelu(y)
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 6 + 6);
        // The constant-multiplied path hides half of the true dependence from
        // the tape, so the check must flag it.
        let bad = check_gradients(&store, std::slice::from_ref(&x), false, 1e-4, |ctx, g, xs| {
            let wn = ctx.p(g, w);
            let y = g.linear(xs[0], wn, None)?;
            let frozen = g.constant(g.value(y).clone());
            g.mul(y, frozen)
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.1);
    }
}

//! Finite-difference gradient checks for every differentiable primitive and,
//! as other modules land, for composed multi-step modules. Each check draws
//! deterministic inputs on [-2, 2], steering clear of non-differentiable
//! points, and reports the worst relative disagreement between analytic and
//! central-difference gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{gradient_check, KernelKind, KernelTable, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

const PRIM_TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Uniform on [-2,2] but rejecting anything within `margin` of `kink`.
fn rand_tensor_away(rng: &mut ChaCha8Rng, shape: Vec<usize>, kink: f64, margin: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if (v - kink).abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data)
}

fn params1(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), t)])
}

/// Weighted-sum readout so every output entry receives a distinct adjoint.
fn readout(tape: &mut Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod, None)
}

fn check(
    name: &'static str,
    tol: f64,
    params: BTreeMap<String, Tensor>,
    f: impl Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
) -> Result<CheckResult> {
    let err = gradient_check(&f, &params, STEP)?;
    Ok(CheckResult { name, err, tol })
}

/// FD checks covering every primitive's backward rule. Tolerance 1e-6.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut out = Vec::new();

    // Elementwise binaries, same shapes and scalar broadcast.
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = if which == 3 {
            rand_tensor_away(&mut rng, vec![3, 4], 0.0, 0.25)
        } else {
            rand_tensor(&mut rng, vec![3, 4])
        };
        let r = rand_tensor(&mut rng, vec![3, 4]);
        let mut params = params1("a", a);
        params.insert("b".into(), b);
        out.push(check(name, PRIM_TOL, params, move |t, ids| {
            let y = match which {
                0 => t.add(ids["a"], ids["b"])?,
                1 => t.sub(ids["a"], ids["b"])?,
                2 => t.mul(ids["a"], ids["b"])?,
                _ => t.div(ids["a"], ids["b"])?,
            };
            readout(t, y, &r)
        })?);

        let a = rand_tensor(&mut rng, vec![2, 3]);
        let s = if which == 3 {
            rand_tensor_away(&mut rng, vec![1], 0.0, 0.25)
        } else {
            rand_tensor(&mut rng, vec![1])
        };
        let r = rand_tensor(&mut rng, vec![2, 3]);
        let scalar_name: &'static str = match which {
            0 => "add-scalar",
            1 => "sub-scalar",
            2 => "mul-scalar",
            _ => "div-scalar",
        };
        let mut params = params1("a", a);
        params.insert("s".into(), s);
        out.push(check(scalar_name, PRIM_TOL, params, move |t, ids| {
            let y = match which {
                0 => t.add(ids["a"], ids["s"])?,
                1 => t.sub(ids["a"], ids["s"])?,
                2 => t.mul(ids["a"], ids["s"])?,
                _ => t.div(ids["a"], ids["s"])?,
            };
            readout(t, y, &r)
        })?);
    }

    // Matmul.
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let r = rand_tensor(&mut rng, vec![3, 2]);
        let mut params = params1("a", a);
        params.insert("b".into(), b);
        out.push(check("matmul", PRIM_TOL, params, move |t, ids| {
            let y = t.matmul(ids["a"], ids["b"])?;
            readout(t, y, &r)
        })?);
    }

    // Conv2d with bias.
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 5, 5]);
        let w = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, vec![4]);
        let r = rand_tensor(&mut rng, vec![2, 4, 5, 5]);
        let mut params = params1("x", x);
        params.insert("w".into(), w);
        params.insert("b".into(), b);
        out.push(check("conv2d", PRIM_TOL, params, move |t, ids| {
            let y = t.conv2d(ids["x"], ids["w"], Some(ids["b"]))?;
            readout(t, y, &r)
        })?);
    }

    // Softmax family along a middle axis.
    {
        let x = rand_tensor(&mut rng, vec![2, 5, 3]);
        let r = rand_tensor(&mut rng, vec![2, 5, 3]);
        out.push(check("softmax", PRIM_TOL, params1("x", x.clone()), {
            let r = r.clone();
            move |t, ids| {
                let y = t.softmax(ids["x"], 1)?;
                readout(t, y, &r)
            }
        })?);
        out.push(check("log_softmax", PRIM_TOL, params1("x", x.clone()), {
            let r = r.clone();
            move |t, ids| {
                let y = t.log_softmax(ids["x"], 1)?;
                readout(t, y, &r)
            }
        })?);
        let r2 = rand_tensor(&mut rng, vec![2, 3]);
        out.push(check("logsumexp", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.logsumexp(ids["x"], 1)?;
            readout(t, y, &r2)
        })?);
    }

    // Unary activations; relu/clamp away from their kinks.
    {
        let x = rand_tensor_away(&mut rng, vec![4, 5], 0.0, 1e-3);
        let r = rand_tensor(&mut rng, vec![4, 5]);
        out.push(check("relu", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.relu(ids["x"])?;
            readout(t, y, &r)
        })?);
    }
    {
        let x = rand_tensor_away(&mut rng, vec![4, 5], 0.5, 1e-3);
        let r = rand_tensor(&mut rng, vec![4, 5]);
        out.push(check("clamp_min", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.clamp_min(ids["x"], 0.5)?;
            readout(t, y, &r)
        })?);
    }
    for (name, which) in [("sigmoid", 0), ("tanh", 1)] {
        let x = rand_tensor(&mut rng, vec![4, 5]);
        let r = rand_tensor(&mut rng, vec![4, 5]);
        out.push(check(name, PRIM_TOL, params1("x", x), move |t, ids| {
            let y = if which == 0 { t.sigmoid(ids["x"])? } else { t.tanh(ids["x"])? };
            readout(t, y, &r)
        })?);
    }
    {
        // log needs strictly positive inputs, away from 0 so FD stays finite.
        let len = 20;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..2.0)).collect();
        let x = Tensor::new(vec![4, 5], data);
        let r = rand_tensor(&mut rng, vec![4, 5]);
        out.push(check("log", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.log(ids["x"])?;
            readout(t, y, &r)
        })?);
    }

    // Reductions.
    {
        let x = rand_tensor(&mut rng, vec![3, 4, 2]);
        out.push(check("sum-all", PRIM_TOL, params1("x", x.clone()), |t, ids| {
            t.sum(ids["x"], None)
        })?);
        out.push(check("mean-all", PRIM_TOL, params1("x", x.clone()), |t, ids| {
            t.mean(ids["x"], None)
        })?);
        let r = rand_tensor(&mut rng, vec![3, 2]);
        out.push(check("sum-axis", PRIM_TOL, params1("x", x.clone()), {
            let r = r.clone();
            move |t, ids| {
                let y = t.sum(ids["x"], Some(1))?;
                readout(t, y, &r)
            }
        })?);
        out.push(check("mean-axis", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.mean(ids["x"], Some(1))?;
            readout(t, y, &r)
        })?);
    }

    // Hard max along an axis, with comfortable gaps between the top entries.
    {
        let mut x = rand_tensor(&mut rng, vec![3, 6, 2]);
        spread_axis(&mut x, 1, 1e-2, &mut rng);
        let r = rand_tensor(&mut rng, vec![3, 2]);
        out.push(check("max-axis", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.max_axis(ids["x"], 1)?;
            readout(t, y, &r)
        })?);
    }

    // Concat of three pieces along axis 1.
    {
        let a = rand_tensor(&mut rng, vec![2, 2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 4, 3]);
        let c = rand_tensor(&mut rng, vec![2, 1, 3]);
        let r = rand_tensor(&mut rng, vec![2, 7, 3]);
        let mut params = params1("a", a);
        params.insert("b".into(), b);
        params.insert("c".into(), c);
        out.push(check("concat", PRIM_TOL, params, move |t, ids| {
            let y = t.concat(&[ids["a"], ids["b"], ids["c"]], 1)?;
            readout(t, y, &r)
        })?);
    }

    // Reshape + scale chained.
    {
        let x = rand_tensor(&mut rng, vec![3, 8]);
        let r = rand_tensor(&mut rng, vec![4, 6]);
        out.push(check("reshape-scale", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.reshape(ids["x"], vec![4, 6])?;
            let z = t.scale(y, -1.75)?;
            readout(t, z, &r)
        })?);
    }

    // Gather with repeated indices (exercises scatter-add).
    {
        let x = rand_tensor(&mut rng, vec![10]);
        let idx = Arc::new(vec![0u32, 3, 3, 9, 1, 0]);
        let r = rand_tensor(&mut rng, vec![6]);
        out.push(check("gather", PRIM_TOL, params1("x", x), move |t, ids| {
            let y = t.gather(ids["x"], idx.clone(), vec![6])?;
            readout(t, y, &r)
        })?);
    }

    // Transition-kernel application: both layouts, both directions.
    {
        let n = 5usize;
        let occ = |x: usize, y: usize| (x == 2 && y == 1) || (x == 4 && y == 3);
        let table = Arc::new(KernelTable::build(n, occ));
        for (name, transpose) in [("trans_kernel-hom", false), ("trans_kernel-hom-T", true)] {
            let kernel = rand_tensor(&mut rng, vec![4, 36]);
            let input = rand_tensor(&mut rng, vec![n, n, 4]);
            let r = rand_tensor(&mut rng, vec![n, n, 4]);
            let table = table.clone();
            let mut params = params1("k", kernel);
            params.insert("x".into(), input);
            out.push(check(name, PRIM_TOL, params, move |t, ids| {
                let y = t.trans_kernel(
                    ids["k"],
                    ids["x"],
                    table.clone(),
                    KernelKind::Homogeneous { action: 2 },
                    transpose,
                )?;
                readout(t, y, &r)
            })?);
        }
        for (name, transpose) in [("trans_kernel-het", false), ("trans_kernel-het-T", true)] {
            let kernel = rand_tensor(&mut rng, vec![4 * 4 * 36, n, n]);
            let input = rand_tensor(&mut rng, vec![n, n, 4]);
            let r = rand_tensor(&mut rng, vec![n, n, 4]);
            let table = table.clone();
            let mut params = params1("k", kernel);
            params.insert("x".into(), input);
            out.push(check(name, PRIM_TOL, params, move |t, ids| {
                let y = t.trans_kernel(
                    ids["k"],
                    ids["x"],
                    table.clone(),
                    KernelKind::Heterogeneous { action: 1, n_actions: 4 },
                    transpose,
                )?;
                readout(t, y, &r)
            })?);
        }
    }

    Ok(out)
}

const COMPOSITE_TOL: f64 = 1e-5;

/// FD checks through composed multi-step modules: a 4-step belief-filter
/// unroll, soft value iteration (H = 4) feeding QMDP action values, and an
/// 8-step recurrent-controller unroll. Tolerance 1e-5.
pub fn composite_suite() -> Result<Vec<CheckResult>> {
    use crate::controllers::{controller_state_init, init_controller, lstm_controller_step};
    use crate::env::{FORWARD, STAY, TURN_LEFT, TURN_RIGHT};
    use crate::filter::{
        correct, init_transition_het, init_zmodel, kernel_table, learned_likelihood, map_image,
        predict, transition_kernel_het, zmodel_map_features, TransitionParam, ZModelConfig,
    };
    use crate::planner::{
        goal_mask_leaf, init_rmodel, planner_kernel_table, qmdp_action_values,
        reward_model_nodes, value_iteration_grid, Backup,
    };

    // Narrow hidden widths keep the finite-difference sweep fast and keep
    // relu pre-activations clear of the step size; the composed graph is
    // identical to the full-width one.
    const HIDDEN: usize = 6;
    const CFG: ZModelConfig = ZModelConfig { conv_filters: 3, obs_embed: 2 };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let map = crate::env::generate_environment(5, 5, 0)?;
    let n = map.n;
    let mut out = Vec::new();

    // Four filtering steps — predict with a map-conditioned kernel, correct
    // with the learned likelihood — differentiated through transition and
    // observation-model parameters.
    {
        let mut params = BTreeMap::new();
        let mut prng = rng.clone();
        init_transition_het(&mut params, HIDDEN, &mut prng);
        init_zmodel(&mut params, CFG, &mut prng);
        let table = kernel_table(&map);
        let map2 = map.clone();
        let actions = [FORWARD, TURN_RIGHT, FORWARD, STAY];
        // No all-zero observation: with zero-initialized embedding biases it
        // would sit exactly on the relu kink, where finite differences
        // disagree with the (well-defined) subgradient.
        let obs_seq = [[1u8, 1, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1]];
        let readout_w = rand_tensor(&mut rng, vec![n, n, 4]);
        out.push(check("filter-unroll-4", COMPOSITE_TOL, params, move |t, ids| {
            let img = t.leaf(map_image(&map2));
            let kernel = transition_kernel_het(t, ids, img, n)?;
            let zfeat = zmodel_map_features(t, ids, img)?;
            let uniform = Tensor::new(vec![n, n, 4], vec![1.0 / (n * n * 4) as f64; n * n * 4]);
            let mut b = t.leaf(uniform);
            for (a, obs) in actions.iter().zip(obs_seq) {
                let z = learned_likelihood(t, ids, zfeat, obs, CFG, n)?;
                let bc = correct(t, b, z)?;
                b = predict(t, bc, *a, kernel, TransitionParam::Heterogeneous, &table)?;
            }
            readout(t, b, &readout_w)
        })?);
    }

    // Soft value iteration over the learned reward and transition models,
    // read out through QMDP action values under a fixed belief.
    {
        let mut params = BTreeMap::new();
        let mut prng = rng.clone();
        init_transition_het(&mut params, HIDDEN, &mut prng);
        init_rmodel(&mut params, HIDDEN, &mut prng);
        let table = planner_kernel_table(&map, TransitionParam::Heterogeneous);
        let map2 = map.clone();
        let mut belief = vec![0.0; n * n * 4];
        for (i, v) in belief.iter_mut().enumerate() {
            *v = 1.0 + (i % 7) as f64;
        }
        let total: f64 = belief.iter().sum();
        belief.iter_mut().for_each(|v| *v /= total);
        let belief = Tensor::new(vec![n, n, 4], belief);
        let readout_w = rand_tensor(&mut rng, vec![1, 4]);
        out.push(check("vi-qmdp-h4", COMPOSITE_TOL, params, move |t, ids| {
            let img = t.leaf(map_image(&map2));
            let kernel = transition_kernel_het(t, ids, img, n)?;
            let rewards = reward_model_nodes(t, ids, img, n)?;
            let goal = goal_mask_leaf(t, &map2);
            let q = value_iteration_grid(
                t,
                kernel,
                TransitionParam::Heterogeneous,
                &table,
                &rewards,
                goal,
                4,
                Backup::Soft { temperature: 1.0 },
            )?;
            let b = t.leaf(belief.clone());
            let values = qmdp_action_values(t, q, b)?;
            readout(t, values, &readout_w)
        })?);
    }

    // Eight recurrent controller steps over fixed action values and
    // observations. The residual head initializes to zero, which would make
    // every recurrent gradient vanish identically, so it is randomized here.
    {
        let mut params = BTreeMap::new();
        let mut prng = rng.clone();
        init_controller(&mut params, &mut prng);
        params.insert("ctrl.head.w".into(), {
            let t = rand_tensor(&mut prng, params["ctrl.head.w"].shape().to_vec());
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 0.3 * v).collect())
        });
        let steps: Vec<(Tensor, [u8; 3], usize)> = (0..8)
            .map(|i| {
                (
                    rand_tensor(&mut rng, vec![1, 4]),
                    [(i % 2) as u8, ((i / 2) % 2) as u8, 0],
                    [FORWARD, TURN_LEFT, TURN_RIGHT, STAY][i % 4],
                )
            })
            .collect();
        let readout_w = rand_tensor(&mut rng, vec![1, 4]);
        out.push(check("controller-unroll-8", COMPOSITE_TOL, params, move |t, ids| {
            let mut cs = controller_state_init(t);
            let mut acc: Option<NodeId> = None;
            let mut last = None;
            for (values, obs, executed) in &steps {
                cs.last_action = last;
                let vals = t.leaf(values.clone());
                let (out_vals, next) = lstm_controller_step(t, ids, *obs, vals, &cs)?;
                cs = next;
                last = Some(*executed);
                let r = readout(t, out_vals, &readout_w)?;
                acc = Some(match acc {
                    None => r,
                    Some(a) => t.add(a, r)?,
                });
            }
            Ok(acc.expect("eight steps"))
        })?);
    }

    Ok(out)
}

/// Nudge entries along `axis` apart until every pairwise gap exceeds `min_gap`
/// (keeps hard-max FD checks away from argmax switches).
fn spread_axis(t: &mut Tensor, axis: usize, min_gap: f64, rng: &mut ChaCha8Rng) {
    let shape = t.shape().to_vec();
    let (outer, nax, inner) = crate::tensor::axis_split(&shape, axis);
    for oi in 0..outer {
        for ii in 0..inner {
            loop {
                let mut vals: Vec<(usize, f64)> = (0..nax)
                    .map(|j| (j, t.data()[(oi * nax + j) * inner + ii]))
                    .collect();
                vals.sort_by(|a, b| a.1.total_cmp(&b.1));
                let tight = vals.windows(2).any(|w| (w[1].1 - w[0].1).abs() < min_gap);
                if !tight {
                    break;
                }
                for j in 0..nax {
                    t.data_mut()[(oi * nax + j) * inner + ii] = rng.gen_range(-2.0..2.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_fd() {
        let results = primitive_suite().expect("suite runs");
        for r in &results {
            assert!(
                r.passed(),
                "{}: err {:.3e} > tol {:.3e}",
                r.name,
                r.err,
                r.tol
            );
        }
        assert!(results.len() >= 25, "suite unexpectedly small: {}", results.len());
    }

    #[test]
    fn composed_modules_pass_fd() {
        let results = composite_suite().expect("suite runs");
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(
                r.passed(),
                "{}: err {:.3e} > tol {:.3e}",
                r.name,
                r.err,
                r.tol
            );
        }
    }
}


//! Local control on top of the planner's action values: a hand-coded state
//! machine that vetoes collisions and suppresses turn dithering, and a
//! learned LSTM controller that residually adjusts the action values from
//! the observation and action history.

use rand_chacha::ChaCha8Rng;

use crate::env::{FORWARD, N_ACTIONS, TURN_LEFT, TURN_RIGHT};
use crate::error::Result;
use crate::nn::{dense, init_dense, init_lstm, lstm_step, NodeMap, ParamMap};
use crate::planner::argmax_action;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Hidden width of the controller LSTM.
pub const CTRL_HIDDEN: usize = 64;
/// Controller input features: observation (3) + action values (|A|) + last
/// executed action one-hot (|A|).
pub const CTRL_FEATURES: usize = 3 + 2 * N_ACTIONS;

// ── State machine ───────────────────────────────────────────────────────────

/// One decision of the state machine. Normally returns the argmax action;
/// when that is forward and the front-center cell is observed blocked, the
/// turn with the higher action value is taken instead (ties go left). A turn
/// that immediately reverses the previous turn is replaced by forward when
/// the front is free, so the machine cannot dither in place. Turn actions
/// rotate in place and never collide in this action set, so a fully blocked
/// fallback (stay) can never be needed.
///
/// The machine never outputs forward when the front-center cell is blocked.
pub fn sm_step(action_values: &[f64], obs: [u8; 3], last_action: Option<usize>) -> usize {
    let best = argmax_action(action_values);
    let front_blocked = obs[1] == 1;
    let mut choice = if best == FORWARD && front_blocked {
        if action_values[TURN_LEFT] >= action_values[TURN_RIGHT] {
            TURN_LEFT
        } else {
            TURN_RIGHT
        }
    } else {
        best
    };
    let reverses = matches!(
        (last_action, choice),
        (Some(TURN_LEFT), TURN_RIGHT) | (Some(TURN_RIGHT), TURN_LEFT)
    );
    if reverses && !front_blocked {
        choice = FORWARD;
    }
    choice
}

// ── LSTM controller ─────────────────────────────────────────────────────────

/// Episode-local controller memory: the LSTM hidden pair and the last action
/// actually executed (set by the caller once the action is chosen).
#[derive(Debug, Clone, Copy)]
pub struct ControllerState {
    pub h: NodeId,
    pub c: NodeId,
    pub last_action: Option<usize>,
}

/// Fresh all-zero controller state for the start of an episode.
pub fn controller_state_init(tape: &mut Tape) -> ControllerState {
    let h = tape.leaf(Tensor::zeros(vec![1, CTRL_HIDDEN]));
    let c = tape.leaf(Tensor::zeros(vec![1, CTRL_HIDDEN]));
    ControllerState { h, c, last_action: None }
}

/// Controller parameters: LSTM over the 11 input features plus a dense head
/// back to |A| values. The head starts at zero so the untrained controller is
/// exactly the identity on action values and never degrades the planner.
pub fn init_controller(params: &mut ParamMap, rng: &mut ChaCha8Rng) {
    init_lstm(params, "ctrl", CTRL_FEATURES, CTRL_HIDDEN, rng);
    init_dense(params, "ctrl.head", CTRL_HIDDEN, N_ACTIONS, rng);
    for v in params.get_mut("ctrl.head.w").unwrap().data_mut() {
        *v = 0.0;
    }
}

/// One controller step: concatenate [observation, mean-centered action
/// values, last-action one-hot], advance the LSTM, and add the dense head's
/// output to the raw action values (residual combination). Centering only
/// the LSTM's value inputs keeps them in the saturating nonlinearities'
/// useful range — soft-backup values share a large common offset — without
/// changing what the residual returns. Differentiable end to end.
pub fn lstm_controller_step(
    tape: &mut Tape,
    ids: &NodeMap,
    obs: [u8; 3],
    action_values: NodeId,
    state: &ControllerState,
) -> Result<(NodeId, ControllerState)> {
    let mean = tape.mean(action_values, None)?;
    let centered = tape.sub(action_values, mean)?;
    let obs_leaf =
        tape.leaf(Tensor::new(vec![1, 3], obs.iter().map(|&b| b as f64).collect()));
    let mut onehot = vec![0.0; N_ACTIONS];
    if let Some(a) = state.last_action {
        onehot[a] = 1.0;
    }
    let last_leaf = tape.leaf(Tensor::new(vec![1, N_ACTIONS], onehot));
    let x = tape.concat(&[obs_leaf, centered, last_leaf], 1)?;
    let (h, c) = lstm_step(tape, ids, "ctrl", x, state.h, state.c)?;
    let delta = dense(tape, ids, "ctrl.head", h)?;
    let out = tape.add(action_values, delta)?;
    Ok((out, ControllerState { h, c, last_action: state.last_action }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::STAY;
    use crate::tape::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn sm_turns_toward_the_higher_value_when_forward_is_blocked() {
        let blocked = [0u8, 1, 0];
        let v = [5.0, 1.0, 0.5, 0.0]; // forward best, left > right
        assert_eq!(sm_step(&v, blocked, None), TURN_LEFT);
        let v = [5.0, 0.5, 1.0, 0.0]; // right > left
        assert_eq!(sm_step(&v, blocked, None), TURN_RIGHT);
        let v = [5.0, 1.0, 1.0, 0.0]; // tie goes left
        assert_eq!(sm_step(&v, blocked, None), TURN_LEFT);
    }

    #[test]
    fn sm_is_plain_argmax_when_the_front_is_clear() {
        let clear = [0u8, 0, 0];
        assert_eq!(sm_step(&[5.0, 1.0, 0.5, 0.0], clear, None), FORWARD);
        assert_eq!(sm_step(&[1.0, 5.0, 0.5, 0.0], clear, None), TURN_LEFT);
        assert_eq!(sm_step(&[1.0, 0.5, 0.4, 5.0], clear, None), STAY);
        // Side cells blocked but the front free: still argmax.
        assert_eq!(sm_step(&[5.0, 1.0, 0.5, 0.0], [1, 0, 1], None), FORWARD);
    }

    #[test]
    fn sm_replaces_turn_reversals_with_forward() {
        let clear = [0u8, 0, 0];
        let right_best = [0.0, 0.5, 5.0, 0.0];
        assert_eq!(sm_step(&right_best, clear, Some(TURN_LEFT)), FORWARD);
        let left_best = [0.0, 5.0, 0.5, 0.0];
        assert_eq!(sm_step(&left_best, clear, Some(TURN_RIGHT)), FORWARD);
        // Repeating the same turn is not a reversal.
        assert_eq!(sm_step(&left_best, clear, Some(TURN_LEFT)), TURN_LEFT);
        // With the front blocked the reversal stands.
        assert_eq!(sm_step(&right_best, [0, 1, 0], Some(TURN_LEFT)), TURN_RIGHT);
    }

    #[test]
    fn sm_never_walks_into_a_blocked_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let v: Vec<f64> = (0..N_ACTIONS).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let obs = [rng.gen_range(0..2) as u8, rng.gen_range(0..2) as u8, rng.gen_range(0..2) as u8];
            let last = if rng.gen_bool(0.5) { Some(rng.gen_range(0..N_ACTIONS)) } else { None };
            let a = sm_step(&v, obs, last);
            assert!(!(a == FORWARD && obs[1] == 1), "forward into {obs:?} from values {v:?}");
        }
    }

    #[test]
    fn untrained_controller_is_the_identity_on_action_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Default init: zero head, random LSTM.
        let mut params = ParamMap::new();
        init_controller(&mut params, &mut rng);
        // Also the fully zeroed variant.
        let mut zeroed = params.clone();
        for t in zeroed.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        for p in [&params, &zeroed] {
            let mut tape = Tape::new();
            let ids = tape.params_from(p);
            let mut state = controller_state_init(&mut tape);
            for t in 0..3 {
                let vals: Vec<f64> = (0..N_ACTIONS).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let v = tape.leaf(Tensor::new(vec![1, N_ACTIONS], vals.clone()));
                let (out, next) =
                    lstm_controller_step(&mut tape, &ids, [0, 1, 0], v, &state).unwrap();
                assert_eq!(tape.value(out).data(), &vals[..], "step {t}");
                state = next;
                state.last_action = Some(t % N_ACTIONS);
            }
        }
    }

    #[test]
    fn controller_wires_each_input_block_to_the_right_feature() {
        // Zero everything except one input weight (feature → gate g, unit 0)
        // and one head weight (unit 0 → action 0). Then
        //   out[0] = v[0] + σ(0)·tanh(σ(0)·tanh(x_f))   with x_f the feature,
        // which pins down the concatenation order [obs | centered values |
        // last action one-hot].
        let expected = |x_f: f64| 0.5 * ((0.5 * x_f.tanh()).tanh());
        let run = |feature: usize, obs: [u8; 3], vals: [f64; N_ACTIONS], last: Option<usize>| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut params = ParamMap::new();
            init_controller(&mut params, &mut rng);
            for t in params.values_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            params.get_mut("ctrl.wx_g").unwrap().data_mut()[feature * CTRL_HIDDEN] = 1.0;
            params.get_mut("ctrl.head.w").unwrap().data_mut()[0] = 1.0;
            let mut tape = Tape::new();
            let ids = tape.params_from(&params);
            let mut state = controller_state_init(&mut tape);
            state.last_action = last;
            let v = tape.leaf(Tensor::new(vec![1, N_ACTIONS], vals.to_vec()));
            let (out, _) = lstm_controller_step(&mut tape, &ids, obs, v, &state).unwrap();
            tape.value(out).data()[0] - vals[0]
        };
        let vals = [1.0, -2.0, 0.5, 0.25];
        let mean = vals.iter().sum::<f64>() / N_ACTIONS as f64;
        // Feature 1 = front-center observation bit.
        let d = run(1, [0, 1, 0], vals, None);
        assert!((d - expected(1.0)).abs() < 1e-12);
        let d = run(1, [1, 0, 1], vals, None);
        assert!((d - expected(0.0)).abs() < 1e-12);
        // Feature 3 + a = centered action value a.
        let d = run(3 + 1, [0, 0, 0], vals, None);
        assert!((d - expected(vals[1] - mean)).abs() < 1e-12);
        // Feature 3 + |A| + a = last-action one-hot.
        let d = run(3 + N_ACTIONS + 2, [0, 0, 0], vals, Some(2));
        assert!((d - expected(1.0)).abs() < 1e-12);
        let d = run(3 + N_ACTIONS + 2, [0, 0, 0], vals, Some(1));
        assert!((d - expected(0.0)).abs() < 1e-12);
    }

    #[test]
    fn controller_eight_step_chain_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut params = ParamMap::new();
        init_lstm(&mut params, "ctrl", CTRL_FEATURES, CTRL_HIDDEN, &mut rng);
        init_dense(&mut params, "ctrl.head", CTRL_HIDDEN, N_ACTIONS, &mut rng);
        let script: Vec<([u8; 3], Vec<f64>, Option<usize>, Vec<f64>)> = (0..8)
            .map(|t| {
                let obs = [rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..2)];
                let vals: Vec<f64> = (0..N_ACTIONS).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let last = if t == 0 { None } else { Some((t - 1) % N_ACTIONS) };
                let weights: Vec<f64> =
                    (0..N_ACTIONS).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (obs, vals, last, weights)
            })
            .collect();
        let f = move |tape: &mut Tape, ids: &BTreeMap<String, NodeId>| {
            let mut state = controller_state_init(tape);
            let mut loss = None;
            for (obs, vals, last, weights) in &script {
                state.last_action = *last;
                let v = tape.leaf(Tensor::new(vec![1, N_ACTIONS], vals.clone()));
                let (out, next) = lstm_controller_step(tape, ids, *obs, v, &state)?;
                state = next;
                let w = tape.leaf(Tensor::new(vec![1, N_ACTIONS], weights.clone()));
                let prod = tape.mul(out, w)?;
                let s = tape.sum(prod, None)?;
                loss = Some(match loss {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
            Ok(loss.expect("eight steps"))
        };
        let err = gradient_check(&f, &params, 1e-5).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn controller_steps_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamMap::new();
        init_lstm(&mut params, "ctrl", CTRL_FEATURES, CTRL_HIDDEN, &mut rng);
        init_dense(&mut params, "ctrl.head", CTRL_HIDDEN, N_ACTIONS, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let ids = tape.params_from(&params);
            let mut state = controller_state_init(&mut tape);
            let mut outs = Vec::new();
            for t in 0..5 {
                let v = tape.leaf(Tensor::new(
                    vec![1, N_ACTIONS],
                    (0..N_ACTIONS).map(|a| (t * N_ACTIONS + a) as f64 * 0.3 - 1.0).collect(),
                ));
                let (out, next) =
                    lstm_controller_step(&mut tape, &ids, [(t % 2) as u8, 0, 1], v, &state)
                        .unwrap();
                state = next;
                state.last_action = Some(t % N_ACTIONS);
                outs.extend_from_slice(tape.value(out).data());
            }
            outs
        };
        assert_eq!(run(), run());
    }
}

//! Neural-network building blocks on top of the tape: parameter
//! initialization, dense and LSTM forward builders, RMSProp with global-norm
//! clipping, L2 penalties, and binary checkpoints that round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DanError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;
pub type NodeMap = BTreeMap<String, NodeId>;

// ── Initialization ──────────────────────────────────────────────────────────

/// Uniform(−a, a) with a = √(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-a..a)).collect())
}

/// Dense layer parameters: `{name}.w` (in_dim, out_dim) Glorot, `{name}.b` zeros.
pub fn init_dense(params: &mut ParamMap, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) {
    params.insert(format!("{name}.w"), glorot_uniform(rng, vec![in_dim, out_dim], in_dim, out_dim));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
}

/// Conv layer parameters: `{name}.w` (out_c, in_c, k, k) Glorot with
/// receptive-field fan counts, `{name}.b` zeros.
pub fn init_conv(params: &mut ParamMap, name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) {
    let fan_in = in_c * k * k;
    let fan_out = out_c * k * k;
    params.insert(format!("{name}.w"), glorot_uniform(rng, vec![out_c, in_c, k, k], fan_in, fan_out));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![out_c]));
}

/// LSTM parameters with separate weights per gate (i, f, o, g): input weights
/// `{name}.wx_*` (in_dim, hidden), recurrent weights `{name}.wh_*`
/// (hidden, hidden), biases `{name}.b_*` zeros except the forget bias at +1.
pub fn init_lstm(params: &mut ParamMap, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    for gate in ["i", "f", "o", "g"] {
        params.insert(
            format!("{name}.wx_{gate}"),
            glorot_uniform(rng, vec![in_dim, hidden], in_dim, hidden),
        );
        params.insert(
            format!("{name}.wh_{gate}"),
            glorot_uniform(rng, vec![hidden, hidden], hidden, hidden),
        );
        let bias = if gate == "f" { Tensor::full(vec![hidden], 1.0) } else { Tensor::zeros(vec![hidden]) };
        params.insert(format!("{name}.b_{gate}"), bias);
    }
}

// ── Forward builders ────────────────────────────────────────────────────────

/// out = x·W + b for x of shape (B, in_dim); bias is broadcast across rows.
pub fn dense(tape: &mut Tape, ids: &NodeMap, name: &str, x: NodeId) -> Result<NodeId> {
    let w = ids[&format!("{name}.w")];
    let b = ids[&format!("{name}.b")];
    let xw = tape.matmul(x, w)?;
    let (bsz, out_dim) = {
        let s = tape.value(xw).shape();
        (s[0], s[1])
    };
    if bsz == 1 {
        let b1 = tape.reshape(b, vec![1, out_dim])?;
        tape.add(xw, b1)
    } else {
        let idx: Vec<u32> = (0..bsz * out_dim).map(|i| (i % out_dim) as u32).collect();
        let tiled = tape.gather(b, Arc::new(idx), vec![bsz, out_dim])?;
        tape.add(xw, tiled)
    }
}

/// One LSTM step. `x` (B, in_dim), `h`/`c` (B, hidden) → (h', c').
///
/// i = σ(x·Wxi + h·Whi + bi), f = σ(..), o = σ(..), g = tanh(..),
/// c' = f⊙c + i⊙g, h' = o⊙tanh(c').
pub fn lstm_step(
    tape: &mut Tape,
    ids: &NodeMap,
    name: &str,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let pre = |tape: &mut Tape, gate: &str| -> Result<NodeId> {
        let wx = ids[&format!("{name}.wx_{gate}")];
        let wh = ids[&format!("{name}.wh_{gate}")];
        let b = ids[&format!("{name}.b_{gate}")];
        let xw = tape.matmul(x, wx)?;
        let hw = tape.matmul(h, wh)?;
        let s = tape.add(xw, hw)?;
        let (bsz, hid) = {
            let sh = tape.value(s).shape();
            (sh[0], sh[1])
        };
        if bsz == 1 {
            let b1 = tape.reshape(b, vec![1, hid])?;
            tape.add(s, b1)
        } else {
            let idx: Vec<u32> = (0..bsz * hid).map(|i| (i % hid) as u32).collect();
            let tiled = tape.gather(b, Arc::new(idx), vec![bsz, hid])?;
            tape.add(s, tiled)
        }
    };
    let zi = pre(tape, "i")?;
    let zf = pre(tape, "f")?;
    let zo = pre(tape, "o")?;
    let zg = pre(tape, "g")?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Materialize every parameter as a tape leaf, keyed by name.
pub fn param_leaves(tape: &mut Tape, params: &ParamMap) -> NodeMap {
    params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone()))).collect()
}

/// Add each parameter's gradient from `grads` into the accumulator `acc`
/// (inserting zeros first for names not seen yet), restricted to the names
/// accepted by `select`. Leaves without a gradient contribute nothing.
pub fn accumulate_param_grads(
    acc: &mut ParamMap,
    params: &ParamMap,
    ids: &NodeMap,
    grads: &crate::tape::GradientMap,
    select: impl Fn(&str) -> bool,
) {
    for (name, &id) in ids {
        if !select(name) {
            continue;
        }
        if let Some(g) = grads.get(id) {
            let slot = acc
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(params[name].shape().to_vec()));
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// coeff · Σ‖θ‖² over the parameters whose names pass `select`.
pub fn l2_penalty(
    tape: &mut Tape,
    ids: &NodeMap,
    coeff: f64,
    select: impl Fn(&str) -> bool,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (name, &id) in ids {
        if !select(name) {
            continue;
        }
        let sq = tape.mul(id, id)?;
        let s = tape.sum(sq, None)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    tape.scale(total, coeff)
}

// ── Optimizer ───────────────────────────────────────────────────────────────

/// If the global L2 norm across all gradient tensors exceeds `max_norm`,
/// rescale every tensor by `max_norm / norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// RMSProp: v ← 0.9·v + 0.1·g², θ ← θ − lr·g/√(v + 1e-8). Gradients are
/// clipped to a global norm of 5.0 before every update.
pub struct RmsProp {
    pub lr: f64,
    pub v: ParamMap,
}

pub const GRAD_CLIP_NORM: f64 = 5.0;

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp { lr, v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) {
        let mut grads = grads.clone();
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        for (name, g) in &grads {
            let theta = params.get_mut(name).expect("gradient for unknown parameter");
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let vi = 0.9 * v.data()[i] + 0.1 * gi * gi;
                v.data_mut()[i] = vi;
                theta.data_mut()[i] -= self.lr * gi / (vi + 1e-8).sqrt();
            }
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"DANCKPT\x01";

/// Serialize named sections of tensors (e.g. "params", "opt.v") to a binary
/// file. Payloads are raw little-endian f64, so a save/load round trip is
/// bit-exact, optimizer state included.
pub fn save_checkpoint(path: &Path, sections: &[(&str, &ParamMap)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (section, map) in sections {
        write_str(&mut w, section)?;
        w.write_all(&(map.len() as u32).to_le_bytes())?;
        for (name, t) in *map {
            write_str(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, ParamMap>> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(DanError::Checkpoint(format!(
            "bad magic/version {:02x?} in {}",
            magic,
            path.display()
        )));
    }
    let n_sections = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n_sections {
        let section = read_str(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut map = ParamMap::new();
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            map.insert(name, Tensor::new(shape, data));
        }
        out.insert(section, map);
    }
    Ok(out)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(DanError::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| DanError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn zero_lstm_on_zero_input_freezes_gates_at_half() {
        // All-zero parameters (including the usually-+1 forget bias) and zero
        // inputs: every sigmoid gate is exactly 0.5, g = tanh(0) = 0, so the
        // new cell and hidden states are exactly zero.
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_lstm(&mut params, "lstm", 3, 4, &mut rng);
        for t in params.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let x = tape.leaf(Tensor::zeros(vec![1, 3]));
        let h = tape.leaf(Tensor::zeros(vec![1, 4]));
        let c = tape.leaf(Tensor::zeros(vec![1, 4]));
        let (h2, c2) = lstm_step(&mut tape, &ids, "lstm", x, h, c).unwrap();
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
        // Gate values themselves: recompute the i-gate pre-activation path.
        let zi = {
            let wx = ids["lstm.wx_i"];
            let xw = tape.matmul(x, wx).unwrap();
            tape.sigmoid(xw).unwrap()
        };
        assert!(tape.value(zi).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rmsprop_first_step_matches_hand_computation() {
        let mut params = ParamMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        let grads = ParamMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let mut opt = RmsProp::new(0.001);
        opt.step(&mut params, &grads);
        assert_abs_diff_eq!(opt.v["w"].item(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(params["w"].item(), -0.001 / (0.1f64 + 1e-8).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(params["w"].item(), -0.0031623, epsilon = 1e-6);
    }

    #[test]
    fn rmsprop_step_size_approaches_lr_under_constant_gradient() {
        let mut params = ParamMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        let grads = ParamMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let mut opt = RmsProp::new(0.001);
        let mut prev = 0.0;
        let mut step_len = 0.0;
        for _ in 0..1000 {
            opt.step(&mut params, &grads);
            step_len = (params["w"].item() - prev).abs();
            prev = params["w"].item();
        }
        assert!((step_len - 0.001).abs() / 0.001 < 0.01, "step {step_len}");
    }

    #[test]
    fn global_norm_clip_rescales_to_five() {
        // Two tensors with joint norm 13 (5-12-13 triangle scaled).
        let mut grads = ParamMap::from([
            ("a".to_string(), Tensor::new(vec![1], vec![5.0])),
            ("b".to_string(), Tensor::new(vec![1], vec![12.0])),
        ]);
        let norm = clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        assert_abs_diff_eq!(norm, 13.0, epsilon = 1e-12);
        let clipped = (grads["a"].item().powi(2) + grads["b"].item().powi(2)).sqrt();
        assert_abs_diff_eq!(clipped, 5.0, epsilon = 1e-12);
        // Under the threshold nothing changes.
        let mut small = ParamMap::from([("a".to_string(), Tensor::new(vec![1], vec![3.0]))]);
        clip_global_norm(&mut small, GRAD_CLIP_NORM);
        assert_eq!(small["a"].item(), 3.0);
    }

    #[test]
    fn glorot_bounds_and_bias_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamMap::new();
        init_dense(&mut params, "d", 30, 10, &mut rng);
        init_lstm(&mut params, "l", 8, 16, &mut rng);
        let a = (6.0f64 / 40.0).sqrt();
        assert!(params["d.w"].data().iter().all(|&v| v.abs() < a));
        assert!(params["d.b"].data().iter().all(|&v| v == 0.0));
        assert!(params["l.b_f"].data().iter().all(|&v| v == 1.0));
        assert!(params["l.b_i"].data().iter().all(|&v| v == 0.0));
        // Distinct draws, not degenerate.
        let w = params["d.w"].data();
        assert!(w.iter().any(|&v| v > 0.2 * a) && w.iter().any(|&v| v < -0.2 * a));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut params = ParamMap::new();
        init_dense(&mut params, "layer", 7, 3, &mut rng);
        init_lstm(&mut params, "rnn", 5, 6, &mut rng);
        // Optimizer state with awkward values (subnormals, negatives, exact halves).
        let mut opt_v = ParamMap::new();
        opt_v.insert("layer.w".into(), Tensor::new(vec![2], vec![f64::MIN_POSITIVE / 4.0, 0.5]));
        opt_v.insert("rnn.wx_i".into(), Tensor::new(vec![3], vec![-1.0e-300, 1.5, 3.0e222]));
        save_checkpoint(&path, &[("params", &params), ("opt.v", &opt_v)]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, section) in [(&params, "params"), (&opt_v, "opt.v")] {
            let got = &loaded[section];
            assert_eq!(got.len(), orig.len());
            for (name, t) in orig.iter() {
                let lt = &got[name];
                assert_eq!(lt.shape(), t.shape());
                for (a, b) in lt.data().iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{name} not bit-exact");
                }
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DanError::Checkpoint(_))));
    }

    #[test]
    fn l2_penalty_sums_only_selected_parameters() {
        let params = ParamMap::from([
            ("conv1.w".to_string(), Tensor::new(vec![2], vec![3.0, 4.0])),
            ("head.w".to_string(), Tensor::new(vec![1], vec![100.0])),
        ]);
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let pen = l2_penalty(&mut tape, &ids, 0.01, |n| n.starts_with("conv")).unwrap();
        assert_abs_diff_eq!(tape.value(pen).item(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn dense_broadcasts_bias_across_batch() {
        let mut params = ParamMap::new();
        params.insert("d.w".into(), Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        params.insert("d.b".into(), Tensor::new(vec![3], vec![10.0, 20.0, 30.0]));
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = dense(&mut tape, &ids, "d", x).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 30.0, 13.0, 24.0, 30.0]);
    }
}

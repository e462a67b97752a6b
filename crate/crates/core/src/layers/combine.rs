//! Triple combiners: map `(e_h, e_r, e_t)` rows to one node feature row.

use std::fmt;
use std::str::FromStr;

use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Axis, Tape, Tensor, TensorError, Var};

use super::{xavier, LayerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CombinerKind {
    BiLstm,
    Concat,
}

impl fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombinerKind::BiLstm => "bilstm",
            CombinerKind::Concat => "concat",
        })
    }
}

impl FromStr for CombinerKind {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bilstm" | "bi-lstm" | "lstm" => Ok(CombinerKind::BiLstm),
            "concat" | "concatenation" => Ok(CombinerKind::Concat),
            _ => Err(LayerError::UnknownKind(s.to_owned())),
        }
    }
}

/// One LSTM direction. Gate columns are laid out `[input | forget | output |
/// candidate]`, each `hidden` wide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmDirection {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            input_weight: store.add(format!("{name}.input_weight"), xavier(rng, input, 4 * hidden)),
            hidden_weight: store.add(format!("{name}.hidden_weight"), xavier(rng, hidden, 4 * hidden)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, 4 * hidden).trainable()),
        }
    }

    /// Final hidden state after running over `seq` from a zero state.
    pub fn run(&self, tape: &mut Tape, params: &Binding, hidden: usize, seq: &[Var]) -> Result<Var, TensorError> {
        let w = params.var(self.input_weight);
        let u = params.var(self.hidden_weight);
        let b = params.var(self.bias);
        let mut state: Option<(Var, Var)> = None;
        for &x in seq {
            let mut z = tape.matmul(x, w)?;
            if let Some((h, _)) = state {
                let hz = tape.matmul(h, u)?;
                z = tape.add(z, hz)?;
            }
            z = tape.add(z, b)?;
            let gi = tape.slice(z, Axis::Cols, 0, hidden)?;
            let gi = tape.sigmoid(gi);
            let go = tape.slice(z, Axis::Cols, 2 * hidden, hidden)?;
            let go = tape.sigmoid(go);
            let gg = tape.slice(z, Axis::Cols, 3 * hidden, hidden)?;
            let gg = tape.tanh(gg);
            let mut c = tape.mul(gi, gg)?;
            if let Some((_, c_prev)) = state {
                let gf = tape.slice(z, Axis::Cols, hidden, hidden)?;
                let gf = tape.sigmoid(gf);
                let kept = tape.mul(gf, c_prev)?;
                c = tape.add(kept, c)?;
            }
            let tc = tape.tanh(c);
            let h = tape.mul(go, tc)?;
            state = Some((h, c));
        }
        Ok(state.expect("non-empty sequence").0)
    }
}

/// Bidirectional LSTM over `(e_h, e_r, e_t)`; output is the concatenation of
/// both directions' final hidden states, `width` wide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    width: usize,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        assert!(width >= 2 && width.is_multiple_of(2), "bidirectional width must be even");
        let hidden = width / 2;
        Self {
            forward: LstmDirection::new(store, &format!("{name}.fwd"), width, hidden, rng),
            backward: LstmDirection::new(store, &format!("{name}.bwd"), width, hidden, rng),
            width,
        }
    }

    pub fn hidden(&self) -> usize {
        self.width / 2
    }

    pub fn encode(&self, tape: &mut Tape, params: &Binding, [h, r, t]: [Var; 3]) -> Result<Var, TensorError> {
        let fwd = self.forward.run(tape, params, self.hidden(), &[h, r, t])?;
        let bwd = self.backward.run(tape, params, self.hidden(), &[t, r, h])?;
        tape.concat(&[fwd, bwd], Axis::Cols)
    }
}

/// `[e_h ‖ e_r ‖ e_t]·P` with `P` of shape `3f×f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatCombiner {
    pub projection: ParamId,
}

impl ConcatCombiner {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            projection: store.add(format!("{name}.projection"), xavier(rng, 3 * width, width)),
        }
    }

    pub fn encode(&self, tape: &mut Tape, params: &Binding, parts: [Var; 3]) -> Result<Var, TensorError> {
        let x = tape.concat(&parts, Axis::Cols)?;
        tape.matmul(x, params.var(self.projection))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Combiner {
    BiLstm(BiLstm),
    Concat(ConcatCombiner),
}

impl Combiner {
    pub fn new(store: &mut ParamStore, name: &str, kind: CombinerKind, width: usize, rng: &mut Rng) -> Self {
        match kind {
            CombinerKind::BiLstm => Combiner::BiLstm(BiLstm::new(store, name, width, rng)),
            CombinerKind::Concat => Combiner::Concat(ConcatCombiner::new(store, name, width, rng)),
        }
    }

    pub fn kind(&self) -> CombinerKind {
        match self {
            Combiner::BiLstm(_) => CombinerKind::BiLstm,
            Combiner::Concat(_) => CombinerKind::Concat,
        }
    }

    /// Row-wise combination of three equally shaped `n×f` inputs.
    pub fn encode(&self, tape: &mut Tape, params: &Binding, parts: [Var; 3]) -> Result<Var, TensorError> {
        let s = tape.shape(parts[0]);
        for &p in &parts[1..] {
            if tape.shape(p) != s {
                return Err(TensorError::ShapeMismatch {
                    op: "combine",
                    left: vec![s.0, s.1],
                    right: vec![tape.shape(p).0, tape.shape(p).1],
                });
            }
        }
        match self {
            Combiner::BiLstm(m) => m.encode(tape, params, parts),
            Combiner::Concat(m) => m.encode(tape, params, parts),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Combiner::BiLstm(m) => [m.forward, m.backward]
                .iter()
                .flat_map(|d| [d.input_weight, d.hidden_weight, d.bias])
                .collect(),
            Combiner::Concat(m) => vec![m.projection],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rows(tape: &mut Tape, n: usize, f: usize, seed: u64) -> Var {
        let data = (0..n * f).map(|i| ((i as u64 * 31 + seed * 17) % 23) as f64 / 23.0 - 0.5).collect();
        tape.constant(n, f, data).unwrap()
    }

    #[test]
    fn zero_lstm_gives_zero() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, rng::streams::PARAMS);
        let m = BiLstm::new(&mut store, "gamma", 4, &mut r);
        store.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let z = tape.constant(2, 4, vec![0.0; 8]).unwrap();
        let out = m.encode(&mut tape, &b, [z, z, z]).unwrap();
        assert_eq!(tape.shape(out), (2, 4));
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reversal_swaps_halves() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(5, rng::streams::PARAMS);
        let m = BiLstm::new(&mut store, "gamma", 6, &mut r);
        let swapped = BiLstm {
            forward: m.backward,
            backward: m.forward,
            width: 6,
        };
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let (h, rel, t) = (rows(&mut tape, 3, 6, 1), rows(&mut tape, 3, 6, 2), rows(&mut tape, 3, 6, 3));
        let a = m.encode(&mut tape, &b, [h, rel, t]).unwrap();
        let s = swapped.encode(&mut tape, &b, [t, rel, h]).unwrap();
        let (a, s) = (tape.value(a).to_vec(), tape.value(s).to_vec());
        for i in 0..3 {
            assert_eq!(a[i * 6..i * 6 + 3], s[i * 6 + 3..i * 6 + 6]);
            assert_eq!(a[i * 6 + 3..i * 6 + 6], s[i * 6..i * 6 + 3]);
        }
    }

    #[test]
    fn identity_block_projection_selects_head() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, rng::streams::PARAMS);
        let m = ConcatCombiner::new(&mut store, "gamma", 3, &mut r);
        let p = store.get_mut(m.projection).data_mut();
        p.fill(0.0);
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let (h, rel, t) = (rows(&mut tape, 2, 3, 1), rows(&mut tape, 2, 3, 2), rows(&mut tape, 2, 3, 3));
        let out = m.encode(&mut tape, &b, [h, rel, t]).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_projection_gives_zero() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, rng::streams::PARAMS);
        let m = Combiner::new(&mut store, "gamma", CombinerKind::Concat, 3, &mut r);
        store.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let x = rows(&mut tape, 2, 3, 4);
        let out = m.encode(&mut tape, &b, [x, x, x]).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, rng::streams::PARAMS);
        let m = Combiner::new(&mut store, "gamma", CombinerKind::BiLstm, 4, &mut r);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let x = rows(&mut tape, 2, 4, 1);
        let y = rows(&mut tape, 3, 4, 1);
        assert!(m.encode(&mut tape, &b, [x, y, x]).is_err());
    }
}

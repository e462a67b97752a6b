//! Central finite-difference checks of every backward rule and of the
//! composite expressions built from them.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::kg::KnowledgeGraph;
use crate::layers::{Activation, BiLstm, ConcatCombiner, GnnStack, LayerError, MpGraph, MpKind};
use crate::leim::{Discriminator, EdgeBatch, LeimError, MiEstimator};
use crate::params::{Binding, ParamStore};
use crate::pipeline::{train::batch_objective, Model, PipelineError, TrainConfig};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Axis, Fault, Segments, SparsePattern, Tape, Tensor, TensorError, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Pass threshold on the worst relative error of a component.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so vanishing gradients compare
/// absolutely.
pub const FLOOR: f64 = 1e-3;

pub const COMPONENTS: [&str; 5] = ["tensor", "layers", "lstm", "discriminator", "loss"];

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Leim(#[from] LeimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

type Result<T> = std::result::Result<T, GradcheckError>;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error over every trainable entry of `store` and every
/// entry of `inputs`, for the scalar built by `build`.
fn max_error<S, F>(state: &S, store: impl Fn(&mut S) -> &mut ParamStore, inputs: &[Tensor], fault: Option<Fault>, build: F) -> Result<f64>
where
    S: Clone,
    F: Fn(&S, &mut Tape, &Binding, &[Var]) -> Result<Var>,
{
    let eval = |s: &S, inputs: &[Tensor], fault: Option<Fault>| -> Result<(Tape, Binding, Vec<Var>, Var)> {
        let mut s = s.clone();
        let mut tape = Tape::with_fault(fault);
        let params = store(&mut s).bind(&mut tape)?;
        let vars = inputs.iter().map(|t| tape.param(t.rows(), t.cols(), t.data().to_vec())).collect::<std::result::Result<Vec<_>, _>>()?;
        let loss = build(&s, &mut tape, &params, &vars)?;
        Ok((tape, params, vars, loss))
    };
    let value = |s: &S, inputs: &[Tensor]| -> Result<f64> {
        let (tape, _, _, loss) = eval(s, inputs, None)?;
        Ok(tape.scalar_value(loss))
    };

    let (mut tape, params, vars, loss) = eval(state, inputs, fault)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;

    let mut probe = state.clone();
    let names: Vec<String> = store(&mut probe).iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.to_owned()).collect();
    for name in names {
        let id = store(&mut probe).find(&name).expect("registered");
        let analytic = tape.grad(params.var(id)).map(<[f64]>::to_vec).unwrap_or_default();
        let len = store(&mut probe).get(id).data().len();
        for i in 0..len {
            let orig = store(&mut probe).get(id).data()[i];
            store(&mut probe).get_mut(id).data_mut()[i] = orig + STEP;
            let up = value(&probe, inputs)?;
            store(&mut probe).get_mut(id).data_mut()[i] = orig - STEP;
            let down = value(&probe, inputs)?;
            store(&mut probe).get_mut(id).data_mut()[i] = orig;
            let a = analytic.get(i).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
        }
    }
    let mut shifted = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_default();
        for i in 0..inputs[k].data().len() {
            let orig = inputs[k].data()[i];
            shifted[k].data_mut()[i] = orig + STEP;
            let up = value(state, &shifted)?;
            shifted[k].data_mut()[i] = orig - STEP;
            let down = value(state, &shifted)?;
            shifted[k].data_mut()[i] = orig;
            let a = analytic.get(i).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).expect("consistent shape")
}

fn positive(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.5..2.0)).collect()).expect("consistent shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, so no entry's gradient cancels by
/// symmetry.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let mut rng = rng::substream(seed, streams::GRADCHECK, 1_000);
    let w = tape.constant(r, c, (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub component: &'static str,
    pub case: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    /// Worst case of a component.
    pub fn worst(&self, component: &str) -> Option<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| c.component == component)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>6} {:>12}  worst case", "component", "cases", "max_rel_err")?;
        for comp in COMPONENTS {
            let n = self.cases.iter().filter(|c| c.component == comp).count();
            if let Some(w) = self.worst(comp) {
                let status = if w.max_rel_error < TOLERANCE { "ok" } else { "FAIL" };
                writeln!(f, "{comp:<14} {n:>6} {:>12.3e}  {} ({status})", w.max_rel_error, w.case)?;
            }
        }
        writeln!(f, "result={}", if self.passed() { "pass" } else { "fail" })
    }
}

struct Suite {
    seed: u64,
    fault: Option<Fault>,
    cases: Vec<CaseResult>,
    counter: u64,
}

impl Suite {
    fn rng(&mut self) -> Rng {
        self.counter += 1;
        rng::substream(self.seed, streams::GRADCHECK, self.counter)
    }

    fn push(&mut self, component: &'static str, case: impl Into<String>, err: f64) {
        self.cases.push(CaseResult {
            component,
            case: case.into(),
            max_rel_error: err,
        });
    }

    /// A primitive on plain inputs.
    fn primitive<F>(&mut self, case: &str, inputs: Vec<Tensor>, build: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError>,
    {
        let seed = self.seed;
        let err = max_error(&ParamStore::new(), |s| s, &inputs, self.fault, |_, tape, _, v| {
            let out = build(tape, v)?;
            project(tape, out, seed)
        })?;
        self.push("tensor", case, err);
        Ok(())
    }

    fn tensor_cases(&mut self) -> Result<()> {
        let mut r = self.rng();
        let a = normal(&mut r, 3, 4);
        let b = normal(&mut r, 3, 4);
        let m = normal(&mut r, 4, 2);
        let row = normal(&mut r, 1, 4);
        let col = normal(&mut r, 3, 1);
        let pos = positive(&mut r, 3, 4);
        self.primitive("matmul", vec![a.clone(), m], |t, v| t.matmul(v[0], v[1]))?;
        self.primitive("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
        self.primitive("add_row_broadcast", vec![a.clone(), row.clone()], |t, v| t.add(v[0], v[1]))?;
        self.primitive("add_col_broadcast", vec![a.clone(), col.clone()], |t, v| t.add(v[0], v[1]))?;
        self.primitive("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
        self.primitive("mul_row_broadcast", vec![a.clone(), row], |t, v| t.mul(v[0], v[1]))?;
        self.primitive("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
        self.primitive("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -2.5)))?;
        self.primitive("concat_rows", vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], Axis::Rows))?;
        self.primitive("concat_cols", vec![a.clone(), col], |t, v| t.concat(&[v[0], v[1]], Axis::Cols))?;
        self.primitive("slice", vec![a.clone()], |t, v| t.slice(v[0], Axis::Cols, 1, 2))?;
        self.primitive("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1]))?;
        self.primitive("scatter_add_rows", vec![a.clone()], |t, v| t.scatter_add_rows(v[0], vec![1, 1, 0], 2))?;
        self.primitive("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0])))?;
        self.primitive("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
        self.primitive("tanh", vec![a.clone()], |t, v| Ok(t.tanh(v[0])))?;
        self.primitive("exp", vec![a.clone()], |t, v| Ok(t.exp(v[0])))?;
        self.primitive("log", vec![pos], |t, v| Ok(t.log(v[0])))?;
        self.primitive("softplus", vec![a.clone()], |t, v| Ok(t.softplus(v[0])))?;
        self.primitive("log_sigmoid", vec![a.clone()], |t, v| Ok(t.log_sigmoid(v[0])))?;
        self.primitive("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0])))?;
        self.primitive("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0])))?;
        let seg = Arc::new(Segments::from_ids(&[0, 0, 1, 1, 1, 2], 3)?);
        let logits = normal(&mut r, 6, 1);
        self.primitive("segment_softmax", vec![logits], move |t, v| t.segment_softmax(v[0], Arc::clone(&seg)))?;
        let pattern = Arc::new(SparsePattern::new(3, 3, vec![0, 0, 1, 2, 2], vec![0, 2, 1, 0, 2])?);
        let weights = normal(&mut r, 5, 1);
        let x = normal(&mut r, 3, 4);
        self.primitive("spmm", vec![weights, x], move |t, v| t.spmm(v[0], v[1], Arc::clone(&pattern)))?;
        Ok(())
    }

    fn layer_cases(&mut self) -> Result<()> {
        let graph = MpGraph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4), (0, 5)]);
        for kind in MpKind::ALL {
            let mut r = self.rng();
            let mut store = ParamStore::new();
            let stack = GnnStack::new(&mut store, "psi", kind, 2, 3, Activation::Relu, &mut r);
            let x = normal(&mut r, 6, 3);
            let seed = self.seed;
            let err = max_error(&store, |s| s, &[x], self.fault, |_, tape, params, v| {
                let out = stack.forward(tape, params, &graph, v[0])?;
                project(tape, out, seed)
            })?;
            self.push("layers", kind.name(), err);
        }
        Ok(())
    }

    fn combiner_cases(&mut self) -> Result<()> {
        let f = 4;
        let mut r = self.rng();
        let parts: Vec<Tensor> = (0..3).map(|_| normal(&mut r, 2, f)).collect();
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "gamma", f, &mut r);
        // Non-zero biases so their gradients are exercised at a generic point.
        for t in store.tensors_mut() {
            if t.data().iter().all(|&x| x == 0.0) {
                t.data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
            }
        }
        let seed = self.seed;
        let err = max_error(&store, |s| s, &parts, self.fault, |_, tape, params, v| {
            let out = lstm.encode(tape, params, [v[0], v[1], v[2]])?;
            project(tape, out, seed)
        })?;
        self.push("lstm", "bilstm", err);

        let mut store = ParamStore::new();
        let concat = ConcatCombiner::new(&mut store, "gamma", f, &mut r);
        let err = max_error(&store, |s| s, &parts, self.fault, |_, tape, params, v| {
            let out = concat.encode(tape, params, [v[0], v[1], v[2]])?;
            project(tape, out, seed)
        })?;
        self.push("lstm", "concat", err);
        Ok(())
    }

    fn discriminator_cases(&mut self) -> Result<()> {
        let f = 3;
        let mut r = self.rng();
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, "disc", f, &mut r);
        let evidence = normal(&mut r, 6, f);
        let anchors = normal(&mut r, 2, f);
        let mut batch = EdgeBatch::default();
        batch.push_query([(0, 1), (1, 2), (0, 2)], 0);
        batch.push_query([(3, 4), (4, 5)], 1);
        batch.push_query([(0, 1)], 1);
        let seed = self.seed;
        let err = max_error(&store, |s| s, &[evidence, anchors], self.fault, |_, tape, params, v| {
            let out = disc.scores(tape, params, v[0], v[1], &batch)?;
            project(tape, out, seed)
        })?;
        self.push("discriminator", "edge_scores", err);
        Ok(())
    }

    fn loss_cases(&mut self) -> Result<()> {
        // Six triples whose relation network is connected but not complete.
        let kg = KnowledgeGraph::from_named([
            ("a", "r", "b"),
            ("b", "s", "c"),
            ("c", "r", "d"),
            ("d", "s", "e"),
            ("a", "t", "c"),
            ("e", "t", "f"),
        ]);
        for estimator in [MiEstimator::Jsd, MiEstimator::InfoNce] {
            let cfg = TrainConfig {
                dim: 4,
                gnn: MpKind::Gat,
                estimator,
                seed: self.seed,
                ..TrainConfig::default()
            };
            let model = Model::for_graph(cfg, &kg);
            let batch: Vec<usize> = (0..kg.len()).collect();
            let seed = self.seed;
            let err = max_error(&model, |m| &mut m.store, &[], self.fault, |m, tape, params, _| {
                let loss = batch_objective(m, &kg, tape, params, &batch, seed)?;
                Ok(loss)
            })?;
            self.push("loss", format!("{estimator}_end_to_end"), err);
        }
        Ok(())
    }
}

/// Runs every check. `fault` corrupts a backward rule (negative control).
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut suite = Suite {
        seed,
        fault,
        cases: Vec::new(),
        counter: 0,
    };
    suite.tensor_cases()?;
    suite.layer_cases()?;
    suite.combiner_cases()?;
    suite.discriminator_cases()?;
    suite.loss_cases()?;
    Ok(GradcheckReport { cases: suite.cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn square_has_exact_derivative() {
        let x = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(1, 1, x.data().to_vec()).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[6.0]);
    }

    #[test]
    fn primitives_within_tight_tolerance() {
        let mut suite = Suite {
            seed: 0,
            fault: None,
            cases: Vec::new(),
            counter: 0,
        };
        suite.tensor_cases().unwrap();
        for c in &suite.cases {
            assert!(c.max_rel_error < 1e-6, "{}: {}", c.case, c.max_rel_error);
        }
    }

    #[test]
    fn fault_is_detected() {
        let mut suite = Suite {
            seed: 0,
            fault: Some(Fault::ScaleMatmulBackward(0.5)),
            cases: Vec::new(),
            counter: 0,
        };
        suite.tensor_cases().unwrap();
        let matmul = suite.cases.iter().find(|c| c.case == "matmul").unwrap();
        assert!(matmul.max_rel_error > 0.1);
    }
}

//! Pairwise ranking objective and full-batch gradient descent.
//!
//! The loss over a set of ordered pairs `(A, B)`, `A` preferred, is
//!
//! ```text
//! L(W, b) = 1/2 ||W||^2 + C_p / |I| * sum l(y_A - y_B),   l(t) = max(0, 1 - t)^2
//! ```
//!
//! with biases left out of the regularizer. Both shapes of a pair run through
//! the same weights (two copies of one network); the data-term gradient is
//! `C_p/|I| * l'(y_A - y_B) * (dy_A/dtheta - dy_B/dtheta)`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::net::{self, ArchitectureSpec, Gradient, NetError, NetworkParams};
use crate::voxel::{InputVector, VoxelGrid};

/// Learning rates tried during model selection.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// Shapes are split into at most this many chunks for the gradient reduction;
/// the chunking does not depend on the thread count, so sums are reproducible.
const REDUCTION_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("pair set is empty")]
    EmptyPairs,
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },
    #[error("every learning-rate candidate diverged")]
    AllDiverged,
    #[error("unknown shape {0:?}")]
    UnknownShape(String),
    #[error("pair compares shape {0:?} with itself")]
    SelfPair(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the data term.
    pub c_p: f64,
    /// Learning rate.
    pub alpha: f64,
    /// Number of full-batch passes.
    pub iterations: usize,
    pub seed: u64,
    /// Minimum score gap, as a fraction of the score range, for a validation
    /// pair to count towards filtered accuracy.
    pub filter_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c_p: 100.0,
            alpha: 1e-4,
            iterations: 10,
            seed: 0,
            filter_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if !(self.c_p >= 0.0 && self.c_p.is_finite()) {
            return bad("C_p must be finite and >= 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(0.0..1.0).contains(&self.filter_fraction) {
            return bad("filter_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Ordered preference pairs over a table of shapes.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    ids: Vec<String>,
    inputs: Vec<InputVector>,
    index: HashMap<String, usize>,
    /// `(preferred, other)` indices into the shape table.
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a shape, returning its index. Re-adding an id returns the
    /// existing index.
    pub fn add_shape(&mut self, id: &str, input: InputVector) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.inputs.push(input);
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn add_grid(&mut self, grid: &VoxelGrid) -> usize {
        if let Some(&i) = self.index.get(grid.shape_id()) {
            return i;
        }
        self.add_shape(grid.shape_id(), grid.to_input())
    }

    pub fn push_pair(&mut self, preferred: usize, other: usize) {
        assert!(preferred < self.ids.len() && other < self.ids.len(), "shape index out of range");
        self.pairs.push((preferred, other));
    }

    /// Adds a pair by shape id; both shapes must already be registered.
    pub fn push_pair_ids(&mut self, preferred: &str, other: &str) -> Result<(), TrainError> {
        if preferred == other {
            return Err(TrainError::SelfPair(preferred.to_string()));
        }
        let a = *self.index.get(preferred).ok_or_else(|| TrainError::UnknownShape(preferred.to_string()))?;
        let b = *self.index.get(other).ok_or_else(|| TrainError::UnknownShape(other.to_string()))?;
        self.pairs.push((a, b));
        Ok(())
    }

    /// Builds a set from `(preferred id, other id)` pairs, taking shapes from `grids`.
    pub fn from_id_pairs<'a>(
        grids: &BTreeMap<String, VoxelGrid>,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, TrainError> {
        let mut set = PairSet::new();
        for (a, b) in pairs {
            for id in [a, b] {
                let g = grids.get(id).ok_or_else(|| TrainError::UnknownShape(id.to_string()))?;
                set.add_grid(g);
            }
            set.push_pair_ids(a, b)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn shape_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn input(&self, shape: usize) -> &InputVector {
        &self.inputs[shape]
    }

    /// The first `n` pairs, sharing the shape table.
    pub fn prefix(&self, n: usize) -> PairSet {
        PairSet {
            ids: self.ids.clone(),
            inputs: self.inputs.clone(),
            index: self.index.clone(),
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }

    /// Shapes referenced by at least one pair, in order of first appearance.
    fn used_shapes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.ids.len()];
        let mut out = Vec::new();
        for &(a, b) in &self.pairs {
            for s in [a, b] {
                if !seen[s] {
                    seen[s] = true;
                    out.push(s);
                }
            }
        }
        out
    }

    /// Scores of every shape in the table (`NaN` for shapes no pair uses).
    pub fn scores(&self, params: &NetworkParams) -> Result<Vec<f64>, NetError> {
        let used = self.used_shapes();
        let ys: Vec<f64> = used
            .par_iter()
            .map(|&s| net::forward(params, &self.inputs[s]).map(|t| t.output()))
            .collect::<Result<_, _>>()?;
        let mut out = vec![f64::NAN; self.ids.len()];
        for (s, y) in used.into_iter().zip(ys) {
            out[s] = y;
        }
        Ok(out)
    }
}

/// `max(0, 1 - t)^2`.
pub fn hinge_sq(t: f64) -> f64 {
    let m = (1.0 - t).max(0.0);
    m * m
}

/// Derivative of [`hinge_sq`]: `-2 max(0, 1 - t)`.
pub fn hinge_sq_deriv(t: f64) -> f64 {
    -2.0 * (1.0 - t).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `C_p/|I| * sum l(y_A - y_B)`.
    pub data: f64,
    /// `1/2 ||W||^2`.
    pub reg: f64,
}

fn loss_from_scores(params: &NetworkParams, set: &PairSet, scores: &[f64], c_p: f64) -> LossBreakdown {
    let sum: f64 = set.pairs.iter().map(|&(a, b)| hinge_sq(scores[a] - scores[b])).sum();
    let data = c_p / set.len() as f64 * sum;
    let reg = 0.5 * params.weight_norm_sq();
    LossBreakdown {
        total: reg + data,
        data,
        reg,
    }
}

pub fn total_loss(params: &NetworkParams, set: &PairSet, c_p: f64) -> Result<LossBreakdown, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let scores = set.scores(params)?;
    Ok(loss_from_scores(params, set, &scores, c_p))
}

/// Data-term gradient contributed by one pair (the regularizer is added once
/// per batch, see [`batch_gradient`]).
pub fn pair_gradient(
    params: &NetworkParams,
    x_a: &InputVector,
    x_b: &InputVector,
    c_p: f64,
    n_pairs: usize,
) -> Result<Gradient, TrainError> {
    let mut grad = Gradient::zeros(params.spec());
    let ta = net::forward(params, x_a)?;
    let tb = net::forward(params, x_b)?;
    let coeff = c_p / n_pairs as f64 * hinge_sq_deriv(ta.output() - tb.output());
    if coeff != 0.0 {
        net::accumulate_output_gradient(params, &ta, coeff, &mut grad)?;
        net::accumulate_output_gradient(params, &tb, -coeff, &mut grad)?;
    }
    Ok(grad)
}

/// Full-batch gradient of the loss, plus the loss at `params`.
///
/// Pair terms are folded into one coefficient per shape, in pair order, so
/// each shape is backpropagated once however many pairs mention it.
pub fn batch_gradient(
    params: &NetworkParams,
    set: &PairSet,
    c_p: f64,
) -> Result<(Gradient, LossBreakdown), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let scores = set.scores(params)?;
    let loss = loss_from_scores(params, set, &scores, c_p);

    let scale = c_p / set.len() as f64;
    let mut coeff = vec![0.0; set.ids.len()];
    for &(a, b) in &set.pairs {
        let d = scale * hinge_sq_deriv(scores[a] - scores[b]);
        coeff[a] += d;
        coeff[b] -= d;
    }
    let active: Vec<usize> = set.used_shapes().into_iter().filter(|&s| coeff[s] != 0.0).collect();

    let chunk = active.len().div_ceil(REDUCTION_CHUNKS).max(1);
    let partials: Vec<Gradient> = active
        .par_chunks(chunk)
        .map(|shapes| {
            let mut g = Gradient::zeros(params.spec());
            for &s in shapes {
                let trace = net::forward(params, &set.inputs[s])?;
                net::accumulate_output_gradient(params, &trace, coeff[s], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_, NetError>>()?;

    let mut grad = Gradient::zeros(params.spec());
    for p in &partials {
        grad.add_assign(p);
    }
    // d/dW of 1/2 ||W||^2.
    for (g, p) in grad.layers.iter_mut().zip(params.layers()) {
        g.weights.iter_mut().zip(&p.weights).for_each(|(g, w)| *g += w);
    }
    Ok((grad, loss))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Loss terms of the parameters entering this iteration.
    pub loss: LossBreakdown,
    /// Validation accuracy after this iteration's update.
    pub val_full: Option<f64>,
    pub val_filtered: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    /// CSV with header `iteration,total_loss,data_loss,reg_loss,val_acc_full,val_acc_filtered`;
    /// absent accuracies are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["iteration", "total_loss", "data_loss", "reg_loss", "val_acc_full", "val_acc_filtered"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                format!("{}", e.loss.total),
                format!("{}", e.loss.data),
                format!("{}", e.loss.reg),
                opt(e.val_full),
                opt(e.val_filtered),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }
}

/// Batch gradient descent for `config.iterations` passes over all of `train`.
pub fn train(
    mut params: NetworkParams,
    train: &PairSet,
    config: &TrainConfig,
    validation: Option<&PairSet>,
) -> Result<(NetworkParams, TrainHistory), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let mut history = TrainHistory::default();
    for iteration in 1..=config.iterations {
        let (grad, loss) = batch_gradient(&params, train, config.c_p)?;
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(TrainError::Diverged { iteration });
        }
        params.descend(&grad, config.alpha);
        if !params.is_finite() {
            return Err(TrainError::Diverged { iteration });
        }
        let (val_full, val_filtered) = match validation {
            Some(v) if !v.is_empty() => {
                let acc = validation_accuracy(&params, v, config.filter_fraction)?;
                (Some(acc.full), acc.filtered)
            }
            _ => (None, None),
        };
        history.entries.push(HistoryEntry {
            iteration,
            loss,
            val_full,
            val_filtered,
        });
    }
    Ok((params, history))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Fraction of pairs with `y_A > y_B` strictly.
    pub full: f64,
    /// Accuracy over pairs whose score gap reaches the filter threshold;
    /// `None` when no pair survives.
    pub filtered: Option<f64>,
    pub n_kept: usize,
    pub n_total: usize,
}

/// Validation accuracy on all pairs and on the confident subset.
///
/// The filter drops pairs with `|y_A - y_B| < filter_fraction * range`, where
/// `range` spans the scores of every shape in the validation pairs. A positive
/// filter also drops exact ties.
pub fn validation_accuracy(
    params: &NetworkParams,
    set: &PairSet,
    filter_fraction: f64,
) -> Result<Accuracy, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let scores = set.scores(params)?;
    Ok(accuracy_from_scores(set, &scores, filter_fraction))
}

pub(crate) fn accuracy_from_scores(set: &PairSet, scores: &[f64], filter_fraction: f64) -> Accuracy {
    let used: Vec<f64> = scores.iter().copied().filter(|s| !s.is_nan()).collect();
    let lo = used.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = used.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = filter_fraction * (hi - lo);

    let mut correct = 0usize;
    let mut kept = 0usize;
    let mut kept_correct = 0usize;
    for &(a, b) in &set.pairs {
        let gap = scores[a] - scores[b];
        let ok = gap > 0.0;
        correct += ok as usize;
        let keep = gap.abs() >= threshold && !(filter_fraction > 0.0 && gap == 0.0);
        if keep {
            kept += 1;
            kept_correct += ok as usize;
        }
    }
    Accuracy {
        full: correct as f64 / set.len() as f64,
        filtered: (kept > 0).then(|| kept_correct as f64 / kept as f64),
        n_kept: kept,
        n_total: set.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrCandidate {
    pub alpha: f64,
    /// `None` when training with this rate diverged.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSelection {
    pub best: f64,
    pub best_params: NetworkParams,
    pub candidates: Vec<LrCandidate>,
}

/// Trains one model per learning rate from the same initialization and keeps
/// the one with the highest full validation accuracy (ties go to the smaller
/// rate). Diverging rates are skipped.
pub fn select_learning_rate(
    spec: &ArchitectureSpec,
    train_set: &PairSet,
    validation: &PairSet,
    alphas: &[f64],
    config: &TrainConfig,
) -> Result<LrSelection, TrainError> {
    if alphas.is_empty() {
        return Err(TrainError::BadConfig("learning-rate grid is empty".into()));
    }
    let init = net::init_params(spec, config.seed);
    let mut candidates = Vec::new();
    let mut best: Option<(f64, f64, NetworkParams)> = None;
    for &alpha in alphas {
        let cfg = TrainConfig { alpha, ..config.clone() };
        let accuracy = match train(init.clone(), train_set, &cfg, None) {
            Ok((params, _)) => {
                let acc = validation_accuracy(&params, validation, cfg.filter_fraction)?.full;
                let better = match &best {
                    None => true,
                    Some((ba, bacc, _)) => acc > *bacc || (acc == *bacc && alpha < *ba),
                };
                if better {
                    best = Some((alpha, acc, params));
                }
                Some(acc)
            }
            Err(TrainError::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        candidates.push(LrCandidate { alpha, accuracy });
    }
    let (best, _, best_params) = best.ok_or(TrainError::AllDiverged)?;
    Ok(LrSelection {
        best,
        best_params,
        candidates,
    })
}

/// Random binary inputs and distinct-shape pairs for gradient checking.
pub fn random_pair_set(spec: &ArchitectureSpec, n_pairs: usize, seed: u64) -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_shapes = (n_pairs + 1).max(2);
    let mut set = PairSet::new();
    for s in 0..n_shapes {
        let input = InputVector((0..spec.input_len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect());
        set.add_shape(&format!("r{s}"), input);
    }
    let mut order: Vec<usize> = (0..n_shapes).collect();
    for _ in 0..n_pairs {
        order.shuffle(&mut rng);
        set.push_pair(order[0], order[1]);
    }
    set
}

/// Scale applied to freshly initialised parameters before a gradient check.
///
/// At the N(0, 0.1^2) init every unit is nearly linear and many bias
/// gradients are differences of almost equal A/B contributions (|g| ~ 1e-6),
/// which central differences at step 1e-5 cannot resolve in f64. Tripling
/// the weights moves the units into their nonlinear range.
pub const GRADCHECK_SCALE: f64 = 3.0;

/// `hinge_sq(up) - hinge_sq(down)` without subtracting two nearly equal squares.
fn hinge_sq_diff(up: f64, down: f64) -> f64 {
    if up < 1.0 && down < 1.0 {
        (down - up) * (2.0 - up - down)
    } else {
        hinge_sq(up) - hinge_sq(down)
    }
}

/// Max relative error `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` between the
/// analytic gradient and central differences of [`total_loss`] with `C_p = 100`.
///
/// Parameters are `init_params(spec, seed)` scaled by [`GRADCHECK_SCALE`].
/// The loss difference is accumulated per pair (and the regulariser through
/// `||W||^2`) so the numerator is never a difference of two large totals.
pub fn gradient_check(spec: &ArchitectureSpec, seed: u64, n_pairs: usize, epsilon: f64) -> Result<f64, TrainError> {
    gradient_check_with(spec, seed, n_pairs, epsilon, |p, s, c| Ok(batch_gradient(p, s, c)?.0))
}

/// [`gradient_check`] against an arbitrary analytic gradient.
pub fn gradient_check_with<F>(
    spec: &ArchitectureSpec,
    seed: u64,
    n_pairs: usize,
    epsilon: f64,
    analytic: F,
) -> Result<f64, TrainError>
where
    F: Fn(&NetworkParams, &PairSet, f64) -> Result<Gradient, TrainError>,
{
    const C_P: f64 = 100.0;
    let mut params = net::init_params(spec, seed);
    params.values_mut().for_each(|v| *v *= GRADCHECK_SCALE);
    let set = random_pair_set(spec, n_pairs, seed);
    let grad: Vec<f64> = analytic(&params, &set, C_P)?.values().collect();

    let mut probe = params.clone();
    let mut max_err: f64 = 0.0;
    for (i, g_a) in grad.iter().enumerate() {
        let orig = *probe.value_mut(i);
        *probe.value_mut(i) = orig + epsilon;
        let (s_up, r_up) = (set.scores(&probe)?, probe.weight_norm_sq());
        *probe.value_mut(i) = orig - epsilon;
        let (s_down, r_down) = (set.scores(&probe)?, probe.weight_norm_sq());
        *probe.value_mut(i) = orig;
        let data: f64 = set.pairs().iter().map(|&(a, b)| hinge_sq_diff(s_up[a] - s_up[b], s_down[a] - s_down[b])).sum();
        let diff = C_P / set.len() as f64 * data + 0.5 * (r_up - r_down);
        let g_n = diff / (2.0 * epsilon);
        let err = (g_a - g_n).abs() / (g_a.abs() + g_n.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

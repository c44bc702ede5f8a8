//! Object-centric transformation learning.
//!
//! A small network maps a relaxed feature patch to a probability
//! distribution over displacement offsets inside an `H_w x W_w` window. It is
//! trained with cross-entropy against one-hot labels derived from object
//! velocities.
//!
//! Architecture: the patch (`H_s x W_s x C`) is flattened and passed through
//! three dense layers with ReLU between them and a softmax at the end. A
//! valid convolution whose kernel covers the whole patch is exactly the first
//! dense layer, and the two following 1x1 convolutions are the other two.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridCoord, GridSpec, WindowShape};
use crate::sample::{build_significant_set, SamplingConfig};
use crate::sim::{ObjectState, SimFrame};

/// Dense layer `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoNetParams {
    pub layers: [Dense; 3],
    pub window: WindowShape,
}

impl GeoNetParams {
    pub fn zeros(input: usize, hidden: usize, window: WindowShape) -> Self {
        GeoNetParams {
            layers: [
                Dense::zeros(input, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, window.cells()),
            ],
            window,
        }
    }

    /// Scaled-uniform weights `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(input: usize, hidden: usize, window: WindowShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeoNetParams {
            layers: [
                Dense::glorot(input, hidden, &mut rng),
                Dense::glorot(hidden, hidden, &mut rng),
                Dense::glorot(hidden, window.cells(), &mut rng),
            ],
            window,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs
    }

    pub fn zeros_like(&self) -> Self {
        GeoNetParams::zeros(self.input_dim(), self.hidden(), self.window)
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Checks that the network consumes `input` values and predicts over
    /// `window`.
    pub fn check_wiring(&self, input: usize, window: WindowShape) -> Result<()> {
        if self.input_dim() != input {
            return Err(Error::Mismatch(format!(
                "network expects {} inputs, patches provide {input}",
                self.input_dim()
            )));
        }
        if self.window != window || self.layers[2].outputs != window.cells() {
            return Err(Error::Mismatch(format!(
                "network window {}x{} differs from configured {}x{}",
                self.window.height, self.window.width, window.height, window.width
            )));
        }
        Ok(())
    }
}

/// Probabilities over the offset window, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformDistribution {
    pub probs: Vec<f64>,
}

impl TransformDistribution {
    pub fn uniform(cells: usize) -> Self {
        TransformDistribution {
            probs: vec![1.0 / cells as f64; cells],
        }
    }

    pub fn one_hot(cells: usize, index: usize) -> Self {
        let mut probs = vec![0.0; cells];
        probs[index] = 1.0;
        TransformDistribution { probs }
    }

    /// Index of the most likely cell, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformLabel {
    pub cell_index: usize,
    /// The true displacement left the window and was clipped to its edge.
    pub clamped: bool,
}

/// A network input paired with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: TransformLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            steps: 3000,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                format!("{prefix}.learning_rate"),
                "must be > 0",
            ));
        }
        if self.steps < 1 {
            return Err(Error::config(format!("{prefix}.steps"), "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config(
                format!("{prefix}.batch_size"),
                "must be >= 1",
            ));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(
                    format!("{prefix}.optimizer.beta"),
                    "must lie in [0, 1)",
                ));
            }
        }
        Ok(())
    }
}

/// Network shape and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoNetConfig {
    pub window: WindowShape,
    pub hidden: usize,
    /// Samples are assigned to the nearest truth center within this many cells.
    pub assign_radius: f64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for GeoNetConfig {
    fn default() -> Self {
        GeoNetConfig {
            window: WindowShape::square(7),
            hidden: 64,
            assign_radius: 3.0,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl GeoNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate("geonet.window")?;
        if self.hidden < 1 {
            return Err(Error::config("geonet.hidden", "must be >= 1"));
        }
        if !(self.assign_radius.is_finite() && self.assign_radius >= 0.0) {
            return Err(Error::config("geonet.assign_radius", "must be >= 0"));
        }
        self.train.validate("geonet.train")
    }
}

/// Displacement label for a sample at `location`.
///
/// The nearest truth center within `assign_radius` cells supplies the
/// velocity; the offset is `round(v * tau / cell_size)` per axis, clipped
/// componentwise to the window. Unassigned samples get the zero offset.
pub fn make_label(
    location: GridCoord,
    truth: &[ObjectState],
    spec: &GridSpec,
    tau: f64,
    window: WindowShape,
    assign_radius: f64,
) -> TransformLabel {
    let mut best: Option<(f64, &ObjectState)> = None;
    for o in truth {
        let p = o.cell(spec);
        let d = ((p[0] - location.x as f64).powi(2) + (p[1] - location.y as f64).powi(2)).sqrt();
        if d <= assign_radius && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, o));
        }
    }
    let (dx, dy) = match best {
        Some((_, o)) => (
            (o.velocity[0] * tau / spec.cell_size).round() as i64,
            (o.velocity[1] * tau / spec.cell_size).round() as i64,
        ),
        None => (0, 0),
    };
    let hw = window.half_width() as i64;
    let hh = window.half_height() as i64;
    let cx = dx.clamp(-hw, hw);
    let cy = dy.clamp(-hh, hh);
    TransformLabel {
        cell_index: window
            .index_of(cx as i32, cy as i32)
            .expect("clamped offset lies in the window"),
        clamped: cx != dx || cy != dy,
    }
}

/// One example per significant sample of every frame: the patch embedded in
/// the relaxation's bounding window, labeled with the displacement to the
/// next frame.
pub fn build_dataset(
    frames: &[SimFrame],
    sampling: &SamplingConfig,
    cfg: &GeoNetConfig,
) -> Vec<Example> {
    let bounding = sampling.relaxation.bounding();
    let mut out = Vec::new();
    for f in frames {
        let set = build_significant_set(f, sampling);
        for s in &set.samples {
            out.push(Example {
                input: s.patch.to_dense(bounding),
                label: make_label(
                    s.location,
                    &f.truth,
                    f.spec(),
                    f.frame_gap,
                    cfg.window,
                    cfg.assign_radius,
                ),
            });
        }
    }
    out
}

/// Local distribution placed on the full grid: `q` inside the window
/// centered at `r`, zero elsewhere. Row-major over the grid.
pub fn globalize(
    q: &TransformDistribution,
    r: GridCoord,
    window: WindowShape,
    spec: &GridSpec,
) -> Vec<f64> {
    let mut out = vec![0.0; spec.cells()];
    for (i, (dx, dy)) in window.offsets().enumerate() {
        let c = r.offset(dx, dy);
        if spec.contains(c) {
            out[spec.index(c)] = q.probs[i];
        }
    }
    out
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

struct Activations {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    logits: Vec<f64>,
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.max(0.0)).collect()
}

fn activations(params: &GeoNetParams, input: &[f64]) -> Activations {
    assert_eq!(input.len(), params.input_dim(), "network input size");
    let mut z1 = Vec::new();
    params.layers[0].apply(input, &mut z1);
    let a1 = relu(&z1);
    let mut z2 = Vec::new();
    params.layers[1].apply(&a1, &mut z2);
    let a2 = relu(&z2);
    let mut logits = Vec::new();
    params.layers[2].apply(&a2, &mut logits);
    Activations {
        z1,
        a1,
        z2,
        a2,
        logits,
    }
}

/// Distribution over window offsets for one flattened patch.
///
/// Panics if `input` does not match the network; shapes are checked once at
/// wiring time with [`GeoNetParams::check_wiring`].
pub fn forward(params: &GeoNetParams, input: &[f64]) -> TransformDistribution {
    let mut probs = activations(params, input).logits;
    softmax_in_place(&mut probs);
    TransformDistribution { probs }
}

/// `-log softmax(logits)[label]`, computed stably.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

fn accumulate_layer(grad: &mut Dense, delta: &[f64], input: &[f64]) {
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut grad.weight[o * grad.inputs..(o + 1) * grad.inputs];
        for (g, &x) in row.iter_mut().zip(input) {
            *g += d * x;
        }
        grad.bias[o] += d;
    }
}

/// `W^T delta`, masked by the ReLU derivative at `z`.
fn backprop_relu(layer: &Dense, delta: &[f64], z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.inputs];
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
        for (acc, w) in out.iter_mut().zip(row) {
            *acc += w * d;
        }
    }
    for (v, &zi) in out.iter_mut().zip(z) {
        if zi <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its exact gradient. Examples are
/// reduced in batch order.
pub fn loss_and_grad(params: &GeoNetParams, batch: &[Example]) -> (f64, GeoNetParams) {
    assert!(!batch.is_empty(), "loss over an empty batch");
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for ex in batch {
        let act = activations(params, &ex.input);
        let label = ex.label.cell_index;
        loss += cross_entropy(&act.logits, label);

        let mut d3 = act.logits.clone();
        softmax_in_place(&mut d3);
        d3[label] -= 1.0;
        d3.iter_mut().for_each(|v| *v *= scale);

        accumulate_layer(&mut grad.layers[2], &d3, &act.a2);
        let d2 = backprop_relu(&params.layers[2], &d3, &act.z2);
        accumulate_layer(&mut grad.layers[1], &d2, &act.a1);
        let d1 = backprop_relu(&params.layers[1], &d2, &act.z1);
        accumulate_layer(&mut grad.layers[0], &d1, &ex.input);
    }
    (loss * scale, grad)
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(params: &GeoNetParams, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| cross_entropy(&activations(params, &ex.input).logits, ex.label.cell_index))
        .sum::<f64>()
        / batch.len() as f64
}

/// Fraction of examples whose argmax cell equals the label.
pub fn accuracy(params: &GeoNetParams, data: &[Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|ex| forward(params, &ex.input).argmax() == ex.label.cell_index)
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    /// Argmax accuracy on the step's mini-batch.
    pub argmax_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GeoNetParams,
    pub trace: Vec<TrainStep>,
}

/// Mini-batch gradient descent with seeded epoch shuffling.
pub fn train(
    mut params: GeoNetParams,
    dataset: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::config(
            "dataset",
            "training needs at least one example",
        ));
    }
    if let Some(ex) = dataset
        .iter()
        .find(|ex| ex.input.len() != params.input_dim())
    {
        return Err(Error::Mismatch(format!(
            "example has {} inputs, network expects {}",
            ex.input.len(),
            params.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut velocity = params.zeros_like();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grad) = loss_and_grad(&params, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let hits = batch
            .iter()
            .filter(|ex| forward(&params, &ex.input).argmax() == ex.label.cell_index)
            .count();
        trace.push(TrainStep {
            step,
            loss,
            argmax_accuracy: hits as f64 / batch.len() as f64,
        });

        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.values_mut().zip(grad.values()) {
                    *p -= cfg.learning_rate * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, v), g) in params
                    .values_mut()
                    .zip(velocity.values_mut())
                    .zip(grad.values())
                {
                    *v = beta * *v + g;
                    *p -= cfg.learning_rate * *v;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn truth_at(cell: [f64; 2], velocity: [f64; 2], spec: &GridSpec) -> ObjectState {
        let p = spec.cell_to_metric(cell);
        ObjectState {
            id: 0,
            position: p,
            velocity,
            ego_position: p,
            extent: [1, 1],
            signature: vec![1.0],
            observed: true,
        }
    }

    fn random_params(seed: u64, input: usize, hidden: usize, window: WindowShape) -> GeoNetParams {
        let mut p = GeoNetParams::init(input, hidden, window, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn random_batch(seed: u64, n: usize, input: usize, classes: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Example {
                input: (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: TransformLabel {
                    cell_index: rng.gen_range(0..classes),
                    clamped: false,
                },
            })
            .collect()
    }

    #[test]
    fn label_examples() {
        let spec = GridSpec::new(32, 32, 0.5, 1).unwrap();
        let w = WindowShape::square(7);
        let tau = 0.5;
        let loc = GridCoord::new(10, 10);

        let none = make_label(loc, &[], &spec, tau, w, 3.0);
        assert_eq!(
            none,
            TransformLabel {
                cell_index: 24,
                clamped: false
            }
        );

        let v = [2.0 * spec.cell_size / tau, 0.0];
        let two = make_label(loc, &[truth_at([10.0, 10.0], v, &spec)], &spec, tau, w, 3.0);
        assert_eq!(
            two,
            TransformLabel {
                cell_index: 26,
                clamped: false
            }
        );

        let fast = [5.0 * spec.cell_size / tau, 0.0];
        let clipped = make_label(
            loc,
            &[truth_at([10.0, 10.0], fast, &spec)],
            &spec,
            tau,
            w,
            3.0,
        );
        assert_eq!(
            clipped,
            TransformLabel {
                cell_index: 27,
                clamped: true
            }
        );

        // Too far to assign.
        let far = make_label(loc, &[truth_at([14.0, 10.0], v, &spec)], &spec, tau, w, 3.0);
        assert_eq!(far.cell_index, 24);
    }

    #[test]
    fn label_picks_nearest_then_first() {
        let spec = GridSpec::new(32, 32, 1.0, 1).unwrap();
        let w = WindowShape::square(7);
        let loc = GridCoord::new(10, 10);
        let a = truth_at([11.0, 10.0], [1.0, 0.0], &spec);
        let b = truth_at([9.0, 10.0], [0.0, 1.0], &spec);
        let c = truth_at([10.0, 12.0], [-1.0, 0.0], &spec);
        assert_eq!(
            make_label(loc, &[c.clone(), a.clone(), b.clone()], &spec, 1.0, w, 3.0).cell_index,
            25
        );
        assert_eq!(
            make_label(loc, &[b, a, c], &spec, 1.0, w, 3.0).cell_index,
            31
        );
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = GeoNetParams::zeros(9, 8, WindowShape::square(7));
        let q = forward(&p, &[0.3; 9]);
        for v in &q.probs {
            assert_abs_diff_eq!(*v, 1.0 / 49.0, epsilon = 1e-15);
        }
        let batch = random_batch(1, 4, 9, 49);
        let (loss, _) = loss_and_grad(&p, &batch);
        assert_abs_diff_eq!(loss, 49f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 3.8918, epsilon = 1e-4);
    }

    #[test]
    fn hand_set_toy_network() {
        // Window 1x3, one input, hidden width 1: logits = [0, 2, 0] for input 1.
        let mut p = GeoNetParams::zeros(1, 1, WindowShape::new(1, 3).unwrap());
        p.layers[0].weight[0] = 1.0;
        p.layers[1].weight[0] = 1.0;
        p.layers[2].weight = vec![0.0, 2.0, 0.0];
        let q = forward(&p, &[1.0]);
        let e2 = 2f64.exp();
        let z = 2.0 + e2;
        assert_abs_diff_eq!(q.probs[0], 1.0 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(q.probs[1], e2 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(q.probs[0], 0.1065, epsilon = 1e-4);
        assert_abs_diff_eq!(q.probs[1], 0.7870, epsilon = 1e-4);
        assert_eq!(q.argmax(), 1);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let mut p = GeoNetParams::zeros(1, 1, WindowShape::new(1, 3).unwrap());
        p.layers[2].bias = vec![0.0, 50.0, 0.0];
        let ex = Example {
            input: vec![0.0],
            label: TransformLabel {
                cell_index: 1,
                clamped: false,
            },
        };
        let (loss, _) = loss_and_grad(&p, &[ex]);
        assert!(loss < 1e-20);
    }

    #[test]
    fn gradients_match_central_differences() {
        let w = WindowShape::square(3);
        for draw in 0..5u64 {
            let p = random_params(draw, 6, 5, w);
            let batch = random_batch(draw + 100, 3, 6, 9);
            let (_, g) = loss_and_grad(&p, &batch);
            let eps = 1e-5;
            for (i, analytic) in g.values().enumerate() {
                let mut plus = p.clone();
                *plus.values_mut().nth(i).unwrap() += eps;
                let mut minus = p.clone();
                *minus.values_mut().nth(i).unwrap() -= eps;
                let numeric = (mean_loss(&plus, &batch) - mean_loss(&minus, &batch)) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "draw {draw} param {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn hidden_permutation_leaves_output_unchanged() {
        let w = WindowShape::square(3);
        let p = random_params(9, 4, 6, w);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut q = p.clone();
        let h = p.hidden();
        for (new, &old) in perm.iter().enumerate() {
            q.layers[1].weight[new * h..(new + 1) * h]
                .copy_from_slice(&p.layers[1].weight[old * h..(old + 1) * h]);
            q.layers[1].bias[new] = p.layers[1].bias[old];
            for o in 0..w.cells() {
                q.layers[2].weight[o * h + new] = p.layers[2].weight[o * h + old];
            }
        }
        let x = [0.3, -0.7, 1.1, 0.2];
        let (a, b) = (forward(&p, &x), forward(&q, &x));
        for (u, v) in a.probs.iter().zip(&b.probs) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-14);
        }
        let batch = random_batch(4, 3, 4, 9);
        let (_, ga) = loss_and_grad(&p, &batch);
        let (_, gb) = loss_and_grad(&q, &batch);
        for (new, &old) in perm.iter().enumerate() {
            assert_abs_diff_eq!(
                gb.layers[1].bias[new],
                ga.layers[1].bias[old],
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn memorizes_single_example() {
        let w = WindowShape::square(3);
        let p = GeoNetParams::init(4, 8, w, 2);
        let ex = Example {
            input: vec![0.5, -0.2, 0.1, 0.9],
            label: TransformLabel {
                cell_index: 7,
                clamped: false,
            },
        };
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train(p, &[ex], &cfg).unwrap();
        assert!(out.trace.last().unwrap().loss < 0.01);
    }

    #[test]
    fn training_is_deterministic() {
        let w = WindowShape::square(3);
        let data = random_batch(5, 20, 4, 9);
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 6,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train(GeoNetParams::init(4, 8, w, 1), &data, &cfg).unwrap();
        let b = train(GeoNetParams::init(4, 8, w, 1), &data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let w = WindowShape::square(3);
        let data = random_batch(5, 20, 4, 9);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            steps: 50,
            ..TrainConfig::default()
        };
        match train(GeoNetParams::init(4, 8, w, 1), &data, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn globalized_distribution_lives_in_the_window() {
        let spec = GridSpec::new(12, 12, 1.0, 1).unwrap();
        let w = WindowShape::square(5);
        let p = random_params(3, 2, 4, w);
        let q = forward(&p, &[0.4, -0.1]);
        let r = GridCoord::new(6, 5);
        let g = globalize(&q, r, w, &spec);
        assert_abs_diff_eq!(g.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..spec.cells() {
            let c = spec.coord(i);
            match w.index_of(c.x - r.x, c.y - r.y) {
                Some(j) => assert_eq!(g[i], q.probs[j]),
                None => assert_eq!(g[i], 0.0),
            }
        }
    }

    proptest! {
        #[test]
        fn forward_is_a_distribution(seed in any::<u64>(), scale in 0.1..50.0f64) {
            let w = WindowShape::square(5);
            let p = random_params(seed, 6, 7, w);
            let x: Vec<f64> = random_batch(seed, 1, 6, 25)[0].input.iter().map(|v| v * scale).collect();
            let q = forward(&p, &x);
            prop_assert!(q.probs.iter().all(|&v| v >= 0.0));
            prop_assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn label_is_center_iff_zero_offset(
            vx in -8.0..8.0f64, vy in -8.0..8.0f64, dist in 0.0..6.0f64,
        ) {
            let spec = GridSpec::new(40, 40, 0.5, 1).unwrap();
            let w = WindowShape::square(7);
            let tau = 0.5;
            let loc = GridCoord::new(20, 20);
            let o = truth_at([20.0 + dist, 20.0], [vx, vy], &spec);
            let label = make_label(loc, &[o], &spec, tau, w, 3.0);
            let assigned = dist <= 3.0;
            let rounds_to_zero = (vx * tau / spec.cell_size).round() == 0.0
                && (vy * tau / spec.cell_size).round() == 0.0;
            prop_assert_eq!(label.cell_index == w.center_index(), !assigned || rounds_to_zero);
        }
    }
}

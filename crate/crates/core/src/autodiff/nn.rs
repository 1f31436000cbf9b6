//! Network building blocks on top of [`Graph`]: the dense backbone, LSTM
//! stacks, losses, and the gradient drivers used by training.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense classifier: `input_dim → hidden… → k + 2`, ReLU between layers,
/// softmax output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Anomaly classes per episode; the output has `k + 2` slots.
    pub k: usize,
}

impl BackboneSpec {
    pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 128];

    pub fn new(input_dim: usize, k: usize) -> Self {
        BackboneSpec {
            input_dim,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            k,
        }
    }

    pub fn with_hidden(input_dim: usize, hidden: Vec<usize>, k: usize) -> Self {
        BackboneSpec { input_dim, hidden, k }
    }

    pub fn output_dim(&self) -> usize {
        self.k + 2
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim());
        w
    }

    fn layer_names(i: usize) -> (String, String) {
        (format!("dense{i}.weight"), format!("dense{i}.bias"))
    }

    /// Checks that `params` has exactly this architecture's tensors.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let widths = self.widths();
        let layers = widths.len() - 1;
        if params.len() != 2 * layers {
            return Err(Error::Argument(format!(
                "backbone expects {} tensors, parameter set has {}",
                2 * layers,
                params.len()
            )));
        }
        for (i, (w, b)) in params.entries().chunks(2).map(|c| (&c[0], &c[1])).enumerate() {
            let (wn, bn) = Self::layer_names(i);
            if w.name != wn || w.tensor.shape() != [widths[i], widths[i + 1]] {
                return Err(Error::Argument(format!(
                    "expected {wn} of shape [{}, {}], found {} {:?}",
                    widths[i],
                    widths[i + 1],
                    w.name,
                    w.tensor.shape()
                )));
            }
            if b.name != bn || b.tensor.shape() != [widths[i + 1]] {
                return Err(Error::Argument(format!(
                    "expected {bn} of shape [{}], found {} {:?}",
                    widths[i + 1],
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(&self) -> ParamSet {
        let widths = self.widths();
        let mut p = ParamSet::new();
        for i in 0..widths.len() - 1 {
            let (wn, bn) = Self::layer_names(i);
            p.push(wn, Tensor::zeros(&[widths[i], widths[i + 1]])).unwrap();
            p.push(bn, Tensor::zeros(&[widths[i + 1]])).unwrap();
        }
        p
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let widths = self.widths();
        let mut p = ParamSet::new();
        for i in 0..widths.len() - 1 {
            let (wn, bn) = Self::layer_names(i);
            p.push(wn, glorot(widths[i], widths[i + 1], rng)).unwrap();
            p.push(bn, Tensor::zeros(&[widths[i + 1]])).unwrap();
        }
        p
    }
}

pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Backbone logits for the rows of `x`; `params` are bound in
/// [`BackboneSpec::check`] order.
pub fn backbone_logits(g: &mut Graph, params: &[Var], x: Var) -> Var {
    let layers = params.len() / 2;
    let mut h = x;
    for (i, wb) in params.chunks(2).enumerate() {
        let z = g.matmul(h, wb[0]);
        h = g.add_row(z, wb[1]);
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

/// Row-wise class probabilities for `x` (`[input_dim]` or `[n, input_dim]`).
pub fn forward_backbone(params: &ParamSet, spec: &BackboneSpec, x: &Tensor) -> Result<Tensor> {
    spec.check(params)?;
    if x.cols() != spec.input_dim {
        return Err(Error::Argument(format!(
            "input has {} features, backbone expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind_const(&mut g);
    let xv = g.input(x);
    let logits = backbone_logits(&mut g, &vars, xv);
    let lp = g.log_softmax(logits);
    let p = g.exp(lp);
    let out = g.value(p).clone();
    if x.shape().len() == 1 {
        out.reshaped(vec![spec.output_dim()])
    } else {
        Ok(out)
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Summed cross-entropy of `logits` rows against one-hot `targets`.
pub fn cross_entropy_sum(g: &mut Graph, logits: Var, targets: Var) -> Var {
    let lp = g.log_softmax(logits);
    let lp = g.clamp_min(lp, PROB_FLOOR.ln());
    let picked = g.mul(lp, targets);
    let s = g.sum(picked);
    g.neg(s)
}

/// `−Σ_k y_k ln(max(p_k, 1e-12))` for one prediction.
pub fn cross_entropy(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::Argument(format!(
            "prediction has {} entries, label has {}",
            pred.len(),
            label.len()
        )));
    }
    let ones = label.iter().filter(|&&y| y == 1.0).count();
    let zeros = label.iter().filter(|&&y| y == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(Error::Argument("label is not one-hot".into()));
    }
    Ok(-pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `Σ (a − b)² / normalizer`.
pub fn mse(a: &Tensor, b: &Tensor, normalizer: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Argument("normalizer must be positive".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / normalizer)
}

/// Graph form of [`mse`] returning the unnormalized squared-error sum scaled by `1/normalizer`.
pub fn mse_graph(g: &mut Graph, a: Var, b: Var, normalizer: f64) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / normalizer)
}

fn non_finite_error(context: &str, params: &ParamSet, grad: Option<&ParamSet>) -> Error {
    let culprit = grad
        .and_then(|g| g.first_non_finite())
        .or_else(|| params.first_non_finite())
        .or_else(|| params.names().first().copied())
        .unwrap_or("<none>");
    Error::numeric(context, format!("non-finite loss (parameter {culprit})"))
}

/// Loss value and gradient of `loss_fn` at `params`.
///
/// `loss_fn` receives the graph and the parameters bound as differentiable
/// leaves in `params` order, and returns a scalar node.
pub fn grad<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.scalar(loss);
    let gvars = g.gradients(loss, &vars);
    let gradient = params.read_back(&g, &gvars);
    if !value.is_finite() || !gradient.is_finite() {
        return Err(non_finite_error("grad", params, Some(&gradient)));
    }
    Ok((value, gradient))
}

/// How the meta-gradient treats the inner gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaGradMode {
    /// Differentiate through the inner gradient (Hessian-vector terms included).
    Exact,
    /// Treat the inner gradient as a constant.
    FirstOrder,
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub outer_loss: f64,
    pub theta: ParamSet,
    pub alpha: ParamSet,
}

/// Gradient of `outer(θ')` with respect to `(θ, α)` where θ' comes from
/// `steps` updates `θ ← θ − α ∘ ∇inner(θ)`.
pub fn grad_through_update<I, O>(
    theta: &ParamSet,
    alpha: &ParamSet,
    inner: I,
    outer: O,
    steps: usize,
    mode: MetaGradMode,
) -> Result<MetaGradient>
where
    I: Fn(&mut Graph, &[Var]) -> Result<Var>,
    O: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    theta.check_congruent(alpha)?;
    let mut g = Graph::new();
    let tv = theta.bind(&mut g);
    let av = alpha.bind(&mut g);
    let mut cur = tv.clone();
    for step in 0..steps {
        let ls = inner(&mut g, &cur)?;
        if !g.scalar(ls).is_finite() {
            return Err(Error::numeric(
                "grad_through_update",
                format!("non-finite inner loss at step {step}"),
            ));
        }
        let mut gs = g.gradients(ls, &cur);
        if mode == MetaGradMode::FirstOrder {
            gs = gs.into_iter().map(|v| g.detach(v)).collect();
        }
        cur = cur
            .iter()
            .zip(&av)
            .zip(&gs)
            .map(|((&c, &a), &gr)| {
                let step = g.mul(a, gr);
                g.sub(c, step)
            })
            .collect();
    }
    let lv = outer(&mut g, &cur)?;
    let outer_loss = g.scalar(lv);
    let mut wrt = tv.clone();
    wrt.extend(&av);
    let grads = g.gradients(lv, &wrt);
    let gt = theta.read_back(&g, &grads[..tv.len()]);
    let ga = alpha.read_back(&g, &grads[tv.len()..]);
    if !outer_loss.is_finite() || !gt.is_finite() || !ga.is_finite() {
        return Err(Error::numeric(
            "grad_through_update",
            format!(
                "non-finite meta-gradient (parameter {})",
                gt.first_non_finite()
                    .or(ga.first_non_finite())
                    .unwrap_or("<loss>")
            ),
        ));
    }
    Ok(MetaGradient {
        outer_loss,
        theta: gt,
        alpha: ga,
    })
}

/// Stacked LSTM widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl LstmSpec {
    fn names(prefix: &str, layer: usize) -> [String; 3] {
        [
            format!("{prefix}.l{layer}.w_x"),
            format!("{prefix}.l{layer}.w_h"),
            format!("{prefix}.l{layer}.b"),
        ]
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input
        } else {
            self.hidden[layer - 1]
        }
    }

    pub fn output(&self) -> usize {
        *self.hidden.last().expect("at least one layer")
    }

    /// Appends Glorot-initialized gate weights (gate order i, f, g, o) and zero biases.
    pub fn init_into(&self, params: &mut ParamSet, prefix: &str, rng: &mut Rng) -> Result<()> {
        for (l, &h) in self.hidden.iter().enumerate() {
            let [wx, wh, b] = Self::names(prefix, l);
            params.push(wx, glorot(self.layer_input(l), 4 * h, rng))?;
            params.push(wh, glorot(h, 4 * h, rng))?;
            params.push(b, Tensor::zeros(&[4 * h]))?;
        }
        Ok(())
    }

    pub fn zeros_into(&self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        for (l, &h) in self.hidden.iter().enumerate() {
            let [wx, wh, b] = Self::names(prefix, l);
            params.push(wx, Tensor::zeros(&[self.layer_input(l), 4 * h]))?;
            params.push(wh, Tensor::zeros(&[h, 4 * h]))?;
            params.push(b, Tensor::zeros(&[4 * h]))?;
        }
        Ok(())
    }

    /// Looks up this stack's bound variables.
    pub fn vars(&self, params: &ParamSet, bound: &[Var], prefix: &str) -> Result<Vec<[Var; 3]>> {
        (0..self.hidden.len())
            .map(|l| {
                let names = Self::names(prefix, l);
                let h = self.hidden[l];
                let shapes = [
                    vec![self.layer_input(l), 4 * h],
                    vec![h, 4 * h],
                    vec![4 * h],
                ];
                let mut out = [bound[0]; 3];
                for (j, name) in names.iter().enumerate() {
                    let idx = params
                        .entries()
                        .iter()
                        .position(|e| &e.name == name)
                        .ok_or_else(|| Error::Argument(format!("missing LSTM parameter {name}")))?;
                    let shape = params.entries()[idx].tensor.shape();
                    if shape != shapes[j].as_slice() {
                        return Err(Error::Argument(format!(
                            "LSTM parameter {name} has shape {shape:?}, expected {:?}",
                            shapes[j]
                        )));
                    }
                    out[j] = bound[idx];
                }
                Ok(out)
            })
            .collect()
    }
}

/// Per-step outputs of the top layer and the final `(h, c)` of every layer.
pub struct LstmGraphOutput {
    pub outputs: Vec<Var>,
    pub final_states: Vec<(Var, Var)>,
}

/// Runs a stacked LSTM over `inputs` (each `batch × input`) from a zero state.
pub fn lstm_graph(g: &mut Graph, layers: &[[Var; 3]], hidden: &[usize], inputs: &[Var]) -> LstmGraphOutput {
    let mut seq: Vec<Var> = inputs.to_vec();
    let mut final_states = Vec::with_capacity(layers.len());
    for (layer, &h) in layers.iter().zip(hidden) {
        let [wx, wh, b] = *layer;
        let mut state: Option<(Var, Var)> = None;
        let mut outs = Vec::with_capacity(seq.len());
        for &x in &seq {
            let mut z = g.matmul(x, wx);
            if let Some((hp, _)) = state {
                let zh = g.matmul(hp, wh);
                z = g.add(z, zh);
            }
            z = g.add_row(z, b);
            let ig = g.slice_cols(z, 0, h);
            let ig = g.sigmoid(ig);
            let fg = g.slice_cols(z, h, h);
            let fg = g.sigmoid(fg);
            let cg = g.slice_cols(z, 2 * h, h);
            let cg = g.tanh(cg);
            let og = g.slice_cols(z, 3 * h, h);
            let og = g.sigmoid(og);
            let mut c = g.mul(ig, cg);
            if let Some((_, cp)) = state {
                let keep = g.mul(fg, cp);
                c = g.add(keep, c);
            }
            let tc = g.tanh(c);
            let hn = g.mul(og, tc);
            state = Some((hn, c));
            outs.push(hn);
        }
        final_states.push(state.expect("nonempty sequence"));
        seq = outs;
    }
    LstmGraphOutput {
        outputs: seq,
        final_states,
    }
}

pub struct LstmOutput {
    /// Top-layer hidden state per step.
    pub hidden: Vec<Tensor>,
    /// `(h, c)` after the last step, per layer.
    pub final_states: Vec<(Tensor, Tensor)>,
}

/// Evaluates the LSTM stack stored under `prefix` in `params`.
pub fn lstm_forward(params: &ParamSet, prefix: &str, spec: &LstmSpec, sequence: &[Tensor]) -> Result<LstmOutput> {
    if sequence.is_empty() {
        return Err(Error::Argument("empty sequence".into()));
    }
    if spec.hidden.is_empty() {
        return Err(Error::Argument("LSTM needs at least one layer".into()));
    }
    let rows = sequence[0].rows();
    for (t, x) in sequence.iter().enumerate() {
        if x.cols() != spec.input || x.rows() != rows {
            return Err(Error::Argument(format!(
                "step {t} has shape {:?}, expected {rows} × {}",
                x.shape(),
                spec.input
            )));
        }
    }
    let mut g = Graph::new();
    let bound = params.bind_const(&mut g);
    let layers = spec.vars(params, &bound, prefix)?;
    let inputs: Vec<Var> = sequence.iter().map(|x| g.input(x)).collect();
    let out = lstm_graph(&mut g, &layers, &spec.hidden, &inputs);
    Ok(LstmOutput {
        hidden: out.outputs.iter().map(|&v| g.value(v).clone()).collect(),
        final_states: out
            .final_states
            .iter()
            .map(|&(h, c)| (g.value(h).clone(), g.value(c).clone()))
            .collect(),
    })
}

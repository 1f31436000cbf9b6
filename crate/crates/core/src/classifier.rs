//! Plain supervised training of the dense backbone, used by the built-in
//! importance provider and the from-scratch baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, backbone_logits, cross_entropy_sum, forward_backbone, grad, one_hot, AdamConfig,
    AdamState, BackboneSpec, ParamSet, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-column signed `log1p` followed by min-max scaling over the fitted
/// rows, divided by `sqrt(dim)` so every fitted row has squared norm at
/// most 1. Constant columns map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

fn squash(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        InputScaler {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Data("cannot fit a scaler on zero rows".into()))?;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::Data(format!("row has {} features, expected {dim}", r.len())));
            }
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(r) {
                let s = squash(v);
                *l = l.min(s);
                *h = h.max(s);
            }
        }
        let root = (dim as f64).sqrt();
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h - l > 1e-12 { (h - l) * root } else { 1.0 })
            .collect();
        Ok(InputScaler { offset: lo, scale })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(&v, (o, s))| (squash(v) - o) / s)
            .collect()
    }

    /// Scaled rows stacked into an `n × dim` matrix.
    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        for r in rows {
            if r.len() != self.dim() {
                return Err(Error::Argument(format!(
                    "row has {} features, model expects {}",
                    r.len(),
                    self.dim()
                )));
            }
        }
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| self.transform_row(r)).collect();
        Tensor::from_rows(&scaled)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Backbone plus its input scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub spec: BackboneSpec,
    pub scaler: InputScaler,
    pub params: ParamSet,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let x = self.scaler.transform(rows)?;
        forward_backbone(&self.params, &self.spec, &x)
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.predict_proba(rows)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(rows)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    /// Adam updates to perform.
    pub steps: usize,
    /// Minibatch size; the full set when it has fewer rows.
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: BackboneSpec::DEFAULT_HIDDEN.to_vec(),
            steps: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

/// Fits a Glorot-initialized backbone with Adam on the mean cross-entropy.
///
/// `classes` must be at least 2; the backbone's `k` is `classes − 2`.
pub fn train_classifier(
    rows: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Classifier> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Data(format!(
            "training needs matching nonempty rows and labels ({} vs {})",
            rows.len(),
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(Error::Argument("a classifier needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    let scaler = InputScaler::fit(rows)?;
    let x = scaler.transform(rows)?;
    let y = one_hot(labels, classes);
    let spec = BackboneSpec::with_hidden(scaler.dim(), cfg.hidden.clone(), classes - 2);
    let mut params = spec.init(rng);
    let mut state = AdamState::new(&params);
    let n = rows.len();
    let batch = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..cfg.steps {
        let (xb, yb) = if batch == n {
            (x.clone(), y.clone())
        } else {
            if cursor + batch > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            (gather(&x, idx), gather(&y, idx))
        };
        let scale = 1.0 / xb.rows() as f64;
        let (_, g) = grad(&params, |g, p| {
            let xv = g.input(&xb);
            let yv = g.input(&yb);
            let logits = backbone_logits(g, p, xv);
            let ce = cross_entropy_sum(g, logits, yv);
            Ok(g.scale(ce, scale))
        })?;
        params = adam_step(&params, &g, &mut state, &cfg.adam)?;
    }
    Ok(Classifier { spec, scaler, params })
}

/// Selected rows of a matrix.
pub fn gather(m: &Tensor, idx: &[usize]) -> Tensor {
    let c = m.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn scaler_constant_column_maps_to_zero() {
        let s = InputScaler::fit(&[vec![3.0, 1.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(s.scale[0], 1.0);
        let t = s.transform_row(&[3.0, 1.0]);
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.transform_row(&[3.0, -1.0])[1], 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.4]), 1);
    }

    #[test]
    fn learns_separable_data() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            rows.push(vec![if c == 0 { -2.0 } else { 2.0 } + (i as f64) * 0.01, 0.5]);
            labels.push(c);
        }
        let cfg = TrainConfig {
            hidden: vec![8],
            steps: 200,
            batch_size: 40,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
        };
        let clf = train_classifier(&rows, &labels, 2, &cfg, &mut stream(1, "clf", 0)).unwrap();
        assert_eq!(clf.accuracy(&rows, &labels).unwrap(), 1.0);
    }
}

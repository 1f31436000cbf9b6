//! Packet-level flow matrices and the LSTM autoencoder that turns them into
//! 5-dimensional embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, grad, lstm_graph, AdamConfig, AdamState, Graph, LstmSpec, ParamSet, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::features::{SelectedFeatureVector, SELECTED_FEATURES};
use crate::flow::{Direction, Flow, TcpFlags};
use crate::rng;

/// Per-packet row width.
pub const PACKET_FEATURES: usize = 8;
pub const LATENT_DIM: usize = 5;
pub const COMBINED_FEATURES: usize = SELECTED_FEATURES + LATENT_DIM;

/// Column names of a flow matrix row.
pub const PACKET_FEATURE_NAMES: [&str; PACKET_FEATURES] = [
    "header_len",
    "payload_len",
    "gap_s",
    "window_size",
    "ack_cnt",
    "psh_cnt",
    "direction",
    "syn_or_fin",
];

/// The first `b` packets of a flow as rows of packet features, zero-padded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    rows: Tensor,
    valid_rows: usize,
}

impl FlowMatrix {
    pub fn new(rows: Tensor, valid_rows: usize) -> Result<Self> {
        if rows.shape().len() != 2 || rows.cols() != PACKET_FEATURES {
            return Err(Error::Argument(format!(
                "flow matrix must be B × {PACKET_FEATURES}, got {:?}",
                rows.shape()
            )));
        }
        if valid_rows > rows.rows() {
            return Err(Error::Argument(format!(
                "{valid_rows} valid rows exceed B = {}",
                rows.rows()
            )));
        }
        if rows.data()[valid_rows * PACKET_FEATURES..].iter().any(|&v| v != 0.0) {
            return Err(Error::Argument("padding rows must be zero".into()));
        }
        Ok(FlowMatrix { rows, valid_rows })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn b(&self) -> usize {
        self.rows.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// Builds the `b × 8` matrix of a nonempty flow, keeping its first `b` packets.
pub fn build_flow_matrix(flow: &Flow, b: usize) -> FlowMatrix {
    assert!(b > 0, "B must be positive");
    assert!(!flow.is_empty(), "flow has no packets");
    let mut data = vec![0.0; b * PACKET_FEATURES];
    let (mut acks, mut pshs) = (0.0, 0.0);
    let mut prev = flow.packets[0].record.timestamp_us;
    let valid = flow.len().min(b);
    for (i, p) in flow.packets.iter().take(b).enumerate() {
        let r = &p.record;
        if r.tcp_flags.has(TcpFlags::ACK) {
            acks += 1.0;
        }
        if r.tcp_flags.has(TcpFlags::PSH) {
            pshs += 1.0;
        }
        let row = &mut data[i * PACKET_FEATURES..(i + 1) * PACKET_FEATURES];
        row[0] = f64::from(r.header_len);
        row[1] = f64::from(r.payload_len);
        row[2] = (r.timestamp_us - prev) as f64 / 1e6;
        row[3] = f64::from(r.window_size);
        row[4] = acks;
        row[5] = pshs;
        row[6] = match p.direction {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        };
        row[7] = if r.tcp_flags.has(TcpFlags::SYN) || r.tcp_flags.has(TcpFlags::FIN) {
            1.0
        } else {
            0.0
        };
        prev = r.timestamp_us;
    }
    FlowMatrix {
        rows: Tensor::matrix(b, PACKET_FEATURES, data),
        valid_rows: valid,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector {
    z: Vec<f64>,
}

impl LatentVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return Err(Error::Schema(format!("latent needs {LATENT_DIM} values, got {}", z.len())));
        }
        Ok(LatentVector { z })
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }
}

/// Selected statistics followed by the latent embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CombinedFeatureVector {
    values: Vec<f64>,
}

impl CombinedFeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != COMBINED_FEATURES {
            return Err(Error::Schema(format!(
                "combined vector needs {COMBINED_FEATURES} values, got {}",
                values.len()
            )));
        }
        Ok(CombinedFeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn combine_features(s: &SelectedFeatureVector, z: &LatentVector) -> CombinedFeatureVector {
    let mut values = s.values().to_vec();
    values.extend_from_slice(z.values());
    CombinedFeatureVector { values }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSpec {
    /// Packets per flow matrix.
    pub b: usize,
    pub v: usize,
    pub z: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            b: 20,
            v: PACKET_FEATURES,
            z: LATENT_DIM,
            encoder: vec![256, 128],
            decoder: vec![128, 256],
        }
    }
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("B must be positive".into()));
        }
        if self.v != PACKET_FEATURES || self.z != LATENT_DIM {
            return Err(Error::Config(format!(
                "packet width must be {PACKET_FEATURES} and latent width {LATENT_DIM}, got {} and {}",
                self.v, self.z
            )));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() || self.encoder.contains(&0) || self.decoder.contains(&0) {
            return Err(Error::Config("LSTM stacks need positive widths".into()));
        }
        Ok(())
    }

    fn encoder_lstm(&self) -> LstmSpec {
        LstmSpec {
            input: self.v,
            hidden: self.encoder.clone(),
        }
    }

    fn decoder_lstm(&self) -> LstmSpec {
        LstmSpec {
            input: self.z,
            hidden: self.decoder.clone(),
        }
    }

    /// Glorot-initialized parameters.
    pub fn init(&self, rng: &mut rng::Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::new();
        self.encoder_lstm().init_into(&mut p, "encoder", rng)?;
        let top = *self.encoder.last().unwrap();
        p.push("latent.weight", crate::autodiff::glorot(top, self.z, rng))?;
        p.push("latent.bias", Tensor::zeros(&[self.z]))?;
        self.decoder_lstm().init_into(&mut p, "decoder", rng)?;
        let top = *self.decoder.last().unwrap();
        p.push("output.weight", crate::autodiff::glorot(top, self.v, rng))?;
        p.push("output.bias", Tensor::zeros(&[self.v]))?;
        Ok(p)
    }

    /// Checks that `params` holds exactly this architecture's tensors.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let mut rng = rng::stream(0, "shape-check", 0);
        let want = self.init(&mut rng)?;
        for (a, b) in want.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Format(format!(
                    "autoencoder tensor {:?} has shape {:?}, expected {:?} {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        if want.len() != params.len() {
            return Err(Error::Format(format!(
                "autoencoder expects {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// Per-column min-max scaling of packet rows, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Fits over the valid rows of `data`; padding rows are ignored.
    pub fn fit(data: &[FlowMatrix]) -> Normalizer {
        let mut min = vec![f64::INFINITY; PACKET_FEATURES];
        let mut max = vec![f64::NEG_INFINITY; PACKET_FEATURES];
        for m in data {
            for i in 0..m.valid_rows {
                for (j, &v) in m.row(i).iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        for j in 0..PACKET_FEATURES {
            if !min[j].is_finite() {
                min[j] = 0.0;
                max[j] = 0.0;
            }
        }
        Normalizer { min, max }
    }

    /// Scales valid rows; padding rows stay zero.
    pub fn apply(&self, m: &FlowMatrix) -> FlowMatrix {
        let mut rows = m.rows.clone();
        let data = rows.data_mut();
        for i in 0..m.valid_rows {
            for j in 0..PACKET_FEATURES {
                let range = self.max[j] - self.min[j];
                let x = &mut data[i * PACKET_FEATURES + j];
                *x = if range > 0.0 { (*x - self.min[j]) / range } else { 0.0 };
            }
        }
        FlowMatrix {
            rows,
            valid_rows: m.valid_rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub spec: AutoencoderSpec,
    pub normalizer: Normalizer,
    pub params: ParamSet,
}

/// Step-major inputs: entry `t` stacks row `t` of every matrix.
fn step_inputs(batch: &[&FlowMatrix], b: usize) -> Vec<Tensor> {
    (0..b)
        .map(|t| {
            let mut data = Vec::with_capacity(batch.len() * PACKET_FEATURES);
            for m in batch {
                data.extend_from_slice(m.row(t));
            }
            Tensor::matrix(batch.len(), PACKET_FEATURES, data)
        })
        .collect()
}

struct Nodes {
    latent: Var,
    recon: Vec<Var>,
}

fn build(g: &mut Graph, spec: &AutoencoderSpec, params: &ParamSet, bound: &[Var], steps: &[Var], decode: bool) -> Result<Nodes> {
    let enc = spec.encoder_lstm();
    let enc_layers = enc.vars(params, bound, "encoder")?;
    let out = lstm_graph(g, &enc_layers, &enc.hidden, steps);
    let top = out.final_states.last().expect("encoder has layers").0;
    let idx = |name: &str| {
        params
            .entries()
            .iter()
            .position(|e| e.name == name)
            .map(|i| bound[i])
            .ok_or_else(|| Error::Format(format!("missing autoencoder tensor {name}")))
    };
    let lw = idx("latent.weight")?;
    let lb = idx("latent.bias")?;
    let z = g.matmul(top, lw);
    let z = g.add_row(z, lb);
    let latent = g.sigmoid(z);
    let mut recon = Vec::new();
    if decode {
        let dec = spec.decoder_lstm();
        let dec_layers = dec.vars(params, bound, "decoder")?;
        let inputs = vec![latent; steps.len()];
        let out = lstm_graph(g, &dec_layers, &dec.hidden, &inputs);
        let ow = idx("output.weight")?;
        let ob = idx("output.bias")?;
        for h in out.outputs {
            let y = g.matmul(h, ow);
            recon.push(g.add_row(y, ob));
        }
    }
    Ok(Nodes { latent, recon })
}

/// Squared reconstruction error summed over the batch, and its gradient.
fn batch_loss_grad(spec: &AutoencoderSpec, params: &ParamSet, batch: &[&FlowMatrix]) -> Result<(f64, ParamSet)> {
    let inputs = step_inputs(batch, spec.b);
    grad(params, |g, bound| {
        let steps: Vec<Var> = inputs.iter().map(|x| g.input(x)).collect();
        let nodes = build(g, spec, params, bound, &steps, true)?;
        let mut total: Option<Var> = None;
        for (&y, &x) in nodes.recon.iter().zip(&steps) {
            let d = g.sub(y, x);
            let sq = g.square(d);
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        Ok(total.expect("B > 0"))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Trained model plus the mean reconstruction loss of every epoch.
pub struct TrainedAutoencoder {
    pub model: AutoencoderModel,
    pub history: Vec<f64>,
}

/// Minimizes the mean squared reconstruction error over all `F·B·V` entries.
///
/// Each epoch visits the (normalized) dataset once in a seeded order with
/// Adam updates on minibatches; the recorded loss is the epoch's mean of
/// the minibatch losses weighted by batch size.
pub fn train_autoencoder(data: &[FlowMatrix], spec: &AutoencoderSpec, cfg: &AeTrainConfig) -> Result<TrainedAutoencoder> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("autoencoder training needs at least one flow matrix".into()));
    }
    if let Some(m) = data.iter().find(|m| m.b() != spec.b) {
        return Err(Error::Argument(format!(
            "flow matrix has B = {}, model expects {}",
            m.b(),
            spec.b
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let normalizer = Normalizer::fit(data);
    let scaled: Vec<FlowMatrix> = data.iter().map(|m| normalizer.apply(m)).collect();
    let mut params = spec.init(&mut rng::stream(cfg.seed, "autoencoder-init", 0))?;
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    let per_matrix = (spec.b * spec.v) as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "autoencoder-shuffle", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FlowMatrix> = chunk.iter().map(|&i| &scaled[i]).collect();
            let (loss, mut g) = batch_loss_grad(spec, &params, &batch).map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::numeric(format!("autoencoder epoch {epoch}"), detail),
                other => other,
            })?;
            sum += loss;
            let scale = 1.0 / (batch.len() as f64 * per_matrix);
            g = g.map(|v| v * scale);
            params = adam_step(&params, &g, &mut state, &cfg.adam)?;
        }
        let mean = sum / (scaled.len() as f64 * per_matrix);
        if !mean.is_finite() {
            return Err(Error::numeric(format!("autoencoder epoch {epoch}"), "non-finite loss"));
        }
        log::debug!("autoencoder epoch {epoch}: loss {mean:.6e}");
        history.push(mean);
    }
    Ok(TrainedAutoencoder {
        model: AutoencoderModel {
            spec: spec.clone(),
            normalizer,
            params,
        },
        history,
    })
}

impl AutoencoderModel {
    fn check_input(&self, m: &FlowMatrix) -> Result<()> {
        if m.b() != self.spec.b {
            return Err(Error::Argument(format!(
                "flow matrix has B = {}, model expects {}",
                m.b(),
                self.spec.b
            )));
        }
        Ok(())
    }

    /// Latent vectors of many matrices, evaluated in batches.
    pub fn encode_batch(&self, data: &[FlowMatrix]) -> Result<Vec<LatentVector>> {
        data.iter().try_for_each(|m| self.check_input(m))?;
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(256) {
            let scaled: Vec<FlowMatrix> = chunk.iter().map(|m| self.normalizer.apply(m)).collect();
            let refs: Vec<&FlowMatrix> = scaled.iter().collect();
            let inputs = step_inputs(&refs, self.spec.b);
            let mut g = Graph::new();
            let bound = self.params.bind_const(&mut g);
            let steps: Vec<Var> = inputs.iter().map(|x| g.input(x)).collect();
            let nodes = build(&mut g, &self.spec, &self.params, &bound, &steps, false)?;
            let z = g.value(nodes.latent);
            for i in 0..z.rows() {
                out.push(LatentVector::new(z.row(i).to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, m: &FlowMatrix) -> Result<LatentVector> {
        Ok(self.encode_batch(std::slice::from_ref(m))?.remove(0))
    }

    /// Decoder output for one matrix, in normalized units.
    pub fn reconstruct(&self, m: &FlowMatrix) -> Result<Tensor> {
        self.check_input(m)?;
        let scaled = self.normalizer.apply(m);
        let inputs = step_inputs(&[&scaled], self.spec.b);
        let mut g = Graph::new();
        let bound = self.params.bind_const(&mut g);
        let steps: Vec<Var> = inputs.iter().map(|x| g.input(x)).collect();
        let nodes = build(&mut g, &self.spec, &self.params, &bound, &steps, true)?;
        let mut data = Vec::with_capacity(self.spec.b * self.spec.v);
        for y in nodes.recon {
            data.extend_from_slice(g.value(y).data());
        }
        Ok(Tensor::matrix(self.spec.b, self.spec.v, data))
    }

    /// Mean squared error over all entries of the normalized matrices.
    pub fn reconstruction_loss(&self, data: &[FlowMatrix]) -> Result<f64> {
        let mut sum = 0.0;
        for m in data {
            let y = self.reconstruct(m)?;
            let x = self.normalizer.apply(m);
            sum += crate::autodiff::mse(&y, x.rows(), 1.0)?;
        }
        Ok(sum / (data.len() as f64 * (self.spec.b * self.spec.v) as f64))
    }
}

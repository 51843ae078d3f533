//! The two-block sequence classifier: a stacked LSTM many-to-one network
//! with a dense head, preceded by an optional per-timestep input transform
//! (the domain-adaptation block).
//!
//! Weight convention: all matrices act on row vectors, `y = x · W + b`, and
//! LSTM gate weights have shape (input+hidden) × hidden applied to the
//! concatenation `[h_{t-1}, x_t]` (hidden part first).

use crate::error::{Error, Result};
use crate::rng::{derived_rng, tags};
use crate::tensor::{matmul_raw, Mode, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Lifecycle marker; stage II requires a source-trained classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fresh,
    SourceTrained,
}

// ── LSTM layer ──────────────────────────────────────────────────────

/// Gate parameters of one LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmLayerParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let w = || Tensor::zeros(vec![input_size + hidden_size, hidden_size]);
        let b = || Tensor::zeros(vec![hidden_size]);
        LstmLayerParams {
            input_size,
            hidden_size,
            w_f: w(),
            b_f: b(),
            w_i: w(),
            b_i: b(),
            w_c: w(),
            b_c: b(),
            w_o: w(),
            b_o: b(),
        }
    }

    /// Uniform(±√(1/fan_in)) weights, zero biases except the forget-gate
    /// bias which starts at 1.0.
    pub fn init<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let fan_in = input_size + hidden_size;
        let bound = (1.0 / fan_in as f64).sqrt();
        let shape = vec![fan_in, hidden_size];
        let mut layer = LstmLayerParams {
            input_size,
            hidden_size,
            w_f: Tensor::uniform(shape.clone(), -bound, bound, rng),
            b_f: Tensor::from_vec(vec![hidden_size], vec![1.0; hidden_size]).unwrap(),
            w_i: Tensor::uniform(shape.clone(), -bound, bound, rng),
            b_i: Tensor::zeros(vec![hidden_size]),
            w_c: Tensor::uniform(shape.clone(), -bound, bound, rng),
            b_c: Tensor::zeros(vec![hidden_size]),
            w_o: Tensor::uniform(shape, -bound, bound, rng),
            b_o: Tensor::zeros(vec![hidden_size]),
        };
        for t in layer.param_tensors_mut() {
            t.set_requires_grad(true);
        }
        layer
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_f, &self.b_f, &self.w_i, &self.b_i, &self.w_c, &self.b_c, &self.w_o,
            &self.b_o,
        ]
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_i,
            &mut self.b_i,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

/// Per-layer hidden and cell vectors, zero at every window start.
#[derive(Debug, Clone)]
pub struct HiddenState {
    pub per_layer: Vec<(Vec<f64>, Vec<f64>)>,
}

impl HiddenState {
    pub fn zeros(layers: &[LstmLayerParams]) -> Self {
        HiddenState {
            per_layer: layers
                .iter()
                .map(|l| (vec![0.0; l.hidden_size], vec![0.0; l.hidden_size]))
                .collect(),
        }
    }
}

/// One LSTM cell update on plain vectors (reference path, no gradients):
/// gates from `[h_{t-1}, x_t]`, then C_t = f⊙C_{t-1} + i⊙C̃, h_t = o⊙tanh(C_t).
pub fn lstm_cell_step(
    params: &LstmLayerParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_t.len() != params.input_size {
        return Err(Error::Shape(format!(
            "cell input length {} != layer input size {}",
            x_t.len(),
            params.input_size
        )));
    }
    let hid = params.hidden_size;
    if h_prev.len() != hid || c_prev.len() != hid {
        return Err(Error::Shape("hidden state size mismatch".into()));
    }
    let mut z = Vec::with_capacity(hid + x_t.len());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x_t);

    let gate = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut v = matmul_raw(&z, w.data(), 1, z.len(), hid);
        for (o, &bias) in v.iter_mut().zip(b.data()) {
            *o += bias;
        }
        v
    };
    let sigmoid =
        |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect() };

    let f = sigmoid(gate(&params.w_f, &params.b_f));
    let i = sigmoid(gate(&params.w_i, &params.b_i));
    let c_tilde: Vec<f64> = gate(&params.w_c, &params.b_c)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let o = sigmoid(gate(&params.w_o, &params.b_o));

    let mut c_new = Vec::with_capacity(hid);
    let mut h_new = Vec::with_capacity(hid);
    for j in 0..hid {
        let c = f[j] * c_prev[j] + i[j] * c_tilde[j];
        c_new.push(c);
        h_new.push(o[j] * c.tanh());
    }
    Ok((h_new, c_new))
}

// ── Classifier ──────────────────────────────────────────────────────

/// All learnable weights of the stage-I classifier.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub layers: Vec<LstmLayerParams>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub input_size: usize,
    pub fc_units: usize,
    pub n_classes: usize,
    pub stage: Stage,
}

impl ClassifierParams {
    fn check_dims(input_size: usize, num_layers: usize, n_classes: usize) -> Result<()> {
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                n_classes
            )));
        }
        if input_size == 0 || num_layers == 0 {
            return Err(Error::Config(
                "input size and layer count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// All-zero parameters (useful for fixed-point checks).
    pub fn zeros(
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        fc_units: usize,
        n_classes: usize,
    ) -> Result<Self> {
        Self::check_dims(input_size, num_layers, n_classes)?;
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_size } else { hidden_size };
                LstmLayerParams::zeros(inp, hidden_size)
            })
            .collect();
        Ok(ClassifierParams {
            layers,
            fc_w: Tensor::zeros(vec![hidden_size, fc_units]),
            fc_b: Tensor::zeros(vec![fc_units]),
            out_w: Tensor::zeros(vec![fc_units, n_classes]),
            out_b: Tensor::zeros(vec![n_classes]),
            input_size,
            fc_units,
            n_classes,
            stage: Stage::Fresh,
        })
    }

    /// Seeded initialization; all parameters trainable.
    pub fn init(
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        fc_units: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::check_dims(input_size, num_layers, n_classes)?;
        let mut rng = derived_rng(seed, &[tags::INIT]);
        let layers: Vec<LstmLayerParams> = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_size } else { hidden_size };
                LstmLayerParams::init(inp, hidden_size, &mut rng)
            })
            .collect();
        let fc_bound = (1.0 / hidden_size as f64).sqrt();
        let out_bound = (1.0 / fc_units as f64).sqrt();
        let mut params = ClassifierParams {
            layers,
            fc_w: Tensor::uniform(vec![hidden_size, fc_units], -fc_bound, fc_bound, &mut rng),
            fc_b: Tensor::zeros(vec![fc_units]),
            out_w: Tensor::uniform(vec![fc_units, n_classes], -out_bound, out_bound, &mut rng),
            out_b: Tensor::zeros(vec![n_classes]),
            input_size,
            fc_units,
            n_classes,
            stage: Stage::Fresh,
        };
        params.set_requires_grad(true);
        Ok(params)
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.hidden_size).collect()
    }

    /// Canonical parameter order: per layer w_f,b_f,w_i,b_i,w_c,b_c,w_o,b_o;
    /// then fc_w, fc_b, out_w, out_b. Checkpoints and optimizer state use
    /// this order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.param_tensors()).collect();
        v.extend([&self.fc_w, &self.fc_b, &self.out_w, &self.out_b]);
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            v.extend(l.param_tensors_mut());
        }
        v.push(&mut self.fc_w);
        v.push(&mut self.fc_b);
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        for t in self.param_tensors_mut() {
            t.set_requires_grad(requires);
        }
    }

    /// Copy of all parameter buffers, in canonical order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.param_tensors()
            .iter()
            .map(|t| t.data().to_vec())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        let mut tensors = self.param_tensors_mut();
        if tensors.len() != snapshot.len() {
            return Err(Error::Contract("snapshot arity mismatch".into()));
        }
        for (t, s) in tensors.iter_mut().zip(snapshot) {
            if t.numel() != s.len() {
                return Err(Error::Contract("snapshot shape mismatch".into()));
            }
            t.data_mut().copy_from_slice(s);
        }
        Ok(())
    }
}

// ── Adapter ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Linear,
    Deep,
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AdapterKind::Linear),
            "deep" => Ok(AdapterKind::Deep),
            other => Err(Error::Config(format!("unknown adapter kind '{}'", other))),
        }
    }
}

/// Per-timestep input transform. `Linear` is `x·M + b`; `Deep` chains two
/// relu-wrapped affine maps. Both are square (f → f) and identity at init,
/// which for the deep kind is exact only on non-negative inputs (the
/// preprocessing pipeline rectifies signals, so adapter inputs are ≥ 0).
#[derive(Debug, Clone)]
pub enum AdapterParams {
    Linear {
        m: Tensor,
        b: Tensor,
    },
    Deep {
        m1: Tensor,
        b1: Tensor,
        m2: Tensor,
        b2: Tensor,
    },
}

impl AdapterParams {
    pub fn identity(kind: AdapterKind, input_size: usize) -> Self {
        match kind {
            AdapterKind::Linear => AdapterParams::Linear {
                m: Tensor::identity(input_size),
                b: Tensor::zeros(vec![input_size]),
            },
            AdapterKind::Deep => AdapterParams::Deep {
                m1: Tensor::identity(input_size),
                b1: Tensor::zeros(vec![input_size]),
                m2: Tensor::identity(input_size),
                b2: Tensor::zeros(vec![input_size]),
            },
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterParams::Linear { .. } => AdapterKind::Linear,
            AdapterParams::Deep { .. } => AdapterKind::Deep,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            AdapterParams::Linear { m, .. } => m.shape()[0],
            AdapterParams::Deep { m1, .. } => m1.shape()[0],
        }
    }

    /// Canonical order: linear m,b; deep m1,b1,m2,b2.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            AdapterParams::Linear { m, b } => vec![m, b],
            AdapterParams::Deep { m1, b1, m2, b2 } => vec![m1, b1, m2, b2],
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AdapterParams::Linear { m, b } => vec![m, b],
            AdapterParams::Deep { m1, b1, m2, b2 } => vec![m1, b1, m2, b2],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        for t in self.param_tensors_mut() {
            t.set_requires_grad(requires);
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.param_tensors()
            .iter()
            .map(|t| t.data().to_vec())
            .collect()
    }

    /// Apply the transform to one timestep vector.
    pub fn adapt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.input_size();
        if x.len() != f {
            return Err(Error::Shape(format!(
                "adapter expects {} channels, got {}",
                f,
                x.len()
            )));
        }
        let affine = |x: &[f64], m: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut v = matmul_raw(x, m.data(), 1, f, f);
            for (o, &bias) in v.iter_mut().zip(b.data()) {
                *o += bias;
            }
            v
        };
        Ok(match self {
            AdapterParams::Linear { m, b } => affine(x, m, b),
            AdapterParams::Deep { m1, b1, m2, b2 } => {
                let h: Vec<f64> = affine(x, m1, b1).into_iter().map(|v| v.max(0.0)).collect();
                affine(&h, m2, b2).into_iter().map(|v| v.max(0.0)).collect()
            }
        })
    }
}

/// Adapter share of the total trainable parameter budget.
pub fn adapter_fraction(classifier: &ClassifierParams, adapter: &AdapterParams) -> f64 {
    let a = adapter.param_count() as f64;
    a / (a + classifier.param_count() as f64)
}

// ── Tape-based forward pass ─────────────────────────────────────────

/// A recorded forward pass over a batch of windows.
pub struct BatchForward {
    pub tape: Tape,
    /// Pre-softmax outputs, shape [batch, n_classes].
    pub logits: Var,
    classifier_vars: Vec<Var>,
    adapter_vars: Vec<Var>,
}

impl BatchForward {
    pub fn loss(&mut self, labels: &[usize]) -> Result<Var> {
        self.tape.softmax_cross_entropy(self.logits, labels)
    }

    /// Run the reverse pass and populate `grad` on every trainable
    /// parameter tensor that the loss reaches.
    pub fn backward_into(
        mut self,
        loss: Var,
        classifier: &mut ClassifierParams,
        adapter: Option<&mut AdapterParams>,
    ) -> Result<()> {
        self.tape.backward(loss)?;
        write_grads(&self.tape, &self.classifier_vars, classifier.param_tensors_mut())?;
        if let Some(ad) = adapter {
            write_grads(&self.tape, &self.adapter_vars, ad.param_tensors_mut())?;
        }
        Ok(())
    }
}

fn write_grads(tape: &Tape, vars: &[Var], mut tensors: Vec<&mut Tensor>) -> Result<()> {
    if vars.len() != tensors.len() {
        return Err(Error::Contract("forward binding arity mismatch".into()));
    }
    for (var, tensor) in vars.iter().zip(tensors.iter_mut()) {
        if !tensor.requires_grad() {
            continue;
        }
        match tape.grad(*var) {
            Some(g) => tensor.set_grad(g.to_vec())?,
            None => tensor.zero_grad(),
        }
    }
    Ok(())
}

struct LayerVars {
    w_f: Var,
    b_f: Var,
    w_i: Var,
    b_i: Var,
    w_c: Var,
    b_c: Var,
    w_o: Var,
    b_o: Var,
}

fn adapter_forward(tape: &mut Tape, adapter: &AdapterParams, vars: &[Var], x: Var) -> Result<Var> {
    match adapter {
        AdapterParams::Linear { .. } => {
            let mx = tape.matmul(x, vars[0])?;
            tape.add(mx, vars[1])
        }
        AdapterParams::Deep { .. } => {
            let h1 = tape.matmul(x, vars[0])?;
            let h1 = tape.add(h1, vars[1])?;
            let h1 = tape.relu(h1)?;
            let h2 = tape.matmul(h1, vars[2])?;
            let h2 = tape.add(h2, vars[3])?;
            tape.relu(h2)
        }
    }
}

/// Record a forward pass for a batch of equally shaped T×C windows.
///
/// Per timestep the (optional) adapter transforms the input row, the LSTM
/// stack advances, and after the final step the top hidden state passes
/// through the dense head (dropout active only in train mode). Dropout is
/// applied to each layer's output where it is consumed: between stacked
/// layers at every step, and on the top layer / dense output feeding the
/// readout. Recurrent connections stay undropped.
pub fn forward_batch<R: Rng>(
    classifier: &ClassifierParams,
    adapter: Option<&AdapterParams>,
    windows: &[&Tensor],
    mode: Mode,
    dropout_p: f64,
    rng: &mut R,
) -> Result<BatchForward> {
    if windows.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let t_len = windows[0].rows();
    let c = classifier.input_size;
    if t_len == 0 {
        return Err(Error::Data("empty window (T = 0)".into()));
    }
    for w in windows {
        if w.shape().len() != 2 || w.cols() != c {
            return Err(Error::Shape(format!(
                "window shape {:?} does not match {} input channels",
                w.shape(),
                c
            )));
        }
        if w.rows() != t_len {
            return Err(Error::Shape("windows in a batch must share T".into()));
        }
    }
    if let Some(ad) = adapter {
        if ad.input_size() != c {
            return Err(Error::Shape(format!(
                "adapter size {} does not match {} input channels",
                ad.input_size(),
                c
            )));
        }
    }

    let batch = windows.len();
    let mut tape = Tape::new();

    let mut classifier_vars = Vec::new();
    let mut layer_vars = Vec::new();
    for layer in &classifier.layers {
        let vs: Vec<Var> = layer
            .param_tensors()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<_>>()?;
        classifier_vars.extend(&vs);
        layer_vars.push(LayerVars {
            w_f: vs[0],
            b_f: vs[1],
            w_i: vs[2],
            b_i: vs[3],
            w_c: vs[4],
            b_c: vs[5],
            w_o: vs[6],
            b_o: vs[7],
        });
    }
    let fc_w = tape.leaf(&classifier.fc_w)?;
    let fc_b = tape.leaf(&classifier.fc_b)?;
    let out_w = tape.leaf(&classifier.out_w)?;
    let out_b = tape.leaf(&classifier.out_b)?;
    classifier_vars.extend([fc_w, fc_b, out_w, out_b]);

    let adapter_vars: Vec<Var> = match adapter {
        Some(ad) => ad
            .param_tensors()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let num_layers = classifier.layers.len();
    let mut h: Vec<Var> = Vec::with_capacity(num_layers);
    let mut cell: Vec<Var> = Vec::with_capacity(num_layers);
    for layer in &classifier.layers {
        let zero = vec![0.0; batch * layer.hidden_size];
        h.push(tape.constant(vec![batch, layer.hidden_size], zero.clone())?);
        cell.push(tape.constant(vec![batch, layer.hidden_size], zero)?);
    }

    let mut head_input = h[num_layers - 1];
    for t in 0..t_len {
        let mut x_data = Vec::with_capacity(batch * c);
        for w in windows {
            x_data.extend_from_slice(w.row(t));
        }
        let mut x = tape.constant(vec![batch, c], x_data)?;
        if let Some(ad) = adapter {
            x = adapter_forward(&mut tape, ad, &adapter_vars, x)?;
        }

        let mut inp = x;
        for (l, lv) in layer_vars.iter().enumerate() {
            let z = tape.concat_cols(h[l], inp)?;
            let f_lin = tape.matmul(z, lv.w_f)?;
            let f_lin = tape.add(f_lin, lv.b_f)?;
            let f = tape.sigmoid(f_lin)?;
            let i_lin = tape.matmul(z, lv.w_i)?;
            let i_lin = tape.add(i_lin, lv.b_i)?;
            let i = tape.sigmoid(i_lin)?;
            let c_lin = tape.matmul(z, lv.w_c)?;
            let c_lin = tape.add(c_lin, lv.b_c)?;
            let c_tilde = tape.tanh(c_lin)?;
            let o_lin = tape.matmul(z, lv.w_o)?;
            let o_lin = tape.add(o_lin, lv.b_o)?;
            let o = tape.sigmoid(o_lin)?;

            let keep = tape.mul(f, cell[l])?;
            let write = tape.mul(i, c_tilde)?;
            let c_new = tape.add(keep, write)?;
            let c_tanh = tape.tanh(c_new)?;
            let h_new = tape.mul(o, c_tanh)?;
            h[l] = h_new;
            cell[l] = c_new;

            let last_layer = l == num_layers - 1;
            if !last_layer {
                inp = tape.dropout(h_new, dropout_p, mode, rng)?;
            } else if t == t_len - 1 {
                head_input = tape.dropout(h_new, dropout_p, mode, rng)?;
            }
        }
    }

    let fc = tape.matmul(head_input, fc_w)?;
    let fc = tape.add(fc, fc_b)?;
    let fc = tape.dropout(fc, dropout_p, mode, rng)?;
    let logits = tape.matmul(fc, out_w)?;
    let logits = tape.add(logits, out_b)?;

    Ok(BatchForward {
        tape,
        logits,
        classifier_vars,
        adapter_vars,
    })
}

/// Eval- or train-mode logits for a single T×C window.
pub fn classify_window<R: Rng>(
    classifier: &ClassifierParams,
    adapter: Option<&AdapterParams>,
    window: &Tensor,
    mode: Mode,
    dropout_p: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let fwd = forward_batch(classifier, adapter, &[window], mode, dropout_p, rng)?;
    Tensor::from_vec(
        vec![classifier.n_classes],
        fwd.tape.value(fwd.logits).to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_window(t: usize, c: usize, seed: u64) -> Tensor {
        Tensor::uniform(vec![t, c], -1.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn zero_parameter_classifier_outputs_out_bias() {
        let mut clf = ClassifierParams::zeros(3, 4, 2, 4, 5).unwrap();
        clf.out_b = Tensor::from_vec(vec![5], vec![0.1, -0.2, 0.3, 0.4, -0.5]).unwrap();
        let w = random_window(6, 3, 1);
        let logits = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        assert_eq!(logits.data(), clf.out_b.data());
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let clf = ClassifierParams::init(4, 6, 2, 5, 3, 99).unwrap();
        let w = random_window(7, 4, 2);
        let a = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(1)).unwrap();
        let b = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(2)).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_cell_step_is_fixed_point() {
        let layer = LstmLayerParams::zeros(3, 4);
        let (h, c) = lstm_cell_step(&layer, &[0.3, -0.7, 2.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn cell_step_scalar_recomputation() {
        // hidden 1, input 1, all weights zero, b_f = +10, C0 = 2:
        // f ≈ 1, i = 0.5, C̃ = 0 → C ≈ 2, h = 0.5·tanh(C) ≈ 0.4820
        let mut layer = LstmLayerParams::zeros(1, 1);
        layer.b_f = Tensor::from_vec(vec![1], vec![10.0]).unwrap();
        let (h, c) = lstm_cell_step(&layer, &[0.0], &[0.0], &[2.0]).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-3, "c {}", c[0]);
        assert!((h[0] - 0.4820).abs() < 1e-3, "h {}", h[0]);
    }

    #[test]
    fn cell_step_rejects_bad_dims() {
        let layer = LstmLayerParams::zeros(3, 4);
        assert!(matches!(
            lstm_cell_step(&layer, &[1.0, 2.0], &[0.0; 4], &[0.0; 4]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn classify_window_matches_unrolled_cell_steps() {
        let clf = ClassifierParams::init(4, 5, 2, 6, 3, 1234).unwrap();
        let w = random_window(3, 4, 77);

        // unrolled reference
        let mut state = HiddenState::zeros(&clf.layers);
        for t in 0..3 {
            let mut inp = w.row(t).to_vec();
            for (l, layer) in clf.layers.iter().enumerate() {
                let (h_prev, c_prev) = state.per_layer[l].clone();
                let (h, c) = lstm_cell_step(layer, &inp, &h_prev, &c_prev).unwrap();
                state.per_layer[l] = (h.clone(), c);
                inp = h;
            }
        }
        let top = &state.per_layer[1].0;
        let mut fc = matmul_raw(top, clf.fc_w.data(), 1, 5, 6);
        for (v, &b) in fc.iter_mut().zip(clf.fc_b.data()) {
            *v += b;
        }
        let mut logits = matmul_raw(&fc, clf.out_w.data(), 1, 6, 3);
        for (v, &b) in logits.iter_mut().zip(clf.out_b.data()) {
            *v += b;
        }

        let got = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        assert!(got
            .data()
            .iter()
            .zip(&logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_window_is_data_error() {
        let clf = ClassifierParams::init(4, 5, 2, 6, 3, 1).unwrap();
        let w = Tensor::zeros(vec![0, 4]);
        assert!(matches!(
            classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn identity_linear_adapter_is_bitwise_transparent() {
        let clf = ClassifierParams::init(4, 6, 2, 5, 3, 5).unwrap();
        let ad = AdapterParams::identity(AdapterKind::Linear, 4);
        let w = random_window(5, 4, 3);
        let plain = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        let adapted = classify_window(&clf, Some(&ad), &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        assert!(plain
            .data()
            .iter()
            .zip(adapted.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identity_deep_adapter_transparent_on_nonnegative_input() {
        let clf = ClassifierParams::init(4, 6, 2, 5, 3, 5).unwrap();
        let ad = AdapterParams::identity(AdapterKind::Deep, 4);
        let w = Tensor::uniform(vec![5, 4], 0.0, 2.0, &mut rng(8));
        let plain = classify_window(&clf, None, &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        let adapted = classify_window(&clf, Some(&ad), &w, Mode::Eval, 0.5, &mut rng(0)).unwrap();
        assert!(plain
            .data()
            .iter()
            .zip(adapted.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adapt_identity_and_hand_arithmetic() {
        let lin = AdapterParams::identity(AdapterKind::Linear, 2);
        assert_eq!(lin.adapt(&[0.4, -0.9]).unwrap(), vec![0.4, -0.9]);

        let deep = AdapterParams::identity(AdapterKind::Deep, 2);
        assert_eq!(deep.adapt(&[0.4, 0.9]).unwrap(), vec![0.4, 0.9]);

        // M = 2I, b = ones: [1, 2] → [3, 5]
        let mut m = Tensor::identity(2);
        m.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let two = AdapterParams::Linear {
            m,
            b: Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap(),
        };
        assert_eq!(two.adapt(&[1.0, 2.0]).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn param_counts_match_reference_architecture() {
        // f=128, 2×512 LSTM, FC 512, G=8
        let clf = ClassifierParams::zeros(128, 512, 2, 512, 8).unwrap();
        assert_eq!(clf.param_count(), 3_678_728);

        let lin = AdapterParams::identity(AdapterKind::Linear, 128);
        assert_eq!(lin.param_count(), 16_512);
        let deep = AdapterParams::identity(AdapterKind::Deep, 128);
        assert_eq!(deep.param_count(), 33_024);

        let lin_frac = adapter_fraction(&clf, &lin);
        let deep_frac = adapter_fraction(&clf, &deep);
        assert!((lin_frac - 0.0045).abs() < 3e-4, "linear {}", lin_frac);
        assert!((deep_frac - 0.0089).abs() < 3e-4, "deep {}", deep_frac);
        assert!(lin_frac < 0.01 && deep_frac < 0.01);
    }

    #[test]
    fn param_count_toy_hand_count() {
        // G=2, hidden=1, f=1, 1 layer, fc 1:
        // LSTM 4·((1+1)·1+1) = 12, fc 1·1+1 = 2, out 1·2+2 = 4 → 18
        let clf = ClassifierParams::zeros(1, 1, 1, 1, 2).unwrap();
        assert_eq!(clf.param_count(), 18);
    }

    #[test]
    fn cell_gradient_matches_finite_difference() {
        // gradient of the window loss w.r.t. W_o through the tape forward
        let mut clf = ClassifierParams::init(3, 4, 1, 2, 2, 21).unwrap();
        let w = random_window(1, 3, 9);

        let loss_of = |clf: &ClassifierParams| -> f64 {
            let mut r = rng(0);
            let mut fwd = forward_batch(clf, None, &[&w], Mode::Eval, 0.0, &mut r).unwrap();
            let loss = fwd.loss(&[1]).unwrap();
            fwd.tape.value(loss)[0]
        };

        let mut r = rng(0);
        let mut fwd = forward_batch(&clf, None, &[&w], Mode::Eval, 0.0, &mut r).unwrap();
        let loss = fwd.loss(&[1]).unwrap();
        fwd.backward_into(loss, &mut clf, None).unwrap();
        let analytic = clf.layers[0].w_o.grad().unwrap().to_vec();

        let h = 1e-4;
        let n = clf.layers[0].w_o.numel();
        let mut max_err: f64 = 0.0;
        for idx in 0..n {
            let orig = clf.layers[0].w_o.data()[idx];
            clf.layers[0].w_o.data_mut()[idx] = orig + h;
            let up = loss_of(&clf);
            clf.layers[0].w_o.data_mut()[idx] = orig - h;
            let down = loss_of(&clf);
            clf.layers[0].w_o.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
            max_err = max_err.max((analytic[idx] - numeric).abs() / denom);
        }
        assert!(max_err < 1e-4, "max rel err {}", max_err);
    }

    #[test]
    fn simple_recurrence_gradient_oracle() {
        // Minimal single-gate recurrence h_t = tanh(Wx·x_t + Wh·h_{t-1} + b)
        // built directly on the tape; gradient vs finite differences.
        let mut r = rng(31);
        let wx0 = Tensor::uniform(vec![2, 3], -0.8, 0.8, &mut r);
        let wh0 = Tensor::uniform(vec![3, 3], -0.8, 0.8, &mut r);
        let b0 = Tensor::uniform(vec![3], -0.5, 0.5, &mut r);
        let xs = Tensor::uniform(vec![4, 2], -1.0, 1.0, &mut r);

        let run = |wxv: &[f64], whv: &[f64], bv: &[f64], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut wx = Tensor::from_vec(vec![2, 3], wxv.to_vec()).unwrap();
            let mut wh = Tensor::from_vec(vec![3, 3], whv.to_vec()).unwrap();
            let mut b = Tensor::from_vec(vec![3], bv.to_vec()).unwrap();
            wx.set_requires_grad(true);
            wh.set_requires_grad(true);
            b.set_requires_grad(true);
            let wxv_ = tape.leaf(&wx).unwrap();
            let whv_ = tape.leaf(&wh).unwrap();
            let bv_ = tape.leaf(&b).unwrap();
            let mut h = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
            for t in 0..4 {
                let x = tape.constant(vec![1, 2], xs.row(t).to_vec()).unwrap();
                let a1 = tape.matmul(x, wxv_).unwrap();
                let a2 = tape.matmul(h, whv_).unwrap();
                let s = tape.add(a1, a2).unwrap();
                let s = tape.add(s, bv_).unwrap();
                h = tape.tanh(s).unwrap();
            }
            let sq = tape.mul(h, h).unwrap();
            let loss = tape.sum(sq).unwrap();
            let l = tape.value(loss)[0];
            if !want_grad {
                return (l, vec![]);
            }
            tape.backward(loss).unwrap();
            (
                l,
                vec![
                    tape.grad(wxv_).unwrap().to_vec(),
                    tape.grad(whv_).unwrap().to_vec(),
                    tape.grad(bv_).unwrap().to_vec(),
                ],
            )
        };

        let (_, grads) = run(wx0.data(), wh0.data(), b0.data(), true);
        let h = 1e-4;
        for (p, base) in [(0usize, &wx0), (1, &wh0), (2, &b0)] {
            for idx in 0..base.numel() {
                let mut plus = base.data().to_vec();
                let mut minus = base.data().to_vec();
                plus[idx] += h;
                minus[idx] -= h;
                let args = |v: &[f64]| match p {
                    0 => run(v, wh0.data(), b0.data(), false).0,
                    1 => run(wx0.data(), v, b0.data(), false).0,
                    _ => run(wx0.data(), wh0.data(), v, false).0,
                };
                let numeric = (args(&plus) - args(&minus)) / (2.0 * h);
                let a = grads[p][idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "param {} idx {}: {} vs {}",
                    p,
                    idx,
                    a,
                    numeric
                );
            }
        }
    }
}

//! Gated-attention multiple-instance network.
//!
//! For a bag of `N` patch embeddings `E` (N×D) the forward pass is
//!
//! ```text
//! H      = act(E W1ᵀ + b1)                          N×L   (compression)
//! G      = tanh(H Vaᵀ) ⊙ sigm(H Uaᵀ)                N×A   (shared attention backbone)
//! S      = G Waᵀ                                    N×2   (one raw score per class branch)
//! a[·,m] = softmax over patches of S[·,m]
//! h_m    = Σ_k a[k,m] H[k]                          2×L   (per-class slide representation)
//! z_m    = Wc_m · h_m + bc_m,   p = softmax(z)
//! ```
//!
//! with `L = hidden_width` (512) and `A = attention_width` (256). In training
//! mode inverted dropout is applied to `H` and to `G`.
//!
//! [`backward`] returns the exact gradient of the slide-level cross-entropy
//! through the same computation, including the recorded dropout masks.

mod checkpoint;

pub use checkpoint::{
    read_checkpoint, sidecar_path, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SlideBag, SubtypeLabel};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// One head per class, each reading its own branch's slide vector.
    PerClass,
    /// A single head shared by both branches; only the bias is per class.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub attention_width: usize,
    pub compress_activation: Activation,
    pub classifier_mode: ClassifierMode,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_width: 512,
            attention_width: 256,
            compress_activation: Activation::Relu,
            classifier_mode: ClassifierMode::PerClass,
            dropout: 0.1,
        }
    }

    pub fn with_widths(mut self, hidden: usize, attention: usize) -> Self {
        self.hidden_width = hidden;
        self.attention_width = attention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::validation("input dimension must be at least 1"));
        }
        if self.hidden_width == 0 || self.attention_width == 0 {
            return Err(Error::validation("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn head_rows(&self) -> usize {
        match self.classifier_mode {
            ClassifierMode::PerClass => NUM_CLASSES,
            ClassifierMode::Shared => 1,
        }
    }
}

/// Trainable tensors. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    /// Compression, L×D.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Sigmoid gate of the attention backbone, A×L.
    pub ua: Array2<f64>,
    /// Tanh branch of the attention backbone, A×L.
    pub va: Array2<f64>,
    /// Attention branches, one row per class, 2×A.
    pub wa: Array2<f64>,
    /// Classifier heads, 2×L (per-class) or 1×L (shared).
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

pub type MilGrads = MilParams;

pub const TENSOR_NAMES: [&str; 7] = ["W1", "b1", "Ua", "Va", "Wa", "Wc", "bc"];

impl MilParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, l, a) = (cfg.input_dim, cfg.hidden_width, cfg.attention_width);
        Self {
            w1: Array2::zeros((l, d)),
            b1: Array1::zeros(l),
            ua: Array2::zeros((a, l)),
            va: Array2::zeros((a, l)),
            wa: Array2::zeros((NUM_CLASSES, a)),
            wc: Array2::zeros((cfg.head_rows(), l)),
            bc: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            ua: Array2::zeros(self.ua.raw_dim()),
            va: Array2::zeros(self.va.raw_dim()),
            wa: Array2::zeros(self.wa.raw_dim()),
            wc: Array2::zeros(self.wc.raw_dim()),
            bc: Array1::zeros(self.bc.raw_dim()),
        }
    }

    /// Tensor shapes in declaration order; vectors report a single dimension.
    pub fn shapes(&self) -> [Vec<usize>; 7] {
        [
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.ua.shape().to_vec(),
            self.va.shape().to_vec(),
            self.wa.shape().to_vec(),
            self.wc.shape().to_vec(),
            self.bc.shape().to_vec(),
        ]
    }

    /// Flat views of all tensors in declaration order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.ua.as_slice().expect("standard layout"),
            self.va.as_slice().expect("standard layout"),
            self.wa.as_slice().expect("standard layout"),
            self.wc.as_slice().expect("standard layout"),
            self.bc.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.ua.as_slice_mut().expect("standard layout"),
            self.va.as_slice_mut().expect("standard layout"),
            self.wa.as_slice_mut().expect("standard layout"),
            self.wc.as_slice_mut().expect("standard layout"),
            self.bc.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &MilParams) -> bool {
        self.shapes() == other.shapes()
    }
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub config: ModelConfig,
    pub params: MilParams,
}

impl MilModel {
    /// Uniform fan-in initialisation `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    ///
    /// Weights are drawn in single precision so a fresh model survives the
    /// binary32 checkpoint format unchanged.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MilParams::zeros(&config);
        let mut fill = |t: &mut Array2<f64>, fan_in: usize| {
            let bound = (1.0 / fan_in as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            t.mapv_inplace(|_| dist.sample(&mut rng) as f64);
        };
        fill(&mut params.w1, config.input_dim);
        fill(&mut params.ua, config.hidden_width);
        fill(&mut params.va, config.hidden_width);
        fill(&mut params.wa, config.attention_width);
        fill(&mut params.wc, config.hidden_width);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: MilParams) -> Result<Self> {
        config.validate()?;
        if !params.same_shape(&MilParams::zeros(&config)) {
            return Err(Error::validation(
                "parameter shapes do not match model configuration",
            ));
        }
        if !params.is_finite() {
            return Err(Error::validation("parameters contain non-finite values"));
        }
        Ok(Self { config, params })
    }
}

pub fn init_params(config: ModelConfig, seed: u64) -> Result<MilModel> {
    MilModel::init(config, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Compression pre-activation, N×L.
    pub pre_activation: Array2<f64>,
    /// Patch representations `h_k` after activation and dropout, N×L.
    pub hidden: Array2<f64>,
    /// Scaled keep mask (0 or 1/(1-p)) applied to `hidden`.
    pub hidden_mask: Option<Array2<f64>>,
    pub gate_tanh: Array2<f64>,
    pub gate_sigmoid: Array2<f64>,
    /// Gated product after dropout, N×A.
    pub gated: Array2<f64>,
    pub gated_mask: Option<Array2<f64>>,
    /// Branch scores before the softmax over patches, N×2.
    pub raw_scores: Array2<f64>,
    /// Attention weights `a[k,m]`; each column sums to one.
    pub attention: Array2<f64>,
    /// Slide representation per class branch, 2×L.
    pub slide: Array2<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl ForwardTrace {
    pub fn num_patches(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn predicted(&self) -> SubtypeLabel {
        if self.probs[1] > self.probs[0] {
            SubtypeLabel::Gcb
        } else {
            SubtypeLabel::Abc
        }
    }
}

fn check_input(e: &ArrayView2<f64>, cfg: &ModelConfig) -> Result<()> {
    if e.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    if e.ncols() != cfg.input_dim {
        return Err(Error::validation(format!(
            "embedding width {} does not match model input {}",
            e.ncols(),
            cfg.input_dim
        )));
    }
    Ok(())
}

fn compress_pre(e: &ArrayView2<f64>, params: &MilParams) -> Array2<f64> {
    let mut z = e.dot(&params.w1.t());
    z += &params.b1;
    z
}

fn activate(z: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Identity => z.clone(),
    }
}

/// Row `k` is `act(W1 e_k + b1)`.
pub fn compress(e: ArrayView2<f64>, model: &MilModel) -> Result<Array2<f64>> {
    check_input(&e, &model.config)?;
    Ok(activate(
        &compress_pre(&e, &model.params),
        model.config.compress_activation,
    ))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over rows, independently for every column.
pub fn softmax_columns(raw: &Array2<f64>) -> Array2<f64> {
    let mut out = raw.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

fn check_hidden(h: &ArrayView2<f64>, cfg: &ModelConfig) -> Result<()> {
    if h.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    if h.ncols() != cfg.hidden_width {
        return Err(Error::validation(format!(
            "hidden width {} does not match model width {}",
            h.ncols(),
            cfg.hidden_width
        )));
    }
    Ok(())
}

/// Gate branches `(tanh(H Vaᵀ), sigm(H Uaᵀ))`.
fn gates(h: &ArrayView2<f64>, params: &MilParams) -> (Array2<f64>, Array2<f64>) {
    let t = h.dot(&params.va.t()).mapv(f64::tanh);
    let s = h.dot(&params.ua.t()).mapv(sigmoid);
    (t, s)
}

/// Attention weights `a[k,m]` (N×2) for patch representations `H`.
pub fn attention_scores(h: ArrayView2<f64>, model: &MilModel) -> Result<Array2<f64>> {
    check_hidden(&h, &model.config)?;
    let (t, s) = gates(&h, &model.params);
    let raw = (t * s).dot(&model.params.wa.t());
    Ok(softmax_columns(&raw))
}

/// Row `m` is `Σ_k a[k,m] h_k`.
pub fn aggregate(h: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != h.nrows() || a.ncols() != NUM_CLASSES {
        return Err(Error::validation(format!(
            "attention shape {:?} incompatible with {} patches",
            a.shape(),
            h.nrows()
        )));
    }
    for (m, col) in a.axis_iter(Axis(1)).enumerate() {
        let sum = col.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "attention column {m} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(a.t().dot(&h))
}

/// Per-class logits and their softmax.
pub fn classify(slide: ArrayView2<f64>, model: &MilModel) -> Result<(Array1<f64>, Array1<f64>)> {
    if slide.dim() != (NUM_CLASSES, model.config.hidden_width) {
        return Err(Error::validation(format!(
            "slide representation shape {:?}, expected [2, {}]",
            slide.shape(),
            model.config.hidden_width
        )));
    }
    let p = &model.params;
    let logits = Array1::from_shape_fn(NUM_CLASSES, |m| {
        let head = match model.config.classifier_mode {
            ClassifierMode::PerClass => p.wc.row(m),
            ClassifierMode::Shared => p.wc.row(0),
        };
        head.dot(&slide.row(m)) + p.bc[m]
    });
    let probs = softmax(&logits);
    Ok((logits, probs))
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let scale = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() >= p {
            scale
        } else {
            0.0
        }
    })
}

/// Forward pass over a dense embedding matrix.
pub fn forward_matrix(e: ArrayView2<f64>, model: &MilModel, mode: Mode) -> Result<ForwardTrace> {
    let cfg = &model.config;
    check_input(&e, cfg)?;
    let n = e.nrows();
    let mut rng = match mode {
        Mode::Train { dropout_seed } if cfg.dropout > 0.0 => {
            Some(ChaCha8Rng::seed_from_u64(dropout_seed))
        }
        _ => None,
    };

    let pre_activation = compress_pre(&e, &model.params);
    let mut hidden = activate(&pre_activation, cfg.compress_activation);
    let hidden_mask = rng
        .as_mut()
        .map(|r| dropout_mask(r, (n, cfg.hidden_width), cfg.dropout));
    if let Some(mask) = &hidden_mask {
        hidden *= mask;
    }

    let (gate_tanh, gate_sigmoid) = gates(&hidden.view(), &model.params);
    let mut gated = &gate_tanh * &gate_sigmoid;
    let gated_mask = rng
        .as_mut()
        .map(|r| dropout_mask(r, (n, cfg.attention_width), cfg.dropout));
    if let Some(mask) = &gated_mask {
        gated *= mask;
    }

    let raw_scores = gated.dot(&model.params.wa.t());
    let attention = softmax_columns(&raw_scores);
    let slide = attention.t().dot(&hidden);
    let (logits, probs) = classify(slide.view(), model)?;

    let trace = ForwardTrace {
        pre_activation,
        hidden,
        hidden_mask,
        gate_tanh,
        gate_sigmoid,
        gated,
        gated_mask,
        raw_scores,
        attention,
        slide,
        logits,
        probs,
    };
    if !trace.probs.iter().all(|v| v.is_finite()) || !trace.attention.iter().all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("forward pass produced non-finite values".into()));
    }
    Ok(trace)
}

pub fn embeddings_f64(bag: &SlideBag) -> Array2<f64> {
    bag.embeddings.mapv(f64::from)
}

pub fn forward(bag: &SlideBag, model: &MilModel, mode: Mode) -> Result<ForwardTrace> {
    forward_matrix(embeddings_f64(bag).view(), model, mode)
}

/// Cross-entropy `-ln p_y`, computed from the logits via log-sum-exp.
pub fn cross_entropy(logits: &Array1<f64>, label: SubtypeLabel) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    lse - logits[label.index()]
}

/// Loss and exact parameter gradients for the traced forward pass.
pub fn backward_matrix(
    trace: &ForwardTrace,
    e: ArrayView2<f64>,
    model: &MilModel,
    label: SubtypeLabel,
) -> Result<(f64, MilGrads)> {
    let cfg = &model.config;
    let p = &model.params;
    check_input(&e, cfg)?;
    let n = e.nrows();
    if trace.hidden.dim() != (n, cfg.hidden_width)
        || trace.gated.dim() != (n, cfg.attention_width)
        || trace.attention.dim() != (n, NUM_CLASSES)
    {
        return Err(Error::validation(
            "forward trace does not match this bag and model",
        ));
    }

    let loss = cross_entropy(&trace.logits, label);
    let mut grads = p.zeros_like();

    // softmax + cross-entropy
    let mut d_logits = trace.probs.clone();
    d_logits[label.index()] -= 1.0;
    grads.bc.assign(&d_logits);

    // classifier heads
    let mut d_slide = Array2::<f64>::zeros((NUM_CLASSES, cfg.hidden_width));
    for m in 0..NUM_CLASSES {
        let row = match cfg.classifier_mode {
            ClassifierMode::PerClass => m,
            ClassifierMode::Shared => 0,
        };
        grads
            .wc
            .row_mut(row)
            .scaled_add(d_logits[m], &trace.slide.row(m));
        d_slide.row_mut(m).scaled_add(d_logits[m], &p.wc.row(row));
    }

    // slide = Aᵀ H
    let d_attention = trace.hidden.dot(&d_slide.t());
    let mut d_hidden = trace.attention.dot(&d_slide);

    // softmax over patches, per column
    let mut d_raw = Array2::<f64>::zeros((n, NUM_CLASSES));
    for m in 0..NUM_CLASSES {
        let a = trace.attention.column(m);
        let da = d_attention.column(m);
        let inner = a.dot(&da);
        Zip::from(d_raw.column_mut(m))
            .and(&a)
            .and(&da)
            .for_each(|out, &ak, &dak| *out = ak * (dak - inner));
    }

    // raw = G Waᵀ
    grads.wa = d_raw.t().dot(&trace.gated);
    let mut d_gated = d_raw.dot(&p.wa);
    if let Some(mask) = &trace.gated_mask {
        d_gated *= mask;
    }

    // G0 = tanh(H Vaᵀ) ⊙ sigm(H Uaᵀ)
    let mut d_pre_v = &d_gated * &trace.gate_sigmoid;
    Zip::from(&mut d_pre_v)
        .and(&trace.gate_tanh)
        .for_each(|d, &t| *d *= 1.0 - t * t);
    let mut d_pre_u = &d_gated * &trace.gate_tanh;
    Zip::from(&mut d_pre_u)
        .and(&trace.gate_sigmoid)
        .for_each(|d, &s| *d *= s * (1.0 - s));
    grads.va = d_pre_v.t().dot(&trace.hidden);
    grads.ua = d_pre_u.t().dot(&trace.hidden);
    d_hidden += &d_pre_v.dot(&p.va);
    d_hidden += &d_pre_u.dot(&p.ua);

    // H = act(Z1) ⊙ mask
    if let Some(mask) = &trace.hidden_mask {
        d_hidden *= mask;
    }
    if cfg.compress_activation == Activation::Relu {
        Zip::from(&mut d_hidden)
            .and(&trace.pre_activation)
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
    }
    grads.w1 = d_hidden.t().dot(&e);
    grads.b1 = d_hidden.sum_axis(Axis(0));

    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains non-finite values".into()));
    }
    Ok((loss, grads))
}

pub fn backward(
    trace: &ForwardTrace,
    bag: &SlideBag,
    model: &MilModel,
    label: SubtypeLabel,
) -> Result<(f64, MilGrads)> {
    backward_matrix(trace, embeddings_f64(bag).view(), model, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::PatchRef;
    use ndarray::array;

    fn tiny(d: usize) -> ModelConfig {
        ModelConfig::new(d).with_widths(6, 4)
    }

    fn bag_from(e: Array2<f32>) -> SlideBag {
        let patches = (0..e.nrows() as u32).map(|k| PatchRef::new(256 * k, 0)).collect();
        SlideBag::new("t", Some(SubtypeLabel::Abc), patches, e).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = MilModel::init(tiny(5), 1).unwrap();
        let b = MilModel::init(tiny(5), 1).unwrap();
        let c = MilModel::init(tiny(5), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        assert!(a.params.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_shapes_and_bounds() {
        let m = MilModel::init(ModelConfig::new(8), 0).unwrap();
        assert_eq!(m.params.w1.dim(), (512, 8));
        assert_eq!(m.params.ua.dim(), (256, 512));
        assert_eq!(m.params.wa.dim(), (2, 256));
        assert_eq!(m.params.wc.dim(), (2, 512));
        let bound = (1.0f64 / 8.0).sqrt() + 1e-7;
        assert!(m.params.w1.iter().all(|v| v.abs() <= bound));
        assert!(MilModel::init(ModelConfig::new(0), 0).is_err());
    }

    #[test]
    fn compress_zero_and_identity() {
        let mut m = MilModel::init(ModelConfig::new(4), 0).unwrap();
        m.params.w1.fill(0.0);
        let e = array![[1.0, 2.0, 3.0, 4.0]];
        assert!(compress(e.view(), &m).unwrap().iter().all(|&v| v == 0.0));

        let mut m = MilModel::init(ModelConfig::new(512), 0).unwrap();
        m.params.w1 = Array2::eye(512);
        let e = Array2::from_shape_fn((2, 512), |(i, j)| (i + j) as f64 * 0.01);
        assert_eq!(compress(e.view(), &m).unwrap(), e);
        assert!(compress(array![[1.0, 2.0]].view(), &m).is_err());
    }

    #[test]
    fn compress_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = MilModel::init(tiny(4), 3).unwrap();
        m.params.b1 = Array1::from_shape_simple_fn(6, || rng.random_range(-0.5..0.5));
        let e = random_matrix(&mut rng, 3, 4);
        let h = compress(e.view(), &m).unwrap();
        for k in 0..3 {
            for i in 0..6 {
                let mut acc = m.params.b1[i];
                for j in 0..4 {
                    acc += m.params.w1[[i, j]] * e[[k, j]];
                }
                assert!((h[[k, i]] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_singleton_and_symmetric() {
        let m = MilModel::init(tiny(3), 4).unwrap();
        let h1 = array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]];
        assert_eq!(attention_scores(h1.view(), &m).unwrap(), array![[1.0, 1.0]]);
        let h2 = array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]];
        let a = attention_scores(h2.view(), &m).unwrap();
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MilModel::init(tiny(3), 9).unwrap();
        let h = random_matrix(&mut rng, 3, 6);
        let a = attention_scores(h.view(), &m).unwrap();
        let p = &m.params;
        for branch in 0..2 {
            let mut raw = [0.0; 3];
            for (k, r) in raw.iter_mut().enumerate() {
                for j in 0..4 {
                    let mut v = 0.0;
                    let mut u = 0.0;
                    for i in 0..6 {
                        v += p.va[[j, i]] * h[[k, i]];
                        u += p.ua[[j, i]] * h[[k, i]];
                    }
                    *r += p.wa[[branch, j]] * v.tanh() * (1.0 / (1.0 + (-u).exp()));
                }
            }
            let denom: f64 = raw.iter().map(|r| r.exp()).sum();
            for k in 0..3 {
                assert!((a[[k, branch]] - raw[k].exp() / denom).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let h = array![[1.0, 0.0, 2.0], [0.0, 1.0, 4.0]];
        let uniform = array![[0.5, 0.5], [0.5, 0.5]];
        let s = aggregate(h.view(), uniform.view()).unwrap();
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5, 3.0]);
        let select = array![[0.0, 1.0], [1.0, 0.0]];
        let s = aggregate(h.view(), select.view()).unwrap();
        assert_eq!(s.row(0), h.row(1));
        assert_eq!(s.row(1), h.row(0));
        let weighted = array![[0.25, 0.25], [0.75, 0.75]];
        let s = aggregate(h.view(), weighted.view()).unwrap();
        assert_eq!(s.row(0).to_vec(), vec![0.25, 0.75, 3.5]);
        let bad = array![[0.2, 0.5], [0.2, 0.5]];
        assert!(aggregate(h.view(), bad.view()).is_err());
    }

    #[test]
    fn classify_cases() {
        let mut m = MilModel::init(tiny(3), 0).unwrap();
        m.params.wc.fill(0.0);
        let slide = Array2::from_elem((2, 6), 0.3);
        let (_, probs) = classify(slide.view(), &m).unwrap();
        assert_eq!(probs.to_vec(), vec![0.5, 0.5]);
        m.params.bc = array![7.5, 7.5];
        let (_, probs) = classify(slide.view(), &m).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-15);
        m.params.bc = array![1.0, 0.0];
        let (logits, probs) = classify(slide.view(), &m).unwrap();
        assert_eq!(logits.to_vec(), vec![1.0, 0.0]);
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((probs[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn shared_head_uses_one_row() {
        let mut cfg = tiny(3);
        cfg.classifier_mode = ClassifierMode::Shared;
        let mut m = MilModel::init(cfg, 0).unwrap();
        assert_eq!(m.params.wc.nrows(), 1);
        m.params.wc = Array2::from_elem((1, 6), 1.0);
        let slide = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 6]];
        let (logits, _) = classify(slide.view(), &m).unwrap();
        assert_eq!(logits.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn forward_modes_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_matrix(&mut rng, 5, 3).mapv(|v| v as f32);
        let bag = bag_from(e);
        let m = MilModel::init(tiny(3), 2).unwrap();
        assert_eq!(
            forward(&bag, &m, Mode::Eval).unwrap(),
            forward(&bag, &m, Mode::Eval).unwrap()
        );
        let train = Mode::Train { dropout_seed: 7 };
        let a = forward(&bag, &m, train).unwrap();
        assert_eq!(a, forward(&bag, &m, train).unwrap());
        assert!(a.hidden_mask.is_some());
        let other = forward(&bag, &m, Mode::Train { dropout_seed: 8 }).unwrap();
        assert_ne!(a.hidden_mask, other.hidden_mask);
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln2() {
        let loss = cross_entropy(&array![0.0, 0.0], SubtypeLabel::Abc);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_is_probs_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_matrix(&mut rng, 4, 3);
        let m = MilModel::init(tiny(3), 1).unwrap();
        let trace = forward_matrix(e.view(), &m, Mode::Eval).unwrap();
        let (_, g) = backward_matrix(&trace, e.view(), &m, SubtypeLabel::Gcb).unwrap();
        assert!((g.bc[0] - trace.probs[0]).abs() < 1e-15);
        assert!((g.bc[1] - (trace.probs[1] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_trace_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MilModel::init(tiny(3), 1).unwrap();
        let e = random_matrix(&mut rng, 4, 3);
        let trace = forward_matrix(e.view(), &m, Mode::Eval).unwrap();
        let other = random_matrix(&mut rng, 5, 3);
        assert!(backward_matrix(&trace, other.view(), &m, SubtypeLabel::Abc).is_err());
    }

    #[test]
    fn identity_activation_and_shared_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cfg = tiny(4);
        cfg.compress_activation = Activation::Identity;
        cfg.classifier_mode = ClassifierMode::Shared;
        let m = MilModel::init(cfg, 5).unwrap();
        let e = random_matrix(&mut rng, 3, 4);
        let mode = Mode::Train { dropout_seed: 2 };
        let trace = forward_matrix(e.view(), &m, mode).unwrap();
        let (_, g) = backward_matrix(&trace, e.view(), &m, SubtypeLabel::Abc).unwrap();
        let eps = 1e-5;
        let mut probe = m.clone();
        let analytic = g.wc[[0, 2]];
        probe.params.wc[[0, 2]] += eps;
        let up = forward_matrix(e.view(), &probe, mode).unwrap();
        probe.params.wc[[0, 2]] -= 2.0 * eps;
        let down = forward_matrix(e.view(), &probe, mode).unwrap();
        let numeric = (cross_entropy(&up.logits, SubtypeLabel::Abc)
            - cross_entropy(&down.logits, SubtypeLabel::Abc))
            / (2.0 * eps);
        assert!((analytic - numeric).abs() < 1e-8);
    }
}

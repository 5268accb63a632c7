//! The pluggable sequence encoder and the four classifier heads.
//!
//! Every model shares one skeleton: an encoder producing a
//! `(batch, seq_len, hidden_dim)` map from token ids, a head reducing that
//! map to a feature vector through a `dense_units`-wide rectified layer, and
//! a classifier fan-out — one 2-unit branch for binary detection, seven for
//! category identification. Heads are hot-swappable because all four consume
//! the identical encoder output contract:
//!
//! - `Fnn`     — flatten → dense
//! - `BiLstm`  — bidirectional LSTM, concatenated final states → dense
//! - `Cnn`     — conv 10×10/64 → 2×2 pool → conv 5×5/32 → 2×2 pool → dense
//! - `BlsCnn`  — unidirectional LSTM over the sequence, then the CNN stack
//!
//! Convolution kernel/filter sizes default to the full-scale values above and
//! shrink through [`HeadDims`] for desk-scale runs, where the hidden maps are
//! too small for 10×10 kernels. All parameters live in f64 and initialize
//! with uniform fan-in scaling from the run seed, so builds and forwards are
//! reproducible bit for bit.

mod layers;
pub mod plan;

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use layers::{
    relu, relu_backward, reverse_time, Conv2d, Conv2dCache, Dense, Embedding, Lstm, LstmCache,
    MaxPool2d, MaxPoolCache,
};
pub use plan::{conv_trace, plan_model, ConvTrace, ModelPlan};

/// Max-pooling window and stride.
pub const POOL: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{stage} output collapses to {rows}×{cols}; shrink kernels or enlarge the input")]
    NonPositiveShape { stage: String, rows: i64, cols: i64 },
    #[error("expected sequences of length {expected}, got {got}")]
    SequenceLength { expected: usize, got: usize },
    #[error("token id {id} outside vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint mismatch: {reason}")]
    Checkpoint { reason: String },
    #[error("encoder weights {path}: {reason}")]
    EncoderWeights { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Fnn,
    BiLstm,
    Cnn,
    BlsCnn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Fnn,
        HeadKind::BiLstm,
        HeadKind::Cnn,
        HeadKind::BlsCnn,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "fnn" => Some(HeadKind::Fnn),
            "bilstm" | "bi-lstm" => Some(HeadKind::BiLstm),
            "cnn" => Some(HeadKind::Cnn),
            "bls-cnn" | "blscnn" => Some(HeadKind::BlsCnn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Fnn => "fnn",
            HeadKind::BiLstm => "bilstm",
            HeadKind::Cnn => "cnn",
            HeadKind::BlsCnn => "bls-cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subtask {
    A,
    B,
}

impl Subtask {
    /// Classifier branches: one 2-unit output for A, seven for B.
    pub fn output_arity(&self) -> usize {
        match self {
            Subtask::A => 1,
            Subtask::B => 7,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Some(Subtask::A),
            "B" => Some(Subtask::B),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Subtask::A => "A",
            Subtask::B => "B",
        }
    }
}

/// How the BiLSTM head reduces its per-step outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BiLstmReadout {
    /// Concatenated final hidden states of the two directions.
    #[default]
    FinalState,
    /// Mean over all per-step outputs.
    MeanPool,
}

/// Head layer sizes; defaults are the full-scale values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub dense_units: usize,
    pub lstm_units: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub bilstm_readout: BiLstmReadout,
}

impl Default for HeadDims {
    fn default() -> Self {
        HeadDims {
            dense_units: 106,
            lstm_units: 106,
            conv1_filters: 64,
            conv1_kernel: 10,
            conv2_filters: 32,
            conv2_kernel: 5,
            bilstm_readout: BiLstmReadout::FinalState,
        }
    }
}

impl HeadDims {
    /// Sizes small enough for 30-token, 16-dim desk-scale encoders.
    pub fn tiny() -> Self {
        HeadDims {
            dense_units: 12,
            lstm_units: 12,
            conv1_filters: 4,
            conv1_kernel: 3,
            conv2_filters: 3,
            conv2_kernel: 2,
            bilstm_readout: BiLstmReadout::FinalState,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Seeded random embeddings; the desk-scale and test encoder.
    TinyRandom,
    /// Embedding tables loaded from a weights file.
    Pretrained { weights: PathBuf },
}

/// Encoder contract: token ids in, a `seq_len × hidden_dim` map per sample
/// out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub kind: EncoderKind,
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            seq_len: 30,
            hidden_dim: 16,
            vocab_size,
            kind: EncoderKind::TinyRandom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub subtask: Subtask,
    #[serde(default)]
    pub dims: HeadDims,
    /// Exclude encoder parameters from optimization.
    #[serde(default)]
    pub freeze_encoder: bool,
}

/// Per-example logits: `(batch, branches, 2)` with one branch for subtask A
/// and seven for subtask B.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Array3<f64>,
}

impl HeadOutput {
    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }
}

enum Head {
    Fnn {
        dense: Dense,
    },
    BiLstm {
        fwd: Lstm,
        bwd: Lstm,
        dense: Dense,
    },
    Cnn {
        conv1: Conv2d,
        conv2: Conv2d,
        dense: Dense,
    },
    BlsCnn {
        lstm: Lstm,
        conv1: Conv2d,
        conv2: Conv2d,
        dense: Dense,
    },
}

struct ConvStackCache {
    map_shape: (usize, usize, usize, usize),
    cc1: Conv2dCache,
    pre1: Array4<f64>,
    pc1: MaxPoolCache,
    p1_shape: (usize, usize, usize, usize),
    cc2: Conv2dCache,
    pre2: Array4<f64>,
    pc2: MaxPoolCache,
    flat_dims: (usize, usize, usize, usize),
}

enum HeadCache {
    Fnn,
    BiLstm {
        cache_f: LstmCache,
        cache_b: LstmCache,
        enc_rev: Array3<f64>,
    },
    Cnn(ConvStackCache),
    BlsCnn {
        lstm_cache: LstmCache,
        stack: ConvStackCache,
    },
}

/// Everything needed to run backward after a forward pass.
pub struct ForwardCache {
    tokens: Array2<usize>,
    mask: Array2<f64>,
    enc: Array3<f64>,
    head: HeadCache,
    dense_in: Array2<f64>,
    dense_pre: Array2<f64>,
    feat: Array2<f64>,
}

/// Per-parameter gradients aligned with [`Model::param_views`].
pub struct Gradients(pub Vec<ArrayD<f64>>);

impl Gradients {
    /// Value at a flat index over the concatenated parameter vector.
    pub fn get(&self, flat: usize) -> f64 {
        let mut offset = flat;
        for tensor in &self.0 {
            if offset < tensor.len() {
                return tensor.as_slice().expect("standard layout")[offset];
            }
            offset -= tensor.len();
        }
        panic!("flat index {flat} out of range");
    }
}

pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    encoder: Embedding,
    head: Head,
    classifiers: Vec<Dense>,
}

/// Builds a parameterized model; all layers draw from one stream seeded by
/// `seed`, in declaration order.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let plan = plan_model(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = &spec.encoder;
    let encoder = match &enc.kind {
        EncoderKind::TinyRandom => {
            Embedding::new(&mut rng, enc.vocab_size, enc.seq_len, enc.hidden_dim)
        }
        EncoderKind::Pretrained { weights } => load_pretrained_encoder(weights, enc)?,
    };
    let dims = &spec.dims;
    let head = match spec.head {
        HeadKind::Fnn => Head::Fnn {
            dense: Dense::new(&mut rng, plan.dense_in, dims.dense_units),
        },
        HeadKind::BiLstm => Head::BiLstm {
            fwd: Lstm::new(&mut rng, enc.hidden_dim, dims.lstm_units),
            bwd: Lstm::new(&mut rng, enc.hidden_dim, dims.lstm_units),
            dense: Dense::new(&mut rng, plan.dense_in, dims.dense_units),
        },
        HeadKind::Cnn => Head::Cnn {
            conv1: Conv2d::new(&mut rng, 1, dims.conv1_filters, dims.conv1_kernel),
            conv2: Conv2d::new(
                &mut rng,
                dims.conv1_filters,
                dims.conv2_filters,
                dims.conv2_kernel,
            ),
            dense: Dense::new(&mut rng, plan.dense_in, dims.dense_units),
        },
        HeadKind::BlsCnn => Head::BlsCnn {
            lstm: Lstm::new(&mut rng, enc.hidden_dim, dims.lstm_units),
            conv1: Conv2d::new(&mut rng, 1, dims.conv1_filters, dims.conv1_kernel),
            conv2: Conv2d::new(
                &mut rng,
                dims.conv1_filters,
                dims.conv2_filters,
                dims.conv2_kernel,
            ),
            dense: Dense::new(&mut rng, plan.dense_in, dims.dense_units),
        },
    };
    let classifiers = (0..plan.outputs)
        .map(|_| Dense::new(&mut rng, dims.dense_units, 2))
        .collect();
    Ok(Model {
        spec: spec.clone(),
        seed,
        encoder,
        head,
        classifiers,
    })
}

/// Zero-parameter skeleton with the right shapes (checkpoint loading).
fn allocate_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let plan = plan_model(spec)?;
    let enc = &spec.encoder;
    let dims = &spec.dims;
    let head = match spec.head {
        HeadKind::Fnn => Head::Fnn {
            dense: Dense::zeros(plan.dense_in, dims.dense_units),
        },
        HeadKind::BiLstm => Head::BiLstm {
            fwd: Lstm::zeros(enc.hidden_dim, dims.lstm_units),
            bwd: Lstm::zeros(enc.hidden_dim, dims.lstm_units),
            dense: Dense::zeros(plan.dense_in, dims.dense_units),
        },
        HeadKind::Cnn => Head::Cnn {
            conv1: Conv2d::zeros(1, dims.conv1_filters, dims.conv1_kernel),
            conv2: Conv2d::zeros(dims.conv1_filters, dims.conv2_filters, dims.conv2_kernel),
            dense: Dense::zeros(plan.dense_in, dims.dense_units),
        },
        HeadKind::BlsCnn => Head::BlsCnn {
            lstm: Lstm::zeros(enc.hidden_dim, dims.lstm_units),
            conv1: Conv2d::zeros(1, dims.conv1_filters, dims.conv1_kernel),
            conv2: Conv2d::zeros(dims.conv1_filters, dims.conv2_filters, dims.conv2_kernel),
            dense: Dense::zeros(plan.dense_in, dims.dense_units),
        },
    };
    Ok(Model {
        spec: spec.clone(),
        seed,
        encoder: Embedding::zeros(enc.vocab_size, enc.seq_len, enc.hidden_dim),
        head,
        classifiers: (0..plan.outputs)
            .map(|_| Dense::zeros(dims.dense_units, 2))
            .collect(),
    })
}

fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu4_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

fn conv_stack_forward(
    conv1: &Conv2d,
    conv2: &Conv2d,
    map: &Array4<f64>,
) -> (Array2<f64>, ConvStackCache) {
    let (y1, cc1) = conv1.forward(map);
    let act1 = relu4(&y1);
    let (p1, pc1) = MaxPool2d::forward(POOL, &act1);
    let (y2, cc2) = conv2.forward(&p1);
    let act2 = relu4(&y2);
    let (p2, pc2) = MaxPool2d::forward(POOL, &act2);
    let flat_dims = p2.dim();
    let (b, c, h, w) = flat_dims;
    let flat = p2
        .into_shape_with_order((b, c * h * w))
        .expect("conv flatten");
    (
        flat,
        ConvStackCache {
            map_shape: map.dim(),
            cc1,
            pre1: y1,
            pc1,
            p1_shape: p1.dim(),
            cc2,
            pre2: y2,
            pc2,
            flat_dims,
        },
    )
}

/// Gradients of the conv stack: (dw1, db1, dw2, db2, dmap).
type ConvStackGrads = (
    Array4<f64>,
    Array1<f64>,
    Array4<f64>,
    Array1<f64>,
    Array4<f64>,
);

fn conv_stack_backward(
    conv1: &Conv2d,
    conv2: &Conv2d,
    stack: &ConvStackCache,
    dflat: &Array2<f64>,
) -> ConvStackGrads {
    let (b, c, h, w) = stack.flat_dims;
    let dp2 = dflat
        .clone()
        .into_shape_with_order((b, c, h, w))
        .expect("conv unflatten");
    let dact2 = MaxPool2d::backward(&stack.pc2, &dp2);
    let dy2 = relu4_backward(&stack.pre2, &dact2);
    let (dw2, db2, dp1) = conv2.backward(stack.p1_shape, &stack.cc2, &dy2);
    let dact1 = MaxPool2d::backward(&stack.pc1, &dp1);
    let dy1 = relu4_backward(&stack.pre1, &dact1);
    let (dw1, db1, dmap) = conv1.backward(stack.map_shape, &stack.cc1, &dy1);
    (dw1, db1, dw2, db2, dmap)
}

impl Model {
    pub fn plan(&self) -> ModelPlan {
        plan_model(&self.spec).expect("spec validated at build")
    }

    fn check_inputs(
        &self,
        tokens: ArrayView2<'_, usize>,
        mask: ArrayView2<'_, f64>,
    ) -> Result<(), ModelError> {
        let enc = &self.spec.encoder;
        if tokens.ncols() != enc.seq_len || mask.dim() != tokens.dim() {
            return Err(ModelError::SequenceLength {
                expected: enc.seq_len,
                got: tokens.ncols(),
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= enc.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: enc.vocab_size,
            });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tokens: ArrayView2<'_, usize>,
        mask: ArrayView2<'_, f64>,
    ) -> Result<HeadOutput, ModelError> {
        Ok(self.forward_cached(tokens, mask)?.0)
    }

    pub fn forward_cached(
        &self,
        tokens: ArrayView2<'_, usize>,
        mask: ArrayView2<'_, f64>,
    ) -> Result<(HeadOutput, ForwardCache), ModelError> {
        self.check_inputs(tokens, mask)?;
        let batch = tokens.nrows();
        let enc_out = self.encoder.forward(tokens, mask);
        let (seq, hidden) = (self.spec.encoder.seq_len, self.spec.encoder.hidden_dim);

        let (dense_in, head_cache, dense) = match &self.head {
            Head::Fnn { dense } => {
                let flat = enc_out
                    .clone()
                    .into_shape_with_order((batch, seq * hidden))
                    .expect("encoder flatten");
                (flat, HeadCache::Fnn, dense)
            }
            Head::BiLstm { fwd, bwd, dense } => {
                let (hs_f, cache_f) = fwd.forward(&enc_out);
                let enc_rev = reverse_time(&enc_out);
                let (hs_b, cache_b) = bwd.forward(&enc_rev);
                let readout = match self.spec.dims.bilstm_readout {
                    BiLstmReadout::FinalState => concatenate(
                        Axis(1),
                        &[
                            hs_f.slice(s![.., seq - 1, ..]),
                            hs_b.slice(s![.., seq - 1, ..]),
                        ],
                    )
                    .expect("state concat"),
                    BiLstmReadout::MeanPool => {
                        let mean_f = hs_f.mean_axis(Axis(1)).expect("nonempty seq");
                        let mean_b = reverse_time(&hs_b)
                            .mean_axis(Axis(1))
                            .expect("nonempty seq");
                        concatenate(Axis(1), &[mean_f.view(), mean_b.view()]).expect("mean concat")
                    }
                };
                (
                    readout,
                    HeadCache::BiLstm {
                        cache_f,
                        cache_b,
                        enc_rev,
                    },
                    dense,
                )
            }
            Head::Cnn {
                conv1,
                conv2,
                dense,
            } => {
                let map = enc_out.clone().insert_axis(Axis(1));
                let (flat, stack) = conv_stack_forward(conv1, conv2, &map);
                (flat, HeadCache::Cnn(stack), dense)
            }
            Head::BlsCnn {
                lstm,
                conv1,
                conv2,
                dense,
            } => {
                let (hs, lstm_cache) = lstm.forward(&enc_out);
                let map = hs.insert_axis(Axis(1));
                let (flat, stack) = conv_stack_forward(conv1, conv2, &map);
                (flat, HeadCache::BlsCnn { lstm_cache, stack }, dense)
            }
        };

        let dense_pre = dense.forward(&dense_in);
        let feat = relu(&dense_pre);
        let mut logits = Array3::zeros((batch, self.classifiers.len(), 2));
        for (k, classifier) in self.classifiers.iter().enumerate() {
            logits
                .slice_mut(s![.., k, ..])
                .assign(&classifier.forward(&feat));
        }

        Ok((
            HeadOutput { logits },
            ForwardCache {
                tokens: tokens.to_owned(),
                mask: mask.to_owned(),
                enc: enc_out,
                head: head_cache,
                dense_in,
                dense_pre,
                feat,
            },
        ))
    }

    /// Backpropagates `dlogits` (same shape as the forward logits) through
    /// the whole model.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array3<f64>) -> Gradients {
        let batch = cache.tokens.nrows();
        let (seq, hidden) = (self.spec.encoder.seq_len, self.spec.encoder.hidden_dim);
        let units = self.spec.dims.dense_units;

        let mut classifier_grads: Vec<ArrayD<f64>> = Vec::new();
        let mut dfeat = Array2::zeros((batch, units));
        for (k, classifier) in self.classifiers.iter().enumerate() {
            let dk = dlogits.slice(s![.., k, ..]).to_owned();
            let (dw, db, dx) = classifier.backward(&cache.feat, &dk);
            classifier_grads.push(dw.into_dyn());
            classifier_grads.push(db.into_dyn());
            dfeat += &dx;
        }

        let dpre = relu_backward(&cache.dense_pre, &dfeat);
        let (head_grads, denc): (Vec<ArrayD<f64>>, Array3<f64>) = match (&self.head, &cache.head) {
            (Head::Fnn { dense }, HeadCache::Fnn) => {
                let (dw, db, dflat) = dense.backward(&cache.dense_in, &dpre);
                let denc = dflat
                    .into_shape_with_order((batch, seq, hidden))
                    .expect("encoder unflatten");
                (vec![dw.into_dyn(), db.into_dyn()], denc)
            }
            (
                Head::BiLstm { fwd, bwd, dense },
                HeadCache::BiLstm {
                    cache_f,
                    cache_b,
                    enc_rev,
                },
            ) => {
                let (dw, db, dreadout) = dense.backward(&cache.dense_in, &dpre);
                let lstm_units = self.spec.dims.lstm_units;
                let d_f = dreadout.slice(s![.., 0..lstm_units]).to_owned();
                let d_b = dreadout
                    .slice(s![.., lstm_units..2 * lstm_units])
                    .to_owned();
                let (dhs_f, dhs_b) = match self.spec.dims.bilstm_readout {
                    BiLstmReadout::FinalState => {
                        let mut dhs_f = Array3::zeros((batch, seq, lstm_units));
                        dhs_f.slice_mut(s![.., seq - 1, ..]).assign(&d_f);
                        let mut dhs_b = Array3::zeros((batch, seq, lstm_units));
                        dhs_b.slice_mut(s![.., seq - 1, ..]).assign(&d_b);
                        (dhs_f, dhs_b)
                    }
                    BiLstmReadout::MeanPool => {
                        let scale = 1.0 / seq as f64;
                        let spread = |d: &Array2<f64>| {
                            let mut out = Array3::zeros((batch, seq, lstm_units));
                            for t in 0..seq {
                                out.slice_mut(s![.., t, ..]).assign(&(d * scale));
                            }
                            out
                        };
                        (spread(&d_f), reverse_time(&spread(&d_b)))
                    }
                };
                let (dwx_f, dwh_f, db_f, dx_f) = fwd.backward(&cache.enc, cache_f, &dhs_f);
                let (dwx_b, dwh_b, db_b, dx_b) = bwd.backward(enc_rev, cache_b, &dhs_b);
                let denc = dx_f + reverse_time(&dx_b);
                (
                    vec![
                        dwx_f.into_dyn(),
                        dwh_f.into_dyn(),
                        db_f.into_dyn(),
                        dwx_b.into_dyn(),
                        dwh_b.into_dyn(),
                        db_b.into_dyn(),
                        dw.into_dyn(),
                        db.into_dyn(),
                    ],
                    denc,
                )
            }
            (
                Head::Cnn {
                    conv1,
                    conv2,
                    dense,
                },
                HeadCache::Cnn(stack),
            ) => {
                let (dw, db, dflat) = dense.backward(&cache.dense_in, &dpre);
                let (dw1, db1, dw2, db2, dmap) = conv_stack_backward(conv1, conv2, stack, &dflat);
                let denc = dmap.remove_axis(Axis(1));
                (
                    vec![
                        dw1.into_dyn(),
                        db1.into_dyn(),
                        dw2.into_dyn(),
                        db2.into_dyn(),
                        dw.into_dyn(),
                        db.into_dyn(),
                    ],
                    denc,
                )
            }
            (
                Head::BlsCnn {
                    lstm,
                    conv1,
                    conv2,
                    dense,
                },
                HeadCache::BlsCnn { lstm_cache, stack },
            ) => {
                let (dw, db, dflat) = dense.backward(&cache.dense_in, &dpre);
                let (dw1, db1, dw2, db2, dmap) = conv_stack_backward(conv1, conv2, stack, &dflat);
                let dhs = dmap.remove_axis(Axis(1));
                let (dwx, dwh, dbl, denc) = lstm.backward(&cache.enc, lstm_cache, &dhs);
                (
                    vec![
                        dwx.into_dyn(),
                        dwh.into_dyn(),
                        dbl.into_dyn(),
                        dw1.into_dyn(),
                        db1.into_dyn(),
                        dw2.into_dyn(),
                        db2.into_dyn(),
                        dw.into_dyn(),
                        db.into_dyn(),
                    ],
                    denc,
                )
            }
            _ => unreachable!("cache kind always matches head kind"),
        };

        let (dtoken, dposition) =
            self.encoder
                .backward(cache.tokens.view(), cache.mask.view(), &denc);
        let mut grads = vec![dtoken.into_dyn(), dposition.into_dyn()];
        grads.extend(head_grads);
        grads.extend(classifier_grads);
        Gradients(grads)
    }

    /// Canonical parameter names aligned with [`Self::param_views`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["encoder.token".to_string(), "encoder.position".to_string()];
        match &self.head {
            Head::Fnn { .. } => names.extend(["head.dense.w".into(), "head.dense.b".into()]),
            Head::BiLstm { .. } => names.extend([
                "head.fwd.w_x".into(),
                "head.fwd.w_h".into(),
                "head.fwd.b".into(),
                "head.bwd.w_x".into(),
                "head.bwd.w_h".into(),
                "head.bwd.b".into(),
                "head.dense.w".into(),
                "head.dense.b".into(),
            ]),
            Head::Cnn { .. } => names.extend([
                "head.conv1.w".into(),
                "head.conv1.b".into(),
                "head.conv2.w".into(),
                "head.conv2.b".into(),
                "head.dense.w".into(),
                "head.dense.b".into(),
            ]),
            Head::BlsCnn { .. } => names.extend([
                "head.lstm.w_x".into(),
                "head.lstm.w_h".into(),
                "head.lstm.b".into(),
                "head.conv1.w".into(),
                "head.conv1.b".into(),
                "head.conv2.w".into(),
                "head.conv2.b".into(),
                "head.dense.w".into(),
                "head.dense.b".into(),
            ]),
        }
        for k in 0..self.classifiers.len() {
            names.push(format!("classifier.{k}.w"));
            names.push(format!("classifier.{k}.b"));
        }
        names
    }

    /// All parameter tensors in canonical order.
    pub fn param_views(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        let mut views = vec![
            self.encoder.token.view().into_dyn(),
            self.encoder.position.view().into_dyn(),
        ];
        match &self.head {
            Head::Fnn { dense } => {
                views.push(dense.w.view().into_dyn());
                views.push(dense.b.view().into_dyn());
            }
            Head::BiLstm { fwd, bwd, dense } => {
                for lstm in [fwd, bwd] {
                    views.push(lstm.w_x.view().into_dyn());
                    views.push(lstm.w_h.view().into_dyn());
                    views.push(lstm.b.view().into_dyn());
                }
                views.push(dense.w.view().into_dyn());
                views.push(dense.b.view().into_dyn());
            }
            Head::Cnn {
                conv1,
                conv2,
                dense,
            } => {
                for conv in [conv1, conv2] {
                    views.push(conv.w.view().into_dyn());
                    views.push(conv.b.view().into_dyn());
                }
                views.push(dense.w.view().into_dyn());
                views.push(dense.b.view().into_dyn());
            }
            Head::BlsCnn {
                lstm,
                conv1,
                conv2,
                dense,
            } => {
                views.push(lstm.w_x.view().into_dyn());
                views.push(lstm.w_h.view().into_dyn());
                views.push(lstm.b.view().into_dyn());
                for conv in [conv1, conv2] {
                    views.push(conv.w.view().into_dyn());
                    views.push(conv.b.view().into_dyn());
                }
                views.push(dense.w.view().into_dyn());
                views.push(dense.b.view().into_dyn());
            }
        }
        for classifier in &self.classifiers {
            views.push(classifier.w.view().into_dyn());
            views.push(classifier.b.view().into_dyn());
        }
        views
    }

    pub fn param_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        let mut views = vec![
            self.encoder.token.view_mut().into_dyn(),
            self.encoder.position.view_mut().into_dyn(),
        ];
        match &mut self.head {
            Head::Fnn { dense } => {
                views.push(dense.w.view_mut().into_dyn());
                views.push(dense.b.view_mut().into_dyn());
            }
            Head::BiLstm { fwd, bwd, dense } => {
                for lstm in [fwd, bwd] {
                    views.push(lstm.w_x.view_mut().into_dyn());
                    views.push(lstm.w_h.view_mut().into_dyn());
                    views.push(lstm.b.view_mut().into_dyn());
                }
                views.push(dense.w.view_mut().into_dyn());
                views.push(dense.b.view_mut().into_dyn());
            }
            Head::Cnn {
                conv1,
                conv2,
                dense,
            } => {
                for conv in [conv1, conv2] {
                    views.push(conv.w.view_mut().into_dyn());
                    views.push(conv.b.view_mut().into_dyn());
                }
                views.push(dense.w.view_mut().into_dyn());
                views.push(dense.b.view_mut().into_dyn());
            }
            Head::BlsCnn {
                lstm,
                conv1,
                conv2,
                dense,
            } => {
                views.push(lstm.w_x.view_mut().into_dyn());
                views.push(lstm.w_h.view_mut().into_dyn());
                views.push(lstm.b.view_mut().into_dyn());
                for conv in [conv1, conv2] {
                    views.push(conv.w.view_mut().into_dyn());
                    views.push(conv.b.view_mut().into_dyn());
                }
                views.push(dense.w.view_mut().into_dyn());
                views.push(dense.b.view_mut().into_dyn());
            }
        }
        for classifier in &mut self.classifiers {
            views.push(classifier.w.view_mut().into_dyn());
            views.push(classifier.b.view_mut().into_dyn());
        }
        views
    }

    /// Index of the first tensor the optimizer may update.
    pub fn first_trainable_tensor(&self) -> usize {
        if self.spec.freeze_encoder {
            2
        } else {
            0
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_views().iter().map(|v| v.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.param_views()
            .iter()
            .skip(self.first_trainable_tensor())
            .map(|v| v.len())
            .sum()
    }

    /// Reads the parameter at a flat index over the canonical order.
    pub fn get_param(&self, flat: usize) -> f64 {
        let mut offset = flat;
        for view in self.param_views() {
            if offset < view.len() {
                return view.as_slice().expect("standard layout")[offset];
            }
            offset -= view.len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn set_param(&mut self, flat: usize, value: f64) {
        let mut offset = flat;
        for mut view in self.param_views_mut() {
            if offset < view.len() {
                view.as_slice_mut().expect("standard layout")[offset] = value;
                return;
            }
            offset -= view.len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .param_names()
            .into_iter()
            .zip(self.param_views())
            .map(|(name, view)| NamedTensor {
                name,
                shape: view.shape().to_vec(),
                data: view.iter().cloned().collect(),
            })
            .collect();
        Checkpoint {
            spec: self.spec.clone(),
            seed: self.seed,
            activation: "relu".to_string(),
            tensors,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Model, ModelError> {
        let mut model = allocate_model(&cp.spec, cp.seed)?;
        let names = model.param_names();
        if names.len() != cp.tensors.len() {
            return Err(ModelError::Checkpoint {
                reason: format!(
                    "expected {} tensors, found {}",
                    names.len(),
                    cp.tensors.len()
                ),
            });
        }
        for ((name, mut view), tensor) in names
            .into_iter()
            .zip(model.param_views_mut())
            .zip(&cp.tensors)
        {
            if tensor.name != name {
                return Err(ModelError::Checkpoint {
                    reason: format!("tensor {:?} where {:?} expected", tensor.name, name),
                });
            }
            if tensor.shape != view.shape() || tensor.data.len() != view.len() {
                return Err(ModelError::Checkpoint {
                    reason: format!(
                        "tensor {name}: shape {:?} does not match {:?}",
                        tensor.shape,
                        view.shape()
                    ),
                });
            }
            view.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&tensor.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let content = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cp: Checkpoint =
            serde_json::from_str(&content).map_err(|e| ModelError::Checkpoint {
                reason: e.to_string(),
            })?;
        Model::from_checkpoint(&cp)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing model archive; reloading reproduces forward outputs
/// bit-compatibly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    /// Nonlinearity applied after the dense and convolution layers.
    pub activation: String,
    pub tensors: Vec<NamedTensor>,
}

/// On-disk embedding-encoder weights for `EncoderKind::Pretrained`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedEncoderFile {
    pub token: NamedTensor,
    pub position: NamedTensor,
}

fn load_pretrained_encoder(path: &Path, cfg: &EncoderConfig) -> Result<Embedding, ModelError> {
    let content = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: PretrainedEncoderFile =
        serde_json::from_str(&content).map_err(|e| ModelError::EncoderWeights {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let expect = |tensor: &NamedTensor, rows: usize, what: &str| {
        if tensor.shape != [rows, cfg.hidden_dim] || tensor.data.len() != rows * cfg.hidden_dim {
            return Err(ModelError::EncoderWeights {
                path: path.display().to_string(),
                reason: format!(
                    "{what} table must be {rows}×{}, found {:?}",
                    cfg.hidden_dim, tensor.shape
                ),
            });
        }
        Ok(())
    };
    expect(&file.token, cfg.vocab_size, "token")?;
    expect(&file.position, cfg.seq_len, "position")?;
    Ok(Embedding {
        token: Array2::from_shape_vec((cfg.vocab_size, cfg.hidden_dim), file.token.data)
            .expect("validated shape"),
        position: Array2::from_shape_vec((cfg.seq_len, cfg.hidden_dim), file.position.data)
            .expect("validated shape"),
    })
}

/// Stacks tokenized examples into the dense input matrices a model consumes.
pub fn batch_inputs(
    examples: &[crate::tokenize::TokenizedExample],
) -> (Array2<usize>, Array2<f64>) {
    let batch = examples.len();
    let seq = examples.first().map_or(0, |e| e.token_ids.len());
    let mut tokens = Array2::zeros((batch, seq));
    let mut mask = Array2::zeros((batch, seq));
    for (b, example) in examples.iter().enumerate() {
        for (t, (&id, &m)) in example
            .token_ids
            .iter()
            .zip(&example.attention_mask)
            .enumerate()
        {
            tokens[(b, t)] = id as usize;
            mask[(b, t)] = f64::from(m);
        }
    }
    (tokens, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array;

    fn tiny_spec(head: HeadKind, subtask: Subtask) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig::tiny(40),
            head,
            subtask,
            dims: HeadDims::tiny(),
            freeze_encoder: false,
        }
    }

    fn toy_batch(batch: usize, seq: usize) -> (Array2<usize>, Array2<f64>) {
        let tokens = Array::from_shape_fn((batch, seq), |(b, t)| (b * 7 + t * 3) % 40);
        let mask = Array::from_shape_fn((batch, seq), |(b, t)| {
            if t > seq - 3 && b % 2 == 0 {
                0.0
            } else {
                1.0
            }
        });
        (tokens, mask)
    }

    #[test]
    fn shape_matrix_all_heads_subtasks_batches() {
        for head in HeadKind::ALL {
            for subtask in [Subtask::A, Subtask::B] {
                let model = build_model(&tiny_spec(head, subtask), 17).unwrap();
                for batch in [1usize, 8] {
                    let (tokens, mask) = toy_batch(batch, 30);
                    let out = model.forward(tokens.view(), mask.view()).unwrap();
                    assert_eq!(
                        out.logits.dim(),
                        (batch, subtask.output_arity(), 2),
                        "{head:?}/{subtask:?}/batch {batch}"
                    );
                    assert!(out.all_finite());
                }
            }
        }
    }

    #[test]
    fn wider_tiny_encoder_fans_out_seven() {
        let spec = ModelSpec {
            encoder: EncoderConfig {
                seq_len: 30,
                hidden_dim: 32,
                vocab_size: 40,
                kind: EncoderKind::TinyRandom,
            },
            head: HeadKind::Fnn,
            subtask: Subtask::B,
            dims: HeadDims::tiny(),
            freeze_encoder: false,
        };
        let model = build_model(&spec, 4).unwrap();
        let (tokens, mask) = toy_batch(3, 30);
        let out = model.forward(tokens.view(), mask.view()).unwrap();
        assert_eq!(out.logits.dim(), (3, 7, 2));
    }

    #[test]
    fn seeded_builds_are_identical() {
        let spec = tiny_spec(HeadKind::BiLstm, Subtask::A);
        let a = build_model(&spec, 5).unwrap();
        let b = build_model(&spec, 5).unwrap();
        for (va, vb) in a.param_views().iter().zip(b.param_views()) {
            assert_eq!(va, &vb);
        }
        let (tokens, mask) = toy_batch(3, 30);
        assert_eq!(
            a.forward(tokens.view(), mask.view()).unwrap().logits,
            b.forward(tokens.view(), mask.view()).unwrap().logits
        );
        let c = build_model(&spec, 6).unwrap();
        assert_ne!(
            a.forward(tokens.view(), mask.view()).unwrap().logits,
            c.forward(tokens.view(), mask.view()).unwrap().logits
        );
    }

    #[test]
    fn identical_rows_get_identical_logits() {
        let model = build_model(&tiny_spec(HeadKind::Cnn, Subtask::B), 3).unwrap();
        let (row, mask_row) = toy_batch(1, 30);
        let tokens = ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap();
        let mask = ndarray::concatenate(Axis(0), &[mask_row.view(), mask_row.view()]).unwrap();
        let out = model.forward(tokens.view(), mask.view()).unwrap();
        assert_eq!(
            out.logits.slice(s![0, .., ..]),
            out.logits.slice(s![1, .., ..])
        );
    }

    #[test]
    fn wrong_sequence_length_rejected() {
        let model = build_model(&tiny_spec(HeadKind::Fnn, Subtask::A), 1).unwrap();
        let (tokens, mask) = toy_batch(2, 20);
        assert!(matches!(
            model.forward(tokens.view(), mask.view()),
            Err(ModelError::SequenceLength {
                expected: 30,
                got: 20
            })
        ));
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let model = build_model(&tiny_spec(HeadKind::Fnn, Subtask::A), 1).unwrap();
        let (mut tokens, mask) = toy_batch(1, 30);
        tokens[(0, 4)] = 40;
        assert!(matches!(
            model.forward(tokens.view(), mask.view()),
            Err(ModelError::TokenOutOfRange { id: 40, vocab: 40 })
        ));
    }

    #[test]
    fn parameter_count_matches_plan_and_hand_count() {
        for head in HeadKind::ALL {
            let spec = tiny_spec(head, Subtask::B);
            let model = build_model(&spec, 2).unwrap();
            let plan = plan_model(&spec).unwrap();
            assert_eq!(
                model.parameter_count(),
                plan.total_param_count(),
                "{head:?}"
            );
        }
        // hand count for the tiny FNN, subtask A:
        // encoder 40·16 + 30·16, dense (30·16)·12 + 12, classifier 12·2 + 2
        let model = build_model(&tiny_spec(HeadKind::Fnn, Subtask::A), 2).unwrap();
        assert_eq!(
            model.parameter_count(),
            40 * 16 + 30 * 16 + (480 * 12 + 12) + (12 * 2 + 2)
        );
    }

    #[test]
    fn freezing_shrinks_trainable_count() {
        let mut spec = tiny_spec(HeadKind::Fnn, Subtask::A);
        let full = build_model(&spec, 2).unwrap();
        spec.freeze_encoder = true;
        let frozen = build_model(&spec, 2).unwrap();
        assert!(full.trainable_parameter_count() > frozen.trainable_parameter_count());
        assert_eq!(
            full.trainable_parameter_count() - frozen.trainable_parameter_count(),
            40 * 16 + 30 * 16
        );
    }

    #[test]
    fn gradients_align_with_parameters() {
        for head in HeadKind::ALL {
            let model = build_model(&tiny_spec(head, Subtask::A), 11).unwrap();
            let (tokens, mask) = toy_batch(2, 30);
            let (out, cache) = model.forward_cached(tokens.view(), mask.view()).unwrap();
            let dlogits = Array3::ones(out.logits.raw_dim());
            let grads = model.backward(&cache, &dlogits);
            let views = model.param_views();
            assert_eq!(grads.0.len(), views.len(), "{head:?}");
            for (g, v) in grads.0.iter().zip(views) {
                assert_eq!(g.shape(), v.shape(), "{head:?}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = build_model(&tiny_spec(HeadKind::BlsCnn, Subtask::B), 23).unwrap();
        model.save(&path).unwrap();
        let reloaded = Model::load(&path).unwrap();
        let (tokens, mask) = toy_batch(4, 30);
        let a = model.forward(tokens.view(), mask.view()).unwrap();
        let b = reloaded.forward(tokens.view(), mask.view()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(reloaded.to_checkpoint().activation, "relu");
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let model = build_model(&tiny_spec(HeadKind::Fnn, Subtask::A), 1).unwrap();
        let mut cp = model.to_checkpoint();
        cp.tensors[2].shape = vec![1, 1];
        cp.tensors[2].data = vec![0.0];
        assert!(matches!(
            Model::from_checkpoint(&cp),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn pretrained_encoder_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        let cfg = EncoderConfig {
            seq_len: 30,
            hidden_dim: 16,
            vocab_size: 40,
            kind: EncoderKind::Pretrained {
                weights: path.clone(),
            },
        };
        let file = PretrainedEncoderFile {
            token: NamedTensor {
                name: "token".into(),
                shape: vec![40, 16],
                data: (0..640).map(|i| i as f64 * 1e-3).collect(),
            },
            position: NamedTensor {
                name: "position".into(),
                shape: vec![30, 16],
                data: (0..480).map(|i| i as f64 * 1e-3).collect(),
            },
        };
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let spec = ModelSpec {
            encoder: cfg,
            head: HeadKind::Fnn,
            subtask: Subtask::A,
            dims: HeadDims::tiny(),
            freeze_encoder: false,
        };
        let model = build_model(&spec, 7).unwrap();
        assert_relative_eq!(model.encoder.token[(1, 0)], 0.016, epsilon = 1e-12);

        // wrong shape refused
        let bad = PretrainedEncoderFile {
            token: NamedTensor {
                name: "token".into(),
                shape: vec![39, 16],
                data: vec![0.0; 39 * 16],
            },
            position: file.position.clone(),
        };
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(
            build_model(&spec, 7),
            Err(ModelError::EncoderWeights { .. })
        ));
    }

    #[test]
    fn batch_inputs_stacks_examples() {
        use crate::tokenize::TokenizedExample;
        let examples = vec![
            TokenizedExample {
                token_ids: vec![2, 5, 0],
                attention_mask: vec![1, 1, 0],
                binary_label: 1,
                category_labels: [0; 7],
            },
            TokenizedExample {
                token_ids: vec![2, 7, 3],
                attention_mask: vec![1, 1, 1],
                binary_label: 0,
                category_labels: [0; 7],
            },
        ];
        let (tokens, mask) = batch_inputs(&examples);
        assert_eq!(tokens.dim(), (2, 3));
        assert_eq!(tokens[(0, 1)], 5);
        assert_eq!(mask[(0, 2)], 0.0);
        assert_eq!(mask[(1, 2)], 1.0);
    }
}

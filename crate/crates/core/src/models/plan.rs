//! Pure shape and parameter arithmetic for a [`ModelSpec`](super::ModelSpec).
//!
//! Planning happens before any tensor is allocated, so invalid geometry
//! (a convolution or pooling stage collapsing to a non-positive size) is
//! rejected with the computed shapes, and paper-scale parameter counts can
//! be inspected cheaply.

use super::{BiLstmReadout, HeadKind, ModelError, ModelSpec, POOL};

/// Intermediate shapes of the two-convolution stack (valid padding,
/// stride 1, 2×2 max-pooling after each convolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTrace {
    /// (rows, cols, channels) after the first convolution.
    pub conv1: (usize, usize, usize),
    pub pool1: (usize, usize),
    pub conv2: (usize, usize, usize),
    pub pool2: (usize, usize),
    /// Flattened width entering the dense layer.
    pub flatten: usize,
}

/// Resolved layer sizes and parameter counts for a model spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPlan {
    /// (seq_len, width) of the 2-D map fed to the head.
    pub head_input: (usize, usize),
    /// Present for the convolutional heads.
    pub conv: Option<ConvTrace>,
    /// Width of the features entering the shared dense layer.
    pub dense_in: usize,
    pub dense_units: usize,
    /// Classifier fan-out: 1 for binary detection, 7 for categories.
    pub outputs: usize,
    pub encoder_param_count: usize,
    pub head_param_count: usize,
}

impl ModelPlan {
    pub fn total_param_count(&self) -> usize {
        self.encoder_param_count + self.head_param_count
    }
}

fn positive(stage: &str, rows: i64, cols: i64) -> Result<(usize, usize), ModelError> {
    if rows <= 0 || cols <= 0 {
        return Err(ModelError::NonPositiveShape {
            stage: stage.to_string(),
            rows,
            cols,
        });
    }
    Ok((rows as usize, cols as usize))
}

/// Walks the conv1 → pool → conv2 → pool stack over an `h × w` input map.
pub fn conv_trace(
    h: usize,
    w: usize,
    k1: usize,
    f1: usize,
    k2: usize,
    f2: usize,
) -> Result<ConvTrace, ModelError> {
    let c1 = positive("conv1", h as i64 - k1 as i64 + 1, w as i64 - k1 as i64 + 1)?;
    let p1 = positive("pool1", (c1.0 / POOL) as i64, (c1.1 / POOL) as i64)?;
    let c2 = positive(
        "conv2",
        p1.0 as i64 - k2 as i64 + 1,
        p1.1 as i64 - k2 as i64 + 1,
    )?;
    let p2 = positive("pool2", (c2.0 / POOL) as i64, (c2.1 / POOL) as i64)?;
    Ok(ConvTrace {
        conv1: (c1.0, c1.1, f1),
        pool1: p1,
        conv2: (c2.0, c2.1, f2),
        pool2: p2,
        flatten: p2.0 * p2.1 * f2,
    })
}

fn dense_params(input: usize, units: usize) -> usize {
    input * units + units
}

fn conv_params(in_channels: usize, filters: usize, kernel: usize) -> usize {
    filters * in_channels * kernel * kernel + filters
}

fn lstm_params(input: usize, units: usize) -> usize {
    input * 4 * units + units * 4 * units + 4 * units
}

pub fn plan_model(spec: &ModelSpec) -> Result<ModelPlan, ModelError> {
    let enc = &spec.encoder;
    for (name, v) in [
        ("seq_len", enc.seq_len),
        ("hidden_dim", enc.hidden_dim),
        ("vocab_size", enc.vocab_size),
        ("dense_units", spec.dims.dense_units),
        ("lstm_units", spec.dims.lstm_units),
    ] {
        positive(name, v as i64, 1)?;
    }
    let outputs = spec.subtask.output_arity();
    let dims = &spec.dims;

    let (head_input, conv, dense_in, head_body_params) = match spec.head {
        HeadKind::Fnn => {
            let flat = enc.seq_len * enc.hidden_dim;
            ((enc.seq_len, enc.hidden_dim), None, flat, 0)
        }
        HeadKind::BiLstm => {
            let width = 2 * dims.lstm_units;
            let _ = BiLstmReadout::FinalState; // both readouts share this width
            (
                (enc.seq_len, enc.hidden_dim),
                None,
                width,
                2 * lstm_params(enc.hidden_dim, dims.lstm_units),
            )
        }
        HeadKind::Cnn => {
            let trace = conv_trace(
                enc.seq_len,
                enc.hidden_dim,
                dims.conv1_kernel,
                dims.conv1_filters,
                dims.conv2_kernel,
                dims.conv2_filters,
            )?;
            let params = conv_params(1, dims.conv1_filters, dims.conv1_kernel)
                + conv_params(dims.conv1_filters, dims.conv2_filters, dims.conv2_kernel);
            (
                (enc.seq_len, enc.hidden_dim),
                Some(trace),
                trace.flatten,
                params,
            )
        }
        HeadKind::BlsCnn => {
            let trace = conv_trace(
                enc.seq_len,
                dims.lstm_units,
                dims.conv1_kernel,
                dims.conv1_filters,
                dims.conv2_kernel,
                dims.conv2_filters,
            )?;
            let params = lstm_params(enc.hidden_dim, dims.lstm_units)
                + conv_params(1, dims.conv1_filters, dims.conv1_kernel)
                + conv_params(dims.conv1_filters, dims.conv2_filters, dims.conv2_kernel);
            (
                (enc.seq_len, dims.lstm_units),
                Some(trace),
                trace.flatten,
                params,
            )
        }
    };

    let head_param_count = head_body_params
        + dense_params(dense_in, dims.dense_units)
        + outputs * dense_params(dims.dense_units, 2);

    Ok(ModelPlan {
        head_input,
        conv,
        dense_in,
        dense_units: dims.dense_units,
        outputs,
        encoder_param_count: enc.vocab_size * enc.hidden_dim + enc.seq_len * enc.hidden_dim,
        head_param_count,
    })
}

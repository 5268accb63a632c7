//! Hand-rolled layers with explicit forward caches and backward passes.
//!
//! Everything is f64 and single-threaded, so runs are bit-reproducible for a
//! fixed seed and gradients can be checked against finite differences.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;

/// Uniform fan-in initialization: `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx for y = relu(x), given the pre-activation values.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Fully connected layer `y = xW + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let w = Array2::from_shape_vec((input, output), uniform_fan_in(rng, input, input * output))
            .expect("dense weight shape");
        let b = Array1::from_vec(uniform_fan_in(rng, input, output));
        Dense { w, b }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns (dw, db, dx).
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w.t());
        (dw, db, dx)
    }
}

/// Token + position embedding table producing `(batch, seq, hidden)` maps;
/// masked positions are zeroed.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub token: Array2<f64>,
    pub position: Array2<f64>,
}

impl Embedding {
    pub fn new<R: Rng>(rng: &mut R, vocab: usize, seq_len: usize, hidden: usize) -> Self {
        let token =
            Array2::from_shape_vec((vocab, hidden), uniform_fan_in(rng, hidden, vocab * hidden))
                .expect("token table shape");
        let position = Array2::from_shape_vec(
            (seq_len, hidden),
            uniform_fan_in(rng, hidden, seq_len * hidden),
        )
        .expect("position table shape");
        Embedding { token, position }
    }

    pub fn zeros(vocab: usize, seq_len: usize, hidden: usize) -> Self {
        Embedding {
            token: Array2::zeros((vocab, hidden)),
            position: Array2::zeros((seq_len, hidden)),
        }
    }

    pub fn forward(&self, tokens: ArrayView2<'_, usize>, mask: ArrayView2<'_, f64>) -> Array3<f64> {
        let (batch, seq) = tokens.dim();
        let hidden = self.token.ncols();
        let mut out = Array3::zeros((batch, seq, hidden));
        for b in 0..batch {
            for t in 0..seq {
                let m = mask[(b, t)];
                if m == 0.0 {
                    continue;
                }
                let tok = self.token.row(tokens[(b, t)]);
                let pos = self.position.row(t);
                let mut cell = out.slice_mut(s![b, t, ..]);
                cell.assign(&tok);
                cell += &pos;
                cell *= m;
            }
        }
        out
    }

    /// Returns (dtoken, dposition).
    pub fn backward(
        &self,
        tokens: ArrayView2<'_, usize>,
        mask: ArrayView2<'_, f64>,
        dout: &Array3<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut dtoken = Array2::zeros(self.token.raw_dim());
        let mut dposition = Array2::zeros(self.position.raw_dim());
        let (batch, seq) = tokens.dim();
        for b in 0..batch {
            for t in 0..seq {
                let m = mask[(b, t)];
                if m == 0.0 {
                    continue;
                }
                let grad = dout.slice(s![b, t, ..]);
                let mut tok_row = dtoken.row_mut(tokens[(b, t)]);
                tok_row.scaled_add(m, &grad);
                let mut pos_row = dposition.row_mut(t);
                pos_row.scaled_add(m, &grad);
            }
        }
        (dtoken, dposition)
    }
}

/// Single-direction LSTM with packed gates in `[input, forget, cell, output]`
/// order. States start at zero.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    pub units: usize,
}

/// Per-step activations kept for backpropagation through time.
pub struct LstmCache {
    /// h_0 … h_T (T+1 entries, h_0 = 0)
    h: Vec<Array2<f64>>,
    /// c_0 … c_T
    c: Vec<Array2<f64>>,
    gate_i: Vec<Array2<f64>>,
    gate_f: Vec<Array2<f64>>,
    gate_g: Vec<Array2<f64>>,
    gate_o: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
}

impl Lstm {
    pub fn new<R: Rng>(rng: &mut R, input: usize, units: usize) -> Self {
        let w_x = Array2::from_shape_vec(
            (input, 4 * units),
            uniform_fan_in(rng, input, input * 4 * units),
        )
        .expect("lstm w_x shape");
        let w_h = Array2::from_shape_vec(
            (units, 4 * units),
            uniform_fan_in(rng, units, units * 4 * units),
        )
        .expect("lstm w_h shape");
        let b = Array1::from_vec(uniform_fan_in(rng, units, 4 * units));
        Lstm { w_x, w_h, b, units }
    }

    pub fn zeros(input: usize, units: usize) -> Self {
        Lstm {
            w_x: Array2::zeros((input, 4 * units)),
            w_h: Array2::zeros((units, 4 * units)),
            b: Array1::zeros(4 * units),
            units,
        }
    }

    /// Runs the full sequence, returning per-step hidden states
    /// `(batch, seq, units)` and the cache for backward.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LstmCache) {
        let (batch, seq, _input) = x.dim();
        let h_units = self.units;
        let mut cache = LstmCache {
            h: vec![Array2::zeros((batch, h_units))],
            c: vec![Array2::zeros((batch, h_units))],
            gate_i: Vec::with_capacity(seq),
            gate_f: Vec::with_capacity(seq),
            gate_g: Vec::with_capacity(seq),
            gate_o: Vec::with_capacity(seq),
            tanh_c: Vec::with_capacity(seq),
        };
        let mut out = Array3::zeros((batch, seq, h_units));
        for t in 0..seq {
            let x_t = x.slice(s![.., t, ..]).to_owned();
            let h_prev = &cache.h[t];
            let c_prev = &cache.c[t];
            let pre = x_t.dot(&self.w_x) + h_prev.dot(&self.w_h) + &self.b;
            let i = pre.slice(s![.., 0..h_units]).mapv(sigmoid);
            let f = pre.slice(s![.., h_units..2 * h_units]).mapv(sigmoid);
            let g = pre.slice(s![.., 2 * h_units..3 * h_units]).mapv(f64::tanh);
            let o = pre.slice(s![.., 3 * h_units..4 * h_units]).mapv(sigmoid);
            let c_t = &f * c_prev + &i * &g;
            let tanh_c = c_t.mapv(f64::tanh);
            let h_t = &o * &tanh_c;
            out.slice_mut(s![.., t, ..]).assign(&h_t);
            cache.gate_i.push(i);
            cache.gate_f.push(f);
            cache.gate_g.push(g);
            cache.gate_o.push(o);
            cache.tanh_c.push(tanh_c);
            cache.c.push(c_t);
            cache.h.push(h_t);
        }
        (out, cache)
    }

    /// Backpropagation through time. `dhs` holds the gradient flowing into
    /// every per-step hidden state. Returns (dw_x, dw_h, db, dx).
    pub fn backward(
        &self,
        x: &Array3<f64>,
        cache: &LstmCache,
        dhs: &Array3<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array3<f64>) {
        let (batch, seq, input) = x.dim();
        let h_units = self.units;
        let mut dw_x = Array2::zeros((input, 4 * h_units));
        let mut dw_h = Array2::zeros((h_units, 4 * h_units));
        let mut db = Array1::zeros(4 * h_units);
        let mut dx = Array3::zeros((batch, seq, input));
        let mut dh_next: Array2<f64> = Array2::zeros((batch, h_units));
        let mut dc_next: Array2<f64> = Array2::zeros((batch, h_units));

        for t in (0..seq).rev() {
            let dh = dhs.slice(s![.., t, ..]).to_owned() + &dh_next;
            let i = &cache.gate_i[t];
            let f = &cache.gate_f[t];
            let g = &cache.gate_g[t];
            let o = &cache.gate_o[t];
            let tanh_c = &cache.tanh_c[t];
            let c_prev = &cache.c[t];

            let d_o = &dh * tanh_c;
            let dpre_o = d_o * o * (1.0 - o);
            let dc = dc_next + &dh * o * tanh_c.mapv(|v| 1.0 - v * v);
            let d_f = &dc * c_prev;
            let dpre_f = d_f * f * (1.0 - f);
            let d_i = &dc * g;
            let dpre_i = d_i * i * (1.0 - i);
            let d_g = &dc * i;
            let dpre_g = d_g * g.mapv(|v| 1.0 - v * v);
            dc_next = dc * f;

            let dpre = concatenate(
                Axis(1),
                &[dpre_i.view(), dpre_f.view(), dpre_g.view(), dpre_o.view()],
            )
            .expect("gate concat");

            let x_t = x.slice(s![.., t, ..]);
            dw_x += &x_t.t().dot(&dpre);
            dw_h += &cache.h[t].t().dot(&dpre);
            db += &dpre.sum_axis(Axis(0));
            dx.slice_mut(s![.., t, ..]).assign(&dpre.dot(&self.w_x.t()));
            dh_next = dpre.dot(&self.w_h.t());
        }
        (dw_x, dw_h, db, dx)
    }
}

/// Reverses the time axis of a `(batch, seq, features)` array.
pub fn reverse_time(x: &Array3<f64>) -> Array3<f64> {
    let mut out = x.clone();
    out.invert_axis(Axis(1));
    out
}

/// 2-D convolution, valid padding, stride 1, via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, k, k)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

pub struct Conv2dCache {
    cols: Array2<f64>,
    out_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize, k: usize) -> Self {
        let fan_in = in_channels * k * k;
        let w = Array4::from_shape_vec(
            (out_channels, in_channels, k, k),
            uniform_fan_in(rng, fan_in, out_channels * fan_in),
        )
        .expect("conv weight shape");
        let b = Array1::from_vec(uniform_fan_in(rng, fan_in, out_channels));
        Conv2d { w, b }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_channels, in_channels, k, k)),
            b: Array1::zeros(out_channels),
        }
    }

    fn kernel(&self) -> usize {
        self.w.dim().2
    }

    /// Weight matrix view for the im2col product: (in·k·k, out).
    fn w_mat(&self) -> Array2<f64> {
        let (oc, ic, kh, kw) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight reshape")
            .t()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (batch, _ic, h, w) = x.dim();
        let k = self.kernel();
        let (oh, ow) = (h - k + 1, w - k + 1);
        let oc = self.w.dim().0;
        let cols = im2col(x, k);
        let mut out_mat = cols.dot(&self.w_mat());
        out_mat += &self.b;
        let out = out_mat
            .into_shape_with_order((batch, oh, ow, oc))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            out,
            Conv2dCache {
                cols,
                out_shape: (batch, oc, oh, ow),
            },
        )
    }

    /// Returns (dw, db, dx).
    pub fn backward(
        &self,
        x_shape: (usize, usize, usize, usize),
        cache: &Conv2dCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
        let (batch, oc, oh, ow) = cache.out_shape;
        let (_, ic, _, _) = self.w.dim();
        let k = self.kernel();
        let dy_mat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((batch * oh * ow, oc))
            .expect("dy reshape");
        let dw_mat = cache.cols.t().dot(&dy_mat); // (ic·k·k, oc)
        let dw = dw_mat
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((oc, ic, k, k))
            .expect("dw reshape");
        let db = dy_mat.sum_axis(Axis(0));
        let dcols = dy_mat.dot(&self.w_mat().t());
        let dx = col2im(&dcols, x_shape, k);
        (dw, db, dx)
    }
}

/// Unrolls k×k patches into rows: (batch·oh·ow, in_channels·k·k).
fn im2col(x: &Array4<f64>, k: usize) -> Array2<f64> {
    let (batch, ic, h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut cols = Array2::zeros((batch * oh * ow, ic * k * k));
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                let patch = x.slice(s![b, .., i..i + k, j..j + k]);
                for (col, &v) in patch.iter().enumerate() {
                    cols[(row, col)] = v;
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, x_shape: (usize, usize, usize, usize), k: usize) -> Array4<f64> {
    let (batch, ic, h, w) = x_shape;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = Array4::zeros(x_shape);
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                let mut col = 0;
                for c in 0..ic {
                    for u in 0..k {
                        for v in 0..k {
                            dx[(b, c, i + u, j + v)] += dcols[(row, col)];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
pub struct MaxPool2d;

pub struct MaxPoolCache {
    /// winning (row, col) per output cell
    argmax: Vec<(usize, usize)>,
    in_shape: (usize, usize, usize, usize),
    out_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward(pool: usize, x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
        let (batch, ch, h, w) = x.dim();
        let (oh, ow) = (h / pool, w / pool);
        let mut out = Array4::zeros((batch, ch, oh, ow));
        let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
        for b in 0..batch {
            for c in 0..ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = (i * pool, j * pool);
                        for u in 0..pool {
                            for v in 0..pool {
                                let (r, s_) = (i * pool + u, j * pool + v);
                                let val = x[(b, c, r, s_)];
                                if val > best {
                                    best = val;
                                    best_at = (r, s_);
                                }
                            }
                        }
                        out[(b, c, i, j)] = best;
                        argmax.push(best_at);
                    }
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                in_shape: (batch, ch, h, w),
                out_shape: (batch, ch, oh, ow),
            },
        )
    }

    pub fn backward(cache: &MaxPoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let mut dx = Array4::zeros(cache.in_shape);
        let (batch, ch, oh, ow) = cache.out_shape;
        let mut idx = 0;
        for b in 0..batch {
            for c in 0..ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let (r, s_) = cache.argmax[idx];
                        dx[(b, c, r, s_)] += dy[(b, c, i, j)];
                        idx += 1;
                    }
                }
            }
        }
        dx
    }
}

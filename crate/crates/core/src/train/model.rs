//! Pre-norm transformer encoder classifier with hand-written backward passes.
//!
//! ```text
//! x  = embed[tokens] + pe
//! per layer:  x += MHA(LN₁(x)) · W_O ;  x += W₂ · gelu(W₁ · LN₂(x) + b₁) + b₂
//! logits = mean_rows(LN_f(x)) · W_c + b_c
//! ```

use crate::attention::{attention_forward_counted, AttentionSpec};
use crate::error::{Error, Result};
use crate::grad::attention_backward_from_alpha;
use crate::ops::OpSink;
use crate::tensor::{matmul, matmul_nt, matmul_tn, rand_matrix, Matrix, Rng};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl Dims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w_1: Matrix,
    pub b_1: Matrix,
    pub w_2: Matrix,
    pub b_2: Matrix,
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub w_c: Matrix,
    pub b_c: Matrix,
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    rand_matrix(rng, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl LayerParams {
    fn init(rng: &mut Rng, d: &Dims) -> Result<Self> {
        let m = d.d_model;
        Ok(Self {
            ln1_g: Matrix::filled(1, m, 1.0),
            ln1_b: Matrix::zeros(1, m),
            w_q: glorot(rng, m, m)?,
            w_k: glorot(rng, m, m)?,
            w_v: glorot(rng, m, m)?,
            w_o: glorot(rng, m, m)?,
            ln2_g: Matrix::filled(1, m, 1.0),
            ln2_b: Matrix::zeros(1, m),
            w_1: glorot(rng, m, d.ffn_dim)?,
            b_1: Matrix::zeros(1, d.ffn_dim),
            w_2: glorot(rng, d.ffn_dim, m)?,
            b_2: Matrix::zeros(1, m),
        })
    }

    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.w_k, &self.w_v, &self.w_o,
            &self.ln2_g, &self.ln2_b, &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w_1, &mut self.b_1, &mut self.w_2, &mut self.b_2,
        ]
    }
}

impl Params {
    /// Draw order: embedding, then each layer's Q, K, V, O, W₁, W₂, then the classifier.
    /// Independent of the attention kind, so arms of an A/B run start identical.
    pub fn init(rng: &mut Rng, d: &Dims) -> Result<Self> {
        let embed = rand_matrix(rng, d.vocab, d.d_model, 1.0)?;
        let layers = (0..d.layers)
            .map(|_| LayerParams::init(rng, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            layers,
            lnf_g: Matrix::filled(1, d.d_model, 1.0),
            lnf_b: Matrix::zeros(1, d.d_model),
            w_c: glorot(rng, d.d_model, d.classes)?,
            b_c: Matrix::zeros(1, d.classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embed];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.w_c, &self.b_c]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embed];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_c, &mut self.b_c]);
        v
    }

    /// Names matching [`Params::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        const LAYER: [&str; 12] = [
            "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2",
        ];
        let mut v = vec!["embed".to_string()];
        for i in 0..self.layers.len() {
            v.extend(LAYER.iter().map(|n| format!("layer{i}.{n}")));
        }
        v.extend(["lnf_g", "lnf_b", "w_c", "b_c"].map(String::from));
        v
    }

    /// Rebuilds parameters from tensors in [`Params::tensors`] order.
    pub fn with_tensors(&self, tensors: &[Matrix]) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            *dst = src.clone();
        }
        out
    }

    /// `self += s * other` over every tensor.
    pub fn axpy(&mut self, s: f64, other: &Params) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data()).map(|x| x * x).sum()
    }
}

/// Sinusoidal position encoding: `sin(p / 10000^(2i/d))` on even columns, `cos` on odd.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(seq_len, d_model, |p, c| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            xhat.set(i, c, h);
            y.set(i, c, h * g.get(0, c) + b.get(0, c));
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, g: &Matrix, cache: &LnCache, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for c in 0..d {
            dg.data_mut()[c] += dyr[c] * xh[c];
            db.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * g.get(0, c);
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (c, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn sum_rows_into(dst: &mut Matrix, m: &Matrix) {
    for i in 0..m.rows() {
        for (o, x) in dst.data_mut().iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    alpha: Matrix,
}

struct LayerCache {
    ln1: LnCache,
    h1: Matrix,
    heads: Vec<HeadCache>,
    concat: Matrix,
    ln2: LnCache,
    h2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Forward activations retained for the backward pass.
pub struct Trace {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pooled: Matrix,
    /// Class probabilities.
    pub probs: Vec<f64>,
}

/// Encoder classifier bound to one attention spec.
#[derive(Debug, Clone)]
pub struct Model {
    pub dims: Dims,
    pub head_spec: AttentionSpec,
    pe: Matrix,
}

impl Model {
    pub fn new(dims: Dims, head_spec: AttentionSpec) -> Result<Self> {
        if dims.heads == 0 || !dims.d_model.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                dims.d_model, dims.heads
            )));
        }
        if head_spec.d_k != dims.head_dim() {
            return Err(Error::Config(format!(
                "attention d_k {} != d_model / heads = {}",
                head_spec.d_k,
                dims.head_dim()
            )));
        }
        head_spec.validate()?;
        Ok(Self {
            pe: positional_encoding(dims.seq_len, dims.d_model),
            dims,
            head_spec,
        })
    }

    pub fn forward<S: OpSink>(&self, p: &Params, tokens: &[usize], sink: &mut S) -> Result<Trace> {
        let d = &self.dims;
        if tokens.len() != d.seq_len {
            return Err(Error::Parameter(format!(
                "sequence has {} tokens, model expects {}",
                tokens.len(),
                d.seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= d.vocab) {
            return Err(Error::Parameter(format!("token {t} outside vocabulary of {}", d.vocab)));
        }
        let mut x = p.embed.select_rows(tokens).add(&self.pe)?;
        let dh = d.head_dim();
        let mut layers = Vec::with_capacity(d.layers);
        for lp in &p.layers {
            let (h1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = matmul(&h1, &lp.w_q)?;
            let k = matmul(&h1, &lp.w_k)?;
            let v = matmul(&h1, &lp.w_v)?;
            let mut concat = Matrix::zeros(d.seq_len, d.d_model);
            let mut heads = Vec::with_capacity(d.heads);
            for h in 0..d.heads {
                let (qh, kh, vh) = (q.col_block(h * dh, dh), k.col_block(h * dh, dh), v.col_block(h * dh, dh));
                let out = attention_forward_counted(&self.head_spec, &qh, &kh, &vh, sink)?;
                concat.set_col_block(h * dh, &out.o);
                heads.push(HeadCache {
                    q: qh,
                    k: kh,
                    v: vh,
                    alpha: out.alpha,
                });
            }
            x.axpy(1.0, &matmul(&concat, &lp.w_o)?)?;
            let (h2, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let pre_act = matmul(&h2, &lp.w_1)?.add_row_vector(lp.b_1.data())?;
            let act = pre_act.map(gelu);
            let ffn = matmul(&act, &lp.w_2)?.add_row_vector(lp.b_2.data())?;
            x.axpy(1.0, &ffn)?;
            layers.push(LayerCache {
                ln1,
                h1,
                heads,
                concat,
                ln2,
                h2,
                pre_act,
                act,
            });
        }
        let (xf, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        let pooled = xf.column_means();
        let logits = matmul(&pooled, &p.w_c)?.add(&p.b_c)?;
        let mut probs = logits.into_vec();
        crate::tensor::softmax_in_place(&mut probs);
        Ok(Trace {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            pooled,
            probs,
        })
    }

    /// Index of the largest class probability (lowest index on ties).
    pub fn predict(&self, p: &Params, tokens: &[usize]) -> Result<usize> {
        let tr = self.forward(p, tokens, &mut crate::ops::NoCount)?;
        Ok(argmax(&tr.probs))
    }

    /// Cross-entropy of the trace against `label`.
    pub fn loss(trace: &Trace, label: usize) -> f64 {
        -trace.probs[label].max(f64::MIN_POSITIVE).ln()
    }

    /// Accumulates `∂ loss / ∂ params` into `grads`.
    pub fn backward(&self, p: &Params, trace: &Trace, label: usize, grads: &mut Params) -> Result<()> {
        let d = &self.dims;
        let n = d.seq_len;
        let dh = d.head_dim();

        let mut dlogits = trace.probs.clone();
        dlogits[label] -= 1.0;
        let dlogits = Matrix::from_vec(1, d.classes, dlogits)?;
        grads.b_c.axpy(1.0, &dlogits)?;
        grads.w_c.axpy(1.0, &matmul_tn(&trace.pooled, &dlogits)?)?;
        let dpooled = matmul_nt(&dlogits, &p.w_c)?;
        let dxf = Matrix::from_fn(n, d.d_model, |_, c| dpooled.get(0, c) / n as f64);
        let mut dx = layer_norm_backward(&dxf, &p.lnf_g, &trace.lnf, &mut grads.lnf_g, &mut grads.lnf_b);

        for (li, (lp, cache)) in p.layers.iter().zip(&trace.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];

            // FFN branch
            let dffn = &dx;
            sum_rows_into(&mut gl.b_2, dffn);
            gl.w_2.axpy(1.0, &matmul_tn(&cache.act, dffn)?)?;
            let dact = matmul_nt(dffn, &lp.w_2)?;
            let mut dpre = dact;
            for (g, u) in dpre.data_mut().iter_mut().zip(cache.pre_act.data()) {
                *g *= gelu_grad(*u);
            }
            sum_rows_into(&mut gl.b_1, &dpre);
            gl.w_1.axpy(1.0, &matmul_tn(&cache.h2, &dpre)?)?;
            let dh2 = matmul_nt(&dpre, &lp.w_1)?;
            let dln2 = layer_norm_backward(&dh2, &lp.ln2_g, &cache.ln2, &mut gl.ln2_g, &mut gl.ln2_b);
            dx.axpy(1.0, &dln2)?;

            // Attention branch
            gl.w_o.axpy(1.0, &matmul_tn(&cache.concat, &dx)?)?;
            let dconcat = matmul_nt(&dx, &lp.w_o)?;
            let mut dq = Matrix::zeros(n, d.d_model);
            let mut dk = Matrix::zeros(n, d.d_model);
            let mut dv = Matrix::zeros(n, d.d_model);
            for (h, hc) in cache.heads.iter().enumerate() {
                let g = attention_backward_from_alpha(
                    &self.head_spec,
                    &hc.q,
                    &hc.k,
                    &hc.v,
                    &hc.alpha,
                    &dconcat.col_block(h * dh, dh),
                )?;
                dq.set_col_block(h * dh, &g.d_q);
                dk.set_col_block(h * dh, &g.d_k);
                dv.set_col_block(h * dh, &g.d_v);
            }
            gl.w_q.axpy(1.0, &matmul_tn(&cache.h1, &dq)?)?;
            gl.w_k.axpy(1.0, &matmul_tn(&cache.h1, &dk)?)?;
            gl.w_v.axpy(1.0, &matmul_tn(&cache.h1, &dv)?)?;
            let mut dh1 = matmul_nt(&dq, &lp.w_q)?;
            dh1.axpy(1.0, &matmul_nt(&dk, &lp.w_k)?)?;
            dh1.axpy(1.0, &matmul_nt(&dv, &lp.w_v)?)?;
            let dln1 = layer_norm_backward(&dh1, &lp.ln1_g, &cache.ln1, &mut gl.ln1_g, &mut gl.ln1_b);
            dx.axpy(1.0, &dln1)?;
        }

        for (pos, &tok) in trace.tokens.iter().enumerate() {
            for (g, x) in grads.embed.row_mut(tok).iter_mut().zip(dx.row(pos)) {
                *g += x;
            }
        }
        Ok(())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

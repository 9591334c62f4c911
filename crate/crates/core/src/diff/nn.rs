//! Layers built from graph operations: linear maps, normalization,
//! scaled dot-product and multi-head attention, feed-forward and recurrent cells.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Mat, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Resolves parameter paths against a [`ParameterSet`] and places them on a
/// graph, either as tracked parameters (named `prefix + path`) or as constants.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    pub set: &'a ParameterSet,
    pub prefix: &'a str,
    pub track: bool,
}

impl<'a> ParamView<'a> {
    pub fn tracked(set: &'a ParameterSet, prefix: &'a str) -> Self {
        Self { set, prefix, track: true }
    }

    pub fn frozen(set: &'a ParameterSet, prefix: &'a str) -> Self {
        Self { set, prefix, track: false }
    }

    pub fn get(&self, g: &mut Graph, path: &str) -> Result<Var> {
        let t = self.set.get(path)?;
        let name = format!("{}{}", self.prefix, path);
        Ok(if self.track { g.param(&name, t) } else { g.named_constant(&name, t) })
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.set.get(path)
    }
}

/// `x W + b` with `W` at `path.w` and `b` at `path.b`.
pub fn linear(g: &mut Graph, p: &ParamView, path: &str, x: Var) -> Result<Var> {
    let w = p.get(g, &format!("{path}.w"))?;
    let b = p.get(g, &format!("{path}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(g: &mut Graph, p: &ParamView, path: &str, x: Var) -> Result<Var> {
    let gain = p.get(g, &format!("{path}.g"))?;
    let bias = p.get(g, &format!("{path}.b"))?;
    let n = g.layer_norm_rows(x);
    let s = g.mul_row(n, gain)?;
    g.add_row(s, bias)
}

/// `softmax(Q Kᵀ / sqrt(d)) V` for `Q: n x d`, `K: m x d`, `V: m x dv`.
pub fn scaled_dot_product_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    if qv.cols == 0 || qv.cols != kv.cols || kv.rows != vv.rows {
        return Err(Error::shape(format!(
            "attention: Q {}x{}, K {}x{}, V {}x{}",
            qv.rows, qv.cols, kv.rows, kv.cols, vv.rows, vv.cols
        )));
    }
    let d = qv.cols as f64;
    let scores = g.matmul_t(q, k)?;
    let scaled = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, v)
}

/// Multi-head attention core (no residual): projections, per-head attention,
/// concatenation and output projection. Parameters `path.{q,k,v,o}`.
pub fn attention(g: &mut Graph, p: &ParamView, path: &str, queries: Var, memory: Var, heads: usize) -> Result<Var> {
    let d_model = g.value(queries).cols;
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::invalid(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let dh = d_model / heads;
    let q = linear(g, p, &format!("{path}.q"), queries)?;
    let k = linear(g, p, &format!("{path}.k"), memory)?;
    let v = linear(g, p, &format!("{path}.v"), memory)?;
    let merged = if heads == 1 {
        scaled_dot_product_attention(g, q, k, v)?
    } else {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            outs.push(scaled_dot_product_attention(g, qh, kh, vh)?);
        }
        g.concat_cols(&outs)?
    };
    linear(g, p, &format!("{path}.o"), merged)
}

/// Pre-norm self-attention sublayer: `x + MHA(LN(x))`.
/// Parameters `path.ln.{g,b}` and `path.attn.{q,k,v,o}.{w,b}`.
pub fn multi_head_attention(g: &mut Graph, p: &ParamView, path: &str, x: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{path}.ln"), x)?;
    let a = attention(g, p, &format!("{path}.attn"), n, n, heads)?;
    g.add(x, a)
}

/// Pre-norm cross-attention sublayer: `q + MHA(LN(q), memory)`.
pub fn cross_attention(g: &mut Graph, p: &ParamView, path: &str, q: Var, memory: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{path}.ln"), q)?;
    let a = attention(g, p, &format!("{path}.attn"), n, memory, heads)?;
    g.add(q, a)
}

/// Pre-norm feed-forward sublayer: `x + W2 gelu(W1 LN(x))`.
pub fn feed_forward(g: &mut Graph, p: &ParamView, path: &str, x: Var) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{path}.ln"), x)?;
    let h = linear(g, p, &format!("{path}.fc1"), n)?;
    let h = g.gelu(h);
    let o = linear(g, p, &format!("{path}.fc2"), h)?;
    g.add(x, o)
}

pub fn init_attention<R: Rng>(set: &mut ParameterSet, rng: &mut R, path: &str, d_model: usize) -> Result<()> {
    set.init_norm(&format!("{path}.ln"), d_model)?;
    for proj in ["q", "k", "v", "o"] {
        set.init_linear(rng, &format!("{path}.attn.{proj}"), d_model, d_model)?;
    }
    Ok(())
}

pub fn init_feed_forward<R: Rng>(set: &mut ParameterSet, rng: &mut R, path: &str, d_model: usize, width: usize) -> Result<()> {
    set.init_norm(&format!("{path}.ln"), d_model)?;
    set.init_linear(rng, &format!("{path}.fc1"), d_model, width)?;
    set.init_linear(rng, &format!("{path}.fc2"), width, d_model)
}

/// Gated recurrent unit weights: `path.wx` (`d_in x 3H`), `path.wh` (`H x 3H`), `path.b` (`3H`).
/// Gate order along the `3H` axis is update, reset, candidate.
pub fn init_gru<R: Rng>(set: &mut ParameterSet, rng: &mut R, path: &str, d_in: usize, hidden: usize) -> Result<()> {
    set.insert(format!("{path}.wx"), super::tensor::xavier(rng, d_in, 3 * hidden))?;
    set.insert(format!("{path}.wh"), super::tensor::xavier(rng, hidden, 3 * hidden))?;
    set.insert(format!("{path}.b"), Tensor::zeros(vec![3 * hidden]))
}

/// Runs the recurrent cell over the rows of `x_seq` from a zero state and
/// returns the final hidden state (`1 x H`):
///
/// ```text
/// z = σ(x Wz + h Uz + bz)
/// r = σ(x Wr + h Ur + br)
/// n = tanh(x Wn + r ⊙ (h Un) + bn)
/// h' = n + z ⊙ (h − n)
/// ```
pub fn recurrent_forward(g: &mut Graph, p: &ParamView, path: &str, x_seq: Var) -> Result<Var> {
    let states = recurrent_states(g, p, path, x_seq)?;
    let last = g.value(states).rows - 1;
    g.row(states, last)
}

/// Every hidden state of the recurrent cell, `L x H`.
pub fn recurrent_states(g: &mut Graph, p: &ParamView, path: &str, x_seq: Var) -> Result<Var> {
    let len = g.value(x_seq).rows;
    if len == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    let wx = p.get(g, &format!("{path}.wx"))?;
    let wh = p.get(g, &format!("{path}.wh"))?;
    let b = p.get(g, &format!("{path}.b"))?;
    let hidden = g.value(wh).rows;
    let xw = g.matmul(x_seq, wx)?;
    let xw = g.add_row(xw, b)?;
    let mut h = g.constant(Mat::zeros(1, hidden));
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let xt = g.row(xw, t)?;
        let hh = g.matmul(h, wh)?;
        let xz = g.slice_cols(xt, 0, hidden)?;
        let xr = g.slice_cols(xt, hidden, hidden)?;
        let xn = g.slice_cols(xt, 2 * hidden, hidden)?;
        let hz = g.slice_cols(hh, 0, hidden)?;
        let hr = g.slice_cols(hh, hidden, hidden)?;
        let hn = g.slice_cols(hh, 2 * hidden, hidden)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        h = g.add(n, zd)?;
        states.push(h);
    }
    g.concat_rows(&states)
}

/// Sinusoidal position table, `len x d_model`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Mat {
    let mut m = Mat::zeros(len, d_model);
    for pos in 0..len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            m.data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;

    #[test]
    fn identity_attention_rows_are_convex() {
        let mut g = Graph::new();
        let i = g.constant(Mat::identity(2));
        let out = scaled_dot_product_attention(&mut g, i, i, i).unwrap();
        let o = g.value(out);
        for r in 0..2 {
            let s: f64 = o.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(o.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // The diagonal gets more mass than the off-diagonal.
        assert!(o.get(0, 0) > o.get(0, 1));
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut g = Graph::new();
        let q = g.constant(Mat::new(2, 2, vec![5.0, -1.0, 0.3, 2.0]).unwrap());
        let k = g.constant(Mat::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(Mat::new(3, 1, vec![3.0, 6.0, 9.0]).unwrap());
        let out = scaled_dot_product_attention(&mut g, q, k, v).unwrap();
        for r in 0..2 {
            assert!((g.value(out).get(r, 0) - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Mat::zeros(2, 3));
        let k = g.constant(Mat::zeros(2, 4));
        assert!(scaled_dot_product_attention(&mut g, q, k, k).is_err());
    }

    #[test]
    fn mha_shape_and_divisibility() {
        let mut rng = chacha(1);
        let mut set = ParameterSet::new();
        init_attention(&mut set, &mut rng, "b", 8).unwrap();
        let p = ParamView::frozen(&set, "");
        for n in [1, 3, 7] {
            let mut g = Graph::new();
            let x = g.constant(Mat::filled(n, 8, 0.5));
            let y = multi_head_attention(&mut g, &p, "b", x, 2).unwrap();
            assert_eq!((g.value(y).rows, g.value(y).cols), (n, 8));
        }
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(2, 8));
        assert!(multi_head_attention(&mut g, &p, "b", x, 3).is_err());
    }

    #[test]
    fn single_head_equals_plain_attention_plus_residual() {
        let mut rng = chacha(2);
        let mut set = ParameterSet::new();
        init_attention(&mut set, &mut rng, "b", 4).unwrap();
        let p = ParamView::frozen(&set, "");
        let xm = Mat::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(xm.clone());
        let y = multi_head_attention(&mut g, &p, "b", x, 1).unwrap();
        let mut h = Graph::new();
        let x2 = h.constant(xm);
        let n = layer_norm(&mut h, &p, "b.ln", x2).unwrap();
        let q = linear(&mut h, &p, "b.attn.q", n).unwrap();
        let k = linear(&mut h, &p, "b.attn.k", n).unwrap();
        let v = linear(&mut h, &p, "b.attn.v", n).unwrap();
        let a = scaled_dot_product_attention(&mut h, q, k, v).unwrap();
        let o = linear(&mut h, &p, "b.attn.o", a).unwrap();
        let z = h.add(x2, o).unwrap();
        assert_eq!(g.value(y), h.value(z));
    }

    #[test]
    fn gru_zero_fixed_point_and_single_step() {
        let mut set = ParameterSet::new();
        set.insert("c.wx", Tensor::zeros(vec![4, 6])).unwrap();
        set.insert("c.wh", Tensor::zeros(vec![2, 6])).unwrap();
        set.insert("c.b", Tensor::zeros(vec![6])).unwrap();
        let p = ParamView::frozen(&set, "");
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(5, 4));
        let h = recurrent_forward(&mut g, &p, "c", x).unwrap();
        assert_eq!(g.value(h).data, vec![0.0, 0.0]);

        let mut rng = chacha(3);
        let mut set = ParameterSet::new();
        init_gru(&mut set, &mut rng, "c", 2, 3).unwrap();
        let p = ParamView::frozen(&set, "");
        let mut g = Graph::new();
        let xv = vec![0.4, -0.7];
        let x = g.constant(Mat::row_vector(xv.clone()));
        let h = recurrent_forward(&mut g, &p, "c", x).unwrap();
        // Hand-evaluated single step from h = 0: h' = (1 - z) n.
        let wx = &set.get("c.wx").unwrap().values;
        for j in 0..3 {
            let pre = |off: usize| xv[0] * wx[off + j] + xv[1] * wx[9 + off + j];
            let z = 1.0 / (1.0 + (-pre(0)).exp());
            let n = pre(6).tanh();
            assert!((g.value(h).data[j] - (1.0 - z) * n).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_are_bounded() {
        let m = sinusoidal_positions(10, 8);
        assert!(m.data.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 0), 0.0);
    }
}

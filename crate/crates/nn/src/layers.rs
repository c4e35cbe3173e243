//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamStore`] at construction and records its forward pass on a graph
//! given the store's [`Bound`] handles.

use crate::{Bound, Graph, Init, NnError, ParamId, ParamStore, Result, Tensor, Var};

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine map `x W + b` over the last axis of a rank-2 or rank-3 input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// `followed_by` selects the initialization scale.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        followed_by: Activation,
    ) -> Self {
        let init = match followed_by {
            Activation::Relu => Init::Relu { fan_in: d_in },
            Activation::Identity => Init::Linear { fan_in: d_in },
        };
        let w = store.add(&format!("{name}.w"), vec![d_in, d_out], init);
        let b = store.add(&format!("{name}.b"), vec![d_out], Init::Zeros);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            vec![d_in, d_out],
            Init::Linear { fan_in: d_in },
        );
        Self {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) || !(2..=3).contains(&shape.len()) {
            return Err(NnError::shape(
                "linear",
                format!("input {shape:?}, expected [.., {}]", self.d_in),
            ));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, vec![rows, self.d_in])?
        };
        let mut y = g.matmul(flat, p[self.w])?;
        if let Some(b) = self.b {
            y = g.add(y, p[b])?;
        }
        if shape.len() == 3 {
            y = g.reshape(y, vec![shape[0], shape[1], self.d_out])?;
        }
        Ok(y)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), vec![d], Init::Ones),
            beta: store.add(&format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let s = g.mul(n, p[self.gamma])?;
        g.add(s, p[self.beta])
    }
}

/// Stack of linear layers with ReLU between them and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists input, hidden and output widths.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 < n {
                    Activation::Relu
                } else {
                    Activation::Identity
                };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Linear embedding followed by residual blocks `h + relu(h W + b)`.
#[derive(Debug, Clone)]
pub struct ResMlp {
    pub embed: Linear,
    pub blocks: Vec<Linear>,
}

impl ResMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        width: usize,
        blocks: usize,
    ) -> Self {
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            d_in,
            width,
            Activation::Identity,
        );
        let blocks = (0..blocks)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.block{i}"),
                    width,
                    width,
                    Activation::Relu,
                )
            })
            .collect();
        Self { embed, blocks }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.embed.forward(g, p, x)?;
        for b in &self.blocks {
            let r = b.forward(g, p, h)?;
            let r = g.relu(r);
            h = g.add(h, r)?;
        }
        Ok(h)
    }
}

/// Convolutional feature extractor: repeated (3x3 conv, ReLU, 2x2 max-pool)
/// stages, flattened into a linear projection.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub convs: Vec<(ParamId, ParamId)>,
    pub head: Linear,
    pub in_channels: usize,
    pub side: usize,
}

impl Cnn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        side: usize,
        channels: &[usize],
        d_out: usize,
    ) -> Self {
        let mut c_prev = in_channels;
        let mut s = side;
        let mut convs = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let fan_in = c_prev * 9;
            let w = store.add(
                &format!("{name}.conv{i}.w"),
                vec![c, c_prev, 3, 3],
                Init::Relu { fan_in },
            );
            let b = store.add(&format!("{name}.conv{i}.b"), vec![c], Init::Zeros);
            convs.push((w, b));
            c_prev = c;
            s /= 2;
        }
        assert!(
            s >= 1,
            "input side {side} too small for {} pooling stages",
            channels.len()
        );
        let head = Linear::new(
            store,
            &format!("{name}.head"),
            c_prev * s * s,
            d_out,
            Activation::Identity,
        );
        Self {
            convs,
            head,
            in_channels,
            side,
        }
    }

    /// `x` is `[B, C, side, side]`; returns `[B, d_out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.convs {
            h = g.conv2d(h, p[w], Some(p[b]), 1)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, vec![s[0], s[1] * s[2] * s[3]])?;
        self.head.forward(g, p, flat)
    }
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` on
/// `[B, n, d]`, `[B, m, d]`, `[B, m, dv]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let kt = g.transpose_last(k)?;
    let logits = g.bmm(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let w = g.softmax(logits);
    g.bmm(w, v)
}

/// Attention between two `[B, l]` feature vectors treated as `l` scalar
/// tokens each: `out_i = sum_j softmax_j(q_i k_j / sqrt(l)) v_j`.
pub fn elementwise_cross_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(NnError::shape(
            "cross_attention",
            format!("{s:?}, {:?}, {:?}", g.shape(k), g.shape(v)),
        ));
    }
    let (b, l) = (s[0], s[1]);
    let q3 = g.reshape(q, vec![b, l, 1])?;
    let k3 = g.reshape(k, vec![b, l, 1])?;
    let v3 = g.reshape(v, vec![b, l, 1])?;
    let kt = g.transpose_last(k3)?;
    let logits = g.bmm(q3, kt)?;
    let logits = g.scale(logits, 1.0 / (l as f64).sqrt());
    let w = g.softmax(logits);
    let out = g.bmm(w, v3)?;
    g.reshape(out, vec![b, l])
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d_model % heads == 0,
            "d_model must split evenly across heads"
        );
        let lin = |store: &mut ParamStore, n: &str| {
            Linear::new(
                store,
                &format!("{name}.{n}"),
                d_model,
                d_model,
                Activation::Identity,
            )
        };
        Self {
            wq: lin(store, "q"),
            wk: lin(store, "k"),
            wv: lin(store, "v"),
            wo: lin(store, "o"),
            heads,
            d_model,
        }
    }

    /// `x` is `[B, T, d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let q = self.wq.forward(g, p, x)?;
        let k = self.wk.forward(g, p, x)?;
        let v = self.wv.forward(g, p, x)?;
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dh, dh)?;
            let kh = g.slice_last(k, h * dh, dh)?;
            let vh = g.slice_last(v, h * dh, dh)?;
            outs.push(attention(g, qh, kh, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        self.wo.forward(g, p, cat)
    }
}

/// Post-norm encoder layer: `x = LN(x + MHSA(x)); x = LN(x + FF(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadSelfAttention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), d_model, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d_model, d_ff, d_model]),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, p, x)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, p, h)?;
        let f = self.ff.forward(g, p, h)?;
        let h2 = g.add(h, f)?;
        self.ln2.forward(g, p, h2)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![len, d], data).expect("table size")
}

/// Token embedding, sinusoidal positions, encoder layers and mean pooling
/// over the sequence.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub d_model: usize,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_token: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        depth: usize,
    ) -> Self {
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            d_token,
            d_model,
            Activation::Identity,
        );
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), d_model, heads, d_ff))
            .collect();
        Self {
            embed,
            layers,
            d_model,
        }
    }

    /// `x` is `[B, T, d_token]`; returns `[B, d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[1];
        let h = self.embed.forward(g, p, x)?;
        let pe = g.input(sinusoidal_positions(t, self.d_model));
        let mut h = g.add(h, pe)?;
        for l in &self.layers {
            h = l.forward(g, p, h)?;
        }
        g.mean_axis1(h)
    }
}

/// Gated fusion of two same-width inputs:
/// `gate = sigmoid([a, b] W + c)`, `out = gate * a + (1 - gate) * b`.
#[derive(Debug, Clone)]
pub struct Grif {
    pub gate: Linear,
    pub width: usize,
}

impl Grif {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gate: Linear::new(store, name, 2 * width, width, Activation::Identity),
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, a: Var, b: Var) -> Result<Var> {
        let cat = g.concat(&[a, b])?;
        let z = self.gate.forward(g, p, cat)?;
        let gate = g.sigmoid(z);
        let diff = g.sub(a, b)?;
        let gd = g.mul(gate, diff)?;
        g.add(b, gd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};

    fn tensor(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn cross_attention_matches_direct_formula() {
        let (b, l) = (2, 5);
        let (q, k, v) = (tensor(&[b, l], 1), tensor(&[b, l], 2), tensor(&[b, l], 3));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = elementwise_cross_attention(&mut g, qv, kv, vv).unwrap();
        let got = g.value(out).to_vec();
        for bi in 0..b {
            for i in 0..l {
                let qi = q.data()[bi * l + i];
                let logits: Vec<f64> = (0..l)
                    .map(|j| qi * k.data()[bi * l + j] / (l as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                let want: f64 = (0..l)
                    .map(|j| logits[j].exp() / z * v.data()[bi * l + j])
                    .sum();
                assert!((got[bi * l + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grif_extremes_select_input() {
        let mut store = ParamStore::new(0);
        let grif = Grif::new(&mut store, "g", 1);
        let c = grif.gate.b.unwrap();
        for (bias, pick_a) in [(60.0, true), (-60.0, false)] {
            store.set(grif.gate.w, &[0.0, 0.0]).unwrap();
            store.set(c, &[bias]).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let a = g.input(Tensor::from_vec(vec![1, 1], vec![0.3]).unwrap());
            let b = g.input(Tensor::from_vec(vec![1, 1], vec![0.8]).unwrap());
            let y = grif.forward(&mut g, &p, a, b).unwrap();
            let want = if pick_a { 0.3 } else { 0.8 };
            assert!((g.value(y)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grif_of_equal_inputs_is_identity() {
        let mut store = ParamStore::new(4);
        let grif = Grif::new(&mut store, "g", 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = tensor(&[2, 3], 9);
        let a = g.input(x.clone());
        let b = g.input(x.clone());
        let y = grif.forward(&mut g, &p, a, b).unwrap();
        for (u, v) in g.value(y).iter().zip(x.data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new(11);
        let enc = TransformerEncoder::new(&mut store, "enc", 3, 4, 2, 8, 1);
        let x = tensor(&[2, 5, 3], 5);
        let target: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
            let xi = g.input(x.clone());
            let y = enc.forward(g, p, xi)?;
            g.mse(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.worst());
    }

    #[test]
    fn cnn_and_resmlp_gradients_match_finite_differences() {
        let mut store = ParamStore::new(12);
        let cnn = Cnn::new(&mut store, "cnn", 1, 8, &[2, 2], 3);
        let res = ResMlp::new(&mut store, "res", 2, 3, 2);
        let img = tensor(&[2, 1, 8, 8], 6);
        let side = tensor(&[2, 2], 7);
        let target = [0.1, 0.2, 0.3, -0.1, 0.0, 0.4];
        let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
            let xi = g.input(img.clone());
            let si = g.input(side.clone());
            let a = cnn.forward(g, p, xi)?;
            let b = res.forward(g, p, si)?;
            let y = g.mul(a, b)?;
            g.mse(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.worst());
    }
}

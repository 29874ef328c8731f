//! A tiny deterministic pre-norm decoder-only transformer.
//!
//! Learned token and positional embeddings, `n_layers` blocks of causal
//! multi-head attention followed by a GELU MLP, a final layer norm and an
//! untied unembedding. The residual width is `n_heads * d_head`.
//!
//! Each block computes `x + sum_h W_O[h] Att(P_h LN(x))` where `P_h` is the
//! value projection of head `h`; the hooked activation is the attention mix
//! `Att(P_h LN(x))` at the last position, before `W_O[h]`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{IndexTokenizer, Tokenizer};
use super::{CognitiveModel, ForwardOutput, HeadActivations, ModelDims, TokenSeq};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub dims: ModelDims,
    pub max_seq_len: usize,
    pub d_mlp: usize,
    pub seed: u64,
    /// Standard deviation of the random weights.
    pub init_std: f64,
}

impl TransformerConfig {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        Self {
            dims,
            max_seq_len: 64,
            d_mlp: 4 * dims.d_model(),
            seed,
            init_std: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Query, key and value projections, `[n_heads * d_head, d_model]`;
    /// rows `h*d_head..(h+1)*d_head` belong to head `h`.
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// Output projection `[d_model, n_heads * d_head]`; column block `h` maps head `h` back.
    pub w_o: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `[vocab_size, d_model]`
    pub unembedding: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: TransformerConfig,
    weights: Weights,
    tokenizer: IndexTokenizer,
}

/// Full record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub activations: HeadActivations,
    /// `attention[layer][head]` is the `[seq, seq]` causal attention matrix.
    pub attention: Vec<Vec<Array2<f64>>>,
    /// Residual stream entering each layer, then the final stream.
    pub residuals: Vec<Array2<f64>>,
}

fn random_matrix(
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
    rows: usize,
    cols: usize,
) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn random_vector(rng: &mut ChaCha8Rng, normal: &Normal<f64>, n: usize, centre: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| centre + 0.1 * normal.sample(rng))
}

impl TinyTransformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.dims.validate()?;
        if config.max_seq_len == 0 || config.d_mlp == 0 {
            return Err(Error::config("max_seq_len and d_mlp must be positive"));
        }
        if !(config.init_std.is_finite() && config.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        let dims = config.dims;
        let d = dims.d_model();
        let hd = dims.n_heads * dims.d_head;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let proj = Normal::new(0.0, config.init_std / (d as f64).sqrt()).expect("finite std");
        let mlp_out =
            Normal::new(0.0, config.init_std / (config.d_mlp as f64).sqrt()).expect("finite std");

        let token_embedding = random_matrix(&mut rng, &unit, dims.vocab_size, d);
        let position_embedding = random_matrix(&mut rng, &unit, config.max_seq_len, d) * 0.5;
        let layers = (0..dims.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: random_vector(&mut rng, &unit, d, 1.0),
                ln1_bias: random_vector(&mut rng, &unit, d, 0.0),
                w_q: random_matrix(&mut rng, &proj, hd, d) * 4.0,
                w_k: random_matrix(&mut rng, &proj, hd, d) * 4.0,
                w_v: random_matrix(&mut rng, &proj, hd, d),
                w_o: random_matrix(&mut rng, &proj, d, hd),
                ln2_gain: random_vector(&mut rng, &unit, d, 1.0),
                ln2_bias: random_vector(&mut rng, &unit, d, 0.0),
                w_in: random_matrix(&mut rng, &proj, config.d_mlp, d),
                b_in: random_vector(&mut rng, &unit, config.d_mlp, 0.0),
                w_out: random_matrix(&mut rng, &mlp_out, d, config.d_mlp),
                b_out: random_vector(&mut rng, &unit, d, 0.0),
            })
            .collect();
        let weights = Weights {
            token_embedding,
            position_embedding,
            layers,
            lnf_gain: random_vector(&mut rng, &unit, d, 1.0),
            lnf_bias: random_vector(&mut rng, &unit, d, 0.0),
            unembedding: random_matrix(&mut rng, &unit, dims.vocab_size, d),
        };
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: TransformerConfig, weights: Weights) -> Result<Self> {
        let model = Self {
            tokenizer: IndexTokenizer::new(config.dims.vocab_size),
            config,
            weights,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let dims = self.config.dims;
        let d = dims.d_model();
        let hd = dims.n_heads * dims.d_head;
        let mlp = self.config.d_mlp;
        let w = &self.weights;
        let mismatch = |what: &str, got: &[usize], want: &[usize]| {
            Error::config(format!("{what} has shape {got:?}, expected {want:?}"))
        };
        let check2 = |what: &str, a: &Array2<f64>, want: [usize; 2]| {
            if a.shape() != want {
                Err(mismatch(what, a.shape(), &want))
            } else {
                Ok(())
            }
        };
        let check1 = |what: &str, a: &Array1<f64>, n: usize| {
            if a.len() != n {
                Err(mismatch(what, a.shape(), &[n]))
            } else {
                Ok(())
            }
        };
        check2("token_embedding", &w.token_embedding, [dims.vocab_size, d])?;
        check2(
            "position_embedding",
            &w.position_embedding,
            [self.config.max_seq_len, d],
        )?;
        check2("unembedding", &w.unembedding, [dims.vocab_size, d])?;
        check1("lnf_gain", &w.lnf_gain, d)?;
        check1("lnf_bias", &w.lnf_bias, d)?;
        if w.layers.len() != dims.n_layers {
            return Err(mismatch("layers", &[w.layers.len()], &[dims.n_layers]));
        }
        for l in &w.layers {
            check1("ln1_gain", &l.ln1_gain, d)?;
            check1("ln1_bias", &l.ln1_bias, d)?;
            check2("w_q", &l.w_q, [hd, d])?;
            check2("w_k", &l.w_k, [hd, d])?;
            check2("w_v", &l.w_v, [hd, d])?;
            check2("w_o", &l.w_o, [d, hd])?;
            check1("ln2_gain", &l.ln2_gain, d)?;
            check1("ln2_bias", &l.ln2_bias, d)?;
            check2("w_in", &l.w_in, [mlp, d])?;
            check1("b_in", &l.b_in, mlp)?;
            check2("w_out", &l.w_out, [d, mlp])?;
            check1("b_out", &l.b_out, d)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Copy of the model with every output projection set to zero.
    pub fn with_zeroed_output_projections(&self) -> Self {
        let layers = (0..self.config.dims.n_layers).collect::<Vec<_>>();
        self.with_zeroed_output_projection_layers(&layers)
    }

    pub fn with_zeroed_output_projection_layers(&self, layers: &[usize]) -> Self {
        let mut out = self.clone();
        for &l in layers {
            out.weights.layers[l].w_o.fill(0.0);
        }
        out
    }

    pub fn forward_trace(&self, tokens: &TokenSeq) -> Result<ForwardTrace> {
        let dims = self.config.dims;
        tokens.check_vocab(dims.vocab_size)?;
        let n = tokens.len();
        if n > self.config.max_seq_len {
            return Err(Error::validation(format!(
                "sequence of {n} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let w = &self.weights;
        let dh = dims.d_head;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::<f64>::zeros((n, dims.d_model()));
        for (pos, &t) in tokens.as_slice().iter().enumerate() {
            let row = &w.token_embedding.row(t as usize) + &w.position_embedding.row(pos);
            x.row_mut(pos).assign(&row);
        }

        let mut activations = HeadActivations::zeros(dims.n_layers, dims.n_heads, dh);
        let mut attention = Vec::with_capacity(dims.n_layers);
        let mut residuals = Vec::with_capacity(dims.n_layers + 1);

        for (li, layer) in w.layers.iter().enumerate() {
            residuals.push(x.clone());
            let xn = layer_norm_rows(&x, &layer.ln1_gain, &layer.ln1_bias);
            let q = xn.dot(&layer.w_q.t());
            let k = xn.dot(&layer.w_k.t());
            let v = xn.dot(&layer.w_v.t());
            let mut mixed = Array2::<f64>::zeros((n, dims.n_heads * dh));
            let mut layer_attn = Vec::with_capacity(dims.n_heads);
            for h in 0..dims.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for i in 0..n {
                    let mut row = scores.row_mut(i);
                    row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                let head_out = scores.dot(&v.slice(cols));
                if head_out.iter().any(|z| !z.is_finite()) {
                    return Err(Error::Numeric {
                        layer: li,
                        head: h,
                        stage: "attention mix",
                    });
                }
                activations
                    .head_mut(li, h)
                    .copy_from_slice(head_out.row(n - 1).as_slice().expect("contiguous row"));
                mixed.slice_mut(cols).assign(&head_out);
                layer_attn.push(scores);
            }
            attention.push(layer_attn);
            x = x + mixed.dot(&layer.w_o.t());

            let xn = layer_norm_rows(&x, &layer.ln2_gain, &layer.ln2_bias);
            let mut hidden = xn.dot(&layer.w_in.t()) + &layer.b_in;
            hidden.mapv_inplace(gelu);
            x = x + hidden.dot(&layer.w_out.t()) + &layer.b_out;
            if x.iter().any(|z| !z.is_finite()) {
                return Err(Error::Numeric {
                    layer: li,
                    head: usize::MAX,
                    stage: "mlp",
                });
            }
        }
        residuals.push(x.clone());

        let last = layer_norm(x.row(n - 1), &w.lnf_gain, &w.lnf_bias);
        let logits: Vec<f64> = w.unembedding.dot(&last).to_vec();
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        Ok(ForwardTrace {
            logits,
            probs,
            activations,
            attention,
            residuals,
        })
    }
}

impl CognitiveModel for TinyTransformer {
    fn dims(&self) -> ModelDims {
        self.config.dims
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn forward(&self, tokens: &TokenSeq) -> Result<ForwardOutput> {
        let trace = self.forward_trace(tokens)?;
        Ok(ForwardOutput {
            probs: trace.probs,
            activations: trace.activations,
        })
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn layer_norm(x: ArrayView1<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * inv) * gain + bias
}

fn layer_norm_rows(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&layer_norm(src, gain, bias));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(layers: usize, heads: usize) -> TinyTransformer {
        let dims = ModelDims::new(layers, heads, 3, 8).unwrap();
        TinyTransformer::new(TransformerConfig::new(dims, 7)).unwrap()
    }

    #[test]
    fn single_token_activation_is_value_projection() {
        let m = toy(1, 2);
        let t = TokenSeq::new(vec![5]).unwrap();
        let trace = m.forward_trace(&t).unwrap();
        let w = m.weights();
        let x0 = &w.token_embedding.row(5) + &w.position_embedding.row(0);
        let xn = layer_norm(x0.view(), &w.layers[0].ln1_gain, &w.layers[0].ln1_bias);
        let v = w.layers[0].w_v.dot(&xn);
        for h in 0..2 {
            assert_eq!(trace.attention[0][h][[0, 0]], 1.0);
            for i in 0..3 {
                assert!((trace.activations.head(0, h)[i] - v[h * 3 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = toy(2, 2);
        let t = TokenSeq::new(vec![1, 4, 2, 7, 0, 3]).unwrap();
        let trace = m.forward_trace(&t).unwrap();
        for layer in &trace.attention {
            for a in layer {
                for (i, row) in a.axis_iter(Axis(0)).enumerate() {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
                }
            }
        }
        assert!((trace.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn residual_width_is_preserved() {
        let m = toy(3, 2);
        let trace = m
            .forward_trace(&TokenSeq::new(vec![1, 2, 3]).unwrap())
            .unwrap();
        assert_eq!(trace.residuals.len(), 4);
        assert!(trace.residuals.iter().all(|r| r.shape() == [3, 6]));
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let m = toy(1, 2);
        let mut w = m.weights().clone();
        w.layers[0].w_v = Array2::zeros((5, 6));
        let err = TinyTransformer::from_weights(m.config().clone(), w).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn non_finite_weights_name_the_head() {
        let m = toy(2, 2);
        let mut w = m.weights().clone();
        w.layers[1].w_v[[4, 0]] = f64::INFINITY;
        let bad = TinyTransformer::from_weights(m.config().clone(), w).unwrap();
        match bad.forward_trace(&TokenSeq::new(vec![1, 2]).unwrap()) {
            Err(Error::Numeric { layer, head, .. }) => assert_eq!((layer, head), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_long_input_is_rejected() {
        let m = toy(1, 1);
        let long = TokenSeq::new(vec![1; 65]).unwrap();
        assert!(m.forward(&long).is_err());
    }
}

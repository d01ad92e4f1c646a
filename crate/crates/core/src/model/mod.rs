//! Decoder-only transformer: pre-layer-norm blocks, learned positions and an
//! output head tied to the token embedding.

mod checkpoint;
mod trace;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use trace::AttentionTrace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::kernels::argmax;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture description of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return invalid("max_seq_len must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + 4 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

/// Weights of one transformer block. Projections are stored `[d_in x d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// All weights of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

/// Shapes of every parameter tensor, in canonical order.
pub fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut shapes = vec![vec![config.vocab_size, d], vec![config.max_seq_len, d]];
    for _ in 0..config.n_layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d]]);
    shapes
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let shapes = param_shapes(config);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match init_kind(i, config.n_layers) {
                InitKind::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
            };
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != tensors.len() {
            return invalid(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            ));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return invalid(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    t.shape()
                ));
            }
            if !t.is_finite() {
                return invalid(format!("tensor {i} has non-finite entries"));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gamma: next(),
                ln1_beta: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w_ff1: next(),
                b_ff1: next(),
                w_ff2: next(),
                b_ff2: next(),
            });
        }
        let final_gamma = next();
        let final_beta = next();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gamma,
            final_beta,
        })
    }

    /// Every parameter tensor in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return invalid(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return invalid("empty token sequence");
        }
        if tokens.len() > self.config.max_seq_len {
            return invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return invalid(format!(
                "token id {t} out of range for vocab size {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    ///
    /// Returns the `[T x vocab]` logits node, the parameter nodes in canonical
    /// order and, when requested, the attention nodes indexed `[layer][head]`.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
    ) -> Result<ForwardNodes> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t_len = tokens.len();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let params: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("canonical parameter order");
        let tok = next();
        let pos = next();

        let positions: Vec<usize> = (0..t_len).collect();
        let x_tok = tape.gather_rows(tok, tokens)?;
        let x_pos = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(x_tok, x_pos)?;

        let mut attention = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let [ln1_g, ln1_b, wq, bq, wk, _bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                std::array::from_fn(|_| next());

            let h = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
            let q = tape.matmul(h, wq)?;
            let q = tape.add_bias(q, bq)?;
            // The key bias adds the same amount to every score in a row,
            // which the softmax cancels, so it is not applied.
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let v = tape.add_bias(v, bv)?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(attn, vh)?);
                probs.push(attn);
            }
            attention.push(probs);
            let merged = tape.concat_cols(&heads)?;
            let o = tape.matmul(merged, wo)?;
            let o = tape.add_bias(o, bo)?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            let f = tape.matmul(h2, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = tape.add(x, f)?;
        }
        let fg = next();
        let fb = next();
        let x = tape.layer_norm(x, fg, fb, LAYER_NORM_EPS)?;
        let logits = tape.matmul_nt(x, tok)?;
        Ok(ForwardNodes {
            logits,
            params,
            attention,
        })
    }

    /// Next-token logits `[T x vocab]` (row-major) and the full attention trace.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, AttentionTrace)> {
        let mut tape = Tape::no_grad();
        let nodes = self.forward_on_tape(&mut tape, tokens)?;
        let trace = AttentionTrace::from_forward(&tape, &nodes.attention, tokens.len(), tokens.len())?;
        let logits = Tensor::matrix(
            tokens.len(),
            self.config.vocab_size,
            tape.value(nodes.logits).to_vec(),
        )?;
        Ok((logits, trace))
    }

    /// Logits only; skips building the attention trace.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let nodes = self.forward_on_tape(&mut tape, tokens)?;
        Tensor::matrix(
            tokens.len(),
            self.config.vocab_size,
            tape.value(nodes.logits).to_vec(),
        )
    }

    /// Greedy decoding with lowest-id tie-breaking.
    ///
    /// Stops after `stop_token`, after `max_new` tokens or at `max_seq_len`.
    /// The returned sequence includes the prompt; the trace holds one step per
    /// generated token with `context_len = prompt.len()`.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop_token: usize,
    ) -> Result<(Vec<usize>, AttentionTrace)> {
        if prompt.is_empty() {
            return invalid("generate_greedy needs a non-empty prompt");
        }
        self.check_tokens(prompt)?;
        let cfg = &self.config;
        let mut seq = prompt.to_vec();
        let mut trace = AttentionTrace::new(prompt.len(), cfg.n_layers, cfg.n_heads);
        for _ in 0..max_new {
            if seq.len() >= cfg.max_seq_len {
                break;
            }
            let mut tape = Tape::no_grad();
            let nodes = self.forward_on_tape(&mut tape, &seq)?;
            let v = cfg.vocab_size;
            let last = seq.len() - 1;
            let row = &tape.value(nodes.logits)[last * v..(last + 1) * v];
            let next = argmax(row);
            trace.push_last_rows(&tape, &nodes.attention, seq.len())?;
            seq.push(next);
            if next == stop_token {
                break;
            }
        }
        Ok((seq, trace))
    }
}

/// Tape handles produced by [`ModelParams::forward_on_tape`].
pub struct ForwardNodes {
    pub logits: Var,
    pub params: Vec<Var>,
    /// Attention probability nodes, `[layer][head]`, each `[T x T]`.
    pub attention: Vec<Vec<Var>>,
}

enum InitKind {
    Normal,
    Zero,
    One,
}

fn init_kind(index: usize, n_layers: usize) -> InitKind {
    if index < 2 {
        return InitKind::Normal;
    }
    let i = index - 2;
    if i >= 16 * n_layers {
        return if i - 16 * n_layers == 0 {
            InitKind::One
        } else {
            InitKind::Zero
        };
    }
    match i % 16 {
        0 | 10 => InitKind::One,
        1 | 11 => InitKind::Zero,
        2 | 4 | 6 | 8 | 12 | 14 => InitKind::Normal,
        _ => InitKind::Zero,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 5,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small()).unwrap();
        let b = ModelParams::init(&small()).unwrap();
        assert_eq!(a.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let c = ModelParams::init(&ModelConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn hand_counted_parameters() {
        // embeddings 10*8 + positions 12*8
        // block: 4 projections (8*8 + 8), 2 layer norms (2*8 each),
        //        ff1 8*16 + 16, ff2 16*8 + 8
        // final layer norm 2*8
        let block = 4 * (64 + 8) + 2 * 16 + (128 + 16) + (128 + 8);
        let expected = 80 + 96 + block + 16;
        assert_eq!(expected, 792);
        let p = ModelParams::init(&small()).unwrap();
        assert_eq!(p.num_params(), expected);
        assert_eq!(small().param_count(), expected);
    }

    #[test]
    fn init_biases_and_gains() {
        let p = ModelParams::init(&small()).unwrap();
        let l = &p.layers[0];
        assert!(l.ln1_gamma.data().iter().all(|&x| x == 1.0));
        assert!(l.ln2_beta.data().iter().all(|&x| x == 0.0));
        assert!(l.b_q.data().iter().all(|&x| x == 0.0));
        assert!(l.b_ff2.data().iter().all(|&x| x == 0.0));
        assert!(p.final_gamma.data().iter().all(|&x| x == 1.0));
        assert!(p.final_beta.data().iter().all(|&x| x == 0.0));
        let w = l.w_q.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!(w.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { n_heads: 3, ..small() }.validate().is_err());
        assert!(ModelConfig { max_seq_len: 1, ..small() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_errors() {
        let p = ModelParams::init(&small()).unwrap();
        let (logits, trace) = p.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(logits.shape(), &[4, 10]);
        assert_eq!(trace.steps().len(), 4);
        assert!(p.forward(&[]).is_err());
        assert!(p.forward(&[10]).is_err());
        assert!(p.forward(&[0; 13]).is_err());
    }

    #[test]
    fn attention_rows_normalized() {
        let p = ModelParams::init(&small()).unwrap();
        let (_, trace) = p.forward(&[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
        for (t, step) in trace.steps().iter().enumerate() {
            for layer in step {
                for row in layer {
                    assert_eq!(row.len(), t + 1);
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn causal_perturbation() {
        let p = ModelParams::init(&ModelConfig { seed: 9, ..small() }).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let len = rng.gen_range(2..=12);
            let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..10)).collect();
            let k = rng.gen_range(1..len);
            let mut other = toks.clone();
            other[k] = (other[k] + 1 + rng.gen_range(0..9)) % 10;
            let a = p.logits(&toks).unwrap();
            let b = p.logits(&other).unwrap();
            for i in 0..k * 10 {
                assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn generate_edge_cases() {
        let p = ModelParams::init(&small()).unwrap();
        let (seq, trace) = p.generate_greedy(&[1, 2], 0, 0).unwrap();
        assert_eq!(seq, vec![1, 2]);
        assert!(trace.steps().is_empty());
        assert!(p.generate_greedy(&[], 3, 0).is_err());

        // Stop on whatever the first greedy token is.
        let first = {
            let l = p.logits(&[1, 2]).unwrap();
            argmax(&l.data()[10..20])
        };
        let (seq, trace) = p.generate_greedy(&[1, 2], 5, first).unwrap();
        assert_eq!(seq, vec![1, 2, first]);
        assert_eq!(trace.steps().len(), 1);

        // Never exceeds max_seq_len.
        let (seq, _) = p.generate_greedy(&[1; 10], 50, 99).unwrap();
        assert_eq!(seq.len(), 12);
    }

    #[test]
    fn generate_matches_step_by_step_decoding() {
        let p = ModelParams::init(&ModelConfig { seed: 21, ..small() }).unwrap();
        let prompt = [4, 7, 1];
        let (seq, trace) = p.generate_greedy(&prompt, 6, 0).unwrap();
        let mut oracle = prompt.to_vec();
        for _ in 0..6 {
            let (l, _) = p.forward(&oracle).unwrap();
            let row = &l.data()[(oracle.len() - 1) * 10..oracle.len() * 10];
            let mut best = 0;
            for i in 1..10 {
                if row[i] > row[best] {
                    best = i;
                }
            }
            oracle.push(best);
            if best == 0 || oracle.len() == 12 {
                break;
            }
        }
        assert_eq!(seq, oracle);
        let lens: Vec<usize> = trace.steps().iter().map(|s| s[0][0].len()).collect();
        for w in lens.windows(2) {
            assert_eq!(w[1], w[0] + 1);
        }
    }
}

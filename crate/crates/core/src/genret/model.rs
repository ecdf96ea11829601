//! Decoder-only transformer shared by the retrieval and generative heads.
//!
//! Input sequence: projected visual tokens, query word embeddings and, for
//! retrieval, one trailing retrieval token. Every position gets a learned
//! embedding for its offset from the start and another for its offset from
//! the end.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Mat, Scalar};
use super::{GenretError, ModelConfig, RetInit};
use crate::datagen::Relation;
use crate::embed::EmbeddingMatrix;
use crate::vocab::Vocabulary;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const EOS_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Closed whitespace word vocabulary for queries, narrations and generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    lookup: std::collections::HashMap<String, u32>,
}

impl WordVocab {
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != EOS && w != UNK).collect();
        let mut all = vec![EOS.to_string(), UNK.to_string()];
        all.extend(set);
        Self::from_list(all)
    }

    fn from_list(words: Vec<String>) -> Self {
        let lookup = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        WordVocab { words, lookup }
    }

    /// Words of every query template and every vocabulary entry.
    pub fn for_vocabulary(vocab: &Vocabulary) -> Self {
        let mut words: Vec<String> = Relation::ALL.iter().flat_map(|r| split_words(r.query())).collect();
        for e in vocab.entries() {
            words.extend(split_words(&e.text));
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != EOS_ID)
            .map(|&i| self.words.get(i as usize).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn rebuild_lookup(self) -> Self {
        Self::from_list(self.words)
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Retrieval,
    Generative,
}

#[derive(Debug, Clone)]
pub(super) struct BlockIds {
    pub(super) ln1_g: usize,
    pub(super) ln1_b: usize,
    pub(super) qkv_w: usize,
    pub(super) qkv_b: usize,
    pub(super) out_w: usize,
    pub(super) out_b: usize,
    pub(super) ln2_g: usize,
    pub(super) ln2_b: usize,
    pub(super) fc1_w: usize,
    pub(super) fc1_b: usize,
    pub(super) fc2_w: usize,
    pub(super) fc2_b: usize,
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    pub(super) vis_w: usize,
    pub(super) vis_b: usize,
    pub(super) word_emb: usize,
    pub(super) pos_fwd: usize,
    /// Positions counted from the end; retrieval head only.
    pub(super) pos_bwd: Option<usize>,
    pub(super) ret_token: usize,
    pub(super) blocks: Vec<BlockIds>,
    pub(super) lnf_g: usize,
    pub(super) lnf_b: usize,
    pub(super) head_w: usize,
    pub(super) head_b: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl Layout {
    /// Parameter names, shapes and initializers in storage order.
    fn plan(cfg: &ModelConfig, head: HeadKind) -> (Layout, Vec<(String, usize, usize, Init)>) {
        let d = cfg.d_model;
        let ff = 4 * d;
        let mut specs = Vec::new();
        let mut add = |name: String, r: usize, c: usize, init: Init| {
            specs.push((name, r, c, init));
            specs.len() - 1
        };
        let resid = 0.02 / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
        let vis_w = add("vis_proj.w".into(), cfg.d_embed, d, Init::Normal(1.0 / (cfg.d_embed as f64).sqrt()));
        let vis_b = add("vis_proj.b".into(), 1, d, Init::Zeros);
        let word_emb = add("word_emb".into(), cfg.query_vocab_size, d, Init::Normal(0.02));
        let pos_fwd = add("pos_fwd".into(), cfg.max_seq_len, d, Init::Normal(0.02));
        let pos_bwd = (head == HeadKind::Retrieval).then(|| add("pos_bwd".into(), cfg.max_seq_len, d, Init::Normal(0.02)));
        let ret_token = add("ret_token".into(), 1, d, Init::Normal(0.02));
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let mut p = |n: &str, r, c, init| add(format!("blocks.{l}.{n}"), r, c, init);
                BlockIds {
                    ln1_g: p("ln1.g", 1, d, Init::Ones),
                    ln1_b: p("ln1.b", 1, d, Init::Zeros),
                    qkv_w: p("attn.qkv.w", d, 3 * d, Init::Normal(0.02)),
                    qkv_b: p("attn.qkv.b", 1, 3 * d, Init::Zeros),
                    out_w: p("attn.out.w", d, d, Init::Normal(resid)),
                    out_b: p("attn.out.b", 1, d, Init::Zeros),
                    ln2_g: p("ln2.g", 1, d, Init::Ones),
                    ln2_b: p("ln2.b", 1, d, Init::Zeros),
                    fc1_w: p("mlp.fc1.w", d, ff, Init::Normal(0.02)),
                    fc1_b: p("mlp.fc1.b", 1, ff, Init::Zeros),
                    fc2_w: p("mlp.fc2.w", ff, d, Init::Normal(resid)),
                    fc2_b: p("mlp.fc2.b", 1, d, Init::Zeros),
                }
            })
            .collect();
        let lnf_g = add("ln_f.g".into(), 1, d, Init::Ones);
        let lnf_b = add("ln_f.b".into(), 1, d, Init::Zeros);
        let out_dim = match head {
            HeadKind::Retrieval => cfg.d_embed,
            HeadKind::Generative => cfg.query_vocab_size,
        };
        let head_w = add("head.w".into(), d, out_dim, Init::Normal(1.0 / (d as f64).sqrt()));
        let head_b = add("head.b".into(), 1, out_dim, Init::Zeros);
        let layout = Layout { vis_w, vis_b, word_emb, pos_fwd, pos_bwd, ret_token, blocks, lnf_g, lnf_b, head_w, head_b };
        (layout, specs)
    }
}

/// Backbone plus one output head. [`GenRetModel`] and [`GenerativeModel`]
/// wrap it with their own forward entry points.
#[derive(Debug, Clone)]
pub struct Transformer<T: Scalar> {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub names: Vec<String>,
    pub params: Vec<Mat<T>>,
    pub(super) layout: Layout,
}

impl<T: Scalar> PartialEq for Transformer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.head == other.head && self.names == other.names && self.params == other.params
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn init(config: &ModelConfig, head: HeadKind) -> Result<Self, GenretError> {
        config.validate()?;
        let (layout, specs) = Layout::plan(config, head);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, r, c, init) in specs {
            let data = match init {
                Init::Zeros => vec![T::zero(); r * c],
                Init::Ones => vec![T::one(); r * c],
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("positive std");
                    (0..r * c).map(|_| T::c(n.sample(&mut rng))).collect()
                }
            };
            names.push(name);
            params.push(Mat::from_vec(r, c, data));
        }
        Ok(Transformer { config: config.clone(), head, names, params, layout })
    }

    /// Rebuild from named tensors; names and shapes must match the config.
    pub fn from_named(config: &ModelConfig, head: HeadKind, named: Vec<(String, Mat<T>)>) -> Result<Self, GenretError> {
        config.validate()?;
        let (layout, specs) = Layout::plan(config, head);
        if named.len() != specs.len() {
            return Err(GenretError::Checkpoint(format!("expected {} tensors, got {}", specs.len(), named.len())));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, m), (want, r, c, _)) in named.into_iter().zip(specs) {
            if name != want || m.shape() != (r, c) {
                return Err(GenretError::Checkpoint(format!("tensor {name} {:?} does not fit {want} {:?}", m.shape(), (r, c))));
            }
            names.push(name);
            params.push(m);
        }
        Ok(Transformer { config: config.clone(), head, names, params, layout })
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            head: self.head,
            names: self.names.clone(),
            params: self.params.iter().map(Mat::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grads(&self) -> Vec<Mat<T>> {
        self.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect()
    }

    /// Embedded input sequence (before positions). `ret` appends the retrieval token.
    pub fn embed_inputs(&self, tape: &mut Tape<T>, visual: &[Vec<f32>], words: &[u32], ret: bool) -> Result<Var, GenretError> {
        let l = &self.layout;
        let len = visual.len() + words.len() + ret as usize;
        if len > self.config.max_seq_len {
            return Err(GenretError::SeqTooLong { len, max: self.config.max_seq_len });
        }
        if len == 0 {
            return Err(GenretError::EmptyInput);
        }
        if let Some(&w) = words.iter().find(|&&w| w as usize >= self.config.query_vocab_size) {
            return Err(GenretError::UnknownWord(w));
        }
        let mut parts = Vec::new();
        let mut vis = None;
        if !visual.is_empty() {
            let d = self.config.d_embed;
            let mut data = Vec::with_capacity(visual.len() * d);
            for v in visual {
                if v.len() != d {
                    return Err(GenretError::DimMismatch { expected: d, got: v.len() });
                }
                data.extend(v.iter().map(|&x| T::c(x as f64)));
            }
            let x = tape.input(Mat::from_vec(visual.len(), d, data));
            let w = tape.param(l.vis_w);
            let b = tape.param(l.vis_b);
            let proj = tape.matmul(x, w);
            let proj = tape.add_row(proj, b);
            vis = Some(proj);
            parts.push(proj);
        }
        let table = tape.param(l.word_emb);
        if !words.is_empty() {
            let ids: Vec<usize> = words.iter().map(|&w| w as usize).collect();
            parts.push(tape.gather(table, &ids));
        }
        if ret {
            let tok = match self.config.ret_init {
                RetInit::Eos => tape.gather(table, &[EOS_ID as usize]),
                RetInit::Learnable => tape.param(l.ret_token),
                RetInit::Pool => match vis {
                    Some(v) => tape.mean_rows(v),
                    None => tape.param(l.ret_token),
                },
            };
            parts.push(tok);
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) })
    }

    /// Transformer blocks over an embedded sequence. Returns hidden states (len x d_model).
    pub fn run_blocks(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let l = &self.layout;
        let len = tape.value(x).rows;
        let fwd: Vec<usize> = (0..len).collect();
        let bwd: Vec<usize> = (0..len).rev().collect();
        let pf = tape.param(l.pos_fwd);
        let pf = tape.gather(pf, &fwd);
        let mut x = tape.add(x, pf);
        if let Some(id) = l.pos_bwd {
            let pb = tape.param(id);
            let pb = tape.gather(pb, &bwd);
            x = tape.add(x, pb);
        }

        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &l.blocks {
            let (g, bb) = (tape.param(b.ln1_g), tape.param(b.ln1_b));
            let h = tape.layernorm(x, g, bb);
            let (w, bias) = (tape.param(b.qkv_w), tape.param(b.qkv_b));
            let qkv = tape.matmul(h, w);
            let qkv = tape.add_row(qkv, bias);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(qkv, hd * dh, dh);
                let k = tape.slice_cols(qkv, d + hd * dh, dh);
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh);
                let s = tape.matmul_bt(q, k);
                let s = tape.scale(s, scale);
                let p = tape.causal_softmax(s);
                outs.push(tape.matmul(p, v));
            }
            let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let (w, bias) = (tape.param(b.out_w), tape.param(b.out_b));
            let o = tape.matmul(o, w);
            let o = tape.add_row(o, bias);
            x = tape.add(x, o);

            let (g, bb) = (tape.param(b.ln2_g), tape.param(b.ln2_b));
            let h = tape.layernorm(x, g, bb);
            let (w, bias) = (tape.param(b.fc1_w), tape.param(b.fc1_b));
            let f = tape.matmul(h, w);
            let f = tape.add_row(f, bias);
            let f = tape.gelu(f);
            let (w, bias) = (tape.param(b.fc2_w), tape.param(b.fc2_b));
            let f = tape.matmul(f, w);
            let f = tape.add_row(f, bias);
            x = tape.add(x, f);
        }
        if !l.blocks.is_empty() {
            let (g, bb) = (tape.param(l.lnf_g), tape.param(l.lnf_b));
            x = tape.layernorm(x, g, bb);
        }
        x
    }

    fn apply_head(&self, tape: &mut Tape<T>, h: Var) -> Var {
        let (w, b) = (tape.param(self.layout.head_w), tape.param(self.layout.head_b));
        let y = tape.matmul(h, w);
        tape.add_row(y, b)
    }
}

/// Trailing-retrieval-token model.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRetModel<T: Scalar = f32> {
    pub net: Transformer<T>,
}

impl<T: Scalar> GenRetModel<T> {
    pub fn new(config: &ModelConfig) -> Result<Self, GenretError> {
        Ok(GenRetModel { net: Transformer::init(config, HeadKind::Retrieval)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn cast<U: Scalar>(&self) -> GenRetModel<U> {
        GenRetModel { net: self.net.cast() }
    }

    /// Builds the retrieval output on `tape`: a 1 x d_embed row, unit length
    /// unless the config disables normalization.
    pub fn forward_tape(&self, tape: &mut Tape<T>, visual: &[Vec<f32>], words: &[u32]) -> Result<Var, GenretError> {
        let x = self.net.embed_inputs(tape, visual, words, true)?;
        let h = self.net.run_blocks(tape, x);
        let len = tape.value(h).rows;
        let last = tape.slice_rows(h, len - 1, 1);
        let y = self.net.apply_head(tape, last);
        Ok(if self.net.config.normalize_output { tape.l2_normalize(y) } else { y })
    }

    pub fn forward_retrieval(&self, visual: &[Vec<f32>], words: &[u32]) -> Result<Vec<T>, GenretError> {
        let mut tape = Tape::new(&self.net.params);
        let out = self.forward_tape(&mut tape, visual, words)?;
        Ok(tape.value(out).data.clone())
    }

    /// Hidden states for an already embedded input (len x d_model).
    pub fn hidden_states(&self, inputs: &Mat<T>) -> Mat<T> {
        let mut tape = Tape::new(&self.net.params);
        let x = tape.input(inputs.clone());
        let h = self.net.run_blocks(&mut tape, x);
        tape.value(h).clone()
    }

    /// Embedded input sequence, including the retrieval token.
    pub fn input_embeddings(&self, visual: &[Vec<f32>], words: &[u32]) -> Result<Mat<T>, GenretError> {
        let mut tape = Tape::new(&self.net.params);
        let x = self.net.embed_inputs(&mut tape, visual, words, true)?;
        Ok(tape.value(x).clone())
    }
}

impl GenRetModel<f32> {
    /// Retrieval output as f32, ready to score against a vocabulary matrix.
    pub fn query_vector(&self, visual: &[Vec<f32>], words: &[u32]) -> Result<Vec<f32>, GenretError> {
        self.infer_retrieval(visual, words)
    }
}

/// Similarities of a retrieval output against fixed vocabulary rows.
pub fn score(t: &[f32], matrix: &EmbeddingMatrix) -> Result<Vec<f32>, GenretError> {
    if t.len() != matrix.dim() {
        return Err(GenretError::DimMismatch { expected: matrix.dim(), got: t.len() });
    }
    Ok(matrix.scores(t))
}

/// Token-by-token baseline sharing the backbone shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel<T: Scalar = f32> {
    pub net: Transformer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
}

impl<T: Scalar> GenerativeModel<T> {
    pub fn new(config: &ModelConfig) -> Result<Self, GenretError> {
        Ok(GenerativeModel { net: Transformer::init(config, HeadKind::Generative)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Logits (len x vocab) for every position of `visual ++ words`.
    pub fn logits_tape(&self, tape: &mut Tape<T>, visual: &[Vec<f32>], words: &[u32]) -> Result<Var, GenretError> {
        let x = self.net.embed_inputs(tape, visual, words, false)?;
        let h = self.net.run_blocks(tape, x);
        Ok(self.net.apply_head(tape, h))
    }

    /// Teacher-forced loss of emitting `target` then EOS after the prompt.
    pub fn loss_tape(&self, tape: &mut Tape<T>, visual: &[Vec<f32>], query: &[u32], target: &[u32]) -> Result<Var, GenretError> {
        let mut words = query.to_vec();
        words.extend_from_slice(target);
        let x = self.net.embed_inputs(tape, visual, &words, false)?;
        let h = self.net.run_blocks(tape, x);
        let len = tape.value(h).rows;
        let start = visual.len() + query.len() - 1;
        let rows = tape.slice_rows(h, start, len - start);
        let logits = self.net.apply_head(tape, rows);
        let mut targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        targets.push(EOS_ID as usize);
        Ok(tape.cross_entropy(logits, &targets))
    }
}

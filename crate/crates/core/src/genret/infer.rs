//! Tape-free forward passes with a key/value cache, for timing-sensitive
//! inference. Numerically the same computation as the tape forward.

use super::model::{GenRetModel, GenerativeModel, Transformer, DecodeOutput, EOS_ID};
use super::tape::{Tape, GELU_C, LN_EPS};
use super::tensor::{Mat, Scalar};
use super::GenretError;

/// Keys and values of the positions processed so far, one pair per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        KvCache { keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn add_bias<T: Scalar>(m: &mut Mat<T>, b: &Mat<T>) {
    for r in 0..m.rows {
        for (x, &y) in m.row_mut(r).iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

fn layernorm<T: Scalar>(x: &Mat<T>, g: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut out = x.clone();
    let n = T::c(x.cols as f64);
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::c(LN_EPS)).sqrt();
        for (v, (&gg, &bb)) in row.iter_mut().zip(g.data.iter().zip(&b.data)) {
            *v = (*v - mean) * rstd * gg + bb;
        }
    }
    out
}

fn gelu<T: Scalar>(m: &mut Mat<T>) {
    let (half, c, k) = (T::c(0.5), T::c(GELU_C), T::c(0.044_715));
    for x in m.data.iter_mut() {
        let u = c * (*x + k * *x * *x * *x);
        *x = half * *x * (T::one() + u.tanh());
    }
}

impl<T: Scalar> Transformer<T> {
    /// Embedded rows for `visual ++ words (++ retrieval token)`, before positions.
    pub fn embed_plain(&self, visual: &[Vec<f32>], words: &[u32], ret: bool) -> Result<Mat<T>, GenretError> {
        let mut tape = Tape::new(&self.params);
        let x = self.embed_inputs(&mut tape, visual, words, ret)?;
        Ok(tape.value(x).clone())
    }

    /// Runs embedded rows `x` as the continuation of the sequence in `cache`
    /// and returns their final hidden states. Backward positions need the
    /// whole sequence at once, so a cache that is already in use is only
    /// valid for models without them.
    pub fn infer(&self, x: &Mat<T>, cache: &mut KvCache<T>) -> Result<Mat<T>, GenretError> {
        let l = &self.layout;
        let (start, n) = (cache.len, x.rows);
        let total = start + n;
        if total > self.config.max_seq_len {
            return Err(GenretError::SeqTooLong { len: total, max: self.config.max_seq_len });
        }
        assert!(l.pos_bwd.is_none() || start == 0, "backward positions cannot extend a cache");
        let mut x = x.clone();
        let pf = &self.params[l.pos_fwd];
        for i in 0..n {
            let row = x.row_mut(i);
            for (v, &p) in row.iter_mut().zip(pf.row(start + i)) {
                *v += p;
            }
            if let Some(id) = l.pos_bwd {
                for (v, &p) in row.iter_mut().zip(self.params[id].row(total - 1 - (start + i))) {
                    *v += p;
                }
            }
        }

        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        for (layer, b) in l.blocks.iter().enumerate() {
            let h = layernorm(&x, &p[b.ln1_g], &p[b.ln1_b]);
            let mut qkv = h.matmul(&p[b.qkv_w]);
            add_bias(&mut qkv, &p[b.qkv_b]);
            let (keys, values) = (&mut cache.keys[layer], &mut cache.values[layer]);
            for i in 0..n {
                let row = qkv.row(i);
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }
            let mut att = Mat::zeros(n, d);
            let mut weights = vec![T::zero(); total];
            for i in 0..n {
                let pos = start + i;
                let q = qkv.row(i);
                for hd in 0..heads {
                    let off = hd * dh;
                    let qh = &q[off..off + dh];
                    let mut m = T::neg_infinity();
                    for j in 0..=pos {
                        let k = &keys[j * d + off..j * d + off + dh];
                        let s = qh.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        weights[j] = s;
                        m = m.max(s);
                    }
                    let mut z = T::zero();
                    for w in weights[..=pos].iter_mut() {
                        *w = (*w - m).exp();
                        z += *w;
                    }
                    let out = &mut att.row_mut(i)[off..off + dh];
                    for (j, &w) in weights[..=pos].iter().enumerate() {
                        let w = w / z;
                        for (o, &v) in out.iter_mut().zip(&values[j * d + off..j * d + off + dh]) {
                            *o += w * v;
                        }
                    }
                }
            }
            let mut o = att.matmul(&p[b.out_w]);
            add_bias(&mut o, &p[b.out_b]);
            x.add_assign(&o);

            let h = layernorm(&x, &p[b.ln2_g], &p[b.ln2_b]);
            let mut f = h.matmul(&p[b.fc1_w]);
            add_bias(&mut f, &p[b.fc1_b]);
            gelu(&mut f);
            let mut f = f.matmul(&p[b.fc2_w]);
            add_bias(&mut f, &p[b.fc2_b]);
            x.add_assign(&f);
        }
        cache.len = total;
        if !l.blocks.is_empty() {
            x = layernorm(&x, &p[l.lnf_g], &p[l.lnf_b]);
        }
        Ok(x)
    }

    /// Output head applied to one hidden row.
    pub fn head_row(&self, h: &[T]) -> Vec<T> {
        let mut y = Mat::row_vec(h.to_vec()).matmul(&self.params[self.layout.head_w]);
        add_bias(&mut y, &self.params[self.layout.head_b]);
        y.data
    }
}

impl<T: Scalar> GenRetModel<T> {
    /// Same output as [`GenRetModel::forward_retrieval`] without recording a tape.
    pub fn infer_retrieval(&self, visual: &[Vec<f32>], words: &[u32]) -> Result<Vec<T>, GenretError> {
        let net = &self.net;
        let x = net.embed_plain(visual, words, true)?;
        let h = net.infer(&x, &mut KvCache::new(net.config.n_layers))?;
        let mut y = net.head_row(h.row(h.rows - 1));
        if net.config.normalize_output {
            let norm = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            y.iter_mut().for_each(|v| *v = *v / norm);
        }
        Ok(y)
    }
}

impl<T: Scalar> GenerativeModel<T> {
    /// Greedy decoding: stop at EOS (unless `ignore_eos`) or after `cap`
    /// tokens. Every step runs the whole sequence again.
    pub fn decode(&self, visual: &[Vec<f32>], query: &[u32], cap: usize, ignore_eos: bool) -> Result<DecodeOutput, GenretError> {
        let net = &self.net;
        let mut seq = query.to_vec();
        self.greedy(cap, ignore_eos, |next| {
            if let Some(t) = next {
                seq.push(t);
            }
            let x = net.embed_plain(visual, &seq, false)?;
            let h = net.infer(&x, &mut KvCache::new(net.config.n_layers))?;
            Ok(net.head_row(h.row(h.rows - 1)))
        })
    }

    /// Same tokens as [`GenerativeModel::decode`], but the prompt is encoded
    /// once and each further token costs one single-row pass against a
    /// key/value cache.
    pub fn decode_cached(&self, visual: &[Vec<f32>], query: &[u32], cap: usize, ignore_eos: bool) -> Result<DecodeOutput, GenretError> {
        let net = &self.net;
        let mut cache = KvCache::new(net.config.n_layers);
        self.greedy(cap, ignore_eos, |next| {
            let x = match next {
                None => net.embed_plain(visual, query, false)?,
                Some(t) => net.embed_plain(&[], &[t], false)?,
            };
            let h = net.infer(&x, &mut cache)?;
            Ok(net.head_row(h.row(h.rows - 1)))
        })
    }

    /// `step(None)` gives the logits after the prompt, `step(Some(t))` after
    /// appending token `t`.
    fn greedy<F>(&self, cap: usize, ignore_eos: bool, mut step: F) -> Result<DecodeOutput, GenretError>
    where
        F: FnMut(Option<u32>) -> Result<Vec<T>, GenretError>,
    {
        let mut tokens = Vec::new();
        if cap == 0 {
            return Ok(DecodeOutput { tokens, hit_eos: false });
        }
        let mut row = step(None)?;
        loop {
            // EOS has to beat every word strictly, so flat logits run to the cap.
            let eos = EOS_ID as usize;
            let mut best = if eos == 0 { 1 } else { 0 };
            for (i, v) in row.iter().enumerate() {
                if i != eos && *v > row[best] {
                    best = i;
                }
            }
            if !ignore_eos && row[eos] > row[best] {
                return Ok(DecodeOutput { tokens, hit_eos: true });
            }
            tokens.push(best as u32);
            if tokens.len() == cap {
                return Ok(DecodeOutput { tokens, hit_eos: false });
            }
            row = step(Some(best as u32))?;
        }
    }
}

//! Adam training on instruction samples and flat-vocabulary evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::loss::nce_loss_grad;
use super::model::{GenRetModel, GenerativeModel, WordVocab};
use super::tape::Tape;
use super::tensor::{Mat, Scalar};
use super::GenretError;
use crate::datagen::{Dataset, InstructionSample, Relation};
use crate::index::{retrieve_chain, topk, ChainOptions, ChainResult, HierIndex};
use crate::metrics::{EvalBuilder, EvalResult};
use crate::vocab::EntryKind;

/// One forward pass worth of inputs and its target embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub visual: Vec<Vec<f32>>,
    pub words: Vec<u32>,
    pub target: Vec<f32>,
    pub target_id: u32,
    pub relation: Relation,
    /// Second pass of the chain: the words end with the prefix text and the
    /// target is a postfix.
    pub postfix_pass: bool,
}

/// Examples for `samples`. With `postfix` set, every `current` sample with a
/// postfix target also yields a second-pass example conditioned on the true
/// prefix.
pub fn build_examples(ds: &Dataset, samples: &[InstructionSample], words: &WordVocab, postfix: bool) -> Vec<Example> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let visual = ds.span_clips(s);
        let query = words.tokenize(&s.query_text);
        out.push(Example {
            visual: visual.clone(),
            words: query.clone(),
            target: ds.matrices.vector(&ds.vocab, s.target_id).to_vec(),
            target_id: s.target_id,
            relation: s.relation,
            postfix_pass: false,
        });
        if let (true, Relation::Current, Some(pf)) = (postfix, s.relation, s.target_postfix_id) {
            let mut w = query;
            w.extend(words.tokenize(ds.vocab.text(s.target_id)));
            out.push(Example {
                visual,
                words: w,
                target: ds.matrices.vector(&ds.vocab, pf).to_vec(),
                target_id: pf,
                relation: s.relation,
                postfix_pass: true,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Mat<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [Mat<T>], grads: &[Mat<T>]) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::c(self.lr * c2.sqrt() / c1);
        let eps = T::c(self.eps * c2.sqrt());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                p.data[i] -= step * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Add second-pass postfix examples.
    pub postfix_examples: bool,
    /// Cap on eval samples scored after each epoch; 0 skips evaluation.
    pub eval_limit: usize,
    pub checkpoint: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            postfix_examples: true,
            eval_limit: 2000,
            checkpoint: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_recall_at_1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Mean contrastive loss and parameter gradients for one batch.
pub(crate) fn batch_grads<T: Scalar>(model: &GenRetModel<T>, batch: &[&Example]) -> Result<(f64, Vec<Mat<T>>), GenretError> {
    let params = &model.net.params;
    let mut tapes = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut tape = Tape::new(params);
        let out = model.forward_tape(&mut tape, &ex.visual, &ex.words)?;
        outputs.push(tape.value(out).data.clone());
        tapes.push((tape, out));
    }
    let targets: Vec<&[f32]> = batch.iter().map(|e| e.target.as_slice()).collect();
    let targets_t: Vec<Vec<T>> = targets.iter().map(|t| t.iter().map(|&x| T::c(x as f64)).collect()).collect();
    let (loss, g) = nce_loss_grad(&outputs, &targets_t, model.config().temperature);
    let mut grads = model.net.zero_grads();
    if loss.is_finite() {
        for ((tape, out), gi) in tapes.iter().zip(g) {
            let seed = Mat::row_vec(gi.into_iter().map(T::c).collect());
            tape.backward(*out, seed, &mut grads);
        }
    }
    Ok((loss, grads))
}

/// Mean loss over `batch` without gradients.
pub(crate) fn batch_loss<T: Scalar>(model: &GenRetModel<T>, batch: &[&Example]) -> Result<f64, GenretError> {
    let mut outputs = Vec::with_capacity(batch.len());
    for ex in batch {
        outputs.push(model.forward_retrieval(&ex.visual, &ex.words)?);
    }
    let targets: Vec<Vec<T>> = batch.iter().map(|e| e.target.iter().map(|&x| T::c(x as f64)).collect()).collect();
    Ok(super::loss::nce_loss(&outputs, &targets, model.config().temperature))
}

/// Trains on `ds.train`. Returns the trained model and a per-epoch log; the
/// checkpoint (if configured) is rewritten after every epoch. On a
/// non-finite loss the last good parameters are checkpointed before the
/// error is returned.
pub fn train(
    mut model: GenRetModel<f32>,
    words: &WordVocab,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(GenRetModel<f32>, TrainLog), GenretError> {
    if cfg.batch_size == 0 {
        return Err(GenretError::InvalidConfig("batch_size must be positive".into()));
    }
    if model.config().d_embed != ds.matrices.dim() {
        return Err(GenretError::DimMismatch { expected: ds.matrices.dim(), got: model.config().d_embed });
    }
    let examples = build_examples(ds, &ds.train, words, cfg.postfix_examples);
    if examples.is_empty() {
        return Err(GenretError::Data("no training samples".into()));
    }
    let mut adam = Adam::new(&model.net.params, cfg.lr);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let last_good = model.clone();
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_grads(&model, &batch)?;
            if !loss.is_finite() {
                if let Some(path) = &cfg.checkpoint {
                    save_checkpoint(path, &last_good.net, words)?;
                }
                return Err(GenretError::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut model.net.params, &grads);
            total += loss;
            batches += 1;
        }
        let eval_recall_at_1 = (cfg.eval_limit > 0 && !ds.eval.is_empty()).then(|| {
            let n = cfg.eval_limit.min(ds.eval.len());
            let r = evaluate_genret(&model, words, ds, &ds.eval[..n]);
            r.as_ref().map(|r| r.result.pooled_recall_at_1(&Relation::ALL)).unwrap_or(f64::NAN)
        });
        let entry = EpochLog { epoch, train_loss: total / batches as f64, eval_recall_at_1, seconds: start.elapsed().as_secs_f64() };
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4}  eval R@1 {}  {:.1}s",
                entry.epoch,
                entry.train_loss,
                entry.eval_recall_at_1.map_or("-".to_string(), |r| format!("{r:.3}")),
                entry.seconds
            );
        }
        log.epochs.push(entry);
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, &model.net, words)?;
        }
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenretEval {
    pub result: EvalResult,
    /// Mean seconds per sample for the full chain (prefix and postfix passes).
    pub seconds_per_sample: f64,
}

/// Ranks every sample's retrieval output against the flat matrix of its
/// target kind. Samples with a postfix target also run the second pass on
/// the top prefix for chained exact match.
pub fn evaluate_genret(
    model: &GenRetModel<f32>,
    words: &WordVocab,
    ds: &Dataset,
    samples: &[InstructionSample],
) -> Result<GenretEval, GenretError> {
    let mut b = EvalBuilder::new();
    let start = Instant::now();
    let postfix_m = ds.matrices.get(EntryKind::Postfix);
    for s in samples {
        let visual = ds.span_clips(s);
        let query = words.tokenize(&s.query_text);
        let t = model.query_vector(&visual, &query)?;
        let kind = s.relation.target_kind();
        let ranked: Vec<u32> =
            topk(&t, ds.matrices.get(kind), 5).iter().map(|r| ds.vocab.id_at(kind, r.entry_id as usize)).collect();
        if let (Some(target_pf), Some(&top)) = (s.target_postfix_id, ranked.first()) {
            let mut w = query.clone();
            w.extend(words.tokenize(ds.vocab.text(top)));
            let t2 = model.query_vector(&visual, &w)?;
            let pf = topk(&t2, postfix_m, 1)[0].entry_id as usize;
            b.add_chain((top, ds.vocab.id_at(EntryKind::Postfix, pf)), (s.target_id, target_pf));
        }
        b.add(s.relation, ranked, s.target_id);
    }
    let n = samples.len().max(1) as f64;
    Ok(GenretEval { result: b.finish("genret"), seconds_per_sample: start.elapsed().as_secs_f64() / n })
}

/// Teacher-forced training of the generative baseline to emit each target's
/// text. Plain mean cross-entropy per batch, same optimizer settings.
pub fn train_generative(
    mut model: GenerativeModel<f32>,
    words: &WordVocab,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(GenerativeModel<f32>, TrainLog), GenretError> {
    if cfg.batch_size == 0 {
        return Err(GenretError::InvalidConfig("batch_size must be positive".into()));
    }
    let samples: Vec<(Vec<Vec<f32>>, Vec<u32>, Vec<u32>)> = ds
        .train
        .iter()
        .map(|s| (ds.span_clips(s), words.tokenize(&s.query_text), words.tokenize(ds.vocab.text(s.target_id))))
        .collect();
    let mut adam = Adam::new(&model.net.params, cfg.lr);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let (mut total, mut batches) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.net.zero_grads();
            let mut loss = 0.0;
            let k = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (v, q, t) = &samples[i];
                let mut tape = Tape::new(&model.net.params);
                let out = model.loss_tape(&mut tape, v, q, t)?;
                loss += tape.value(out).data[0] as f64 * k;
                tape.backward(out, Mat::row_vec(vec![k as f32]), &mut grads);
            }
            if !loss.is_finite() {
                return Err(GenretError::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut model.net.params, &grads);
            total += loss;
            batches += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: total / batches.max(1) as f64,
            eval_recall_at_1: None,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Mat::from_vec(1, 2, vec![3.0f64, -2.0])];
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let g = vec![Mat::from_vec(1, 2, p[0].data.iter().map(|x| 2.0 * x).collect())];
            opt.step(&mut p, &g);
        }
        assert!(p[0].norm() < 1e-2, "{:?}", p[0]);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}

/// Full narration for one clip span through the hierarchical index: the
/// first pass routes scene and prefix, a second pass with the prefix words
/// appended to the query picks the postfix.
pub fn retrieve_narration(
    model: &GenRetModel<f32>,
    words: &WordVocab,
    idx: &HierIndex,
    visual: &[Vec<f32>],
    query: &[u32],
    opts: ChainOptions,
) -> Result<ChainResult, GenretError> {
    let t = model.query_vector(visual, query)?;
    retrieve_chain(
        idx,
        &t,
        |_| Ok(t.clone()),
        |_, prefix_text| {
            let mut w = query.to_vec();
            w.extend(words.tokenize(prefix_text));
            model.query_vector(visual, &w)
        },
        opts,
    )
}

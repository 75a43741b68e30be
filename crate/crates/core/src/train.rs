//! Training: query bootstrapping from high-confidence transcripts, target
//! and mask construction, the masked BCE + minimum-length objective, and the
//! Adam loop with an inverse-square-root learning-rate schedule.
//!
//! Transcripts come from an auxiliary recognizer whose word timings are only
//! approximately aligned with the confusion network. Targets therefore mark
//! segments by a 50%-overlap rule, and the loss is masked around every
//! target transition so the network itself settles where the soft boundary
//! lies.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cn::{featurize, GraphemeConfusionNetwork, SegmentFeatures};
use crate::error::{Error, Result};
use crate::nn::{chunk_loss_backward, ArchConfig, ChunkSample, ModelParams};

pub use crate::nn::minlen_loss;

/// One recognized word with its time span and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct WordToken {
    pub doc_id: String,
    pub word: String,
    pub t_begin: f64,
    pub t_end: f64,
    pub confidence: f64,
}

/// Training hyperparameters. Serialized field names are the config-file
/// schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Half-width of the transition mask (0 disables masking).
    pub masking_n: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Chunk length in segments.
    pub chunk_len: usize,
    /// Probability that a batch slot holds an all-negative chunk from a
    /// document lacking the query word.
    pub negative_chunk_prob: f64,
    /// Weight of the minimum-length loss.
    pub minlen_loss_weight: f64,
    /// Pinball quantile for the minimum-length regressor.
    pub pinball_tau: f64,
    /// Words at or below this confidence are not used as training queries.
    pub confidence_threshold: f64,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            masking_n: 1,
            steps: 200_000,
            batch_size: 32,
            peak_lr: 1e-3,
            chunk_len: 200,
            negative_chunk_prob: 0.5,
            minlen_loss_weight: 0.1,
            pinball_tau: 0.1,
            confidence_threshold: 0.95,
            seed: 42,
            arch: ArchConfig::default(),
        }
    }
}

impl HyperParams {
    /// A configuration sized for CPU desk-scale runs.
    pub fn desk_scale() -> Self {
        HyperParams {
            steps: 10_000,
            batch_size: 16,
            peak_lr: 8e-3,
            chunk_len: 64,
            arch: ArchConfig::compact(),
            ..HyperParams::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.chunk_len == 0 {
            return Err(Error::Config("chunk_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_chunk_prob) {
            return Err(Error::Config("negative_chunk_prob must be in [0, 1]".into()));
        }
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::Config("peak_lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule without warm-up: flat at `peak_lr` for the
/// first 1000 steps, then `peak_lr * sqrt(1000 / step)`. Steps are 1-indexed.
pub fn learning_rate(peak_lr: f64, step: usize) -> f64 {
    peak_lr * (1000.0 / step.max(1000) as f64).sqrt()
}

/// Filters tokens to usable training queries: confidence strictly above the
/// threshold, lowercased, at least three graphemes.
pub fn extract_training_queries(tokens: &[WordToken], threshold: f64) -> Vec<WordToken> {
    tokens
        .iter()
        .filter(|t| t.confidence > threshold)
        .map(|t| WordToken { word: t.word.to_lowercase(), ..t.clone() })
        .filter(|t| t.word.chars().count() >= 3)
        .collect()
}

/// Marks each segment whose time extent overlaps `[t_begin, t_end)` by at
/// least half: the target vector for one word occurrence.
pub fn build_target(cnet: &GraphemeConfusionNetwork, span: (f64, f64)) -> Vec<u8> {
    let (t_begin, t_end) = span;
    let dt = cnet.frame_duration_s;
    cnet.alignments
        .iter()
        .map(|al| {
            let ext_begin = (al.b - 1) as f64 * dt;
            let ext_end = (al.e - 1) as f64 * dt;
            let overlap = (ext_end.min(t_end) - ext_begin.max(t_begin)).max(0.0);
            u8::from(2.0 * overlap >= ext_end - ext_begin)
        })
        .collect()
}

/// Mask weights: all ones, except that every `0-1` or `1-0` transition in
/// the target zeroes the `n` positions on each side of the boundary.
pub fn apply_transition_masking(y: &[u8], n: usize) -> Vec<u8> {
    let len = y.len();
    let mut w = vec![1u8; len];
    if n == 0 || len < 2 {
        return w;
    }
    for t in 0..len - 1 {
        if y[t] != y[t + 1] {
            let lo = (t + 1).saturating_sub(n);
            let hi = (t + n).min(len - 1);
            for slot in w.iter_mut().take(hi + 1).skip(lo) {
                *slot = 0;
            }
        }
    }
    w
}

/// Mean binary cross-entropy over unmasked positions with log arguments
/// clamped at 1e-7. `None` signals a fully masked sample to skip.
pub fn masked_bce_loss(r: &[f64], y: &[u8], w: &[u8]) -> Option<f64> {
    assert_eq!(r.len(), y.len());
    assert_eq!(r.len(), w.len());
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for ((&ri, &yi), &wi) in r.iter().zip(y).zip(w) {
        if wi == 0 {
            continue;
        }
        let rc = ri.clamp(crate::nn::BCE_CLAMP, 1.0 - crate::nn::BCE_CLAMP);
        sum += if yi == 1 { -rc.ln() } else { -(1.0 - rc).ln() };
        cnt += 1;
    }
    if cnt == 0 {
        None
    } else {
        Some(sum / cnt as f64)
    }
}

/// One document of the training corpus.
#[derive(Debug, Clone)]
pub struct TrainDoc {
    pub doc_id: String,
    pub cnet: GraphemeConfusionNetwork,
    pub tokens: Vec<WordToken>,
}

/// Running statistics of one training run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainStats {
    pub steps_run: usize,
    pub queries: usize,
    pub dropped_queries: usize,
    pub mean_recent_loss: f64,
    pub positive_segments: u64,
    pub negative_segments: u64,
    pub masked_segments: u64,
    pub skipped_chunks: u64,
}

/// Step-level progress passed to the training callback.
#[derive(Debug, Clone, Copy)]
pub struct TrainProgress {
    pub step: usize,
    pub steps: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub stats: TrainStats,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// SplitMix64 step, used to derive independent per-chunk RNG seeds.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn chunk_seed(seed: u64, step: usize, slot: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(step as u64)) ^ slot as u64)
}

/// A bootstrapped training query: an occurrence of `word` in document
/// `doc` at the transcript's (approximate) time span.
struct Query {
    doc: usize,
    word: String,
    ids: Vec<usize>,
    span: (f64, f64),
}

struct Sampler<'a> {
    docs: &'a [TrainDoc],
    features: Vec<Vec<SegmentFeatures>>,
    doc_words: Vec<BTreeSet<String>>,
    queries: Vec<Query>,
    chunk_len: usize,
    masking_n: usize,
    negative_prob: f64,
}

impl Sampler<'_> {
    /// Builds the chunk for one (step, slot) cell, or `None` when the chosen
    /// document has no segments.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<ChunkSample> {
        let q = &self.queries[rng.gen_range(0..self.queries.len())];
        let negative = self.negative_prob > 0.0 && rng.gen_bool(self.negative_prob);
        if negative {
            let candidates: Vec<usize> = (0..self.docs.len())
                .filter(|&d| !self.doc_words[d].contains(&q.word))
                .collect();
            if !candidates.is_empty() {
                let doc = candidates[rng.gen_range(0..candidates.len())];
                return self.negative_chunk(doc, q, rng);
            }
            // Every document contains the word: fall through to a positive.
        }
        self.positive_chunk(q, rng)
    }

    fn negative_chunk(&self, doc: usize, q: &Query, rng: &mut ChaCha8Rng) -> Option<ChunkSample> {
        let n = self.features[doc].len();
        if n == 0 {
            return None;
        }
        let len = self.chunk_len.min(n);
        let start = rng.gen_range(0..=n - len);
        Some(ChunkSample {
            features: self.features[doc][start..start + len].to_vec(),
            cn_vocab: self.docs[doc].cnet.vocab.clone(),
            query_ids: q.ids.clone(),
            y: vec![0; len],
            w: vec![1; len],
            occurrence_len: 0,
        })
    }

    fn positive_chunk(&self, q: &Query, rng: &mut ChaCha8Rng) -> Option<ChunkSample> {
        let doc = q.doc;
        let n = self.features[doc].len();
        if n == 0 {
            return None;
        }
        let y_full = build_target(&self.docs[doc].cnet, q.span);
        let occ_first = y_full.iter().position(|&v| v == 1);
        let occ_len = y_full.iter().filter(|&&v| v == 1).count();
        let len = self.chunk_len.min(n);
        let start = match occ_first {
            Some(first) => {
                let last = first + occ_len.saturating_sub(1);
                // Place the occurrence uniformly within the window when it fits.
                let lo = last.saturating_sub(len - 1).min(n - len);
                let hi = first.min(n - len);
                if lo <= hi {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            }
            None => rng.gen_range(0..=n - len),
        };
        let y: Vec<u8> = y_full[start..start + len].to_vec();
        let w = apply_transition_masking(&y, self.masking_n);
        let has_positive = y.iter().any(|&v| v == 1);
        // The minimum-length regressor must predict what the peak detector
        // will see. Masking removes the boundary segments from supervision,
        // so detected runs are systematically shorter than the nominal
        // occurrence; train on the unmasked positive count instead.
        let detectable = y.iter().zip(&w).filter(|&(&yi, &wi)| yi == 1 && wi == 1).count();
        Some(ChunkSample {
            features: self.features[doc][start..start + len].to_vec(),
            cn_vocab: self.docs[doc].cnet.vocab.clone(),
            query_ids: q.ids.clone(),
            y,
            w,
            occurrence_len: if has_positive { detectable.max(1) } else { 0 },
        })
    }
}

/// Runs the full training loop and returns the final parameters. Fully
/// reproducible from `hyper.seed`.
pub fn train(docs: &[TrainDoc], hyper: &HyperParams) -> Result<TrainOutcome> {
    train_with_progress(docs, hyper, |_| {})
}

/// [`train`] with a per-step progress callback.
pub fn train_with_progress(
    docs: &[TrainDoc],
    hyper: &HyperParams,
    mut progress: impl FnMut(&TrainProgress),
) -> Result<TrainOutcome> {
    hyper.check()?;
    if docs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }

    // Model vocabulary: the sorted union of the corpus grapheme sets.
    let graphemes: Vec<String> = docs
        .iter()
        .flat_map(|d| d.cnet.vocab.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut params = ModelParams::init(hyper.arch.clone(), graphemes, hyper.seed)?;

    // Bootstrap queries from high-confidence tokens; drop words the model
    // vocabulary cannot spell.
    let mut queries = Vec::new();
    let mut dropped = 0usize;
    for (d, doc) in docs.iter().enumerate() {
        for tok in extract_training_queries(&doc.tokens, hyper.confidence_threshold) {
            match params.term_to_ids(&tok.word) {
                Ok(ids) => {
                    queries.push(Query { doc: d, word: tok.word, ids, span: (tok.t_begin, tok.t_end) })
                }
                Err(_) => dropped += 1,
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::Config(
            "no extractable training queries above the confidence threshold".into(),
        ));
    }

    let doc_words: Vec<BTreeSet<String>> = docs
        .iter()
        .map(|d| d.tokens.iter().map(|t| t.word.to_lowercase()).collect())
        .collect();
    let features: Vec<Vec<SegmentFeatures>> = docs.iter().map(|d| featurize(&d.cnet)).collect();

    let sampler = Sampler {
        docs,
        features,
        doc_words,
        queries,
        chunk_len: hyper.chunk_len,
        masking_n: hyper.masking_n,
        negative_prob: hyper.negative_chunk_prob,
    };

    let mut stats = TrainStats {
        queries: sampler.queries.len(),
        dropped_queries: dropped,
        ..Default::default()
    };
    let mut adam = Adam::new(params.num_params());
    let mut grad = params.zeros_like();
    let mut recent_losses = std::collections::VecDeque::with_capacity(100);

    for step in 1..=hyper.steps {
        let mut samples = Vec::with_capacity(hyper.batch_size);
        for slot in 0..hyper.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(hyper.seed, step, slot));
            if let Some(sample) = sampler.sample(&mut rng) {
                samples.push(sample);
            }
        }
        // The effective batch excludes chunks the mask empties entirely.
        let active: Vec<&ChunkSample> = samples
            .iter()
            .filter(|s| s.w.iter().any(|&w| w == 1) && !s.features.is_empty())
            .collect();
        stats.skipped_chunks += (samples.len() - active.len()) as u64;

        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        if !active.is_empty() {
            let scale = 1.0 / active.len() as f64;
            for sample in &active {
                let s = chunk_loss_backward(
                    &params,
                    sample,
                    hyper.minlen_loss_weight,
                    hyper.pinball_tau,
                    scale,
                    &mut grad,
                )?;
                batch_loss += s.total * scale;
                stats.positive_segments += s.positive_segments as u64;
                stats.negative_segments +=
                    (sample.y.len() - s.positive_segments - s.masked_segments) as u64;
                stats.masked_segments += s.masked_segments as u64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
        }
        let lr = learning_rate(hyper.peak_lr, step);
        adam.step(&mut params.data, &grad, lr);

        if recent_losses.len() == 100 {
            recent_losses.pop_front();
        }
        recent_losses.push_back(batch_loss);
        stats.steps_run = step;
        progress(&TrainProgress { step, steps: hyper.steps, loss: batch_loss, lr });
    }
    stats.mean_recent_loss = if recent_losses.is_empty() {
        0.0
    } else {
        recent_losses.iter().sum::<f64>() / recent_losses.len() as f64
    };

    Ok(TrainOutcome { params, stats })
}

fn tsv_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "transcript TSV", reason: reason.into() }
}

/// Reads a transcript TSV: `doc_id  word  t_begin  t_end  confidence`.
pub fn read_transcripts(path: &Path) -> Result<Vec<WordToken>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(tsv_err(format!(
                "line {}: expected 5 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| tsv_err(format!("line {}: bad {what} {s:?}", i + 1)))
        };
        out.push(WordToken {
            doc_id: fields[0].to_string(),
            word: fields[1].to_string(),
            t_begin: parse(fields[2], "t_begin")?,
            t_end: parse(fields[3], "t_end")?,
            confidence: parse(fields[4], "confidence")?,
        });
    }
    Ok(out)
}

/// Writes tokens in the transcript TSV format.
pub fn write_transcripts(path: &Path, tokens: &[WordToken]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tokens {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", t.doc_id, t.word, t.t_begin, t.t_end, t.confidence)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cn::{CNSegment, SegmentAlignment};

    fn tok(word: &str, conf: f64) -> WordToken {
        WordToken {
            doc_id: "d".into(),
            word: word.into(),
            t_begin: 0.0,
            t_end: 1.0,
            confidence: conf,
        }
    }

    #[test]
    fn query_extraction_filters_on_confidence_and_length() {
        let tokens =
            vec![tok("Alpha", 0.99), tok("beta", 0.80), tok("GAMMA", 0.96), tok("of", 0.99)];
        let q = extract_training_queries(&tokens, 0.95);
        let words: Vec<&str> = q.iter().map(|t| t.word.as_str()).collect();
        assert_eq!(words, ["alpha", "gamma"], "lowercase, short and low-confidence dropped");

        assert!(extract_training_queries(&tokens, 1.0).is_empty());

        // A noiseless corpus (confidence 1.0) keeps every multi-grapheme word.
        let clean = vec![tok("aaa", 1.0), tok("bbbb", 1.0)];
        assert_eq!(extract_training_queries(&clean, 0.95).len(), 2);
    }

    /// A network of `n` one-grapheme segments of `frames` frames each.
    fn uniform_cnet(n: usize, frames: usize) -> GraphemeConfusionNetwork {
        let mut segments = Vec::new();
        let mut alignments = Vec::new();
        let mut b = 1usize;
        for _ in 0..n {
            segments.push(CNSegment { dist: vec![(0, 1.0)] });
            alignments.push(SegmentAlignment { b, e: b + frames });
            b += frames;
        }
        GraphemeConfusionNetwork {
            frame_duration_s: 0.02,
            vocab: vec!["a".into()],
            segments,
            alignments,
        }
    }

    #[test]
    fn build_target_applies_the_half_overlap_rule() {
        let cnet = uniform_cnet(5, 6);
        let dt = 6.0 * 0.02; // 0.12 s per segment
        // Span covering segment 2 fully and 40% of segment 3: 40% is below half.
        let span = (dt, 2.0 * dt + 0.4 * dt);
        assert_eq!(build_target(&cnet, span), vec![0, 1, 0, 0, 0]);
        // Exactly 50% overlap counts as inside.
        let span = (dt, 2.0 * dt + 0.5 * dt);
        assert_eq!(build_target(&cnet, span), vec![0, 1, 1, 0, 0]);
        // A segment strictly inside the span is marked.
        let span = (dt - 0.01, 2.0 * dt + 0.01);
        assert_eq!(build_target(&cnet, span), vec![0, 1, 0, 0, 0]);
    }

    #[test]
    fn empty_network_yields_empty_target() {
        let cnet = uniform_cnet(0, 5);
        assert!(build_target(&cnet, (0.0, 1.0)).is_empty());
    }

    #[test]
    fn transition_masking_matches_the_worked_example() {
        let y = [0, 0, 0, 1, 1, 1, 0, 0];
        assert_eq!(apply_transition_masking(&y, 1), vec![1, 1, 0, 0, 1, 0, 0, 1]);
        assert_eq!(apply_transition_masking(&y, 0), vec![1; 8]);
        assert_eq!(apply_transition_masking(&[0, 0, 0, 0], 3), vec![1; 4]);
    }

    #[test]
    fn masking_clips_at_the_boundaries() {
        // Transition after 1-indexed position 1: mask [1-n+1, 1+n] clipped.
        let y = [1, 0, 0, 0];
        assert_eq!(apply_transition_masking(&y, 2), vec![0, 0, 0, 1]);
        // Transition after position 3: mask [2, 5] clipped to [2, 4].
        let y = [0, 0, 0, 1];
        assert_eq!(apply_transition_masking(&y, 2), vec![1, 0, 0, 0]);
    }

    #[test]
    fn bce_matches_analytic_values() {
        // r == y exactly (clamped): loss near zero.
        let loss = masked_bce_loss(&[1.0, 0.0, 1.0], &[1, 0, 1], &[1, 1, 1]).unwrap();
        assert!(loss <= 1e-6);

        // Uninformed predictions: ln 2.
        let loss = masked_bce_loss(&[0.5; 4], &[0, 1, 0, 1], &[1; 4]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Masked positions do not change the loss at all.
        let a = masked_bce_loss(&[0.9, 0.123, 0.8], &[1, 0, 1], &[1, 0, 1]).unwrap();
        let b = masked_bce_loss(&[0.9, 0.999, 0.8], &[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(a, b);

        assert!(masked_bce_loss(&[0.5], &[1], &[0]).is_none());
    }

    #[test]
    fn learning_rate_is_flat_then_inverse_sqrt() {
        assert_eq!(learning_rate(0.002, 1), 0.002);
        assert_eq!(learning_rate(0.002, 1000), 0.002);
        let lr4k = learning_rate(0.002, 4000);
        assert!((lr4k - 0.001).abs() < 1e-12, "sqrt(1000/4000) halves the rate");
    }

    fn toy_corpus() -> Vec<TrainDoc> {
        // Two documents over {a, b}: one spells "aba", the other "bab",
        // 5 frames per segment.
        let seg = |g: usize| CNSegment { dist: vec![(g, 0.8), (1 - g, 0.2)] };
        let mk = |pattern: &[usize], id: &str, word: &str| {
            let segments: Vec<CNSegment> = pattern.iter().map(|&g| seg(g)).collect();
            let alignments: Vec<SegmentAlignment> = (0..pattern.len())
                .map(|i| SegmentAlignment { b: 1 + 5 * i, e: 6 + 5 * i })
                .collect();
            let end = alignments.last().unwrap().e;
            TrainDoc {
                doc_id: id.into(),
                cnet: GraphemeConfusionNetwork {
                    frame_duration_s: 0.02,
                    vocab: vec!["a".into(), "b".into()],
                    segments,
                    alignments,
                },
                tokens: vec![WordToken {
                    doc_id: id.into(),
                    word: word.into(),
                    t_begin: 0.0,
                    t_end: (end - 1) as f64 * 0.02,
                    confidence: 0.99,
                }],
            }
        };
        vec![mk(&[0, 1, 0], "d1", "aba"), mk(&[1, 0, 1], "d2", "bab")]
    }

    fn tiny_hyper(steps: usize, lr: f64) -> HyperParams {
        HyperParams {
            steps,
            batch_size: 2,
            peak_lr: lr,
            chunk_len: 3,
            arch: ArchConfig {
                proj_width: 6,
                layers: 1,
                cn_embed_dim: 2,
                query_embed_dim: 3,
                minlen_hidden: 2,
            },
            ..HyperParams::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let docs = toy_corpus();
        let hyper = tiny_hyper(1, 0.0);
        let before =
            ModelParams::init(hyper.arch.clone(), vec!["a".into(), "b".into()], hyper.seed)
                .unwrap();
        let out = train(&docs, &hyper).unwrap();
        assert_eq!(out.params.data, before.data);
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let docs = toy_corpus();
        let hyper = tiny_hyper(20, 1e-3);
        let a = train(&docs, &hyper).unwrap();
        let b = train(&docs, &hyper).unwrap();
        assert_eq!(a.params.data, b.params.data);

        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        crate::nn::save_checkpoint(&a.params, dir_a.path()).unwrap();
        crate::nn::save_checkpoint(&b.params, dir_b.path()).unwrap();
        assert_eq!(
            std::fs::read(dir_a.path().join("params.bin")).unwrap(),
            std::fs::read(dir_b.path().join("params.bin")).unwrap()
        );
    }

    #[test]
    fn training_without_queries_is_a_configuration_error() {
        let mut docs = toy_corpus();
        for d in &mut docs {
            for t in &mut d.tokens {
                t.confidence = 0.5;
            }
        }
        assert!(matches!(train(&docs, &tiny_hyper(1, 1e-3)), Err(Error::Config(_))));
    }

    #[test]
    fn transcripts_round_trip_through_tsv() {
        let tokens = vec![
            WordToken {
                doc_id: "doc1".into(),
                word: "hello".into(),
                t_begin: 1.25,
                t_end: 1.75,
                confidence: 0.97,
            },
            WordToken {
                doc_id: "doc2".into(),
                word: "world".into(),
                t_begin: 0.0,
                t_end: 0.5,
                confidence: 1.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        write_transcripts(&path, &tokens).unwrap();
        assert_eq!(read_transcripts(&path).unwrap(), tokens);
    }
}

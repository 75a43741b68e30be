//! Synthetic ground truth: random lexicons, documents laid out frame by
//! frame, word-level transcripts with confidences and bounded alignment
//! jitter, reference occurrences for evaluation terms, and noisy posterior
//! grids emulating a CTC grapheme recognizer.
//!
//! The generator is the oracle for end-to-end tests: every reference span is
//! derived from the same frame layout the grid renderer consumes, so decode,
//! target construction, search and evaluation can be checked against exact
//! ground truth. A held-out fraction of the lexicon never appears in
//! transcripts, emulating out-of-vocabulary query terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ReferenceOccurrence;
use crate::grid::{PosteriorGrid, Vocabulary};
use crate::train::WordToken;

/// Noise knobs of the synthetic recognizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthNoise {
    /// Mean substitution mass diverted from the true grapheme.
    pub substitution_mass: f64,
    /// Peakiness of the fixed random confusion matrix (higher = flatter).
    pub confusion_concentration: f64,
    /// Transcript word boundaries are jittered by up to this many frames.
    pub jitter_frames: usize,
    /// Scale of the exponential confidence deficit (0 = all confidences 1).
    pub confidence_noise: f64,
}

impl Default for SynthNoise {
    fn default() -> Self {
        SynthNoise {
            substitution_mass: 0.15,
            confusion_concentration: 1.0,
            jitter_frames: 2,
            confidence_noise: 0.03,
        }
    }
}

/// Generator configuration. Serialized field names are the config schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of non-blank graphemes (single letters from 'a').
    pub vocab_size: usize,
    pub lexicon_size: usize,
    /// Word lengths, inclusive range.
    pub word_len: (usize, usize),
    pub n_docs: usize,
    pub words_per_doc: usize,
    /// Frames one grapheme occupies, inclusive range.
    pub frames_per_grapheme: (usize, usize),
    /// Blank-dominant frames after each grapheme, inclusive range. At least
    /// one frame is forced between repeated graphemes.
    pub trailing_blank_frames: (usize, usize),
    /// Blank-dominant frames between words, inclusive range.
    pub word_gap_frames: (usize, usize),
    pub noise: SynthNoise,
    /// Fraction of the lexicon never emitted into transcripts.
    pub held_out_fraction: f64,
    /// Number of evaluation terms (all held-out words plus random others).
    pub eval_terms: usize,
    pub frame_duration_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 12,
            lexicon_size: 50,
            word_len: (3, 10),
            n_docs: 240,
            words_per_doc: 50,
            frames_per_grapheme: (2, 6),
            trailing_blank_frames: (0, 3),
            word_gap_frames: (2, 5),
            noise: SynthNoise::default(),
            held_out_fraction: 0.1,
            eval_terms: 20,
            frame_duration_s: 0.02,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.lexicon_size == 0 || self.n_docs == 0 || self.words_per_doc == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.word_len.0 < 1 || self.word_len.0 > self.word_len.1 {
            return Err(Error::Config("bad word_len range".into()));
        }
        if self.frames_per_grapheme.0 < 1
            || self.frames_per_grapheme.0 > self.frames_per_grapheme.1
        {
            return Err(Error::Config("bad frames_per_grapheme range".into()));
        }
        if !(0.0..1.0).contains(&self.noise.substitution_mass) {
            return Err(Error::Config("substitution_mass must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Grapheme symbols, blank first.
    pub fn vocabulary(&self) -> Vocabulary {
        let graphemes: Vec<String> =
            (0..self.vocab_size).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let refs: Vec<&str> = graphemes.iter().map(|s| s.as_str()).collect();
        Vocabulary::with_blank_first(&refs).expect("synthetic vocabulary is valid")
    }
}

/// One grapheme occurrence: id, frame run start (0-based), run length, and
/// the blank-dominant frames that follow it.
#[derive(Debug, Clone, Copy)]
pub struct GraphemeSpan {
    pub grapheme: usize,
    pub start: usize,
    pub len: usize,
    pub blanks_after: usize,
}

/// One word occurrence in a document's frame layout. The reference span ends
/// halfway into the silence that follows the word, so the 50%-overlap target
/// rule marks exactly the word's grapheme segments in the noiseless case.
#[derive(Debug, Clone)]
pub struct WordLayout {
    pub word: usize,
    pub graphemes: Vec<GraphemeSpan>,
    /// First frame of the first grapheme run (0-based).
    pub begin_frame: usize,
    /// End of the last grapheme run (exclusive).
    pub run_end_frame: usize,
    /// Reference span end: run end plus half the following silence.
    pub span_end_frame: usize,
}

/// A generated document: its word sequence and complete frame layout.
#[derive(Debug, Clone)]
pub struct SynthDoc {
    pub index: usize,
    pub doc_id: String,
    pub words: Vec<WordLayout>,
    pub total_frames: usize,
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub lexicon: Vec<String>,
    pub held_out: Vec<bool>,
    pub docs: Vec<SynthDoc>,
    /// Simulated recognizer output: confidences and jittered spans, with
    /// held-out words omitted.
    pub transcripts: Vec<WordToken>,
    /// True spans of every evaluation-term occurrence.
    pub references: Vec<ReferenceOccurrence>,
    pub terms_in_lexicon: Vec<String>,
    pub terms_held_out: Vec<String>,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ item))
}

fn range_sample(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

/// Deterministically generates the corpus: lexicon, documents with exact
/// frame layouts, transcripts (jittered, held-out words omitted), references
/// for the evaluation terms, and the term lists.
pub fn gen_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.check()?;
    let mut rng = sub_rng(config.seed, 1, 0);

    // Unique lexicon words.
    let mut lexicon: Vec<String> = Vec::with_capacity(config.lexicon_size);
    while lexicon.len() < config.lexicon_size {
        let len = range_sample(&mut rng, config.word_len);
        let word: String = (0..len)
            .map(|_| (b'a' + rng.gen_range(0..config.vocab_size) as u8) as char)
            .collect();
        if !lexicon.contains(&word) {
            lexicon.push(word);
        }
    }

    // Held-out subset.
    let n_held_out = ((config.lexicon_size as f64) * config.held_out_fraction).floor() as usize;
    let mut held_out = vec![false; config.lexicon_size];
    {
        let mut indices: Vec<usize> = (0..config.lexicon_size).collect();
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for &i in indices.iter().take(n_held_out) {
            held_out[i] = true;
        }
    }

    // Evaluation terms: every held-out word plus random in-lexicon words.
    let terms_held_out: Vec<String> = (0..config.lexicon_size)
        .filter(|&i| held_out[i])
        .map(|i| lexicon[i].clone())
        .collect();
    let mut terms_in_lexicon: Vec<String> = Vec::new();
    {
        let mut in_lex: Vec<usize> = (0..config.lexicon_size).filter(|&i| !held_out[i]).collect();
        for i in (1..in_lex.len()).rev() {
            let j = rng.gen_range(0..=i);
            in_lex.swap(i, j);
        }
        let want = config.eval_terms.saturating_sub(terms_held_out.len());
        for &i in in_lex.iter().take(want) {
            terms_in_lexicon.push(lexicon[i].clone());
        }
    }

    // Documents, transcripts, references.
    let grapheme_of = |word: &str| -> Vec<usize> {
        word.bytes().map(|b| (b - b'a') as usize).collect()
    };
    let dt = config.frame_duration_s;
    let mut docs = Vec::with_capacity(config.n_docs);
    let mut transcripts = Vec::new();
    let mut references = Vec::new();
    let eval_terms: std::collections::BTreeSet<&String> =
        terms_in_lexicon.iter().chain(&terms_held_out).collect();

    for d in 0..config.n_docs {
        let mut doc_rng = sub_rng(config.seed, 2, d as u64);
        let doc_id = format!("doc{d:04}");
        let mut frame = range_sample(&mut doc_rng, (0, 3)); // leading silence
        let mut words = Vec::with_capacity(config.words_per_doc);
        for w in 0..config.words_per_doc {
            let word_idx = doc_rng.gen_range(0..config.lexicon_size);
            let ids = grapheme_of(&lexicon[word_idx]);
            let begin_frame = frame;
            let mut graphemes = Vec::with_capacity(ids.len());
            for (gi, &g) in ids.iter().enumerate() {
                let len = range_sample(&mut doc_rng, config.frames_per_grapheme);
                let mut blanks = range_sample(&mut doc_rng, config.trailing_blank_frames);
                // CTC needs a blank between repeated graphemes.
                if gi + 1 < ids.len() && ids[gi + 1] == g {
                    blanks = blanks.max(1);
                }
                graphemes.push(GraphemeSpan { grapheme: g, start: frame, len, blanks_after: blanks });
                frame += len + blanks;
            }
            let last = graphemes.last().unwrap();
            let run_end_frame = last.start + last.len;
            let gap = if w + 1 < config.words_per_doc {
                range_sample(&mut doc_rng, config.word_gap_frames)
            } else {
                range_sample(&mut doc_rng, (1, config.word_gap_frames.1))
            };
            frame += gap;
            // Half the silence after the word belongs to its span.
            let blank_region = frame - run_end_frame;
            let span_end_frame = run_end_frame + blank_region.div_ceil(2);
            words.push(WordLayout {
                word: word_idx,
                graphemes,
                begin_frame,
                run_end_frame,
                span_end_frame,
            });
        }
        let total_frames = frame;

        for layout in &words {
            let word = &lexicon[layout.word];
            let t_begin = layout.begin_frame as f64 * dt;
            let t_end = layout.span_end_frame as f64 * dt;
            if eval_terms.contains(word) {
                references.push(ReferenceOccurrence {
                    doc_id: doc_id.clone(),
                    term: word.clone(),
                    t_begin,
                    t_end,
                });
            }
            if held_out[layout.word] {
                continue; // never reaches the bootstrap transcripts
            }
            let j = config.noise.jitter_frames as i64;
            let mut jitter = |frames: usize| -> f64 {
                let delta = if j > 0 { doc_rng.gen_range(-j..=j) } else { 0 };
                ((frames as i64 + delta).max(0)) as f64 * dt
            };
            let mut tb = jitter(layout.begin_frame);
            let mut te = jitter(layout.span_end_frame);
            if te <= tb {
                std::mem::swap(&mut tb, &mut te);
                if te <= tb {
                    te = tb + dt;
                }
            }
            let deficit = if config.noise.confidence_noise > 0.0 {
                -config.noise.confidence_noise * (doc_rng.gen_range(0.0f64..1.0)).max(1e-12).ln()
            } else {
                0.0
            };
            transcripts.push(WordToken {
                doc_id: doc_id.clone(),
                word: word.clone(),
                t_begin: tb,
                t_end: te,
                confidence: (1.0 - deficit).clamp(0.0, 1.0),
            });
        }
        docs.push(SynthDoc { index: d, doc_id, words, total_frames });
    }

    Ok(SynthCorpus {
        lexicon,
        held_out,
        docs,
        transcripts,
        references,
        terms_in_lexicon,
        terms_held_out,
    })
}

/// Fixed row-stochastic confusion weights over the other graphemes, drawn
/// once per seed.
fn confusion_matrix(config: &SynthConfig) -> Vec<Vec<f64>> {
    let n = config.vocab_size;
    let mut rng = sub_rng(config.seed, 3, 0);
    let kappa = config.noise.confusion_concentration.max(1e-3);
    (0..n)
        .map(|g| {
            let mut row: Vec<f64> = (0..n)
                .map(|other| {
                    if other == g {
                        0.0
                    } else {
                        rng.gen_range(0.0f64..1.0).powf(1.0 / kappa).max(1e-9)
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            row
        })
        .collect()
}

fn sample_from_weights(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut u = rng.gen_range(0.0f64..1.0);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Nudges the largest entry so the single-precision row sums to 1 up to a
/// final rounding of that entry.
fn normalize_row_f32(row: &mut [f32]) {
    for _ in 0..2 {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        let diff = 1.0 - sum;
        if diff == 0.0 {
            return;
        }
        let max_idx = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        row[max_idx] = (row[max_idx] as f64 + diff) as f32;
    }
}

/// Renders a document's posterior grid. Grapheme frames put `1 - e` on the
/// true grapheme and divert `e` to a sampled confusable (and a little to the
/// rest); blank-dominant frames keep most mass on the blank. The
/// substitution mass `e` is drawn per grapheme occurrence: usually light,
/// occasionally heavy enough to flip the argmax, so decoded top-1 errors
/// occur at a controlled rate.
pub fn render_grid(doc: &SynthDoc, config: &SynthConfig) -> PosteriorGrid {
    let vocab = config.vocabulary();
    let n_sym = vocab.len();
    let eta = config.noise.substitution_mass;
    let confusion = confusion_matrix(config);
    let mut rng = sub_rng(config.seed, 4, doc.index as u64);

    let mut probs = ndarray::Array2::<f32>::zeros((doc.total_frames, n_sym));
    // Blank-dominant default for every frame; grapheme runs overwrite.
    let blank_noise_max = (2.0 * eta).min(0.4);
    for t in 0..doc.total_frames {
        let e_b = if eta > 0.0 { rng.gen_range(0.0..blank_noise_max) } else { 0.0 };
        let mut row = vec![0.0f64; n_sym];
        row[0] = 1.0 - e_b;
        for g in 0..config.vocab_size {
            row[1 + g] = e_b / config.vocab_size as f64;
        }
        for (j, &v) in row.iter().enumerate() {
            probs[(t, j)] = v as f32;
        }
        let mut row32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        normalize_row_f32(&mut row32);
        for (j, &v) in row32.iter().enumerate() {
            probs[(t, j)] = v;
        }
    }

    for layout in &doc.words {
        for span in &layout.graphemes {
            // Substitution mass for this occurrence: a mixture whose heavy
            // branch can exceed 0.5 and flip the argmax.
            let (e, confusable) = if eta > 0.0 {
                let heavy = rng.gen_bool(eta.min(1.0));
                let light_max = (0.9 * eta / (1.0 - eta)).min(0.45);
                let e = if heavy {
                    rng.gen_range(0.35..0.75)
                } else if light_max > 0.0 {
                    rng.gen_range(0.0..light_max)
                } else {
                    0.0
                };
                (e, sample_from_weights(&mut rng, &confusion[span.grapheme]))
            } else {
                (0.0, 0)
            };
            for t in span.start..span.start + span.len {
                let mut row = vec![0.0f64; n_sym];
                row[1 + span.grapheme] = 1.0 - e;
                if e > 0.0 {
                    row[1 + confusable] += 0.8 * e;
                    // The remainder spreads over the other graphemes.
                    let rest = 0.2 * e;
                    let mut weight_sum = 0.0;
                    for (g, &w) in confusion[span.grapheme].iter().enumerate() {
                        if g != confusable {
                            weight_sum += w;
                        }
                    }
                    if weight_sum > 0.0 {
                        for (g, &w) in confusion[span.grapheme].iter().enumerate() {
                            if g != confusable {
                                row[1 + g] += rest * w / weight_sum;
                            }
                        }
                    } else {
                        row[1 + confusable] += rest;
                    }
                }
                let mut row32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
                normalize_row_f32(&mut row32);
                for (j, &v) in row32.iter().enumerate() {
                    probs[(t, j)] = v;
                }
            }
        }
    }

    PosteriorGrid { vocab, frame_duration_s: config.frame_duration_s, probs }
}

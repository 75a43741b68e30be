//! Shared test support: independently written reference implementations
//! (decode, confusion network, metric sweeps, matching) and the end-to-end
//! synthetic benchmark harness.
//!
//! The reference implementations deliberately use a different formulation
//! than the library (run grouping instead of a frame scan, literal loops
//! instead of matrix algebra) so agreement is meaningful.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use termseek::cn::{build_confusion_network, GraphemeConfusionNetwork, SegmentAlignment};
use termseek::eval::{
    evaluate_mtwv, match_hits, twv, Assignment, ReferenceOccurrence, DEFAULT_BETA_FA,
    DEFAULT_MATCH_TOLERANCE_S,
};
use termseek::grid::{PosteriorGrid, Vocabulary};
use termseek::search::{build_index, search, sort_hits, Hit, DEFAULT_DETECT_THRESHOLD};
use termseek::synth::{gen_corpus, render_grid, SynthConfig};
use termseek::train::{train, HyperParams, TrainDoc};

/// Argmax with ties toward the lowest index, written independently.
fn path_argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Reference 1-best decoder: group the argmax path into runs, drop leading
/// blank runs, and give each non-blank run everything up to the next
/// non-blank run (or `T + 1`).
pub fn brute_force_one_best(grid: &PosteriorGrid) -> (Vec<String>, Vec<SegmentAlignment>) {
    let t_total = grid.num_frames();
    let blank = grid.vocab.blank_index();
    let path: Vec<usize> = (0..t_total)
        .map(|t| path_argmax(grid.probs.row(t).as_slice().unwrap()))
        .collect();

    // Maximal runs of one symbol: (symbol, start frame 1-indexed, len).
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &s) in path.iter().enumerate() {
        match runs.last_mut() {
            Some((sym, _, len)) if *sym == s => *len += 1,
            _ => runs.push((s, i + 1, 1)),
        }
    }
    let non_blank: Vec<(usize, usize, usize)> =
        runs.iter().copied().filter(|&(s, _, _)| s != blank).collect();

    let mut symbols = Vec::new();
    let mut alignments = Vec::new();
    for (i, &(s, start, _)) in non_blank.iter().enumerate() {
        let e = match non_blank.get(i + 1) {
            Some(&(_, next_start, _)) => next_start,
            None => t_total + 1,
        };
        symbols.push(grid.vocab.symbol(s).to_string());
        alignments.push(SegmentAlignment { b: start, e });
    }
    (symbols, alignments)
}

/// Literal evaluation of the segment distributions over the reference
/// alignment: per-grapheme frame sums divided by the total non-blank mass.
pub fn brute_force_confusion_network(
    grid: &PosteriorGrid,
    alignments: &[SegmentAlignment],
) -> Vec<Vec<(String, f64)>> {
    let blank = grid.vocab.blank_index();
    let t_total = grid.num_frames();
    alignments
        .iter()
        .map(|al| {
            let mut sums: Vec<(String, f64)> = grid
                .vocab
                .symbols()
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != blank)
                .map(|(_, s)| (s.clone(), 0.0))
                .collect();
            for t in al.b..al.e.min(t_total + 1) {
                let row = grid.probs.row(t - 1);
                let mut k = 0;
                for (j, &p) in row.iter().enumerate() {
                    if j == blank {
                        continue;
                    }
                    sums[k].1 += p as f64;
                    k += 1;
                }
            }
            let total: f64 = sums.iter().map(|(_, v)| v).sum();
            sums.iter_mut().for_each(|(_, v)| *v /= total);
            sums
        })
        .collect()
}

/// Textbook CTC collapse of the argmax path: merge repeats, drop blanks.
pub fn textbook_ctc_collapse(grid: &PosteriorGrid) -> Vec<String> {
    let blank = grid.vocab.blank_index();
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for t in 0..grid.num_frames() {
        let s = path_argmax(grid.probs.row(t).as_slice().unwrap());
        if prev != Some(s) && s != blank {
            out.push(grid.vocab.symbol(s).to_string());
        }
        prev = Some(s);
    }
    out
}

/// Random valid grid. Half the rows use a coarse 1/16 quantization so argmax
/// ties actually occur and exercise the tie-break rule.
pub fn random_grid(rng: &mut ChaCha8Rng, max_frames: usize, max_vocab: usize) -> PosteriorGrid {
    let v = rng.gen_range(2..=max_vocab.max(2));
    let t = rng.gen_range(0..=max_frames);
    let blank = rng.gen_range(0..v);
    let symbols: Vec<String> = (0..v)
        .map(|i| if i == blank { "<blank>".to_string() } else { format!("g{i}") })
        .collect();
    let vocab = Vocabulary::new(symbols, blank, None).unwrap();

    let mut probs = Array2::<f32>::zeros((t, v));
    for mut row in probs.rows_mut() {
        let coarse = rng.gen_bool(0.5);
        let mut weights: Vec<f64> = (0..v)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..=4) as f64
                } else {
                    rng.gen_range(0.01..1.0)
                }
            })
            .collect();
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            weights[0] = 1.0;
        }
        let sum: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            row[j] = (w / sum) as f32;
        }
        // Repair the largest entry so the row passes validation comfortably.
        let total: f64 = row.iter().map(|&p| p as f64).sum();
        let max_j = (0..v).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        row[max_j] = (row[max_j] as f64 + 1.0 - total) as f32;
    }
    PosteriorGrid { vocab, frame_duration_s: 0.02, probs }
}

/// Best achievable number of matched hits by exhaustive assignment search.
pub fn exhaustive_best_matching(
    hits: &[Hit],
    refs: &[ReferenceOccurrence],
    tolerance: f64,
) -> usize {
    fn feasible(hit: &Hit, r: &ReferenceOccurrence, tolerance: f64) -> bool {
        let mid = 0.5 * (hit.t_begin + hit.t_end);
        hit.term == r.term
            && hit.doc_id == r.doc_id
            && mid >= r.t_begin - tolerance
            && mid <= r.t_end + tolerance
    }
    fn go(
        hits: &[Hit],
        refs: &[ReferenceOccurrence],
        tolerance: f64,
        i: usize,
        taken: &mut Vec<bool>,
    ) -> usize {
        if i == hits.len() {
            return 0;
        }
        // Skip this hit entirely...
        let mut best = go(hits, refs, tolerance, i + 1, taken);
        // ...or match it to any free feasible reference.
        for (j, r) in refs.iter().enumerate() {
            if !taken[j] && feasible(&hits[i], r, tolerance) {
                taken[j] = true;
                best = best.max(1 + go(hits, refs, tolerance, i + 1, taken));
                taken[j] = false;
            }
        }
        best
    }
    let mut taken = vec![false; refs.len()];
    go(hits, refs, tolerance, 0, &mut taken)
}

/// MTWV by dense threshold-grid evaluation (step 1e-4 over [0, 1]).
pub fn dense_grid_mtwv(assignment: &Assignment, beta_fa: f64, t_speech: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut theta = 0.0f64;
    while theta <= 1.0 + 1e-12 {
        let (v, _) = twv(assignment, theta, beta_fa, t_speech).unwrap();
        if v > best {
            best = v;
        }
        theta += 1e-4;
    }
    // The infinite-threshold (all-miss) point.
    let empty = Assignment { hits: Vec::new(), n_true: assignment.n_true.clone() };
    let (all_miss, _) = twv(&empty, 0.0, beta_fa, t_speech).unwrap();
    best.max(all_miss)
}

pub struct BenchArtifacts {
    pub mtwv: f64,
    pub oov_mtwv: f64,
    pub baseline_mtwv: f64,
    pub hits_bytes: Vec<u8>,
    pub report_bytes: Vec<u8>,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

/// The end-to-end synthetic benchmark: default corpus, 200 train / 20 dev /
/// 20 test documents, bootstrap from the train transcripts, train, index the
/// dev split, search all 20 terms, evaluate MTWV against the dev references.
pub fn run_benchmark(masking_n: usize, steps: usize, seed: u64) -> BenchArtifacts {
    let started = std::time::Instant::now();
    let config = SynthConfig { seed, ..SynthConfig::default() };
    let corpus = gen_corpus(&config).expect("corpus generation");
    assert_eq!(corpus.docs.len(), 240, "default corpus is 200 train + 20 dev + 20 test");
    assert!(corpus.terms_held_out.len() >= 5, "at least 5 held-out terms");
    assert_eq!(
        corpus.terms_in_lexicon.len() + corpus.terms_held_out.len(),
        20,
        "20 query terms"
    );

    let cnets: Vec<(String, GraphemeConfusionNetwork)> = corpus
        .docs
        .iter()
        .map(|d| {
            let grid = render_grid(d, &config);
            (d.doc_id.clone(), build_confusion_network(&grid).expect("decode"))
        })
        .collect();

    let train_ids: Vec<&str> = corpus.docs[..200].iter().map(|d| d.doc_id.as_str()).collect();
    let dev_ids: Vec<&str> = corpus.docs[200..220].iter().map(|d| d.doc_id.as_str()).collect();

    let train_docs: Vec<TrainDoc> = cnets
        .iter()
        .filter(|(id, _)| train_ids.contains(&id.as_str()))
        .map(|(id, cnet)| TrainDoc {
            doc_id: id.clone(),
            cnet: cnet.clone(),
            tokens: corpus.transcripts.iter().filter(|t| &t.doc_id == id).cloned().collect(),
        })
        .collect();

    let hyper = HyperParams { steps, masking_n, seed, ..HyperParams::desk_scale() };
    let train_started = std::time::Instant::now();
    let outcome = train(&train_docs, &hyper).expect("training");
    let train_seconds = train_started.elapsed().as_secs_f64();

    let dev_corpus: Vec<(String, GraphemeConfusionNetwork)> =
        cnets.iter().filter(|(id, _)| dev_ids.contains(&id.as_str())).cloned().collect();
    let index = build_index(&outcome.params, &dev_corpus).expect("index");

    let terms: Vec<String> =
        corpus.terms_in_lexicon.iter().chain(&corpus.terms_held_out).cloned().collect();
    let mut hits: Vec<Hit> = Vec::new();
    for term in &terms {
        hits.extend(
            search(&index, &outcome.params, term, DEFAULT_DETECT_THRESHOLD).expect("search"),
        );
    }
    sort_hits(&mut hits);

    let dev_refs: Vec<ReferenceOccurrence> = corpus
        .references
        .iter()
        .filter(|r| dev_ids.contains(&r.doc_id.as_str()))
        .cloned()
        .collect();
    let t_speech: f64 = corpus.docs[200..220]
        .iter()
        .map(|d| d.total_frames as f64 * config.frame_duration_s)
        .sum();

    let assignment = match_hits(&hits, &dev_refs, DEFAULT_MATCH_TOLERANCE_S);
    let report = evaluate_mtwv(&assignment, DEFAULT_BETA_FA, t_speech, DEFAULT_MATCH_TOLERANCE_S)
        .expect("mtwv");
    let mtwv = report.mtwv.unwrap();

    // Held-out (OOV-like) terms only.
    let oov_refs: Vec<ReferenceOccurrence> =
        dev_refs.iter().filter(|r| corpus.terms_held_out.contains(&r.term)).cloned().collect();
    let oov_hits: Vec<Hit> =
        hits.iter().filter(|h| corpus.terms_held_out.contains(&h.term)).cloned().collect();
    let oov_assignment = match_hits(&oov_hits, &oov_refs, DEFAULT_MATCH_TOLERANCE_S);
    let oov_mtwv =
        evaluate_mtwv(&oov_assignment, DEFAULT_BETA_FA, t_speech, DEFAULT_MATCH_TOLERANCE_S)
            .expect("oov mtwv")
            .mtwv
            .unwrap();

    // Random-scoring baseline: uniform per-segment scores through the same
    // peak detector and evaluation.
    let mut baseline_hits: Vec<Hit> = Vec::new();
    for (ti, term) in terms.iter().enumerate() {
        for (di, entry) in index.entries.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (ti as u64).wrapping_mul(0x9E37_79B9) ^ (di as u64).wrapping_mul(0x85EB_CA6B),
            );
            let scores: Vec<f64> =
                (0..entry.r.nrows()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut start: Option<usize> = None;
            let mut acc = 0.0;
            for i in 0..=scores.len() {
                let above = i < scores.len() && scores[i] >= DEFAULT_DETECT_THRESHOLD;
                if above {
                    if start.is_none() {
                        start = Some(i);
                        acc = 0.0;
                    }
                    acc += scores[i];
                } else if let Some(b) = start.take() {
                    let len = i - b;
                    let dt = entry.frame_duration_s;
                    baseline_hits.push(Hit {
                        doc_id: entry.doc_id.clone(),
                        term: term.clone(),
                        t_begin: (entry.alignments[b].b - 1) as f64 * dt,
                        t_end: (entry.alignments[b + len - 1].e - 1) as f64 * dt,
                        score: acc / len as f64,
                    });
                }
            }
        }
    }
    sort_hits(&mut baseline_hits);
    let baseline_assignment = match_hits(&baseline_hits, &dev_refs, DEFAULT_MATCH_TOLERANCE_S);
    let baseline_mtwv =
        evaluate_mtwv(&baseline_assignment, DEFAULT_BETA_FA, t_speech, DEFAULT_MATCH_TOLERANCE_S)
            .expect("baseline mtwv")
            .mtwv
            .unwrap();

    // Byte-level artifacts for the determinism criterion.
    let dir = tempfile::tempdir().expect("tempdir");
    let hits_path = dir.path().join("hits.tsv");
    termseek::search::write_hits(&hits_path, &hits).expect("write hits");
    let hits_bytes = std::fs::read(&hits_path).unwrap();
    let report_bytes = serde_json::to_vec_pretty(&report).unwrap();

    BenchArtifacts {
        mtwv,
        oov_mtwv,
        baseline_mtwv,
        hits_bytes,
        report_bytes,
        train_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
    }
}

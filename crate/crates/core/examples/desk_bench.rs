//! End-to-end desk-scale benchmark: generate a synthetic corpus, bootstrap
//! training queries from its transcripts, train, index the dev split,
//! search every evaluation term, and report MTWV.
//!
//! Usage: desk_bench [steps] [peak_lr] [masking_n] [seed]

use termseek::cn::build_confusion_network;
use termseek::eval::{evaluate_mtwv, match_hits, DEFAULT_BETA_FA, DEFAULT_MATCH_TOLERANCE_S};
use termseek::search::{build_index, search, sort_hits, Hit, DEFAULT_DETECT_THRESHOLD};
use termseek::synth::{gen_corpus, render_grid, SynthConfig};
use termseek::train::{train_with_progress, HyperParams, TrainDoc};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10_000);
    let peak_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8e-3);
    let masking_n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(42);
    let proj_width: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);
    let q_embed: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16);
    let layers: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1);
    let batch: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(16);

    let config = SynthConfig { seed, ..SynthConfig::default() };
    let corpus = gen_corpus(&config).expect("corpus");
    eprintln!(
        "corpus: {} docs, {} transcript tokens, {} references, terms: {} in + {} held out",
        corpus.docs.len(),
        corpus.transcripts.len(),
        corpus.references.len(),
        corpus.terms_in_lexicon.len(),
        corpus.terms_held_out.len()
    );

    let t0 = std::time::Instant::now();
    let cnets: Vec<_> = corpus
        .docs
        .iter()
        .map(|d| {
            let grid = render_grid(d, &config);
            (d.doc_id.clone(), build_confusion_network(&grid).expect("decode"))
        })
        .collect();
    eprintln!("decoded {} docs in {:.1?}", cnets.len(), t0.elapsed());

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

    let mut hyper = HyperParams {
        steps,
        peak_lr,
        masking_n,
        seed,
        ..HyperParams::desk_scale()
    };
    hyper.arch.proj_width = proj_width;
    hyper.arch.query_embed_dim = q_embed;
    hyper.arch.layers = layers;
    hyper.batch_size = batch;
    let t0 = std::time::Instant::now();
    let mut last_print = std::time::Instant::now();
    let outcome = train_with_progress(&train_docs, &hyper, |p| {
        if last_print.elapsed().as_secs() >= 5 || p.step == p.steps {
            eprintln!("step {}/{} loss {:.4} lr {:.2e}", p.step, p.steps, p.loss, p.lr);
            last_print = std::time::Instant::now();
        }
    })
    .expect("train");
    eprintln!(
        "trained {} steps in {:.1?}; queries {} (dropped {}), recent loss {:.4}",
        outcome.stats.steps_run,
        t0.elapsed(),
        outcome.stats.queries,
        outcome.stats.dropped_queries,
        outcome.stats.mean_recent_loss
    );

    let dev_corpus: Vec<_> =
        cnets.iter().filter(|(id, _)| dev_ids.contains(&id.as_str())).cloned().collect();
    let index = build_index(&outcome.params, &dev_corpus).expect("index");

    let terms: Vec<String> = corpus
        .terms_in_lexicon
        .iter()
        .chain(&corpus.terms_held_out)
        .cloned()
        .collect();
    let mut hits: Vec<Hit> = Vec::new();
    for term in &terms {
        hits.extend(search(&index, &outcome.params, term, DEFAULT_DETECT_THRESHOLD).expect("search"));
    }
    sort_hits(&mut hits);

    let dev_refs: Vec<_> = corpus
        .references
        .iter()
        .filter(|r| dev_ids.contains(&r.doc_id.as_str()))
        .cloned()
        .collect();
    let t_speech: f64 = corpus.docs[200..220]
        .iter()
        .map(|d| d.total_frames as f64 * config.frame_duration_s)
        .sum();

    if std::env::var("BENCH_PROBE").is_ok() {
        use termseek::nn::{project_query, score_document};
        // Smoothness probe: perturb one grapheme of a training word and see
        // whether its own occurrences still score high.
        let word = corpus
            .lexicon
            .iter()
            .enumerate()
            .filter(|(i, w)| !corpus.held_out[*i] && w.len() >= 6)
            .map(|(_, w)| w.clone())
            .next()
            .unwrap();
        let mut variants = vec![word.clone()];
        let mut chars: Vec<char> = word.chars().collect();
        let last = chars.len() - 1;
        chars[last] = if chars[last] == 'a' { 'b' } else { 'a' };
        variants.push(chars.iter().collect());
        let mid = chars.len() / 2;
        let mut chars2: Vec<char> = word.chars().collect();
        chars2[mid] = if chars2[mid] == 'a' { 'b' } else { 'a' };
        variants.push(chars2.iter().collect());
        for v in &variants {
            let q = project_query(&outcome.params, v).unwrap();
            let mut best = Vec::new();
            for entry in &index.entries {
                let scores = score_document(&outcome.params, &entry.r, &q);
                for r in dev_refs.iter().filter(|r| r.doc_id == entry.doc_id && r.term == word) {
                    let dt = entry.frame_duration_s;
                    let inside: Vec<f64> = entry
                        .alignments
                        .iter()
                        .zip(&scores)
                        .filter(|(a, _)| {
                            let m = ((a.b + a.e) as f64 / 2.0 - 1.0) * dt;
                            m >= r.t_begin && m < r.t_end
                        })
                        .map(|(_, &s)| s)
                        .collect();
                    best.push(inside.iter().cloned().fold(0.0, f64::max));
                }
            }
            eprintln!(
                "probe {v:?} vs occurrences of {word:?}: max inside scores {:?}",
                best.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }

    if std::env::var("BENCH_DEBUG").is_ok() {
        use termseek::nn::{project_query, score_document};
        let debug_terms: Vec<String> = corpus
            .terms_held_out
            .iter()
            .chain(corpus.terms_in_lexicon.iter().take(2))
            .cloned()
            .collect();
        for term in debug_terms.iter() {
            let q = project_query(&outcome.params, term).unwrap();
            eprintln!("term {term:?}: min_len {:.2} (len {})", q.min_len, term.len());
            for entry in index.entries.iter().take(3) {
                let scores = score_document(&outcome.params, &entry.r, &q);
                let refs_here: Vec<_> = dev_refs
                    .iter()
                    .filter(|r| r.doc_id == entry.doc_id && &r.term == term)
                    .collect();
                for r in refs_here {
                    // segments inside the reference span
                    let dt = entry.frame_duration_s;
                    let inside: Vec<f64> = entry
                        .alignments
                        .iter()
                        .zip(&scores)
                        .filter(|(a, _)| {
                            let mid = ((a.b + a.e) as f64 / 2.0 - 1.0) * dt;
                            mid >= r.t_begin && mid < r.t_end
                        })
                        .map(|(_, &s)| s)
                        .collect();
                    let max_all = scores.iter().cloned().fold(0.0, f64::max);
                    eprintln!(
                        "  ref {:.2}-{:.2}s inside_scores {:?} doc_max {:.3}",
                        r.t_begin,
                        r.t_end,
                        inside.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
                        max_all
                    );
                }
            }
        }
    }

    let assignment = match_hits(&hits, &dev_refs, DEFAULT_MATCH_TOLERANCE_S);
    let report = evaluate_mtwv(&assignment, DEFAULT_BETA_FA, t_speech, DEFAULT_MATCH_TOLERANCE_S)
        .expect("mtwv");
    println!(
        "dev MTWV {:.4} at theta {:?} ({} hits, {} refs, T_speech {:.0} s)",
        report.mtwv.unwrap(),
        report.theta,
        hits.len(),
        dev_refs.len(),
        t_speech
    );
    let n_terms = report.per_term.len() as f64;
    let mean_miss: f64 = report.per_term.values().map(|t| t.p_miss).sum::<f64>() / n_terms;
    let mean_fa: f64 =
        report.per_term.values().map(|t| t.p_fa).sum::<f64>() / n_terms * DEFAULT_BETA_FA;
    println!("decomposition at theta*: mean P_miss {mean_miss:.4}, mean beta*P_FA {mean_fa:.4}");

    // Held-out (OOV-like) terms only.
    let oov_refs: Vec<_> =
        dev_refs.iter().filter(|r| corpus.terms_held_out.contains(&r.term)).cloned().collect();
    let oov_hits: Vec<_> =
        hits.iter().filter(|h| corpus.terms_held_out.contains(&h.term)).cloned().collect();
    if !oov_refs.is_empty() {
        let a = match_hits(&oov_hits, &oov_refs, DEFAULT_MATCH_TOLERANCE_S);
        let r = evaluate_mtwv(&a, DEFAULT_BETA_FA, t_speech, DEFAULT_MATCH_TOLERANCE_S).unwrap();
        println!("held-out terms MTWV {:.4} over {} refs", r.mtwv.unwrap(), oov_refs.len());
    }
}

//! Property tests for the structural invariants: bit-exact file round
//! trips, mass preservation, pooling and masking shapes, and the
//! split/stitch identity.

mod common;

use proptest::prelude::*;

use termseek::cn::{featurize, stitch, window_spans, CNSegment, GraphemeConfusionNetwork,
    SegmentAlignment};
use termseek::grid::{load_grid, merge_separator_into_blank, save_grid, PosteriorGrid, Vocabulary};
use termseek::train::apply_transition_masking;

/// Rows built from integer weights over 1024, so they are exact in f32 and
/// sum to exactly 1.
fn dyadic_grid_strategy(max_frames: usize, vocab: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(
        prop::collection::vec(0u32..64, vocab),
        0..=max_frames,
    )
    .prop_map(move |rows| {
        rows.into_iter()
            .map(|mut weights| {
                if weights.iter().all(|&w| w == 0) {
                    weights[0] = 1;
                }
                let sum: u32 = weights.iter().sum();
                let mut row: Vec<f32> = weights
                    .iter()
                    .map(|&w| (w * 1024 / sum) as f32 / 1024.0)
                    .collect();
                let assigned: f32 = row.iter().sum();
                row[0] += 1.0 - assigned; // exact: all terms are multiples of 2^-10
                row
            })
            .collect()
    })
}

fn grid_from_rows(rows: Vec<Vec<f32>>, separator: bool) -> PosteriorGrid {
    let vocab_len = rows.first().map(|r| r.len()).unwrap_or(4);
    let symbols: Vec<String> = (0..vocab_len)
        .map(|i| match i {
            0 => "<blank>".to_string(),
            1 if separator => "|".to_string(),
            i => format!("g{i}"),
        })
        .collect();
    let vocab = Vocabulary::new(symbols, 0, separator.then_some(1)).unwrap();
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    let probs = ndarray::Array2::from_shape_vec((rows.len(), vocab_len), flat).unwrap();
    PosteriorGrid { vocab, frame_duration_s: 0.02, probs }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_files_round_trip_bit_for_bit(rows in dyadic_grid_strategy(12, 4)) {
        let grid = grid_from_rows(rows, false);
        prop_assert!(grid.validate().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.gpg1");
        save_grid(&grid, &path).unwrap();
        let loaded = load_grid(&path).unwrap();
        let before: Vec<u32> = grid.probs.iter().map(|p| p.to_bits()).collect();
        let after: Vec<u32> = loaded.probs.iter().map(|p| p.to_bits()).collect();
        prop_assert_eq!(before, after);
        prop_assert_eq!(grid.vocab, loaded.vocab);
        prop_assert_eq!(grid.frame_duration_s.to_bits(), loaded.frame_duration_s.to_bits());
    }

    #[test]
    fn separator_merge_preserves_row_sums_exactly(rows in dyadic_grid_strategy(8, 5)) {
        let grid = grid_from_rows(rows, true);
        let merged = merge_separator_into_blank(&grid).unwrap();
        for t in 0..grid.num_frames() {
            let before: f64 = grid.probs.row(t).iter().map(|&p| p as f64).sum();
            let after: f64 = merged.probs.row(t).iter().map(|&p| p as f64).sum();
            prop_assert_eq!(before, after);
        }
        prop_assert_eq!(merged.vocab.len(), grid.vocab.len() - 1);
    }

    #[test]
    fn feature_probabilities_never_increase(
        probs in prop::collection::vec(0.0f64..1.0, 1..6),
        frames in 1usize..10,
    ) {
        let total: f64 = probs.iter().sum::<f64>().max(1e-9);
        let mut dist: Vec<(usize, f64)> =
            probs.iter().enumerate().map(|(i, &p)| (i, p / total)).collect();
        dist.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let cnet = GraphemeConfusionNetwork {
            frame_duration_s: 0.02,
            vocab: (0..probs.len()).map(|i| format!("g{i}")).collect(),
            segments: vec![CNSegment { dist }],
            alignments: vec![SegmentAlignment { b: 1, e: 1 + frames }],
        };
        let feats = featurize(&cnet);
        prop_assert!(feats[0].top[0].1 >= feats[0].top[1].1);
        prop_assert!(feats[0].top[1].1 >= feats[0].top[2].1);
        prop_assert!((feats[0].duration_s - frames as f64 * 0.02).abs() < 1e-12);
    }

    #[test]
    fn masking_zeroes_exactly_the_transition_neighbourhoods(
        y in prop::collection::vec(0u8..2, 1..40),
        n in 0usize..4,
    ) {
        let w = apply_transition_masking(&y, n);
        prop_assert_eq!(w.len(), y.len());
        for (j, &wj) in w.iter().enumerate() {
            // Position j (0-indexed) is masked iff some transition after
            // 1-indexed position i satisfies i - n + 1 <= j + 1 <= i + n.
            let near_transition = (0..y.len().saturating_sub(1)).any(|t| {
                y[t] != y[t + 1] && {
                    let i = t + 1;
                    let pos = j + 1;
                    pos + n >= i + 1 && pos <= i + n
                }
            });
            prop_assert_eq!(wj == 0, near_transition, "position {}", j);
        }
    }

    #[test]
    fn window_spans_cover_and_overlap_correctly(
        total in 0usize..4000,
        window in 2usize..600,
        half_overlap in 0usize..100,
    ) {
        let overlap = (2 * half_overlap).min(window.saturating_sub(2)) & !1;
        let spans = window_spans(total, window, overlap).unwrap();
        if total == 0 {
            prop_assert!(spans.is_empty());
        } else {
            prop_assert_eq!(spans[0].0, 0);
            let last = spans[spans.len() - 1];
            prop_assert_eq!(last.0 + last.1, total);
            for w in spans.windows(2) {
                let (a_start, a_len) = w[0];
                let (b_start, _) = w[1];
                prop_assert_eq!(a_start + a_len - b_start, overlap);
            }
        }
    }

    #[test]
    fn split_then_stitch_is_the_identity(
        rows in dyadic_grid_strategy(300, 3),
        window in 8usize..64,
        half_overlap in 0usize..4,
    ) {
        let overlap = (2 * half_overlap).min(window - 2) & !1;
        let grid = grid_from_rows(rows, false);
        let spans = window_spans(grid.num_frames(), window, overlap).unwrap();
        if !spans.is_empty() {
            let windows: Vec<PosteriorGrid> = spans
                .iter()
                .map(|&(start, len)| PosteriorGrid {
                    vocab: grid.vocab.clone(),
                    frame_duration_s: grid.frame_duration_s,
                    probs: grid.probs.slice(ndarray::s![start..start + len, ..]).to_owned(),
                })
                .collect();
            let stitched = stitch(&windows, &spans).unwrap();
            prop_assert_eq!(stitched.probs, grid.probs);
        }
    }
}

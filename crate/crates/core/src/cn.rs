//! CTC 1-best decoding with frame alignment and grapheme confusion networks.
//!
//! Decoding walks the per-frame argmax path. A segment is a run of one
//! non-blank grapheme followed by the blank frames that separate it from the
//! next run; leading blanks belong to no segment, trailing blanks attach to
//! the last segment. The confusion network redistributes each segment's
//! probability mass over the non-blank vocabulary by summing frame
//! posteriors across the segment's span and normalizing.
//!
//! Long inputs are decoded window by window and stitched: each overlap is
//! split in half, the left window supplying the first half of the frames and
//! the right window the rest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;

/// Default sliding window: 18 s of 0.02 s frames.
pub const DEFAULT_WINDOW_FRAMES: usize = 900;
/// Default window overlap: 3 s of 0.02 s frames, split 1.5 s / 1.5 s.
pub const DEFAULT_OVERLAP_FRAMES: usize = 150;

/// Frame span of one decoded segment: first frame `b` (inclusive) to `e`
/// (exclusive), both 1-indexed. Consecutive segments satisfy `e_i == b_{i+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentAlignment {
    pub b: usize,
    pub e: usize,
}

impl SegmentAlignment {
    pub fn len_frames(&self) -> usize {
        self.e - self.b
    }
}

/// One confusion-network segment: a distribution over the non-blank
/// vocabulary, sorted by descending probability (ties by lowest vocabulary
/// index). Entries are `(index into the network vocabulary, probability)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CNSegment {
    pub dist: Vec<(usize, f64)>,
}

impl CNSegment {
    /// Highest-probability grapheme index.
    pub fn top(&self) -> usize {
        self.dist[0].0
    }
}

/// A frame-aligned grapheme confusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphemeConfusionNetwork {
    pub frame_duration_s: f64,
    /// Blank-free vocabulary the segment distributions index into.
    pub vocab: Vec<String>,
    pub segments: Vec<CNSegment>,
    pub alignments: Vec<SegmentAlignment>,
}

impl GraphemeConfusionNetwork {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Top-1 grapheme string per segment.
    pub fn top_sequence(&self) -> Vec<&str> {
        self.segments.iter().map(|s| self.vocab[s.top()].as_str()).collect()
    }
}

/// Per-segment model features: segment duration plus the three most probable
/// graphemes with their probabilities. Networks over fewer than three
/// graphemes are padded with `(None, 0.0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub duration_s: f64,
    pub top: [(Option<usize>, f64); 3],
}

/// Argmax with ties broken toward the lowest index.
fn row_argmax(row: ndarray::ArrayView1<'_, f32>) -> usize {
    let mut best = 0usize;
    let mut best_p = row[0];
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > best_p {
            best = j;
            best_p = p;
        }
    }
    best
}

/// Decoded grapheme runs: (grid vocabulary index, b, e), 1-indexed frames.
fn one_best_runs(grid: &PosteriorGrid) -> Result<Vec<(usize, usize, usize)>> {
    if grid.vocab.separator_index().is_some() {
        return Err(Error::Mismatch(
            "separator symbol must be merged into blank before decoding".into(),
        ));
    }
    let blank = grid.vocab.blank_index();
    let t_total = grid.num_frames();

    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    // (grapheme, first frame, currently inside the trailing blank run)
    let mut current: Option<(usize, usize, bool)> = None;
    for t in 1..=t_total {
        let a = row_argmax(grid.probs.row(t - 1));
        current = match current {
            None => {
                if a == blank {
                    None
                } else {
                    Some((a, t, false))
                }
            }
            Some((g, b, in_blank)) => {
                if a == blank {
                    Some((g, b, true))
                } else if a == g && !in_blank {
                    Some((g, b, false))
                } else {
                    // A non-blank run after blanks, or a different grapheme:
                    // the previous segment ends where this one begins.
                    runs.push((g, b, t));
                    Some((a, t, false))
                }
            }
        };
    }
    if let Some((g, b, _)) = current {
        runs.push((g, b, t_total + 1));
    }
    Ok(runs)
}

/// CTC 1-best hypothesis and its frame alignment.
///
/// Preconditions: the grid is valid and the separator (if the model had one)
/// has already been merged into the blank. An all-blank or empty grid yields
/// an empty hypothesis.
pub fn ctc_one_best(grid: &PosteriorGrid) -> Result<(Vec<String>, Vec<SegmentAlignment>)> {
    let runs = one_best_runs(grid)?;
    let symbols = runs.iter().map(|&(g, _, _)| grid.vocab.symbol(g).to_string()).collect();
    let alignments = runs.iter().map(|&(_, b, e)| SegmentAlignment { b, e }).collect();
    Ok((symbols, alignments))
}

/// Builds the grapheme confusion network for a grid.
///
/// For each decoded segment, the probability of grapheme `s` is the sum of
/// `p_ts` over the segment's frames divided by the total non-blank mass over
/// the same frames. Accumulation is in 64-bit.
pub fn build_confusion_network(grid: &PosteriorGrid) -> Result<GraphemeConfusionNetwork> {
    let runs = one_best_runs(grid)?;
    let blank = grid.vocab.blank_index();

    let vocab = grid.vocab.non_blank_symbols();
    // grid column -> position in the blank-free vocabulary
    let col_map: Vec<Option<usize>> = (0..grid.vocab.len())
        .map(|j| if j == blank { None } else { Some(if j < blank { j } else { j - 1 }) })
        .collect();

    let mut segments = Vec::with_capacity(runs.len());
    let mut alignments = Vec::with_capacity(runs.len());
    for (i, &(_, b, e)) in runs.iter().enumerate() {
        let mut sums = vec![0.0f64; vocab.len()];
        for t in b..e.min(grid.num_frames() + 1) {
            let row = grid.probs.row(t - 1);
            for (j, &p) in row.iter().enumerate() {
                if let Some(k) = col_map[j] {
                    sums[k] += p as f64;
                }
            }
        }
        let denom: f64 = sums.iter().sum();
        if denom <= 0.0 {
            return Err(Error::DegenerateSegment(i + 1));
        }
        let mut dist: Vec<(usize, f64)> =
            sums.iter().enumerate().map(|(k, &m)| (k, m / denom)).collect();
        // Descending probability, ties toward the lower vocabulary index.
        dist.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        segments.push(CNSegment { dist });
        alignments.push(SegmentAlignment { b, e });
    }

    Ok(GraphemeConfusionNetwork {
        frame_duration_s: grid.frame_duration_s,
        vocab,
        segments,
        alignments,
    })
}

/// Sliding-window spans `(start, length)` covering `total_frames`.
///
/// Starts advance by `window - overlap`; the final span begins at the last
/// regular start needed and is truncated to the tail.
pub fn window_spans(
    total_frames: usize,
    window_frames: usize,
    overlap_frames: usize,
) -> Result<Vec<(usize, usize)>> {
    if window_frames <= overlap_frames {
        return Err(Error::WindowParams(format!(
            "window ({window_frames}) must exceed overlap ({overlap_frames})"
        )));
    }
    if overlap_frames % 2 != 0 {
        return Err(Error::WindowParams(format!(
            "overlap ({overlap_frames}) must be even to split in half"
        )));
    }
    let mut spans = Vec::new();
    if total_frames == 0 {
        return Ok(spans);
    }
    let stride = window_frames - overlap_frames;
    let mut start = 0usize;
    loop {
        let len = window_frames.min(total_frames - start);
        spans.push((start, len));
        if start + window_frames >= total_frames {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

/// Reassembles per-window grids into one grid, splitting each overlap in
/// half: the first half of the overlapping frames comes from the left
/// window, the second half from the right.
pub fn stitch(window_grids: &[PosteriorGrid], spans: &[(usize, usize)]) -> Result<PosteriorGrid> {
    if window_grids.is_empty() || window_grids.len() != spans.len() {
        return Err(Error::Mismatch(format!(
            "{} window grids for {} spans",
            window_grids.len(),
            spans.len()
        )));
    }
    let first = &window_grids[0];
    for (i, g) in window_grids.iter().enumerate() {
        if g.vocab != first.vocab {
            return Err(Error::Mismatch(format!("window {i} has a different vocabulary")));
        }
        if g.frame_duration_s != first.frame_duration_s {
            return Err(Error::Mismatch(format!("window {i} has a different frame duration")));
        }
        if g.num_frames() != spans[i].1 {
            return Err(Error::Mismatch(format!(
                "window {i} has {} frames but its span says {}",
                g.num_frames(),
                spans[i].1
            )));
        }
    }
    if spans[0].0 != 0 {
        return Err(Error::Mismatch("first span must start at frame 0".into()));
    }
    for i in 1..spans.len() {
        let (prev_start, prev_len) = spans[i - 1];
        let (start, _) = spans[i];
        if start <= prev_start || start > prev_start + prev_len {
            return Err(Error::Mismatch(format!("span {i} is out of order or leaves a gap")));
        }
        let overlap = prev_start + prev_len - start;
        if overlap % 2 != 0 {
            return Err(Error::Mismatch(format!("span {i} overlaps by odd {overlap}")));
        }
    }

    let (last_start, last_len) = spans[spans.len() - 1];
    let total = last_start + last_len;
    let n = first.vocab.len();
    let mut probs = ndarray::Array2::<f32>::zeros((total, n));
    for (i, (grid, &(start, len))) in window_grids.iter().zip(spans).enumerate() {
        let left_trim = if i == 0 { 0 } else { (spans[i - 1].0 + spans[i - 1].1 - start) / 2 };
        let right_trim =
            if i + 1 == spans.len() { 0 } else { (start + len - spans[i + 1].0) / 2 };
        for local in left_trim..len - right_trim {
            probs.row_mut(start + local).assign(&grid.probs.row(local));
        }
    }
    Ok(PosteriorGrid { vocab: first.vocab.clone(), frame_duration_s: first.frame_duration_s, probs })
}

/// Extracts one feature record per segment: duration in seconds and the
/// top-3 graphemes by probability (ties toward the lower vocabulary index,
/// already canonical in the segment ordering).
pub fn featurize(cnet: &GraphemeConfusionNetwork) -> Vec<SegmentFeatures> {
    cnet.segments
        .iter()
        .zip(&cnet.alignments)
        .map(|(seg, al)| {
            let mut top = [(None, 0.0f64); 3];
            for (slot, &(g, p)) in top.iter_mut().zip(seg.dist.iter().take(3)) {
                *slot = (Some(g), p);
            }
            SegmentFeatures {
                duration_s: al.len_frames() as f64 * cnet.frame_duration_s,
                top,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct GcnSegmentJson {
    b: usize,
    e: usize,
    dist: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct GcnDocJson {
    frame_duration_s: f64,
    segments: Vec<GcnSegmentJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_id: Option<String>,
}

fn gcn_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "GCN", reason: reason.into() }
}

/// Appends one network as a JSON line.
pub fn write_gcn_line<W: Write>(
    w: &mut W,
    doc_id: &str,
    cnet: &GraphemeConfusionNetwork,
) -> Result<()> {
    let doc = GcnDocJson {
        frame_duration_s: cnet.frame_duration_s,
        segments: cnet
            .segments
            .iter()
            .zip(&cnet.alignments)
            .map(|(seg, al)| GcnSegmentJson {
                b: al.b,
                e: al.e,
                dist: seg.dist.iter().map(|&(g, p)| (cnet.vocab[g].clone(), p)).collect(),
            })
            .collect(),
        doc_id: Some(doc_id.to_string()),
    };
    let line = serde_json::to_string(&doc).map_err(|e| gcn_err(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Writes a corpus of networks as JSON lines, one document per line.
pub fn write_gcn_corpus(
    path: &Path,
    docs: &[(String, GraphemeConfusionNetwork)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (doc_id, cnet) in docs {
        write_gcn_line(&mut w, doc_id, cnet)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_gcn_doc(line: &str, fallback_id: String) -> Result<(String, GraphemeConfusionNetwork)> {
    let doc: GcnDocJson = serde_json::from_str(line).map_err(|e| gcn_err(e.to_string()))?;
    // Vocabulary in order of first appearance keeps loading deterministic.
    let mut vocab: Vec<String> = Vec::new();
    let mut segments = Vec::with_capacity(doc.segments.len());
    let mut alignments = Vec::with_capacity(doc.segments.len());
    let mut prev_e = 0usize;
    for (i, seg) in doc.segments.iter().enumerate() {
        if seg.b >= seg.e || seg.b == 0 {
            return Err(gcn_err(format!("segment {} has bad span [{}, {})", i + 1, seg.b, seg.e)));
        }
        if i > 0 && seg.b < prev_e {
            return Err(gcn_err(format!("segment {} overlaps its predecessor", i + 1)));
        }
        prev_e = seg.e;
        let dist = seg
            .dist
            .iter()
            .map(|(sym, p)| {
                let idx = match vocab.iter().position(|v| v == sym) {
                    Some(idx) => idx,
                    None => {
                        vocab.push(sym.clone());
                        vocab.len() - 1
                    }
                };
                (idx, *p)
            })
            .collect();
        segments.push(CNSegment { dist });
        alignments.push(SegmentAlignment { b: seg.b, e: seg.e });
    }
    Ok((
        doc.doc_id.unwrap_or(fallback_id),
        GraphemeConfusionNetwork {
            frame_duration_s: doc.frame_duration_s,
            vocab,
            segments,
            alignments,
        },
    ))
}

/// Reads a JSON-lines corpus written by [`write_gcn_corpus`]. Documents
/// without an explicit id are named by their line number.
pub fn read_gcn_corpus(path: &Path) -> Result<Vec<(String, GraphemeConfusionNetwork)>> {
    let r = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_gcn_doc(&line, format!("line{:04}", i + 1))?);
    }
    Ok(docs)
}

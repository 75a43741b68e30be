//! Search: precomputed document embeddings, thresholded peak detection over
//! per-segment occurrence probabilities, and time-stamped scored hits.
//!
//! The index holds one embedding matrix per document and is independent of
//! any query, so it is built once and searched many times.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cn::{featurize, GraphemeConfusionNetwork, SegmentAlignment};
use crate::error::{Error, Result};
use crate::nn::{project_document, score_segments, ModelParams, QueryProjection};

pub const DEFAULT_DETECT_THRESHOLD: f64 = 0.5;

/// Precomputed embeddings and alignments of one document.
#[derive(Debug, Clone)]
pub struct DocumentIndexEntry {
    pub doc_id: String,
    /// Per-segment embeddings, `(N, width)`.
    pub r: Array2<f64>,
    pub alignments: Vec<SegmentAlignment>,
    pub frame_duration_s: f64,
}

/// A query-independent search index over a document collection.
#[derive(Debug, Clone, Default)]
pub struct Index {
    pub entries: Vec<DocumentIndexEntry>,
}

/// One detected term occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub term: String,
    pub t_begin: f64,
    pub t_end: f64,
    pub score: f64,
}

/// Projects every document of the corpus. Deterministic; fails on graphemes
/// outside the model vocabulary.
pub fn build_index(
    params: &ModelParams,
    corpus: &[(String, GraphemeConfusionNetwork)],
) -> Result<Index> {
    let mut entries = Vec::with_capacity(corpus.len());
    for (doc_id, cnet) in corpus {
        entries.push(index_document(params, doc_id, cnet)?);
    }
    Ok(Index { entries })
}

/// Projects a single document into an index entry.
pub fn index_document(
    params: &ModelParams,
    doc_id: &str,
    cnet: &GraphemeConfusionNetwork,
) -> Result<DocumentIndexEntry> {
    let features = featurize(cnet);
    let r = project_document(params, &features, &cnet.vocab)?;
    Ok(DocumentIndexEntry {
        doc_id: doc_id.to_string(),
        r,
        alignments: cnet.alignments.clone(),
        frame_duration_s: cnet.frame_duration_s,
    })
}

/// Maximal runs of consecutive scores at or above the threshold:
/// `(start, length, mean score)`.
fn above_threshold_runs(scores: &[f64], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut runs = Vec::new();
    let mut start = None;
    let mut sum = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if s >= threshold {
            if start.is_none() {
                start = Some(i);
                sum = 0.0;
            }
            sum += s;
        } else if let Some(b) = start.take() {
            runs.push((b, i - b, sum / (i - b) as f64));
        }
    }
    if let Some(b) = start {
        let len = scores.len() - b;
        runs.push((b, len, sum / len as f64));
    }
    runs
}

/// Searches one indexed document with an already-projected query.
fn search_entry(
    entry: &DocumentIndexEntry,
    params: &ModelParams,
    term: &str,
    query: &QueryProjection,
    detect_threshold: f64,
) -> Vec<Hit> {
    let scores = score_segments(entry.r.view(), query.q.view(), params.alpha(), params.beta());
    let min_len = (query.min_len.round() as i64).max(1) as usize;
    let dt = entry.frame_duration_s;
    above_threshold_runs(&scores, detect_threshold)
        .into_iter()
        .filter(|&(_, len, _)| len >= min_len)
        .map(|(start, len, mean)| {
            let first = &entry.alignments[start];
            let last = &entry.alignments[start + len - 1];
            Hit {
                doc_id: entry.doc_id.clone(),
                term: term.to_string(),
                t_begin: (first.b - 1) as f64 * dt,
                t_end: (last.e - 1) as f64 * dt,
                score: mean,
            }
        })
        .collect()
}

/// Searches the whole index for one term. Hits are maximal runs of segments
/// scoring at or above `detect_threshold`, kept when at least as long as the
/// query's predicted minimum length, scored by their mean probability, and
/// sorted by descending score.
pub fn search(
    index: &Index,
    params: &ModelParams,
    term: &str,
    detect_threshold: f64,
) -> Result<Vec<Hit>> {
    let query = crate::nn::project_query(params, term)?;
    let mut hits = Vec::new();
    for entry in &index.entries {
        hits.extend(search_entry(entry, params, term, &query, detect_threshold));
    }
    sort_hits(&mut hits);
    Ok(hits)
}

/// Descending score; ties broken by doc id and begin time for stable output.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.doc_id.cmp(&b.doc_id))
            .then_with(|| a.t_begin.partial_cmp(&b.t_begin).unwrap())
            .then_with(|| a.term.cmp(&b.term))
    });
}

fn hits_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "hits TSV", reason: reason.into() }
}

/// Writes hits as TSV: `doc_id  term  t_begin  t_end  score`, sorted by
/// descending score.
pub fn write_hits(path: &Path, hits: &[Hit]) -> Result<()> {
    let mut sorted: Vec<Hit> = hits.to_vec();
    sort_hits(&mut sorted);
    let mut w = BufWriter::new(File::create(path)?);
    for h in &sorted {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", h.doc_id, h.term, h.t_begin, h.t_end, h.score)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a hits TSV.
pub fn read_hits(path: &Path) -> Result<Vec<Hit>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(hits_err(format!(
                "line {}: expected 5 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| hits_err(format!("line {}: bad {what} {s:?}", i + 1)))
        };
        out.push(Hit {
            doc_id: fields[0].to_string(),
            term: fields[1].to_string(),
            t_begin: parse(fields[2], "t_begin")?,
            t_end: parse(fields[3], "t_end")?,
            score: parse(fields[4], "score")?,
        });
    }
    Ok(out)
}

pub const INDEX_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexDocManifest {
    doc_id: String,
    num_segments: usize,
    frame_duration_s: f64,
    alignments: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    schema_version: u32,
    embedding_width: usize,
    docs: Vec<IndexDocManifest>,
}

fn index_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "index", reason: reason.into() }
}

/// Persists the index: `manifest.json` with doc ids and alignments plus
/// `embeddings.bin`, all embedding rows as 32-bit little-endian values in
/// manifest order.
pub fn save_index(index: &Index, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let width = index.entries.first().map(|e| e.r.ncols()).unwrap_or(0);
    let manifest = IndexManifest {
        schema_version: INDEX_SCHEMA_VERSION,
        embedding_width: width,
        docs: index
            .entries
            .iter()
            .map(|e| IndexDocManifest {
                doc_id: e.doc_id.clone(),
                num_segments: e.r.nrows(),
                frame_duration_s: e.frame_duration_s,
                alignments: e.alignments.iter().map(|a| [a.b, a.e]).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| index_err(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut w = BufWriter::new(File::create(dir.join("embeddings.bin"))?);
    for e in &index.entries {
        if e.r.ncols() != width {
            return Err(index_err("inconsistent embedding widths across documents"));
        }
        for &v in e.r.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads an index directory written by [`save_index`].
pub fn load_index(dir: &Path) -> Result<Index> {
    let manifest: IndexManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| index_err(e.to_string()))?;
    if manifest.schema_version != INDEX_SCHEMA_VERSION {
        return Err(index_err(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let mut r = BufReader::new(File::open(dir.join("embeddings.bin"))?);
    let mut entries = Vec::with_capacity(manifest.docs.len());
    for doc in manifest.docs {
        if doc.alignments.len() != doc.num_segments {
            return Err(index_err(format!(
                "doc {}: {} alignments for {} segments",
                doc.doc_id,
                doc.alignments.len(),
                doc.num_segments
            )));
        }
        let count = doc.num_segments * manifest.embedding_width;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| index_err(format!("embedding blob truncated at doc {}", doc.doc_id)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let r_mat = Array2::from_shape_vec((doc.num_segments, manifest.embedding_width), values)
            .expect("length checked");
        entries.push(DocumentIndexEntry {
            doc_id: doc.doc_id,
            r: r_mat,
            alignments: doc.alignments.iter().map(|&[b, e]| SegmentAlignment { b, e }).collect(),
            frame_duration_s: doc.frame_duration_s,
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(index_err("embedding blob has trailing bytes"));
    }
    Ok(Index { entries })
}

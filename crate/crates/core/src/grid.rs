//! Posterior grids: per-frame posterior probabilities over a grapheme
//! vocabulary, their validation, and the GPG1 binary file format.
//!
//! A grid is a `T x |V|` matrix of 32-bit probabilities. Frames are 1-indexed
//! `t = 1..=T` in every API and diagnostic; only the serialized payload is
//! plain 0-based row order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums may deviate from 1 by this much (single-precision softmax slack).
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

const GPG1_MAGIC: &[u8; 4] = b"GPG1";

/// Ordered grapheme symbols plus the distinguished blank (and optional word
/// separator) positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    blank_index: usize,
    separator_index: Option<usize>,
}

impl Vocabulary {
    pub fn new(
        symbols: Vec<String>,
        blank_index: usize,
        separator_index: Option<usize>,
    ) -> Result<Self> {
        let v = Vocabulary { symbols, blank_index, separator_index };
        if let Some(violation) = v.check().into_iter().next() {
            return Err(Error::Grid(violation));
        }
        Ok(v)
    }

    /// Convenience constructor: blank symbol first, then the graphemes.
    pub fn with_blank_first(graphemes: &[&str]) -> Result<Self> {
        let mut symbols = vec!["<blank>".to_string()];
        symbols.extend(graphemes.iter().map(|s| s.to_string()));
        Vocabulary::new(symbols, 0, None)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn separator_index(&self) -> Option<usize> {
        self.separator_index
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Grapheme symbols with the blank (and separator, if any) removed,
    /// in vocabulary order.
    pub fn non_blank_symbols(&self) -> Vec<String> {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.blank_index && Some(*i) != self.separator_index)
            .map(|(_, s)| s.clone())
            .collect()
    }

    fn check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.symbols.len() < 2 {
            out.push(Violation::VocabTooSmall { size: self.symbols.len() });
        }
        for (i, a) in self.symbols.iter().enumerate() {
            if self.symbols[..i].iter().any(|b| b == a) {
                out.push(Violation::DuplicateSymbol { symbol: a.clone() });
            }
        }
        if self.blank_index >= self.symbols.len() {
            out.push(Violation::IndexOutOfRange { which: "blank_index", index: self.blank_index });
        }
        if let Some(sep) = self.separator_index {
            if sep >= self.symbols.len() {
                out.push(Violation::IndexOutOfRange { which: "separator_index", index: sep });
            } else if sep == self.blank_index {
                out.push(Violation::BlankSeparatorCollision { index: sep });
            }
        }
        out
    }
}

/// Per-frame posterior probabilities over a vocabulary.
///
/// `probs` has one row per frame (`T` rows) and one column per vocabulary
/// symbol. Values are immutable by convention once constructed; all
/// operations return new grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub vocab: Vocabulary,
    pub frame_duration_s: f64,
    pub probs: Array2<f32>,
}

impl PosteriorGrid {
    /// Builds a grid and fails on the first invariant violation.
    pub fn new(vocab: Vocabulary, frame_duration_s: f64, probs: Array2<f32>) -> Result<Self> {
        let g = PosteriorGrid { vocab, frame_duration_s, probs };
        match g.validate().into_iter().next() {
            Some(v) => Err(Error::Grid(v)),
            None => Ok(g),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    /// Reports every invariant violation; empty iff the grid is valid.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// A single invariant violation found by [`validate`]. Frames are 1-indexed.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    VocabTooSmall { size: usize },
    DuplicateSymbol { symbol: String },
    IndexOutOfRange { which: &'static str, index: usize },
    BlankSeparatorCollision { index: usize },
    ShapeMismatch { cols: usize, vocab: usize },
    BadFrameDuration { value: f64 },
    NonFiniteEntry { frame: usize, symbol: usize },
    EntryOutOfRange { frame: usize, symbol: usize, value: f32 },
    RowSum { frame: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VocabTooSmall { size } => {
                write!(f, "vocabulary needs blank plus at least one grapheme, got {size} symbols")
            }
            Violation::DuplicateSymbol { symbol } => write!(f, "duplicate symbol {symbol:?}"),
            Violation::IndexOutOfRange { which, index } => {
                write!(f, "{which} {index} is out of range")
            }
            Violation::BlankSeparatorCollision { index } => {
                write!(f, "blank_index and separator_index are both {index}")
            }
            Violation::ShapeMismatch { cols, vocab } => {
                write!(f, "grid has {cols} columns but vocabulary has {vocab} symbols")
            }
            Violation::BadFrameDuration { value } => {
                write!(f, "frame duration must be finite and positive, got {value}")
            }
            Violation::NonFiniteEntry { frame, symbol } => {
                write!(f, "non-finite probability at frame {frame}, symbol {symbol}")
            }
            Violation::EntryOutOfRange { frame, symbol, value } => {
                write!(f, "probability {value} at frame {frame}, symbol {symbol} outside [0,1]")
            }
            Violation::RowSum { frame, sum } => {
                write!(f, "frame {frame} sums to {sum}, expected 1 within {ROW_SUM_TOLERANCE}")
            }
        }
    }
}

/// Checks every grid invariant and reports all violations (does not throw).
pub fn validate(grid: &PosteriorGrid) -> Vec<Violation> {
    let mut out = grid.vocab.check();
    if grid.probs.ncols() != grid.vocab.len() {
        out.push(Violation::ShapeMismatch { cols: grid.probs.ncols(), vocab: grid.vocab.len() });
        return out;
    }
    if !(grid.frame_duration_s.is_finite() && grid.frame_duration_s > 0.0) {
        out.push(Violation::BadFrameDuration { value: grid.frame_duration_s });
    }
    for (row, frame) in grid.probs.rows().into_iter().zip(1usize..) {
        let mut sum = 0.0f64;
        let mut row_ok = true;
        for (s, &p) in row.iter().enumerate() {
            if !p.is_finite() {
                out.push(Violation::NonFiniteEntry { frame, symbol: s });
                row_ok = false;
            } else if !(0.0..=1.0).contains(&p) {
                out.push(Violation::EntryOutOfRange { frame, symbol: s, value: p });
                row_ok = false;
            }
            sum += p as f64;
        }
        if row_ok && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            out.push(Violation::RowSum { frame, sum });
        }
    }
    out
}

/// Adds the word-separator column into the blank column and drops the
/// separator from the vocabulary. All other columns are untouched, so
/// per-row sums are preserved.
pub fn merge_separator_into_blank(grid: &PosteriorGrid) -> Result<PosteriorGrid> {
    let sep = grid.vocab.separator_index().ok_or(Error::MissingSeparator)?;
    let blank = grid.vocab.blank_index();
    let old_n = grid.vocab.len();

    let remap = |j: usize| if j < sep { j } else { j - 1 };
    let symbols: Vec<String> = grid
        .vocab
        .symbols()
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != sep)
        .map(|(_, s)| s.clone())
        .collect();
    let vocab = Vocabulary::new(symbols, remap(blank), None)?;

    let t = grid.num_frames();
    let mut probs = Array2::<f32>::zeros((t, old_n - 1));
    for ti in 0..t {
        for j in 0..old_n {
            if j == sep {
                continue;
            }
            let mut p = grid.probs[(ti, j)];
            if j == blank {
                p += grid.probs[(ti, sep)];
            }
            probs[(ti, remap(j))] = p;
        }
    }
    Ok(PosteriorGrid { vocab, frame_duration_s: grid.frame_duration_s, probs })
}

#[derive(Serialize, Deserialize)]
struct Gpg1Header {
    symbols: Vec<String>,
    blank_index: usize,
    separator_index: Option<usize>,
    frame_duration_s: f64,
    num_frames: usize,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "GPG1", reason: reason.into() }
}

/// Writes a grid in the GPG1 format. The grid is validated first; nothing is
/// written if it is invalid.
pub fn save_grid(grid: &PosteriorGrid, path: &Path) -> Result<()> {
    if let Some(v) = grid.validate().into_iter().next() {
        return Err(Error::Grid(v));
    }
    let header = Gpg1Header {
        symbols: grid.vocab.symbols().to_vec(),
        blank_index: grid.vocab.blank_index(),
        separator_index: grid.vocab.separator_index(),
        frame_duration_s: grid.frame_duration_s,
        num_frames: grid.num_frames(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| format_err(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GPG1_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for &p in grid.probs.iter() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a GPG1 file and validates the result.
pub fn load_grid(path: &Path) -> Result<PosteriorGrid> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err("file shorter than magic"))?;
    if &magic != GPG1_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| format_err("truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| format_err("truncated header"))?;
    let header: Gpg1Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(format!("header decode: {e}")))?;

    let vocab = Vocabulary::new(header.symbols, header.blank_index, header.separator_index)?;
    let n = vocab.len();
    let mut payload = vec![0u8; header.num_frames * n * 4];
    r.read_exact(&mut payload).map_err(|_| format_err("truncated payload"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after payload"));
    }

    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let probs = Array2::from_shape_vec((header.num_frames, n), values)
        .expect("payload length checked above");

    let grid = PosteriorGrid { vocab, frame_duration_s: header.frame_duration_s, probs };
    if let Some(v) = grid.validate().into_iter().next() {
        return Err(Error::Grid(v));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sep_vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["<blank>".into(), "|".into(), "a".into(), "b".into()],
            0,
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn empty_grid_is_valid_and_round_trips() {
        let vocab = Vocabulary::with_blank_first(&["a"]).unwrap();
        let grid =
            PosteriorGrid::new(vocab, 0.02, Array2::zeros((0, 2))).unwrap();
        assert!(grid.validate().is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.gpg1");
        save_grid(&grid, &path).unwrap();
        let loaded = load_grid(&path).unwrap();
        assert_eq!(loaded, grid);
        assert_eq!(loaded.num_frames(), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocabulary::new(
            vec!["<blank>".into(), "a".into(), "b".into()],
            0,
            None,
        )
        .unwrap();
        let probs = array![[0.1f32, 0.6, 0.3], [0.25, 0.25, 0.5]];
        let grid = PosteriorGrid::new(vocab, 0.02, probs).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.gpg1");
        save_grid(&grid, &path).unwrap();
        let loaded = load_grid(&path).unwrap();
        assert_eq!(loaded.frame_duration_s.to_bits(), grid.frame_duration_s.to_bits());
        let a: Vec<u32> = grid.probs.iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = loaded.probs.iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);

        // Saving the loaded grid reproduces the file byte for byte.
        let path2 = dir.path().join("g2.gpg1");
        save_grid(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn nan_entry_rejected_before_writing() {
        let vocab = Vocabulary::with_blank_first(&["a"]).unwrap();
        let probs = array![[f32::NAN, 1.0]];
        let grid = PosteriorGrid { vocab, frame_duration_s: 0.02, probs };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gpg1");
        assert!(matches!(save_grid(&grid, &path), Err(Error::Grid(_))));
        assert!(!path.exists());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.gpg1");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_grid(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn validate_reports_row_sum_with_frame_index() {
        let vocab = Vocabulary::with_blank_first(&["a"]).unwrap();
        let probs = array![[0.5f32, 0.5], [0.4, 0.5]];
        let grid = PosteriorGrid { vocab, frame_duration_s: 0.02, probs };
        let violations = grid.validate();
        assert_eq!(violations.len(), 1);
        assert!(matches!(violations[0], Violation::RowSum { frame: 2, .. }));
    }

    #[test]
    fn validate_reports_range_violation() {
        let vocab = Vocabulary::with_blank_first(&["a"]).unwrap();
        let probs = array![[1.5f32, -0.5]];
        let grid = PosteriorGrid { vocab, frame_duration_s: 0.02, probs };
        let violations = grid.validate();
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::EntryOutOfRange { frame: 1, symbol: 0, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::EntryOutOfRange { frame: 1, symbol: 1, .. })));
    }

    #[test]
    fn valid_grid_has_no_violations() {
        let vocab = sep_vocab();
        let probs = array![[0.3f32, 0.2, 0.5, 0.0], [0.25, 0.25, 0.25, 0.25]];
        let grid = PosteriorGrid::new(vocab, 0.02, probs).unwrap();
        assert!(grid.validate().is_empty());
    }

    #[test]
    fn merge_adds_separator_mass_to_blank() {
        let vocab = sep_vocab();
        let probs = array![[0.3f32, 0.2, 0.5, 0.0]];
        let grid = PosteriorGrid::new(vocab, 0.02, probs).unwrap();
        let merged = merge_separator_into_blank(&grid).unwrap();
        assert_eq!(merged.vocab.symbols(), &["<blank>", "a", "b"]);
        assert_eq!(merged.vocab.blank_index(), 0);
        assert_eq!(merged.vocab.separator_index(), None);
        assert_eq!(merged.probs, array![[0.5f32, 0.5, 0.0]]);
    }

    #[test]
    fn merge_with_zero_separator_mass_keeps_blank() {
        let vocab = sep_vocab();
        let probs = array![[0.4f32, 0.0, 0.6, 0.0]];
        let grid = PosteriorGrid::new(vocab, 0.02, probs).unwrap();
        let merged = merge_separator_into_blank(&grid).unwrap();
        assert_eq!(merged.probs[(0, 0)], 0.4);
    }

    #[test]
    fn second_merge_errors_because_separator_is_gone() {
        let vocab = sep_vocab();
        let probs = array![[0.25f32, 0.25, 0.25, 0.25]];
        let grid = PosteriorGrid::new(vocab, 0.02, probs).unwrap();
        let merged = merge_separator_into_blank(&grid).unwrap();
        assert!(matches!(
            merge_separator_into_blank(&merged),
            Err(Error::MissingSeparator)
        ));
    }

    #[test]
    fn merge_preserves_row_sums_exactly_on_dyadic_grids() {
        // Entries are multiples of 2^-10, so every addition is exact in f32
        // and the preservation check is bit-level, not approximate.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vocab = Vocabulary::new(
            vec!["<blank>".into(), "|".into(), "a".into(), "b".into(), "c".into()],
            0,
            Some(1),
        )
        .unwrap();
        for _ in 0..100 {
            let mut probs = Array2::<f32>::zeros((5, 5));
            for mut row in probs.rows_mut() {
                let mut parts = [0u32; 5];
                let mut left = 1024u32;
                for p in parts.iter_mut().take(4) {
                    let take = rng.gen_range(0..=left);
                    *p = take;
                    left -= take;
                }
                parts[4] = left;
                for (j, &p) in parts.iter().enumerate() {
                    row[j] = p as f32 / 1024.0;
                }
            }
            let grid = PosteriorGrid::new(vocab.clone(), 0.02, probs).unwrap();
            let merged = merge_separator_into_blank(&grid).unwrap();
            for t in 0..5 {
                let before: f64 = grid.probs.row(t).iter().map(|&p| p as f64).sum();
                let after: f64 = merged.probs.row(t).iter().map(|&p| p as f64).sum();
                assert_eq!(before, after, "row {t} sum changed");
            }
        }
    }
}

//! Compressed row-major storage for binary cell-by-feature matrices and the
//! Matrix Market "coordinate pattern" interchange format.
//!
//! Cells are rows. Entries are implicitly one, column indices are strictly
//! increasing within each row and rows are addressed through `row_offsets`
//! (length `n_rows + 1`, starting at zero and ending at `nnz`). Column access
//! goes through [`SparseBinaryMatrix::transpose`], materialized once.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBinaryMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
}

impl SparseBinaryMatrix {
    /// Builds a matrix from raw CSR arrays, checking every invariant.
    pub fn from_csr(n_rows: usize, n_cols: usize, row_offsets: Vec<usize>, col_indices: Vec<u32>) -> Result<Self> {
        if n_cols > u32::MAX as usize {
            return Err(Error::InvalidMatrix(format!("{n_cols} columns exceed u32 range")));
        }
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::InvalidMatrix(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 || row_offsets[n_rows] != col_indices.len() {
            return Err(Error::InvalidMatrix(
                "row_offsets must start at 0 and end at nnz".into(),
            ));
        }
        for (r, w) in row_offsets.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(Error::InvalidMatrix(format!("row_offsets decrease at row {r}")));
            }
            let row = &col_indices[w[0]..w[1]];
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::InvalidMatrix(format!(
                    "row {r}: column indices not strictly increasing"
                )));
            }
            if let Some(&last) = row.last() {
                if last as usize >= n_cols {
                    return Err(Error::InvalidMatrix(format!(
                        "row {r}: column {last} out of range for {n_cols} columns"
                    )));
                }
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    /// Builds a matrix from per-row column lists. Rows are sorted; repeated
    /// columns within a row are an error.
    pub fn from_rows<I>(n_cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[u32]>,
    {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        for row in rows {
            let start = col_indices.len();
            col_indices.extend_from_slice(row.as_ref());
            col_indices[start..].sort_unstable();
            row_offsets.push(col_indices.len());
        }
        let n_rows = row_offsets.len() - 1;
        Self::from_csr(n_rows, n_cols, row_offsets, col_indices)
    }

    /// Thresholds a dense matrix at `> 0.5`.
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let rows = (0..dense.nrows()).map(|i| {
            (0..dense.ncols())
                .filter(|&j| dense[(i, j)] > 0.5)
                .map(|j| j as u32)
                .collect::<Vec<_>>()
        });
        Self::from_rows(dense.ncols(), rows).expect("dense rows are canonical")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.row_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn density(&self) -> f64 {
        if self.n_rows == 0 || self.n_cols == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.n_rows as f64 * self.n_cols as f64)
    }

    pub fn contains(&self, i: usize, j: u32) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    /// Feature-major copy: row `j` of the result lists the cells where feature
    /// `j` is accessible.
    pub fn transpose(&self) -> SparseBinaryMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0u32; self.nnz()];
        for (i, row) in self.rows().enumerate() {
            for &c in row {
                col_indices[next[c as usize]] = i as u32;
                next[c as usize] += 1;
            }
        }
        SparseBinaryMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
        }
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SparseBinaryMatrix {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for &r in rows {
            col_indices.extend_from_slice(self.row(r));
            row_offsets.push(col_indices.len());
        }
        SparseBinaryMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
        }
    }

    /// Keeps the columns listed in `selected` (strictly increasing), renumbered
    /// `0..selected.len()` in that order.
    pub fn select_columns(&self, selected: &[usize]) -> Result<SparseBinaryMatrix> {
        if selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidMatrix(
                "selected columns must be strictly increasing".into(),
            ));
        }
        if selected.last().is_some_and(|&j| j >= self.n_cols) {
            return Err(Error::InvalidMatrix("selected column out of range".into()));
        }
        let mut remap = vec![u32::MAX; self.n_cols];
        for (new, &old) in selected.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in self.rows() {
            col_indices.extend(row.iter().map(|&c| remap[c as usize]).filter(|&c| c != u32::MAX));
            row_offsets.push(col_indices.len());
        }
        Ok(SparseBinaryMatrix {
            n_rows: self.n_rows,
            n_cols: selected.len(),
            row_offsets,
            col_indices,
        })
    }

    /// Stacks matrices that share a column count.
    pub fn vstack(parts: &[&SparseBinaryMatrix]) -> Result<SparseBinaryMatrix> {
        let n_cols = parts.first().map_or(0, |m| m.n_cols);
        if parts.iter().any(|m| m.n_cols != n_cols) {
            return Err(Error::InvalidMatrix("vstack: column counts differ".into()));
        }
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        for m in parts {
            for row in m.rows() {
                col_indices.extend_from_slice(row);
                row_offsets.push(col_indices.len());
            }
        }
        Ok(SparseBinaryMatrix {
            n_rows: row_offsets.len() - 1,
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, row) in self.rows().enumerate() {
            for &c in row {
                out[(i, c as usize)] = 1.0;
            }
        }
        out
    }

    /// Writes row `i` into `out` (length `n_cols`) as 0/1 values, optionally
    /// multiplying each present column by `scale[col]`.
    pub fn densify_row_into(&self, i: usize, scale: Option<&[f64]>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &c in self.row(i) {
            out[c as usize] = scale.map_or(1.0, |s| s[c as usize]);
        }
    }
}

/// Matrix Market parse failures. Every variant carries the 1-based line
/// number where the problem was found.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MtxError {
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },

    #[error("line {line}: malformed entry: {reason}")]
    MalformedEntry { line: usize, reason: String },

    #[error("line {line}: entry ({row}, {col}) outside declared {n_rows}x{n_cols} matrix")]
    OutOfRange {
        line: usize,
        row: u64,
        col: u64,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("line {line}: duplicate entry ({row}, {col})")]
    Duplicate { line: usize, row: u64, col: u64 },

    #[error("line {line}: expected {declared} entries, found {found}")]
    EntryCount { line: usize, declared: usize, found: usize },
}

const MTX_BANNER: &str = "%%MatrixMarket matrix coordinate pattern general";

// Guards against headers that would make us allocate absurd row tables.
const MAX_DIM: u64 = 1 << 32;

/// Parses a Matrix Market `coordinate pattern general` stream.
pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<SparseBinaryMatrix> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (line_no, banner) = match lines.next() {
        Some((n, l)) => (n, l.map_err(|e| Error::io("<matrix market>", e))?),
        None => {
            return Err(MtxError::MalformedHeader {
                line: 1,
                reason: "empty input".into(),
            }
            .into())
        }
    };
    let tokens: Vec<String> = banner.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    let expected = ["%%matrixmarket", "matrix", "coordinate", "pattern", "general"];
    if tokens.len() != expected.len() || tokens.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(MtxError::MalformedHeader {
            line: line_no,
            reason: format!("expected `{MTX_BANNER}`"),
        }
        .into());
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut last_line = line_no;
    let mut coords: Vec<(u32, u32, usize)> = Vec::new();

    for (line_no, line) in lines {
        let line = line.map_err(|e| Error::io("<matrix market>", e))?;
        last_line = line_no;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(MtxError::MalformedHeader {
                        line: line_no,
                        reason: "size line must be `rows cols nnz`".into(),
                    }
                    .into());
                }
                let parse = |s: &str| {
                    s.parse::<u64>().map_err(|_| MtxError::MalformedHeader {
                        line: line_no,
                        reason: format!("`{s}` is not a nonnegative integer"),
                    })
                };
                let (r, c, nnz) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
                if r > MAX_DIM || c > u32::MAX as u64 || nnz > r.saturating_mul(c) {
                    return Err(MtxError::MalformedHeader {
                        line: line_no,
                        reason: format!("implausible size {r} x {c} with {nnz} entries"),
                    }
                    .into());
                }
                size = Some((r as usize, c as usize, nnz as usize));
                coords.reserve((nnz as usize).min(1 << 24));
            }
            Some((n_rows, n_cols, _)) => {
                if fields.len() != 2 {
                    return Err(MtxError::MalformedEntry {
                        line: line_no,
                        reason: format!("expected 2 fields, found {}", fields.len()),
                    }
                    .into());
                }
                let parse = |s: &str| {
                    s.parse::<u64>().map_err(|_| MtxError::MalformedEntry {
                        line: line_no,
                        reason: format!("`{s}` is not a positive integer"),
                    })
                };
                let (row, col) = (parse(fields[0])?, parse(fields[1])?);
                if row == 0 || col == 0 || row > n_rows as u64 || col > n_cols as u64 {
                    return Err(MtxError::OutOfRange {
                        line: line_no,
                        row,
                        col,
                        n_rows,
                        n_cols,
                    }
                    .into());
                }
                coords.push(((row - 1) as u32, (col - 1) as u32, line_no));
            }
        }
    }

    let Some((n_rows, n_cols, declared)) = size else {
        return Err(MtxError::MalformedHeader {
            line: last_line + 1,
            reason: "missing size line".into(),
        }
        .into());
    };
    if coords.len() != declared {
        return Err(MtxError::EntryCount {
            line: last_line,
            declared,
            found: coords.len(),
        }
        .into());
    }

    // Stable sort keeps the first occurrence ahead of its duplicate so the
    // reported line is the repeated one.
    coords.sort_by_key(|&(r, c, _)| (r, c));
    if let Some(w) = coords.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
        let (r, c, _) = w[0];
        let line = w[0].2.max(w[1].2);
        return Err(MtxError::Duplicate {
            line,
            row: u64::from(r) + 1,
            col: u64::from(c) + 1,
        }
        .into());
    }

    let mut row_offsets = vec![0usize; n_rows + 1];
    for &(r, _, _) in &coords {
        row_offsets[r as usize + 1] += 1;
    }
    for i in 0..n_rows {
        row_offsets[i + 1] += row_offsets[i];
    }
    let col_indices = coords.into_iter().map(|(_, c, _)| c).collect();
    SparseBinaryMatrix::from_csr(n_rows, n_cols, row_offsets, col_indices)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<SparseBinaryMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_market(BufReader::new(file))
}

/// Writes the canonical form: banner, size line, then entries in row-major
/// order, 1-indexed.
pub fn write_matrix_market<W: Write>(m: &SparseBinaryMatrix, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MTX_BANNER}")?;
    writeln!(w, "{} {} {}", m.n_rows, m.n_cols, m.nnz())?;
    for (i, row) in m.rows().enumerate() {
        for &c in row {
            writeln!(w, "{} {}", i + 1, c + 1)?;
        }
    }
    w.flush()
}

pub fn save_matrix(m: &SparseBinaryMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix_market(m, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<SparseBinaryMatrix> {
        read_matrix_market(s.as_bytes())
    }

    fn mtx_err(s: &str) -> MtxError {
        match parse(s) {
            Err(Error::Mtx(e)) => e,
            other => panic!("expected mtx error, got {other:?}"),
        }
    }

    #[test]
    fn loads_small_pattern_file() {
        let m = parse("%%MatrixMarket matrix coordinate pattern general\n% comment\n3 4 3\n1 1\n2 3\n3 4\n").unwrap();
        assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (3, 4, 3));
        assert_eq!(m.row_sums(), vec![1, 1, 1]);
        assert_eq!(m.row(1), &[2]);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n3 4 1\n4 1\n");
        assert!(
            matches!(
                e,
                MtxError::OutOfRange {
                    line: 3,
                    row: 4,
                    col: 1,
                    ..
                }
            ),
            "{e:?}"
        );
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n3 4 1\n0 1\n");
        assert!(matches!(e, MtxError::OutOfRange { .. }));
    }

    #[test]
    fn duplicate_entry_rejected_with_line() {
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n3 4 3\n1 1\n2 2\n1 1\n");
        assert_eq!(
            e,
            MtxError::Duplicate {
                line: 5,
                row: 1,
                col: 1
            }
        );
    }

    #[test]
    fn malformed_header_rejected() {
        let e = mtx_err("%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 2.0\n");
        assert!(matches!(e, MtxError::MalformedHeader { line: 1, .. }));
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n3 x 1\n");
        assert!(matches!(e, MtxError::MalformedHeader { line: 2, .. }));
        let e = mtx_err("");
        assert!(matches!(e, MtxError::MalformedHeader { line: 1, .. }));
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n% only comments\n");
        assert!(matches!(e, MtxError::MalformedHeader { .. }));
    }

    #[test]
    fn malformed_entry_and_count() {
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n2 2 1\n1\n");
        assert!(matches!(e, MtxError::MalformedEntry { line: 3, .. }));
        let e = mtx_err("%%MatrixMarket matrix coordinate pattern general\n2 2 2\n1 1\n");
        assert!(matches!(
            e,
            MtxError::EntryCount {
                declared: 2,
                found: 1,
                ..
            }
        ));
    }

    #[test]
    fn transpose_and_column_selection() {
        let m = SparseBinaryMatrix::from_rows(4, [vec![0, 2], vec![1, 2, 3], vec![]]).unwrap();
        let t = m.transpose();
        assert_eq!(t.n_rows(), 4);
        assert_eq!(t.row(2), &[0, 1]);
        assert_eq!(t.transpose(), m);
        let s = m.select_columns(&[2, 3]).unwrap();
        assert_eq!(s.row(0), &[0]);
        assert_eq!(s.row(1), &[0, 1]);
        assert!(m.select_columns(&[3, 2]).is_err());
    }

    #[test]
    fn from_rows_rejects_duplicates() {
        assert!(SparseBinaryMatrix::from_rows(3, [vec![1, 1]]).is_err());
        assert!(SparseBinaryMatrix::from_rows(3, [vec![3]]).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = SparseBinaryMatrix> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            proptest::collection::vec(proptest::collection::btree_set(0..c as u32, 0..=c), r).prop_map(move |rows| {
                SparseBinaryMatrix::from_rows(c, rows.into_iter().map(|s| s.into_iter().collect::<Vec<_>>())).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn write_then_read_roundtrips(m in arb_matrix()) {
            let mut buf = Vec::new();
            write_matrix_market(&m, &mut buf).unwrap();
            let back = read_matrix_market(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &m);
        }

        #[test]
        fn entry_order_does_not_matter(m in arb_matrix(), rot in 0usize..50) {
            let mut entries: Vec<String> = m.rows().enumerate()
                .flat_map(|(i, r)| r.iter().map(move |c| format!("{} {}", i + 1, c + 1)))
                .collect();
            if !entries.is_empty() {
                let k = rot % entries.len();
                entries.rotate_left(k);
                entries.reverse();
            }
            let text = format!("{MTX_BANNER}\n{} {} {}\n{}\n", m.n_rows(), m.n_cols(), m.nnz(), entries.join("\n"));
            prop_assert_eq!(read_matrix_market(text.as_bytes()).unwrap(), m);
        }
    }
}

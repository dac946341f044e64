use crate::error::{NnError, Result};

/// Boolean `n×m` matrix; `true` marks an attendable key for a query row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query row must allow at least one key.
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(NnError::Shape(format!(
                "mask data {} does not match {rows}x{cols}",
                allowed.len()
            )));
        }
        let mask = AttentionMask {
            rows,
            cols,
            allowed,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self::new(rows, cols, allowed)
    }

    /// Lower-triangular mask for autoregressive self-attention.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i).expect("diagonal is always allowed")
    }

    /// Block-causal streaming mask over absolute frame positions. A query at
    /// position `q` sees key `k` iff `chunk(k) <= chunk(q)` and, when
    /// `left_chunks` is set, `chunk(k) >= chunk(q) - left_chunks`.
    /// `chunk = None` means unrestricted attention.
    pub fn chunked(
        query_pos: &[usize],
        key_pos: &[usize],
        chunk: Option<usize>,
        left_chunks: Option<usize>,
    ) -> Result<Self> {
        match chunk {
            None => Self::from_fn(query_pos.len(), key_pos.len(), |_, _| true),
            Some(c) => {
                assert!(c > 0, "chunk size must be positive");
                Self::from_fn(query_pos.len(), key_pos.len(), |i, j| {
                    let qc = query_pos[i] / c;
                    let kc = key_pos[j] / c;
                    kc <= qc && left_chunks.is_none_or(|l| kc + l >= qc)
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !self.row(r).iter().any(|&b| b) {
                return Err(NnError::EmptyMaskRow(r));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

//! Span enumeration and per-span storage.

use crate::error::{contract, Result};

/// All `(i, j)` with `i <= j < len` and `j - i + 1 <= max_len`, ordered by
/// start then end.
pub fn enumerate_spans(len: usize, max_len: Option<usize>) -> Vec<(usize, usize)> {
    let cap = max_len.unwrap_or(len).max(1);
    let mut out = Vec::new();
    for i in 0..len {
        for j in i..len.min(i + cap) {
            out.push((i, j));
        }
    }
    out
}

/// Upper-triangular container of one value per enumerated span.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanGrid<T> {
    len: usize,
    cap: usize,
    offsets: Vec<usize>,
    values: Vec<T>,
}

impl<T> SpanGrid<T> {
    /// `values` must follow [`enumerate_spans`] order.
    pub fn new(len: usize, max_len: Option<usize>, values: Vec<T>) -> Result<Self> {
        let cap = max_len.unwrap_or(len).max(1);
        let mut offsets = Vec::with_capacity(len + 1);
        let mut acc = 0;
        for i in 0..len {
            offsets.push(acc);
            acc += cap.min(len - i);
        }
        offsets.push(acc);
        if values.len() != acc {
            return contract(format!(
                "span grid for length {len} needs {acc} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            len,
            cap,
            offsets,
            values,
        })
    }

    pub fn sentence_len(&self) -> usize {
        self.len
    }

    pub fn max_span_len(&self) -> usize {
        self.cap
    }

    pub fn num_spans(&self) -> usize {
        self.values.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i <= j && j < self.len && j - i < self.cap
    }

    pub fn index(&self, i: usize, j: usize) -> Option<usize> {
        self.contains(i, j).then(|| self.offsets[i] + (j - i))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&T> {
        self.index(i, j).map(|k| &self.values[k])
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        enumerate_spans(self.len, Some(self.cap))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        self.spans().into_iter().zip(self.values.iter())
    }
}

//! Group-indexed reductions (scatter) and their inverse alignment (gather).
//!
//! Every reduction visits the rows of a segment in ascending row order, no
//! matter how the work is split across threads, so results are bit-identical
//! for any rayon pool size. Max ties resolve to the smallest row index and
//! mean is computed as sum followed by one division.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Max,
    Mean,
    Count,
}

/// CSR layout of segment membership: rows of segment `g` are
/// `rows[offsets[g]..offsets[g + 1]]`, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex {
    offsets: Vec<usize>,
    rows: Vec<usize>,
}

impl SegmentIndex {
    /// Counting sort of `segment_id`. Every id must lie in
    /// `[0, segment_count)` and every segment must be non-empty.
    pub fn new(segment_id: &[usize], segment_count: usize) -> Result<Self> {
        let mut offsets = vec![0usize; segment_count + 1];
        for (row, &id) in segment_id.iter().enumerate() {
            if id >= segment_count {
                return Err(Error::SegmentIdOutOfRange {
                    row,
                    id,
                    segment_count,
                });
            }
            offsets[id + 1] += 1;
        }
        if let Some(g) = offsets[1..].iter().position(|&c| c == 0) {
            return Err(Error::EmptySegment(g));
        }
        for g in 0..segment_count {
            offsets[g + 1] += offsets[g];
        }
        let mut cursor = offsets.clone();
        let mut rows = vec![0usize; segment_id.len()];
        for (row, &id) in segment_id.iter().enumerate() {
            rows[cursor[id]] = row;
            cursor[id] += 1;
        }
        Ok(Self { offsets, rows })
    }

    pub fn segment_count(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn rows_of(&self, segment: usize) -> &[usize] {
        &self.rows[self.offsets[segment]..self.offsets[segment + 1]]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// An `R x C` matrix whose rows are tagged with segment ids in `[0, M)`.
#[derive(Debug, Clone)]
pub struct SegmentedMatrix<T> {
    values: Array2<T>,
    segment_id: Vec<usize>,
    index: SegmentIndex,
}

impl<T: Scalar> SegmentedMatrix<T> {
    pub fn new(values: Array2<T>, segment_id: Vec<usize>, segment_count: usize) -> Result<Self> {
        if values.nrows() != segment_id.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} segment ids",
                values.nrows(),
                segment_id.len()
            )));
        }
        let index = SegmentIndex::new(&segment_id, segment_count)?;
        let values = values.as_standard_layout().into_owned();
        Ok(Self {
            values,
            segment_id,
            index,
        })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn segment_ids(&self) -> &[usize] {
        &self.segment_id
    }

    pub fn segment_count(&self) -> usize {
        self.index.segment_count()
    }

    pub fn index(&self) -> &SegmentIndex {
        &self.index
    }
}

/// Output of [`scatter_reduce`].
#[derive(Debug, Clone, PartialEq)]
pub enum Reduction<T> {
    Sum(Array2<T>),
    Mean(Array2<T>),
    /// Per-column maxima and the input row each came from.
    Max {
        values: Array2<T>,
        argmax: Array2<usize>,
    },
    /// `M x 1` member counts.
    Count(Array2<usize>),
}

impl<T> Reduction<T> {
    /// Reduced values for sum, mean and max.
    pub fn values(&self) -> Option<&Array2<T>> {
        match self {
            Reduction::Sum(v) | Reduction::Mean(v) | Reduction::Max { values: v, .. } => Some(v),
            Reduction::Count(_) => None,
        }
    }

    pub fn into_values(self) -> Option<Array2<T>> {
        match self {
            Reduction::Sum(v) | Reduction::Mean(v) | Reduction::Max { values: v, .. } => Some(v),
            Reduction::Count(_) => None,
        }
    }
}

pub fn scatter_reduce<T: Scalar>(input: &SegmentedMatrix<T>, mode: ReduceMode) -> Reduction<T> {
    let view = input.values.view();
    match mode {
        ReduceMode::Sum => Reduction::Sum(segment_sum(view, &input.index)),
        ReduceMode::Mean => Reduction::Mean(segment_mean(view, &input.index)),
        ReduceMode::Max => {
            let (values, argmax) = segment_max(view, &input.index);
            Reduction::Max { values, argmax }
        }
        ReduceMode::Count => {
            let counts = input.index.counts();
            let m = counts.len();
            Reduction::Count(Array2::from_shape_vec((m, 1), counts).expect("m x 1"))
        }
    }
}

/// Sum of the rows of each segment. `values` must have one row per entry of
/// the index.
pub fn segment_sum<T: Scalar>(values: ArrayView2<T>, index: &SegmentIndex) -> Array2<T> {
    reduce_rows(values, index, |rows, out| {
        for &r in rows {
            let row = values.row(r);
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o = *o + *v;
            }
        }
    })
}

pub fn segment_mean<T: Scalar>(values: ArrayView2<T>, index: &SegmentIndex) -> Array2<T> {
    reduce_rows(values, index, |rows, out| {
        for &r in rows {
            let row = values.row(r);
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o = *o + *v;
            }
        }
        let n = T::of_usize(rows.len());
        for o in out.iter_mut() {
            *o = *o / n;
        }
    })
}

/// Column-wise maximum per segment with the winning row index.
pub fn segment_max<T: Scalar>(
    values: ArrayView2<T>,
    index: &SegmentIndex,
) -> (Array2<T>, Array2<usize>) {
    let m = index.segment_count();
    let c = values.ncols();
    let mut out = vec![T::zero(); m * c];
    let mut arg = vec![0usize; m * c];
    let work = |(g, (out, arg)): (usize, (&mut [T], &mut [usize]))| {
        let rows = index.rows_of(g);
        let first = rows[0];
        for col in 0..c {
            out[col] = values[[first, col]];
            arg[col] = first;
        }
        for &r in &rows[1..] {
            for col in 0..c {
                let v = values[[r, col]];
                // Strict comparison keeps the earliest row on ties.
                if v > out[col] {
                    out[col] = v;
                    arg[col] = r;
                }
            }
        }
    };
    if c == 0 {
        return (Array2::zeros((m, 0)), Array2::zeros((m, 0)));
    }
    out.par_chunks_mut(c)
        .zip(arg.par_chunks_mut(c))
        .enumerate()
        .for_each(work);
    (
        Array2::from_shape_vec((m, c), out).expect("m x c"),
        Array2::from_shape_vec((m, c), arg).expect("m x c"),
    )
}

fn reduce_rows<T, F>(values: ArrayView2<T>, index: &SegmentIndex, per_segment: F) -> Array2<T>
where
    T: Scalar,
    F: Fn(&[usize], &mut [T]) + Sync,
{
    let m = index.segment_count();
    let c = values.ncols();
    if c == 0 {
        return Array2::zeros((m, 0));
    }
    let mut out = vec![T::zero(); m * c];
    out.par_chunks_mut(c)
        .enumerate()
        .for_each(|(g, chunk)| per_segment(index.rows_of(g), chunk));
    Array2::from_shape_vec((m, c), out).expect("m x c")
}

/// Row `r` of the result is `reduced[segment_id[r]]`.
pub fn gather<T: Scalar>(reduced: &Array2<T>, segment_id: &[usize]) -> Result<Array2<T>> {
    let m = reduced.nrows();
    if let Some((row, &id)) = segment_id.iter().enumerate().find(|(_, &id)| id >= m) {
        return Err(Error::SegmentIdOutOfRange {
            row,
            id,
            segment_count: m,
        });
    }
    Ok(reduced.select(ndarray::Axis(0), segment_id))
}

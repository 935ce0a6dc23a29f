//! Raw array kernels shared by tensor values and the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    let valid = order.len() == rank
        && order.iter().all(|&ax| {
            if ax >= rank || seen[ax] {
                false
            } else {
                seen[ax] = true;
                true
            }
        });
    if valid {
        Ok(())
    } else {
        Err(Error::InvalidPermutation {
            order: order.to_vec(),
            rank,
        })
    }
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &ax) in order.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Physically reorders `data` so that output axis `i` is input axis `order[i]`.
pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], order: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = order.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = order.iter().map(|&ax| in_strides[ax]).collect();
    let rank = shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    // Walk the output in row-major order; copy the innermost axis in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // Advance the odometer over the outer axes.
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// `b` is the trailing block of `a`: `b[i % len]`.
    Suffix(usize),
    /// `b` is a single value.
    Scalar,
    /// General right-aligned broadcast: per-axis strides into `b` (0 on broadcast axes).
    Strided { shape: Vec<usize>, strides: Vec<usize> },
}

impl Broadcast {
    pub(crate) fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() > a.len() {
            return Err(Error::shape(op, a, b));
        }
        let bn: usize = b.iter().product();
        if bn == 1 {
            return Ok(Broadcast::Scalar);
        }
        let offset = a.len() - b.len();
        if a[offset..] == *b {
            return Ok(Broadcast::Suffix(bn));
        }
        let b_strides = strides(b);
        let mut st = vec![0; a.len()];
        for (i, &d) in b.iter().enumerate() {
            let ad = a[offset + i];
            if d == ad {
                st[offset + i] = b_strides[i];
            } else if d != 1 {
                return Err(Error::shape(op, a, b));
            }
        }
        Ok(Broadcast::Strided {
            shape: a.to_vec(),
            strides: st,
        })
    }

    /// Calls `f(i, j)` for every flat index `i` of `a` with the matching index `j` of `b`.
    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same => (0..n).for_each(|i| f(i, i)),
            Broadcast::Scalar => (0..n).for_each(|i| f(i, 0)),
            Broadcast::Suffix(len) => {
                for i in 0..n {
                    f(i, i % len)
                }
            }
            Broadcast::Strided { shape, strides } => {
                if n == 0 {
                    return;
                }
                let rank = shape.len();
                let mut idx = vec![0usize; rank];
                let mut j = 0usize;
                for i in 0..n {
                    f(i, j);
                    let mut ax = rank;
                    while ax > 0 {
                        ax -= 1;
                        idx[ax] += 1;
                        j += strides[ax];
                        if idx[ax] < shape[ax] {
                            break;
                        }
                        j -= strides[ax] * shape[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}

/// `c (+)= op(a) * op(b)` for row-major `a` (m x k, or k x m when transposed)
/// and `b` (k x n, or n x k when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are asserted above and `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for `a[..., m, k] x b[..., k, n]` (or `b[..., n, k]` transposed).
#[derive(Debug, Clone)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub(crate) fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (a_lead, a_mat) = a.split_at(a.len() - 2);
        let (b_lead, b_mat) = b.split_at(b.len() - 2);
        let (m, k) = (a_mat[0], a_mat[1]);
        let (kb, n) = if trans_b {
            (b_mat[1], b_mat[0])
        } else {
            (b_mat[0], b_mat[1])
        };
        if k != kb {
            return Err(Error::shape("matmul", a, b));
        }
        let lead = if a_lead == b_lead || b_lead.is_empty() {
            a_lead
        } else if a_lead.is_empty() {
            b_lead
        } else {
            return Err(Error::shape("matmul", a, b));
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulDims {
            batch: lead.iter().product(),
            m,
            k,
            n,
            a_batched: !a_lead.is_empty(),
            b_batched: !b_lead.is_empty(),
            out_shape,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, a: &[T], b: &[T], trans_b: bool) -> Vec<T> {
        let MatmulDims { batch, m, k, n, .. } = *self;
        let mut out = vec![T::zero(); batch * m * n];
        if !self.b_batched {
            // Fold the batch into the row dimension.
            gemm(batch * m, k, n, a, false, b, trans_b, &mut out, false);
            return out;
        }
        for i in 0..batch {
            let ai = if self.a_batched { &a[i * m * k..(i + 1) * m * k] } else { a };
            let bi = &b[i * k * n..(i + 1) * k * n];
            gemm(m, k, n, ai, false, bi, trans_b, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        out
    }

    /// Gradients of `sum(g * (a x op(b)))` with respect to `a` and `b`.
    pub(crate) fn backward<T: Scalar>(
        &self,
        a: &[T],
        b: &[T],
        g: &[T],
        trans_b: bool,
        want_a: bool,
        want_b: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let MatmulDims { batch, m, k, n, .. } = *self;
        let mut da = want_a.then(|| vec![T::zero(); a.len()]);
        let mut db = want_b.then(|| vec![T::zero(); b.len()]);
        if !self.b_batched {
            let rows = batch * m;
            if let Some(da) = da.as_mut() {
                // dA = G op(B)^T
                gemm(rows, n, k, g, false, b, !trans_b, da, false);
            }
            if let Some(db) = db.as_mut() {
                if trans_b {
                    // dB (n x k) = G^T A
                    gemm(n, rows, k, g, true, a, false, db, false);
                } else {
                    // dB (k x n) = A^T G
                    gemm(k, rows, n, a, true, g, false, db, false);
                }
            }
            return (da, db);
        }
        for i in 0..batch {
            let (a_off, a_acc) = if self.a_batched { (i * m * k, false) } else { (0, i > 0) };
            let ai = &a[a_off..a_off + m * k];
            let bi = &b[i * k * n..(i + 1) * k * n];
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(da) = da.as_mut() {
                gemm(m, n, k, gi, false, bi, !trans_b, &mut da[a_off..a_off + m * k], a_acc);
            }
            if let Some(db) = db.as_mut() {
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(n, m, k, gi, true, ai, false, dbi, false);
                } else {
                    gemm(k, m, n, ai, true, gi, false, dbi, false);
                }
            }
        }
        (da, db)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_3d_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<usize> = (0..24).collect();
        let (out, out_shape) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    assert_eq!(out[c * 6 + a * 3 + b], data[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn permutation_validation() {
        assert!(check_permutation(&[1, 0], 2).is_ok());
        assert!(check_permutation(&[0, 0], 2).is_err());
        assert!(check_permutation(&[0, 2], 2).is_err());
        assert!(check_permutation(&[0], 2).is_err());
    }

    #[test]
    fn strided_broadcast_middle_axis() {
        // b of shape [3, 1] against a of shape [2, 3, 2]
        let plan = Broadcast::plan("t", &[2, 3, 2], &[3, 1]).unwrap();
        let mut js = Vec::new();
        plan.for_each(12, |_, j| js.push(j));
        assert_eq!(js, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(Broadcast::plan("t", &[2, 3], &[2]).is_err());
        assert!(Broadcast::plan("t", &[3], &[2, 3]).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

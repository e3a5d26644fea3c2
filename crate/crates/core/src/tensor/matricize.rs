//! Channel-mode unfoldings of a conv kernel.
//!
//! Mode-3: row `s`, column `(h * D_w + w) * T + t`, shape `S × (D_h·D_w·T)`.
//! Mode-4: row `t`, column `(h * D_w + w) * S + s`, shape `T × (D_h·D_w·S)`.
//!
//! Both keep the remaining indices in their storage order, so the maps are
//! pure permutations of the kernel entries.

use super::{DenseMatrix, Tensor4};
use crate::error::{Error, Result};

pub fn matricize_mode3(k: &Tensor4) -> DenseMatrix {
    let [dh, dw, s, t] = k.dims();
    let cols = dh * dw * t;
    let mut out = vec![0.0; s * cols];
    for sp in 0..dh * dw {
        for si in 0..s {
            let src = &k.data()[(sp * s + si) * t..(sp * s + si + 1) * t];
            out[si * cols + sp * t..si * cols + (sp + 1) * t].copy_from_slice(src);
        }
    }
    DenseMatrix { rows: s, cols, data: out }
}

pub fn matricize_mode4(k: &Tensor4) -> DenseMatrix {
    let [dh, dw, s, t] = k.dims();
    let cols = dh * dw * s;
    let mut out = vec![0.0; t * cols];
    for sp in 0..dh * dw {
        for si in 0..s {
            for ti in 0..t {
                out[ti * cols + sp * s + si] = k.data()[(sp * s + si) * t + ti];
            }
        }
    }
    DenseMatrix { rows: t, cols, data: out }
}

pub fn dematricize_mode3(m: &DenseMatrix, dims: [usize; 4]) -> Result<Tensor4> {
    let [dh, dw, s, t] = dims;
    if m.rows() != s || m.cols() != dh * dw * t {
        return Err(Error::Shape(format!(
            "{}x{} matrix is not a mode-3 unfolding of {dims:?}",
            m.rows(),
            m.cols()
        )));
    }
    let mut k = Tensor4::zeros(dims);
    let cols = m.cols();
    for sp in 0..dh * dw {
        for si in 0..s {
            k.data_mut()[(sp * s + si) * t..(sp * s + si + 1) * t]
                .copy_from_slice(&m.data()[si * cols + sp * t..si * cols + (sp + 1) * t]);
        }
    }
    Ok(k)
}

pub fn dematricize_mode4(m: &DenseMatrix, dims: [usize; 4]) -> Result<Tensor4> {
    let [dh, dw, s, t] = dims;
    if m.rows() != t || m.cols() != dh * dw * s {
        return Err(Error::Shape(format!(
            "{}x{} matrix is not a mode-4 unfolding of {dims:?}",
            m.rows(),
            m.cols()
        )));
    }
    let mut k = Tensor4::zeros(dims);
    let cols = m.cols();
    for sp in 0..dh * dw {
        for si in 0..s {
            for ti in 0..t {
                k.data_mut()[(sp * s + si) * t + ti] = m.data()[ti * cols + sp * s + si];
            }
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ones_kernel_gives_all_ones_unfolding() {
        let k = Tensor4::from_vec([3, 3, 2, 4], vec![1.0; 72]).unwrap();
        let m = matricize_mode3(&k);
        assert_eq!((m.rows(), m.cols()), (2, 36));
        assert!(m.data().iter().all(|&v| v == 1.0));
        let m4 = matricize_mode4(&k);
        assert_eq!((m4.rows(), m4.cols()), (4, 18));
    }

    // Brute-force index map written from the definition: row = channel index,
    // column enumerates the other three indices in (h, w, other) order.
    #[test]
    fn single_nonzero_lands_in_its_channel_row() {
        let dims = [2, 2, 3, 3];
        for h in 0..2 {
            for w in 0..2 {
                for s in 0..3 {
                    for t in 0..3 {
                        let mut k = Tensor4::zeros(dims);
                        k.set(h, w, s, t, 1.0);
                        let m3 = matricize_mode3(&k);
                        let m4 = matricize_mode4(&k);
                        let nz3: Vec<_> = (0..m3.rows())
                            .flat_map(|i| (0..m3.cols()).map(move |j| (i, j)))
                            .filter(|&(i, j)| m3.get(i, j) != 0.0)
                            .collect();
                        let nz4: Vec<_> = (0..m4.rows())
                            .flat_map(|i| (0..m4.cols()).map(move |j| (i, j)))
                            .filter(|&(i, j)| m4.get(i, j) != 0.0)
                            .collect();
                        assert_eq!(nz3, vec![(s, (h * 2 + w) * 3 + t)]);
                        assert_eq!(nz4, vec![(t, (h * 2 + w) * 3 + s)]);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = DenseMatrix::zeros(2, 5);
        assert!(dematricize_mode3(&m, [1, 1, 2, 4]).is_err());
        assert!(dematricize_mode4(&m, [1, 1, 4, 2]).is_err());
    }

    fn kernel_strategy() -> impl Strategy<Value = Tensor4> {
        (1usize..4, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(a, b, c, d)| {
            prop::collection::vec(-10.0f64..10.0, a * b * c * d)
                .prop_map(move |v| Tensor4::from_vec([a, b, c, d], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn unfoldings_round_trip_and_keep_norm(k in kernel_strategy()) {
            let m3 = matricize_mode3(&k);
            let m4 = matricize_mode4(&k);
            prop_assert_eq!(dematricize_mode3(&m3, k.dims()).unwrap(), k.clone());
            prop_assert_eq!(dematricize_mode4(&m4, k.dims()).unwrap(), k.clone());

            let mut a: Vec<f64> = k.data().to_vec();
            let mut b: Vec<f64> = m3.data().to_vec();
            let mut c: Vec<f64> = m4.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            c.sort_by(f64::total_cmp);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }
}

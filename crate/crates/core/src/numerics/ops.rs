//! Forward kernels on plain tensors. The autodiff tape reuses these for its
//! forward values, so the value path and the gradient path agree bitwise.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which operand of a product is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = a·b + beta·c` for row-major `a` ([m,k] or [k,m] if transposed) and
/// `b` ([k,n] or [n,k] if transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the asserted lengths cover every index addressed by the strides.
    unsafe {
        T::gemm_raw(
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

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), Trans::No, b.data(), Trans::No, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = axis_split(x.shape(), axis)?;
    if extent == 0 {
        return Err(Error::dim("softmax over an empty axis"));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..extent {
                max = max.max(src[base + e * inner]);
            }
            let mut total = T::zero();
            for e in 0..extent {
                let v = (src[base + e * inner] - max).exp();
                out[base + e * inner] = v;
                total += v;
            }
            for e in 0..extent {
                out[base + e * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row softmax over contiguous rows of width `cols`, in place.
pub(crate) fn softmax_rows_in_place<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Per-row statistics saved by the layer-norm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
    if gain.len() != width || bias.len() != width {
        return Err(Error::dim(format!(
            "layer_norm: gain {:?} / bias {:?} vs last axis {width}",
            gain.shape(),
            bias.shape()
        )));
    }
    if width == 0 {
        return Err(Error::dim("layer_norm over an empty axis"));
    }
    let n = T::from_usize(width).unwrap();
    let rows = x.len() / width;
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        rstd[r] = inv;
        for c in 0..width {
            let xh = (row[c] - mean) * inv;
            normalized[r * width + c] = xh;
            out[r * width + c] = xh * g[c] + b[c];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormStats { normalized, rstd },
    ))
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(t, _)| t)
}

fn check_labels(classes: usize, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::Input(format!(
            "label {l} out of range for {classes} classes"
        ))),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood plus the row-softmax probabilities.
pub(crate) fn cross_entropy_with_probs<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let (batch, classes) = logits.dims2()?;
    if batch != labels.len() {
        return Err(Error::dim(format!(
            "cross_entropy: {batch} rows but {} labels",
            labels.len()
        )));
    }
    if batch == 0 || classes == 0 {
        return Err(Error::dim("cross_entropy on an empty batch"));
    }
    check_labels(classes, labels)?;
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (r, row) in probs.chunks_mut(classes).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[labels[r]];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((total / T::from_usize(batch).unwrap(), probs))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::<f64>::from_f64(&[2, 2], &[3.0, -1.0, 0.5, 7.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_column_vector() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let mut c = vec![0.0; 20];
        gemm(4, 3, 5, a.data(), Trans::No, b.data(), Trans::Yes, 0.0, &mut c);
        let expect = matmul(&a, &b.transpose2().unwrap()).unwrap();
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let s = softmax(&Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() <= f64::EPSILON);
        assert!(s.data()[1] <= f64::EPSILON);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[9], &mut rng);
        let s = softmax(&x, 0).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (i, &v) in x.data().iter().enumerate() {
            assert!((s.data()[i] - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for c in 0..3 {
            assert!((s.at(&[0, c]) + s.at(&[1, c]) - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
        assert!(softmax(&Tensor::<f64>::zeros(&[0]), 0).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::<f64>::full(&[4], 1.0);
        let zero = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[1, 4], 3.5), &one, &zero, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one2 = Tensor::<f64>::full(&[2], 1.0);
        let zero2 = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &one2, &zero2, 1e-15).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // unit-scale spread keeps eps/variance well under the tolerance
        let x = random(&[1, 16], &mut rng).map(|v| 10.0 * v);
        let one = Tensor::<f64>::full(&[16], 1.0);
        let zero = Tensor::<f64>::zeros(&[16]);
        let y = layer_norm(&x, &one, &zero, 1e-6).unwrap();
        let mean = y.sum() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6, "variance {var}");
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[1, 4]), &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&Tensor::<f64>::from_f64(&[1, 3], &[0.0, 30.0, 0.0]).unwrap(), &[1]).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(
            cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[3]),
            Err(Error::Input(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&[3, 5], &mut rng);
        let labels = [4, 0, 2];
        let mut expect = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            expect += -(logits.row(r)[lab].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}

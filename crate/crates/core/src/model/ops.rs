//! Dense building blocks with hand-written backward passes. Activations are
//! row-major `rows × features` matrices.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::weights::{LayerNorm, Linear};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<T: Scalar>(x: ArrayView2<'_, T>, l: &Linear<T>) -> Array2<T> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub(crate) fn linear_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    l: &Linear<T>,
    dy: ArrayView2<'_, T>,
    grad: &mut Linear<T>,
) -> Array2<T> {
    linear_backward_params(x, dy, grad);
    dy.dot(&l.weight.t())
}

pub(crate) fn linear_backward_params<T: Scalar>(
    x: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    grad: &mut Linear<T>,
) {
    general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: ArrayView2<'_, T>, ln: &LayerNorm<T>) -> (Array2<T>, NormCache<T>) {
    let n = T::from_usize(x.ncols()).unwrap();
    let eps = T::lit(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / n;
        *s = T::one() / (var + eps).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let mut y = &xhat * &ln.gain;
    y += &ln.offset;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    ln: &LayerNorm<T>,
    cache: &NormCache<T>,
    dy: ArrayView2<'_, T>,
    grad: &mut LayerNorm<T>,
) -> Array2<T> {
    grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.offset += &dy.sum_axis(Axis(0));
    let n = T::from_usize(dy.ncols()).unwrap();
    let mut dx = &dy * &ln.gain;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum = row.sum();
        let dot = row.iter().zip(xh.iter()).fold(T::zero(), |a, (&g, &h)| a + g * h);
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &h| *g = s * (*g - sum / n - h * dot / n));
    }
    dx
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

pub(crate) fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| gelu_parts(v).0)
}

/// `dy ⊙ gelu'(pre)`
pub(crate) fn gelu_backward<T: Scalar>(pre: &Array2<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(pre).for_each(|g, &x| *g *= gelu_parts(x).1);
    out
}

/// Query rows and key rows that attend to each other.
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

/// Softmax probabilities for every (segment, head), row-major by segment.
pub(crate) type AttnProbs<T> = Vec<Array2<T>>;

/// Multi-head scaled dot-product attention over disjoint segments.
///
/// With `causal`, the queries of a segment are taken to be its last
/// `q.len()` positions, so query `i` sees keys `0..=i + (k.len() - q.len())`.
pub(crate) fn attention<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    segments: &[Segment],
    n_heads: usize,
    causal: bool,
) -> (Array2<T>, AttnProbs<T>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ctx = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(segments.len() * n_heads);
    for seg in segments {
        let offset = if causal { seg.k.len() - seg.q.len() } else { 0 };
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![seg.q.clone(), cols.clone()]);
            let ks = k.slice(s![seg.k.clone(), cols.clone()]);
            let vs = v.slice(s![seg.k.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let visible = if causal { i + offset + 1 } else { row.len() };
                let max = row
                    .iter()
                    .take(visible)
                    .fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                let mut total = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if j < visible { (*x * scale - max).exp() } else { T::zero() };
                    total += *x;
                }
                row.mapv_inplace(|x| x / total);
            }
            ctx.slice_mut(s![seg.q.clone(), cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)` for [`attention`].
pub(crate) fn attention_backward<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    probs: &AttnProbs<T>,
    segments: &[Segment],
    n_heads: usize,
    dctx: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (si, seg) in segments.iter().enumerate() {
        for h in 0..n_heads {
            let p = &probs[si * n_heads + h];
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![seg.q.clone(), cols.clone()]);
            let ks = k.slice(s![seg.k.clone(), cols.clone()]);
            let vs = v.slice(s![seg.k.clone(), cols.clone()]);
            let dc = dctx.slice(s![seg.q.clone(), cols.clone()]);
            let mut ds = dc.dot(&vs.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = drow.iter().zip(prow.iter()).fold(T::zero(), |a, (&g, &pp)| a + g * pp);
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|g, &pp| *g = pp * (*g - inner) * scale);
            }
            general_mat_mul(
                T::one(),
                &p.t(),
                &dc,
                T::one(),
                &mut dv.slice_mut(s![seg.k.clone(), cols.clone()]),
            );
            general_mat_mul(
                T::one(),
                &ds,
                &ks,
                T::one(),
                &mut dq.slice_mut(s![seg.q.clone(), cols.clone()]),
            );
            general_mat_mul(
                T::one(),
                &ds.t(),
                &qs,
                T::one(),
                &mut dk.slice_mut(s![seg.k.clone(), cols]),
            );
        }
    }
    (dq, dk, dv)
}

/// Standard sinusoidal table, base 10000: even columns `sin`, odd `cos`.
pub fn sinusoidal_table<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, col)| {
        let i = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        T::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;

    fn rand_mat(rng: &mut NoiseRng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.normal())
    }

    /// Central differences of `f` at every entry of `x`.
    fn numeric(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = NoiseRng::new(1);
        let x = rand_mat(&mut rng, 3, 6);
        let w = rand_mat(&mut rng, 3, 6);
        let ln = LayerNorm {
            gain: (0..6).map(|i| 0.5 + i as f64 * 0.1).collect(),
            offset: (0..6).map(|i| i as f64 * 0.01).collect(),
        };
        let loss = |x: &Array2<f64>| (&layer_norm(x.view(), &ln).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), &ln);
        let mut g = LayerNorm {
            gain: Array1::zeros(6),
            offset: Array1::zeros(6),
        };
        let dx = layer_norm_backward(&ln, &cache, w.view(), &mut g);
        close(&dx, &numeric(&x, loss));
    }

    #[test]
    fn gelu_derivative() {
        let mut rng = NoiseRng::new(2);
        let x = rand_mat(&mut rng, 4, 5) * 2.0;
        let w = rand_mat(&mut rng, 4, 5);
        let dx = gelu_backward(&x, w.view());
        close(&dx, &numeric(&x, |x| (&gelu(x) * &w).sum()));
        assert!((gelu_parts(0.0f64).0).abs() < 1e-15);
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        let mut rng = NoiseRng::new(3);
        for causal in [true, false] {
            let (nq, nk) = if causal { (7, 7) } else { (7, 5) };
            let segs = if causal {
                vec![Segment { q: 0..4, k: 0..4 }, Segment { q: 4..7, k: 4..7 }]
            } else {
                vec![Segment { q: 0..4, k: 0..2 }, Segment { q: 4..7, k: 2..5 }]
            };
            let q = rand_mat(&mut rng, nq, 4);
            let k = rand_mat(&mut rng, nk, 4);
            let v = rand_mat(&mut rng, nk, 4);
            let w = rand_mat(&mut rng, nq, 4);
            let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
                (&attention(q.view(), k.view(), v.view(), &segs, 2, causal).0 * &w).sum()
            };
            let (_, probs) = attention(q.view(), k.view(), v.view(), &segs, 2, causal);
            let (dq, dk, dv) = attention_backward(q.view(), k.view(), v.view(), &probs, &segs, 2, w.view());
            close(&dq, &numeric(&q, |x| f(x, &k, &v)));
            close(&dk, &numeric(&k, |x| f(&q, x, &v)));
            close(&dv, &numeric(&v, |x| f(&q, &k, x)));
        }
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let mut rng = NoiseRng::new(4);
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        let segs = [Segment { q: 0..5, k: 0..5 }];
        let (_, probs) = attention(q.view(), k.view(), v.view(), &segs, 1, true);
        for (i, row) in probs[0].rows().into_iter().enumerate() {
            assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoidal_table::<f64>(2, 4);
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((t[[1, 3]] - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }
}

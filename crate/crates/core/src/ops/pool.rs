use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Routes `grad` through positions where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = grad.clone();
    relu_backward_in_place(x, &mut out)?;
    Ok(out)
}

/// [`relu_backward`] overwriting `grad`.
pub fn relu_backward_in_place<T: Scalar>(x: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape("relu backward".into()));
    }
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        *g = if v > T::zero() { *g } else { T::zero() };
    }
    Ok(())
}

/// Flat input offsets of each pooling window's maximum, plus the input shape.
#[derive(Debug, Clone)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2×2 stride-2 max pooling. First maximum in row-major window order wins ties.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 {
        return Err(Error::OddPoolExtent(h));
    }
    if w % 2 != 0 {
        return Err(Error::OddPoolExtent(w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[(plane * ho + oy) * wo + ox] = src[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, MaxPoolIndices { input_shape: x.shape().to_vec(), argmax }))
}

pub fn maxpool2_backward<T: Scalar>(indices: &MaxPoolIndices, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.len() != indices.argmax.len() {
        return Err(Error::Shape("maxpool backward".into()));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    let dst = out.data_mut();
    for (&at, &g) in indices.argmax.iter().zip(grad.data()) {
        dst[at] += g;
    }
    Ok(out)
}

/// Mean over H×W, giving `[B, C, 1, 1]`.
pub fn global_avg<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let data = x.data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * scale).collect();
    Tensor::new(vec![b, c, 1, 1], data)
}

pub fn global_avg_backward<T: Scalar>(input_shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input_shape[..] else {
        return Err(Error::Shape("global average expects rank 4".into()));
    };
    if grad.len() != b * c {
        return Err(Error::Shape("global average backward".into()));
    }
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(input_shape);
    for (plane, &g) in out.data_mut().chunks_exact_mut(h * w).zip(grad.data()) {
        plane.fill(g * scale);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn global_avg_of_constant_map() {
        let x = Tensor::filled(&[2, 3, 4, 4], 0.75f64);
        let y = global_avg(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn maxpool_halves_and_routes_to_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = maxpool2_backward(&idx, &Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2(&x), Err(Error::OddPoolExtent(3))));
    }
}

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::check_selection;

fn weight_dims<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    match w.shape()[..] {
        [d_out, d_in] if b.shape() == [d_out] => Ok((d_out, d_in)),
        _ => Err(Error::Shape(format!("dense weight {:?} / bias {:?}", w.shape(), b.shape()))),
    }
}

fn gather_columns<T: Scalar>(w: &Tensor<T>, d_in: usize, in_sel: &[usize]) -> Vec<T> {
    w.data()
        .chunks_exact(d_in)
        .flat_map(|row| in_sel.iter().map(move |&i| row[i]))
        .collect()
}

/// `y = x · w[:, in_sel]ᵀ + b`. Any input of rank ≥ 2 is read as `[B, |in_sel|]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, in_sel: &[usize]) -> Result<Tensor<T>> {
    let (d_out, d_in) = weight_dims(w, b)?;
    check_selection(in_sel, d_in)?;
    let (batch, features) = x.dims2();
    if features != in_sel.len() {
        return Err(Error::Shape(format!("dense input has {features} features, selection has {}", in_sel.len())));
    }
    let sub = gather_columns(w, d_in, in_sel);
    let mut y = Tensor::zeros(&[batch, d_out]);
    for row in y.data_mut().chunks_exact_mut(d_out) {
        row.copy_from_slice(b.data());
    }
    gemm(
        MatRef::row_major(x.data(), batch, features),
        MatRef::transposed(&sub, d_out, features),
        T::one(),
        y.data_mut(),
    );
    if !y.all_finite() {
        return Err(Error::NonFinite("dense"));
    }
    Ok(y)
}

/// Backward companion of [`dense`]: accumulates into the selected weight
/// columns and the bias, returns the input gradient shaped like `x`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    in_sel: &[usize],
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = weight_dims(w, b)?;
    check_selection(in_sel, d_in)?;
    let (batch, features) = x.dims2();
    if features != in_sel.len() || grad_out.shape() != [batch, d_out] {
        return Err(Error::Shape(format!("dense backward: input {:?}, grad {:?}", x.shape(), grad_out.shape())));
    }
    if grad_w.shape() != w.shape() || grad_b.shape() != b.shape() {
        return Err(Error::Shape("dense gradient buffer shape".into()));
    }
    let sub = gather_columns(w, d_in, in_sel);
    let mut grad_sub = vec![T::zero(); d_out * features];
    gemm(
        MatRef::transposed(grad_out.data(), batch, d_out),
        MatRef::row_major(x.data(), batch, features),
        T::zero(),
        &mut grad_sub,
    );
    for (full_row, sub_row) in grad_w.data_mut().chunks_exact_mut(d_in).zip(grad_sub.chunks_exact(features)) {
        for (&i, &g) in in_sel.iter().zip(sub_row) {
            full_row[i] += g;
        }
    }
    for row in grad_out.data().chunks_exact(d_out) {
        grad_b.data_mut().iter_mut().zip(row).for_each(|(gb, &g)| *gb += g);
    }
    let mut grad_x = Tensor::zeros(x.shape());
    gemm(
        MatRef::row_major(grad_out.data(), batch, d_out),
        MatRef::row_major(&sub, d_out, features),
        T::zero(),
        grad_x.data_mut(),
    );
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_block_with_zero_bias() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        assert_eq!(dense(&x, &w, &b, &[0, 1, 2]).unwrap(), x);
    }

    #[test]
    fn hand_computed_output() {
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1], vec![5.0]).unwrap();
        assert_eq!(dense(&x, &w, &b, &[0, 1]).unwrap().data(), &[16.0]);
    }

    #[test]
    fn partial_selection_touches_selected_columns_only() {
        let x = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_fn(&[2, 4], |i| i as f64);
        let b = Tensor::zeros(&[2]);
        let grad = Tensor::filled(&[1, 2], 1.0);
        let mut gw = Tensor::zeros(&[2, 4]);
        let mut gb = Tensor::zeros(&[2]);
        dense_backward(&x, &w, &b, &[3, 1], &grad, &mut gw, &mut gb).unwrap();
        assert_eq!(gw.data(), &[0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0]);
        assert_eq!(gb.data(), &[1.0, 1.0]);
    }
}

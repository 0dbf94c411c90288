//! Spectral normalization: weights are divided by their largest singular
//! value, with the weight reshaped to `(out, in * kh * kw)`.

use candle_core::{Device, Tensor, Var};

use super::{Init, ParamStore};
use crate::error::Result;

pub struct SpectralNorm {
    /// Left singular vector estimate, unit norm, shape `(out,)`.
    u: Var,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= n);
    n
}

fn matrix(w: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let rows = w.dim(0)?;
    let flat = w.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let cols = flat.len() / rows;
    Ok((rows, cols, flat))
}

impl SpectralNorm {
    pub fn new(store: &mut ParamStore, name: &str, weight: &Var) -> Result<Self> {
        let rows = weight.dim(0)?;
        let u = store.buffer(&format!("{name}.sn_u"), &[rows], Init::Normal(1.0))?;
        let sn = Self { u };
        sn.refresh(weight)?;
        Ok(sn)
    }

    /// Sets `u` to the leading left singular vector of the weight and
    /// returns the singular value.
    ///
    /// Power iteration approaches `sigma` from below and stalls when the top
    /// two singular values are close, which leaves normalized weights with
    /// norm above one. The Gram matrix `W W^T` is only `out x out`, so its top
    /// eigenpair is taken exactly instead.
    pub fn refresh(&self, weight: &Var) -> Result<f64> {
        let (rows, cols, w) = matrix(weight.as_tensor())?;
        let mut gram = nalgebra::DMatrix::<f64>::zeros(rows, rows);
        for i in 0..rows {
            let wi = &w[i * cols..(i + 1) * cols];
            for j in 0..=i {
                let g: f64 = wi.iter().zip(&w[j * cols..(j + 1) * cols]).map(|(a, b)| a * b).sum();
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(gram);
        let top = eig.eigenvalues.imax();
        let mut u: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        normalize(&mut u);
        let u32: Vec<f32> = u.into_iter().map(|x| x as f32).collect();
        self.u.set(&Tensor::from_vec(u32, rows, &Device::Cpu)?)?;
        Ok(eig.eigenvalues[top].max(0.0).sqrt())
    }

    /// `w / sigma` with `sigma = u^T W v`, `v = normalize(W^T u)`. The
    /// singular vectors are constants; gradients flow through `W` in both
    /// numerator and `sigma`.
    pub fn normalize(&self, w: &Tensor) -> Result<Tensor> {
        let rows = w.dim(0)?;
        let mat = w.reshape((rows, ()))?;
        let u = self.u.as_detached_tensor().reshape((1, rows))?;
        let v = u.matmul(&mat.detach())?;
        let v = v.broadcast_div(&v.sqr()?.sum_all()?.sqrt()?.maximum(1e-12)?)?;
        let sigma = u.matmul(&mat)?.matmul(&v.t()?)?.reshape(())?;
        Ok(w.broadcast_div(&sigma)?)
    }
}

/// Largest singular value of `w` reshaped to `(out, rest)`, computed by an
/// SVD. Used as an independent check of the Gram-matrix route.
pub fn spectral_norm_exact(w: &Tensor) -> Result<f64> {
    let (rows, cols, flat) = matrix(w)?;
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, &flat);
    Ok(m.singular_values().max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn normalized_weight_has_unit_spectral_norm() {
        let mut store = ParamStore::new(11);
        let w = store.param("w", &[8, 3, 3, 3], Init::Normal(0.7)).unwrap();
        let sn = SpectralNorm::new(&mut store, "w", &w).unwrap();
        sn.refresh(&w).unwrap();
        let normed = sn.normalize(w.as_tensor()).unwrap();
        let s = spectral_norm_exact(&normed).unwrap();
        assert!((s - 1.0).abs() < 1e-3, "sigma = {s}");
    }
}

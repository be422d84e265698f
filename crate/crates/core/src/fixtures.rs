//! Reference problem instances.

use nalgebra::{DMatrix, DVector};

use crate::model::{CostWeights, MjlsModel, NoiseKind};
use crate::scalar::Real;

fn scalars<T: Real>(v: &[f64]) -> Vec<DMatrix<T>> {
    v.iter().map(|&x| DMatrix::from_element(1, 1, T::lit(x))).collect()
}

/// Two-mode scalar example with indefinite weights (`Q_1 = -1`, `R_1 = -3`,
/// `R_2 = 0`), unit noise variance, terminal penalty `(20, 20)` and
/// `pi0 = (0.5, 0.5)`.
pub fn section4_generic<T: Real>() -> (MjlsModel<T>, CostWeights<T>) {
    let model = MjlsModel {
        n: 1,
        m: 1,
        a: scalars(&[0.5, 0.25]),
        b: scalars(&[-0.5, -0.25]),
        c: scalars(&[0.5, 0.25]),
        d: scalars(&[-0.5, -0.25]),
        sigma2: T::one(),
        rho: DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.4, 0.6].map(T::lit)),
        pi0: DVector::from_vec(vec![T::lit(0.5), T::lit(0.5)]),
        noise_kind: NoiseKind::Gaussian,
    };
    let weights = CostWeights { q: scalars(&[-1.0, 20.0]), r: scalars(&[-3.0, 0.0]), terminal_p: scalars(&[20.0, 20.0]) };
    (model, weights)
}

pub fn section4() -> (MjlsModel<f64>, CostWeights<f64>) {
    section4_generic()
}

/// A per-mode scalar tuple, e.g. a candidate `P̃`.
pub fn scalar_tuple<T: Real>(values: &[f64]) -> Vec<DMatrix<T>> {
    scalars(values)
}

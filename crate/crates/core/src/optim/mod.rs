//! Shared solvers: damped Gauss-Newton for nonlinear least squares, Adam
//! with box projection for first-order minimization, Laplacian stencils on
//! UV rasters, and a finite-difference gradient checker.

mod adam;
mod gauss_newton;
mod gradcheck;
mod laplacian;

pub use adam::{adam_step, minimize_adam, AdamOptions, AdamRun, AdamState};
pub use gauss_newton::{
    gauss_newton, ClosureProblem, GaussNewtonOptions, GaussNewtonReport, LeastSquaresProblem,
};
pub use gradcheck::check_gradient;
pub use laplacian::{raster_laplacian, smooth_abs, smooth_abs_grad, SMOOTH_L1_EPS};

use nalgebra::DVector;

/// Elementwise clamp of `v` into `[lo, hi]`.
pub fn project_box(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    project_box_in_place(&mut out, lo, hi);
    out
}

/// In-place elementwise clamp.
pub fn project_box_in_place(v: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    assert_eq!(v.len(), lo.len());
    assert_eq!(v.len(), hi.len());
    for i in 0..v.len() {
        debug_assert!(lo[i] <= hi[i], "empty box at coordinate {i}");
        v[i] = v[i].clamp(lo[i], hi[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_255(n: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::zeros(n), DVector::repeat(n, 255.0))
    }

    #[test]
    fn interior_points_are_unchanged() {
        let (lo, hi) = box_255(3);
        let v = DVector::from_vec(vec![0.0, 100.0, 255.0]);
        assert_eq!(project_box(&v, &lo, &hi), v);
    }

    #[test]
    fn exterior_points_clamp_to_the_boundary() {
        let (lo, hi) = box_255(3);
        let v = DVector::from_vec(vec![-3.0, 300.0, 12.5]);
        assert_eq!(
            project_box(&v, &lo, &hi),
            DVector::from_vec(vec![0.0, 255.0, 12.5])
        );
    }

    #[test]
    fn projection_is_idempotent() {
        let (lo, hi) = box_255(4);
        let v = DVector::from_vec(vec![-1.0, 256.0, 7.0, 1e9]);
        let once = project_box(&v, &lo, &hi);
        let twice = project_box(&once, &lo, &hi);
        assert_eq!(once, twice);
    }
}

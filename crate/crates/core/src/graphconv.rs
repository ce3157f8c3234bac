//! Spectral graph convolution: the exact eigenbasis form, its Chebyshev
//! approximation, the first-order propagation layer, and the two-layer
//! graph module used inside the unrolled network.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, symmetric_eig};
use crate::sparse::SparseMatrix;
use crate::spatialconv::Activation;

/// The two trainable kernel matrices of the graph module: d -> F -> d.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphKernels {
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
}

/// Shrinks the second kernel at init so the module starts near silent and
/// only grows as training asks for it; a full-scale random second kernel
/// injects patch-shuffled noise into early iterates. Kept nonzero so
/// gradients reach the first kernel from step one.
const OUTPUT_KERNEL_INIT_SCALE: f64 = 0.01;

impl GraphKernels {
    /// Zero-mean uniform init, range ±1/sqrt(fan_in) for the first kernel
    /// and a damped range for the second.
    pub fn init(features_in: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if features_in == 0 || width == 0 {
            return Err(Error::config(format!(
                "kernel sizes must be positive, got {features_in} and {width}"
            )));
        }
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            let bound = scale / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        Ok(GraphKernels {
            theta1: draw(features_in, width, 1.0),
            theta2: draw(width, features_in, OUTPUT_KERNEL_INIT_SCALE),
        })
    }

    pub fn zeros(features_in: usize, width: usize) -> Result<Self> {
        if features_in == 0 || width == 0 {
            return Err(Error::config(format!(
                "kernel sizes must be positive, got {features_in} and {width}"
            )));
        }
        Ok(GraphKernels {
            theta1: Array2::zeros((features_in, width)),
            theta2: Array2::zeros((width, features_in)),
        })
    }

    pub fn feature_len(&self) -> usize {
        self.theta1.dim().0
    }

    pub fn width(&self) -> usize {
        self.theta1.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.theta1.dim();
        if self.theta2.dim() != (f, d) {
            return Err(Error::config(format!(
                "second kernel is {:?}, expected ({f}, {d})",
                self.theta2.dim()
            )));
        }
        for t in [&self.theta1, &self.theta2] {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("graph kernel weights must be finite"));
            }
        }
        Ok(())
    }
}

/// Exact spectral filter: eigendecompose L = U diag(lambda) U^T and apply
/// U diag(g) U^T to the signal. Small-graph oracle for the fast paths.
pub fn spectral_conv_exact(
    a: &Array1<f64>,
    laplacian: &Array2<f64>,
    g_diag: &Array1<f64>,
) -> Result<Array1<f64>> {
    let n = laplacian.nrows();
    if a.len() != n || g_diag.len() != n {
        return Err(Error::input(format!(
            "signal ({}) and filter ({}) must match graph size {n}",
            a.len(),
            g_diag.len()
        )));
    }
    let (_, u) = symmetric_eig(laplacian)?;
    let spectrum = u.t().dot(a);
    let filtered = &spectrum * g_diag;
    Ok(u.dot(&filtered))
}

/// Truncated Chebyshev filter: coefficients theta_0..theta_K over the
/// rescaled Laplacian (2/lambda_max) L - I.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevFilter {
    pub coefficients: Vec<f64>,
    pub lambda_max: f64,
}

impl ChebyshevFilter {
    pub fn new(coefficients: Vec<f64>, lambda_max: f64) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::input("filter needs at least the order-0 coefficient"));
        }
        if !(lambda_max > 0.0) || !lambda_max.is_finite() {
            return Err(Error::input(format!(
                "lambda_max must be positive, got {lambda_max}"
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("filter coefficients must be finite"));
        }
        Ok(ChebyshevFilter {
            coefficients,
            lambda_max,
        })
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }
}

/// Chebyshev polynomial T_k(x) by the three-term recurrence.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            let mut prev = 1.0;
            let mut curr = x;
            for _ in 2..=k {
                let next = 2.0 * x * curr - prev;
                prev = curr;
                curr = next;
            }
            curr
        }
    }
}

/// Apply sum_k theta_k T_k(L~) to a signal, where L~ = (2/lambda_max) L - I.
/// The result touches only nodes within K hops of the signal's support.
pub fn chebyshev_conv(
    a: &Array1<f64>,
    laplacian: &SparseMatrix,
    filter: &ChebyshevFilter,
) -> Result<Array1<f64>> {
    let n = laplacian.n();
    if a.len() != n {
        return Err(Error::input(format!(
            "signal length {} does not match graph size {n}",
            a.len()
        )));
    }
    if laplacian.max_asymmetry() > 1e-9 {
        return Err(Error::input("Laplacian must be symmetric"));
    }
    let scale = 2.0 / filter.lambda_max;
    // L~ v = scale * (L v) - v
    let scaled = |v: &Array1<f64>| -> Array1<f64> { laplacian.matvec(v) * scale - v };
    let mut out = a * filter.coefficients[0];
    if filter.coefficients.len() == 1 {
        return Ok(out);
    }
    let mut t_prev = a.clone();
    let mut t_curr = scaled(a);
    out = out + &t_curr * filter.coefficients[1];
    for &coeff in &filter.coefficients[2..] {
        let t_next = scaled(&t_curr) * 2.0 - &t_prev;
        out = out + &t_next * coeff;
        t_prev = t_curr;
        t_curr = t_next;
    }
    Ok(out)
}

const LAMBDA_ITERS: usize = 30;
const LAMBDA_TOL: f64 = 1e-6;
const LAMBDA_SEED: u64 = 0x5eed_1a3b;

/// Power-iteration estimate of the largest Laplacian eigenvalue, for
/// callers that prefer a measured bound over the generic value 2.
pub fn estimate_lambda_max(laplacian: &SparseMatrix) -> f64 {
    power_iteration(
        |v| laplacian.matvec(v),
        laplacian.n(),
        LAMBDA_ITERS,
        LAMBDA_TOL,
        LAMBDA_SEED,
    )
}

/// First-order propagation layer Z = P X Theta.
pub fn gcn_layer(
    x: &Array2<f64>,
    propagation: &SparseMatrix,
    theta: &Array2<f64>,
) -> Result<Array2<f64>> {
    if x.nrows() != propagation.n() {
        return Err(Error::input(format!(
            "node features have {} rows, graph has {} nodes",
            x.nrows(),
            propagation.n()
        )));
    }
    if x.ncols() != theta.nrows() {
        return Err(Error::input(format!(
            "features are {}-dimensional, kernel expects {}",
            x.ncols(),
            theta.nrows()
        )));
    }
    Ok(propagation.matmat(x).dot(theta))
}

/// Intermediates of one graph module application, kept for reverse mode.
#[derive(Debug, Clone)]
pub struct PsiTrace {
    /// P X
    pub m1: Array2<f64>,
    /// (P X) Theta1, pre-activation
    pub z1: Array2<f64>,
    /// P sigma(Z1)
    pub m2: Array2<f64>,
}

/// Gradients of one graph module application.
#[derive(Debug, Clone)]
pub struct PsiGradients {
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
    pub input: Array2<f64>,
}

/// Two stacked propagation layers with an activation between them and no
/// outer activation; returns the tape alongside the output.
pub fn gcn_module_psi_traced(
    x: &Array2<f64>,
    propagation: &SparseMatrix,
    kernels: &GraphKernels,
    activation: Activation,
) -> Result<(Array2<f64>, PsiTrace)> {
    kernels.validate()?;
    if x.ncols() != kernels.feature_len() {
        return Err(Error::input(format!(
            "node features are {}-dimensional, kernels expect {}",
            x.ncols(),
            kernels.feature_len()
        )));
    }
    if x.nrows() != propagation.n() {
        return Err(Error::input(format!(
            "node features have {} rows, graph has {} nodes",
            x.nrows(),
            propagation.n()
        )));
    }
    let m1 = propagation.matmat(x);
    let z1 = m1.dot(&kernels.theta1);
    let a1 = z1.mapv(|v| activation.apply(v));
    let m2 = propagation.matmat(&a1);
    let out = m2.dot(&kernels.theta2);
    Ok((out, PsiTrace { m1, z1, m2 }))
}

/// Forward-only variant of the graph module.
pub fn gcn_module_psi(
    x: &Array2<f64>,
    propagation: &SparseMatrix,
    kernels: &GraphKernels,
    activation: Activation,
) -> Result<Array2<f64>> {
    Ok(gcn_module_psi_traced(x, propagation, kernels, activation)?.0)
}

/// Reverse-mode gradients of the graph module. The propagation matrix is
/// treated as a constant.
pub fn gcn_module_psi_backward(
    grad_out: &Array2<f64>,
    trace: &PsiTrace,
    propagation: &SparseMatrix,
    kernels: &GraphKernels,
    activation: Activation,
) -> Result<PsiGradients> {
    if grad_out.dim() != (trace.m2.nrows(), kernels.feature_len()) {
        return Err(Error::input(format!(
            "output gradient is {:?}, expected ({}, {})",
            grad_out.dim(),
            trace.m2.nrows(),
            kernels.feature_len()
        )));
    }
    let g_theta2 = trace.m2.t().dot(grad_out);
    let g_m2 = grad_out.dot(&kernels.theta2.t());
    // P is symmetric, so its adjoint is itself.
    let g_a1 = propagation.matmat(&g_m2);
    let g_z1 = &g_a1 * &trace.z1.mapv(|v| activation.grad(v));
    let g_theta1 = trace.m1.t().dot(&g_z1);
    let g_m1 = g_z1.dot(&kernels.theta1.t());
    let g_x = propagation.matmat(&g_m1);
    Ok(PsiGradients {
        theta1: g_theta1,
        theta2: g_theta2,
        input: g_x,
    })
}

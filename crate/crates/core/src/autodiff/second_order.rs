//! Second-order machinery: finite-difference gradient checking,
//! Hessian-vector products via central differences of gradients, and a
//! damped conjugate-gradient solver. Together these compute the
//! inverse-Hessian-times-gradient direction without ever materializing
//! the Hessian.

use super::tape::AutodiffError;
use super::tensor::{axpy, dot, norm2, norm_inf};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default probe scale for finite-difference HVPs: 1e-4 * (1 + |theta|_inf).
pub fn default_hvp_epsilon(theta: &[f64]) -> f64 {
    1e-4 * (1.0 + norm_inf(theta))
}

/// Outcome of a per-coordinate finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    pub checked_coords: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub tol: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares `analytic_grad` against central finite differences of `f` on a
/// random subset of at least 50 coordinates (all, when fewer exist).
pub fn gradient_check<F>(
    f: F,
    theta: &[f64],
    analytic_grad: &[f64],
    h: f64,
    tol: f64,
) -> GradientCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic_grad.len());
    let n = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_C0DE);
    let coords: Vec<usize> = if n <= 50 {
        (0..n).collect()
    } else {
        let mut c: Vec<usize> = sample(&mut rng, n, 50).into_iter().collect();
        c.sort_unstable();
        c
    };

    let mut max_rel = 0.0;
    let mut worst = coords[0];
    let mut probe = theta.to_vec();
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic_grad[i].abs().max(fd.abs()).max(1e-8);
        let rel = (analytic_grad[i] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradientCheckReport {
        checked_coords: coords,
        max_rel_error: max_rel,
        worst_coord: worst,
        tol,
    }
}

/// Hessian-vector product by central differences of the gradient:
/// (grad(theta + eps v) - grad(theta - eps v)) / (2 eps), evaluated along
/// the unit direction of `v` and rescaled, which is algebraically the same
/// and better conditioned for extreme |v|.
pub fn hessian_vector_product<G>(
    grad_fn: G,
    theta: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>, AutodiffError>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if theta.len() != v.len() {
        return Err(AutodiffError::DimensionMismatch(format!(
            "hvp: |theta| = {}, |v| = {}",
            theta.len(),
            v.len()
        )));
    }
    let vnorm = norm2(v);
    if vnorm == 0.0 {
        return Ok(vec![0.0; theta.len()]);
    }
    let unit: Vec<f64> = v.iter().map(|x| x / vnorm).collect();
    let mut plus = theta.to_vec();
    axpy(eps, &unit, &mut plus);
    let mut minus = theta.to_vec();
    axpy(-eps, &unit, &mut minus);
    let gp = grad_fn(&plus);
    let gm = grad_fn(&minus);
    assert_eq!(gp.len(), theta.len(), "gradient length mismatch");
    let scale = vnorm / (2.0 * eps);
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) * scale)
        .collect())
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradient on (H + damping * I) x = b, with H applied through a
/// matrix-free closure. Returns the best iterate with a `converged` flag;
/// non-finite arithmetic (e.g. an indefinite system without damping) is a
/// hard error.
pub fn conjugate_gradient_solve<A>(
    apply_h: A,
    b: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution, AutodiffError>
where
    A: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = apply_h(v);
        assert_eq!(out.len(), n, "apply_H must preserve dimension");
        if damping != 0.0 {
            axpy(damping, v, &mut out);
        }
        out
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rs_old = dot(&r, &r);

    let mut iterations = 0;
    let mut residual = 1.0;

    // On an SPD system the final iterate is optimal in the H-norm of the
    // error, so it is the best iterate to hand back when the residual
    // tolerance was not reached.
    for _ in 0..max_iter {
        let hp = apply(&p);
        let php = dot(&p, &hp);
        let alpha = rs_old / php;
        if !alpha.is_finite() {
            return Err(AutodiffError::NaNEncountered("conjugate gradient"));
        }
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &hp, &mut r);
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(AutodiffError::NaNEncountered("conjugate gradient"));
        }
        iterations += 1;
        residual = rs_new.sqrt() / b_norm;
        if residual < tol {
            return Ok(CgSolution {
                x,
                iterations,
                residual,
                converged: true,
            });
        }
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    Ok(CgSolution {
        x,
        iterations,
        residual,
        converged: false,
    })
}

//! Linear conjugate gradient for symmetric positive definite systems.
//!
//! Plain CG in f64, no preconditioner. Convergence is declared when
//! ‖r‖ ≤ rel_tol · ‖b‖ (checked before each iteration, so a perfect initial
//! guess performs zero iterations). Negative curvature pᵀAp ≤ 0 means the
//! matrix is not positive definite; the solve halts and keeps the best
//! iterate so far.

/// What a CG solve did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CgReport {
    pub iterations: usize,
    pub converged: bool,
    /// Negative curvature was encountered and the solve stopped early.
    pub indefinite: bool,
}

fn matvec(a: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &a[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for (av, xv) in row.iter().zip(x) {
            acc += av * xv;
        }
        *o = acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves A x = b for dense row-major A (n×n), starting from `x0`, with at
/// most `max_iterations` steps. When `trace` is given, every accepted
/// iterate is appended to it (the initial guess is not).
pub fn solve_dense(
    a: &[f64],
    n: usize,
    b: &[f64],
    x0: &[f64],
    max_iterations: usize,
    rel_tol: f64,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> (Vec<f64>, CgReport) {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    debug_assert_eq!(x0.len(), n);

    let mut x = x0.to_vec();
    let b_norm = dot(b, b).sqrt();
    let threshold = rel_tol * b_norm;

    let mut ax = vec![0.0; n];
    matvec(a, n, &x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bv, av)| bv - av).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);

    let mut report = CgReport {
        iterations: 0,
        converged: false,
        indefinite: false,
    };

    let mut ap = vec![0.0; n];
    for _ in 0..max_iterations {
        if rs.sqrt() <= threshold {
            report.converged = true;
            return (x, report);
        }
        matvec(a, n, &p, &mut ap);
        let p_ap = dot(&p, &ap);
        if p_ap <= 0.0 {
            report.indefinite = true;
            return (x, report);
        }
        let alpha = rs / p_ap;
        for j in 0..n {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rs_next = dot(&r, &r);
        let beta = rs_next / rs;
        for j in 0..n {
            p[j] = r[j] + beta * p[j];
        }
        rs = rs_next;
        report.iterations += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(x.clone());
        }
    }
    report.converged = rs.sqrt() <= threshold;
    (x, report)
}

//! Collapsed Gauss–Legendre product rules on the reference triangle and tet.
//!
//! The order is the number of Gauss points per collapsed axis. Order 1 is the
//! centroid rule. For order `n ≥ 2` the Duffy map turns the simplex into a
//! cube, so the rule integrates polynomials up to degree `2n − 3` exactly on
//! tets and `2n − 2` on triangles.

use std::f64::consts::PI;

/// Nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n > 0, "Gauss–Legendre rule needs at least one point");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// `(ξ₁, ξ₂, ξ₃, w)` on the reference tet; the weights sum to 1/6.
pub fn tet_rule(order: usize) -> Vec<([f64; 3], f64)> {
    assert!(order > 0, "quadrature order must be positive");
    if order == 1 {
        return vec![([0.25; 3], 1.0 / 6.0)];
    }
    let g = gauss_legendre(order);
    let mut out = Vec::with_capacity(order.pow(3));
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            for &(w, ww) in &g {
                let xi = [u, (1.0 - u) * v, (1.0 - u) * (1.0 - v) * w];
                out.push((xi, wu * wv * ww * (1.0 - u).powi(2) * (1.0 - v)));
            }
        }
    }
    out
}

/// `(ξ₁, ξ₂, w)` on the reference triangle; the weights sum to 1/2.
pub fn triangle_rule(order: usize) -> Vec<([f64; 2], f64)> {
    assert!(order > 0, "quadrature order must be positive");
    if order == 1 {
        return vec![([1.0 / 3.0; 2], 0.5)];
    }
    let g = gauss_legendre(order);
    let mut out = Vec::with_capacity(order * order);
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            out.push(([u, (1.0 - u) * v], wu * wv * (1.0 - u)));
        }
    }
    out
}

//! Beltrami coefficients of displacement-induced maps, the BC regularizer and
//! its gradient, numerical map inversion, and bijectivity diagnostics.
//!
//! For `f = (x + dx) + i (y + dy)` the complex partials are formed from
//! finite differences (central in the interior, one-sided first order at the
//! boundary, spacing 1 px):
//!
//! `f_z = (f_x - i f_y) / 2`, `f_zbar = (f_x + i f_y) / 2`, `mu = f_zbar / f_z`.
//!
//! Writing `f_x = p + iq`, `f_y = r + is`, one gets
//! `|mu|^2 = ((p-s)^2 + (q+r)^2) / ((p+s)^2 + (q-r)^2)` and the Jacobian
//! determinant `ps - qr = |f_z|^2 - |f_zbar|^2`, so `|mu| < 1` at a pixel is
//! the same statement as a positive Jacobian there.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;

/// Pixels with `|f_z|` at or below this are flagged degenerate.
pub const EPS_DENOM: f64 = 1e-8;

/// Magnitude used for degenerate pixels inside losses and `sup_mu`.
pub const MU_CLAMP: f64 = 10.0;

/// Default stopping tolerance for [`invert_field`], in pixels.
pub const DEFAULT_INVERT_TOL: f64 = 1e-3;

/// Default iteration cap for [`invert_field`].
pub const DEFAULT_INVERT_MAX_ITER: usize = 50;

/// Per-pixel Beltrami coefficient with a degeneracy mask.
#[derive(Debug, Clone)]
pub struct BeltramiField {
    pub mu: Array2<Complex64>,
    pub degenerate: Array2<bool>,
}

impl BeltramiField {
    pub fn dim(&self) -> (usize, usize) {
        self.mu.dim()
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    /// `|mu|` with degenerate pixels clamped to [`MU_CLAMP`].
    pub fn magnitude(&self) -> Array2<f64> {
        let mut out = self.mu.mapv(|m| m.norm());
        out.zip_mut_with(&self.degenerate, |v, &d| {
            if d {
                *v = MU_CLAMP;
            }
        });
        out
    }
}

/// Bijectivity summary of one displacement field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapDiagnostics {
    /// `||mu||_inf`; degenerate pixels count as [`MU_CLAMP`].
    pub sup_mu: f64,
    /// `(1 + sup_mu) / (1 - sup_mu)` when `sup_mu < 1`, else unbounded.
    pub dilation_k: Option<f64>,
    pub min_jacobian: f64,
    /// Pixels with a nonpositive Jacobian determinant.
    pub fold_count: usize,
    pub degenerate_count: usize,
}

/// x-derivative: central interior, one-sided at columns 0 and W-1.
pub(crate) fn diff_x(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        out[(y, 0)] = p[(y, 1)] - p[(y, 0)];
        for x in 1..w - 1 {
            out[(y, x)] = 0.5 * (p[(y, x + 1)] - p[(y, x - 1)]);
        }
        out[(y, w - 1)] = p[(y, w - 1)] - p[(y, w - 2)];
    }
    out
}

/// y-derivative twin of [`diff_x`].
pub(crate) fn diff_y(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for x in 0..w {
        out[(0, x)] = p[(1, x)] - p[(0, x)];
        out[(h - 1, x)] = p[(h - 1, x)] - p[(h - 2, x)];
    }
    for y in 1..h - 1 {
        for x in 0..w {
            out[(y, x)] = 0.5 * (p[(y + 1, x)] - p[(y - 1, x)]);
        }
    }
    out
}

/// Adjoint of [`diff_x`] (transpose of the stencil matrix).
pub(crate) fn diff_x_adjoint(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        out[(y, 0)] -= g[(y, 0)];
        out[(y, 1)] += g[(y, 0)];
        for x in 1..w - 1 {
            out[(y, x + 1)] += 0.5 * g[(y, x)];
            out[(y, x - 1)] -= 0.5 * g[(y, x)];
        }
        out[(y, w - 1)] += g[(y, w - 1)];
        out[(y, w - 2)] -= g[(y, w - 1)];
    }
    out
}

/// Adjoint of [`diff_y`].
pub(crate) fn diff_y_adjoint(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut out = Array2::zeros((h, w));
    for x in 0..w {
        out[(0, x)] -= g[(0, x)];
        out[(1, x)] += g[(0, x)];
        out[(h - 1, x)] += g[(h - 1, x)];
        out[(h - 2, x)] -= g[(h - 1, x)];
    }
    for y in 1..h - 1 {
        for x in 0..w {
            out[(y + 1, x)] += 0.5 * g[(y, x)];
            out[(y - 1, x)] -= 0.5 * g[(y, x)];
        }
    }
    out
}

struct Partials {
    p: Array2<f64>,
    q: Array2<f64>,
    r: Array2<f64>,
    s: Array2<f64>,
}

fn partials(field: &DisplacementField) -> Partials {
    Partials {
        p: diff_x(&field.dx) + 1.0,
        q: diff_x(&field.dy),
        r: diff_y(&field.dx),
        s: diff_y(&field.dy) + 1.0,
    }
}

/// Beltrami coefficient of the map induced by `field`.
pub fn beltrami(field: &DisplacementField) -> BeltramiField {
    let Partials { p, q, r, s } = partials(field);
    let (h, w) = field.dim();
    let mut mu = Array2::from_elem((h, w), Complex64::new(0.0, 0.0));
    let mut degenerate = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let fz = Complex64::new(p[(y, x)] + s[(y, x)], q[(y, x)] - r[(y, x)]) * 0.5;
            let fzbar = Complex64::new(p[(y, x)] - s[(y, x)], q[(y, x)] + r[(y, x)]) * 0.5;
            if fz.norm() <= EPS_DENOM {
                degenerate[(y, x)] = true;
            } else {
                mu[(y, x)] = fzbar / fz;
            }
        }
    }
    BeltramiField { mu, degenerate }
}

/// Pixel-mean of `|mu|^2` with degenerate pixels contributing
/// `MU_CLAMP^2`, plus its gradient with respect to the field components.
pub fn bc_term_with_grad(field: &DisplacementField) -> (f64, DisplacementField) {
    let Partials { p, q, r, s } = partials(field);
    let (h, w) = field.dim();
    let n = (h * w) as f64;
    let eps2 = 4.0 * EPS_DENOM * EPS_DENOM;

    let mut value = 0.0;
    let mut gp = Array2::zeros((h, w));
    let mut gq = Array2::zeros((h, w));
    let mut gr = Array2::zeros((h, w));
    let mut gs = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (pv, qv, rv, sv) = (p[(y, x)], q[(y, x)], r[(y, x)], s[(y, x)]);
            let a = (pv + sv) * (pv + sv) + (qv - rv) * (qv - rv);
            if a <= eps2 {
                value += MU_CLAMP * MU_CLAMP;
                continue;
            }
            let b = (pv - sv) * (pv - sv) + (qv + rv) * (qv + rv);
            let l = b / a;
            value += l;
            let scale = 2.0 / (a * n);
            gp[(y, x)] = scale * ((pv - sv) - l * (pv + sv));
            gs[(y, x)] = -scale * ((pv - sv) + l * (pv + sv));
            gq[(y, x)] = scale * ((qv + rv) - l * (qv - rv));
            gr[(y, x)] = scale * ((qv + rv) + l * (qv - rv));
        }
    }
    let grad_dx = diff_x_adjoint(&gp) + diff_y_adjoint(&gr);
    let grad_dy = diff_x_adjoint(&gq) + diff_y_adjoint(&gs);
    (
        value / n,
        DisplacementField {
            dx: grad_dx,
            dy: grad_dy,
        },
    )
}

/// Pixel-mean of `|mu|^2` for one field (degenerate pixels clamped).
pub fn bc_term(field: &DisplacementField) -> f64 {
    bc_term_with_grad(field).0
}

/// `(1/4T) sum_t (||mu(f_t)||_2^2 + ||mu(f_t^-1)||_2^2)` where the squared
/// norms are pixel means.
pub fn bc_loss(fields: &[DisplacementField], inverse_fields: &[DisplacementField]) -> Result<f64> {
    if fields.len() != inverse_fields.len() {
        return Err(CqcdError::DimensionMismatch(format!(
            "{} forward fields vs {} inverse fields",
            fields.len(),
            inverse_fields.len()
        )));
    }
    if fields.is_empty() {
        return Err(CqcdError::InvalidArgument("no fields".into()));
    }
    let t = fields.len() as f64;
    let total: f64 = fields
        .iter()
        .zip(inverse_fields.iter())
        .map(|(f, g)| bc_term(f) + bc_term(g))
        .sum();
    Ok(total / (4.0 * t))
}

/// Result of the fixed-point inversion.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub field: DisplacementField,
    pub converged: bool,
    pub iterations: usize,
    /// Max pixel update magnitude at the final iteration.
    pub residual: f64,
}

/// Inverts `f(x) = x + d(x)` by the fixed-point iteration
/// `g_{k+1}(y) = -d(y + g_k(y))`, starting from `g_0 = -d`. Converges when
/// the map is contractive (Lipschitz constant of `d` below 1); failure is
/// reported through the flag, never as an error.
pub fn invert_field(field: &DisplacementField, tol: f64, max_iter: usize) -> InversionResult {
    let (h, w) = field.dim();
    let mut g = DisplacementField {
        dx: -&field.dx,
        dy: -&field.dy,
    };
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let mut delta: f64 = 0.0;
        let mut next = DisplacementField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as f64 + g.dx[(y, x)], y as f64 + g.dy[(y, x)]);
                let (dx, dy) = field.sample(sx, sy);
                next.dx[(y, x)] = -dx;
                next.dy[(y, x)] = -dy;
                let ex = next.dx[(y, x)] - g.dx[(y, x)];
                let ey = next.dy[(y, x)] - g.dy[(y, x)];
                delta = delta.max((ex * ex + ey * ey).sqrt());
            }
        }
        g = next;
        residual = delta;
        if delta < tol {
            return InversionResult {
                field: g,
                converged: true,
                iterations,
                residual,
            };
        }
    }
    InversionResult {
        field: g,
        converged: false,
        iterations,
        residual,
    }
}

/// Inversion with the module defaults.
pub fn invert_field_default(field: &DisplacementField) -> InversionResult {
    invert_field(field, DEFAULT_INVERT_TOL, DEFAULT_INVERT_MAX_ITER)
}

/// Beltrami and Jacobian summary using the same stencils as [`beltrami`].
pub fn diagnostics(field: &DisplacementField) -> MapDiagnostics {
    let Partials { p, q, r, s } = partials(field);
    let bel = beltrami(field);
    let (h, w) = field.dim();
    let mut sup_mu: f64 = 0.0;
    let mut min_jacobian = f64::INFINITY;
    let mut fold_count = 0;
    for y in 0..h {
        for x in 0..w {
            let det = p[(y, x)] * s[(y, x)] - q[(y, x)] * r[(y, x)];
            min_jacobian = min_jacobian.min(det);
            if det <= 0.0 {
                fold_count += 1;
            }
            let m = if bel.degenerate[(y, x)] {
                MU_CLAMP
            } else {
                bel.mu[(y, x)].norm()
            };
            sup_mu = sup_mu.max(m);
        }
    }
    let dilation_k = if sup_mu < 1.0 {
        Some((1.0 + sup_mu) / (1.0 - sup_mu))
    } else {
        None
    };
    MapDiagnostics {
        sup_mu,
        dilation_k,
        min_jacobian,
        fold_count,
        degenerate_count: bel.degenerate_count(),
    }
}

/// Max round-trip error `|f(y + g(y)) - y|` over pixels at least `margin`
/// away from the boundary; a test oracle for inversion quality.
pub fn roundtrip_residual(
    field: &DisplacementField,
    inverse: &DisplacementField,
    margin: usize,
) -> f64 {
    let (h, w) = field.dim();
    let mut worst: f64 = 0.0;
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            let ix = x as f64 + inverse.dx[(y, x)];
            let iy = y as f64 + inverse.dy[(y, x)];
            let (dx, dy) = field.sample(ix, iy);
            let ex = ix + dx - x as f64;
            let ey = iy + dy - y as f64;
            worst = worst.max((ex * ex + ey * ey).sqrt());
        }
    }
    worst
}

/// Builds the displacement of the affine map `f(z) = a z + b zbar` on an
/// (h, w) grid; used by tests and the acceptance suite.
pub fn affine_field(h: usize, w: usize, a: Complex64, b: Complex64) -> DisplacementField {
    let mut f = DisplacementField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let z = Complex64::new(x as f64, y as f64);
            let fz = a * z + b * z.conj();
            f.dx[(y, x)] = fz.re - x as f64;
            f.dy[(y, x)] = fz.im - y as f64;
        }
    }
    f
}

//! 3x3 singular value decomposition.
//!
//! Jacobi rotations diagonalize `MᵀM`; they are applied one-sided to the
//! columns of `M·V` so the Gram matrix is never formed explicitly and small
//! singular values keep their relative accuracy.

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    /// Singular values, descending and non-negative.
    pub s: [f64; 3],
    pub v: Mat3,
}

const MAX_SWEEPS: usize = 64;

pub fn svd3(m: &Mat3) -> Svd3 {
    let norm = frobenius(m);
    if norm == 0.0 || !norm.is_finite() {
        return Svd3 { u: identity(), s: [0.0; 3], v: identity() };
    }
    // a = M / |M|, columns rotated in place; v accumulates the rotations
    let mut a = *m;
    for row in a.iter_mut() {
        for e in row.iter_mut() {
            *e /= norm;
        }
    }
    let mut v = identity();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for row in &a {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for mat in [&mut a, &mut v] {
                for row in mat.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let col_norm = |j: usize| (0..3).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
    let norms = [col_norm(0), col_norm(1), col_norm(2)];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_sorted = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let col = |mat: &Mat3, j: usize| [mat[0][j], mat[1][j], mat[2][j]];
    let tiny = 1e-13 * s_sorted[0];

    let u1 = scale3(col(&a, order[0]), 1.0 / s_sorted[0]);
    let u1 = normalize(u1);
    let u2 = if s_sorted[1] > tiny {
        let w = col(&a, order[1]);
        normalize(sub3(w, scale3(u1, dot(u1, w))))
    } else {
        any_perpendicular(u1)
    };
    let mut u3 = cross(u1, u2);
    if s_sorted[2] > tiny && dot(u3, col(&a, order[2])) < 0.0 {
        u3 = scale3(u3, -1.0);
    }

    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    for (j, uj) in [u1, u2, u3].iter().enumerate() {
        for i in 0..3 {
            u[i][j] = uj[i];
            vs[i][j] = v[i][order[j]];
        }
    }
    Svd3 { u, s: s_sorted.map(|x| x * norm), v: vs }
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn frobenius(m: &Mat3) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale3(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale3(a, 1.0 / dot(a, a).sqrt())
}

fn any_perpendicular(a: [f64; 3]) -> [f64; 3] {
    // cross with the axis least aligned with `a`
    let axis = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
        [1.0, 0.0, 0.0]
    } else if a[1].abs() <= a[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    normalize(cross(a, axis))
}

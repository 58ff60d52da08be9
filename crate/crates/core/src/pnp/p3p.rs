//! Grunert's P3P: law-of-cosines system reduced to a quartic in the depth
//! ratio, roots from the companion matrix, then Newton polishing on the
//! three distance equations and a Kabsch fit for the rotation.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{Correspondence2D3D, PnpError};
use crate::geom::{kabsch, CameraIntrinsics, Pose};

type Poly = Vec<f64>;

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], sb: f64) -> Poly {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += sb * y;
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> (f64, f64) {
    let (mut v, mut d) = (0.0, 0.0);
    for c in p.iter().rev() {
        d = d * x + v;
        v = v * x + c;
    }
    (v, d)
}

/// Real roots (ascending coefficients), Newton-polished.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-13 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -p[deg - 1 - i] / lead;
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    let mut roots = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-3 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (v, d) = poly_eval(&p[..=deg], x);
            if d == 0.0 {
                break;
            }
            let step = v / d;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        roots.push(x);
    }
    roots
}

/// Newton iterations on the three law-of-cosines equations in the depths.
fn polish_depths(s: &mut Vector3<f64>, cos: &Vector3<f64>, d2: &Vector3<f64>) {
    let f = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * cos[0] - d2[0],
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cos[1] - d2[1],
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cos[2] - d2[2],
        )
    };
    let mut r = f(s);
    for _ in 0..10 {
        let j = Matrix3::new(
            0.0,
            2.0 * s[1] - 2.0 * s[2] * cos[0],
            2.0 * s[2] - 2.0 * s[1] * cos[0],
            2.0 * s[0] - 2.0 * s[2] * cos[1],
            0.0,
            2.0 * s[2] - 2.0 * s[0] * cos[1],
            2.0 * s[0] - 2.0 * s[1] * cos[2],
            2.0 * s[1] - 2.0 * s[0] * cos[2],
            0.0,
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let cand = *s - step;
        let rc = f(&cand);
        if rc.norm() >= r.norm() {
            break;
        }
        *s = cand;
        r = rc;
    }
}

/// All real P3P solutions with the three points in front of the camera.
pub fn p3p_solve(sample: &[Correspondence2D3D; 3], intrinsics: &CameraIntrinsics) -> Result<Vec<Pose>, PnpError> {
    let x = [sample[0].point, sample[1].point, sample[2].point];
    let e1 = x[1] - x[0];
    let e2 = x[2] - x[0];
    if e1.cross(&e2).norm() <= 1e-10 * e1.norm() * e2.norm() || e1.norm() == 0.0 || e2.norm() == 0.0 {
        return Err(PnpError::Degenerate);
    }
    let j = [
        intrinsics.bearing(&sample[0].pixel).into_inner(),
        intrinsics.bearing(&sample[1].pixel).into_inner(),
        intrinsics.bearing(&sample[2].pixel).into_inner(),
    ];
    // Angles opposite each point: alpha between j2,j3; beta j1,j3; gamma j1,j2.
    let cos = Vector3::new(j[1].dot(&j[2]), j[0].dot(&j[2]), j[0].dot(&j[1]));
    if cos.iter().any(|c| *c > 1.0 - 1e-14) {
        return Err(PnpError::Degenerate);
    }
    let d2 = Vector3::new((x[1] - x[2]).norm_squared(), (x[0] - x[2]).norm_squared(), (x[0] - x[1]).norm_squared());
    let (ca, cb, cg) = (cos[0], cos[1], cos[2]);
    let (a2, b2, c2) = (d2[0], d2[1], d2[2]);

    // s2 = u s1, s3 = v s1 and u = N(v) / D(v).
    let k = (a2 - c2) / b2;
    let n = vec![1.0 + k, -2.0 * k * cb, k - 1.0];
    let d = vec![2.0 * cg, -2.0 * ca];
    let q = vec![1.0, -2.0 * cb, 1.0];
    let dd = poly_mul(&d, &d);
    let mut quartic = poly_add(&dd, &poly_mul(&n, &n), 1.0);
    quartic = poly_add(&quartic, &poly_mul(&n, &d), -2.0 * cg);
    quartic = poly_add(&quartic, &poly_mul(&q, &dd), -c2 / b2);

    let scale = d2.max().sqrt();
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&quartic) {
        let den = d[0] + d[1] * v;
        if v <= 0.0 || den.abs() < 1e-12 {
            continue;
        }
        let u = (n[0] + n[1] * v + n[2] * v * v) / den;
        let qv = 1.0 + v * v - 2.0 * v * cb;
        if u <= 0.0 || qv <= 0.0 {
            continue;
        }
        let s1 = (b2 / qv).sqrt();
        let mut s = Vector3::new(s1, u * s1, v * s1);
        polish_depths(&mut s, &cos, &d2);
        if s.iter().any(|si| *si <= 0.0) {
            continue;
        }
        let pc = [j[0] * s[0], j[1] * s[1], j[2] * s[2]];
        let Ok((r, t)) = kabsch(&x, &pc) else { continue };
        let fit = (0..3).map(|i| (r * x[i] + t - pc[i]).norm()).fold(0.0, f64::max);
        if fit > 1e-6 * scale {
            continue;
        }
        let pose = Pose::from_rt(r, t);
        let dup = poses.iter().any(|p| {
            (p.center() - pose.center()).norm() <= 1e-9 * (1.0 + scale) && (p.rotation() * pose.rotation().inverse()).angle_deg() < 1e-7
        });
        if !dup {
            poses.push(pose);
        }
    }
    Ok(poses)
}

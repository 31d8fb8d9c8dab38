//! Pose error metrics: MPJPE, Procrustes-aligned MPJPE and PCK.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{det, mat_mul, svd3, transpose, Mat3};
use crate::skeleton::Pose3D;

pub const DEFAULT_PCK_THRESHOLD: f64 = 150.0;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::invalid(format!(
            "prediction has {} joints, ground truth {}",
            pred.num_joints(),
            gt.num_joints()
        )));
    }
    Ok(())
}

/// Per-joint Euclidean errors in millimeters.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred.joints().iter().zip(gt.joints()).map(|(p, g)| dist(*p, *g)).collect())
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mpjpe_points(pred.joints(), gt.joints()))
}

/// MPJPE on raw point sets of equal length (no root constraint).
pub fn mpjpe_points(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "point sets differ in length");
    pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / pred.len() as f64
}

fn centroid(pts: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / pts.len() as f64)
}

/// `pred` after the similarity transform (rotation, uniform scale,
/// translation) that best fits it to `gt` in the least-squares sense.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<[f64; 3]>> {
    check_pair(pred, gt)?;
    procrustes_align_points(pred.joints(), gt.joints())
}

/// [`procrustes_align`] on raw point sets of equal length.
pub fn procrustes_align_points(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::invalid("point sets differ in length or are empty"));
    }
    let (x, y) = (gt, pred);
    let (mx, my) = (centroid(x), centroid(y));
    let x0: Vec<[f64; 3]> = x.iter().map(|p| [p[0] - mx[0], p[1] - mx[1], p[2] - mx[2]]).collect();
    let y0: Vec<[f64; 3]> = y.iter().map(|p| [p[0] - my[0], p[1] - my[1], p[2] - my[2]]).collect();
    let norm = |v: &[[f64; 3]]| v.iter().flatten().map(|c| c * c).sum::<f64>().sqrt();
    let (nx, ny) = (norm(&x0), norm(&y0));
    if nx < 1e-9 {
        return Err(Error::Degenerate("ground-truth joints are all coincident".into()));
    }
    if ny < 1e-12 {
        // A collapsed prediction can only be translated.
        return Ok(vec![mx; y.len()]);
    }

    // Cross-covariance Yᵀ X of the normalized point sets.
    let mut h: Mat3 = [[0.0; 3]; 3];
    for (p, q) in y0.iter().zip(&x0) {
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] += p[r] / ny * q[c] / nx;
            }
        }
    }
    let svd = svd3(&h);
    let mut u = svd.u;
    let mut s = svd.s;
    // Rotation R = U Vᵀ maps row vectors of Y onto X; flip the weakest axis to
    // exclude reflections.
    if det(&mat_mul(&u, &transpose(&svd.v))) < 0.0 {
        for row in u.iter_mut() {
            row[2] = -row[2];
        }
        s[2] = -s[2];
    }
    let r = mat_mul(&u, &transpose(&svd.v));
    let scale = (s[0] + s[1] + s[2]) * nx / ny;
    Ok(y0
        .iter()
        .map(|p| {
            let mut out = mx;
            for c in 0..3 {
                out[c] += scale * (p[0] * r[0][c] + p[1] * r[1][c] + p[2] * r[2][c]);
            }
            out
        })
        .collect())
}

/// Per-joint errors after Procrustes alignment.
pub fn p_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    let aligned = procrustes_align(pred, gt)?;
    Ok(aligned.iter().zip(gt.joints()).map(|(p, g)| dist(*p, *g)).collect())
}

pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = p_joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// P-MPJPE on raw point sets (no root constraint).
pub fn p_mpjpe_points(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    Ok(mpjpe_points(&procrustes_align_points(pred, gt)?, gt))
}

/// Percentage of joints whose error is strictly below `threshold` mm.
pub fn pck(pred: &Pose3D, gt: &Pose3D, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("PCK threshold must be positive, got {threshold}")));
    }
    let e = joint_errors(pred, gt)?;
    Ok(100.0 * e.iter().filter(|&&d| d < threshold).count() as f64 / e.len() as f64)
}

/// Dataset-level metrics, averaged over samples and joints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub pck_threshold: f64,
    pub per_joint_mpjpe: Vec<f64>,
    pub per_joint_p_mpjpe: Vec<f64>,
    pub per_joint_pck: Vec<f64>,
}

pub fn evaluate(preds: &[Pose3D], gts: &[Pose3D], threshold: f64) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground-truth poses", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no poses to evaluate"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("PCK threshold must be positive, got {threshold}")));
    }
    let n = gts[0].num_joints();
    let mut e = vec![0.0; n];
    let mut pe = vec![0.0; n];
    let mut hits = vec![0usize; n];
    for (p, g) in preds.iter().zip(gts) {
        let je = joint_errors(p, g)?;
        if je.len() != n {
            return Err(Error::invalid("poses disagree on joint count"));
        }
        let pj = p_joint_errors(p, g)?;
        for i in 0..n {
            e[i] += je[i];
            pe[i] += pj[i];
            hits[i] += usize::from(je[i] < threshold);
        }
    }
    let m = preds.len() as f64;
    let per_joint_mpjpe: Vec<f64> = e.iter().map(|v| v / m).collect();
    let per_joint_p_mpjpe: Vec<f64> = pe.iter().map(|v| v / m).collect();
    let per_joint_pck: Vec<f64> = hits.iter().map(|&h| 100.0 * h as f64 / m).collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    Ok(MetricReport {
        samples: preds.len(),
        mpjpe: avg(&per_joint_mpjpe),
        p_mpjpe: avg(&per_joint_p_mpjpe),
        pck: avg(&per_joint_pck),
        pck_threshold: threshold,
        per_joint_mpjpe,
        per_joint_p_mpjpe,
        per_joint_pck,
    })
}

/// Mean MPJPE over paired poses.
pub fn mean_mpjpe(preds: &[Pose3D], gts: &[Pose3D]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid("mean_mpjpe needs equally many, non-zero poses"));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += mpjpe(p, g)?;
    }
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(f: impl Fn(usize) -> [f64; 3]) -> Pose3D {
        Pose3D::new((0..17).map(|i| if i == 0 { [0.0; 3] } else { f(i) }).collect()).unwrap()
    }

    #[test]
    fn offset_of_3_4_0_gives_5() {
        let gt: Vec<[f64; 3]> = (0..17).map(|i| [i as f64 * 10.0, -(i as f64) * 7.0, 3.0 * i as f64]).collect();
        let shifted: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect();
        assert!((mpjpe_points(&shifted, &gt) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pck_counts_strictly_below_threshold() {
        let gt = pose(|i| [i as f64 * 20.0, 5.0, -3.0]);
        let mut j = gt.joints().to_vec();
        j[5][1] += 200.0;
        let pred = Pose3D::new(j.clone()).unwrap();
        assert!((pck(&pred, &gt, 150.0).unwrap() - 100.0 * 16.0 / 17.0).abs() < 1e-12);
        j[5] = gt.joints()[5];
        j[5][0] += 150.0;
        let boundary = Pose3D::new(j).unwrap();
        assert!((pck(&boundary, &gt, 150.0).unwrap() - 100.0 * 16.0 / 17.0).abs() < 1e-12);
        assert!(pck(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn coincident_ground_truth_is_degenerate() {
        let gt = pose(|_| [0.0; 3]);
        let pred = pose(|i| [i as f64, 0.0, 0.0]);
        assert!(matches!(p_mpjpe(&pred, &gt), Err(Error::Degenerate(_))));
    }

    #[test]
    fn report_fields_are_consistent() {
        let gt = pose(|i| [i as f64 * 20.0, (i % 3) as f64 * 30.0, -3.0 * i as f64]);
        let pred = pose(|i| [i as f64 * 21.0, (i % 4) as f64 * 30.0, 2.0 * i as f64]);
        let r = evaluate(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 150.0).unwrap();
        assert!((r.mpjpe - mpjpe(&pred, &gt).unwrap()).abs() < 1e-12);
        assert!(r.p_mpjpe <= r.mpjpe + 1e-9);
        assert!((0.0..=100.0).contains(&r.pck));
        assert_eq!(r.per_joint_mpjpe.len(), 17);
    }
}

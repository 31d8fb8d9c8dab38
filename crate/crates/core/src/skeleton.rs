//! The 17-joint skeleton, pose types, the pinhole camera and the synthetic
//! pose generator.
//!
//! Coordinates follow the camera convention: x right, y down, z away from the
//! camera. Poses are root-relative in millimeters; the camera places the root
//! (pelvis) `root_depth` millimeters in front of it on the optical axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 17;
pub const ROOT: usize = 0;
/// Largest admissible root-relative coordinate magnitude, in millimeters.
pub const MAX_COORD_MM: f64 = 2000.0;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(9),
    Some(8),
    Some(11),
    Some(12),
    Some(8),
    Some(14),
    Some(15),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    parent: Vec<Option<usize>>,
    adjacency: Vec<Vec<u8>>,
    names: Vec<String>,
}

pub fn make_skeleton() -> SkeletonGraph {
    SkeletonGraph::from_parents(PARENTS.to_vec(), JOINT_NAMES.iter().map(|s| s.to_string()).collect())
        .expect("built-in skeleton is a valid tree")
}

impl SkeletonGraph {
    /// Builds a skeleton from a parent array; exactly one joint must be the root
    /// and every joint must reach it.
    pub fn from_parents(parent: Vec<Option<usize>>, names: Vec<String>) -> Result<Self> {
        let n = parent.len();
        if names.len() != n {
            return Err(Error::invalid("joint name count differs from joint count"));
        }
        if parent.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(Error::invalid("skeleton needs exactly one root"));
        }
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = parent[j] {
                if p >= n || steps > n {
                    return Err(Error::invalid(format!("joint {start} does not reach the root")));
                }
                j = p;
                steps += 1;
            }
        }
        let mut adjacency = vec![vec![0u8; n]; n];
        for (j, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                adjacency[j][p] = 1;
                adjacency[p][j] = 1;
            }
        }
        Ok(Self { parent, adjacency, names })
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
            .collect()
    }

    /// Symmetrically normalized adjacency with self loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.num_joints();
        let mut a = vec![0.0; n * n];
        let deg: Vec<f64> = (0..n)
            .map(|i| 1.0 + self.adjacency[i].iter().map(|&x| x as f64).sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { self.adjacency[i][j] as f64 };
                a[i * n + j] = e / (deg[i] * deg[j]).sqrt();
            }
        }
        Tensor::from_parts(vec![n, n], a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::invalid("pose has no joints"));
        }
        if joints[ROOT] != [0.0, 0.0, 0.0] {
            return Err(Error::invalid(format!("root joint is {:?}, expected the origin", joints[ROOT])));
        }
        for (i, j) in joints.iter().enumerate() {
            if j.iter().any(|c| !c.is_finite() || c.abs() >= MAX_COORD_MM) {
                return Err(Error::invalid(format!("joint {i} coordinate {j:?} out of range")));
            }
        }
        Ok(Self { joints })
    }

    /// Re-roots arbitrary joint positions (root moved to the origin) and clamps
    /// coordinates into the admissible range.
    pub fn from_rerooted(mut joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::invalid("pose has no joints"));
        }
        let root = joints[ROOT];
        let limit = MAX_COORD_MM - 1e-6;
        for j in joints.iter_mut() {
            for k in 0..3 {
                let c = j[k] - root[k];
                if !c.is_finite() {
                    return Err(Error::invalid("non-finite joint coordinate"));
                }
                j[k] = c.clamp(-limit, limit);
            }
        }
        Ok(Self { joints })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::invalid(format!("expected [N,3] pose tensor, got {:?}", t.shape())));
        }
        Self::from_rerooted(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.joints.len(), 3], self.joints.iter().flatten().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    joints: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>) -> Result<Self> {
        if joints.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite 2D joint coordinate"));
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[[f64; 2]] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// True when every joint lies within four image extents of the frame.
    pub fn within_bounds(&self, camera: &Camera) -> bool {
        let (w, h) = (2.0 * camera.cx, 2.0 * camera.cy);
        self.joints
            .iter()
            .all(|[u, v]| *u > -4.0 * w && *u < 5.0 * w && *v > -4.0 * h && *v < 5.0 * h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Distance of the root joint from the camera along the optical axis, mm.
    pub root_depth: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self { fx: 1000.0, fy: 1000.0, cx: 500.0, cy: 500.0, root_depth: 5000.0 }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.root_depth];
        if all.iter().any(|v| !v.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("invalid camera intrinsics {self:?}")));
        }
        if self.root_depth <= MAX_COORD_MM {
            return Err(Error::invalid(format!(
                "root depth {} mm must exceed the maximum pose extent {MAX_COORD_MM} mm",
                self.root_depth
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.fx, self.fy, self.cx, self.cy, self.root_depth]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { fx: a[0], fy: a[1], cx: a[2], cy: a[3], root_depth: a[4] }
    }

    /// Projects one root-relative point.
    pub fn project_point(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let z = p[2] + self.root_depth;
        (z > 0.0).then(|| [self.fx * p[0] / z + self.cx, self.fy * p[1] / z + self.cy])
    }
}

/// Pinhole projection of a root-relative pose.
pub fn project(pose: &Pose3D, camera: &Camera) -> Result<Pose2D> {
    let joints = pose
        .joints()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            camera
                .project_point(p)
                .ok_or(Error::BehindCamera { joint: i, depth: p[2] + camera.root_depth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose2D { joints })
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` pixels per coordinate.
pub fn perturb2d(pose: &Pose2D, sigma: f64, stream: &mut RngStream) -> Result<Pose2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("detector noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(pose.clone());
    }
    let joints = pose
        .joints()
        .iter()
        .map(|[u, v]| [u + sigma * stream.normal(), v + sigma * stream.normal()])
        .collect();
    Ok(Pose2D { joints })
}

/// Per-bone sampling limits, indexed by the child joint of the bone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneSpec {
    /// Bone direction in the parent frame before any joint rotation.
    pub rest_dir: [f64; 3],
    /// Bone length range, mm.
    pub length: [f64; 2],
    /// Rotation range about the x axis (flexion), radians.
    pub flex: [f64; 2],
    /// Rotation range about the z axis (abduction), radians.
    pub abduct: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGenConfig {
    /// Entry `j` describes the bone from `parent(j)` to `j`; entry 0 is unused.
    pub bones: Vec<BoneSpec>,
    /// Body heading range about the vertical axis, radians.
    pub yaw: [f64; 2],
    /// Whole-body lean range about the x and z axes, radians.
    pub tilt: [f64; 2],
}

impl Default for PoseGenConfig {
    fn default() -> Self {
        let b = |rest_dir: [f64; 3], length: [f64; 2], flex: [f64; 2], abduct: [f64; 2]| BoneSpec {
            rest_dir,
            length,
            flex,
            abduct,
        };
        let (left, right, down, up) = ([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]);
        let pelvis = [-0.1, 0.1];
        let hip_flex = [-1.6, 0.5];
        let knee = [0.0, 2.0];
        let arm_flex = [-2.5, 1.0];
        let elbow = [-2.4, 0.0];
        let tiny = [-0.05, 0.05];
        let bones = vec![
            b([0.0; 3], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]),
            b(right, [110.0, 145.0], pelvis, pelvis),
            b(down, [380.0, 470.0], hip_flex, [-0.5, 0.3]),
            b(down, [370.0, 460.0], knee, tiny),
            b(left, [110.0, 145.0], pelvis, pelvis),
            b(down, [380.0, 470.0], hip_flex, [-0.3, 0.5]),
            b(down, [370.0, 460.0], knee, tiny),
            b(up, [200.0, 260.0], [-0.6, 0.3], [-0.3, 0.3]),
            b(up, [210.0, 270.0], [-0.3, 0.3], [-0.2, 0.2]),
            b(up, [90.0, 130.0], [-0.4, 0.4], [-0.3, 0.3]),
            b(up, [90.0, 130.0], [-0.4, 0.4], [-0.3, 0.3]),
            b(left, [130.0, 170.0], [-0.2, 0.2], [-0.2, 0.2]),
            b(down, [250.0, 310.0], arm_flex, [-0.2, 2.5]),
            b(down, [220.0, 280.0], elbow, [-0.1, 0.1]),
            b(right, [130.0, 170.0], [-0.2, 0.2], [-0.2, 0.2]),
            b(down, [250.0, 310.0], arm_flex, [-2.5, 0.2]),
            b(down, [220.0, 280.0], elbow, [-0.1, 0.1]),
        ];
        Self { bones, yaw: [-std::f64::consts::PI, std::f64::consts::PI], tilt: [-0.15, 0.15] }
    }
}

impl PoseGenConfig {
    pub fn validate(&self, skeleton: &SkeletonGraph) -> Result<()> {
        if self.bones.len() != skeleton.num_joints() {
            return Err(Error::invalid(format!(
                "pose generator describes {} bones for {} joints",
                self.bones.len(),
                skeleton.num_joints()
            )));
        }
        for (j, b) in self.bones.iter().enumerate().skip(1) {
            if !(b.length[0] > 0.0 && b.length[0] <= b.length[1]) {
                return Err(Error::invalid(format!("bone {j} length range {:?} must be positive", b.length)));
            }
            if b.flex[0] > b.flex[1] || b.abduct[0] > b.abduct[1] {
                return Err(Error::invalid(format!("bone {j} angle range is inverted")));
            }
        }
        let longest = longest_chain(skeleton, self);
        if longest >= MAX_COORD_MM {
            return Err(Error::invalid(format!("a kinematic chain can reach {longest} mm")));
        }
        Ok(())
    }
}

fn longest_chain(skeleton: &SkeletonGraph, cfg: &PoseGenConfig) -> f64 {
    (0..skeleton.num_joints())
        .map(|mut j| {
            let mut len = 0.0;
            while let Some(p) = skeleton.parent(j) {
                len += cfg.bones[j].length[1];
                j = p;
            }
            len
        })
        .fold(0.0, f64::max)
}

type Rot = [[f64; 3]; 3];

fn rot_x(a: f64) -> Rot {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Rot {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Rot {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rmul(a: &Rot, b: &Rot) -> Rot {
    crate::linalg::mat_mul(a, b)
}

fn rapply(r: &Rot, v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Samples a pose by forward kinematics: each joint rotates its bone within
/// the configured limits relative to the parent bone's frame.
pub fn generate_pose(stream: &mut RngStream, skeleton: &SkeletonGraph, cfg: &PoseGenConfig) -> Result<Pose3D> {
    cfg.validate(skeleton)?;
    let n = skeleton.num_joints();
    let root_rot = rmul(
        &rot_y(stream.uniform_range(cfg.yaw[0], cfg.yaw[1])),
        &rmul(
            &rot_x(stream.uniform_range(cfg.tilt[0], cfg.tilt[1])),
            &rot_z(stream.uniform_range(cfg.tilt[0], cfg.tilt[1])),
        ),
    );
    let mut frames: Vec<Rot> = vec![root_rot; n];
    let mut joints = vec![[0.0; 3]; n];
    // parents always precede children in the built-in ordering; general trees
    // are handled by resolving in dependency order
    let order = topo_order(skeleton);
    for &j in &order {
        let Some(p) = skeleton.parent(j) else { continue };
        let bone = &cfg.bones[j];
        let flex = stream.uniform_range(bone.flex[0], bone.flex[1]);
        let abduct = stream.uniform_range(bone.abduct[0], bone.abduct[1]);
        let length = stream.uniform_range(bone.length[0], bone.length[1]);
        let frame = rmul(&frames[p], &rmul(&rot_x(flex), &rot_z(abduct)));
        let dir = rapply(&frame, bone.rest_dir);
        joints[j] = [
            joints[p][0] + length * dir[0],
            joints[p][1] + length * dir[1],
            joints[p][2] + length * dir[2],
        ];
        frames[j] = frame;
    }
    Pose3D::new(joints)
}

fn topo_order(skeleton: &SkeletonGraph) -> Vec<usize> {
    let n = skeleton.num_joints();
    let depth = |mut j: usize| {
        let mut d = 0;
        while let Some(p) = skeleton.parent(j) {
            j = p;
            d += 1;
        }
        d
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth(j), j));
    order
}

/// Euclidean bone lengths, indexed by child joint (root entry is 0).
pub fn bone_lengths(pose: &Pose3D, skeleton: &SkeletonGraph) -> Vec<f64> {
    (0..skeleton.num_joints())
        .map(|j| match skeleton.parent(j) {
            None => 0.0,
            Some(p) => {
                let (a, b) = (pose.joints()[j], pose.joints()[p]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            }
        })
        .collect()
}

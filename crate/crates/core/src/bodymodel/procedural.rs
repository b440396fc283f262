//! Low-poly procedural body built from elliptical vertex rings.
//!
//! Every joint owns a ring centred on it and skinned entirely to it, and the
//! regressor averages that ring, so regressed joints coincide with the
//! kinematic joint origins under any pose. Each bone gets two interior rings
//! and each leaf joint a tip ring.

use nalgebra::Vector3;

use super::{ModelAsset, JOINT_NAMES, NUM_BETAS, NUM_JOINTS, PARENTS};

const RING: usize = 6;
const RING_PHASE: f64 = 0.35;
const BULGE: f64 = 0.3;
const SPACING_JITTER: f64 = 0.35;

/// T-pose joint positions (meters); y up, facing +z, subject's left on +x.
const REST: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.46, 0.01],
    [-0.10, -0.46, 0.01],
    [0.0, 0.24, 0.0],
    [0.10, -0.86, -0.03],
    [-0.10, -0.86, -0.03],
    [0.0, 0.30, 0.01],
    [0.11, -0.92, 0.10],
    [-0.11, -0.92, 0.10],
    [0.0, 0.50, -0.02],
    [0.07, 0.42, 0.0],
    [-0.07, 0.42, 0.0],
    [0.0, 0.58, 0.03],
    [0.18, 0.45, -0.01],
    [-0.18, 0.45, -0.01],
    [0.44, 0.44, -0.02],
    [-0.44, 0.44, -0.02],
    [0.69, 0.44, 0.0],
    [-0.69, 0.44, 0.0],
    [0.77, 0.43, 0.0],
    [-0.77, 0.43, 0.0],
];

const RADIUS: [f64; NUM_JOINTS] = [
    0.14, 0.085, 0.085, 0.13, 0.055, 0.055, 0.13, 0.04, 0.04, 0.14, 0.035, 0.035, 0.05, 0.05, 0.05, 0.085, 0.05, 0.05, 0.04,
    0.04, 0.03, 0.03, 0.035, 0.035,
];

/// Leaf joint → (tip position, tip radius).
const TIPS: [(usize, [f64; 3], f64); 5] = [
    (10, [0.11, -0.93, 0.17], 0.025),
    (11, [-0.11, -0.93, 0.17], 0.025),
    (15, [0.0, 0.75, 0.03], 0.06),
    (22, [0.85, 0.43, 0.0], 0.02),
    (23, [-0.85, 0.43, 0.0], 0.02),
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Torso,
    Head,
    Arm,
    Leg,
}

fn part_of(joint: usize) -> Part {
    match joint {
        0 | 3 | 6 | 9 | 12 | 13 | 14 => Part::Torso,
        15 => Part::Head,
        16..=23 => Part::Arm,
        _ => Part::Leg,
    }
}

struct RingVertex {
    pos: Vector3<f64>,
    /// Offset from the ring centre.
    radial: Vector3<f64>,
    owner: usize,
    skin: Vec<(usize, f64)>,
}

fn ring(center: Vector3<f64>, axis: Vector3<f64>, radius: f64, owner: usize, skin: Vec<(usize, f64)>) -> Vec<RingVertex> {
    let d = axis.normalize();
    let seed = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let u = (seed - d * d.dot(&seed)).normalize();
    let w = d.cross(&u);
    (0..RING)
        .map(|k| {
            // Uneven spacing and a one-sided bulge: an evenly spaced ring
            // would look nearly the same after a sixth of a turn about the bone.
            let even = std::f64::consts::TAU * k as f64 / RING as f64;
            let phi = even + RING_PHASE + SPACING_JITTER * even.sin();
            let r = radius * (1.0 + BULGE * phi.cos());
            let radial = u * (0.7 * r * phi.cos()) + w * (r * phi.sin());
            RingVertex { pos: center + radial, radial, owner, skin: skin.clone() }
        })
        .collect()
}

fn main_child(j: usize) -> Option<usize> {
    match j {
        0 => Some(3),
        9 => Some(12),
        _ => (0..NUM_JOINTS).find(|&c| PARENTS[c] == j as i64),
    }
}

fn blendshapes(v: &RingVertex, rest: &[Vector3<f64>]) -> [[f64; NUM_BETAS]; 3] {
    let p = v.pos;
    let q = v.radial;
    let part = part_of(v.owner);
    let zero = Vector3::zeros();
    let dirs: [Vector3<f64>; NUM_BETAS] = [
        // stature
        Vector3::new(0.0, 0.06 * p.y, 0.0),
        // overall girth
        q * 0.25,
        // shoulder/hip width
        Vector3::new(0.06 * p.x, 0.0, 0.0),
        // front-back depth
        Vector3::new(0.0, 0.0, 0.3 * q.z),
        // arm length
        if part == Part::Arm { Vector3::new(0.1 * (p.x - p.x.signum() * 0.18), 0.0, 0.0) } else { zero },
        // leg length
        if part == Part::Leg { Vector3::new(0.0, 0.08 * (p.y + 0.08), 0.0) } else { zero },
        // torso girth
        if part == Part::Torso { q * 0.3 } else { zero },
        // limb girth
        if matches!(part, Part::Arm | Part::Leg) { q * 0.3 } else { zero },
        // head size
        if part == Part::Head { (p - rest[15]) * 0.2 } else { zero },
        // belly
        if part == Part::Torso && q.z > 0.0 { Vector3::new(0.0, 0.0, 0.05 * (-((p.y - 0.15) / 0.12).powi(2)).exp()) } else { zero },
    ];
    std::array::from_fn(|c| std::array::from_fn(|b| dirs[b][c]))
}

pub(super) fn build() -> ModelAsset {
    let rest: Vec<Vector3<f64>> = REST.iter().map(|p| Vector3::from(*p)).collect();
    let mut verts: Vec<RingVertex> = Vec::new();
    let mut joint_ring = [0usize; NUM_JOINTS];
    let mut chains: Vec<Vec<usize>> = Vec::new();

    for j in 0..NUM_JOINTS {
        let axis = match (main_child(j), PARENTS[j]) {
            (Some(c), _) => rest[c] - rest[j],
            (None, p) => rest[j] - rest[p as usize],
        };
        joint_ring[j] = verts.len() / RING;
        verts.extend(ring(rest[j], axis, RADIUS[j], j, vec![(j, 1.0)]));
    }
    for c in 1..NUM_JOINTS {
        let p = PARENTS[c] as usize;
        let axis = rest[c] - rest[p];
        let mut chain = vec![joint_ring[p]];
        for (s, skin) in [(1.0 / 3.0, vec![(p, 1.0)]), (2.0 / 3.0, vec![(p, 0.7), (c, 0.3)])] {
            let center = rest[p] + axis * s;
            let radius = RADIUS[p] * (1.0 - s) + RADIUS[c] * s;
            chain.push(verts.len() / RING);
            verts.extend(ring(center, axis, radius, p, skin));
        }
        chain.push(joint_ring[c]);
        chains.push(chain);
    }
    for (leaf, tip, radius) in TIPS {
        let tip = Vector3::from(tip);
        chains.push(vec![joint_ring[leaf], verts.len() / RING]);
        verts.extend(ring(tip, tip - rest[leaf], radius, leaf, vec![(leaf, 1.0)]));
    }

    let mut faces = Vec::new();
    for chain in &chains {
        for pair in chain.windows(2) {
            let (a, b) = (pair[0] * RING, pair[1] * RING);
            for k in 0..RING {
                let k1 = (k + 1) % RING;
                faces.push([a + k, b + k, b + k1]);
                faces.push([a + k, b + k1, a + k1]);
            }
        }
    }

    let nv = verts.len();
    let mut regressor = vec![vec![0.0; nv]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        for k in 0..RING {
            regressor[j][joint_ring[j] * RING + k] = 1.0 / RING as f64;
        }
    }
    let skinning_weights = verts
        .iter()
        .map(|v| {
            let mut row = vec![0.0; NUM_JOINTS];
            for &(j, w) in &v.skin {
                row[j] = w;
            }
            row
        })
        .collect();

    ModelAsset {
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        template_vertices: verts.iter().map(|v| [v.pos.x, v.pos.y, v.pos.z]).collect(),
        faces,
        parents: PARENTS.to_vec(),
        joint_regressor: regressor,
        shape_blendshapes: verts.iter().map(|v| blendshapes(v, &rest)).collect(),
        skinning_weights,
    }
}

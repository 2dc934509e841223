//! The fixed 15-joint skeleton shared by every stage.
//!
//! Joint order: pelvis, neck, head, left shoulder/elbow/wrist, right
//! shoulder/elbow/wrist, left hip/knee/ankle, right hip/knee/ankle. The edge
//! list is a tree rooted at the pelvis, listed so every parent appears before
//! its children.

pub const NUM_JOINTS: usize = 15;
pub const NUM_EDGES: usize = NUM_JOINTS - 1;
pub const NUM_TORSO: usize = 7;

pub const PELVIS: usize = 0;
pub const NECK: usize = 1;
pub const HEAD: usize = 2;
pub const L_SHOULDER: usize = 3;
pub const L_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_SHOULDER: usize = 6;
pub const R_ELBOW: usize = 7;
pub const R_WRIST: usize = 8;
pub const L_HIP: usize = 9;
pub const L_KNEE: usize = 10;
pub const L_ANKLE: usize = 11;
pub const R_HIP: usize = 12;
pub const R_KNEE: usize = 13;
pub const R_ANKLE: usize = 14;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

/// (parent, child) pairs in root-outward order.
pub const EDGES: [(usize, usize); NUM_EDGES] = [
    (PELVIS, NECK),
    (NECK, HEAD),
    (NECK, L_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (NECK, R_SHOULDER),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (PELVIS, L_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (PELVIS, R_HIP),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
];

/// Torso joints in root-depth channel order.
pub const TORSO: [usize; NUM_TORSO] = [PELVIS, NECK, HEAD, L_SHOULDER, R_SHOULDER, L_HIP, R_HIP];

/// Left/right torso pairs, in root-depth search priority order.
pub const SYMMETRY_PAIRS: [(usize, usize); 2] = [(L_HIP, R_HIP), (L_SHOULDER, R_SHOULDER)];

/// Left/right pairs over the whole skeleton, used for mirroring.
pub const MIRROR_JOINTS: [(usize, usize); 6] = [
    (L_SHOULDER, R_SHOULDER),
    (L_ELBOW, R_ELBOW),
    (L_WRIST, R_WRIST),
    (L_HIP, R_HIP),
    (L_KNEE, R_KNEE),
    (L_ANKLE, R_ANKLE),
];

/// Skeleton topology as a value, for callers that want to walk it generically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonSpec {
    pub joint_names: Vec<&'static str>,
    pub edges: Vec<(usize, usize)>,
    pub torso_set: Vec<usize>,
    pub symmetry_pairs: Vec<(usize, usize)>,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self {
            joint_names: JOINT_NAMES.to_vec(),
            edges: EDGES.to_vec(),
            torso_set: TORSO.to_vec(),
            symmetry_pairs: SYMMETRY_PAIRS.to_vec(),
        }
    }
}

impl SkeletonSpec {
    /// Parent of every joint (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.joint_names.len()];
        for &(p, c) in &self.edges {
            parents[c] = Some(p);
        }
        parents
    }

    /// Index of the edge ending at `child`.
    pub fn edge_into(&self, child: usize) -> Option<usize> {
        self.edges.iter().position(|&(_, c)| c == child)
    }

    /// Channel index of `joint` in the root-depth maps.
    pub fn torso_channel(&self, joint: usize) -> Option<usize> {
        self.torso_set.iter().position(|&t| t == joint)
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |&&(p, _)| p == joint)
            .map(|&(_, c)| c)
    }

    /// Joints in depth-first order from the pelvis.
    pub fn dfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.joint_names.len());
        let mut stack = vec![PELVIS];
        while let Some(j) = stack.pop() {
            order.push(j);
            let mut kids: Vec<usize> = self.children(j).collect();
            kids.reverse();
            stack.extend(kids);
        }
        order
    }

    /// Mirror partner of a joint (itself for joints on the midline).
    pub fn mirror(joint: usize) -> usize {
        for &(l, r) in &MIRROR_JOINTS {
            if joint == l {
                return r;
            }
            if joint == r {
                return l;
            }
        }
        joint
    }
}

/// Index of the torso channel for `joint`, if it is a torso joint.
pub fn torso_channel(joint: usize) -> Option<usize> {
    TORSO.iter().position(|&t| t == joint)
}

/// Edge index whose child is `joint`.
pub fn edge_into(joint: usize) -> Option<usize> {
    EDGES.iter().position(|&(_, c)| c == joint)
}

/// Mirror partner of an edge.
pub fn mirror_edge(edge: usize) -> usize {
    let (p, c) = EDGES[edge];
    let (mp, mc) = (SkeletonSpec::mirror(p), SkeletonSpec::mirror(c));
    EDGES
        .iter()
        .position(|&e| e == (mp, mc))
        .expect("skeleton is left/right symmetric")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_form_a_tree_rooted_at_pelvis() {
        let spec = SkeletonSpec::default();
        assert_eq!(spec.joint_names.len(), NUM_JOINTS);
        assert_eq!(spec.edges.len(), NUM_JOINTS - 1);
        let parents = spec.parents();
        assert_eq!(parents[PELVIS], None);
        assert!(parents.iter().skip(1).all(Option::is_some));
        let mut order = spec.dfs_order();
        assert_eq!(order[0], PELVIS);
        order.sort_unstable();
        assert_eq!(order, (0..NUM_JOINTS).collect::<Vec<_>>());
        // parents precede children in the edge list
        for (i, &(p, _)) in EDGES.iter().enumerate() {
            if p != PELVIS {
                assert!(EDGES[..i].iter().any(|&(_, c)| c == p));
            }
        }
    }

    #[test]
    fn torso_and_symmetry() {
        let spec = SkeletonSpec::default();
        assert_eq!(spec.torso_set.len(), 7);
        for &(l, r) in &spec.symmetry_pairs {
            assert!(spec.torso_set.contains(&l) && spec.torso_set.contains(&r));
            assert!(JOINT_NAMES[l].starts_with("l_") && JOINT_NAMES[r].starts_with("r_"));
            assert_eq!(&JOINT_NAMES[l][2..], &JOINT_NAMES[r][2..]);
        }
        for e in 0..NUM_EDGES {
            assert_eq!(mirror_edge(mirror_edge(e)), e);
        }
    }
}

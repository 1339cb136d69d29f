use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint graph: one `(child, parent)` pair per joint, the root paired with itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joint_count: usize,
    bone_pairs: Vec<(usize, usize)>,
    root: usize,
}

/// NTU RGB+D 25-joint body, 1-based `(child, parent)` with the spine joint 21 as root.
const NTU25_PAIRS: [(usize, usize); 25] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (21, 21),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

impl SkeletonTopology {
    pub fn new(joint_count: usize, bone_pairs: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::InvalidTopology("no joints".into()));
        }
        if bone_pairs.len() != joint_count {
            return Err(Error::InvalidTopology(format!(
                "{} bone pairs for {joint_count} joints",
                bone_pairs.len()
            )));
        }
        if root >= joint_count {
            return Err(Error::InvalidTopology(format!("root {root} out of range")));
        }
        if let Some(&(i, j)) = bone_pairs.iter().find(|&&(i, j)| i >= joint_count || j >= joint_count) {
            return Err(Error::InvalidTopology(format!("pair ({i}, {j}) out of range")));
        }
        let mut parent = vec![usize::MAX; joint_count];
        for &(i, j) in &bone_pairs {
            if parent[i] != usize::MAX {
                return Err(Error::InvalidTopology(format!("joint {i} has two parents")));
            }
            parent[i] = j;
        }
        if parent[root] != root {
            return Err(Error::InvalidTopology(format!("root {root} must pair with itself")));
        }
        // every joint must reach the root; a walk longer than V means a cycle
        for start in 0..joint_count {
            let mut j = start;
            for _ in 0..joint_count {
                if j == root {
                    break;
                }
                j = parent[j];
            }
            if j != root {
                return Err(Error::InvalidTopology(format!("joint {start} does not reach the root")));
            }
        }
        Ok(Self {
            joint_count,
            bone_pairs,
            root,
        })
    }

    /// The NTU RGB+D 25-joint layout.
    pub fn ntu25() -> Self {
        let pairs = NTU25_PAIRS.iter().map(|&(i, j)| (i - 1, j - 1)).collect();
        Self::new(25, pairs, 20).expect("static NTU topology is valid")
    }

    /// Binary tree rooted at joint 0: the parent of joint `i` is `(i - 1) / 2`.
    pub fn tree(joint_count: usize) -> Self {
        let pairs = (0..joint_count)
            .map(|i| (i, if i == 0 { 0 } else { (i - 1) / 2 }))
            .collect();
        Self::new(joint_count, pairs, 0).expect("tree topology is valid")
    }

    /// `ntu25()` for 25 joints, `tree(v)` otherwise.
    pub fn default_for(joint_count: usize) -> Self {
        if joint_count == 25 {
            Self::ntu25()
        } else {
            Self::tree(joint_count)
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn bone_pairs(&self) -> &[(usize, usize)] {
        &self.bone_pairs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Parent of `joint`, if it appears as a child in some pair.
    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.bone_pairs.iter().find(|p| p.0 == joint).map(|p| p.1)
    }

    /// Symmetric 0/1 matrix (row-major `V x V`) with unit diagonal.
    pub fn adjacency(&self) -> Vec<f64> {
        let v = self.joint_count;
        let mut a = vec![0.0; v * v];
        for i in 0..v {
            a[i * v + i] = 1.0;
        }
        for &(i, j) in &self.bone_pairs {
            a[i * v + j] = 1.0;
            a[j * v + i] = 1.0;
        }
        a
    }

    /// `D^-1/2 A D^-1/2` of [`adjacency`](Self::adjacency).
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let v = self.joint_count;
        let a = self.adjacency();
        let inv_sqrt: Vec<f64> = (0..v)
            .map(|i| 1.0 / a[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
            .collect();
        let mut out = a;
        for i in 0..v {
            for j in 0..v {
                out[i * v + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        out
    }

    /// Relabel joints: old joint `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.joint_count {
            return Err(Error::InvalidTopology("permutation length mismatch".into()));
        }
        let pairs = self.bone_pairs.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Self::new(self.joint_count, pairs, perm[self.root])
    }
}

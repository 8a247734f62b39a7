use crate::error::{Error, Result};

/// Joint naming, left/right pairing and skeleton edges of a keypoint set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeypointLayout {
    pub names: &'static [&'static str],
    pub flip_pairs: &'static [(usize, usize)],
}

/// The 16-joint LIP/MPII ordering.
pub const FULL_BODY: KeypointLayout = KeypointLayout {
    names: &[
        "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "upper_neck", "head_top",
        "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    ],
    flip_pairs: &[(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)],
};

/// Eight joints used at reduced scale.
pub const COMPACT: KeypointLayout = KeypointLayout {
    names: &["head_top", "thorax", "r_wrist", "l_wrist", "r_knee", "l_knee", "r_ankle", "l_ankle"],
    flip_pairs: &[(2, 3), (4, 5), (6, 7)],
};

/// Indices into [`FULL_BODY`] of the [`COMPACT`] joints.
const COMPACT_FROM_FULL: [usize; 8] = [9, 7, 10, 15, 1, 4, 0, 5];

impl KeypointLayout {
    pub fn for_count(n: usize) -> Result<&'static KeypointLayout> {
        match n {
            16 => Ok(&FULL_BODY),
            8 => Ok(&COMPACT),
            other => Err(Error::InvalidConfig(format!(
                "no keypoint layout with {other} joints (supported: 16, 8)"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Joint index after a horizontal flip.
    pub fn mirror(&self, k: usize) -> usize {
        for &(a, b) in self.flip_pairs {
            if k == a {
                return b;
            }
            if k == b {
                return a;
            }
        }
        k
    }

    /// Picks this layout's joints out of a full 16-joint skeleton.
    pub fn select<T: Copy>(&self, full: &[T; 16]) -> Vec<T> {
        if self.len() == 16 {
            full.to_vec()
        } else {
            COMPACT_FROM_FULL.iter().map(|&i| full[i]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_an_involution_with_named_pairs() {
        for layout in [&FULL_BODY, &COMPACT] {
            for k in 0..layout.len() {
                let m = layout.mirror(k);
                assert_eq!(layout.mirror(m), k);
                if m != k {
                    let (a, b) = (layout.names[k], layout.names[m]);
                    assert_eq!(&a[2..], &b[2..], "{a} pairs with {b}");
                }
            }
        }
    }

    #[test]
    fn compact_selection_matches_names() {
        let picked = COMPACT.select(&FULL_BODY.names.try_into().unwrap());
        assert_eq!(picked, COMPACT.names);
    }
}

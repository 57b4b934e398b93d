//! Planar (sagittal) biped geometry and forward kinematics.
//!
//! The character moves in the world x–z plane (x forward, z up). Every link
//! carries an absolute angle measured counter-clockwise in that plane; a
//! link's angle is the root pitch plus the joint angles on its path from the
//! torso. Local link coordinates are `(forward, up)` in the link frame.

pub type Vec2 = [f64; 2];
pub type Vec3 = [f64; 3];

pub const N_LINKS: usize = 7;
pub const N_JOINTS: usize = 6;
/// Root x, root z, root pitch, then the joints.
pub const N_DOF: usize = 3 + N_JOINTS;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

#[inline]
pub fn rot(angle: f64, v: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Counter-clockwise quarter turn, the planar `ẑ × v`.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    [-v[1], v[0]]
}

#[inline]
pub fn lift(v: Vec2) -> Vec3 {
    [v[0], 0.0, v[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Joint driving this link relative to its parent; `None` for the torso,
    /// which is driven by the root pitch.
    pub joint: Option<usize>,
    /// Joint pivot in the parent frame.
    pub attach: Vec2,
    /// Centre of mass in the link frame.
    pub com: Vec2,
    pub mass: f64,
    /// Rotational inertia about the centre of mass.
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyPoint {
    pub name: &'static str,
    pub link: usize,
    pub local: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub links: Vec<Link>,
    pub keybodies: Vec<BodyPoint>,
    /// Sole points; `contact_feet[i]` says which foot (0 left, 1 right) point `i` belongs to.
    pub contact_points: Vec<BodyPoint>,
    pub contact_feet: Vec<usize>,
    pub nominal_root_height: f64,
}

/// World placement of every link: joint pivot and absolute angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFrames {
    pub origin: [Vec2; N_LINKS],
    pub angle: [f64; N_LINKS],
}

impl LinkFrames {
    #[inline]
    pub fn point(&self, link: usize, local: Vec2) -> Vec2 {
        let r = rot(self.angle[link], local);
        [self.origin[link][0] + r[0], self.origin[link][1] + r[1]]
    }
}

const THIGH: f64 = 0.42;
const SHANK: f64 = 0.42;
const SOLE: f64 = 0.06;

impl Default for Skeleton {
    fn default() -> Self {
        Self::biped()
    }
}

impl Skeleton {
    /// Torso, and per leg thigh, shank and foot. Keybodies: left foot, right
    /// foot, torso top.
    pub fn biped() -> Self {
        let leg = |side: &'static [&'static str; 3], base: usize, j0: usize| {
            vec![
                Link {
                    name: side[0],
                    parent: Some(0),
                    joint: Some(j0),
                    attach: [0.0, 0.0],
                    com: [0.0, -THIGH / 2.0],
                    mass: 6.0,
                    inertia: 6.0 * THIGH * THIGH / 12.0,
                },
                Link {
                    name: side[1],
                    parent: Some(base),
                    joint: Some(j0 + 1),
                    attach: [0.0, -THIGH],
                    com: [0.0, -SHANK / 2.0],
                    mass: 3.5,
                    inertia: 3.5 * SHANK * SHANK / 12.0,
                },
                Link {
                    name: side[2],
                    parent: Some(base + 1),
                    joint: Some(j0 + 2),
                    attach: [0.0, -SHANK],
                    com: [0.05, -0.03],
                    mass: 1.2,
                    inertia: 1.2 * 0.22 * 0.22 / 12.0,
                },
            ]
        };
        let mut links = vec![Link {
            name: "torso",
            parent: None,
            joint: None,
            attach: [0.0, 0.0],
            com: [0.0, 0.25],
            mass: 24.0,
            inertia: 24.0 * 0.5 * 0.5 / 12.0,
        }];
        links.extend(leg(&["left_thigh", "left_shank", "left_foot"], 1, 0));
        links.extend(leg(&["right_thigh", "right_shank", "right_foot"], 4, 3));

        let foot_point = |name, link| BodyPoint {
            name,
            link,
            local: [0.05, -SOLE],
        };
        let keybodies = vec![
            foot_point("left_foot", 3),
            foot_point("right_foot", 6),
            BodyPoint {
                name: "torso_top",
                link: 0,
                local: [0.0, 0.5],
            },
        ];
        let mut contact_points = Vec::new();
        let mut contact_feet = Vec::new();
        for (foot, link) in [(0, 3), (1, 6)] {
            for (name, x) in [("heel", -0.06), ("toe", 0.16)] {
                contact_points.push(BodyPoint {
                    name,
                    link,
                    local: [x, -SOLE],
                });
                contact_feet.push(foot);
            }
        }
        Self {
            links,
            keybodies,
            contact_points,
            contact_feet,
            nominal_root_height: THIGH + SHANK + SOLE,
        }
    }

    pub fn n_keybodies(&self) -> usize {
        self.keybodies.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub fn frames(&self, root: Vec2, pitch: f64, q: &[f64]) -> LinkFrames {
        debug_assert_eq!(q.len(), N_JOINTS);
        let mut origin = [[0.0; 2]; N_LINKS];
        let mut angle = [0.0; N_LINKS];
        for (i, link) in self.links.iter().enumerate() {
            match link.parent {
                None => {
                    origin[i] = root;
                    angle[i] = pitch;
                }
                Some(p) => {
                    let a = rot(angle[p], link.attach);
                    origin[i] = [origin[p][0] + a[0], origin[p][1] + a[1]];
                    angle[i] = angle[p] + link.joint.map_or(0.0, |j| q[j]);
                }
            }
        }
        LinkFrames { origin, angle }
    }

    /// Keybody world positions (lifted to 3-D with y = 0).
    pub fn keybody_positions(&self, root: Vec2, pitch: f64, q: &[f64]) -> Vec<Vec3> {
        let f = self.frames(root, pitch, q);
        self.keybodies
            .iter()
            .map(|kb| lift(f.point(kb.link, kb.local)))
            .collect()
    }

    /// Root height that puts the lowest sole point exactly on the ground.
    pub fn grounded_root_height(&self, pitch: f64, q: &[f64]) -> f64 {
        let f = self.frames([0.0, 0.0], pitch, q);
        let lowest = self
            .contact_points
            .iter()
            .map(|c| f.point(c.link, c.local)[1])
            .fold(f64::INFINITY, f64::min);
        -lowest
    }

    /// True if link `link` lies in the subtree moved by joint `joint`.
    pub fn joint_moves_link(&self, joint: usize, link: usize) -> bool {
        let mut cur = Some(link);
        while let Some(i) = cur {
            if self.links[i].joint == Some(joint) {
                return true;
            }
            cur = self.links[i].parent;
        }
        false
    }

    /// Index of the link driven by `joint`.
    pub fn joint_link(&self, joint: usize) -> usize {
        self.links
            .iter()
            .position(|l| l.joint == Some(joint))
            .expect("every joint drives a link")
    }
}

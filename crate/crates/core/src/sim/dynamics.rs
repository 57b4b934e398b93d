//! Reduced-coordinate planar rigid-body dynamics with penalty ground contact.
//!
//! Generalized coordinates are root x, root z, root pitch and the joint
//! angles. The joint-space mass matrix and bias forces are rebuilt from the
//! link Jacobians at every evaluation and the system is solved by Cholesky
//! factorization. Time stepping is velocity Verlet with the acceleration of
//! the previous sub-step carried over, so constant-acceleration motion (free
//! fall) is integrated exactly.

use crate::error::{Error, Result};
use crate::skeleton::{perp, rot, LinkFrames, Skeleton, Vec2, N_DOF, N_JOINTS, N_LINKS};

use super::model::{pd_torque, CharacterModel};
use super::randomize::RandomizationDraw;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams {
    /// Normal spring (N/m) and damper (N·s/m) per sole point.
    pub stiffness: f64,
    pub damping: f64,
    /// Tangential anchor spring and damper, capped by Coulomb friction.
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 1e5,
            damping: 300.0,
            tangential_stiffness: 2e4,
            tangential_damping: 400.0,
        }
    }
}

/// Dynamic state at physics resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsState {
    pub pos: [f64; N_DOF],
    pub vel: [f64; N_DOF],
    /// Acceleration evaluated at the end of the last sub-step.
    pub acc: [f64; N_DOF],
    /// Stick anchor (world x) of each sole point while it touches the ground.
    pub anchors: Vec<Option<f64>>,
    /// Normal force on each sole point at the last evaluation.
    pub normal_force: Vec<f64>,
}

impl PhysicsState {
    pub fn q(&self) -> &[f64] {
        &self.pos[3..]
    }

    pub fn qd(&self) -> &[f64] {
        &self.vel[3..]
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.vel).chain(&self.acc).all(|x| x.is_finite())
    }
}

/// Physical world for one episode: the character with its randomized
/// parameters, gravity, ground and contact model.
#[derive(Debug, Clone)]
pub struct World {
    pub skeleton: Skeleton,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub torque_limit: Vec<f64>,
    pub armature: Vec<f64>,
    pub strength: Vec<f64>,
    pub gravity: Vec2,
    pub ground: f64,
    pub friction: f64,
    pub contact: ContactParams,
    moves: [[bool; N_LINKS]; N_JOINTS],
    joint_link: [usize; N_JOINTS],
}

fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl World {
    pub fn new(model: &CharacterModel, draw: &RandomizationDraw, contact: ContactParams) -> Result<Self> {
        model.validate()?;
        if draw.motor_strength.len() != 2 * model.n_joints() {
            return Err(Error::DimensionMismatch {
                what: "motor strength".into(),
                expected: 2 * model.n_joints(),
                found: draw.motor_strength.len(),
            });
        }
        let mut skeleton = model.skeleton.clone();
        let torso = &mut skeleton.links[0];
        let scale = (torso.mass + draw.base_mass) / torso.mass;
        if !(scale > 0.0) {
            return Err(Error::Config("randomized torso mass is not positive".into()));
        }
        torso.mass *= scale;
        torso.inertia *= scale;
        torso.com = add(torso.com, draw.base_com);

        let mut moves = [[false; N_LINKS]; N_JOINTS];
        let mut joint_link = [0; N_JOINTS];
        for j in 0..N_JOINTS {
            joint_link[j] = skeleton.joint_link(j);
            for (l, m) in moves[j].iter_mut().enumerate() {
                *m = skeleton.joint_moves_link(j, l);
            }
        }
        Ok(Self {
            skeleton,
            kp: model.kp.clone(),
            kd: model.kd.clone(),
            torque_limit: model.torque_limit.clone(),
            armature: model.armature()?,
            strength: draw.motor_strength.clone(),
            gravity: [draw.gravity[0], -GRAVITY + draw.gravity[1]],
            ground: draw.terrain_height,
            friction: draw.friction,
            contact,
            moves,
            joint_link,
        })
    }

    pub fn frames(&self, pos: &[f64; N_DOF]) -> LinkFrames {
        self.skeleton.frames([pos[0], pos[1]], pos[2], &pos[3..])
    }

    pub fn state_at_rest(&self, pos: [f64; N_DOF], vel: [f64; N_DOF]) -> Result<PhysicsState> {
        let n = self.skeleton.contact_points.len();
        let mut s = PhysicsState {
            pos,
            vel,
            acc: [0.0; N_DOF],
            anchors: vec![None; n],
            normal_force: vec![0.0; n],
        };
        let tau = [0.0; N_JOINTS];
        s.acc = self.accelerations(&s.pos, &s.vel, &tau, &mut s.anchors, &mut s.normal_force)?;
        Ok(s)
    }

    fn angular_velocities(&self, vel: &[f64; N_DOF]) -> [f64; N_LINKS] {
        let mut w = [0.0; N_LINKS];
        for (i, link) in self.skeleton.links.iter().enumerate() {
            w[i] = match link.parent {
                None => vel[2],
                Some(p) => w[p] + link.joint.map_or(0.0, |j| vel[3 + j]),
            };
        }
        w
    }

    /// Jacobian of a world point rigidly attached to `link`.
    fn point_jacobian(&self, f: &LinkFrames, link: usize, p: Vec2) -> [Vec2; N_DOF] {
        let mut jac = [[0.0; 2]; N_DOF];
        jac[0] = [1.0, 0.0];
        jac[1] = [0.0, 1.0];
        jac[2] = perp(sub(p, f.origin[0]));
        for j in 0..N_JOINTS {
            if self.moves[j][link] {
                jac[3 + j] = perp(sub(p, f.origin[self.joint_link[j]]));
            }
        }
        jac
    }

    pub fn point_velocity(&self, pos: &[f64; N_DOF], vel: &[f64; N_DOF], link: usize, local: Vec2) -> Vec2 {
        let f = self.frames(pos);
        let p = f.point(link, local);
        let jac = self.point_jacobian(&f, link, p);
        let mut v = [0.0; 2];
        for (c, &qd) in jac.iter().zip(vel) {
            v[0] += c[0] * qd;
            v[1] += c[1] * qd;
        }
        v
    }

    /// Solve the equations of motion for the generalized accelerations.
    /// Contact anchors are updated in place.
    pub fn accelerations(
        &self,
        pos: &[f64; N_DOF],
        vel: &[f64; N_DOF],
        tau: &[f64],
        anchors: &mut [Option<f64>],
        normal_force: &mut [f64],
    ) -> Result<[f64; N_DOF]> {
        let f = self.frames(pos);
        let w = self.angular_velocities(vel);
        let mut mass = [[0.0; N_DOF]; N_DOF];
        let mut rhs = [0.0; N_DOF];

        // velocity-product acceleration of each link origin
        let mut origin_bias = [[0.0; 2]; N_LINKS];
        for (i, link) in self.skeleton.links.iter().enumerate() {
            let (angle_w, angle) = (w[i], f.angle[i]);
            if let Some(p) = link.parent {
                let r = rot(f.angle[p], link.attach);
                origin_bias[i] = sub(origin_bias[p], [w[p] * w[p] * r[0], w[p] * w[p] * r[1]]);
            }
            let r = rot(angle, link.com);
            let bias = sub(origin_bias[i], [angle_w * angle_w * r[0], angle_w * angle_w * r[1]]);
            let c = add(f.origin[i], r);
            let jac = self.point_jacobian(&f, i, c);
            let mut jw = [0.0; N_DOF];
            jw[2] = 1.0;
            for j in 0..N_JOINTS {
                if self.moves[j][i] {
                    jw[3 + j] = 1.0;
                }
            }
            let force = sub(self.gravity, bias);
            for a in 0..N_DOF {
                if jac[a] == [0.0, 0.0] && jw[a] == 0.0 {
                    continue;
                }
                rhs[a] += link.mass * dot(jac[a], force);
                for b in 0..N_DOF {
                    mass[a][b] += link.mass * dot(jac[a], jac[b]) + link.inertia * jw[a] * jw[b];
                }
            }
        }
        for j in 0..N_JOINTS {
            mass[3 + j][3 + j] += self.armature[j];
            rhs[3 + j] += tau[j];
        }

        let cp = self.contact;
        for (k, point) in self.skeleton.contact_points.iter().enumerate() {
            let p = f.point(point.link, point.local);
            let depth = self.ground - p[1];
            if depth <= 0.0 {
                anchors[k] = None;
                normal_force[k] = 0.0;
                continue;
            }
            let jac = self.point_jacobian(&f, point.link, p);
            let mut v = [0.0; 2];
            for (c, &qd) in jac.iter().zip(vel) {
                v[0] += c[0] * qd;
                v[1] += c[1] * qd;
            }
            let fn_ = (cp.stiffness * depth - cp.damping * v[1]).max(0.0);
            let anchor = *anchors[k].get_or_insert(p[0]);
            let mut ft = -cp.tangential_stiffness * (p[0] - anchor) - cp.tangential_damping * v[0];
            let cap = self.friction * fn_;
            if ft.abs() > cap {
                ft = ft.signum() * cap;
                anchors[k] = Some(p[0] + ft / cp.tangential_stiffness);
            }
            normal_force[k] = fn_;
            for a in 0..N_DOF {
                rhs[a] += jac[a][0] * ft + jac[a][1] * fn_;
            }
        }

        solve_spd(&mut mass, &mut rhs).ok_or(Error::SimulationDiverged)?;
        if rhs.iter().any(|x| !x.is_finite()) {
            return Err(Error::SimulationDiverged);
        }
        Ok(rhs)
    }

    /// PD torques towards `target`, or zero torque when `target` is `None`.
    pub fn joint_torques(&self, target: Option<&[f64]>, pos: &[f64; N_DOF], vel: &[f64; N_DOF]) -> [f64; N_JOINTS] {
        let mut tau = [0.0; N_JOINTS];
        if let Some(target) = target {
            pd_torque(
                target,
                &pos[3..],
                &vel[3..],
                &self.kp,
                &self.kd,
                &self.strength,
                &self.torque_limit,
                &mut tau,
            );
        }
        tau
    }

    /// Advance one physics sub-step of length `h`.
    pub fn substep(&self, s: &mut PhysicsState, target: Option<&[f64]>, h: f64) -> Result<()> {
        for i in 0..N_DOF {
            s.pos[i] += h * s.vel[i] + 0.5 * h * h * s.acc[i];
        }
        // Forces see the half-step velocity; a full-step prediction feeds
        // damping back into the cached acceleration as a period-2 mode.
        let mut v_pred = s.vel;
        for i in 0..N_DOF {
            v_pred[i] += 0.5 * h * s.acc[i];
        }
        let tau = self.joint_torques(target, &s.pos, &v_pred);
        let acc = self.accelerations(&s.pos, &v_pred, &tau, &mut s.anchors, &mut s.normal_force)?;
        for i in 0..N_DOF {
            s.vel[i] += 0.5 * h * (s.acc[i] + acc[i]);
        }
        s.acc = acc;
        if !s.is_finite() || s.pos.iter().chain(&s.vel).any(|x| x.abs() > 1e6) {
            return Err(Error::SimulationDiverged);
        }
        Ok(())
    }

    /// Kinetic plus gravitational potential energy (J).
    pub fn energy(&self, s: &PhysicsState) -> f64 {
        let f = self.frames(&s.pos);
        let w = self.angular_velocities(&s.vel);
        let mut e = 0.0;
        for (i, link) in self.skeleton.links.iter().enumerate() {
            let c = f.point(i, link.com);
            let v = self.point_velocity(&s.pos, &s.vel, i, link.com);
            e += 0.5 * link.mass * dot(v, v) + 0.5 * link.inertia * w[i] * w[i];
            e -= link.mass * dot(self.gravity, c);
        }
        for j in 0..N_JOINTS {
            e += 0.5 * self.armature[j] * s.vel[3 + j] * s.vel[3 + j];
        }
        e
    }

    /// Per-foot contact flags from the last evaluated normal forces.
    pub fn foot_contacts(&self, s: &PhysicsState) -> [bool; 2] {
        let mut out = [false; 2];
        for (k, &foot) in self.skeleton.contact_feet.iter().enumerate() {
            out[foot] |= s.normal_force[k] > 0.0;
        }
        out
    }
}

/// In-place Cholesky solve of a symmetric positive-definite system.
fn solve_spd(a: &mut [[f64; N_DOF]; N_DOF], b: &mut [f64; N_DOF]) -> Option<()> {
    for j in 0..N_DOF {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..N_DOF {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    for i in 0..N_DOF {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i][k] * b[k];
        }
        b[i] = s / a[i][i];
    }
    for i in (0..N_DOF).rev() {
        let mut s = b[i];
        for k in i + 1..N_DOF {
            s -= a[k][i] * b[k];
        }
        b[i] = s / a[i][i];
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::randomize::RandomizationDraw;

    fn world() -> World {
        World::new(&CharacterModel::biped(), &RandomizationDraw::nominal(N_JOINTS), ContactParams::default()).unwrap()
    }

    fn standing(w: &World) -> [f64; N_DOF] {
        let mut pos = [0.0; N_DOF];
        pos[1] = w.skeleton.nominal_root_height;
        pos
    }

    #[test]
    fn free_fall_matches_projectile() {
        let w = world();
        let mut pos = standing(&w);
        pos[1] = 5.0;
        pos[3] = 0.2;
        pos[4] = -0.4;
        let mut vel = [0.0; N_DOF];
        vel[0] = 1.5;
        vel[1] = 2.0;
        let mut s = w.state_at_rest(pos, vel).unwrap();
        let h = 0.002;
        for _ in 0..50 {
            w.substep(&mut s, None, h).unwrap();
        }
        let t = 0.1;
        assert!((s.pos[0] - 1.5 * t).abs() < 1e-6);
        assert!((s.pos[1] - (5.0 + 2.0 * t - 0.5 * GRAVITY * t * t)).abs() < 1e-6);
        assert!((s.pos[3] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn energy_is_conserved_without_contact() {
        let w = world();
        let mut pos = standing(&w);
        pos[1] = 50.0;
        let mut vel = [0.0; N_DOF];
        vel[2] = 1.0;
        vel[3] = 3.0;
        vel[4] = -2.0;
        vel[8] = 4.0;
        let mut s = w.state_at_rest(pos, vel).unwrap();
        let e0 = w.energy(&s);
        for _ in 0..500 {
            w.substep(&mut s, None, 0.002).unwrap();
        }
        let e1 = w.energy(&s);
        assert!(((e1 - e0) / e0).abs() < 0.01, "{e0} -> {e1}");
    }

    #[test]
    fn standing_penetration_is_small() {
        let w = world();
        let pos = standing(&w);
        let mut s = w.state_at_rest(pos, [0.0; N_DOF]).unwrap();
        let target = [0.0; N_JOINTS];
        for _ in 0..1500 {
            w.substep(&mut s, Some(&target), 0.002).unwrap();
        }
        let f = w.frames(&s.pos);
        let lowest = w
            .skeleton
            .contact_points
            .iter()
            .map(|c| f.point(c.link, c.local)[1])
            .fold(f64::INFINITY, f64::min);
        assert!(-lowest < 0.005, "penetration {}", -lowest);
        assert!(-lowest > 0.0);
        assert!(s.pos[0].abs() < 0.01 && s.vel.iter().all(|v| v.abs() < 1e-2), "{:?}", s.vel);
    }

    #[test]
    fn armature_never_speeds_up_joint() {
        let mut prev = f64::INFINITY;
        for arm in [0.0, 0.01, 0.05, 0.2, 1.0] {
            let mut w = world();
            w.gravity = [0.0, 0.0];
            w.armature = vec![arm; N_JOINTS];
            let mut pos = standing(&w);
            pos[1] = 10.0;
            let mut tau = [0.0; N_JOINTS];
            tau[1] = 20.0;
            let n = w.skeleton.contact_points.len();
            let acc = w
                .accelerations(&pos, &[0.0; N_DOF], &tau, &mut vec![None; n], &mut vec![0.0; n])
                .unwrap();
            assert!(acc[4].abs() <= prev);
            prev = acc[4].abs();
        }
    }

    #[test]
    fn spd_solver() {
        let mut a = [[0.0; N_DOF]; N_DOF];
        for i in 0..N_DOF {
            for j in 0..N_DOF {
                a[i][j] = if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) };
            }
        }
        let orig = a;
        let x: [f64; N_DOF] = std::array::from_fn(|i| i as f64 - 3.0);
        let mut b = [0.0; N_DOF];
        for i in 0..N_DOF {
            b[i] = (0..N_DOF).map(|j| orig[i][j] * x[j]).sum();
        }
        solve_spd(&mut a, &mut b).unwrap();
        assert!(b.iter().zip(&x).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}

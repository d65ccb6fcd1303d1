use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nafreach::sim::{
    equilibrium, estimate_motion_domain, muscle_force, net_force, rotate_y, DomainConfig, EnvGeometry, EnvKind,
    MuscleSpec, PhysicsConfig, SimState, TrajectoryWriter, Vec3,
};

fn geom(kind: EnvKind) -> EnvGeometry {
    EnvGeometry::new(kind, &PhysicsConfig::default()).unwrap()
}

fn six() -> EnvGeometry {
    geom(EnvKind::Circle2d { muscles: 6 })
}

#[test]
fn force_law_reference_values() {
    let spec = MuscleSpec::at(Vec3::zeros());
    assert_eq!(muscle_force(0.01, 0.0, 0.0, &spec).unwrap(), 0.0);
    assert_eq!(muscle_force(0.005, 0.0, 1.0, &spec).unwrap(), 0.0);
    assert!((muscle_force(0.015, 0.0, 1.0, &spec).unwrap() - 1.1).abs() < 1e-15);
    assert!((muscle_force(0.2, 0.0, 1.0, &spec).unwrap() - 1.1).abs() < 1e-15);
    assert!((muscle_force(0.2, 0.0, 0.5, &spec).unwrap() - 0.6).abs() < 1e-15);
    assert!((muscle_force(0.2, 0.3, 0.0, &spec).unwrap() - (0.1 + 0.03)).abs() < 1e-15);
    assert!((muscle_force(0.2, -0.3, 0.0, &spec).unwrap() - 0.1).abs() < 1e-15);
    assert!(muscle_force(0.0, 0.0, 0.0, &spec).is_err());
}

#[test]
fn zero_and_uniform_excitation_rest_at_center() {
    for kind in EnvKind::ALL {
        let g = geom(kind);
        for level in [0.0, 0.3, 1.0] {
            let mut s = SimState::at_rest(g.center(), g.n_muscles());
            let exc = vec![level; g.n_muscles()];
            for _ in 0..50 {
                s = g.step(&s, &exc).unwrap();
            }
            assert!((s.position - g.center()).norm() < 1e-12, "{kind} level {level}");
            assert!(s.velocity.norm() < 1e-12);
        }
        let eq = equilibrium(&vec![0.0; g.n_muscles()], &g, 1e-10).unwrap();
        assert!((eq - g.center()).norm() < 1e-12);
    }
}

/// Kinetic plus elastic energy. Saturated ramps make each passive tension a
/// constant force, whose potential is `f_pass * length`.
fn mechanical_energy(g: &EnvGeometry, s: &SimState) -> f64 {
    s.kinetic_energy(g.mass)
        + g.muscles
            .iter()
            .map(|m| m.f_pass_max * (m.anchor - s.position).norm())
            .sum::<f64>()
}

#[test]
fn unexcited_motion_dissipates_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [EnvKind::Circle2d { muscles: 6 }, EnvKind::Cuboid3d] {
        let g = geom(kind);
        for _ in 0..5 {
            let mut v = Vec3::new(rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5));
            if g.dim() == 3 {
                v.y = rng.random_range(-0.5..0.5);
            }
            let mut s = SimState::at_rest(g.center(), g.n_muscles());
            s.velocity = v;
            let zero = vec![0.0; g.n_muscles()];
            let e0 = mechanical_energy(&g, &s);
            let ke0 = s.kinetic_energy(g.mass);
            let mut prev = e0;
            for _ in 0..100 {
                s = g.step(&s, &zero).unwrap();
                let e = mechanical_energy(&g, &s);
                // Semi-implicit Euler carries an O(h) energy ripple.
                assert!(e <= prev + 1e-6 * e0, "{kind}: energy rose {prev} -> {e}");
                prev = e;
            }
            assert!(s.kinetic_energy(g.mass) < 1e-3 * ke0, "{kind}: motion did not decay");
        }
    }
}

#[test]
fn equilibrium_has_negligible_residual_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in EnvKind::ALL {
        let g = geom(kind);
        for _ in 0..5 {
            let exc: Vec<f64> = (0..g.n_muscles()).map(|_| rng.random()).collect();
            let p = equilibrium(&exc, &g, 1e-9).unwrap();
            let f = net_force(&g, &p, &Vec3::zeros(), &exc).unwrap();
            assert!(f.norm() < 1e-4, "{kind}: residual {}", f.norm());
        }
    }
}

/// Radius at which one fully excited muscle balances the passive pull of the
/// other five, found by bisection on the axial force balance.
fn single_muscle_radius() -> f64 {
    let (r_anchor, l_opt, flex) = (0.10, 0.01, 0.5);
    let ramp = |l: f64| ((l - l_opt) / (l_opt * flex)).clamp(0.0, 1.0);
    let axial = |r: f64| {
        let passive: f64 = (1..6)
            .map(|j| {
                let th = f64::from(j) * std::f64::consts::FRAC_PI_3;
                let dx = r_anchor * th.cos() - r;
                0.1 * dx / dx.hypot(r_anchor * th.sin())
            })
            .sum();
        1.1 * ramp(r_anchor - r) + passive
    };
    let (mut lo, mut hi) = (0.0, r_anchor - l_opt);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if axial(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn single_muscle_equilibria_match_force_balance() {
    let g = six();
    // Settled positions after 30 s with only muscle k fully excited.
    let pinned_radius = single_muscle_radius();
    for k in 0..6 {
        let mut exc = vec![0.0; 6];
        exc[k] = 1.0;
        let mut s = SimState::at_rest(g.center(), 6);
        for _ in 0..300 {
            s = g.step(&s, &exc).unwrap();
        }
        assert!(s.velocity.norm() < 1e-6, "muscle {k} still moving");
        let dir = g.muscles[k].anchor.normalize();
        let along = s.position.dot(&dir);
        let across = (s.position - dir * along).norm();
        assert!(across < 1e-9, "muscle {k}: off-axis by {across}");
        assert!((along - pinned_radius).abs() < 1e-9, "muscle {k}: {along} vs {pinned_radius}");
    }
}

#[test]
fn mirror_symmetric_excitation_stays_on_axis() {
    let g = six();
    // Anchors 1 and 5 mirror each other across the x axis; so do 2 and 4.
    let exc = [0.2, 0.7, 0.1, 0.0, 0.1, 0.7];
    let p = equilibrium(&exc, &g, 1e-11).unwrap();
    assert!(p.z.abs() < 1e-9 && p.y == 0.0, "{p:?}");
}

#[test]
fn rotated_frame_rotates_equilibrium() {
    let g = six();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let angle = rng.random_range(-3.0..3.0);
        let exc: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let p = equilibrium(&exc, &g, 1e-12).unwrap();
        let q = equilibrium(&exc, &g.rotated_about_y(angle), 1e-12).unwrap();
        assert!((rotate_y(&p, angle) - q).norm() < 1e-9, "angle {angle}");
    }
}

#[test]
fn trajectories_are_bit_deterministic() {
    let g = geom(EnvKind::Cuboid3d);
    let run = || {
        let mut s = SimState::at_rest(g.center(), 8);
        let mut out = Vec::new();
        for t in 0..40 {
            let exc: Vec<f64> = (0..8).map(|i| ((t * 7 + i * 3) % 10) as f64 / 9.0).collect();
            s = g.step(&s, &exc).unwrap();
            out.extend(s.position.iter().map(|v| v.to_bits()));
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn trajectory_csv_layout() {
    let g = six();
    let mut w = TrajectoryWriter::new(Vec::new(), 6).unwrap();
    let s = SimState::at_rest(g.center(), 6);
    w.write(&s).unwrap();
    let text = String::from_utf8(w.into_inner()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,px,py,pz,vx,vy,vz,a1,a2,a3,a4,a5,a6");
    assert_eq!(lines.next().unwrap().split(',').count(), 13);
}

#[test]
fn motion_domain_geometry() {
    let g = six();
    let d = estimate_motion_domain(&g, &DomainConfig::default()).unwrap();
    assert!(d.center.norm() < 1e-9);
    assert!(d.characteristic_length <= 0.2);
    assert!(d.characteristic_length > 0.1);
    for seed in [1, 2, 3] {
        let other = estimate_motion_domain(
            &g,
            &DomainConfig {
                seed,
                ..DomainConfig::default()
            },
        )
        .unwrap();
        let rel = (other.characteristic_length - d.characteristic_length).abs() / d.characteristic_length;
        assert!(rel < 0.02, "seed {seed}: {rel}");
    }
    let success_area = std::f64::consts::PI * (0.01 * d.characteristic_length).powi(2);
    assert!(success_area < 0.01 * d.measure);
}

/// Minimises `|sum_i (u_i f_max + f_pass) e_i|^2` over `u` in the unit box by
/// accelerated projected gradient descent, where `e_i` points from `p` to
/// anchor `i`. Zero residual means some excitation holds the mass at `p`.
fn box_least_squares_residual(g: &EnvGeometry, p: &Vec3) -> f64 {
    let dirs: Vec<Vec3> = g.muscles.iter().map(|m| (m.anchor - p).normalize()).collect();
    let base: Vec3 = g.muscles.iter().zip(&dirs).map(|(m, e)| e * m.f_pass_max).sum();
    let cols: Vec<Vec3> = g.muscles.iter().zip(&dirs).map(|(m, e)| e * m.f_max).collect();
    // Step 1/Lipschitz with the Frobenius norm bounding the spectral norm.
    let lip = 2.0 * cols.iter().map(|c| c.norm_squared()).sum::<f64>();
    let residual = |u: &[f64]| base + cols.iter().zip(u).map(|(c, a)| c * *a).sum::<Vec3>();
    let mut u = vec![0.5; cols.len()];
    let mut y = u.clone();
    let mut momentum: f64 = 1.0;
    let mut best = residual(&u).norm();
    for _ in 0..50_000 {
        let r = residual(&y);
        let next: Vec<f64> = y
            .iter()
            .zip(&cols)
            .map(|(yi, c)| (yi - 2.0 * c.dot(&r) / lip).clamp(0.0, 1.0))
            .collect();
        let norm = residual(&next).norm();
        if norm > best {
            // Restart the momentum whenever the objective rises.
            momentum = 1.0;
            y = u.clone();
            continue;
        }
        best = norm;
        if best < 1e-9 {
            break;
        }
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / m_next;
        y = next.iter().zip(&u).map(|(n, o)| (n + beta * (n - o)).clamp(0.0, 1.0)).collect();
        u = next;
        momentum = m_next;
    }
    best
}

#[test]
fn sampled_targets_lie_in_hull_and_are_reachable() {
    for kind in [EnvKind::Circle2d { muscles: 6 }, EnvKind::Cuboid3d] {
        let g = geom(kind);
        let d = estimate_motion_domain(&g, &DomainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = if kind == EnvKind::Cuboid3d { 2_000 } else { 10_000 };
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let t = d.sample_target(&mut rng).unwrap();
            assert!(d.contains(&t));
            if g.dim() == 2 {
                assert_eq!(t.y, 0.0);
                let hull = d.hull().unwrap();
                let inside = (0..hull.len()).all(|i| {
                    let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                    (b[0] - a[0]) * (t.z - a[1]) - (b[1] - a[1]) * (t.x - a[0]) >= 0.0
                });
                assert!(inside, "{t:?} outside hull");
            }
            worst = worst.max(box_least_squares_residual(&g, &t));
        }
        assert!(worst < 1e-6, "{kind}: unreachable target, residual {worst} N");
    }
}

proptest! {
    #[test]
    fn tension_is_nonnegative_and_monotone_in_excitation(
        l in 1e-4f64..0.5,
        l_dot in -10.0f64..10.0,
        a in 0.0f64..=1.0,
        da in 0.0f64..=1.0,
    ) {
        let spec = MuscleSpec::at(Vec3::zeros());
        let f = muscle_force(l, l_dot, a, &spec).unwrap();
        prop_assert!(f >= 0.0);
        let g = muscle_force(l, l_dot, (a + da).min(1.0), &spec).unwrap();
        prop_assert!(g >= f);
    }

    #[test]
    fn excitations_are_clamped_into_state(exc in prop::collection::vec(-2.0f64..3.0, 6)) {
        let g = six();
        let s = g.step(&SimState::at_rest(g.center(), 6), &exc).unwrap();
        prop_assert!(s.excitations.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

//! Motion-domain estimation and target sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{equilibrium, EnvGeometry, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    /// Random excitation vectors settled in addition to the single-muscle ones.
    pub random_samples: usize,
    /// Fraction by which the sampling region is pulled toward the rest point.
    pub shrink: f64,
    /// Required force slack (N) when testing that a target is reachable.
    pub reach_margin: f64,
    pub equilibrium_tol: f64,
    pub seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            random_samples: 200,
            shrink: 0.05,
            reach_margin: 0.01,
            equilibrium_tol: 1e-7,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
enum Region {
    /// Convex polygon in (x, z), counter-clockwise.
    Polygon(Vec<[f64; 2]>),
    Box { min: Vec3, max: Vec3 },
}

/// The set of positions the point mass can be held at.
#[derive(Debug, Clone)]
pub struct MotionDomain {
    pub dim: usize,
    /// Rest position with all excitations zero.
    pub center: Vec3,
    /// Largest distance between any two sampled equilibria.
    pub characteristic_length: f64,
    pub equilibria: Vec<Vec3>,
    /// Area (2D) or volume (3D) of the target region.
    pub measure: f64,
    region: Region,
    bounds: (Vec3, Vec3),
    reach: Reachability,
}

/// Static equilibrium test for saturated muscles.
///
/// With every muscle longer than its saturation length, tension is
/// `a f_max + f_pass` along the unit vector to the anchor, so a position is
/// an equilibrium for some `a` in `[0,1]^n` iff `-sum(f_pass u)` lies in the
/// zonotope generated by `f_max u`.
#[derive(Debug, Clone)]
struct Reachability {
    dim: usize,
    anchors: Vec<Vec3>,
    f_max: Vec<f64>,
    f_pass: Vec<f64>,
    min_length: Vec<f64>,
    margin: f64,
}

impl Reachability {
    fn new(geom: &EnvGeometry, margin: f64) -> Self {
        Reachability {
            dim: geom.dim(),
            anchors: geom.muscles.iter().map(|m| m.anchor).collect(),
            f_max: geom.muscles.iter().map(|m| m.f_max).collect(),
            f_pass: geom.muscles.iter().map(|m| m.f_pass_max).collect(),
            min_length: geom.muscles.iter().map(|m| m.saturation_length()).collect(),
            margin,
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        let mut gens = Vec::with_capacity(self.anchors.len());
        let mut b = Vec3::zeros();
        for (k, anchor) in self.anchors.iter().enumerate() {
            let r = anchor - p;
            let l = r.norm();
            if l <= self.min_length[k] * 1.05 {
                return false;
            }
            let u = r / l;
            gens.push(u * self.f_max[k]);
            b -= u * self.f_pass[k];
        }
        let normals: Vec<Vec3> = if self.dim == 2 {
            gens.iter()
                .map(|g| Vec3::new(-g.z, 0.0, g.x))
                .collect()
        } else {
            let mut ns = Vec::new();
            for i in 0..gens.len() {
                for j in i + 1..gens.len() {
                    ns.push(gens[i].cross(&gens[j]));
                }
            }
            ns
        };
        normals.iter().filter(|n| n.norm() > 1e-12).all(|n| {
            let n = n.normalize();
            [n, -n].iter().all(|n| {
                let support: f64 = gens.iter().map(|g| n.dot(g).max(0.0)).sum();
                n.dot(&b) <= support - self.margin
            })
        })
    }
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross2(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn in_convex_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    poly.len() >= 3
        && (0..poly.len()).all(|i| cross2(poly[i], poly[(i + 1) % poly.len()], p) >= 0.0)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    0.5 * (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        .abs()
}

/// Settles the point mass under every single-muscle full excitation and
/// `cfg.random_samples` random excitation vectors, then builds the target
/// region from the resulting equilibria.
pub fn estimate_motion_domain(geom: &EnvGeometry, cfg: &DomainConfig) -> Result<MotionDomain> {
    if !(0.0..1.0).contains(&cfg.shrink) {
        return Err(Error::config("domain.shrink", "shrink must lie in [0, 1)"));
    }
    let n = geom.n_muscles();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = equilibrium(&vec![0.0; n], geom, cfg.equilibrium_tol)?;

    let mut excitations: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..cfg.random_samples {
        excitations.push((0..n).map(|_| rng.random::<f64>()).collect());
    }
    let equilibria = excitations
        .iter()
        .map(|a| equilibrium(a, geom, cfg.equilibrium_tol))
        .collect::<Result<Vec<_>>>()?;

    let mut characteristic_length: f64 = 0.0;
    for (i, a) in equilibria.iter().enumerate() {
        for b in &equilibria[i + 1..] {
            characteristic_length = characteristic_length.max((a - b).norm());
        }
    }

    let pull = |p: &Vec3| center + (p - center) * (1.0 - cfg.shrink);
    let region = if geom.dim() == 2 {
        let hull = convex_hull(equilibria.iter().map(|p| [p.x, p.z]).collect());
        Region::Polygon(
            hull.iter()
                .map(|q| {
                    let p = pull(&Vec3::new(q[0], 0.0, q[1]));
                    [p.x, p.z]
                })
                .collect(),
        )
    } else {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in &equilibria {
            min = min.inf(p);
            max = max.sup(p);
        }
        Region::Box {
            min: pull(&min),
            max: pull(&max),
        }
    };
    let bounds = match &region {
        Region::Polygon(poly) => {
            let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
            for q in poly {
                let p = Vec3::new(q[0], 0.0, q[1]);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
            (lo, hi)
        }
        Region::Box { min, max } => (*min, *max),
    };

    let mut domain = MotionDomain {
        dim: geom.dim(),
        center,
        characteristic_length,
        equilibria,
        measure: 0.0,
        region,
        bounds,
        reach: Reachability::new(geom, cfg.reach_margin),
    };
    domain.measure = domain.estimate_measure(&mut rng, 20_000);
    Ok(domain)
}

impl MotionDomain {
    pub fn radius(&self) -> f64 {
        self.characteristic_length / 2.0
    }

    /// Whether `p` lies in the target region: inside the shrunk hull (2D) or
    /// box (3D) and statically reachable with margin.
    pub fn contains(&self, p: &Vec3) -> bool {
        let in_region = match &self.region {
            Region::Polygon(poly) => p.y == 0.0 && in_convex_polygon(poly, [p.x, p.z]),
            Region::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        };
        in_region && self.reach.contains(p)
    }

    /// Static reachability alone, without the region bound.
    pub fn reachable(&self, p: &Vec3) -> bool {
        self.reach.contains(p)
    }

    /// Corner points of the convex region (2D hull vertices in (x, z)).
    pub fn hull(&self) -> Option<&[[f64; 2]]> {
        match &self.region {
            Region::Polygon(p) => Some(p),
            Region::Box { .. } => None,
        }
    }

    fn draw_candidate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let (lo, hi) = self.bounds;
        let mut p = Vec3::zeros();
        for i in 0..3 {
            if self.dim == 2 && i == 1 {
                continue;
            }
            p[i] = lo[i] + (hi[i] - lo[i]) * rng.random::<f64>();
        }
        p
    }

    /// Uniform draw from the target region by rejection.
    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec3> {
        for _ in 0..1_000_000 {
            let p = self.draw_candidate(rng);
            if self.contains(&p) {
                return Ok(p);
            }
        }
        Err(Error::Simulation("target region is empty".into()))
    }

    fn estimate_measure<R: Rng + ?Sized>(&self, rng: &mut R, trials: usize) -> f64 {
        let (lo, hi) = self.bounds;
        let extent: f64 = (0..3)
            .filter(|&i| !(self.dim == 2 && i == 1))
            .map(|i| hi[i] - lo[i])
            .product();
        let hits = (0..trials)
            .filter(|_| self.contains(&self.draw_candidate(rng)))
            .count();
        extent * hits as f64 / trials as f64
    }

    /// Area of the shrunk hull; `None` in 3D.
    pub fn hull_area(&self) -> Option<f64> {
        self.hull().map(polygon_area)
    }
}

//! 2D Delaunay triangulation (Bowyer–Watson) with a compensated in-circle
//! predicate, plus triangle quality metrics.
//!
//! The in-circle test is evaluated in double-double arithmetic whenever the
//! f64 determinant falls inside the tie band, and cocircular ties (within a
//! 1e-9 relative tolerance) are treated as *outside* the circle. Points are
//! inserted in lexicographic order, so tie-breaking is deterministic and the
//! triangle set is invariant under relabeling of the input.

use crate::{Error, Result};

/// Relative tolerance under which the in-circle determinant counts as a tie.
pub const INCIRCLE_TIE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Double-double helpers (two-fold compensated arithmetic).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

#[inline]
fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: f64::mul_add(a, b, -p) }
}

impl Dd {
    #[inline]
    fn add(self, rhs: Dd) -> Dd {
        let s = two_sum(self.hi, rhs.hi);
        let t = two_sum(self.lo, rhs.lo);
        let mut lo = s.lo + t.hi;
        let r = quick_two_sum(s.hi, lo);
        lo = r.lo + t.lo;
        quick_two_sum(r.hi, lo)
    }

    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    fn sub(self, rhs: Dd) -> Dd {
        self.add(rhs.neg())
    }

    #[inline]
    fn mul(self, rhs: Dd) -> Dd {
        let p = two_prod(self.hi, rhs.hi);
        let lo = p.lo + self.hi * rhs.lo + self.lo * rhs.hi;
        quick_two_sum(p.hi, lo)
    }

    #[inline]
    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

#[inline]
fn two_diff(a: f64, b: f64) -> Dd {
    let s = a - b;
    let bb = s - a;
    let err = (a - (s - bb)) - (b + bb);
    Dd { hi: s, lo: err }
}

// ---------------------------------------------------------------------------
// Predicates.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirclePosition {
    Inside,
    OnCircle,
    Outside,
}

/// Sign of the in-circle determinant for CCW triangle `(a, b, c)` and query
/// `d`, with the tie band mapped to `OnCircle`.
pub fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> CirclePosition {
    let adx = a[0] - d[0];
    let ady = a[1] - d[1];
    let bdx = b[0] - d[0];
    let bdy = b[1] - d[1];
    let cdx = c[0] - d[0];
    let cdy = c[1] - d[1];

    let alift = adx * adx + ady * ady;
    let blift = bdx * bdx + bdy * bdy;
    let clift = cdx * cdx + cdy * cdy;

    let bxcy = bdx * cdy;
    let bycx = bdy * cdx;
    let cxay = cdx * ady;
    let cyax = cdy * adx;
    let axby = adx * bdy;
    let aybx = ady * bdx;

    let det = alift * (bxcy - bycx) + blift * (cxay - cyax) + clift * (axby - aybx);
    let permanent = alift * (bxcy.abs() + bycx.abs())
        + blift * (cxay.abs() + cyax.abs())
        + clift * (axby.abs() + aybx.abs());
    let tie = INCIRCLE_TIE_TOL * permanent;

    // Fast path: far from the tie band, the f64 sign is certain (the f64
    // roundoff is bounded by ~1e-14 * permanent, well inside the band).
    if det.abs() > 2.0 * tie + f64::MIN_POSITIVE {
        return if det > 0.0 { CirclePosition::Inside } else { CirclePosition::Outside };
    }

    let adx = two_diff(a[0], d[0]);
    let ady = two_diff(a[1], d[1]);
    let bdx = two_diff(b[0], d[0]);
    let bdy = two_diff(b[1], d[1]);
    let cdx = two_diff(c[0], d[0]);
    let cdy = two_diff(c[1], d[1]);

    let alift = adx.mul(adx).add(ady.mul(ady));
    let blift = bdx.mul(bdx).add(bdy.mul(bdy));
    let clift = cdx.mul(cdx).add(cdy.mul(cdy));

    let det = alift
        .mul(bdx.mul(cdy).sub(bdy.mul(cdx)))
        .add(blift.mul(cdx.mul(ady).sub(cdy.mul(adx))))
        .add(clift.mul(adx.mul(bdy).sub(ady.mul(bdx))))
        .value();

    if det.abs() <= tie {
        CirclePosition::OnCircle
    } else if det > 0.0 {
        CirclePosition::Inside
    } else {
        CirclePosition::Outside
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Ccw,
    Cw,
    Collinear,
}

pub fn orient2d(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Orientation {
    let l = (b[0] - a[0]) * (c[1] - a[1]);
    let r = (b[1] - a[1]) * (c[0] - a[0]);
    let det = l - r;
    let scale = l.abs() + r.abs();
    if det.abs() > 1e-12 * scale + f64::MIN_POSITIVE {
        return if det > 0.0 { Orientation::Ccw } else { Orientation::Cw };
    }
    let det = two_diff(b[0], a[0])
        .mul(two_diff(c[1], a[1]))
        .sub(two_diff(b[1], a[1]).mul(two_diff(c[0], a[0])))
        .value();
    if det == 0.0 {
        Orientation::Collinear
    } else if det > 0.0 {
        Orientation::Ccw
    } else {
        Orientation::Cw
    }
}

// ---------------------------------------------------------------------------
// Bowyer–Watson triangulation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [usize; 3],
    // Cached circumcircle (center, squared radius) for the cheap prefilter.
    cx: f64,
    cy: f64,
    r2: f64,
    alive: bool,
}

fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> (f64, f64, f64) {
    let d = 2.0 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]));
    if d == 0.0 {
        return (a[0], a[1], f64::INFINITY);
    }
    let b2 = (b[0] - a[0]) * (b[0] + a[0]) + (b[1] - a[1]) * (b[1] + a[1]);
    let c2 = (c[0] - a[0]) * (c[0] + a[0]) + (c[1] - a[1]) * (c[1] + a[1]);
    let ux = (b2 * (c[1] - a[1]) - c2 * (b[1] - a[1])) / d;
    let uy = (c2 * (b[0] - a[0]) - b2 * (c[0] - a[0])) / d;
    let r2 = (ux - a[0]) * (ux - a[0]) + (uy - a[1]) * (uy - a[1]);
    (ux, uy, r2)
}

/// Delaunay triangulation of a 2D point set.
///
/// Returns CCW triangles as indices into `points`. No point lies strictly
/// inside any triangle's circumcircle beyond the relative tie tolerance.
/// Fails with a degenerate-geometry error when fewer than 3 points are given,
/// all points are collinear, or two points coincide; callers that pool mesh
/// nodes fall back to a path of edges in the collinear case.
pub fn delaunay_remesh(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("triangulation needs ≥ 3 points, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| {
        points[p]
            .partial_cmp(&points[q])
            .expect("finite coordinates")
    });
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(Error::Degenerate(format!(
                "duplicate point at index {} and {}",
                w[0], w[1]
            )));
        }
    }
    let first = order[0];
    let last = order[n - 1];
    if order
        .iter()
        .all(|&k| orient2d(points[first], points[last], points[k]) == Orientation::Collinear)
    {
        return Err(Error::Degenerate("all points collinear".into()));
    }

    // Super-triangle far outside the data so it behaves like points at
    // infinity for the real point set.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        lo[0] = lo[0].min(p[0]);
        lo[1] = lo[1].min(p[1]);
        hi[0] = hi[0].max(p[0]);
        hi[1] = hi[1].max(p[1]);
    }
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let big = 1e5 * span;
    let sv = [
        [cx - 2.0 * big, cy - big],
        [cx + 2.0 * big, cy - big],
        [cx, cy + 2.0 * big],
    ];
    let coord = |v: usize| -> [f64; 2] {
        if v < n {
            points[v]
        } else {
            sv[v - n]
        }
    };

    let mut tris: Vec<Tri> = Vec::with_capacity(2 * n + 8);
    let push = |tris: &mut Vec<Tri>, a: usize, b: usize, c: usize, coord: &dyn Fn(usize) -> [f64; 2]| {
        let (pa, pb, pc) = (coord(a), coord(b), coord(c));
        let (cx, cy, r2) = circumcircle(pa, pb, pc);
        tris.push(Tri { v: [a, b, c], cx, cy, r2, alive: true });
    };
    push(&mut tris, n, n + 1, n + 2, &coord);

    let mut cavity: Vec<usize> = Vec::new();
    let mut boundary: Vec<(usize, usize)> = Vec::new();
    for &p in &order {
        let pp = points[p];
        cavity.clear();
        for (t, tri) in tris.iter().enumerate() {
            if !tri.alive {
                continue;
            }
            let d2 = (pp[0] - tri.cx) * (pp[0] - tri.cx) + (pp[1] - tri.cy) * (pp[1] - tri.cy);
            // Prefilter on the cached circumcircle; only near-ties reach the
            // compensated predicate.
            if d2 > tri.r2 * (1.0 + 1e-7) + 1e-300 {
                continue;
            }
            let strict = d2 < tri.r2 * (1.0 - 1e-7);
            let inside = if strict && tri.r2.is_finite() {
                true
            } else {
                incircle(coord(tri.v[0]), coord(tri.v[1]), coord(tri.v[2]), pp)
                    == CirclePosition::Inside
            };
            if inside {
                cavity.push(t);
            }
        }
        boundary.clear();
        for &t in &cavity {
            let v = tris[t].v;
            for (a, b) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                // An edge interior to the cavity appears once in each
                // direction; boundary edges appear exactly once overall.
                if let Some(pos) = boundary.iter().position(|&(x, y)| (x, y) == (b, a)) {
                    boundary.swap_remove(pos);
                } else {
                    boundary.push((a, b));
                }
            }
            tris[t].alive = false;
        }
        for &(a, b) in &boundary {
            push(&mut tris, a, b, p, &coord);
        }
    }

    let mut out: Vec<[usize; 3]> = Vec::new();
    for tri in &tris {
        if !tri.alive || tri.v.iter().any(|&v| v >= n) {
            continue;
        }
        let [a, b, c] = tri.v;
        match orient2d(points[a], points[b], points[c]) {
            Orientation::Ccw => out.push([a, b, c]),
            Orientation::Cw => out.push([a, c, b]),
            Orientation::Collinear => {}
        }
    }
    // Canonical form: lowest vertex first (preserving orientation), sorted.
    for t in &mut out {
        let k = (0..3).min_by_key(|&k| t[k]).unwrap();
        *t = [t[k], t[(k + 1) % 3], t[(k + 2) % 3]];
    }
    out.sort_unstable();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mesh quality.
// ---------------------------------------------------------------------------

/// Interior-angle statistics and mean scaled Jacobian over a triangle list.
///
/// The scaled Jacobian of a triangle is `(2/√3)·min_v sin(angle at v)`: 1 for
/// an equilateral triangle, 0 for a degenerate one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshQuality {
    pub num_triangles: usize,
    pub num_degenerate: usize,
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
    pub mean_scaled_jacobian: f64,
}

pub fn scaled_jacobian(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let la = dist(b, c);
    let lb = dist(a, c);
    let lc = dist(a, b);
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
    if la == 0.0 || lb == 0.0 || lc == 0.0 || area2 == 0.0 {
        return 0.0;
    }
    // sin(angle at a vertex) = 2*area / product of adjacent side lengths.
    let sin_a = area2 / (lb * lc);
    let sin_b = area2 / (la * lc);
    let sin_c = area2 / (la * lb);
    (2.0 / 3.0f64.sqrt()) * sin_a.min(sin_b).min(sin_c)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn mesh_quality(cells: &[[usize; 3]], coords: &[[f64; 2]]) -> MeshQuality {
    let mut q = MeshQuality {
        num_triangles: cells.len(),
        num_degenerate: 0,
        min_angle_deg: f64::INFINITY,
        max_angle_deg: f64::NEG_INFINITY,
        mean_scaled_jacobian: 0.0,
    };
    if cells.is_empty() {
        q.min_angle_deg = 0.0;
        q.max_angle_deg = 0.0;
        return q;
    }
    for cell in cells {
        let (a, b, c) = (coords[cell[0]], coords[cell[1]], coords[cell[2]]);
        let sj = scaled_jacobian(a, b, c);
        q.mean_scaled_jacobian += sj;
        if sj == 0.0 {
            q.num_degenerate += 1;
        }
        let (la, lb, lc) = (dist(b, c), dist(a, c), dist(a, b));
        if la > 0.0 && lb > 0.0 && lc > 0.0 {
            for (opp, s, t) in [(la, lb, lc), (lb, la, lc), (lc, la, lb)] {
                let cos = ((s * s + t * t - opp * opp) / (2.0 * s * t)).clamp(-1.0, 1.0);
                let ang = cos.acos().to_degrees();
                q.min_angle_deg = q.min_angle_deg.min(ang);
                q.max_angle_deg = q.max_angle_deg.max(ang);
            }
        } else {
            q.min_angle_deg = 0.0;
            q.max_angle_deg = 180.0f64.max(q.max_angle_deg);
        }
    }
    q.mean_scaled_jacobian /= cells.len() as f64;
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent oracle: circumcircle from the perpendicular-bisector
    /// solve; a violation is a point strictly inside by more than the
    /// relative tolerance.
    fn empty_circumcircle_violations(points: &[[f64; 2]], tris: &[[usize; 3]]) -> usize {
        let mut bad = 0;
        for t in tris {
            let (cx, cy, r2) = circumcircle(points[t[0]], points[t[1]], points[t[2]]);
            for (k, p) in points.iter().enumerate() {
                if t.contains(&k) {
                    continue;
                }
                let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
                if d2 < r2 * (1.0 - 1e-9) {
                    bad += 1;
                }
            }
        }
        bad
    }

    #[test]
    fn three_points_give_one_ccw_triangle() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let tris = delaunay_remesh(&pts).unwrap();
        assert_eq!(tris, vec![[0, 1, 2]]);
        assert_eq!(orient2d(pts[0], pts[1], pts[2]), Orientation::Ccw);
    }

    #[test]
    fn unit_square_splits_into_two_triangles() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let tris = delaunay_remesh(&pts).unwrap();
        assert_eq!(tris.len(), 2);
        assert_eq!(empty_circumcircle_violations(&pts, &tris), 0);
        // Deterministic: repeated runs choose the same diagonal.
        assert_eq!(tris, delaunay_remesh(&pts).unwrap());
    }

    #[test]
    fn collinear_points_error() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert!(matches!(delaunay_remesh(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn duplicate_points_error() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(delaunay_remesh(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grid_points_with_many_cocircular_ties() {
        let mut pts = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                pts.push([c as f64, r as f64]);
            }
        }
        let tris = delaunay_remesh(&pts).unwrap();
        assert_eq!(tris.len(), 2 * 5 * 5);
        assert_eq!(empty_circumcircle_violations(&pts, &tris), 0);
    }

    #[test]
    fn permutation_invariance_up_to_tie_break() {
        let mut rng = crate::rng_from_seed(3);
        let pts: Vec<[f64; 2]> =
            (0..40).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let base = delaunay_remesh(&pts).unwrap();

        let mut perm: Vec<usize> = (0..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&k| pts[k]).collect();
        let mut relabeled: Vec<[usize; 3]> = delaunay_remesh(&shuffled)
            .unwrap()
            .into_iter()
            .map(|t| {
                let mut m = [perm[t[0]], perm[t[1]], perm[t[2]]];
                let k = (0..3).min_by_key(|&k| m[k]).unwrap();
                m = [m[k], m[(k + 1) % 3], m[(k + 2) % 3]];
                m
            })
            .collect();
        relabeled.sort_unstable();
        assert_eq!(base, relabeled);
    }

    #[test]
    fn equilateral_scaled_jacobian_is_one() {
        let sj = scaled_jacobian([0.0, 0.0], [1.0, 0.0], [0.5, 3.0f64.sqrt() / 2.0]);
        assert!((sj - 1.0).abs() < 1e-12, "sj = {sj}");
    }

    #[test]
    fn right_isoceles_scaled_jacobian() {
        let sj = scaled_jacobian([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        let expected = (2.0 / 3.0f64.sqrt()) * (45.0f64.to_radians()).sin();
        assert!((sj - expected).abs() < 1e-12);
        assert!((expected - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn degenerate_triangle_scores_zero_and_is_flagged() {
        let q = mesh_quality(&[[0, 1, 2]], &[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(q.mean_scaled_jacobian, 0.0);
        assert_eq!(q.num_degenerate, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn random_point_sets_satisfy_empty_circumcircle(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
        ) {
            let points: Vec<[f64;2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            match delaunay_remesh(&points) {
                Ok(tris) => {
                    prop_assert!(!tris.is_empty());
                    prop_assert_eq!(empty_circumcircle_violations(&points, &tris), 0);
                    for t in &tris {
                        prop_assert_eq!(orient2d(points[t[0]], points[t[1]], points[t[2]]), Orientation::Ccw);
                    }
                }
                Err(Error::Degenerate(_)) => {} // collinear/duplicate draws
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
            }
        }
    }
}

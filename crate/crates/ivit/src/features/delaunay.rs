//! Delaunay neighbor graphs over nucleus centers.
//!
//! Bowyer-Watson incremental construction with a super-triangle. Degenerate
//! inputs (two points, or an entirely collinear set) fall back to the chain
//! convention: consecutive points along the line are neighbors.

use crate::error::{Error, Result};

/// Strictly-inside test against the circumcircle of (a, b, c).
/// The sign convention is fixed by orienting the triangle first.
fn in_circumcircle(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> bool {
    // orient so the determinant sign means "inside"
    let orient = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    if orient == 0.0 {
        return false;
    }
    let (ax, ay) = (a.0 - p.0, a.1 - p.1);
    let (bx, by) = (b.0 - p.0, b.1 - p.1);
    let (cx, cy) = (c.0 - p.0, c.1 - p.1);
    let det = (ax * ax + ay * ay) * (bx * cy - cx * by)
        - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay);
    if orient > 0.0 {
        det > 0.0
    } else {
        det < 0.0
    }
}

fn is_collinear(points: &[(f64, f64)]) -> bool {
    if points.len() < 3 {
        return true;
    }
    // direction = toward the point farthest from points[0]
    let (x0, y0) = points[0];
    let (mut dx, mut dy, mut best) = (0.0, 0.0, 0.0);
    for &(x, y) in &points[1..] {
        let d2 = (x - x0).powi(2) + (y - y0).powi(2);
        if d2 > best {
            best = d2;
            dx = x - x0;
            dy = y - y0;
        }
    }
    if best == 0.0 {
        return true;
    }
    points.iter().all(|&(x, y)| {
        let cross = (x - x0) * dy - (y - y0) * dx;
        cross.abs() <= 1e-9 * best
    })
}

/// Ghost vertex id: stands in for the point at infinity so hull edges carry
/// ghost triangles instead of a metric super-triangle (whose finite size
/// breaks thin hull triangles with huge circumcircles).
const GHOST: usize = usize::MAX;

fn orient(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn strictly_between(u: (f64, f64), v: (f64, f64), p: (f64, f64)) -> bool {
    let t = (p.0 - u.0) * (v.0 - u.0) + (p.1 - u.1) * (v.1 - u.1);
    t > 0.0 && t < (v.0 - u.0).powi(2) + (v.1 - u.1).powi(2)
}

/// Rotates a triangle so a ghost vertex, if any, sits in slot 2. Cyclic, so
/// orientation is preserved.
fn normalize(t: [usize; 3]) -> [usize; 3] {
    if t[0] == GHOST {
        [t[1], t[2], t[0]]
    } else if t[1] == GHOST {
        [t[2], t[0], t[1]]
    } else {
        t
    }
}

/// Neighbor sets of the Delaunay triangulation, sorted ascending per point.
pub fn delaunay_neighbors(points: &[(f64, f64)]) -> Result<Vec<Vec<usize>>> {
    if points.len() < 2 {
        return Err(Error::Contract {
            op: "delaunay_neighbors",
            msg: format!("need at least 2 points, got {}", points.len()),
        });
    }
    if is_collinear(points) {
        return Ok(chain_neighbors(points));
    }
    let n = points.len();

    // seed with a maximally robust non-degenerate triangle: the farthest
    // point from 0, then the point of largest triangle area with those two
    let i0 = 0usize;
    let mut i1 = 1;
    let mut best = 0.0;
    for (j, &q) in points.iter().enumerate().skip(1) {
        let d2 = (q.0 - points[0].0).powi(2) + (q.1 - points[0].1).powi(2);
        if d2 > best {
            best = d2;
            i1 = j;
        }
    }
    let mut i2 = usize::MAX;
    let mut best_area = 0.0;
    for (j, &q) in points.iter().enumerate() {
        if j == i0 || j == i1 {
            continue;
        }
        let a = orient(points[i0], points[i1], q).abs();
        if a > best_area {
            best_area = a;
            i2 = j;
        }
    }
    debug_assert!(i2 != usize::MAX, "non-collinear input must have a seed triangle");
    let (i1, i2) = if orient(points[i0], points[i1], points[i2]) > 0.0 { (i1, i2) } else { (i2, i1) };

    // counterclockwise seed triangle plus one ghost per hull edge, stored so
    // the finite triangulation lies right of the directed edge (u, v)
    let mut triangles: Vec<[usize; 3]> =
        vec![[i0, i1, i2], [i1, i0, GHOST], [i2, i1, GHOST], [i0, i2, GHOST]];

    for pt in 0..n {
        if pt == i0 || pt == i1 || pt == i2 {
            continue;
        }
        let p = points[pt];
        let (mut bad, mut keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) = (Vec::new(), Vec::new());
        for t in triangles.drain(..) {
            let in_disk = if t[2] == GHOST {
                // a ghost's "circumdisk" is the open half-plane beyond its
                // hull edge, plus the open edge itself
                let (u, v) = (points[t[0]], points[t[1]]);
                let o = orient(u, v, p);
                o > 0.0 || (o == 0.0 && strictly_between(u, v, p))
            } else {
                in_circumcircle(points[t[0]], points[t[1]], points[t[2]], p)
            };
            if in_disk {
                bad.push(t);
            } else {
                keep.push(t);
            }
        }
        // cavity boundary: directed edges whose reverse is not in the cavity
        // (consistent orientation makes shared edges cancel in pairs)
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for t in &bad {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if let Some(at) = edges.iter().position(|&(a, b)| (b, a) == e) {
                    edges.swap_remove(at);
                } else {
                    edges.push(e);
                }
            }
        }
        triangles = keep;
        for (a, b) in edges {
            triangles.push(normalize([a, b, pt]));
        }
    }

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in &triangles {
        if t[2] == GHOST {
            continue;
        }
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            if !neighbors[b].contains(&a) {
                neighbors[b].push(a);
            }
        }
    }
    for list in neighbors.iter_mut() {
        list.sort_unstable();
    }
    // an exact duplicate of an existing vertex falls in no circumdisk and
    // ends up isolated; stitch it to its nearest point so stats stay defined
    for i in 0..n {
        if neighbors[i].is_empty() {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, &q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let dd = (q.0 - points[i].0).powi(2) + (q.1 - points[i].1).powi(2);
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            neighbors[i].push(best);
            if !neighbors[best].contains(&i) {
                neighbors[best].push(i);
                neighbors[best].sort_unstable();
            }
        }
    }
    Ok(neighbors)
}

fn chain_neighbors(points: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(points[a].1.total_cmp(&points[b].1)));
    let mut neighbors = vec![Vec::new(); points.len()];
    for w in order.windows(2) {
        neighbors[w[0]].push(w[1]);
        neighbors[w[1]].push(w[0]);
    }
    for list in neighbors.iter_mut() {
        list.sort_unstable();
    }
    neighbors
}

/// Per-point (d_max, d_min, d_mean) over Delaunay neighbor edge lengths.
pub fn neighbor_distance_stats(points: &[(f64, f64)]) -> Result<Vec<(f64, f64, f64)>> {
    let neighbors = delaunay_neighbors(points)?;
    let mut out = Vec::with_capacity(points.len());
    for (i, list) in neighbors.iter().enumerate() {
        debug_assert!(!list.is_empty());
        let (mut dmax, mut dmin, mut sum) = (f64::NEG_INFINITY, f64::INFINITY, 0.0);
        for &j in list {
            let d = ((points[j].0 - points[i].0).powi(2) + (points[j].1 - points[i].1).powi(2)).sqrt();
            dmax = dmax.max(d);
            dmin = dmin.min(d);
            sum += d;
        }
        out.push((dmax, dmin, sum / list.len() as f64));
    }
    Ok(out)
}

/// Exhaustive O(n^4) reference: an edge (i, j) is Delaunay when some
/// circumcircle through i, j, and a third point contains no other point.
/// Exposed for the acceptance suite; quadratic chain fallback as above.
pub fn brute_force_neighbors(points: &[(f64, f64)]) -> Result<Vec<Vec<usize>>> {
    if points.len() < 2 {
        return Err(Error::Contract { op: "brute_force_neighbors", msg: "need at least 2 points".into() });
    }
    if is_collinear(points) {
        return Ok(chain_neighbors(points));
    }
    let n = points.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut is_edge = false;
            'witness: for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                let orient = (points[j].0 - points[i].0) * (points[k].1 - points[i].1)
                    - (points[j].1 - points[i].1) * (points[k].0 - points[i].0);
                if orient == 0.0 {
                    continue;
                }
                for m in 0..n {
                    if m == i || m == j || m == k {
                        continue;
                    }
                    if in_circumcircle(points[i], points[j], points[k], points[m]) {
                        continue 'witness;
                    }
                }
                is_edge = true;
                break;
            }
            if is_edge {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for list in neighbors.iter_mut() {
        list.sort_unstable();
    }
    Ok(neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn right_triangle_distances_match_hand_values() {
        let pts = [(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)];
        let stats = neighbor_distance_stats(&pts).unwrap();
        let (dmax, dmin, dmean) = stats[0];
        assert_eq!((dmax, dmin, dmean), (4.0, 3.0, 3.5));
        // hypotenuse 5 seen from (3,0)
        assert_eq!(stats[1].0, 5.0);
        assert_eq!(stats[1].1, 3.0);
    }

    #[test]
    fn two_points_use_the_degenerate_convention() {
        let pts = [(0.0, 0.0), (7.0, 0.0)];
        let stats = neighbor_distance_stats(&pts).unwrap();
        assert_eq!(stats[0], (7.0, 7.0, 7.0));
        assert_eq!(stats[1], (7.0, 7.0, 7.0));
    }

    #[test]
    fn collinear_points_form_a_chain() {
        let pts = [(4.0, 4.0), (0.0, 0.0), (2.0, 2.0), (6.0, 6.0)];
        let nb = delaunay_neighbors(&pts).unwrap();
        assert_eq!(nb[1], vec![2]); // (0,0) touches only (2,2)
        assert_eq!(nb[2], vec![0, 1]); // (2,2) between (0,0) and (4,4)
        assert_eq!(nb[0], vec![2, 3]);
        assert_eq!(nb[3], vec![0]);
    }

    #[test]
    fn square_with_center_connects_center_to_all() {
        let pts = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0), (1.0, 1.0)];
        let nb = delaunay_neighbors(&pts).unwrap();
        assert_eq!(nb[4], vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_point_is_rejected() {
        assert!(delaunay_neighbors(&[(1.0, 2.0)]).is_err());
        assert!(neighbor_distance_stats(&[]).is_err());
    }

    #[test]
    fn neighbor_relation_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..25 {
            let n = rng.random_range(2..12);
            let pts: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
            let nb = delaunay_neighbors(&pts).unwrap();
            for (i, list) in nb.iter().enumerate() {
                assert!(!list.is_empty());
                for &j in list {
                    assert!(nb[j].contains(&i), "asymmetric edge {}-{}", i, j);
                }
            }
        }
    }

    #[test]
    fn matches_the_empty_circumcircle_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for round in 0..40 {
            let n = rng.random_range(3..=10);
            let pts: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
            let fast = delaunay_neighbors(&pts).unwrap();
            let slow = brute_force_neighbors(&pts).unwrap();
            assert_eq!(fast, slow, "round {} pts {:?}", round, pts);
        }
    }
}

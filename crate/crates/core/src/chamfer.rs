//! Exact nearest-neighbour search and Chamfer losses with analytic gradients.
//!
//! Both directed terms are mean-normalised: `d(a -> b) = 1/|a| Σ_a min_b |a - b|²`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::real::Real;

/// Exact nearest neighbour by linear scan. Ties go to the lowest index.
pub fn nearest_neighbor_sq<T: Real>(query: Vec3<T>, targets: &[Vec3<T>]) -> Result<(usize, T)> {
    if targets.is_empty() {
        return Err(Error::EmptyCloud("nearest-neighbour targets"));
    }
    let mut best = (0, query.dist_sq(targets[0]));
    for (i, t) in targets.iter().enumerate().skip(1) {
        let d = query.dist_sq(*t);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

type CellKey = [i64; 3];

/// Uniform hash grid over a fixed point set, answering exact nearest-neighbour queries.
///
/// The cell size is the median nearest-neighbour distance of a subsample of the points.
/// Queries expand Chebyshev rings of cells around the query cell until no unvisited
/// cell can hold a point as close as the current best; once the rings have probed more
/// cells than are occupied the search finishes with a linear scan.
#[derive(Clone, Debug)]
pub struct NeighborIndex<T> {
    points: Vec<Vec3<T>>,
    cell: f64,
    cells: HashMap<CellKey, (u32, u32)>,
    order: Vec<u32>,
    lo: CellKey,
    hi: CellKey,
}

const INDEX_SUBSAMPLE: usize = 64;

impl<T: Real> NeighborIndex<T> {
    pub fn build(points: Vec<Vec3<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("nearest-neighbour targets"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid("point cloud", format!("point {i} is not finite")));
        }
        let cell = Self::cell_size(&points);
        let key = |p: &Vec3<T>| -> CellKey {
            let f = p.to_f64();
            [
                (f[0] / cell).floor() as i64,
                (f[1] / cell).floor() as i64,
                (f[2] / cell).floor() as i64,
            ]
        };
        let mut keyed: Vec<(CellKey, u32)> = points.iter().enumerate().map(|(i, p)| (key(p), i as u32)).collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let mut start = 0;
        while start < keyed.len() {
            let k = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == k {
                end += 1;
            }
            cells.insert(k, (start as u32, end as u32));
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            start = end;
        }
        let order = keyed.into_iter().map(|(_, i)| i).collect();
        Ok(NeighborIndex {
            points,
            cell,
            cells,
            order,
            lo,
            hi,
        })
    }

    fn cell_size(points: &[Vec3<T>]) -> f64 {
        let n = points.len();
        let stride = (n / INDEX_SUBSAMPLE).max(1);
        let mut nn: Vec<f64> = (0..n)
            .step_by(stride)
            .filter_map(|i| {
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| points[i].dist_sq(*q).as_f64())
                    .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
            })
            .map(f64::sqrt)
            .filter(|d| *d > 0.0)
            .collect();
        if nn.is_empty() {
            return 1.0;
        }
        nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nn[nn.len() / 2]
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_size_used(&self) -> f64 {
        self.cell
    }

    #[inline]
    fn consider(&self, q: Vec3<T>, idx: usize, best: &mut (usize, T)) {
        let d = q.dist_sq(self.points[idx]);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
    }

    fn scan_cell(&self, q: Vec3<T>, k: &CellKey, best: &mut (usize, T)) {
        if let Some(&(s, e)) = self.cells.get(k) {
            for &i in &self.order[s as usize..e as usize] {
                self.consider(q, i as usize, best);
            }
        }
    }

    /// Nearest point index and squared distance; ties go to the lowest index.
    pub fn nearest(&self, q: Vec3<T>) -> (usize, T) {
        let qf = q.to_f64();
        let h = self.cell;
        let c: CellKey = [
            (qf[0] / h).floor() as i64,
            (qf[1] / h).floor() as i64,
            (qf[2] / h).floor() as i64,
        ];
        let mut best = (usize::MAX, T::infinity());
        // rings closer than the occupied box are empty; start at the first one touching it
        let mut r: i64 = 0;
        let mut extent: i64 = 0;
        for (a, &ca) in c.iter().enumerate() {
            let outside = (self.lo[a].saturating_sub(ca)).max(ca.saturating_sub(self.hi[a]));
            r = r.max(outside);
            extent = extent.max(self.hi[a] - self.lo[a]);
        }
        if r > extent.saturating_add(1) || !qf.iter().all(|x| x.is_finite()) {
            // far from the data every point is a candidate anyway
            for i in 0..self.points.len() {
                self.consider(q, i, &mut best);
            }
            return best;
        }
        let budget = self.cells.len();
        let mut probed = 0usize;
        loop {
            let lo = [c[0] - r, c[1] - r, c[2] - r];
            let hi = [c[0] + r, c[1] + r, c[2] + r];
            // clip the ring to the occupied box
            let clo = [lo[0].max(self.lo[0]), lo[1].max(self.lo[1]), lo[2].max(self.lo[2])];
            let chi = [hi[0].min(self.hi[0]), hi[1].min(self.hi[1]), hi[2].min(self.hi[2])];
            if (0..3).all(|a| clo[a] <= chi[a]) {
                for x in clo[0]..=chi[0] {
                    let x_face = x == lo[0] || x == hi[0];
                    for y in clo[1]..=chi[1] {
                        let y_face = y == lo[1] || y == hi[1];
                        if x_face || y_face {
                            for z in clo[2]..=chi[2] {
                                self.scan_cell(q, &[x, y, z], &mut best);
                                probed += 1;
                            }
                        } else {
                            for z in [lo[2], hi[2]] {
                                if z >= clo[2] && z <= chi[2] {
                                    self.scan_cell(q, &[x, y, z], &mut best);
                                    probed += 1;
                                }
                            }
                        }
                    }
                }
            }
            // every occupied cell has been visited
            if (0..3).all(|a| lo[a] <= self.lo[a] && hi[a] >= self.hi[a]) {
                break;
            }
            if best.0 != usize::MAX {
                // distance from q to the outside of the visited cube
                let mut gap = f64::INFINITY;
                for a in 0..3 {
                    gap = gap.min(qf[a] - lo[a] as f64 * h).min((hi[a] + 1) as f64 * h - qf[a]);
                }
                let gap = (gap * (1.0 - 1e-12)).max(0.0);
                if gap * gap > best.1.as_f64() {
                    break;
                }
            }
            if probed > budget {
                for i in 0..self.points.len() {
                    self.consider(q, i, &mut best);
                }
                break;
            }
            r += 1;
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<T> {
    pub value: T,
    /// Nearest target index for every sim point.
    pub argmins: Vec<usize>,
    pub frame_index: usize,
}

/// Mean squared distance from each `sim` point to its nearest point of `real`.
pub fn unidirectional_chamfer<T: Real>(sim: &[Vec3<T>], real: &[Vec3<T>]) -> Result<LossReport<T>> {
    if sim.is_empty() {
        return Err(Error::EmptyCloud("simulated cloud"));
    }
    let index = NeighborIndex::build(real.to_vec())?;
    unidirectional_chamfer_indexed(sim, &index)
}

/// [`unidirectional_chamfer`] against a prebuilt index.
pub fn unidirectional_chamfer_indexed<T: Real>(sim: &[Vec3<T>], real: &NeighborIndex<T>) -> Result<LossReport<T>> {
    if sim.is_empty() {
        return Err(Error::EmptyCloud("simulated cloud"));
    }
    let mut sum = T::zero();
    let argmins = sim
        .iter()
        .map(|p| {
            let (i, d) = real.nearest(*p);
            sum += d;
            i
        })
        .collect();
    Ok(LossReport {
        value: sum / T::lit(sim.len() as f64),
        argmins,
        frame_index: 0,
    })
}

/// Symmetric Chamfer distance: sum of both mean directed terms.
pub fn bidirectional_chamfer<T: Real>(a: &[Vec3<T>], b: &[Vec3<T>]) -> Result<T> {
    Ok(unidirectional_chamfer(a, b)?.value + unidirectional_chamfer(b, a)?.value)
}

/// Gradient of the unidirectional loss in each sim point, nearest neighbours held fixed.
pub fn chamfer_point_gradients<T: Real>(report: &LossReport<T>, sim: &[Vec3<T>], real: &[Vec3<T>]) -> Result<Vec<Vec3<T>>> {
    if report.argmins.len() != sim.len() {
        return Err(Error::StaleReport(format!(
            "{} argmins for {} sim points",
            report.argmins.len(),
            sim.len()
        )));
    }
    if let Some(&bad) = report.argmins.iter().find(|&&i| i >= real.len()) {
        return Err(Error::StaleReport(format!("argmin {bad} outside a target of {} points", real.len())));
    }
    let scale = T::lit(2.0) / T::lit(sim.len() as f64);
    Ok(sim
        .iter()
        .zip(&report.argmins)
        .map(|(p, &i)| (*p - real[i]) * scale)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn nearest_examples() {
        let t = vec![v(1.0, 0.0, 0.0), v(3.0, 0.0, 0.0)];
        assert_eq!(nearest_neighbor_sq(v(0.0, 0.0, 0.0), &t).unwrap(), (0, 1.0));
        assert_eq!(nearest_neighbor_sq(v(3.0, 0.0, 0.0), &t).unwrap(), (1, 0.0));
        let tie = vec![v(5.0, 5.0, 5.0), v(9.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(7.0, 7.0, 0.0), v(4.0, 4.0, 4.0), v(-1.0, 0.0, 0.0)];
        assert_eq!(nearest_neighbor_sq(v(0.0, 0.0, 0.0), &tie).unwrap().0, 2);
        assert_eq!(NeighborIndex::build(tie).unwrap().nearest(v(0.0, 0.0, 0.0)).0, 2);
        assert!(nearest_neighbor_sq(v(0.0, 0.0, 0.0), &[]).is_err());
        assert!(NeighborIndex::<f64>::build(vec![]).is_err());
    }

    #[test]
    fn unidirectional_examples() {
        let a = vec![v(0.0, 0.0, 0.0), v(0.5, 1.0, 0.0)];
        assert_eq!(unidirectional_chamfer(&a, &a).unwrap().value, 0.0);
        let r = unidirectional_chamfer(&[v(0.0, 0.0, 0.0)], &[v(1.0, 0.0, 0.0), v(3.0, 0.0, 0.0)]).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.argmins, vec![0]);
        let r = unidirectional_chamfer(&[v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)], &[v(0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(r.value, 2.0);
        assert!(unidirectional_chamfer(&[], &a).is_err());
        assert!(unidirectional_chamfer(&a, &[]).is_err());
    }

    #[test]
    fn bidirectional_examples() {
        let d = 0.7;
        let val = bidirectional_chamfer(&[v(0.0, 0.0, 0.0)], &[v(0.0, d, 0.0)]).unwrap();
        assert!((val - 2.0 * d * d).abs() < 1e-15);
        let a = vec![v(0.0, 0.0, 0.0), v(1.0, 2.0, 3.0)];
        assert_eq!(bidirectional_chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_examples() {
        let sim = vec![v(1.0, 0.0, 0.0)];
        let real = vec![v(0.0, 0.0, 0.0)];
        let r = unidirectional_chamfer(&sim, &real).unwrap();
        assert_eq!(chamfer_point_gradients(&r, &sim, &real).unwrap(), vec![v(2.0, 0.0, 0.0)]);
        let r = unidirectional_chamfer(&real, &real).unwrap();
        assert_eq!(chamfer_point_gradients(&r, &real, &real).unwrap(), vec![Vec3::zero()]);
        // stale report
        assert!(chamfer_point_gradients(&r, &[v(0.0, 0.0, 0.0), v(1.0, 1.0, 1.0)], &real).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut pt = || v(rng.random(), rng.random(), rng.random());
        let sim: Vec<_> = (0..40).map(|_| pt()).collect();
        let real: Vec<_> = (0..60).map(|_| pt()).collect();
        let r = unidirectional_chamfer(&sim, &real).unwrap();
        let g = chamfer_point_gradients(&r, &sim, &real).unwrap();
        let h = 1e-7;
        for i in 0..sim.len() {
            for a in 0..3 {
                let mut p = sim.clone();
                let mut m = sim.clone();
                p[i][a] += h;
                m[i][a] -= h;
                let rp = unidirectional_chamfer(&p, &real).unwrap();
                let rm = unidirectional_chamfer(&m, &real).unwrap();
                // skip the measure-zero case where the nearest neighbour switches
                if rp.argmins != r.argmins || rm.argmins != r.argmins {
                    continue;
                }
                let fd = (rp.value - rm.value) / (2.0 * h);
                assert!((fd - g[i][a]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", g[i][a]);
            }
        }
    }

    #[test]
    fn far_outlier_queries_are_exact() {
        let mut cloud: Vec<_> = (0..200).map(|i| v((i % 20) as f64 * 0.01, (i / 20) as f64 * 0.01, 0.0)).collect();
        cloud.push(v(100.0, 100.0, 100.0));
        let idx = NeighborIndex::build(cloud.clone()).unwrap();
        for q in [v(50.0, -30.0, 7.0), v(99.0, 99.0, 99.0), v(-1e3, 0.0, 0.0)] {
            assert_eq!(idx.nearest(q), nearest_neighbor_sq(q, &cloud).unwrap());
        }
    }

    proptest! {
        #[test]
        fn index_matches_linear_scan(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..200),
            qs in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..20),
            grid_snap in any::<bool>(),
        ) {
            // snapping to a coarse lattice creates many exact ties
            let snap = |a: [f64; 3]| if grid_snap { Vec3(a.map(|c| (c * 4.0).round() / 4.0)) } else { Vec3(a) };
            let pts: Vec<_> = pts.into_iter().map(snap).collect();
            let idx = NeighborIndex::build(pts.clone()).unwrap();
            for q in qs {
                let q = snap(q);
                prop_assert_eq!(idx.nearest(q), nearest_neighbor_sq(q, &pts).unwrap());
            }
        }

        #[test]
        fn bidirectional_is_symmetric(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..50),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..50),
        ) {
            let a: Vec<_> = a.into_iter().map(Vec3).collect();
            let b: Vec<_> = b.into_iter().map(Vec3).collect();
            let ab = bidirectional_chamfer(&a, &b).unwrap();
            let ba = bidirectional_chamfer(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-15 * ab.max(1.0));
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn adding_targets_never_increases_unidirectional(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..50),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..50),
            extra in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..20),
        ) {
            let a: Vec<_> = a.into_iter().map(Vec3).collect();
            let b: Vec<_> = b.into_iter().map(Vec3).collect();
            let mut bigger = b.clone();
            bigger.extend(extra.into_iter().map(Vec3));
            let before = unidirectional_chamfer(&a, &b).unwrap().value;
            let after = unidirectional_chamfer(&a, &bigger).unwrap().value;
            prop_assert!(after <= before);
        }
    }
}

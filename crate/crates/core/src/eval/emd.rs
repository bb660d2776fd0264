//! Exact earth mover's distance by the primal network simplex method on
//! the transportation problem.
//!
//! Arcs from every source bin to every sink bin are implicit; their cost
//! is the Euclidean distance between the bin coordinates, computed on
//! demand. Only spanning-tree arcs carry flow, so flow is stored per tree
//! node rather than per arc. The tree bookkeeping (thread order, subtree
//! sizes, last successors) follows the classic strongly feasible
//! spanning-tree scheme with block-search pricing.

use crate::error::{Error, Result};

/// Weighted point cloud; all points share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoints {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::Input("points and weights differ in length".into()));
        }
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Input("points differ in dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Input("weights must be finite and nonnegative".into()));
        }
        Ok(Self {
            dim,
            coords: points.into_iter().flatten().collect(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Drop zero-weight points.
    fn occupied(&self) -> (Vec<usize>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        let w = idx.iter().map(|&i| self.weights[i]).collect();
        (idx, w)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mass mismatch tolerated between the two sides.
pub const MASS_TOL: f64 = 1e-9;

/// Exact 1-Wasserstein distance with Euclidean ground metric.
pub fn emd(a: &WeightedPoints, b: &WeightedPoints) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("empty distribution".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Input("distributions differ in dimension".into()));
    }
    let (ta, tb) = (a.total(), b.total());
    if (ta - tb).abs() > MASS_TOL {
        return Err(Error::Input(format!(
            "mass mismatch: {ta} vs {tb} (tolerance {MASS_TOL})"
        )));
    }
    let (ia, wa) = a.occupied();
    let (ib, wb) = b.occupied();
    if ia.is_empty() || ib.is_empty() {
        return Err(Error::Input("distribution has no mass".into()));
    }
    let pa: Vec<&[f64]> = ia.iter().map(|&i| a.point(i)).collect();
    let pb: Vec<&[f64]> = ib.iter().map(|&j| b.point(j)).collect();
    let mut solver = Simplex::new(&wa, &wb, |i, j| euclid(pa[i], pb[j]));
    solver.run();
    Ok(solver.total_cost())
}

const UP: i8 = 1;
const DOWN: i8 = -1;

/// Network simplex over `m` sources and `n` sinks with complete bipartite
/// arcs; node `m + n` is the artificial root.
struct Simplex<F: Fn(usize, usize) -> f64> {
    m: usize,
    n: usize,
    cost_fn: F,
    arc_num: usize,
    art_cost: f64,
    eps: f64,
    // artificial arc of node u is arc `arc_num + u`
    art_up: Vec<bool>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i8>,
    pred_flow: Vec<f64>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pi: Vec<f64>,
    block: usize,
    next_arc: usize,
}

const NONE: usize = usize::MAX;

impl<F: Fn(usize, usize) -> f64> Simplex<F> {
    fn new(supply: &[f64], demand: &[f64], cost_fn: F) -> Self {
        let m = supply.len();
        let n = demand.len();
        let nodes = m + n;
        let arc_num = m * n;
        let mut max_cost: f64 = 0.0;
        for i in 0..m {
            for j in 0..n {
                max_cost = max_cost.max(cost_fn(i, j));
            }
        }
        let art_cost = (max_cost + 1.0) * nodes as f64;
        let root = nodes;
        let mut s = Self {
            m,
            n,
            cost_fn,
            arc_num,
            art_cost,
            eps: 1e-14 * art_cost,
            art_up: vec![false; nodes],
            in_tree: vec![false; arc_num + nodes],
            parent: vec![NONE; nodes + 1],
            pred: vec![NONE; nodes + 1],
            pred_dir: vec![0; nodes + 1],
            pred_flow: vec![0.0; nodes + 1],
            thread: vec![0; nodes + 1],
            rev_thread: vec![0; nodes + 1],
            succ_num: vec![1; nodes + 1],
            last_succ: vec![0; nodes + 1],
            pi: vec![0.0; nodes + 1],
            block: ((arc_num as f64).sqrt() as usize).max(10),
            next_arc: 0,
        };
        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = nodes + 1;
        s.last_succ[root] = root - 1;
        for u in 0..nodes {
            let sup = if u < m { supply[u] } else { -demand[u - m] };
            let e = arc_num + u;
            s.parent[u] = root;
            s.pred[u] = e;
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.last_succ[u] = u;
            s.in_tree[e] = true;
            if sup >= 0.0 {
                s.art_up[u] = true;
                s.pred_dir[u] = UP;
                s.pi[u] = 0.0;
                s.pred_flow[u] = sup;
            } else {
                s.pred_dir[u] = DOWN;
                s.pi[u] = art_cost;
                s.pred_flow[u] = -sup;
            }
        }
        s
    }

    fn source(&self, e: usize) -> usize {
        if e < self.arc_num {
            e / self.n
        } else {
            let u = e - self.arc_num;
            if self.art_up[u] {
                u
            } else {
                self.m + self.n
            }
        }
    }

    fn target(&self, e: usize) -> usize {
        if e < self.arc_num {
            self.m + e % self.n
        } else {
            let u = e - self.arc_num;
            if self.art_up[u] {
                self.m + self.n
            } else {
                u
            }
        }
    }

    fn cost(&self, e: usize) -> f64 {
        if e < self.arc_num {
            (self.cost_fn)(e / self.n, e % self.n)
        } else if self.art_up[e - self.arc_num] {
            0.0
        } else {
            self.art_cost
        }
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        let i = e / self.n;
        let j = self.m + e % self.n;
        (self.cost_fn)(i, e % self.n) + self.pi[i] - self.pi[j]
    }

    fn find_entering_arc(&mut self) -> Option<usize> {
        let mut min = -self.eps;
        let mut best = NONE;
        let mut cnt = self.block;
        let total = self.arc_num;
        for k in 0..total {
            let e = (self.next_arc + k) % total;
            if !self.in_tree[e] {
                let c = self.reduced_cost(e);
                if c < min {
                    min = c;
                    best = e;
                }
            }
            cnt -= 1;
            if cnt == 0 {
                if best != NONE {
                    self.next_arc = (e + 1) % total;
                    return Some(best);
                }
                cnt = self.block;
            }
        }
        if best != NONE {
            self.next_arc = (best + 1) % total;
            Some(best)
        } else {
            None
        }
    }

    fn run(&mut self) {
        while let Some(in_arc) = self.find_entering_arc() {
            self.pivot(in_arc);
        }
    }

    fn pivot(&mut self, in_arc: usize) {
        let src = self.source(in_arc);
        let tgt = self.target(in_arc);

        // join node
        let (mut u, mut v) = (src, tgt);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        let join = u;

        // leaving arc: uncapacitated arcs, so only backward tree arcs bound delta
        let (first, second) = (src, tgt);
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut from_first = true;
        let mut u = first;
        while u != join {
            if self.pred_dir[u] == UP && self.pred_flow[u] < delta {
                delta = self.pred_flow[u];
                u_out = u;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if self.pred_dir[u] == DOWN && self.pred_flow[u] <= delta {
                delta = self.pred_flow[u];
                u_out = u;
                from_first = false;
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != NONE, "transportation problem cannot be unbounded");
        let (u_in, v_in) = if from_first { (first, second) } else { (second, first) };

        // augment
        if delta > 0.0 {
            let mut u = src;
            while u != join {
                self.pred_flow[u] -= f64::from(self.pred_dir[u]) * delta;
                u = self.parent[u];
            }
            let mut u = tgt;
            while u != join {
                self.pred_flow[u] += f64::from(self.pred_dir[u]) * delta;
                u = self.parent[u];
            }
        }
        let out_arc = self.pred[u_out];
        self.in_tree[in_arc] = true;
        self.in_tree[out_arc] = false;

        self.update_tree(in_arc, join, u_in, v_in, u_out, delta);

        // potentials of the moved subtree
        let sigma = self.pi[v_in] - self.pi[u_in]
            - f64::from(self.pred_dir[u_in]) * self.cost(in_arc);
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    fn update_tree(&mut self, in_arc: usize, join: usize, u_in: usize, v_in: usize, u_out: usize, delta: f64) {
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];
        let in_dir = if u_in == self.source(in_arc) { UP } else { DOWN };

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = in_dir;
            self.pred_flow[u_in] = delta;
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            let mut dirty = vec![v_in];
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                dirty.push(last);
                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;
                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;
                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;
            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for &u in &dirty {
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }
            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                self.pred_flow[u] = self.pred_flow[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = in_dir;
            self.pred_flow[u_in] = delta;
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }
        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }
        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn total_cost(&self) -> f64 {
        (0..self.m + self.n)
            .filter(|&u| self.pred[u] < self.arc_num)
            .map(|u| self.pred_flow[u] * self.cost(self.pred[u]))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(p: &[(f64, f64, f64)]) -> WeightedPoints {
        WeightedPoints::new(
            p.iter().map(|&(x, y, _)| vec![x, y]).collect(),
            p.iter().map(|&(_, _, w)| w).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let a = pts(&[(0.0, 0.0, 0.3), (1.0, 2.0, 0.7)]);
        assert!(emd(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_edge() {
        let a = pts(&[(0.0, 0.0, 1.0)]);
        let b = pts(&[(3.0, 4.0, 1.0)]);
        assert!((emd(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn split_to_middle() {
        let a = pts(&[(0.0, 0.0, 0.5), (0.0, 2.0, 0.5)]);
        let b = pts(&[(0.0, 1.0, 1.0)]);
        assert!((emd(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_matches_cdf_formula() {
        // in 1D, W1 = ∫ |F_a - F_b|
        let wa = [0.1, 0.0, 0.3, 0.2, 0.4, 0.0, 0.0];
        let wb = [0.0, 0.25, 0.25, 0.0, 0.1, 0.1, 0.3];
        let a = WeightedPoints::new((0..7).map(|i| vec![i as f64]).collect(), wa.to_vec()).unwrap();
        let b = WeightedPoints::new((0..7).map(|i| vec![i as f64]).collect(), wb.to_vec()).unwrap();
        let mut fa = 0.0;
        let mut fb = 0.0;
        let mut expect = 0.0;
        for i in 0..6 {
            fa += wa[i];
            fb += wb[i];
            expect += (fa - fb).abs();
        }
        assert!((emd(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mass_mismatch_rejected() {
        let a = pts(&[(0.0, 0.0, 1.0)]);
        let b = pts(&[(0.0, 0.0, 0.9)]);
        assert!(matches!(emd(&a, &b), Err(Error::Input(_))));
    }
}

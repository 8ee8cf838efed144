//! Exact vertex descent for the pinball-loss problem.
//!
//! A vertex is a set `h` of `p` rows with zero residual; its coefficient
//! vector solves `X_h b = y_h`. Edges leave the vertex along the columns of
//! `X_h^{-1}` (one basis row's residual moves off zero, the others stay
//! put). Along an edge the objective is convex piecewise linear, so each
//! step is a weighted-median line search.

use std::collections::{BTreeSet, VecDeque};

use super::ipm;
use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance on directional derivatives.
const SLOPE_TOL: f64 = 1e-11;
/// Relative pivot tolerance for basis matrices.
const PIVOT_TOL: f64 = 1e-12;
/// Cap on alternative bases examined at a degenerate vertex.
const MAX_DEGENERATE_BASES: usize = 256;
/// Relative decrease an escape from a degenerate vertex must achieve.
const OBJECTIVE_TOL: f64 = 1e-13;
/// Cap on optimal vertices visited while breaking ties.
const MAX_FACE_VERTICES: usize = 2000;

pub(crate) struct Problem<'a> {
    /// Row-major design with `p` columns.
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub p: usize,
    pub alpha: f64,
    /// Rows entering the objective.
    pub rows: &'a [usize],
    /// Residuals with magnitude at most `tol` count as zero.
    pub tol: f64,
}

impl Problem<'_> {
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.p..(t + 1) * self.p]
    }

    pub fn y_scale(&self) -> f64 {
        self.rows
            .iter()
            .map(|&t| self.y[t].abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Vertex {
    /// Sorted dataset row indices.
    pub basis: Vec<usize>,
    pub coef: Vec<f64>,
    pub objective: f64,
    pub n_active: usize,
}

pub(crate) enum Start<'a> {
    /// Interior point, then crossover.
    Cold,
    /// A previous vertex; rows no longer in the problem are replaced.
    Warm { basis: &'a [usize], coef: &'a [f64] },
}

struct State {
    basis: Vec<usize>,
    binv: Vec<f64>,
    coef: Vec<f64>,
}

impl State {
    fn new(prob: &Problem<'_>, mut basis: Vec<usize>) -> Option<State> {
        basis.sort_unstable();
        let p = prob.p;
        let mut b = Vec::with_capacity(p * p);
        for &t in &basis {
            b.extend_from_slice(prob.row(t));
        }
        let binv = linalg::invert(&b, p, PIVOT_TOL)?;
        let yh: Vec<f64> = basis.iter().map(|&t| prob.y[t]).collect();
        let mut coef = vec![0.0; p];
        linalg::mat_vec(&binv, p, p, &yh, &mut coef);
        Some(State { basis, binv, coef })
    }

    /// Column `j` of the basis inverse, signed.
    fn direction(&self, p: usize, j: usize, sigma: f64) -> Vec<f64> {
        (0..p).map(|i| sigma * self.binv[i * p + j]).collect()
    }
}

#[derive(Clone, Copy)]
struct Edge {
    slope: f64,
    tol: f64,
    j: usize,
    sigma: f64,
}

struct Evaluation {
    resid: Vec<f64>,
    zero_rows: Vec<usize>,
    edges: Vec<Edge>,
}

fn evaluate(prob: &Problem<'_>, st: &State) -> Evaluation {
    let p = prob.p;
    let alpha = prob.alpha;
    let mut resid = Vec::with_capacity(prob.rows.len());
    let mut grad = vec![0.0; p];
    let mut zero_rows = Vec::new();
    let mut l1_mass = 0.0;
    for &t in prob.rows {
        let row = prob.row(t);
        let r = prob.y[t] - linalg::dot(row, &st.coef);
        resid.push(r);
        l1_mass += row.iter().map(|v| v.abs()).sum::<f64>();
        if st.basis.contains(&t) {
            continue;
        }
        if r.abs() <= prob.tol {
            zero_rows.push(t);
        } else {
            let w = if r > 0.0 { alpha } else { alpha - 1.0 };
            for (g, xv) in grad.iter_mut().zip(row) {
                *g += w * xv;
            }
        }
    }
    let mut edges = Vec::with_capacity(2 * p);
    for j in 0..p {
        let d = st.direction(p, j, 1.0);
        let gd = linalg::dot(&grad, &d);
        let (mut up, mut down) = (0.0, 0.0);
        for &t in &zero_rows {
            let v = linalg::dot(prob.row(t), &d);
            up += super::pinball_loss(-v, alpha);
            down += super::pinball_loss(v, alpha);
        }
        let dmax = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let tol = SLOPE_TOL * (1.0 + l1_mass * dmax);
        edges.push(Edge {
            slope: -gd + up + (1.0 - alpha),
            tol,
            j,
            sigma: 1.0,
        });
        edges.push(Edge {
            slope: gd + down + alpha,
            tol,
            j,
            sigma: -1.0,
        });
    }
    Evaluation {
        resid,
        zero_rows,
        edges,
    }
}

/// Breakpoints along an edge, sorted lazily. Returns the row at which the
/// slope first becomes non-negative (or, with `first_only`, simply the
/// nearest breakpoint).
fn line_search(
    prob: &Problem<'_>,
    st: &State,
    ev: &Evaluation,
    edge: Edge,
    first_only: bool,
) -> Option<usize> {
    let d = st.direction(prob.p, edge.j, edge.sigma);
    let mut breaks: Vec<(f64, f64, usize)> = Vec::new();
    for (i, &t) in prob.rows.iter().enumerate() {
        let r = ev.resid[i];
        if r.abs() <= prob.tol || st.basis.contains(&t) {
            continue;
        }
        let v = linalg::dot(prob.row(t), &d);
        if v == 0.0 {
            continue;
        }
        let tau = r / v;
        if tau > 0.0 {
            breaks.push((tau, v.abs(), t));
        }
    }
    let by_tau =
        |a: &(f64, f64, usize), b: &(f64, f64, usize)| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2));
    if first_only {
        return breaks.iter().min_by(|a, b| by_tau(a, b)).map(|b| b.2);
    }
    let mut slope = edge.slope;
    let mut rest: &mut [(f64, f64, usize)] = &mut breaks;
    let mut chunk = 16;
    while !rest.is_empty() {
        let take = chunk.min(rest.len());
        if take < rest.len() {
            rest.select_nth_unstable_by(take - 1, by_tau);
        }
        let (head, tail) = rest.split_at_mut(take);
        head.sort_unstable_by(by_tau);
        for &(_, w, t) in head.iter() {
            slope += w;
            if slope >= -edge.tol {
                return Some(t);
            }
        }
        rest = tail;
        chunk *= 4;
    }
    None
}

fn steepest(ev: &Evaluation) -> Option<Edge> {
    ev.edges
        .iter()
        .filter(|e| e.slope < -e.tol)
        .min_by(|a, b| a.slope.total_cmp(&b.slope))
        .copied()
}

/// At a degenerate vertex the current basis may not expose a descent edge
/// even though one exists; every descent ray is an edge of *some* basis
/// drawn from the zero-residual rows, so search those.
///
/// Residuals within the zero tolerance make slopes at neighbouring bases
/// slightly inconsistent, so an alternative only counts when stepping along
/// its edge strictly lowers the objective.
fn degenerate_escape(prob: &Problem<'_>, st: &State, ev: &Evaluation) -> Option<State> {
    let current = objective(prob, st);
    let margin = OBJECTIVE_TOL * (1.0 + current.abs());
    let pool: Vec<usize> = st.basis.iter().chain(&ev.zero_rows).copied().collect();
    let mut seen = BTreeSet::new();
    seen.insert(st.basis.clone());
    let mut queue = VecDeque::from([st.basis.clone()]);
    while let Some(basis) = queue.pop_front() {
        for i in 0..basis.len() {
            for &t in &pool {
                if basis.contains(&t) {
                    continue;
                }
                let mut cand = basis.clone();
                cand[i] = t;
                cand.sort_unstable();
                if !seen.insert(cand.clone()) {
                    continue;
                }
                if seen.len() > MAX_DEGENERATE_BASES {
                    return None;
                }
                let Some(alt) = State::new(prob, cand.clone()) else {
                    continue;
                };
                let alt_ev = evaluate(prob, &alt);
                if let Some(next) = steepest(&alt_ev).and_then(|e| pivot(prob, &alt, &alt_ev, e)) {
                    if objective(prob, &next) < current - margin {
                        return Some(next);
                    }
                }
                queue.push_back(cand);
            }
        }
    }
    None
}

fn objective(prob: &Problem<'_>, st: &State) -> f64 {
    prob.rows
        .iter()
        .map(|&t| super::pinball_loss(prob.y[t] - linalg::dot(prob.row(t), &st.coef), prob.alpha))
        .sum()
}

/// Moves along `edge` to the vertex where the directional slope turns
/// non-negative.
fn pivot(prob: &Problem<'_>, st: &State, ev: &Evaluation, edge: Edge) -> Option<State> {
    let enter = line_search(prob, st, ev, edge, false)?;
    let mut basis = st.basis.clone();
    basis[edge.j] = enter;
    State::new(prob, basis)
}

fn descend(prob: &Problem<'_>, mut st: State) -> Result<State> {
    let cap = 1000 + 50 * prob.rows.len();
    let mut visited = BTreeSet::new();
    for _ in 0..cap {
        if !visited.insert(st.basis.clone()) {
            // Tolerance-level slopes led back to a known vertex.
            return Ok(st);
        }
        let ev = evaluate(prob, &st);
        let edge = match steepest(&ev) {
            Some(e) => e,
            None if !ev.zero_rows.is_empty() => match degenerate_escape(prob, &st, &ev) {
                Some(alt) => {
                    st = alt;
                    continue;
                }
                None => return Ok(st),
            },
            None => return Ok(st),
        };
        let Some(enter) = line_search(prob, &st, &ev, edge, false) else {
            // Unbounded descent cannot happen with a full-rank design.
            return Err(Error::RankDeficientDesign);
        };
        let mut basis = st.basis.clone();
        basis[edge.j] = enter;
        st = State::new(prob, basis).ok_or(Error::SolverNonConvergence {
            iterations: 0,
            gap: f64::NAN,
        })?;
    }
    Err(Error::SolverNonConvergence {
        iterations: cap,
        gap: f64::NAN,
    })
}

fn lex_less(a: &State, b: &State) -> bool {
    for (x, y) in a.coef.iter().zip(&b.coef) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    a.basis < b.basis
}

/// Walks the optimal face through zero-slope edges and returns the
/// lexicographically smallest coefficient vector found.
fn canonical_vertex(prob: &Problem<'_>, st: State) -> State {
    let ev = evaluate(prob, &st);
    if !ev.edges.iter().any(|e| e.slope.abs() <= e.tol) {
        return st;
    }
    let mut seen = BTreeSet::new();
    seen.insert(st.basis.clone());
    let mut queue = VecDeque::from([st.basis.clone()]);
    let mut best = st;
    while let Some(basis) = queue.pop_front() {
        let Some(cur) = State::new(prob, basis) else {
            continue;
        };
        let ev = evaluate(prob, &cur);
        for edge in ev.edges.iter().filter(|e| e.slope.abs() <= e.tol) {
            let Some(enter) = line_search(prob, &cur, &ev, *edge, true) else {
                continue;
            };
            let mut next = cur.basis.clone();
            next[edge.j] = enter;
            next.sort_unstable();
            if seen.len() < MAX_FACE_VERTICES && seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
        if lex_less(&cur, &best) {
            best = cur;
        }
    }
    best
}

/// Greedy well-conditioned basis: rows in the given order, kept when they
/// add a direction not (numerically) spanned by the rows already taken.
fn greedy_basis(prob: &Problem<'_>, order: impl Iterator<Item = usize>) -> Option<Vec<usize>> {
    let p = prob.p;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for t in order {
        let row = prob.row(t);
        let norm = linalg::dot(row, row).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for qi in &q {
                let c = linalg::dot(qi, &v);
                v.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
            }
        }
        let vn = linalg::dot(&v, &v).sqrt();
        if vn > 1e-9 * norm {
            v.iter_mut().for_each(|a| *a /= vn);
            q.push(v);
            basis.push(t);
            if basis.len() == p {
                return Some(basis);
            }
        }
    }
    None
}

fn rows_by_residual(prob: &Problem<'_>, coef: &[f64]) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = prob
        .rows
        .iter()
        .map(|&t| ((prob.y[t] - linalg::dot(prob.row(t), coef)).abs(), t))
        .collect();
    keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, t)| t).collect()
}

fn initial_state(prob: &Problem<'_>, start: Start<'_>) -> Result<State> {
    match start {
        Start::Cold => {
            let coef = ipm::solve(prob)?;
            let order = rows_by_residual(prob, &coef);
            let basis = greedy_basis(prob, order.into_iter()).ok_or(Error::RankDeficientDesign)?;
            State::new(prob, basis).ok_or(Error::RankDeficientDesign)
        }
        Start::Warm { basis, coef } => {
            let in_rows = |t: &usize| prob.rows.binary_search(t).is_ok();
            if basis.len() == prob.p && basis.iter().all(in_rows) {
                if let Some(st) = State::new(prob, basis.to_vec()) {
                    return Ok(st);
                }
            }
            let kept = basis.iter().copied().filter(in_rows);
            let order = kept.chain(rows_by_residual(prob, coef));
            let basis = greedy_basis(prob, order).ok_or(Error::RankDeficientDesign)?;
            State::new(prob, basis).ok_or(Error::RankDeficientDesign)
        }
    }
}

/// Exact minimizer of the pinball loss over `prob.rows` (which must be
/// sorted ascending), canonicalized to the lexicographically smallest
/// optimal vertex.
pub(crate) fn solve(prob: &Problem<'_>, start: Start<'_>) -> Result<Vertex> {
    debug_assert!(prob.rows.windows(2).all(|w| w[0] < w[1]));
    if prob.rows.len() < prob.p {
        return Err(Error::RankDeficientDesign);
    }
    let st = initial_state(prob, start)?;
    let st = descend(prob, st)?;
    let st = canonical_vertex(prob, st);
    let mut objective = 0.0;
    let mut n_active = 0;
    for &t in prob.rows {
        let r = prob.y[t] - linalg::dot(prob.row(t), &st.coef);
        objective += super::pinball_loss(r, prob.alpha);
        if r.abs() <= prob.tol {
            n_active += 1;
        }
    }
    Ok(Vertex {
        basis: st.basis,
        coef: st.coef,
        objective,
        n_active,
    })
}

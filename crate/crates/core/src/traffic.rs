//! Dynamic traffic assignment on a single origin–destination network with
//! linear latencies `ℓᵢ(xᵢ) = aᵢxᵢ`.
//!
//! The Wardrop equilibrium minimizes the potential `Σ aᵢxᵢ²/2` subject to
//! flow conservation and `x ≥ 0`. Tracking uses the Lagrangian
//! `Σ aᵢxᵢ²/2 + λᵀ(Bx − δ(θ))` over `x̃ = (x, λ)` with the saddle field
//! `(a∘x + Bᵀλ, δ(θ) − Bx)` as the regulated signal.
//!
//! Conservation reads `Bx = δ` with `B[v, e] = +1` when `e` leaves `v` and
//! `−1` when it enters `v`, and `δ_o = θ`, `δ_d = −θ`. The destination row is
//! redundant and always dropped.

use std::collections::{HashMap, VecDeque};

use crate::error::dim_err;
use crate::exosystem::Exosystem;
use crate::loss::{LossKind, LossModel};
use crate::regulator::{algorithm_one, quadratic_hc, GradientFeedbackAlgorithm, ParameterFeedbackMap};
use crate::simulate::{integrate_coupled, IntegratorConfig, Trajectory};
use crate::spectral::pseudo_inverse;
use crate::{Error, Float, Mat, Result, Vector};

/// Four-node Braess layout with the latency slopes `1, 10, 1, 5, 1` assigned
/// in edge order.
pub const DEFAULT_NETWORK: &str = "\
# Braess layout, linear latencies l_i(x) = a_i x
node o
node a
node b
node d
origin o
destination d
edge o a 1
edge o b 10
edge a b 1
edge a d 5
edge b d 1
";

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Float> {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
    slopes: Vec<T>,
    origin: usize,
    destination: usize,
}

impl<T: Float> Network<T> {
    pub fn new(
        names: Vec<String>,
        edges: Vec<(usize, usize)>,
        slopes: Vec<T>,
        origin: usize,
        destination: usize,
    ) -> Result<Self> {
        let n = names.len();
        if edges.len() != slopes.len() {
            return Err(dim_err("one latency slope per edge is required"));
        }
        if origin >= n || destination >= n {
            return Err(Error::Validation("origin or destination is not a node".into()));
        }
        if origin == destination {
            return Err(Error::Validation("origin and destination must differ".into()));
        }
        for (k, (&(t, h), a)) in edges.iter().zip(&slopes).enumerate() {
            if t >= n || h >= n {
                return Err(Error::Validation(format!("edge #{} references an unknown node", k + 1)));
            }
            if t == h {
                return Err(Error::Validation(format!(
                    "edge #{} is a self-loop at {}",
                    k + 1,
                    names[t]
                )));
            }
            if !(*a > T::zero()) || !a.is_finite() {
                return Err(Error::Validation(format!(
                    "edge #{} has nonpositive latency slope {}",
                    k + 1,
                    a.to_f64_lossy()
                )));
            }
        }
        let net = Network { names, edges, slopes, origin, destination };
        if !net.reachable(origin)[destination] {
            return Err(Error::Validation(format!(
                "destination {} is not reachable from origin {}",
                net.names[destination], net.names[origin]
            )));
        }
        Ok(net)
    }

    fn reachable(&self, from: usize) -> Vec<bool> {
        let mut seen = vec![false; self.names.len()];
        seen[from] = true;
        let mut queue = VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            for &(t, h) in &self.edges {
                if t == v && !seen[h] {
                    seen[h] = true;
                    queue.push_back(h);
                }
            }
        }
        seen
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn slopes(&self) -> &[T] {
        &self.slopes
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn destination(&self) -> usize {
        self.destination
    }

    /// Per-node injections `δ(θ)` over all nodes.
    pub fn injections(&self, theta: T) -> Vector<T> {
        let mut d = Vector::zeros(self.node_count());
        d[self.origin] = theta;
        d[self.destination] = -theta;
        d
    }

    /// Full node-by-edge incidence matrix.
    pub fn incidence(&self) -> Mat<T> {
        let mut b = Mat::zeros(self.node_count(), self.edge_count());
        for (e, &(t, h)) in self.edges.iter().enumerate() {
            b[(t, e)] = T::one();
            b[(h, e)] = -T::one();
        }
        b
    }

    /// All simple origin–destination paths as edge index lists.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        fn walk<T: Float>(
            net: &Network<T>,
            v: usize,
            visited: &mut Vec<bool>,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if v == net.destination {
                out.push(path.clone());
                return;
            }
            for (e, &(t, h)) in net.edges.iter().enumerate() {
                if t == v && !visited[h] {
                    visited[h] = true;
                    path.push(e);
                    walk(net, h, visited, path, out);
                    path.pop();
                    visited[h] = false;
                }
            }
        }
        let mut visited = vec![false; self.node_count()];
        visited[self.origin] = true;
        let mut out = Vec::new();
        walk(self, self.origin, &mut visited, &mut Vec::new(), &mut out);
        out
    }

    /// Total latency `Σ aᵢxᵢ` along a path.
    pub fn path_latency(&self, flows: &Vector<T>, path: &[usize]) -> T {
        path.iter().fold(T::zero(), |acc, &e| acc + self.slopes[e] * flows[e])
    }

    /// Edges of a fewest-hop origin–destination path.
    fn shortest_hop_path(&self) -> Vec<usize> {
        let mut via: Vec<Option<usize>> = vec![None; self.node_count()];
        let mut seen = vec![false; self.node_count()];
        seen[self.origin] = true;
        let mut queue = VecDeque::from([self.origin]);
        while let Some(v) = queue.pop_front() {
            for (e, &(t, h)) in self.edges.iter().enumerate() {
                if t == v && !seen[h] {
                    seen[h] = true;
                    via[h] = Some(e);
                    queue.push_back(h);
                }
            }
        }
        let mut path = Vec::new();
        let mut v = self.destination;
        while let Some(e) = via[v] {
            path.push(e);
            v = self.edges[e].0;
        }
        path.reverse();
        path
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses the line-oriented network format:
///
/// ```text
/// node <name>
/// edge <tail> <head> <slope>
/// origin <name>
/// destination <name>
/// ```
///
/// `#` starts a comment. Nodes must be declared before edges use them.
pub fn parse_network<T: Float>(text: &str) -> Result<Network<T>> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut slopes = Vec::new();
    let mut origin = None;
    let mut destination = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let bad = |message: String| Error::Parse { line, message };
        let content = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = content.split_whitespace().collect();
        let Some((&key, args)) = fields.split_first() else { continue };
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| bad(format!("unknown node `{name}`")))
        };
        match (key, args) {
            ("node", [name]) => {
                if !is_identifier(name) {
                    return Err(bad(format!("`{name}` is not a valid node name")));
                }
                if index.contains_key(*name) {
                    return Err(bad(format!("node `{name}` declared twice")));
                }
                index.insert(name.to_string(), names.len());
                names.push(name.to_string());
            }
            ("edge", [tail, head, slope]) => {
                let t = lookup(tail)?;
                let h = lookup(head)?;
                let a: f64 = slope
                    .parse()
                    .map_err(|_| bad(format!("`{slope}` is not a number")))?;
                edges.push((t, h));
                slopes.push(T::lit(a));
            }
            ("origin", [name]) => origin = Some(lookup(name)?),
            ("destination", [name]) => destination = Some(lookup(name)?),
            ("node" | "edge" | "origin" | "destination", _) => {
                return Err(bad(format!("wrong number of fields for `{key}`")));
            }
            _ => return Err(bad(format!("unknown directive `{key}`"))),
        }
    }
    let origin = origin.ok_or_else(|| Error::Validation("no origin declared".into()))?;
    let destination = destination.ok_or_else(|| Error::Validation("no destination declared".into()))?;
    Network::new(names, edges, slopes, origin, destination)
}

/// Conservation constraints with the destination row removed.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBalance<T: Float> {
    /// Reduced incidence matrix, `(nodes − 1) × edges`.
    pub b: Mat<T>,
    /// Node index of each retained row.
    pub nodes: Vec<usize>,
    origin_row: usize,
}

impl<T: Float> FlowBalance<T> {
    /// Reduced injections: `θ` at the origin row, zero elsewhere.
    pub fn delta(&self, theta: T) -> Vector<T> {
        let mut d = Vector::zeros(self.nodes.len());
        d[self.origin_row] = theta;
        d
    }

    pub fn origin_row(&self) -> usize {
        self.origin_row
    }
}

pub fn incidence_and_divergence<T: Float>(net: &Network<T>) -> FlowBalance<T> {
    let full = net.incidence();
    let nodes: Vec<usize> = (0..net.node_count()).filter(|&v| v != net.destination).collect();
    let b = Mat::from_fn(nodes.len(), net.edge_count(), |i, e| full[(nodes[i], e)]);
    let origin_row = nodes.iter().position(|&v| v == net.origin).expect("origin is retained");
    FlowBalance { b, nodes, origin_row }
}

/// Scalar Lagrangian `Σ aᵢxᵢ²/2 + λᵀ(Bx − δ(θ))` on the reduced constraints.
pub fn lagrangian_value<T: Float>(net: &Network<T>, x: &Vector<T>, lambda: &Vector<T>, theta: T) -> T {
    let bal = incidence_and_divergence(net);
    let half = T::lit(0.5);
    let potential = x
        .iter()
        .zip(net.slopes())
        .fold(T::zero(), |acc, (xi, a)| acc + half * *a * *xi * *xi);
    potential + lambda.dot(&(&bal.b * x - bal.delta(theta)))
}

/// Saddle loss over `x̃ = (x, λ)` parameterized by the scalar inflow `θ`.
///
/// The regulated field is `(a∘x + Bᵀλ, δ(θ) − Bx)`; its Jacobian
/// `[[diag(a), Bᵀ], [−B, 0]]` is supplied analytically.
pub fn lagrangian_loss<T: Float>(net: &Network<T>) -> Result<LossModel<T>> {
    let bal = incidence_and_divergence(net);
    let m = net.edge_count();
    let k = bal.nodes.len();
    let a = Vector::from_column_slice(net.slopes());
    let b = bal.b.clone();
    let o = bal.origin_row;
    let (a_g, b_g) = (a.clone(), b.clone());
    let mut hess = Mat::zeros(m + k, m + k);
    hess.view_mut((0, 0), (m, m)).copy_from(&Mat::from_diagonal(&a));
    hess.view_mut((0, m), (m, k)).copy_from(&b.transpose());
    hess.view_mut((m, 0), (k, m)).copy_from(&-&b);
    let mut jac = Mat::zeros(m + k, 1);
    jac[(m + o, 0)] = T::one();
    LossModel::with_kind(
        m + k,
        1,
        move |xt, th| {
            let x = xt.rows(0, m);
            let lambda = xt.rows(m, k);
            let mut g = Vector::zeros(m + k);
            g.rows_mut(0, m).copy_from(&(x.component_mul(&a_g) + b_g.transpose() * lambda));
            let mut balance = -(&b_g * x);
            balance[o] += th[0];
            g.rows_mut(m, k).copy_from(&balance);
            g
        },
        Vector::zeros(m + k),
        LossKind::Saddle,
    )?
    .with_hessian(move |_, _| hess.clone())?
    .with_jacobian_xtheta(move |_, _| jac.clone())
}

/// `θ(t) = θ₀ − θ₁cos(ω₁t + φ₁) − θ₂cos(ω₂t + φ₂)` in vehicles per hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflowModel<T> {
    pub theta0: T,
    pub theta1: T,
    pub theta2: T,
    pub omega1: T,
    pub omega2: T,
    pub phi1: T,
    pub phi2: T,
}

impl<T: Float> InflowModel<T> {
    /// Mean 3, slow swing 1 at 0.1 rad/h, fast swing 0.1 at √50 rad/h.
    pub fn reference() -> Self {
        InflowModel {
            theta0: T::lit(3.0),
            theta1: T::one(),
            theta2: T::lit(0.1),
            omega1: T::lit(0.1),
            omega2: T::lit(50.0).sqrt(),
            phi1: T::zero(),
            phi2: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.theta0, self.theta1, self.theta2, self.omega1, self.omega2, self.phi1, self.phi2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("inflow parameters must be finite".into()));
        }
        if !(self.theta1 >= T::zero() && self.theta2 >= T::zero()) {
            return Err(Error::Validation("inflow amplitudes must be nonnegative".into()));
        }
        if !(self.theta0 > self.theta1 && self.theta0 > self.theta2) {
            return Err(Error::Validation("the mean inflow must exceed both amplitudes".into()));
        }
        if !(self.omega1 > T::zero() && self.omega2 > self.omega1) {
            return Err(Error::Validation("frequencies need 0 < omega1 < omega2".into()));
        }
        Ok(())
    }

    pub fn at(&self, t: T) -> T {
        self.theta0
            - self.theta1 * (self.omega1 * t + self.phi1).cos()
            - self.theta2 * (self.omega2 * t + self.phi2).cos()
    }
}

/// Harmonic exosystem whose linear readout reproduces an [`InflowModel`].
#[derive(Debug, Clone)]
pub struct InflowExosystem<T: Float> {
    pub exosystem: Exosystem<T>,
    /// `1 × 5` readout `c` with inflow `cᵀθ`.
    pub readout: Mat<T>,
    /// State at `t = 0`.
    pub initial_state: Vector<T>,
}

/// Blocks `(−θₖcos(ωₖt + φₖ), d/dt)` for both harmonics, then the constant
/// `θ₀`; the readout sums the three positions.
pub fn inflow_exosystem<T: Float>(inflow: &InflowModel<T>) -> Result<InflowExosystem<T>> {
    inflow.validate()?;
    let exosystem = Exosystem::harmonic_bank(&[inflow.omega1, inflow.omega2], true)?;
    let readout = Mat::from_row_slice(1, 5, &[T::one(), T::zero(), T::one(), T::zero(), T::one()]);
    let block = |amp: T, w: T, phi: T| (-amp * phi.cos(), amp * w * phi.sin());
    let (p1, v1) = block(inflow.theta1, inflow.omega1, inflow.phi1);
    let (p2, v2) = block(inflow.theta2, inflow.omega2, inflow.phi2);
    let initial_state = Vector::from_column_slice(&[p1, v1, p2, v2, inflow.theta0]);
    Ok(InflowExosystem { exosystem, readout, initial_state })
}

/// Clamps the flow entries (the first `edge_count`) at zero; multipliers
/// pass through.
pub fn project_nonneg<T: Float>(xtilde: &Vector<T>, edge_count: usize) -> Vector<T> {
    let mut out = xtilde.clone();
    for v in out.rows_mut(0, edge_count.min(xtilde.len())).iter_mut() {
        *v = v.max(T::zero());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct WardropSolution<T: Float> {
    pub flows: Vector<T>,
    /// Multipliers of the reduced conservation constraints.
    pub multipliers: Vector<T>,
    pub kkt_residual: T,
}

/// KKT residual of `(x, λ)` for the static problem at inflow `θ`:
/// the norm of `(min(x, a∘x + Bᵀλ), Bx − δ(θ))`.
pub fn kkt_residual<T: Float>(net: &Network<T>, flows: &Vector<T>, multipliers: &Vector<T>, inflow: T) -> T {
    let bal = incidence_and_divergence(net);
    let reduced = flows.component_mul(&Vector::from_column_slice(net.slopes())) + bal.b.transpose() * multipliers;
    let comp = flows.zip_map(&reduced, |x, r| x.min(r));
    let primal = &bal.b * flows - bal.delta(inflow);
    (comp.norm_squared() + primal.norm_squared()).sqrt()
}

/// Tolerance on the final KKT residual of [`solve_static_wardrop`].
pub const WARDROP_TOL: f64 = 1e-9;

/// Wardrop equilibrium at a frozen inflow by a primal active-set method.
///
/// Starts from all flow on a fewest-hop path. Each iteration solves the
/// equality-constrained problem on the free edges through a pseudo-inverse
/// of its KKT matrix, then either steps to the nearest blocking edge or
/// releases the edge with the most negative reduced cost.
pub fn solve_static_wardrop<T: Float>(net: &Network<T>, inflow: T) -> Result<WardropSolution<T>> {
    if !(inflow >= T::zero()) || !inflow.is_finite() {
        return Err(Error::Precondition("inflow must be nonnegative".into()));
    }
    let bal = incidence_and_divergence(net);
    let m = net.edge_count();
    let k = bal.nodes.len();
    let a = net.slopes();
    let delta = bal.delta(inflow);
    let scale = T::one().max(inflow);
    let tol = T::lit(1e-12) * scale;

    let mut x = Vector::zeros(m);
    for e in net.shortest_hop_path() {
        x[e] = inflow;
    }
    let mut active: Vec<bool> = x.iter().map(|v| *v == T::zero()).collect();
    let mut lambda = Vector::zeros(k);
    let cap = 100 + 20 * m;

    for iter in 0..cap {
        let free: Vec<usize> = (0..m).filter(|&e| !active[e]).collect();
        let f = free.len();
        let mut kkt = Mat::zeros(f + k, f + k);
        for (i, &e) in free.iter().enumerate() {
            kkt[(i, i)] = a[e];
            for r in 0..k {
                kkt[(i, f + r)] = bal.b[(r, e)];
                kkt[(f + r, i)] = bal.b[(r, e)];
            }
        }
        let mut rhs = Vector::zeros(f + k);
        rhs.rows_mut(f, k).copy_from(&delta);
        let sol = pseudo_inverse(&kkt, T::lit(1e-12))? * rhs;
        lambda = sol.rows(f, k).clone_owned();
        let mut target = Vector::zeros(m);
        for (i, &e) in free.iter().enumerate() {
            target[e] = sol[i];
        }
        let step = &target - &x;

        if step.amax() <= tol {
            let reduced = bal.b.transpose() * &lambda;
            let worst = (0..m)
                .filter(|&e| active[e])
                .map(|e| (e, reduced[e]))
                .fold(None, |acc: Option<(usize, T)>, (e, v)| match acc {
                    Some((_, best)) if best <= v => acc,
                    _ => Some((e, v)),
                });
            match worst {
                Some((e, v)) if v < -tol => active[e] = false,
                _ => {
                    let kkt_residual = kkt_residual(net, &x, &lambda, inflow);
                    if kkt_residual > T::lit(WARDROP_TOL) * scale {
                        return Err(Error::NonConvergence {
                            iterations: iter + 1,
                            residual: kkt_residual.to_f64_lossy(),
                        });
                    }
                    return Ok(WardropSolution { flows: x, multipliers: lambda, kkt_residual });
                }
            }
        } else {
            let mut alpha = T::one();
            let mut blocking = None;
            for &e in &free {
                if step[e] < T::zero() {
                    let ratio = -x[e] / step[e];
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(e);
                    }
                }
            }
            x += step * alpha;
            if let Some(e) = blocking {
                x[e] = T::zero();
                active[e] = true;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: cap,
        residual: kkt_residual(net, &x, &lambda, inflow).to_f64_lossy(),
    })
}

/// The assembled tracking problem: saddle loss over the inflow exosystem
/// state, with the flows clamped at zero before each gradient evaluation.
#[derive(Debug, Clone)]
pub struct TrafficProblem<T: Float> {
    pub network: Network<T>,
    pub inflow: InflowModel<T>,
    pub source: InflowExosystem<T>,
    /// Saddle loss over `x̃ = (x, λ)` and the 5-dimensional exosystem state.
    pub loss: LossModel<T>,
}

impl<T: Float> TrafficProblem<T> {
    pub fn new(network: Network<T>, inflow: InflowModel<T>) -> Result<Self> {
        let source = inflow_exosystem(&inflow)?;
        let loss = lagrangian_loss(&network)?.reparameterize(source.readout.clone())?;
        Ok(TrafficProblem { network, inflow, source, loss })
    }

    /// `H_c = −R̃⁻¹Q̃` and the observer-based controller built on it.
    pub fn synthesize(&self, margin: T) -> Result<(ParameterFeedbackMap<T>, GradientFeedbackAlgorithm<T>)> {
        let (r, q) = self.loss.base_jacobians()?;
        let hc = quadratic_hc(&r, &q, T::lit(1e-9))?;
        let alg = algorithm_one(&self.source.exosystem, &self.loss, &hc, margin)?;
        Ok((hc, alg))
    }

    /// Runs the loop from `z(0) = 0` with the flow projection in place.
    pub fn simulate(&self, alg: &GradientFeedbackAlgorithm<T>, cfg: &IntegratorConfig<T>) -> Result<Trajectory<T>> {
        let m = self.network.edge_count();
        let proj = move |v: &Vector<T>| project_nonneg(v, m);
        integrate_coupled(
            alg,
            &self.source.exosystem,
            &self.loss,
            &Vector::zeros(alg.n_c()),
            &self.source.initial_state,
            cfg,
            Some(&proj),
        )
    }

    /// Scalar inflow carried by an exosystem state.
    pub fn inflow_of(&self, theta: &Vector<T>) -> T {
        (&self.source.readout * theta)[0]
    }

    /// Per-sample assessment of a trajectory against the static problem.
    pub fn assess(&self, traj: &Trajectory<T>) -> Result<Vec<TrafficSample<T>>> {
        let m = self.network.edge_count();
        let bal = incidence_and_divergence(&self.network);
        let internal: Vec<usize> = (0..bal.nodes.len()).filter(|&r| r != bal.origin_row()).collect();
        let mut out = Vec::with_capacity(traj.len());
        for k in 0..traj.len() {
            let inflow = self.inflow_of(&traj.theta[k]);
            let x = traj.x[k].rows(0, m).clone_owned();
            let lambda = traj.x[k].rows(m, traj.x[k].len() - m).clone_owned();
            let oracle = solve_static_wardrop(&self.network, inflow)?;
            let balance = &bal.b * &x;
            let conservation = internal.iter().fold(T::zero(), |acc, &r| acc.max(balance[r].abs()));
            out.push(TrafficSample {
                time: traj.times[k],
                inflow,
                kkt_residual: kkt_residual(&self.network, &x, &lambda, inflow),
                conservation_error: conservation,
                oracle_gap: (&x - &oracle.flows).amax(),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficSample<T> {
    pub time: T,
    pub inflow: T,
    /// KKT residual of `(x(t), λ(t))` for the problem frozen at `θ(t)`.
    pub kkt_residual: T,
    /// Largest conservation violation over the internal nodes.
    pub conservation_error: T,
    /// `max |x(t) − x*(θ(t))|` against the static oracle.
    pub oracle_gap: T,
}

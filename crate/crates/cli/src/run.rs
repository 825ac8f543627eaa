//! Scenario pipelines: build the problem, synthesize, simulate, summarize.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use imtrack::loss::{quadratic_loss, quartic_example_loss};
use imtrack::mismatch::{
    asymptotic_gradient_bound, asymptotic_gradient_constant, asymptotic_gradient_limit, default_probes,
    error_system, jordan_example, simulate_mismatch, GradientLimit,
};
use imtrack::recipes::{random_constant_mismatch_loop, random_quadratic_problem, rng_from_seed};
use imtrack::regulator::{
    algorithm_one, center_manifold_residual, closed_loop_jacobian, quadratic_hc, sample_ball, DEFAULT_SAMPLE_COUNT,
};
use imtrack::simulate::{integrate_coupled, integrate_parameter_feedback, tracking_metrics};
use imtrack::spectral::{eigenvalues, is_detectable, operator_norm, DEFAULT_RANK_TOL};
use imtrack::traffic::{parse_network, InflowModel, TrafficProblem, DEFAULT_NETWORK};
use imtrack::{
    Error, Exosystem, GradientFeedbackAlgorithm, IntegratorConfig, LinearClosedLoop, LossModel, Matrix,
    ParameterFeedbackMap, Trajectory, Vec64,
};
use serde::Serialize;

use crate::config::{resolve, vector, Controller, Kind, MismatchModel, Scenario};

pub const SCHEMA_VERSION: u32 = 1;

/// Failures split by whether the scenario file itself is at fault.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Failure(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Failure(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            RunError::Config(m) | RunError::Failure(m) => m,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Infeasible { .. } => RunError::Failure(format!("image containment (Im Q ⊆ Im R) fails: {e}")),
            Error::Synthesis(ref m) if m.contains("detectable") => {
                RunError::Failure(format!("detectability of (Q, S) fails: {e}"))
            }
            Error::Validation(_) | Error::Dimension(_) | Error::Parse { .. } => RunError::Config(e.to_string()),
            _ => RunError::Failure(e.to_string()),
        }
    }
}

type Res<T> = Result<T, RunError>;

fn cfg_err(m: impl Into<String>) -> RunError {
    RunError::Config(m.into())
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub kind: Kind,
    pub controller: Controller,
    pub seed: u64,
    pub margin: f64,
    pub t_end: f64,
    pub samples: usize,
    pub synthesis: SynthesisReport,
    pub center_manifold: CenterManifoldReport,
    pub tracking: TrackingReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quartic: Option<QuarticReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<MismatchReport>,
    pub trajectory_csv: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    pub detectable: bool,
    /// Spectral abscissa of `S − LQ`; absent without an observer.
    pub observer_abscissa: Option<f64>,
    /// Spectral abscissa of the linearized closed loop; absent for static feedback.
    pub closed_loop_abscissa: Option<f64>,
    pub gain_norm: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CenterManifoldReport {
    /// Invariance residual of the controller on the manifold.
    pub dynamics: f64,
    /// Gradient left on the manifold.
    pub gradient: f64,
    /// Sampling radius in parameter space; absent when the residual is exact.
    pub radius: Option<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackingReport {
    pub y_initial_norm: f64,
    pub y_final_norm: f64,
    pub y_tail_sup: f64,
    pub observer_gap_tail_sup: Option<f64>,
    pub decay_rate_estimate: f64,
    pub tail_fraction: f64,
    pub divergence_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuarticReport {
    pub theta: f64,
    /// Critical point returned by the feedback map at `theta`.
    pub critical_point: f64,
    pub x_final: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrafficReport {
    pub nodes: usize,
    pub edges: usize,
    pub settle_threshold: f64,
    /// First time after which the KKT residual stays below the threshold.
    pub settle_time: Option<f64>,
    pub kkt_final: f64,
    pub kkt_max_after_transient: f64,
    pub conservation_max: f64,
    pub oracle_gap_max_after_transient: f64,
    pub transient: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MismatchReport {
    pub delta_norm: f64,
    pub error_system_abscissa: f64,
    /// `finite` or `divergent`.
    pub verdict: &'static str,
    /// Limit of `y` when finite.
    pub y_inf: Option<Vec<f64>>,
    pub growth_exponent: Option<f64>,
    /// Norm bound on `y∞`, available for a constant exosystem.
    pub y_inf_bound: Option<f64>,
    /// `‖y(t_end)‖ / ‖y(t_end/10)‖`.
    pub growth_ratio: Option<f64>,
}

pub struct Outcome {
    pub summary: Summary,
    pub trajectory: Trajectory,
}

/// Builds and synthesizes the scenario; with `simulate` also integrates and
/// analyses it.
pub fn execute(sc: &Scenario, simulate: bool) -> Res<Option<Outcome>> {
    sc.validate().map_err(RunError::Config)?;
    let cfg = sc.integrator.build().map_err(RunError::Config)?;
    let run = match sc.kind {
        Kind::Quadratic => {
            let sec = sc.quadratic.as_ref().unwrap();
            let prob = random_quadratic_problem::<f64>(sc.seed, sec.dimension)?;
            let theta0 = match &sec.theta0 {
                Some(t) => vector(t, "quadratic.theta0").map_err(RunError::Config)?,
                None => prob.theta0.clone(),
            };
            let z0 = Vec64::zeros(prob.exosystem.dim());
            linear_quadratic(sc, &cfg, prob.r, prob.q, prob.exosystem, theta0, z0, simulate)?
        }
        Kind::Custom => {
            let sec = sc.custom.as_ref().unwrap();
            let base = sc.base_dir.as_deref();
            let r = sec.r.load("custom.r", base).map_err(RunError::Config)?;
            let q = sec.q.load("custom.q", base).map_err(RunError::Config)?;
            let exo = match (&sec.s, &sec.frequencies) {
                (Some(s), _) => Exosystem::linear(s.load("custom.s", base).map_err(RunError::Config)?)?,
                (None, Some(w)) => Exosystem::harmonic_bank(w, sec.constant)?,
                (None, None) => unreachable!("validated"),
            };
            let theta0 = vector(&sec.theta0, "custom.theta0").map_err(RunError::Config)?;
            let z0 = match &sec.z0 {
                Some(z) => vector(z, "custom.z0").map_err(RunError::Config)?,
                None => Vec64::zeros(exo.dim()),
            };
            linear_quadratic(sc, &cfg, r, q, exo, theta0, z0, simulate)?
        }
        Kind::Quartic => quartic(sc, &cfg, simulate)?,
        Kind::Traffic => traffic(sc, &cfg, simulate)?,
        Kind::Mismatch => mismatch(sc, &cfg, simulate)?,
    };
    Ok(run)
}

fn base_summary(sc: &Scenario, cfg: &IntegratorConfig, synthesis: SynthesisReport, cm: CenterManifoldReport, tracking: TrackingReport) -> Summary {
    Summary {
        schema_version: SCHEMA_VERSION,
        scenario: sc.name.clone(),
        description: sc.description.clone(),
        kind: sc.kind,
        controller: sc.controller,
        seed: sc.seed,
        margin: sc.margin,
        t_end: cfg.t_end,
        samples: cfg.samples,
        synthesis,
        center_manifold: cm,
        tracking,
        quartic: None,
        traffic: None,
        mismatch: None,
        trajectory_csv: sc.output.trajectory.clone(),
    }
}

fn tracking_report(traj: &Trajectory, tail_fraction: f64, observer_gap: bool) -> Res<TrackingReport> {
    let m = tracking_metrics(traj, tail_fraction)?;
    let norms = traj.y_norms();
    Ok(TrackingReport {
        y_initial_norm: norms[0],
        y_final_norm: *norms.last().unwrap(),
        y_tail_sup: m.y_tail_sup,
        observer_gap_tail_sup: if observer_gap { m.observer_gap_tail_sup } else { None },
        decay_rate_estimate: m.decay_rate_estimate,
        tail_fraction,
        divergence_time: traj.divergence,
    })
}

fn abscissa(m: &Matrix) -> Res<f64> {
    Ok(eigenvalues(m)?.spectral_abscissa)
}

/// Observer and closed-loop spectra of a synthesized algorithm.
fn synthesis_report(
    alg: &GradientFeedbackAlgorithm,
    exo: &Exosystem,
    loss: &LossModel,
    observer_gain: &Matrix,
) -> Res<SynthesisReport> {
    let (_, q) = loss.base_jacobians()?;
    let s = exo.jacobian_at_origin();
    Ok(SynthesisReport {
        detectable: is_detectable(&q, s, DEFAULT_RANK_TOL)?,
        observer_abscissa: Some(abscissa(&(s - observer_gain * &q))?),
        closed_loop_abscissa: Some(closed_loop_jacobian(alg, loss)?.spectral_abscissa),
        gain_norm: Some(operator_norm(observer_gain)?),
    })
}

fn manifold_report(
    sc: &Scenario,
    alg: &GradientFeedbackAlgorithm,
    exo: &Exosystem,
    loss: &LossModel,
    radius: f64,
) -> Res<CenterManifoldReport> {
    let mut rng = rng_from_seed(sc.seed);
    let thetas = sample_ball(&mut rng, exo.dim(), radius, DEFAULT_SAMPLE_COUNT);
    let r = center_manifold_residual(alg, exo, loss, &thetas)?;
    Ok(CenterManifoldReport {
        dynamics: r.dynamics,
        gradient: r.gradient,
        radius: Some(radius),
        sample_count: thetas.len(),
    })
}

#[allow(clippy::too_many_arguments)]
fn linear_quadratic(
    sc: &Scenario,
    cfg: &IntegratorConfig,
    r: Matrix,
    q: Matrix,
    exo: Exosystem,
    theta0: Vec64,
    z0: Vec64,
    simulate: bool,
) -> Res<Option<Outcome>> {
    let p = exo.dim();
    if q.ncols() != p || theta0.len() != p || z0.len() != p {
        return Err(cfg_err(format!(
            "dimensions disagree: exosystem {p}, Q has {} columns, theta0 {} and z0 {} entries",
            q.ncols(),
            theta0.len(),
            z0.len()
        )));
    }
    let loss = quadratic_loss(r.clone(), q.clone())?;
    let hc = quadratic_hc(&r, &q, DEFAULT_RANK_TOL)?;
    let radius = 1.0;

    let (synthesis, cm, traj, observer) = match sc.controller {
        Controller::ParameterFeedback => {
            let synthesis = SynthesisReport {
                detectable: is_detectable(&q, exo.jacobian_at_origin(), DEFAULT_RANK_TOL)?,
                observer_abscissa: None,
                closed_loop_abscissa: None,
                gain_norm: None,
            };
            let mut rng = rng_from_seed(sc.seed);
            let thetas = sample_ball(&mut rng, p, radius, DEFAULT_SAMPLE_COUNT);
            let gradient = thetas
                .iter()
                .map(|th| hc.apply(th).map(|x| loss.gradient(&x, th).norm()))
                .try_fold(0.0f64, |a, g| g.map(|g| a.max(g)))?;
            let cm = CenterManifoldReport {
                dynamics: 0.0,
                gradient,
                radius: Some(radius),
                sample_count: thetas.len(),
            };
            if !simulate {
                return Ok(None);
            }
            (synthesis, cm, integrate_parameter_feedback(&hc, &exo, &loss, &theta0, cfg)?, false)
        }
        Controller::InternalModel | Controller::NoInternalModel => {
            let full = algorithm_one(&exo, &loss, &hc, sc.margin)?;
            let alg = if sc.controller == Controller::NoInternalModel {
                full.without_internal_model(&exo)?
            } else {
                full
            };
            let synthesis = synthesis_report(&alg, &exo, &loss, alg.gain())?;
            let cm = manifold_report(sc, &alg, &exo, &loss, radius)?;
            if !simulate {
                return Ok(None);
            }
            (synthesis, cm, integrate_coupled(&alg, &exo, &loss, &z0, &theta0, cfg, None)?, true)
        }
    };
    let tracking = tracking_report(&traj, sc.output.tail_fraction, observer)?;
    Ok(Some(Outcome {
        summary: base_summary(sc, cfg, synthesis, cm, tracking),
        trajectory: traj,
    }))
}

fn quartic(sc: &Scenario, cfg: &IntegratorConfig, simulate: bool) -> Res<Option<Outcome>> {
    let sec = sc.quartic.as_ref().unwrap();
    let loss = quartic_example_loss::<f64>();
    let exo = Exosystem::linear(Matrix::zeros(1, 1))?;
    let hc = ParameterFeedbackMap::newton(loss.clone(), sec.tol, sec.max_iter)?;
    let alg = algorithm_one(&exo, &loss, &hc, sc.margin)?;
    let synthesis = synthesis_report(&alg, &exo, &loss, alg.gain())?;
    // the nondegenerate branch only exists near θ = 0
    let radius = sec.theta0.abs().max(0.01);
    let cm = manifold_report(sc, &alg, &exo, &loss, radius)?;
    let theta0 = Vec64::from_element(1, sec.theta0);
    let critical_point = hc.apply(&theta0)?[0];
    if !simulate {
        return Ok(None);
    }
    let traj = integrate_coupled(&alg, &exo, &loss, &Vec64::zeros(1), &theta0, cfg, None)?;
    let tracking = tracking_report(&traj, sc.output.tail_fraction, true)?;
    let mut summary = base_summary(sc, cfg, synthesis, cm, tracking);
    summary.quartic = Some(QuarticReport {
        theta: sec.theta0,
        critical_point,
        x_final: traj.x.last().map_or(f64::NAN, |x| x[0]),
    });
    Ok(Some(Outcome { summary, trajectory: traj }))
}

fn traffic(sc: &Scenario, cfg: &IntegratorConfig, simulate: bool) -> Res<Option<Outcome>> {
    let sec = sc.traffic.as_ref().unwrap();
    let text = match &sec.network {
        Some(path) => {
            let full = resolve(path, sc.base_dir.as_deref());
            fs::read_to_string(&full).map_err(|e| cfg_err(format!("cannot read network {}: {e}", full.display())))?
        }
        None => DEFAULT_NETWORK.to_string(),
    };
    let network = parse_network::<f64>(&text).map_err(|e| cfg_err(format!("network: {e}")))?;
    let i = &sec.inflow;
    let inflow = InflowModel {
        theta0: i.theta0,
        theta1: i.theta1,
        theta2: i.theta2,
        omega1: i.omega1,
        omega2: i.omega2,
        phi1: i.phi1,
        phi2: i.phi2,
    };
    let problem = TrafficProblem::new(network, inflow)?;
    let (_, alg) = problem.synthesize(sc.margin)?;
    let exo = &problem.source.exosystem;
    let synthesis = synthesis_report(&alg, exo, &problem.loss, alg.gain())?;
    let cm = manifold_report(sc, &alg, exo, &problem.loss, 1.0)?;
    if !simulate {
        return Ok(None);
    }
    let traj = problem.simulate(&alg, cfg)?;
    let tracking = tracking_report(&traj, sc.output.tail_fraction, true)?;
    let samples = problem.assess(&traj)?;

    let settle_time = match samples.iter().rposition(|s| !(s.kkt_residual < sec.settle_threshold)) {
        None => samples.first().map(|s| s.time),
        Some(k) => samples.get(k + 1).map(|s| s.time),
    };
    let late = samples.iter().filter(|s| s.time >= sec.transient);
    let fold_max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
    let mut summary = base_summary(sc, cfg, synthesis, cm, tracking);
    summary.traffic = Some(TrafficReport {
        nodes: problem.network.node_count(),
        edges: problem.network.edge_count(),
        settle_threshold: sec.settle_threshold,
        settle_time,
        kkt_final: samples.last().map_or(f64::NAN, |s| s.kkt_residual),
        kkt_max_after_transient: fold_max(&mut late.clone().map(|s| s.kkt_residual)),
        conservation_max: fold_max(&mut samples.iter().map(|s| s.conservation_error)),
        oracle_gap_max_after_transient: fold_max(&mut late.map(|s| s.oracle_gap)),
        transient: sec.transient,
    });
    Ok(Some(Outcome { summary, trajectory: traj }))
}

fn mismatch(sc: &Scenario, cfg: &IntegratorConfig, simulate: bool) -> Res<Option<Outcome>> {
    let sec = sc.mismatch.as_ref().unwrap();
    let base = sc.base_dir.as_deref();
    let load = |spec: &Option<crate::config::MatrixSpec>, what: &str| -> Res<Matrix> {
        spec.as_ref().unwrap().load(what, base).map_err(RunError::Config)
    };
    let given_theta = sec
        .theta0
        .as_ref()
        .map(|t| vector(t, "mismatch.theta0"))
        .transpose()
        .map_err(RunError::Config)?;
    let (cl, theta0): (LinearClosedLoop, Vec64) = match sec.model {
        MismatchModel::Jordan => (
            jordan_example(sec.eps1.unwrap(), sec.eps2.unwrap())?,
            given_theta.unwrap_or_else(|| Vec64::from_column_slice(&[-1.0, 1.0])),
        ),
        MismatchModel::Random => {
            let (cl, th) = random_constant_mismatch_loop(sc.seed, sec.dimension.unwrap())?;
            (cl, given_theta.unwrap_or(th))
        }
        MismatchModel::Explicit => {
            let sigma = sec.sigma.as_ref().map(|s| s.load("mismatch.sigma", base)).transpose().map_err(RunError::Config)?;
            let cl = LinearClosedLoop::new(
                load(&sec.a_c, "mismatch.a_c")?,
                load(&sec.b_c, "mismatch.b_c")?,
                load(&sec.g_c, "mismatch.g_c")?,
                load(&sec.r, "mismatch.r")?,
                load(&sec.q, "mismatch.q")?,
                load(&sec.s, "mismatch.s")?,
                sigma,
            )?;
            (cl, given_theta.unwrap())
        }
    };
    if theta0.len() != cl.s().nrows() {
        return Err(cfg_err(format!(
            "mismatch.theta0 has {} entries, exosystem dimension is {}",
            theta0.len(),
            cl.s().nrows()
        )));
    }
    let (a_err, delta) = error_system(&cl);
    let err_abscissa = abscissa(&a_err)?;
    let synthesis = SynthesisReport {
        detectable: is_detectable(cl.q(), cl.s(), DEFAULT_RANK_TOL)?,
        observer_abscissa: None,
        closed_loop_abscissa: Some(err_abscissa),
        gain_norm: None,
    };
    // on the graph z = Σθ the regulator equations are the manifold conditions
    let cm = CenterManifoldReport {
        dynamics: operator_norm(&delta)?,
        gradient: operator_norm(&(cl.r() * cl.g_c() * cl.sigma() + cl.q()))?,
        radius: None,
        sample_count: 0,
    };
    let limit = asymptotic_gradient_limit(&cl, &theta0, &default_probes::<f64>())?;
    let constant = cl.s().amax() == 0.0;
    let (verdict, y_inf, growth_exponent) = match limit {
        GradientLimit::Finite(g) => {
            let g = if constant { asymptotic_gradient_constant(&cl, &theta0)? } else { g };
            ("finite", Some(g.iter().copied().collect()), None)
        }
        GradientLimit::Divergent { growth_exponent } => ("divergent", None, Some(growth_exponent)),
    };
    let y_inf_bound = if constant { Some(asymptotic_gradient_bound(&cl, &theta0)?) } else { None };
    if !simulate {
        return Ok(None);
    }
    let traj = simulate_mismatch(&cl, &theta0, cfg)?;
    let tracking = tracking_report(&traj, sc.output.tail_fraction, false)?;
    let norms = traj.y_norms();
    let growth_ratio = {
        let t_ref = cfg.t_end / 10.0;
        let k = traj.times.iter().position(|&t| t >= t_ref - 1e-12 * cfg.t_end);
        match (k, norms.last()) {
            (Some(k), Some(last)) if norms[k] > 0.0 && traj.divergence.is_none() => Some(last / norms[k]),
            _ => None,
        }
    };
    let mut summary = base_summary(sc, cfg, synthesis, cm, tracking);
    summary.mismatch = Some(MismatchReport {
        delta_norm: operator_norm(&delta)?,
        error_system_abscissa: err_abscissa,
        verdict,
        y_inf,
        growth_exponent,
        y_inf_bound,
        growth_ratio,
    });
    Ok(Some(Outcome { summary, trajectory: traj }))
}

/// Writes the trajectory CSV and `summary.json` under `out/<name>/`.
pub fn write_outputs(sc: &Scenario, outcome: &Outcome, out: &Path) -> Res<PathBuf> {
    let dir = out.join(&sc.name);
    let io = |e: std::io::Error, p: &Path| RunError::Failure(format!("cannot write {}: {e}", p.display()));
    fs::create_dir_all(&dir).map_err(|e| io(e, &dir))?;
    let csv = dir.join(&sc.output.trajectory);
    let mut w = BufWriter::new(File::create(&csv).map_err(|e| io(e, &csv))?);
    outcome.trajectory.write_csv(&mut w).map_err(|e| io(e, &csv))?;
    w.flush().map_err(|e| io(e, &csv))?;
    let json = dir.join(&sc.output.summary);
    let mut text = serde_json::to_string_pretty(&outcome.summary).map_err(|e| RunError::Failure(e.to_string()))?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| io(e, &json))?;
    Ok(dir)
}

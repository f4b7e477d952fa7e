use std::path::{Path, PathBuf};

use lowrank_amp::amp::run_amp;
use lowrank_amp::io::{load_instance, save_instance};
use lowrank_amp::rng::derive_seed;
use lowrank_amp::spectral::{spectral_compare, MatrixKind};
use lowrank_amp::state_evolution::{
    prior_second_moment_matrix, se_fixed_point_uv, se_fixed_point_xkx, se_free_energy_uv,
    se_free_energy_xkx, se_mse, Quadrature, QuadratureSpec, SampleBank, SeState, SeStateUv, UvBanks,
};
use lowrank_amp::transitions::{iterate_b, transition_report, MrBank, Order};
use lowrank_amp::{generate_uv, generate_xkx, Matrix, Model, PlantedInstance, Prior};
use rayon::prelude::*;

use crate::config::{
    coupling_matrix, AmpConfig, Branch, CompareConfig, GenConfig, InstanceConfig, PhaseConfig, SeConfig,
    Solver, SpectralConfig,
};
use crate::error::{CliError, CliResult};
use crate::output::{opt, write_json, Csv};

/// Flags shared by every subcommand.
pub struct Globals {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn build_instance(cfg: &InstanceConfig) -> CliResult<PlantedInstance<f64>> {
    cfg.validate()?;
    let ch = cfg.channel.resolve(cfg.delta)?;
    Ok(match cfg.model {
        Model::Xkx => generate_xkx(&cfg.prior, &ch, &cfg.coupling()?, cfg.n, cfg.seed)?,
        Model::Uv => generate_uv(&cfg.prior, &cfg.prior_v(), &ch, cfg.n, cfg.alpha, cfg.seed)?,
    })
}

fn obtain_instance(file: Option<&PathBuf>, cfg: &InstanceConfig) -> CliResult<PlantedInstance<f64>> {
    match file {
        Some(p) => Ok(load_instance(p)?.0),
        None => build_instance(cfg),
    }
}

fn model_name(m: Model) -> &'static str {
    match m {
        Model::Xkx => "xkx",
        Model::Uv => "uv",
    }
}

pub fn gen(mut cfg: GenConfig, g: &Globals) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.instance.seed = s;
    }
    cfg.instance.validate()?;
    let out = g
        .out()
        .ok_or_else(|| CliError::field("out", "gen needs an output path"))?;
    let mut inst = build_instance(&cfg.instance)?;
    if cfg.blind {
        inst = inst.blind();
    }
    save_instance(out, &inst, serde_json::to_value(&cfg)?)?;
    println!(
        "wrote {}: model={} n={} m={} rank={} delta={} seed={} truth={}",
        out.display(),
        model_name(inst.model),
        inst.n,
        inst.m,
        inst.rank,
        inst.delta,
        inst.seed,
        inst.truth.is_some()
    );
    Ok(())
}

pub fn amp(mut cfg: AmpConfig, g: &Globals, trace: Option<&Path>) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.instance.seed = s;
        cfg.amp.seed = s;
    }
    if trace.is_some() {
        cfg.amp.trace = true;
    }
    cfg.amp.validate()?;
    let inst = obtain_instance(cfg.instance_file.as_ref(), &cfg.instance)?;
    let prior = cfg.prior.clone().unwrap_or_else(|| inst.prior.clone());
    let prior_v = cfg.prior_v.clone().or_else(|| inst.prior_v.clone());
    let (report, _) = run_amp(&inst, &prior, prior_v.as_ref(), &cfg.amp)?;
    write_json(g.out(), &cfg, "report", &report)?;
    if let Some(path) = trace {
        let mut csv = Csv::create(Some(path), &cfg, &["t", "diff", "mse", "overlap"])?;
        for row in &report.trace {
            csv.row(&[row.t.to_string(), row.diff.to_string(), opt(row.mse), opt(row.overlap)])?;
        }
        csv.finish()?;
    }
    eprintln!(
        "amp: converged={} iterations={} free_energy={}{}",
        report.converged,
        report.iterations,
        report.free_energy,
        report
            .sides
            .iter()
            .map(|s| format!(
                " mse_{}={}{}",
                s.name,
                s.mse,
                s.overlap.map(|o| format!(" overlap_{}={}", s.name, o.overlap)).unwrap_or_default()
            ))
            .collect::<String>()
    );
    Ok(())
}

fn is_community(p: &Prior<f64>) -> bool {
    matches!(p, Prior::Community { .. })
}

/// `Q = M = (1 − ε) μμᵀ + ε E[xxᵀ]`: a slightly informed start.
fn weak_overlap(prior: &Prior<f64>, eps: f64) -> Matrix<f64> {
    let mu = prior.mean();
    Matrix::outer(&mu, &mu)
        .scale(1.0 - eps)
        .add(&prior_second_moment_matrix(prior).scale(eps))
}

fn mc_samples(quad: &QuadratureSpec) -> CliResult<usize> {
    match quad.rule {
        Quadrature::MonteCarlo { samples } => Ok(samples),
        Quadrature::GaussHermite { .. } => Err(CliError::field(
            "quadrature",
            "the scalar community solver needs Monte Carlo quadrature",
        )),
    }
}

struct SeRow {
    delta: f64,
    b_or_tr_q: f64,
    mse: f64,
    free_energy: Option<f64>,
    converged: bool,
    iterations: usize,
    branch: Branch,
}

fn validate_se(cfg: &SeConfig) -> CliResult<()> {
    cfg.prior.validate()?;
    let r = cfg.prior.rank();
    if let Some(pv) = &cfg.prior_v {
        pv.validate()?;
        if pv.rank() != r {
            return Err(CliError::field("prior_v", "rank differs from `prior`"));
        }
    }
    if !(cfg.alpha > 0.0) {
        return Err(CliError::field("alpha", "must be positive"));
    }
    if !(cfg.tol > 0.0) {
        return Err(CliError::field("tol", "must be positive"));
    }
    if cfg.t_max == 0 {
        return Err(CliError::field("t_max", "must be at least 1"));
    }
    if !(cfg.init_scale > 0.0 && cfg.init_scale <= 1.0) {
        return Err(CliError::field("init_scale", "must lie in (0, 1]"));
    }
    if cfg.branches.is_empty() {
        return Err(CliError::field("branches", "need at least one branch"));
    }
    cfg.quadrature.validate(r)?;
    coupling_matrix(cfg.coupling.as_ref(), r)?;
    Ok(())
}

pub fn se(mut cfg: SeConfig, g: &Globals) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.quadrature.seed = s;
    }
    validate_se(&cfg)?;
    let deltas = cfg.sweep.points()?;
    let r = cfg.prior.rank();
    let k = coupling_matrix(cfg.coupling.as_ref(), r)?;
    let plain_community = cfg.model == Model::Xkx && is_community(&cfg.prior) && k == Matrix::identity(r);
    let solver = match cfg.solver {
        Solver::Auto if plain_community => Solver::Scalar,
        Solver::Auto => Solver::Matrix,
        Solver::Scalar if !plain_community => {
            return Err(CliError::field(
                "solver",
                "the scalar solver needs the XKX model, a community prior and identity coupling",
            ))
        }
        s => s,
    };
    let points: Vec<(f64, Branch)> = deltas
        .iter()
        .flat_map(|&d| cfg.branches.iter().map(move |&b| (d, b)))
        .collect();

    let rows: Vec<SeRow> = match (cfg.model, solver) {
        (Model::Xkx, Solver::Scalar) => {
            let bank = MrBank::new(r, mc_samples(&cfg.quadrature)?, cfg.quadrature.seed)?;
            let fe_bank = if cfg.free_energy {
                Some(SampleBank::build(&cfg.prior, &cfg.quadrature, "se", 0)?)
            } else {
                None
            };
            points
                .par_iter()
                .map(|&(delta, branch)| {
                    let b0 = match branch {
                        Branch::Uninformative => cfg.init_scale,
                        Branch::Informative => 1.0,
                    };
                    let fp = iterate_b(&bank, delta, b0, cfg.tol, cfg.t_max)?;
                    let free_energy = match &fe_bank {
                        Some(fb) => Some(se_free_energy_xkx(&SeState::community(r, fp.b), &cfg.prior, &k, delta, fb)?.value),
                        None => None,
                    };
                    Ok(SeRow {
                        delta,
                        b_or_tr_q: fp.b,
                        mse: fp.mse(r),
                        free_energy,
                        converged: fp.converged,
                        iterations: fp.iterations,
                        branch,
                    })
                })
                .collect::<CliResult<_>>()?
        }
        (Model::Xkx, _) => {
            let fe_bank = if cfg.free_energy {
                Some(SampleBank::build(&cfg.prior, &cfg.quadrature, "se", 0)?)
            } else {
                None
            };
            points
                .par_iter()
                .map(|&(delta, branch)| {
                    let init = match branch {
                        Branch::Uninformative => {
                            let q = weak_overlap(&cfg.prior, cfg.init_scale);
                            SeState::new(q.clone(), q)
                        }
                        Branch::Informative => SeState::informative(&cfg.prior),
                    };
                    let fp = se_fixed_point_xkx(&cfg.prior, &k, delta, &cfg.quadrature, init, cfg.tol, cfg.t_max)?;
                    let free_energy = match &fe_bank {
                        Some(fb) => Some(se_free_energy_xkx(&fp.state, &cfg.prior, &k, delta, fb)?.value),
                        None => None,
                    };
                    Ok(SeRow {
                        delta,
                        b_or_tr_q: fp.state.q.trace(),
                        mse: se_mse(&cfg.prior, &fp.state.q, &fp.state.m),
                        free_energy,
                        converged: fp.converged,
                        iterations: fp.iterations,
                        branch,
                    })
                })
                .collect::<CliResult<_>>()?
        }
        (Model::Uv, Solver::Scalar) => unreachable!("rejected above"),
        (Model::Uv, _) => {
            let pu = &cfg.prior;
            let pv = cfg.prior_v.clone().unwrap_or_else(|| pu.clone());
            let banks = if cfg.free_energy {
                Some(UvBanks::build(pu, &pv, &cfg.quadrature, 0)?)
            } else {
                None
            };
            points
                .par_iter()
                .map(|&(delta, branch)| {
                    let init = match branch {
                        Branch::Uninformative => {
                            let qu = weak_overlap(pu, cfg.init_scale);
                            let qv = weak_overlap(&pv, cfg.init_scale);
                            SeStateUv {
                                q_u: qu.clone(),
                                m_u: qu,
                                q_v: qv.clone(),
                                m_v: qv,
                                t: 0,
                            }
                        }
                        Branch::Informative => SeStateUv::informative(pu, &pv),
                    };
                    let fp = se_fixed_point_uv(pu, &pv, delta, cfg.alpha, &cfg.quadrature, init, cfg.tol, cfg.t_max)?;
                    let free_energy = match &banks {
                        Some(b) => Some(se_free_energy_uv(&fp.state, pu, &pv, delta, cfg.alpha, b)?.value),
                        None => None,
                    };
                    Ok(SeRow {
                        delta,
                        b_or_tr_q: fp.state.q_u.trace(),
                        mse: se_mse(pu, &fp.state.q_u, &fp.state.m_u),
                        free_energy,
                        converged: fp.converged,
                        iterations: fp.iterations,
                        branch,
                    })
                })
                .collect::<CliResult<_>>()?
        }
    };

    let scale = if cfg.rescale { (r * r) as f64 } else { 1.0 };
    let mut csv = Csv::create(
        g.out(),
        &cfg,
        &["delta", "b_or_trQ", "mse", "free_energy", "converged", "iterations", "branch"],
    )?;
    for row in rows {
        csv.row(&[
            (row.delta * scale).to_string(),
            row.b_or_tr_q.to_string(),
            row.mse.to_string(),
            opt(row.free_energy),
            row.converged.to_string(),
            row.iterations.to_string(),
            row.branch.name().into(),
        ])?;
    }
    csv.finish()
}

pub fn phase(mut cfg: PhaseConfig, g: &Globals) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.transition.seed = s;
    }
    if cfg.ranks.is_empty() {
        return Err(CliError::field("ranks", "need at least one rank"));
    }
    if let Some(&bad) = cfg.ranks.iter().find(|&&r| r < 2) {
        return Err(CliError::field("ranks", format!("rank {bad} is below 2")));
    }
    if cfg.transition.grid_points < 3 {
        return Err(CliError::field("grid_points", "need at least three grid points"));
    }
    let reports = cfg
        .ranks
        .par_iter()
        .map(|&r| transition_report::<f64>(r, &cfg.transition))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = Csv::create(
        g.out(),
        &cfg,
        &[
            "r",
            "delta_c",
            "delta_static",
            "delta_spinodal",
            "order",
            "static_times_4rlogr",
            "spinodal_times_2rlogr",
        ],
    )?;
    for rep in reports {
        csv.row(&[
            rep.r.to_string(),
            rep.delta_c.to_string(),
            opt(rep.delta_static),
            opt(rep.delta_spinodal),
            match rep.order {
                Order::First => "first".into(),
                Order::Second => "second".into(),
            },
            opt(rep.static_times_4rlogr()),
            opt(rep.spinodal_times_2rlogr()),
        ])?;
    }
    csv.finish()
}

pub fn spectral(mut cfg: SpectralConfig, g: &Globals) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.instance.seed = s;
        cfg.power.seed = s;
    }
    let inst = obtain_instance(cfg.instance_file.as_ref(), &cfg.instance)?;
    let report = spectral_compare(&inst, cfg.k, &cfg.power)?;
    let mut csv = Csv::create(g.out(), &cfg, &["matrix_kind", "index", "eigenvalue", "overlap"])?;
    for row in report.rows {
        csv.row(&[
            match row.matrix_kind {
                MatrixKind::S => "S".into(),
                MatrixKind::Y => "Y".into(),
            },
            row.index.to_string(),
            row.eigenvalue.to_string(),
            row.overlap.to_string(),
        ])?;
    }
    csv.finish()
}

/// State-evolution MSE reached from an uninformative start at `delta`.
fn reference_mse(cfg: &CompareConfig, k: &Matrix<f64>, bank: Option<&MrBank<f64>>, delta: f64) -> CliResult<f64> {
    let b0 = 1e-6;
    match bank {
        Some(bank) => Ok(iterate_b(bank, delta, b0, 1e-10, 20_000)?.mse(cfg.prior.rank())),
        None => {
            let q = weak_overlap(&cfg.prior, b0);
            let fp = se_fixed_point_xkx(&cfg.prior, k, delta, &cfg.quadrature, SeState::new(q.clone(), q), 1e-9, 5000)?;
            Ok(se_mse(&cfg.prior, &fp.state.q, &fp.state.m))
        }
    }
}

pub fn compare(mut cfg: CompareConfig, g: &Globals) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.amp.seed = s;
    }
    cfg.prior.validate()?;
    cfg.amp.validate()?;
    if cfg.n < 2 {
        return Err(CliError::field("n", "need at least two rows"));
    }
    if cfg.channels.is_empty() {
        return Err(CliError::field("channels", "need at least one channel"));
    }
    let r = cfg.prior.rank();
    cfg.quadrature.validate(r)?;
    let k = coupling_matrix(cfg.coupling.as_ref(), r)?;
    let deltas = cfg.sweep.points()?;
    for &d in &deltas {
        for ch in &cfg.channels {
            ch.resolve(Some(d))?;
        }
    }
    let bank = if is_community(&cfg.prior) && k == Matrix::identity(r) {
        Some(MrBank::new(r, mc_samples(&cfg.quadrature)?, cfg.quadrature.seed)?)
    } else {
        None
    };
    let references = deltas
        .par_iter()
        .map(|&d| reference_mse(&cfg, &k, bank.as_ref(), d))
        .collect::<CliResult<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..deltas.len())
        .flat_map(|i| (0..cfg.channels.len()).map(move |c| (i, c)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, c)| {
            let ch = cfg.channels[c].resolve(Some(deltas[i]))?;
            // the same planted X for every channel at a given Δ
            let seed = derive_seed(cfg.seed, "compare", i as u64);
            let inst = generate_xkx(&cfg.prior, &ch, &k, cfg.n, seed)?;
            let (rep, _) = run_amp(&inst, &cfg.prior, None, &cfg.amp)?;
            Ok(rep)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut csv = Csv::create(
        g.out(),
        &cfg,
        &["delta", "channel", "amp_mse", "se_mse", "overlap", "converged", "iterations"],
    )?;
    for (&(i, c), rep) in jobs.iter().zip(results) {
        csv.row(&[
            deltas[i].to_string(),
            cfg.channels[c].name().into(),
            opt(rep.mse()),
            references[i].to_string(),
            opt(rep.overlap()),
            rep.converged.to_string(),
            rep.iterations.to_string(),
        ])?;
    }
    csv.finish()
}

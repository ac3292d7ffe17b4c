//! Study drivers. Every driver returns a [`StudyResult`] whose records
//! carry the full parameter tuple that produced them.

use std::cmp::Ordering;
use std::time::Instant;

use num_complex::Complex64 as C64;
use qds_core::hp::{
    check_ito_unitarity, compatibility_mismatch, compatibility_mismatch_on, dual_steps, evans_hudson_flow,
    step_first_order, vacuum_expectation_flow, HPCoefficients, StepSequence, ToyFockGrid,
};
use qds_core::linalg::{self, CMat};
use qds_core::lindblad::{
    algebra_lindblad_superop, cp_certify, lindblad_form_superop, semigroup, shell_commutator_op, AlgebraGenerator,
    Flavor, Superoperator,
};
use qds_core::tensor_algebra::{
    embed_on_sites, make_window, matrix_unit_basis, shell_sites, Capacity, LocalOperator, ShellFamily, SiteIndex,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelSpec, Observables, ShellSource, StudySpec};
use crate::error::{LabError, Result};

/// Algebraic identities.
pub const ALGEBRAIC_TOL: f64 = 1e-12;
/// Identities mediated by a matrix exponential.
pub const EXPONENTIAL_TOL: f64 = 1e-10;
/// Allowed deviation of a fitted convergence order.
pub const ORDER_TOL: f64 = 0.15;
/// Errors at or below this are treated as exact in order fits.
pub const EXACT_TOL: f64 = 1e-12;

/// Pass criterion of a record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Check {
    AtMost(f64),
    AtLeast(f64),
    /// Negative controls: the value must exceed the threshold.
    Exceeds(f64),
    Near {
        target: f64,
        tolerance: f64,
    },
    Report,
}

impl Check {
    pub fn passes(self, value: f64) -> bool {
        match self {
            Check::AtMost(t) => value <= t,
            Check::AtLeast(t) => value >= t,
            Check::Exceeds(t) => value > t,
            Check::Near { target, tolerance } => (value - target).abs() <= tolerance,
            Check::Report => true,
        }
    }
}

/// Everything that identifies one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub study: String,
    pub model: String,
    pub flavor: String,
    pub seed: Option<u64>,
    pub sample: usize,
    pub level: usize,
    pub steps: usize,
    pub t: f64,
    pub h: f64,
    pub case: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub params: Params,
    pub metric: String,
    pub value: f64,
    /// A complex diagnostic of the computed output (its normalized trace
    /// where that makes sense, else zero).
    pub probe: C64,
    pub check: Check,
    pub negative_control: bool,
    pub pass: bool,
}

impl Record {
    pub fn new(params: Params, metric: &str, value: f64, check: Check) -> Self {
        Record {
            params,
            metric: metric.to_string(),
            value,
            probe: C64::new(0.0, 0.0),
            pass: check.passes(value),
            check,
            negative_control: matches!(check, Check::Exceeds(_)),
        }
    }

    pub fn with_probe(mut self, probe: C64) -> Self {
        self.probe = probe;
        self
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (&self.params, &other.params);
        a.study
            .cmp(&b.study)
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.flavor.cmp(&b.flavor))
            .then_with(|| a.seed.cmp(&b.seed))
            .then_with(|| a.sample.cmp(&b.sample))
            .then_with(|| a.level.cmp(&b.level))
            .then_with(|| a.steps.cmp(&b.steps))
            .then_with(|| a.t.total_cmp(&b.t))
            .then_with(|| a.h.total_cmp(&b.h))
            .then_with(|| a.case.cmp(&b.case))
            .then_with(|| self.metric.cmp(&other.metric))
    }
}

/// Least-squares slope of `log(error)` against `log(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub model: String,
    pub flavor: String,
    pub level: usize,
    pub case: String,
    pub metric: String,
    /// `None` when every error is below [`EXACT_TOL`].
    pub order: Option<f64>,
    /// Standard error of the slope.
    pub std_err: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OrderFit {
    pub fn fit(hs: &[f64], errors: &[f64], target: f64, tolerance: f64) -> (Option<f64>, f64, bool) {
        if errors.iter().all(|&e| e <= EXACT_TOL) {
            return (None, 0.0, true);
        }
        if errors.iter().any(|&e| e <= 0.0 || !e.is_finite()) || hs.len() < 2 {
            return (Some(f64::NAN), f64::NAN, false);
        }
        let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let std_err = if xs.len() > 2 {
            let ssr: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
                .sum();
            (ssr / (n - 2.0) / sxx).sqrt()
        } else {
            0.0
        };
        (Some(slope), std_err, (slope - target).abs() <= tolerance)
    }

    pub fn band(&self) -> Option<(f64, f64)> {
        self.order.map(|o| (o - 2.0 * self.std_err, o + 2.0 * self.std_err))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

/// Two-column plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub study: String,
    pub model: String,
    pub records: Vec<Record>,
    pub fits: Vec<OrderFit>,
    pub curves: Vec<Curve>,
    /// Wall-clock timings; kept apart from the records so that those stay
    /// reproducible.
    pub timings: Vec<Timing>,
}

impl StudyResult {
    fn new(spec: &ModelSpec) -> Self {
        StudyResult {
            study: spec.study.kind().to_string(),
            model: spec.name.clone(),
            records: Vec::new(),
            fits: Vec::new(),
            curves: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| a.sort_key_cmp(b));
        self.fits
            .sort_by(|a, b| (a.level, &a.case, &a.metric).cmp(&(b.level, &b.case, &b.metric)));
        self.curves.sort_by(|a, b| a.name.cmp(&b.name));
    }

    /// Checks that count towards the exit status: every record that is not
    /// a negative control, and every order fit.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .records
            .iter()
            .filter(|r| !r.negative_control && !r.pass)
            .map(|r| {
                format!(
                    "{} sample={} level={} K={} t={} case={}: {} = {:e}",
                    r.params.model,
                    r.params.sample,
                    r.params.level,
                    r.params.steps,
                    r.params.t,
                    r.params.case,
                    r.metric,
                    r.value
                )
            })
            .collect();
        out.extend(self.fits.iter().filter(|f| !f.pass).map(|f| {
            format!(
                "{} level={} case={}: fitted order {} outside {} ± {}",
                f.model,
                f.level,
                f.case,
                f.order.map_or_else(|| "exact".into(), |o| format!("{o:.4}")),
                f.target,
                f.tolerance
            )
        }));
        out
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn negative_controls(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.negative_control)
    }
}

struct Context<'a> {
    spec: &'a ModelSpec,
    cap: &'a Capacity,
}

impl Context<'_> {
    fn params(&self, sample: usize, level: usize, steps: usize, t: f64, h: f64, case: &str) -> Params {
        Params {
            study: self.spec.study.kind().to_string(),
            model: self.spec.name.clone(),
            flavor: self.spec.flavor.to_string(),
            seed: self.spec.seed,
            sample,
            level,
            steps,
            t,
            h,
            case: case.to_string(),
        }
    }

    fn wrap(&self, what: String) -> impl FnOnce(qds_core::Error) -> LabError {
        let context = format!("{} study, model `{}`, {what}", self.spec.study.kind(), self.spec.name);
        move |e| LabError::core(context, e)
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.spec.seed.unwrap_or(0))
    }

    fn grid(&self, steps: usize) -> Result<ToyFockGrid> {
        ToyFockGrid::new(self.spec.grid.t_final, steps).map_err(self.wrap(format!("K={steps}")))
    }
}

/// Draw the shell family of `spec`. Explicit shells are deterministic;
/// random ones consume `rng`.
pub fn build_shells(
    spec: &ModelSpec,
    rng: &mut ChaCha8Rng,
    cap: &Capacity,
) -> std::result::Result<ShellFamily, qds_core::Error> {
    let (n, d) = (spec.local_dim, spec.lattice_dim);
    let mut ops = Vec::with_capacity(spec.shells.len());
    for shell in &spec.shells {
        let window = make_window(shell.level, d, n, cap)?;
        let op = match &shell.source {
            ShellSource::Explicit { sites, matrix } => embed_on_sites(matrix, sites, &window, n)?,
            ShellSource::Random { scale } => {
                let sites = shell_sites(shell.level, d)?;
                let side = cap.check_local(
                    &format!("random shell {}", shell.level),
                    qds_core::tensor_algebra::checked_side(n, sites.len()),
                )?;
                let m = linalg::random_matrix(rng, side, side).mapv(|z| z * *scale);
                embed_on_sites(&m, &sites, &window, n)?
            }
        };
        ops.push((shell.level, op));
    }
    if ops.is_empty() {
        ops.push((0, LocalOperator::zero(&make_window(0, d, n, cap)?, n)));
    }
    ShellFamily::new(n, d, ops)
}

/// The family with `W_high` replaced by `W_high + F` where `F` is a
/// Hermitian shift on the origin site, so the top shell no longer commutes
/// with the lower window.
pub fn leaked_shells(shells: &ShellFamily, high: usize) -> std::result::Result<ShellFamily, qds_core::Error> {
    let n = shells.local_dim();
    let mut ops: Vec<(usize, LocalOperator)> = shells.shells().map(|(k, w)| (k, w.clone())).collect();
    let mut shift = linalg::zeros(n);
    for i in 0..n {
        shift[(i, (i + 1) % n)] += linalg::c(0.5);
        shift[((i + 1) % n, i)] += linalg::c(0.5);
    }
    let window = qds_core::tensor_algebra::Window::new(high, shells.dim())?;
    let leak = embed_on_sites(&shift, &[SiteIndex::origin(shells.dim())], &window, n)?;
    match ops.iter_mut().find(|(k, _)| *k == high) {
        Some((_, w)) => *w = w.add(&leak)?,
        None => ops.push((high, leak)),
    }
    ShellFamily::new_unchecked(n, shells.dim(), ops)
}

/// Run the study declared in `spec`.
pub fn run_study(spec: &ModelSpec, cap: &Capacity) -> Result<StudyResult> {
    let ctx = Context { spec, cap };
    let mut result = StudyResult::new(spec);
    match &spec.study {
        StudySpec::Convergence {
            level,
            observables,
            ambient_margin,
        } => convergence(&ctx, *level, observables, *ambient_margin, &mut result)?,
        StudySpec::Compatibility {
            low,
            high,
            negative_control,
        } => compatibility(&ctx, *low, *high, *negative_control, &mut result)?,
        StudySpec::CpSweep {
            level,
            times,
            samples,
            fd_steps,
        } => cp_sweep(&ctx, *level, times, *samples, fd_steps, &mut result)?,
        StudySpec::DualCheck { level, samples } => dual_check(&ctx, *level, *samples, &mut result)?,
        StudySpec::ItoCheck {
            system_dim,
            channels,
            samples,
            negative_control,
        } => ito_check(&ctx, *system_dim, channels, *samples, *negative_control, &mut result)?,
    }
    result.sort();
    Ok(result)
}

fn normalized_trace(x: &CMat) -> C64 {
    linalg::trace(x) / x.nrows() as f64
}

fn convergence(
    ctx: &Context,
    level: usize,
    observables: &Observables,
    margin: usize,
    result: &mut StudyResult,
) -> Result<()> {
    let spec = ctx.spec;
    let t = spec.grid.t_final;
    let mut rng = ctx.rng();
    let shells = build_shells(spec, &mut rng, ctx.cap).map_err(ctx.wrap("building shells".into()))?;
    let mut draw = |side: usize| -> Vec<CMat> {
        match observables {
            Observables::Random(count) => (0..*count)
                .map(|_| linalg::random_matrix(&mut rng, side, side))
                .collect(),
            Observables::Explicit(m) => vec![m.clone()],
        }
    };
    let case = |i: usize| format!("x{i}");
    // errors[i][j]: observable i, step count j
    let hs: Vec<f64> = spec.grid.steps.iter().map(|&k| t / k as f64).collect();

    let errors: Vec<Vec<f64>> = match spec.flavor {
        Flavor::GnsForm => {
            let wrap = || ctx.wrap(format!("level {level}"));
            let c = shell_commutator_op(&shells, level, ctx.cap).map_err(wrap())?;
            let l = lindblad_form_superop(&shells, level, ctx.cap).map_err(wrap())?;
            let started = Instant::now();
            let tt = semigroup(&l, t).map_err(wrap())?;
            result.timings.push(Timing {
                label: "oracle semigroup".into(),
                seconds: started.elapsed().as_secs_f64(),
            });
            let p0 = ctx.params(0, level, 0, t, 0.0, "generator");
            result.records.push(Record::new(
                p0.clone(),
                "identity_annihilation",
                l.annihilation_defect(),
                Check::AtMost(EXPONENTIAL_TOL),
            ));
            result.records.push(Record::new(
                p0,
                "oracle_identity_defect",
                tt.identity_defect(),
                Check::AtMost(EXPONENTIAL_TOL),
            ));

            let xs = draw(c.matrix().nrows());
            let oracle: Vec<CMat> = xs
                .iter()
                .map(|x| tt.apply(x))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap())?;
            let mut errs = vec![Vec::new(); xs.len()];
            for &k in &spec.grid.steps {
                let started = Instant::now();
                let grid = ctx.grid(k)?;
                let wrap_k = || ctx.wrap(format!("level {level}, K={k}"));
                let seq = StepSequence::exact(&c, grid).map_err(wrap_k())?;
                let defect = seq
                    .unitarity_defects()
                    .map_err(wrap_k())?
                    .into_iter()
                    .fold(0.0, f64::max);
                let p = ctx.params(0, level, k, t, grid.h(), "steps");
                result.records.push(Record::new(
                    p,
                    "step_unitarity_defect",
                    defect,
                    Check::AtMost(EXPONENTIAL_TOL),
                ));
                let id = vacuum_expectation_flow(&seq, &linalg::identity(seq.system_dim())).map_err(wrap_k())?;
                let p = ctx.params(0, level, k, t, grid.h(), "identity");
                let unital = linalg::op_norm(&(id - linalg::identity(seq.system_dim())));
                result.records.push(Record::new(
                    p,
                    "flow_identity_defect",
                    unital,
                    Check::AtMost(EXPONENTIAL_TOL),
                ));
                for (i, (x, want)) in xs.iter().zip(&oracle).enumerate() {
                    let got = vacuum_expectation_flow(&seq, x).map_err(wrap_k())?;
                    let err = linalg::op_norm(&(&got - want));
                    errs[i].push(err);
                    let p = ctx.params(0, level, k, t, grid.h(), &case(i));
                    result
                        .records
                        .push(Record::new(p, "error", err, Check::Report).with_probe(normalized_trace(&got)));
                }
                result.timings.push(Timing {
                    label: format!("flow K={k}"),
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
            errs
        }
        Flavor::AlgebraForm => {
            let wrap = || ctx.wrap(format!("level {level}"));
            let inner = shells.window(level, ctx.cap).map_err(wrap())?;
            let ambient = make_window(level + margin, spec.lattice_dim, spec.local_dim, ctx.cap).map_err(wrap())?;
            let generator = AlgebraGenerator::new(&shells, level, &ambient).map_err(wrap())?;
            let xs: Vec<LocalOperator> = draw(inner.side(spec.local_dim) as usize)
                .into_iter()
                .map(|m| LocalOperator::new(inner.clone(), spec.local_dim, m)?.embed_into(&ambient))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap())?;
            let started = Instant::now();
            let oracle: Vec<CMat> = xs
                .iter()
                .map(|x| generator.evolve(x.matrix(), t))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap())?;
            result.timings.push(Timing {
                label: "oracle semigroup".into(),
                seconds: started.elapsed().as_secs_f64(),
            });
            let id = LocalOperator::identity(&ambient, spec.local_dim);
            let p0 = ctx.params(0, level, 0, t, 0.0, "generator");
            let annihilation = linalg::op_norm(&generator.apply(id.matrix()));
            result.records.push(Record::new(
                p0,
                "identity_annihilation",
                annihilation,
                Check::AtMost(ALGEBRAIC_TOL),
            ));

            let mut errs = vec![Vec::new(); xs.len()];
            for &k in &spec.grid.steps {
                let started = Instant::now();
                let grid = ctx.grid(k)?;
                let wrap_k = || ctx.wrap(format!("level {level}, K={k}"));
                let flow = evans_hudson_flow(&shells, level, &id, grid, ctx.cap).map_err(wrap_k())?;
                let p = ctx.params(0, level, k, t, grid.h(), "identity");
                let unital = flow.last().max_diff(&id).map_err(wrap_k())?;
                result.records.push(Record::new(
                    p,
                    "flow_identity_defect",
                    unital,
                    Check::AtMost(EXPONENTIAL_TOL),
                ));
                for (i, (x, want)) in xs.iter().zip(&oracle).enumerate() {
                    let flow = evans_hudson_flow(&shells, level, x, grid, ctx.cap).map_err(wrap_k())?;
                    let got = flow.last().matrix();
                    let err = linalg::op_norm(&(got - want));
                    errs[i].push(err);
                    let p = ctx.params(0, level, k, t, grid.h(), &case(i));
                    result
                        .records
                        .push(Record::new(p.clone(), "error", err, Check::Report).with_probe(normalized_trace(got)));
                    if margin > 0 {
                        result.records.push(Record::new(
                            p,
                            "support_leak",
                            flow.max_leak(),
                            Check::AtMost(ALGEBRAIC_TOL),
                        ));
                    }
                }
                result.timings.push(Timing {
                    label: format!("flow K={k}"),
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
            errs
        }
    };

    for (i, errs) in errors.iter().enumerate() {
        let (order, std_err, pass) = OrderFit::fit(&hs, errs, 1.0, ORDER_TOL);
        result.fits.push(OrderFit {
            model: spec.name.clone(),
            flavor: spec.flavor.to_string(),
            level,
            case: case(i),
            metric: "error".into(),
            order,
            std_err,
            target: 1.0,
            tolerance: ORDER_TOL,
            pass,
        });
        result.curves.push(Curve {
            name: format!("{}_level{}_{}", spec.name, level, case(i)),
            x_label: "h".into(),
            y_label: "error".into(),
            points: hs.iter().copied().zip(errs.iter().copied()).collect(),
        });
    }
    Ok(())
}

fn compatibility(
    ctx: &Context,
    low: usize,
    high: usize,
    negative_control: bool,
    result: &mut StudyResult,
) -> Result<()> {
    let spec = ctx.spec;
    let t = spec.grid.t_final;
    let mut rng = ctx.rng();
    let shells = build_shells(spec, &mut rng, ctx.cap).map_err(ctx.wrap("building shells".into()))?;
    let leaked = if negative_control {
        Some(leaked_shells(&shells, high).map_err(ctx.wrap("building the negative control".into()))?)
    } else {
        None
    };
    let probe = linalg::ONE;
    let low_window = shells.window(low, ctx.cap).map_err(ctx.wrap(format!("level {low}")))?;
    let identity = [LocalOperator::identity(&low_window, spec.local_dim)];
    // The leak sits on the origin site, so its matrix units expose it.
    let origin_inputs: Vec<LocalOperator> = {
        let origin = make_window(0, spec.lattice_dim, spec.local_dim, ctx.cap).map_err(ctx.wrap("origin".into()))?;
        matrix_unit_basis(&origin, spec.local_dim)
            .iter()
            .map(|e| e.embed_into(&low_window))
            .collect::<std::result::Result<_, _>>()
            .map_err(ctx.wrap(format!("level {low}")))?
    };

    for &k in &spec.grid.steps {
        let grid = ctx.grid(k)?;
        let wrap = || ctx.wrap(format!("levels ({low}, {high}), K={k}"));
        let started = Instant::now();
        let rep = compatibility_mismatch(&shells, low, high, grid, probe, ctx.cap).map_err(wrap())?;
        result.timings.push(Timing {
            label: format!("basis K={k}"),
            seconds: started.elapsed().as_secs_f64(),
        });
        let p = ctx.params(0, high, k, t, grid.h(), &format!("basis_of_level{low}"));
        result.records.push(Record::new(
            p,
            "mismatch",
            rep.max_mismatch(),
            Check::AtMost(EXPONENTIAL_TOL),
        ));
        result.curves.push(Curve {
            name: format!("{}_K{}_mismatch", spec.name, k),
            x_label: "step".into(),
            y_label: "mismatch".into(),
            points: rep.per_step.iter().enumerate().map(|(i, &m)| (i as f64, m)).collect(),
        });

        let rep = compatibility_mismatch_on(&shells, low, high, grid, probe, &identity, ctx.cap).map_err(wrap())?;
        let p = ctx.params(0, high, k, t, grid.h(), "identity");
        result.records.push(Record::new(
            p,
            "mismatch",
            rep.max_mismatch(),
            Check::AtMost(ALGEBRAIC_TOL),
        ));

        if let Some(bad) = &leaked {
            let started = Instant::now();
            let rep = compatibility_mismatch_on(bad, low, high, grid, probe, &origin_inputs, ctx.cap).map_err(wrap())?;
            result.timings.push(Timing {
                label: format!("negative control K={k}"),
                seconds: started.elapsed().as_secs_f64(),
            });
            let p = ctx.params(0, high, k, t, grid.h(), "negative_control");
            result.records.push(Record::new(
                p,
                "mismatch",
                rep.max_mismatch(),
                Check::Exceeds(EXPONENTIAL_TOL),
            ));
        }
    }
    Ok(())
}

fn generator_for(
    ctx: &Context,
    shells: &ShellFamily,
    level: usize,
) -> std::result::Result<Superoperator, qds_core::Error> {
    match ctx.spec.flavor {
        Flavor::GnsForm => lindblad_form_superop(shells, level, ctx.cap),
        Flavor::AlgebraForm => algebra_lindblad_superop(shells, level, ctx.cap),
    }
}

fn cp_sweep(
    ctx: &Context,
    level: usize,
    times: &[f64],
    samples: usize,
    fd_steps: &[f64],
    result: &mut StudyResult,
) -> Result<()> {
    let spec = ctx.spec;
    let mut rng = ctx.rng();
    for sample in 0..samples {
        let wrap = || ctx.wrap(format!("sample {sample}, level {level}"));
        let shells = build_shells(spec, &mut rng, ctx.cap).map_err(wrap())?;
        let l = generator_for(ctx, &shells, level).map_err(wrap())?;
        let p = ctx.params(sample, level, 0, 0.0, 0.0, "generator");
        result.records.push(Record::new(
            p,
            "identity_annihilation",
            l.annihilation_defect(),
            Check::AtMost(ALGEBRAIC_TOL),
        ));

        for &t in times {
            let tt = semigroup(&l, t).map_err(wrap())?;
            let rep = cp_certify(&tt);
            let p = ctx.params(sample, level, 0, t, 0.0, "semigroup");
            result.records.push(Record::new(
                p.clone(),
                "min_choi_eigenvalue",
                rep.min_choi_eigenvalue,
                Check::AtLeast(-qds_core::lindblad::CHOI_TOL),
            ));
            result.records.push(Record::new(
                p.clone(),
                "identity_defect",
                rep.identity_defect,
                Check::AtMost(EXPONENTIAL_TOL),
            ));
            result.records.push(Record::new(
                p,
                "choi_hermiticity_defect",
                rep.hermiticity_defect,
                Check::AtMost(EXPONENTIAL_TOL),
            ));
        }

        if !fd_steps.is_empty() {
            let mut defects = Vec::with_capacity(fd_steps.len());
            for &h in fd_steps {
                let th = semigroup(&l, h).map_err(wrap())?;
                let fd = (th.matrix() - &linalg::identity(th.matrix().nrows())).mapv(|z| z / h);
                let defect = linalg::op_norm(&(fd - l.matrix()));
                defects.push(defect);
                let p = ctx.params(sample, level, 0, h, h, "finite_difference");
                result
                    .records
                    .push(Record::new(p, "generator_fd_defect", defect, Check::Report));
            }
            for (w, d) in fd_steps.windows(2).zip(defects.windows(2)) {
                let ratio = d[0] / d[1];
                let p = ctx.params(sample, level, 0, w[1], w[1], "finite_difference");
                let check = if (w[0] / w[1] - 2.0).abs() < 1e-12 {
                    Check::Near {
                        target: 2.0,
                        tolerance: 0.3,
                    }
                } else {
                    Check::Report
                };
                result.records.push(Record::new(p, "fd_halving_ratio", ratio, check));
            }
        }
    }
    Ok(())
}

fn dual_check(ctx: &Context, level: usize, samples: usize, result: &mut StudyResult) -> Result<()> {
    let spec = ctx.spec;
    let t = spec.grid.t_final;
    let mut rng = ctx.rng();
    for sample in 0..samples {
        let wrap = || ctx.wrap(format!("sample {sample}, level {level}"));
        let shells = build_shells(spec, &mut rng, ctx.cap).map_err(wrap())?;
        let c = shell_commutator_op(&shells, level, ctx.cap).map_err(wrap())?;
        let negated = c.scale(-1.0);
        for &k in &spec.grid.steps {
            let grid = ctx.grid(k)?;
            let wrap_k = || ctx.wrap(format!("sample {sample}, level {level}, K={k}"));
            let seq = StepSequence::exact(&c, grid).map_err(wrap_k())?;
            let dual = dual_steps(&seq).map_err(wrap_k())?;
            let reference = StepSequence::exact(&negated, grid).map_err(wrap_k())?;
            let p = ctx.params(sample, level, k, t, grid.h(), "exact_exponential");
            let defect = seq
                .unitarity_defects()
                .map_err(wrap_k())?
                .into_iter()
                .fold(0.0, f64::max);
            result.records.push(Record::new(
                p.clone(),
                "step_unitarity_defect",
                defect,
                Check::AtMost(EXPONENTIAL_TOL),
            ));
            let mismatch = dual.max_step_diff(&reference).map_err(wrap_k())?;
            result.records.push(Record::new(
                p.clone(),
                "dual_mismatch",
                mismatch,
                Check::AtMost(ALGEBRAIC_TOL),
            ));
            let back = dual_steps(&dual).map_err(wrap_k())?;
            let involution = back.max_step_diff(&seq).map_err(wrap_k())?;
            result.records.push(Record::new(
                p,
                "involution_mismatch",
                involution,
                Check::AtMost(ALGEBRAIC_TOL),
            ));
        }
    }
    Ok(())
}

fn ito_check(
    ctx: &Context,
    system_dim: usize,
    channels: &[usize],
    samples: usize,
    negative_control: bool,
    result: &mut StudyResult,
) -> Result<()> {
    let spec = ctx.spec;
    let mut rng = ctx.rng();
    let fo_h = spec.grid.steps.first().map(|&k| spec.grid.t_final / k as f64);
    for &m in channels {
        for sample in 0..samples {
            let wrap = || ctx.wrap(format!("sample {sample}, m={m}"));
            let c = HPCoefficients::random(&mut rng, system_dim, m, 0.5).map_err(wrap())?;
            let rep = check_ito_unitarity(&c);
            let case = format!("m={m}");
            let p = ctx.params(sample, 0, 0, 0.0, 0.0, &case);
            for (metric, value) in [
                ("conservativity_defect", rep.conservativity),
                ("theta00_identity_defect", rep.theta_identity),
                ("scattering_unitarity_defect", rep.scattering_unitarity),
            ] {
                result
                    .records
                    .push(Record::new(p.clone(), metric, value, Check::AtMost(EXPONENTIAL_TOL)));
            }
            if let Some(h) = fo_h {
                let v = step_first_order(&c, h).map_err(wrap())?;
                let constant = linalg::unitarity_defect(&v) / h.powf(1.5);
                let p = ctx.params(sample, 0, spec.grid.steps[0], spec.grid.t_final, h, &case);
                result
                    .records
                    .push(Record::new(p, "first_order_defect_constant", constant, Check::Report));
            }
            if negative_control {
                let mut dissipation = linalg::zeros(system_dim);
                for l in c.couplings() {
                    dissipation += &linalg::adjoint(l).dot(l);
                }
                let corrupt = -(c.hamiltonian().mapv(|z| z * linalg::I) + &dissipation);
                let bad = c.with_block(0, 0, corrupt).map_err(wrap())?;
                let rep = check_ito_unitarity(&bad);
                let p = ctx.params(sample, 0, 0, 0.0, 0.0, &format!("{case},negative_control"));
                result.records.push(Record::new(
                    p,
                    "conservativity_defect",
                    rep.conservativity,
                    Check::Exceeds(EXPONENTIAL_TOL),
                ));
            }
        }
    }
    Ok(())
}

//! Study configuration: a TOML document with `[model]`, `[grid]` and
//! `[study]` tables. The annotated reference is `config/schema.toml`.

use std::ops::Range;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use qds_core::linalg::CMat;
use qds_core::lindblad::Flavor;
use qds_core::tensor_algebra::{checked_side, SiteIndex};
use serde::Deserialize;
use toml::Spanned;

use crate::error::{LabError, Result};

/// Canonical schema, shipped with the binary for `qds validate --schema`.
pub const SCHEMA: &str = include_str!("../config/schema.toml");

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub local_dim: usize,
    pub lattice_dim: usize,
    pub flavor: Flavor,
    pub seed: Option<u64>,
    pub shells: Vec<ShellSpec>,
    pub grid: GridSpec,
    pub study: StudySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShellSpec {
    pub level: usize,
    pub source: ShellSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShellSource {
    /// `matrix` acts on `sites`, the first site being the most significant
    /// tensor factor.
    Explicit { sites: Vec<SiteIndex>, matrix: CMat },
    /// Independent entries uniform in the square of half-width `scale`,
    /// acting on every site of the shell.
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub t_final: f64,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observables {
    Random(usize),
    Explicit(CMat),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudySpec {
    Convergence {
        level: usize,
        observables: Observables,
        /// Extra radius of the window the flow is computed on, so that
        /// leaks out of `Δ_n` can be seen. Algebra flavor only.
        ambient_margin: usize,
    },
    Compatibility {
        low: usize,
        high: usize,
        negative_control: bool,
    },
    CpSweep {
        level: usize,
        times: Vec<f64>,
        samples: usize,
        fd_steps: Vec<f64>,
    },
    DualCheck {
        level: usize,
        samples: usize,
    },
    ItoCheck {
        system_dim: usize,
        channels: Vec<usize>,
        samples: usize,
        negative_control: bool,
    },
}

impl StudySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            StudySpec::Convergence { .. } => "convergence",
            StudySpec::Compatibility { .. } => "compatibility",
            StudySpec::CpSweep { .. } => "cp_sweep",
            StudySpec::DualCheck { .. } => "dual_check",
            StudySpec::ItoCheck { .. } => "ito_check",
        }
    }
}

impl ModelSpec {
    pub fn max_level(&self) -> Option<usize> {
        self.shells.iter().map(|s| s.level).max()
    }

    pub fn has_random_shells(&self) -> bool {
        self.shells
            .iter()
            .any(|s| matches!(s.source, ShellSource::Random { .. }))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    grid: Option<RawGrid>,
    study: RawStudy,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    local_dim: Spanned<usize>,
    lattice_dim: Spanned<usize>,
    flavor: Spanned<String>,
    seed: Option<u64>,
    #[serde(default)]
    shells: Vec<RawShell>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShell {
    level: Spanned<usize>,
    sites: Option<Spanned<Vec<RawSite>>>,
    matrix: Option<Spanned<Vec<Vec<Spanned<RawScalar>>>>>,
    random: Option<Spanned<bool>>,
    scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSite {
    Scalar(i64),
    Coords(Vec<i64>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawScalar {
    Int(i64),
    Float(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    t_final: Spanned<f64>,
    steps: Spanned<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    kind: Spanned<String>,
    level: Option<usize>,
    observables: Option<Spanned<usize>>,
    observable: Option<Spanned<Vec<Vec<Spanned<RawScalar>>>>>,
    ambient_margin: Option<usize>,
    levels: Option<Spanned<Vec<usize>>>,
    negative_control: Option<bool>,
    times: Option<Spanned<Vec<f64>>>,
    fd_steps: Option<Spanned<Vec<f64>>>,
    samples: Option<Spanned<usize>>,
    system_dim: Option<Spanned<usize>>,
    channels: Option<Spanned<Vec<usize>>>,
}

/// Parse `a`, `a+bi`, `a-bi`, `bi`, `i`, `-i` with real `a`, `b` in any
/// float syntax.
pub fn parse_complex(text: &str) -> Option<C64> {
    let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if s.is_empty() {
        return None;
    }
    let Some(body) = s.strip_suffix('i') else {
        return s.parse::<f64>().ok().map(|re| C64::new(re, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&p| matches!(bytes[p], b'+' | b'-') && !matches!(bytes[p - 1], b'e' | b'E'));
    let coefficient = |t: &str| -> Option<f64> {
        match t {
            "" | "+" => Some(1.0),
            "-" => Some(-1.0),
            _ => t.parse().ok(),
        }
    };
    match split {
        Some(p) => Some(C64::new(body[..p].parse().ok()?, coefficient(&body[p..])?)),
        None => Some(C64::new(0.0, coefficient(body)?)),
    }
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())]
            .bytes()
            .filter(|&b| b == b'\n')
            .count()
            + 1
    }

    fn error<T>(&self, span: Range<usize>, field: &str, message: impl Into<String>) -> Result<T> {
        Err(LabError::Config {
            line: self.line(span),
            field: field.to_string(),
            message: message.into(),
        })
    }

    fn matrix(&self, raw: &Spanned<Vec<Vec<Spanned<RawScalar>>>>, field: &str, side: u128) -> Result<CMat> {
        let rows = raw.get_ref();
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return self.error(raw.span(), field, "matrix literal must be square");
        }
        if n as u128 != side {
            return self.error(
                raw.span(),
                field,
                format!("dimension mismatch: literal is {n}x{n}, expected {side}x{side}"),
            );
        }
        let mut out = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                out[(i, j)] = match cell.get_ref() {
                    RawScalar::Int(v) => C64::new(*v as f64, 0.0),
                    RawScalar::Float(v) => C64::new(*v, 0.0),
                    RawScalar::Text(t) => match parse_complex(t) {
                        Some(z) => z,
                        None => {
                            return self.error(cell.span(), field, format!("`{t}` is not a complex literal"));
                        }
                    },
                };
                if !out[(i, j)].is_finite() {
                    return self.error(cell.span(), field, "matrix entries must be finite");
                }
            }
        }
        Ok(out)
    }
}

fn parse_flavor(text: &str) -> Option<Flavor> {
    match text {
        "gns_form" => Some(Flavor::GnsForm),
        "algebra_form" => Some(Flavor::AlgebraForm),
        _ => None,
    }
}

/// Parse and validate a configuration.
pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| LabError::Syntax(e.to_string()))?;
    let src = Source { text };
    let model = raw.model;

    let local_dim = *model.local_dim.get_ref();
    if local_dim < 2 {
        return src.error(model.local_dim.span(), "model.local_dim", "must be at least 2");
    }
    let dim = *model.lattice_dim.get_ref();
    if dim < 1 {
        return src.error(model.lattice_dim.span(), "model.lattice_dim", "must be at least 1");
    }
    let Some(flavor) = parse_flavor(model.flavor.get_ref()) else {
        return src.error(
            model.flavor.span(),
            "model.flavor",
            format!("unknown flavor `{}` (gns_form | algebra_form)", model.flavor.get_ref()),
        );
    };

    let mut shells: Vec<ShellSpec> = Vec::new();
    for (idx, raw_shell) in model.shells.iter().enumerate() {
        let field = format!("model.shells[{idx}]");
        let level = *raw_shell.level.get_ref();
        if shells.iter().any(|s| s.level == level) {
            return src.error(
                raw_shell.level.span(),
                &field,
                format!("duplicate shell at level {level}"),
            );
        }
        let random = raw_shell.random.as_ref().is_some_and(|r| *r.get_ref());
        let source = match (&raw_shell.sites, &raw_shell.matrix, random) {
            (None, None, true) => {
                let scale = raw_shell.scale.unwrap_or(1.0);
                if !scale.is_finite() || scale < 0.0 {
                    return src.error(
                        raw_shell.level.span(),
                        &format!("{field}.scale"),
                        "must be finite and non-negative",
                    );
                }
                ShellSource::Random { scale }
            }
            (Some(sites), Some(matrix), false) => {
                let mut parsed = Vec::with_capacity(sites.get_ref().len());
                for site in sites.get_ref() {
                    let coords = match site {
                        RawSite::Scalar(v) => vec![*v],
                        RawSite::Coords(c) => c.clone(),
                    };
                    if coords.len() != dim {
                        return src.error(
                            sites.span(),
                            &format!("{field}.sites"),
                            format!("site has {} coordinates, lattice dimension is {dim}", coords.len()),
                        );
                    }
                    let site = SiteIndex(coords);
                    if site.norm() != level as u64 {
                        return src.error(
                            sites.span(),
                            &format!("{field}.sites"),
                            format!(
                                "boundary-support: site {site} has norm {} but shell {level} lives on sites of norm {level}",
                                site.norm()
                            ),
                        );
                    }
                    if parsed.contains(&site) {
                        return src.error(
                            sites.span(),
                            &format!("{field}.sites"),
                            format!("duplicate site {site}"),
                        );
                    }
                    parsed.push(site);
                }
                if parsed.is_empty() {
                    return src.error(sites.span(), &format!("{field}.sites"), "at least one site is required");
                }
                let side = checked_side(local_dim, parsed.len());
                let matrix = src.matrix(matrix, &format!("{field}.matrix"), side)?;
                ShellSource::Explicit { sites: parsed, matrix }
            }
            _ => {
                return src.error(
                    raw_shell.level.span(),
                    &field,
                    "a shell needs either `sites` and `matrix`, or `random = true`",
                );
            }
        };
        shells.push(ShellSpec { level, source });
    }
    shells.sort_by_key(|s| s.level);
    if shells.iter().any(|s| matches!(s.source, ShellSource::Random { .. })) && model.seed.is_none() {
        return Err(LabError::Config {
            line: src.line(model.flavor.span()),
            field: "model.seed".into(),
            message: "random shells need an explicit seed".into(),
        });
    }

    let grid = match raw.grid {
        Some(g) => {
            let t = *g.t_final.get_ref();
            if !t.is_finite() || t <= 0.0 {
                return src.error(g.t_final.span(), "grid.t_final", "must be finite and positive");
            }
            if g.steps.get_ref().contains(&0) {
                return src.error(g.steps.span(), "grid.steps", "step counts must be positive");
            }
            GridSpec {
                t_final: t,
                steps: g.steps.get_ref().clone(),
            }
        }
        None => GridSpec {
            t_final: 1.0,
            steps: Vec::new(),
        },
    };

    let st = raw.study;
    let kind_span = st.kind.span();
    let max_level = shells.iter().map(|s| s.level).max();
    let need_shells = |field: &str| -> Result<usize> {
        max_level.ok_or_else(|| LabError::Config {
            line: src.line(kind_span.clone()),
            field: field.into(),
            message: "this study needs at least one shell".into(),
        })
    };
    let level_or_max = |field: &str| -> Result<usize> {
        let top = need_shells(field)?;
        match st.level {
            Some(l) if l > top => src.error(
                kind_span.clone(),
                "study.level",
                format!("level {l} exceeds the top shell {top}"),
            ),
            Some(l) => Ok(l),
            None => Ok(top),
        }
    };
    let samples = |default: usize| -> Result<usize> {
        match &st.samples {
            Some(s) if *s.get_ref() == 0 => src.error(s.span(), "study.samples", "must be positive"),
            Some(s) => Ok(*s.get_ref()),
            None => Ok(default),
        }
    };

    let study = match st.kind.get_ref().as_str() {
        "convergence" => {
            let level = level_or_max("study.level")?;
            if grid.steps.len() < 3 {
                return src.error(
                    kind_span,
                    "grid.steps",
                    "a convergence study needs at least 3 step counts",
                );
            }
            let ratio = grid.steps[1] as f64 / grid.steps[0] as f64;
            let geometric = ratio > 1.0
                && grid
                    .steps
                    .windows(2)
                    .all(|w| ((w[1] as f64 / w[0] as f64) - ratio).abs() < 1e-12);
            if !geometric {
                return src.error(
                    kind_span,
                    "grid.steps",
                    "step counts must increase in geometric progression",
                );
            }
            let observables = match (&st.observables, &st.observable) {
                (Some(n), None) => {
                    if model.seed.is_none() {
                        return src.error(n.span(), "study.observables", "random observables need model.seed");
                    }
                    if *n.get_ref() == 0 {
                        return src.error(n.span(), "study.observables", "must be positive");
                    }
                    Observables::Random(*n.get_ref())
                }
                (None, Some(m)) => {
                    let sites = (2 * level + 1).pow(dim as u32);
                    let side = match flavor {
                        Flavor::GnsForm => checked_side(local_dim, 2 * sites),
                        Flavor::AlgebraForm => checked_side(local_dim, sites),
                    };
                    Observables::Explicit(src.matrix(m, "study.observable", side)?)
                }
                _ => {
                    return src.error(kind_span, "study", "give exactly one of `observables` or `observable`");
                }
            };
            let ambient_margin = st.ambient_margin.unwrap_or(0);
            if ambient_margin > 0 && flavor == Flavor::GnsForm {
                return src.error(
                    kind_span,
                    "study.ambient_margin",
                    "only the algebra flavor supports a margin",
                );
            }
            StudySpec::Convergence {
                level,
                observables,
                ambient_margin,
            }
        }
        "compatibility" => {
            need_shells("model.shells")?;
            let Some(levels) = &st.levels else {
                return src.error(
                    kind_span,
                    "study.levels",
                    "a compatibility study needs `levels = [low, high]`",
                );
            };
            let l = levels.get_ref();
            if l.len() != 2 || l[0] >= l[1] {
                return src.error(levels.span(), "study.levels", "expected two increasing levels");
            }
            if Some(l[1]) > max_level {
                return src.error(levels.span(), "study.levels", "level exceeds the top shell");
            }
            if grid.steps.is_empty() {
                return src.error(kind_span, "grid.steps", "at least one step count is required");
            }
            StudySpec::Compatibility {
                low: l[0],
                high: l[1],
                negative_control: st.negative_control.unwrap_or(false),
            }
        }
        "cp_sweep" => {
            let level = level_or_max("study.level")?;
            let times = match &st.times {
                Some(t) if t.get_ref().iter().all(|v| v.is_finite() && *v >= 0.0) && !t.get_ref().is_empty() => {
                    t.get_ref().clone()
                }
                Some(t) => {
                    return src.error(
                        t.span(),
                        "study.times",
                        "times must be finite, non-negative and non-empty",
                    )
                }
                None => return src.error(kind_span, "study.times", "a cp_sweep needs `times`"),
            };
            let fd_steps = match &st.fd_steps {
                Some(f) if f.get_ref().iter().all(|v| v.is_finite() && *v > 0.0) => f.get_ref().clone(),
                Some(f) => return src.error(f.span(), "study.fd_steps", "finite-difference steps must be positive"),
                None => Vec::new(),
            };
            StudySpec::CpSweep {
                level,
                times,
                samples: samples(1)?,
                fd_steps,
            }
        }
        "dual_check" => {
            let level = level_or_max("study.level")?;
            if grid.steps.is_empty() {
                return src.error(kind_span, "grid.steps", "at least one step count is required");
            }
            StudySpec::DualCheck {
                level,
                samples: samples(1)?,
            }
        }
        "ito_check" => {
            let system_dim = match &st.system_dim {
                Some(d) if *d.get_ref() == 0 => return src.error(d.span(), "study.system_dim", "must be positive"),
                Some(d) => *d.get_ref(),
                None => local_dim,
            };
            let channels = match &st.channels {
                Some(c) if c.get_ref().is_empty() || c.get_ref().contains(&0) => {
                    return src.error(c.span(), "study.channels", "channel counts must be positive")
                }
                Some(c) => c.get_ref().clone(),
                None => vec![1],
            };
            if model.seed.is_none() {
                return src.error(
                    kind_span,
                    "model.seed",
                    "ito_check draws random coefficients and needs a seed",
                );
            }
            StudySpec::ItoCheck {
                system_dim,
                channels,
                samples: samples(1)?,
                negative_control: st.negative_control.unwrap_or(false),
            }
        }
        other => {
            return src.error(
                kind_span,
                "study.kind",
                format!("unknown study `{other}` (convergence | compatibility | cp_sweep | dual_check | ito_check)"),
            );
        }
    };

    if let StudySpec::CpSweep { samples, .. } | StudySpec::DualCheck { samples, .. } = &study {
        if *samples > 1 && !shells.iter().any(|s| matches!(s.source, ShellSource::Random { .. })) {
            return src.error(
                st.samples.as_ref().map_or(kind_span.clone(), |s| s.span()),
                "study.samples",
                "several samples only make sense with random shells",
            );
        }
    }

    Ok(ModelSpec {
        name: model.name,
        local_dim,
        lattice_dim: dim,
        flavor,
        seed: model.seed,
        shells,
        grid,
        study,
    })
}

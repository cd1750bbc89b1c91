//! Experiment configuration: `[section]` headers, `key = value` lines and
//! `#` comments. Durations take an optional `s`, `h` or `d` suffix.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::adjoint::{AdjointVariant, DEFAULT_MATRIX_CAP};
use crate::diagnostics::{BroadeningTime, INFLUENCE_FRACTION};
use crate::error::{CtmError, Result};
use crate::grid::{Grid, PlumeSpec};
use crate::lbfgs::MinimizerSpec;
use crate::transport::{DiffusionSpec, Scheme, SchemeSpec};
use crate::wind::{BickleyParams, WindSpec};

/// Documented defaults, printed by `ctm --help`.
pub const DEFAULTS_HELP: &str = "\
Config defaults (all lengths in m, durations accept s/h/d suffixes):
  [grid]        nx=128 ny=64 lx=2e7 ly=6e6 x0=0 y0=-3e6
  [wind]        kind (required): uniform | shear | bickley_jet | file
                speed=10 (uniform), rate=1e-5 (shear), path (file),
                u0=62.66 length=1.77e6 eps=0.075,0.4,0.3 c_ratio=0.1446,0.205,0.461
  [plume]       center_x=1e7 center_y=0 side_x=1.33e6 side_y=1.68e6
                background=1 excess_factor=2
  [scheme]      scheme=vanleer2 (or upwind1) cfl_max=0.8 max_dt=unbounded
  [diffusion]   enabled=false d_h=0
  [adjoint]     variant=continuous (or discrete_transpose) matrix_cap=10000
  [minimizer]   max_iters=99 memory=8 c1=1e-4 c2=0.9 grad_tol=1e-12
                cost_tol=1e-16 max_line_evals=30
  [experiment]  windows=0.1h,12h,24h,48h,96h,168h t0=0 dump_cadence=none
  [diagnostics] influence_fraction=0.01 broadening_time=round_trip
                d_h=<from FTLE> ftle_horizon=2d plume_width=<max side>
                boundary_scale=<dx>";

/// Default window list: the reference protocol with its shortest window
/// shrunk to a sub-cell displacement on the default grid.
pub const DEFAULT_WINDOWS_HOURS: [f64; 6] = [0.1, 12.0, 24.0, 48.0, 96.0, 168.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub windows: Vec<f64>,
    pub t0: f64,
    pub dump_cadence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsSpec {
    pub influence_fraction: f64,
    pub broadening_time: BroadeningTime,
    /// Fixed diffusivity for the broadening estimate; otherwise derived
    /// from the FTLE over the plume.
    pub d_h: Option<f64>,
    pub ftle_horizon: f64,
    pub plume_width: Option<f64>,
    pub boundary_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinConfig {
    pub grid: Grid,
    pub wind: WindSpec,
    pub plume: PlumeSpec,
    pub scheme: SchemeSpec,
    pub diffusion: DiffusionSpec,
    pub adjoint: AdjointVariant,
    pub minimizer: MinimizerSpec,
    pub experiment: ExperimentSpec,
    pub diagnostics: DiagnosticsSpec,
    /// Source text, echoed into the run manifest.
    pub source: String,
}

/// Parses a duration such as `3h`, `2d`, `90s` or `3600`.
pub fn parse_duration(text: &str) -> Option<f64> {
    let t = text.trim();
    let (num, scale) = match t.chars().last()? {
        's' => (&t[..t.len() - 1], 1.0),
        'h' => (&t[..t.len() - 1], 3600.0),
        'd' => (&t[..t.len() - 1], 86400.0),
        _ => (t, 1.0),
    };
    let v: f64 = num.trim().parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v * scale)
}

struct Entry {
    value: String,
    line: usize,
}

struct Sections {
    entries: Vec<(String, Entry)>,
    seen: BTreeSet<&'static str>,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("grid", &["nx", "ny", "lx", "ly", "x0", "y0"]),
    (
        "wind",
        &["kind", "speed", "rate", "path", "u0", "length", "eps", "c_ratio"],
    ),
    (
        "plume",
        &["center_x", "center_y", "side_x", "side_y", "background", "excess_factor"],
    ),
    ("scheme", &["scheme", "cfl_max", "max_dt"]),
    ("diffusion", &["enabled", "d_h"]),
    ("adjoint", &["variant", "matrix_cap"]),
    (
        "minimizer",
        &["max_iters", "memory", "c1", "c2", "grad_tol", "cost_tol", "max_line_evals"],
    ),
    ("experiment", &["windows", "t0", "dump_cadence"]),
    (
        "diagnostics",
        &[
            "influence_fraction",
            "broadening_time",
            "d_h",
            "ftle_horizon",
            "plume_width",
            "boundary_scale",
        ],
    ),
];

impl Sections {
    fn parse(text: &str) -> Result<Self> {
        let mut section: Option<&str> = None;
        let mut entries: Vec<(String, Entry)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| CtmError::ConfigSyntax {
                    line: line_no,
                    reason: "unterminated section header".into(),
                })?;
                let name = name.trim();
                let known = KNOWN.iter().find(|(s, _)| *s == name).ok_or_else(|| CtmError::UnknownKey {
                    key: format!("[{name}]"),
                    line: line_no,
                })?;
                section = Some(known.0);
                seen.insert(known.0);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CtmError::ConfigSyntax {
                line: line_no,
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let sec = section.ok_or_else(|| CtmError::ConfigSyntax {
                line: line_no,
                reason: "key outside of a section".into(),
            })?;
            let allowed = KNOWN.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(CtmError::UnknownKey {
                    key: format!("{sec}.{key}"),
                    line: line_no,
                });
            }
            let full = format!("{sec}.{key}");
            if entries.iter().any(|(k, _)| *k == full) {
                return Err(CtmError::ConfigSyntax {
                    line: line_no,
                    reason: format!("duplicate key `{full}`"),
                });
            }
            entries.push((
                full,
                Entry {
                    value: value.trim().to_string(),
                    line: line_no,
                },
            ));
        }
        Ok(Self { entries, seen })
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, e)| (e.value.as_str(), e.line))
    }

    fn typed<T>(&self, key: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => parse(v).map(Some).ok_or_else(|| CtmError::ConfigSyntax {
                line,
                reason: format!("`{key}` expects {what}, got `{v}`"),
            }),
        }
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self
            .typed(key, "a number", |s| s.parse::<f64>().ok().filter(|v| !v.is_nan()))?
            .unwrap_or(default))
    }

    fn opt_real(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "a number", |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed(key, "a nonnegative integer", |s| s.parse().ok())?.unwrap_or(default))
    }

    fn duration(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "a duration (e.g. 90s, 3h, 2d)", parse_duration)
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.typed(key, "a comma-separated list of numbers", |s| {
            s.split(',').map(|p| p.trim().parse::<f64>().ok()).collect()
        })
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self
            .typed(key, "true or false", |s| match s {
                "true" => Some(true),
                "false" => Some(false),
                _ => None,
            })?
            .unwrap_or(default))
    }

    fn text(&self, key: &str) -> Option<String> {
        self.get(key).map(|(v, _)| v.to_string())
    }
}

/// Qualifies a validation error with its config section.
fn named(section: &str, err: CtmError) -> CtmError {
    match err {
        CtmError::Invalid { field, reason } if !field.contains('.') => {
            CtmError::invalid(format!("{section}.{field}"), reason)
        }
        CtmError::Invalid { .. } => err,
        other => CtmError::invalid(section, other.to_string()),
    }
}

fn parse_wind(s: &Sections, base: &Path) -> Result<WindSpec> {
    let kind = s
        .text("wind.kind")
        .ok_or_else(|| CtmError::invalid("wind.kind", "is required"))?;
    Ok(match kind.as_str() {
        "uniform" => WindSpec::Uniform {
            speed: s.real("wind.speed", 10.0)?,
        },
        "shear" => WindSpec::Shear {
            rate: s.real("wind.rate", 1e-5)?,
        },
        "bickley_jet" => {
            let d = BickleyParams::default();
            let p = BickleyParams {
                u0: s.real("wind.u0", d.u0)?,
                length: s.real("wind.length", d.length)?,
                eps: s.list("wind.eps")?.unwrap_or(d.eps),
                c_ratio: s.list("wind.c_ratio")?.unwrap_or(d.c_ratio),
            };
            p.validate().map_err(|e| named("wind", e))?;
            WindSpec::BickleyJet(p)
        }
        "file" => {
            let path = s
                .text("wind.path")
                .ok_or_else(|| CtmError::invalid("wind.path", "is required for kind = file"))?;
            let p = PathBuf::from(path);
            WindSpec::FromFile(if p.is_absolute() { p } else { base.join(p) })
        }
        other => {
            return Err(CtmError::invalid(
                "wind.kind",
                format!("unknown kind `{other}` (uniform, shear, bickley_jet, file)"),
            ))
        }
    })
}

/// Parses configuration text. Relative wind paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<TwinConfig> {
    let s = Sections::parse(text)?;

    let grid = Grid::from_extent(
        s.count("grid.nx", 128)?,
        s.count("grid.ny", 64)?,
        s.real("grid.lx", 2.0e7)?,
        s.real("grid.ly", 6.0e6)?,
        s.real("grid.x0", 0.0)?,
        s.real("grid.y0", -3.0e6)?,
    )
    .map_err(|e| named("grid", e))?;

    let wind = parse_wind(&s, base)?;

    let plume = PlumeSpec {
        center: (s.real("plume.center_x", 1.0e7)?, s.real("plume.center_y", 0.0)?),
        side_x: s.real("plume.side_x", 1.33e6)?,
        side_y: s.real("plume.side_y", 1.68e6)?,
        background: s.real("plume.background", 1.0)?,
        excess_factor: s.real("plume.excess_factor", 2.0)?,
    };
    plume.validate().map_err(|e| named("plume", e))?;
    plume.footprint(&grid).map_err(|e| named("plume", e))?;

    let scheme_name = s.text("scheme.scheme").unwrap_or_else(|| "vanleer2".into());
    let scheme = SchemeSpec {
        scheme: Scheme::parse(&scheme_name)
            .ok_or_else(|| CtmError::invalid("scheme.scheme", format!("unknown scheme `{scheme_name}`")))?,
        cfl_max: s.real("scheme.cfl_max", SchemeSpec::default().cfl_max)?,
        max_dt: s.duration("scheme.max_dt")?.unwrap_or(f64::INFINITY),
    };
    scheme.validate().map_err(|e| named("scheme", e))?;

    let diffusion = DiffusionSpec {
        enabled: s.flag("diffusion.enabled", false)?,
        d_h: s.real("diffusion.d_h", 0.0)?,
    };
    diffusion.validate().map_err(|e| named("diffusion", e))?;

    let cap = s.count("adjoint.matrix_cap", DEFAULT_MATRIX_CAP)?;
    let adjoint = match s.text("adjoint.variant").as_deref().unwrap_or("continuous") {
        "continuous" => AdjointVariant::Continuous,
        "discrete_transpose" => AdjointVariant::DiscreteTranspose { cap },
        other => return Err(CtmError::invalid("adjoint.variant", format!("unknown variant `{other}`"))),
    };

    let d = MinimizerSpec::default();
    let minimizer = MinimizerSpec {
        max_iters: s.count("minimizer.max_iters", d.max_iters)?,
        memory: s.count("minimizer.memory", d.memory)?,
        c1: s.real("minimizer.c1", d.c1)?,
        c2: s.real("minimizer.c2", d.c2)?,
        grad_tol: s.real("minimizer.grad_tol", d.grad_tol)?,
        cost_tol: s.real("minimizer.cost_tol", d.cost_tol)?,
        max_line_evals: s.count("minimizer.max_line_evals", d.max_line_evals)?,
    };
    minimizer.validate().map_err(|e| named("minimizer", e))?;

    let windows = match s.get("experiment.windows") {
        None => DEFAULT_WINDOWS_HOURS.iter().map(|h| h * 3600.0).collect(),
        Some((v, line)) => v
            .split(',')
            .map(|p| parse_duration(p))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| CtmError::ConfigSyntax {
                line,
                reason: format!("`experiment.windows` expects durations, got `{v}`"),
            })?,
    };
    if windows.is_empty() {
        return Err(CtmError::invalid("experiment.windows", "must not be empty"));
    }
    if windows.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CtmError::invalid("experiment.windows", "must be strictly increasing"));
    }
    let experiment = ExperimentSpec {
        windows,
        t0: s.duration("experiment.t0")?.unwrap_or(0.0),
        dump_cadence: s.duration("experiment.dump_cadence")?,
    };
    if experiment.dump_cadence == Some(0.0) {
        return Err(CtmError::invalid("experiment.dump_cadence", "must be positive"));
    }

    let broadening_time = match s.text("diagnostics.broadening_time").as_deref().unwrap_or("round_trip") {
        "round_trip" => BroadeningTime::RoundTrip,
        "forward_only" => BroadeningTime::ForwardOnly,
        other => {
            return Err(CtmError::invalid(
                "diagnostics.broadening_time",
                format!("unknown convention `{other}`"),
            ))
        }
    };
    let diagnostics = DiagnosticsSpec {
        influence_fraction: s.real("diagnostics.influence_fraction", INFLUENCE_FRACTION)?,
        broadening_time,
        d_h: s.opt_real("diagnostics.d_h")?,
        ftle_horizon: s.duration("diagnostics.ftle_horizon")?.unwrap_or(2.0 * 86400.0),
        plume_width: s.opt_real("diagnostics.plume_width")?,
        boundary_scale: s.opt_real("diagnostics.boundary_scale")?,
    };
    if !(diagnostics.influence_fraction > 0.0 && diagnostics.influence_fraction < 1.0) {
        return Err(CtmError::invalid("diagnostics.influence_fraction", "must lie in (0, 1)"));
    }
    if !(diagnostics.ftle_horizon > 0.0) {
        return Err(CtmError::invalid("diagnostics.ftle_horizon", "must be positive"));
    }
    for (field, v) in [
        ("diagnostics.d_h", diagnostics.d_h),
        ("diagnostics.plume_width", diagnostics.plume_width),
        ("diagnostics.boundary_scale", diagnostics.boundary_scale),
    ] {
        if v.is_some_and(|v| v < 0.0) {
            return Err(CtmError::invalid(field, "must be nonnegative"));
        }
    }

    for required in ["grid", "wind", "plume"] {
        if !s.seen.contains(required) {
            return Err(CtmError::invalid(required, "section is required"));
        }
    }
    Ok(TwinConfig {
        grid,
        wind,
        plume,
        scheme,
        diffusion,
        adjoint,
        minimizer,
        experiment,
        diagnostics,
        source: text.to_string(),
    })
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<TwinConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CtmError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\n[wind]\nkind = bickley_jet\n[plume]\n";

    fn parse(text: &str) -> Result<TwinConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.minimizer.max_iters, 99);
        assert_eq!(c.scheme.scheme, Scheme::VanLeer2);
        assert_eq!(c.scheme.cfl_max, 0.8);
        assert_eq!((c.grid.nx, c.grid.ny), (128, 64));
        assert_eq!(c.wind, WindSpec::BickleyJet(BickleyParams::default()));
        assert_eq!(c.adjoint, AdjointVariant::Continuous);
        assert_eq!(c.experiment.windows.len(), 6);
        assert_eq!(c.plume.excess_factor, 2.0);
        assert!(!c.diffusion.enabled);
    }

    #[test]
    fn protocol_windows() {
        let text = format!("{MINIMAL}[experiment]\nwindows = 3h,12h,24h,48h,96h,168h\n");
        let c = parse(&text).unwrap();
        let hours: Vec<f64> = c.experiment.windows.iter().map(|w| w / 3600.0).collect();
        assert_eq!(hours, vec![3.0, 12.0, 24.0, 48.0, 96.0, 168.0]);
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("90s"), Some(90.0));
        assert_eq!(parse_duration("1.5h"), Some(5400.0));
        assert_eq!(parse_duration("2d"), Some(172800.0));
        assert_eq!(parse_duration("600"), Some(600.0));
        assert_eq!(parse_duration("-1h"), None);
        assert_eq!(parse_duration("h"), None);
    }

    #[test]
    fn bad_cfl_names_the_field() {
        let err = parse(&format!("{MINIMAL}[scheme]\ncfl_max = 1.5\n")).unwrap_err();
        assert!(err.to_string().contains("cfl_max"), "{err}");
        assert!(err.is_config_error());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse(&format!("{MINIMAL}[scheme]\nspeed = 3\n")).unwrap_err();
        match err {
            CtmError::UnknownKey { key, line } => {
                assert_eq!(key, "scheme.speed");
                assert_eq!(line, 6);
            }
            other => panic!("{other}"),
        }
        assert!(matches!(parse("[nope]\n"), Err(CtmError::UnknownKey { .. })));
    }

    #[test]
    fn syntax_errors_report_line() {
        let err = parse("[grid]\nnx 12\n").unwrap_err();
        assert!(matches!(err, CtmError::ConfigSyntax { line: 2, .. }), "{err}");
        let err = parse("[grid]\nnx = twelve\n").unwrap_err();
        assert!(matches!(err, CtmError::ConfigSyntax { line: 2, .. }), "{err}");
        let err = parse("nx = 3\n").unwrap_err();
        assert!(matches!(err, CtmError::ConfigSyntax { line: 1, .. }));
    }

    #[test]
    fn invariants_are_enforced() {
        let w = parse(&format!("{MINIMAL}[experiment]\nwindows = 12h,3h\n")).unwrap_err();
        assert!(w.to_string().contains("windows"));
        assert!(parse("[grid]\n[plume]\n").unwrap_err().to_string().contains("wind.kind"));
        assert!(parse("[wind]\nkind = uniform\n[plume]\n").unwrap_err().to_string().contains("grid"));
        let p = parse(&format!("{MINIMAL}excess_factor = 1\n")).unwrap_err();
        assert!(p.to_string().contains("plume"), "{p}");
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# experiment\n[grid]\nnx = 32 # cells\nny = 16\n[wind]\nkind = uniform\nspeed = 5\n[plume]\ncenter_x = 5e6\n[adjoint]\nvariant = discrete_transpose\nmatrix_cap = 600\n[diagnostics]\nd_h = 1e6\n";
        let c = parse(text).unwrap();
        assert_eq!(c.grid.nx, 32);
        assert_eq!(c.wind, WindSpec::Uniform { speed: 5.0 });
        assert_eq!(c.adjoint, AdjointVariant::DiscreteTranspose { cap: 600 });
        assert_eq!(c.diagnostics.d_h, Some(1e6));
        assert_eq!(c.source, text);
    }
}

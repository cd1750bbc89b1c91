//! Twin experiments, window sweeps and the file outputs they produce.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::TwinConfig;
use crate::diagnostics::{
    broadening_estimate, center_of_mass_error, default_r_max, effective_diffusivity, format_report,
    influence_from_plan, loss_estimate, total_mass_error, DiagnosticsReport,
};
use crate::dump::write_field;
use crate::error::{CtmError, Result};
use crate::ftle::{ftle_at, ftle_field, FtleSpec, Walls};
use crate::grid::{make_plume, rel_l2_error, ScalarField};
use crate::inversion::{format_cost_history, run_inversion, InversionResult, ModelConfig};
use crate::transport::{plan_transport, run_plan};
use crate::wind::{make_wind, WindField};

pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_VAR: &str = "CTM_THREADS";

/// Worker cap from `CTM_THREADS`; unset or unparsable means no cap.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Directory name for one window, stable across runs.
pub fn window_label(window: f64) -> String {
    format!("window_{window}s")
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CtmError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CtmError::io(path, e))
}

/// Diffusivity behind the broadening estimate and where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BroadeningInput {
    pub d_h: f64,
    /// Mean FTLE over the plume, when the diffusivity was derived from it.
    pub lambda: Option<f64>,
    pub plume_width: f64,
    pub boundary_scale: f64,
}

/// Everything a window needs that does not depend on the window.
pub struct TwinContext<'a> {
    pub config: &'a TwinConfig,
    pub wind: WindField,
    pub broadening: BroadeningInput,
}

impl<'a> TwinContext<'a> {
    pub fn new(config: &'a TwinConfig) -> Result<Self> {
        let wind = make_wind(&config.wind, &config.grid)?;
        let broadening = broadening_input(config, &wind)?;
        Ok(Self {
            config,
            wind,
            broadening,
        })
    }

    fn model(&self) -> ModelConfig {
        ModelConfig {
            t0: self.config.experiment.t0,
            scheme: self.config.scheme,
            diffusion: self.config.diffusion,
            adjoint: self.config.adjoint,
        }
    }

    /// One twin experiment; dumps go to `out` when given.
    pub fn run_window(&self, window: f64, out: Option<&Path>) -> Result<WindowRun> {
        let cfg = self.config;
        let plume = &cfg.plume;
        let grid = cfg.grid;
        let t0 = cfg.experiment.t0;
        let twin = run_inversion(plume, window, &self.wind, &self.model(), &cfg.minimizer)?;
        let region = influence_from_plan(
            &twin.observations,
            twin.model.plan(),
            plume,
            cfg.diagnostics.influence_fraction,
        )?;
        let footprint_cells = plume.footprint(&grid)?.iter().filter(|&&m| m).count();
        let true_area = footprint_cells as f64 * grid.cell_area();
        let loss = loss_estimate(true_area, region.area)?;
        let elapsed = cfg.diagnostics.broadening_time.elapsed(window);
        let estimate = &twin.result.c0_hat;
        let bg = plume.background;
        let report = DiagnosticsReport {
            window,
            rel_l2_pct: rel_l2_error(estimate, &twin.truth, bg)?,
            com_err_pct: center_of_mass_error(estimate, &twin.truth, bg, default_r_max(plume))?,
            mass_err_pct: total_mass_error(estimate, &twin.truth, bg)?,
            area_ratio_measured: region.area / true_area,
            area_ratio_estimated: broadening_estimate(plume, self.broadening.d_h, elapsed)?,
            loss_est_pct: loss.percent,
            cost_reduction_orders: twin.result.cost_reduction_orders(),
            iterations: twin.result.iterations,
        };

        let mut files = Vec::new();
        if let Some(dir) = out {
            create_dir(dir)?;
            let mut dump = |name: &str, field: &ScalarField, time: f64| -> Result<()> {
                let path = dir.join(name);
                write_field(&path, field, time)?;
                files.push(path);
                Ok(())
            };
            dump("truth.dat", &twin.truth, t0)?;
            dump("observations.dat", &twin.observations, t0 + window)?;
            dump("influence_mask.dat", &region.to_field(&grid)?, t0)?;
            dump("reconstruction.dat", estimate, t0)?;
            let history = dir.join("cost_history.csv");
            write_text(&history, &format_cost_history(&twin.result.history))?;
            files.push(history);
        }
        let plan = twin.model.plan();
        Ok(WindowRun {
            window,
            report,
            loss_clamped: loss.clamped,
            max_courant: plan.max_courant(),
            steps: plan.len(),
            result: twin.result,
            files,
        })
    }
}

/// Diffusivity for the broadening estimate: the configured value, or the
/// stretching estimate from the mean FTLE over the plume footprint, plus
/// any explicit model diffusion.
pub fn broadening_input(config: &TwinConfig, wind: &WindField) -> Result<BroadeningInput> {
    let d = &config.diagnostics;
    let plume = &config.plume;
    let grid = config.grid;
    let plume_width = d.plume_width.unwrap_or(plume.side_x.max(plume.side_y));
    let boundary_scale = d.boundary_scale.unwrap_or(grid.dx);
    let explicit = if config.diffusion.is_active() { config.diffusion.d_h } else { 0.0 };
    if let Some(d_h) = d.d_h {
        return Ok(BroadeningInput {
            d_h: d_h + explicit,
            lambda: None,
            plume_width,
            boundary_scale,
        });
    }
    let t0 = config.experiment.t0;
    wind.check_time(t0)?;
    wind.check_time(t0 + d.ftle_horizon)?;
    let spec = FtleSpec::new(d.ftle_horizon);
    let walls = Some(Walls {
        lo: grid.y0,
        hi: grid.y0 + grid.ly(),
    });
    let footprint = plume.footprint(&grid)?;
    let seeds: Vec<(f64, f64)> = (0..grid.len())
        .filter(|&k| footprint[k])
        .map(|k| grid.cell_center(k % grid.nx, k / grid.nx))
        .collect();
    let exponents: Vec<f64> = seeds
        .par_iter()
        .map(|&s| ftle_at(wind, s, t0, &spec, grid.dx / 10.0, walls))
        .collect::<Result<_>>()?;
    let lambda = (exponents.iter().sum::<f64>() / exponents.len() as f64).max(0.0);
    let est = effective_diffusivity(lambda, plume_width, boundary_scale)?;
    Ok(BroadeningInput {
        d_h: est.d_h + explicit,
        lambda: Some(lambda),
        plume_width,
        boundary_scale,
    })
}

/// Outcome of one twin window.
#[derive(Debug, Clone)]
pub struct WindowRun {
    pub window: f64,
    pub report: DiagnosticsReport,
    /// The measured region came out smaller than the plume.
    pub loss_clamped: bool,
    pub max_courant: f64,
    pub steps: usize,
    pub result: InversionResult,
    pub files: Vec<PathBuf>,
}

/// Single-window twin experiment with dumps under `out`.
pub fn run_twin(config: &TwinConfig, window: f64, out: Option<&Path>) -> Result<WindowRun> {
    TwinContext::new(config)?.run_window(window, out)
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowManifest {
    pub window_s: f64,
    pub directory: String,
    pub files: Vec<String>,
    pub max_courant: Option<f64>,
    pub steps: Option<usize>,
    pub iterations: Option<usize>,
    pub termination: Option<String>,
    pub loss_clamped: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config: String,
    pub start_unix: f64,
    pub end_unix: f64,
    pub wall_seconds: f64,
    pub success: bool,
    pub broadening: Option<BroadeningInput>,
    /// Files outside the per-window directories, relative to the output root.
    pub files: Vec<String>,
    pub windows: Vec<WindowManifest>,
}

impl RunManifest {
    fn start(command: &str, config: &TwinConfig) -> (Self, Instant) {
        let manifest = Self {
            command: command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.source.clone(),
            start_unix: unix_now(),
            end_unix: 0.0,
            wall_seconds: 0.0,
            success: false,
            broadening: None,
            files: Vec::new(),
            windows: Vec::new(),
        };
        (manifest, Instant::now())
    }

    fn finish(&mut self, clock: Instant, out: &Path) -> Result<()> {
        self.end_unix = unix_now();
        self.wall_seconds = clock.elapsed().as_secs_f64();
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CtmError::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        write_text(&path, &(text + "\n"))
    }

    /// Every file the manifest lists, resolved against `out`.
    pub fn listed_paths(&self, out: &Path) -> Vec<PathBuf> {
        self.files
            .iter()
            .chain(self.windows.iter().flat_map(|w| w.files.iter()))
            .map(|f| out.join(f))
            .collect()
    }
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

fn window_entry(window: f64, dir: &Path, out: &Path, run: &Result<WindowRun>) -> WindowManifest {
    let directory = relative(dir, out);
    match run {
        Ok(r) => WindowManifest {
            window_s: window,
            directory,
            files: r.files.iter().map(|f| relative(f, out)).collect(),
            max_courant: Some(r.max_courant),
            steps: Some(r.steps),
            iterations: Some(r.result.iterations),
            termination: Some(r.result.termination.name().to_string()),
            loss_clamped: Some(r.loss_clamped),
            error: None,
        },
        Err(e) => WindowManifest {
            window_s: window,
            directory,
            files: Vec::new(),
            max_courant: None,
            steps: None,
            iterations: None,
            termination: None,
            loss_clamped: None,
            error: Some(e.to_string()),
        },
    }
}

/// Result of a sweep: one entry per configured window, in order.
pub struct SweepOutcome {
    pub runs: Vec<Result<WindowRun>>,
    pub manifest: RunManifest,
}

impl SweepOutcome {
    pub fn reports(&self) -> Vec<DiagnosticsReport> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.report.clone()).collect()
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CtmError::invalid(THREADS_VAR, e.to_string()))
}

/// Runs every configured window, writes the report CSV, per-window dumps
/// and the manifest under `out`. A failing window only loses its row.
pub fn run_sweep(config: &TwinConfig, out: &Path, threads: Option<usize>) -> Result<SweepOutcome> {
    let (mut manifest, clock) = RunManifest::start("sweep", config);
    create_dir(out)?;
    let pool = thread_pool(threads)?;
    let ctx = pool.install(|| TwinContext::new(config))?;
    manifest.broadening = Some(ctx.broadening);
    let windows = &config.experiment.windows;
    let runs: Vec<Result<WindowRun>> = pool.install(|| {
        windows
            .par_iter()
            .map(|&w| ctx.run_window(w, Some(&out.join(window_label(w)))))
            .collect()
    });
    manifest.windows = windows
        .iter()
        .zip(&runs)
        .map(|(&w, r)| window_entry(w, &out.join(window_label(w)), out, r))
        .collect();
    let reports: Vec<DiagnosticsReport> =
        runs.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.report.clone()).collect();
    write_text(&out.join(REPORT_FILE), &format_report(&reports))?;
    manifest.files.push(REPORT_FILE.to_string());
    manifest.success = runs.iter().all(|r| r.is_ok());
    manifest.finish(clock, out)?;
    Ok(SweepOutcome { runs, manifest })
}

/// `ctm twin`: one window with the same outputs as a sweep row.
pub fn run_twin_command(config: &TwinConfig, window: f64, out: &Path) -> Result<(WindowRun, RunManifest)> {
    let (mut manifest, clock) = RunManifest::start("twin", config);
    create_dir(out)?;
    let ctx = TwinContext::new(config)?;
    manifest.broadening = Some(ctx.broadening);
    let dir = out.join(window_label(window));
    let run = ctx.run_window(window, Some(&dir));
    manifest.windows.push(window_entry(window, &dir, out, &run));
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            manifest.finish(clock, out)?;
            return Err(e);
        }
    };
    write_text(&out.join(REPORT_FILE), &format_report(std::slice::from_ref(&run.report)))?;
    manifest.files.push(REPORT_FILE.to_string());
    manifest.success = true;
    manifest.finish(clock, out)?;
    Ok((run, manifest))
}

/// `ctm forward`: transport of the true plume over `window`, dumped at
/// the configured cadence (start and end always included).
pub fn run_forward(config: &TwinConfig, window: f64, out: &Path) -> Result<RunManifest> {
    let (mut manifest, clock) = RunManifest::start("forward", config);
    create_dir(out)?;
    let wind = make_wind(&config.wind, &config.grid)?;
    let t0 = config.experiment.t0;
    let cadence = config.experiment.dump_cadence;
    let plan = plan_transport(&wind, t0, t0 + window, &config.scheme, &config.diffusion, cadence)?;
    let c0 = make_plume(&config.grid, &config.plume)?;
    let mut files = Vec::new();
    let mut write = |index: usize, field: &ScalarField, time: f64| -> Result<()> {
        let name = format!("forward_{index:04}.dat");
        write_field(&out.join(&name), field, time)?;
        files.push(name);
        Ok(())
    };
    write(0, &c0, t0)?;
    let mut pending: Result<()> = Ok(());
    let mut next_index = 1;
    let last = plan.len().checked_sub(1);
    let mut observer = |k: usize, t: f64, field: &ScalarField| {
        let at_cadence = cadence.is_some_and(|c| {
            let n = ((t - t0) / c).round();
            n >= 1.0 && (t - (t0 + n * c)).abs() <= 1e-6 * c.max(1.0)
        });
        if pending.is_ok() && (at_cadence || Some(k) == last) {
            pending = write(next_index, field, t);
            next_index += 1;
        }
    };
    let (_, log) = run_plan(&c0, &plan, Some(&mut observer))?;
    pending?;
    manifest.files = files;
    manifest.windows.push(WindowManifest {
        window_s: window,
        directory: String::new(),
        files: Vec::new(),
        max_courant: Some(log.max_courant),
        steps: Some(log.steps),
        iterations: None,
        termination: None,
        loss_clamped: None,
        error: None,
    });
    manifest.success = true;
    manifest.finish(clock, out)?;
    Ok(manifest)
}

/// `ctm ftle`: exponent field over the grid for `horizon` from `t0`.
pub fn run_ftle(config: &TwinConfig, horizon: f64, out: &Path, threads: Option<usize>) -> Result<RunManifest> {
    let (mut manifest, clock) = RunManifest::start("ftle", config);
    create_dir(out)?;
    let wind = make_wind(&config.wind, &config.grid)?;
    let t0 = config.experiment.t0;
    let pool = thread_pool(threads)?;
    let field = pool.install(|| ftle_field(&wind, t0, &FtleSpec::new(horizon)))?;
    write_field(&out.join("ftle.dat"), &field, t0)?;
    manifest.files.push("ftle.dat".into());
    manifest.success = true;
    manifest.finish(clock, out)?;
    Ok(manifest)
}

/// Error metrics recomputed from stored dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostHocMetrics {
    pub rel_l2_pct: f64,
    pub com_err_pct: f64,
    pub mass_err_pct: f64,
}

pub const POST_HOC_HEADER: &str = "rel_l2_pct,com_err_pct,mass_err_pct";

impl PostHocMetrics {
    pub fn csv(&self) -> String {
        format!("{POST_HOC_HEADER}\n{},{},{}\n", self.rel_l2_pct, self.com_err_pct, self.mass_err_pct)
    }
}

/// Extent of the truth's positive excess, the largest of its bounding-box
/// sides, used as the center-of-mass normalization.
fn excess_extent(truth: &ScalarField, background: f64) -> f64 {
    let g = truth.grid();
    let (mut i_lo, mut i_hi, mut j_lo, mut j_hi) = (usize::MAX, 0, usize::MAX, 0);
    for j in 0..g.ny {
        for i in 0..g.nx {
            if truth.get(i, j) > background {
                i_lo = i_lo.min(i);
                i_hi = i_hi.max(i);
                j_lo = j_lo.min(j);
                j_hi = j_hi.max(j);
            }
        }
    }
    if i_lo == usize::MAX {
        return 0.0;
    }
    ((i_hi - i_lo + 1) as f64 * g.dx).max((j_hi - j_lo + 1) as f64 * g.dy)
}

/// `ctm diagnose`: metrics between a truth and an estimate dump.
pub fn diagnose(truth: &ScalarField, estimate: &ScalarField, background: f64) -> Result<PostHocMetrics> {
    truth.grid().check_same(estimate.grid())?;
    let r_max = excess_extent(truth, background);
    if r_max == 0.0 {
        return Err(CtmError::UndefinedCenter("truth has no excess over the background".into()));
    }
    Ok(PostHocMetrics {
        rel_l2_pct: rel_l2_error(estimate, truth, background)?,
        com_err_pct: center_of_mass_error(estimate, truth, background, r_max)?,
        mass_err_pct: total_mass_error(estimate, truth, background)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::dump::read_field;

    fn small_config(extra: &str) -> TwinConfig {
        let text = format!(
            "[grid]\nnx = 32\nny = 16\n[wind]\nkind = bickley_jet\n[plume]\n[diagnostics]\nftle_horizon = 1d\n{extra}"
        );
        parse_config_str(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn zero_window_row_is_trivial() {
        let cfg = small_config("");
        let run = run_twin(&cfg, 0.0, None).unwrap();
        let r = &run.report;
        assert_eq!(r.rel_l2_pct, 0.0);
        assert_eq!(r.com_err_pct, 0.0);
        assert_eq!(r.mass_err_pct, 0.0);
        assert_eq!(r.area_ratio_measured, 1.0);
        assert_eq!(r.area_ratio_estimated, 1.0);
        assert_eq!(r.loss_est_pct, 0.0);
        assert!(!run.loss_clamped);
    }

    #[test]
    fn sweep_writes_rows_in_window_order() {
        let cfg = small_config("[experiment]\nwindows = 0s, 2h\n");
        let dir = tempfile::tempdir().unwrap();
        let out = run_sweep(&cfg, dir.path(), Some(2)).unwrap();
        assert!(out.manifest.success);
        let csv = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("2,"));
        for path in out.manifest.listed_paths(dir.path()) {
            assert!(path.exists(), "{}", path.display());
            if path.extension().is_some_and(|e| e == "dat") {
                read_field(&path).unwrap();
            }
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["windows"].as_array().unwrap().len(), 2);
        assert!(v["broadening"]["lambda"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn failed_window_keeps_other_rows() {
        // the second window leaves the snapshot range of a file wind
        let cfg = small_config("");
        let dir = tempfile::tempdir().unwrap();
        let wind = make_wind(&cfg.wind, &cfg.grid).unwrap();
        let snaps: Vec<_> = [0.0, 7200.0]
            .iter()
            .map(|&t| crate::wind::Snapshot {
                time: t,
                faces: wind.sample(t).unwrap(),
            })
            .collect();
        let wind_path = dir.path().join("wind.txt");
        crate::wind::write_wind_file(&wind_path, &cfg.grid, &snaps).unwrap();
        let text = format!(
            "[grid]\nnx = 32\nny = 16\n[wind]\nkind = file\npath = {}\n[plume]\n[diagnostics]\nd_h = 0\n[experiment]\nwindows = 1h, 3h\n",
            wind_path.display()
        );
        let cfg = parse_config_str(&text, Path::new(".")).unwrap();
        let out_dir = dir.path().join("out");
        let out = run_sweep(&cfg, &out_dir, None).unwrap();
        assert!(!out.manifest.success);
        assert!(out.runs[0].is_ok());
        assert!(matches!(out.runs[1], Err(CtmError::TimeRange { .. })));
        assert!(out.manifest.windows[1].error.is_some());
        let csv = std::fs::read_to_string(out_dir.join(REPORT_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn forward_zero_window_dump_equals_initial() {
        let cfg = small_config("[experiment]\ndump_cadence = 1h\n");
        let dir = tempfile::tempdir().unwrap();
        let m = run_forward(&cfg, 0.0, dir.path()).unwrap();
        assert_eq!(m.files, vec!["forward_0000.dat".to_string()]);
        let (f, _) = read_field(&dir.path().join("forward_0000.dat")).unwrap();
        assert_eq!(f.values(), make_plume(&cfg.grid, &cfg.plume).unwrap().values());
    }

    #[test]
    fn forward_dumps_at_cadence() {
        let cfg = small_config("[experiment]\ndump_cadence = 1h\n");
        let dir = tempfile::tempdir().unwrap();
        let m = run_forward(&cfg, 3.5 * 3600.0, dir.path()).unwrap();
        let times: Vec<f64> = m
            .files
            .iter()
            .map(|f| read_field(&dir.path().join(f)).unwrap().1)
            .collect();
        assert_eq!(times.len(), 5);
        for (t, expected) in times.iter().zip([0.0, 3600.0, 7200.0, 10800.0, 12600.0]) {
            assert!((t - expected).abs() < 1e-6, "{t} vs {expected}");
        }
    }

    #[test]
    fn ftle_on_uniform_wind_is_zero() {
        let text = "[grid]\nnx = 48\nny = 16\n[wind]\nkind = uniform\n[plume]\n";
        let cfg = parse_config_str(text, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_ftle(&cfg, 86400.0, dir.path(), Some(1)).unwrap();
        let (f, _) = read_field(&dir.path().join("ftle.dat")).unwrap();
        assert!(f.values().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn diagnose_truth_against_itself() {
        let cfg = small_config("");
        let truth = make_plume(&cfg.grid, &cfg.plume).unwrap();
        let m = diagnose(&truth, &truth, 1.0).unwrap();
        assert_eq!((m.rel_l2_pct, m.com_err_pct, m.mass_err_pct), (0.0, 0.0, 0.0));
        let other = ScalarField::constant(crate::grid::Grid::from_extent(8, 8, 1.0, 1.0, 0.0, 0.0).unwrap(), 1.0);
        assert!(matches!(diagnose(&truth, &other, 1.0), Err(CtmError::Shape(..))));
    }
}

//! Output formats: CSV tables with a provenance line, JSON summaries and
//! tableau text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sgvi_core::schemes::{build, Construction, SchemeId};
use sgvi_core::{GalerkinScheme, Sprk32Tableau, SprkTableau};

use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};
use crate::harness::{ConvergenceResult, EnergyResult, TrajectoryRow};

/// A table under construction. The first line is `# ` plus the resolved
/// configuration as JSON.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(config: &ExperimentConfig, header: &[String]) -> LabResult<Self> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"# ");
        buf.extend_from_slice(config.to_json().as_bytes());
        buf.push(b'\n');
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header)?;
        Ok(Table { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> LabResult<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(self) -> LabResult<Vec<u8>> {
        self.writer
            .into_inner()
            .map_err(|e| LabError::Experiment(format!("csv buffer: {}", e.error())))
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Recover the configuration echoed on the first line of a CSV output.
pub fn read_provenance(csv_text: &str) -> LabResult<ExperimentConfig> {
    let line = csv_text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| LabError::Validation("missing provenance line".into()))?;
    ExperimentConfig::from_json(line, Path::new("<provenance>"))
}

pub fn strings(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn convergence_csv(config: &ExperimentConfig, r: &ConvergenceResult) -> LabResult<Vec<u8>> {
    let mut t = Table::new(config, &strings(&["scheme", "dt", "ms_error", "stderr", "n_paths"]))?;
    for m in &r.methods {
        for l in &m.levels {
            t.row([
                m.method.clone(),
                num(l.dt),
                num(l.ms_error),
                num(l.stderr),
                r.n_paths.to_string(),
            ])?;
        }
    }
    t.finish()
}

pub fn energy_csv(config: &ExperimentConfig, results: &[EnergyResult]) -> LabResult<Vec<u8>> {
    let mut t = Table::new(config, &strings(&["scheme", "t", "mean_H", "stderr"]))?;
    for r in results {
        for i in 0..r.times.len() {
            t.row([r.method.clone(), num(r.times[i]), num(r.mean_h[i]), num(r.stderr[i])])?;
        }
    }
    t.finish()
}

pub fn trajectory_csv(
    config: &ExperimentConfig,
    rows: &[TrajectoryRow],
    momentum_names: &[String],
) -> LabResult<Vec<u8>> {
    let n = rows.first().map_or(0, |r| r.state.dim());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("q{i}")));
    header.extend((0..n).map(|i| format!("p{i}")));
    header.push("H".into());
    header.extend(momentum_names.iter().cloned());
    let mut t = Table::new(config, &header)?;
    for r in rows {
        let mut rec = vec![num(r.t)];
        rec.extend(r.state.q.iter().chain(&r.state.p).map(|&x| num(x)));
        rec.push(num(r.h));
        rec.extend(r.momenta.iter().map(|&x| num(x)));
        t.row(rec)?;
    }
    t.finish()
}

/// One line of the `check` table. Drift is absent for systems without a
/// linear symmetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub scheme: String,
    pub system: String,
    pub symplectic_defect: f64,
    pub momentum_drift: Option<f64>,
}

pub fn check_csv(config: &ExperimentConfig, rows: &[CheckRow]) -> LabResult<Vec<u8>> {
    let mut t = Table::new(
        config,
        &strings(&["scheme", "system", "symplectic_defect", "momentum_drift"]),
    )?;
    for r in rows {
        t.row([
            r.scheme.clone(),
            r.system.clone(),
            num(r.symplectic_defect),
            r.momentum_drift.map(num).unwrap_or_default(),
        ])?;
    }
    t.finish()
}

/// Pretty JSON of `{"config": .., "result": ..}`.
pub fn summary_json<T: Serialize>(config: &ExperimentConfig, result: &T) -> LabResult<Vec<u8>> {
    #[derive(Serialize)]
    struct Summary<'a, T> {
        config: &'a ExperimentConfig,
        result: &'a T,
    }
    let mut v = serde_json::to_vec_pretty(&Summary { config, result }).map_err(|source| LabError::Json {
        path: PathBuf::from("<summary>"),
        source,
    })?;
    v.push(b'\n');
    Ok(v)
}

/// `x` as `p/q` when some `q ≤ 64` reproduces it to `1e-13`, else decimal.
pub fn rational(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    for q in 1..=64_i64 {
        let p = (x * q as f64).round();
        if (p / q as f64 - x).abs() <= 1e-13 {
            let p = p as i64;
            return if q == 1 { p.to_string() } else { format!("{p}/{q}") };
        }
    }
    format!("{x:.16}")
}

fn matrix(out: &mut String, name: &str, m: &[f64], s: usize) {
    let cells: Vec<String> = m.iter().map(|&x| rational(x)).collect();
    let w = cells.iter().map(String::len).max().unwrap_or(1);
    for i in 0..s {
        let label = if i == 0 { name } else { "" };
        let row: Vec<String> = (0..s).map(|j| format!("{:>w$}", cells[i * s + j])).collect();
        let _ = writeln!(out, "  {label:<10} [ {} ]", row.join("  "));
    }
}

fn vector(out: &mut String, name: &str, v: &[f64]) {
    let cells: Vec<String> = v.iter().map(|&x| rational(x)).collect();
    let _ = writeln!(out, "  {name:<10} [ {} ]", cells.join("  "));
}

pub fn sprk_text(t: &SprkTableau) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "SPRK tableau, s = {}", t.s);
    matrix(&mut o, "a", &t.a, t.s);
    matrix(&mut o, "a_bar", &t.a_bar, t.s);
    matrix(&mut o, "b", &t.b, t.s);
    matrix(&mut o, "b_bar", &t.b_bar, t.s);
    vector(&mut o, "alpha", &t.alpha);
    vector(&mut o, "beta", &t.beta);
    let _ = writeln!(o, "  symplectic condition residual: {:e}", t.check_symplectic());
    o
}

pub fn sprk32_text(t: &Sprk32Tableau) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "order-3/2 SPRK tableau, s = {}", t.s);
    matrix(&mut o, "a", &t.a, t.s);
    matrix(&mut o, "a_bar", &t.a_bar, t.s);
    matrix(&mut o, "b_bar", &t.b_bar, t.s);
    matrix(&mut o, "lambda_bar", &t.lambda_bar, t.s);
    vector(&mut o, "alpha", &t.alpha);
    vector(&mut o, "alpha_bar", &t.alpha_bar);
    vector(&mut o, "beta_bar", &t.beta_bar);
    vector(&mut o, "gamma_bar", &t.gamma_bar);
    o
}

fn galerkin_text(g: &GalerkinScheme) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "Galerkin data, polynomial degree {}", g.degree());
    vector(&mut o, "points", g.basis().points());
    vector(&mut o, "drift c", &g.drift_rule().nodes);
    vector(&mut o, "drift w", &g.drift_rule().weights);
    vector(&mut o, "noise c", &g.diffusion_rule().nodes);
    vector(&mut o, "noise w", &g.diffusion_rule().weights);
    o
}

/// Human-readable description of a scheme's coefficients.
pub fn tableau_text(id: SchemeId) -> String {
    let d = build(id);
    let mut o = format!("{}\n", id.name());
    match &d.construction {
        Construction::Sprk32(t) => o.push_str(&sprk32_text(t)),
        Construction::Sprk(g, t) => {
            o.push_str(&sprk_text(t));
            o.push_str(&galerkin_text(g));
        }
        Construction::Galerkin(g) => {
            match SprkTableau::from_galerkin(g) {
                Ok(t) => o.push_str(&sprk_text(&t)),
                Err(e) => {
                    let _ = writeln!(o, "{e}");
                }
            }
            o.push_str(&galerkin_text(g));
        }
    }
    o
}

/// Files produced by a run, written only once everything succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn push(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    /// Write every file. On the first failure, remove whatever was written.
    pub fn commit(&self) -> LabResult<()> {
        let mut written: Vec<&Path> = Vec::new();
        for (path, bytes) in &self.files {
            if let Err(source) = std::fs::write(path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                let _ = std::fs::remove_file(path);
                return Err(LabError::Io {
                    path: path.clone(),
                    source,
                });
            }
            written.push(path);
        }
        Ok(())
    }
}

//! Design matrices of redistribution rules and exchange regimes, and their
//! CSV/JSON exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    certify, solve_sne, Certificate, Diagnostics, Residuals, SolveReport, SolverSettings, TraceRow,
};
use crate::error::{Error, Result};
use crate::mean_field::compute_field;
use crate::model::{build_state_space, validate_config, EconomyConfig, ExchangeMatrix, RedistributionRule};
use crate::welfare::{benchmark_payoffs, utilization, welfare_report, Benchmark, UtilizationRow, WelfareReport};

/// Inter-account exchange regime of a design cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Exchange {
    None,
    Unit,
    /// `chi[r][r'] = ratio^(r' - r)`.
    Ratio(f64),
    Custom(ExchangeMatrix),
}

impl Exchange {
    pub fn matrix(&self, n: usize) -> ExchangeMatrix {
        match self {
            Exchange::None => ExchangeMatrix::identity(n),
            Exchange::Unit => ExchangeMatrix::unit(n),
            Exchange::Ratio(x) => ExchangeMatrix::geometric(n, *x),
            Exchange::Custom(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub redistribution: RedistributionRule,
    pub exchange: Exchange,
    /// Row label of the exchange regime, e.g. `"Exchange P>H"`.
    pub label: String,
}

impl Cell {
    pub fn config(&self, base: &EconomyConfig) -> EconomyConfig {
        let mut cfg = base.clone();
        cfg.redistribution = self.redistribution;
        cfg.exchange = self.exchange.matrix(base.n_resources());
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMatrix {
    pub base: EconomyConfig,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub settings: SolverSettings,
}

impl ScenarioMatrix {
    /// Both redistribution rules crossed with no, unit, and the two
    /// reciprocal 3/2 exchange regimes.
    pub fn standard(base: EconomyConfig) -> Self {
        let first = base.resources.first().map(|r| r.name.clone()).unwrap_or_default();
        let second = base.resources.get(1).map(|r| r.name.clone()).unwrap_or_default();
        let regimes = [
            (Exchange::None, "No Exchange".to_string()),
            (Exchange::Unit, "Unit Exchange".to_string()),
            (Exchange::Ratio(1.5), format!("Exchange {second}>{first}")),
            (Exchange::Ratio(2.0 / 3.0), format!("Exchange {second}<{first}")),
        ];
        let cells = [RedistributionRule::ToActive, RedistributionRule::ToAll]
            .into_iter()
            .flat_map(|rule| {
                regimes.iter().map(move |(exchange, label)| Cell {
                    redistribution: rule,
                    exchange: exchange.clone(),
                    label: label.clone(),
                })
            })
            .collect();
        ScenarioMatrix {
            base,
            cells,
            settings: SolverSettings::default(),
        }
    }

    pub fn case_study() -> Self {
        Self::standard(EconomyConfig::case_study())
    }
}

/// Everything reported for a solved cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub converged: bool,
    pub iterations: usize,
    pub residuals: Residuals,
    pub certificate: Certificate,
    pub welfare: WelfareReport,
    pub delays: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub utilization: Vec<UtilizationRow>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellOutcome {
    Solved(Box<CellReport>),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn report(&self) -> Option<&CellReport> {
        match &self.outcome {
            CellOutcome::Solved(r) => Some(r),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub types: Vec<String>,
    pub benchmark: Option<Benchmark>,
    pub cells: Vec<CellResult>,
}

impl ResultBundle {
    pub fn all_converged(&self) -> bool {
        self.cells
            .iter()
            .all(|c| c.report().is_some_and(|r| r.converged))
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.report().is_none())
    }
}

/// Solves one configuration and gathers its report.
pub fn run_cell(cfg: &EconomyConfig, settings: &SolverSettings) -> Result<CellReport> {
    let report = solve_sne(cfg, settings, None)?;
    cell_report(cfg, settings, report)
}

/// Certifies a solver report and derives welfare and utilization from it.
pub fn cell_report(cfg: &EconomyConfig, settings: &SolverSettings, report: SolveReport) -> Result<CellReport> {
    let space = build_state_space(cfg)?;
    let field = compute_field(cfg, &space, &report.social);
    let certificate = certify(cfg, &report.social, settings.value_tol)?;
    let welfare = welfare_report(cfg, &space, &report.social, &field)?;
    Ok(CellReport {
        converged: report.converged,
        iterations: report.iterations,
        residuals: report.residuals,
        certificate,
        welfare,
        delays: field.delays(),
        diagnostics: report.diagnostics,
        utilization: utilization(cfg, &space, &report.social, &field),
        trace: report.trace,
    })
}

/// Runs every cell; a failing cell is recorded and the others proceed.
pub fn run_matrix(matrix: &ScenarioMatrix) -> ResultBundle {
    let cells: Vec<CellResult> = matrix
        .cells
        .iter()
        .map(|cell| {
            let cfg = cell.config(&matrix.base);
            log::info!("solving {} / {}", cell.redistribution, cell.label);
            let outcome = match run_cell(&cfg, &matrix.settings) {
                Ok(r) => CellOutcome::Solved(Box::new(r)),
                Err(e) => CellOutcome::Failed { error: e.to_string() },
            };
            CellResult {
                cell: cell.clone(),
                outcome,
            }
        })
        .collect();
    let benchmark = (!cells.is_empty() && validate_config(&matrix.base).is_valid())
        .then(|| benchmark_payoffs(&matrix.base));
    ResultBundle {
        types: matrix.base.types.iter().map(|t| t.name.clone()).collect(),
        benchmark,
        cells,
    }
}

/// One line of the welfare table: per-type endogenous payoffs, endogenous
/// Nash welfare, per-type exogenous payoffs, exogenous Nash welfare.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfareRow {
    pub redistribution: String,
    pub exchange: String,
    pub endogenous: Vec<f64>,
    pub social_endogenous: Option<f64>,
    pub exogenous: Vec<f64>,
    pub social_exogenous: Option<f64>,
    pub status: String,
}

fn round4(x: f64) -> f64 {
    format!("{x:.4}").parse().expect("formatted float parses")
}

fn fmt4(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn welfare_rows(bundle: &ResultBundle) -> Vec<WelfareRow> {
    let mut rows = Vec::new();
    if let Some(b) = &bundle.benchmark {
        rows.push(WelfareRow {
            redistribution: "benchmark".into(),
            exchange: String::new(),
            endogenous: b.endogenous.clone(),
            social_endogenous: None,
            exogenous: b.exogenous.clone(),
            social_exogenous: None,
            status: "analytic".into(),
        });
    }
    for c in &bundle.cells {
        let (endogenous, exogenous, sw_en, sw_ex, status) = match &c.outcome {
            CellOutcome::Solved(r) => (
                r.welfare.endogenous.clone(),
                r.welfare.exogenous.clone(),
                r.welfare.social_endogenous,
                r.welfare.social_exogenous,
                if r.converged { "converged" } else { "not_converged" }.to_string(),
            ),
            CellOutcome::Failed { .. } => (vec![], vec![], None, None, "failed".to_string()),
        };
        rows.push(WelfareRow {
            redistribution: c.cell.redistribution.to_string(),
            exchange: c.cell.label.clone(),
            endogenous,
            social_endogenous: sw_en,
            exogenous,
            social_exogenous: sw_ex,
            status,
        });
    }
    rows
}

/// Welfare table with four decimals; empty fields mark undefined values.
pub fn welfare_csv(bundle: &ResultBundle) -> Result<String> {
    let n = bundle.types.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["redistribution".to_string(), "exchange".to_string()];
    header.extend(bundle.types.iter().map(|t| format!("{t}_endogenous")));
    header.push("social_endogenous".into());
    header.extend(bundle.types.iter().map(|t| format!("{t}_exogenous")));
    header.push("social_exogenous".into());
    header.push("status".into());
    w.write_record(&header)?;
    for row in welfare_rows(bundle) {
        let mut rec = vec![row.redistribution, row.exchange];
        let cols = |v: &[f64]| -> Vec<String> {
            (0..n).map(|i| fmt4(v.get(i).copied())).collect()
        };
        rec.extend(cols(&row.endogenous));
        rec.push(fmt4(row.social_endogenous));
        rec.extend(cols(&row.exogenous));
        rec.push(fmt4(row.social_exogenous));
        rec.push(row.status);
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Parses a table written by [`welfare_csv`]; values come back rounded.
pub fn parse_welfare_csv(text: &str, n_types: usize) -> Result<Vec<WelfareRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Shape(format!("bad number {s:?}: {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 * n_types + 5 {
            return Err(Error::Shape(format!("welfare row has {} fields", rec.len())));
        }
        let vals = |from: usize| -> Result<Vec<f64>> {
            Ok((from..from + n_types)
                .map(|i| parse(&rec[i]))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect())
        };
        rows.push(WelfareRow {
            redistribution: rec[0].to_string(),
            exchange: rec[1].to_string(),
            endogenous: vals(2)?,
            social_endogenous: parse(&rec[2 + n_types])?,
            exogenous: vals(3 + n_types)?,
            social_exogenous: parse(&rec[3 + 2 * n_types])?,
            status: rec[4 + 2 * n_types].to_string(),
        });
    }
    Ok(rows)
}

/// `rows` with every value rounded as in the CSV table.
pub fn rounded(rows: &[WelfareRow]) -> Vec<WelfareRow> {
    rows.iter()
        .map(|r| WelfareRow {
            endogenous: r.endogenous.iter().copied().map(round4).collect(),
            exogenous: r.exogenous.iter().copied().map(round4).collect(),
            social_endogenous: r.social_endogenous.map(round4),
            social_exogenous: r.social_exogenous.map(round4),
            ..r.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRecord {
    pub redistribution: String,
    pub exchange: String,
    pub resource: String,
    pub type_name: String,
    pub urgency: f64,
    pub priority: f64,
    pub general: f64,
    pub inactive: f64,
}

pub fn utilization_records(bundle: &ResultBundle) -> Vec<UtilizationRecord> {
    bundle
        .cells
        .iter()
        .filter_map(|c| c.report().map(|r| (c, r)))
        .flat_map(|(c, r)| {
            r.utilization.iter().map(move |u| UtilizationRecord {
                redistribution: c.cell.redistribution.to_string(),
                exchange: c.cell.label.clone(),
                resource: u.resource.clone(),
                type_name: u.type_name.clone(),
                urgency: u.urgency,
                priority: u.priority,
                general: u.general,
                inactive: u.inactive,
            })
        })
        .collect()
}

/// Utilization breakdown at full precision.
pub fn utilization_csv(bundle: &ResultBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in utilization_records(bundle) {
        w.serialize(rec)?;
    }
    if bundle.cells.iter().all(|c| c.report().is_none()) {
        w.write_record([
            "redistribution",
            "exchange",
            "resource",
            "type_name",
            "urgency",
            "priority",
            "general",
            "inactive",
        ])?;
    }
    finish(w)
}

pub fn parse_utilization_csv(text: &str) -> Result<Vec<UtilizationRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Convergence traces of all solved cells, prefixed by the cell.
pub fn trace_csv(bundle: &ResultBundle) -> String {
    let mut out = format!("redistribution,exchange,{}\n", TraceRow::HEADER);
    for c in &bundle.cells {
        if let Some(r) = c.report() {
            for row in &r.trace {
                let _ = writeln!(out, "{},{},{}", c.cell.redistribution, c.cell.label, row.to_line());
            }
        }
    }
    out
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Shape(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Shape(e.to_string()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes `welfare.csv`, `utilization.csv`, `trace.csv` and `bundle.json`.
pub fn export(bundle: &ResultBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "welfare.csv", &welfare_csv(bundle)?)?;
    write(dir, "utilization.csv", &utilization_csv(bundle)?)?;
    write(dir, "trace.csv", &trace_csv(bundle))?;
    write(dir, "bundle.json", &serde_json::to_string_pretty(bundle)?)?;
    Ok(())
}

//! The method × io × scale comparison matrix and its directional findings.
//!
//! Each cell is cached under `cells/<hash>.json`, where the hash covers the
//! cell, every setting that influences it and the dataset hash, so reruns
//! skip finished cells and pick up where a previous run stopped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, EvalRow};
use crate::field::Field;
use crate::pipeline::{dataset_hash, evaluate_cell, load_dataset, run_name, train, CellResult, TrainOptions};
use crate::roles::{IoConfig, Method};

/// Mean squared 4-neighbour Laplacian over interior pixels of every channel.
pub fn highfreq_energy(f: &Field) -> f64 {
    let (h, w) = (f.height(), f.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for c in 0..f.num_channels() {
        let p = f.plane(c);
        let at = |y: usize, x: usize| p[y * w + x] as f64;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                acc += lap * lap;
            }
        }
    }
    acc / (f.num_channels() * (h - 2) * (w - 2)) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    /// `None` for interpolation methods.
    pub io: Option<IoConfig>,
    pub scale: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        match self.io {
            Some(io) => run_name(self.method, io, self.scale),
            None => format!("{}-x{}", self.method, self.scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentMatrix {
    pub methods: Vec<Method>,
    pub io_configs: Vec<IoConfig>,
    pub scales: Vec<usize>,
    pub config: RunConfig,
}

impl ExperimentMatrix {
    /// The full comparison table at desk-scale settings.
    pub fn full(config: RunConfig) -> Self {
        Self { methods: Method::ALL.to_vec(), io_configs: IoConfig::ALL.to_vec(), scales: vec![4, 8], config }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &scale in &self.scales {
            for &method in &self.methods {
                if method.is_learned() {
                    cells.extend(self.io_configs.iter().map(|&io| Cell { method, io: Some(io), scale }));
                } else {
                    cells.push(Cell { method, io: None, scale });
                }
            }
        }
        cells.sort();
        cells.dedup();
        cells
    }

    /// Cache key of a cell: only the settings that can change its result.
    pub fn cell_hash(&self, cell: &Cell, data_hash: &str) -> String {
        let c = &self.config;
        let mut key = serde_json::json!({ "cell": cell, "data": data_hash, "eval_limit": c.eval.limit,
            "sample_seed": c.eval.sample_seed, "per_sample": c.eval.per_sample_rmse });
        if cell.method.is_learned() {
            key["train"] = serde_json::to_value(&c.train).expect("serialisable");
            key["model"] = serde_json::to_value(&c.model).expect("serialisable");
            if cell.method == Method::Ddpm {
                key["diffusion"] = serde_json::to_value(&c.diffusion).expect("serialisable");
            }
        }
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CachedCell {
    cell: Cell,
    result: CellResult,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub results: Vec<CellResult>,
    pub failures: Vec<(Cell, String)>,
    pub report: Option<EvalReport>,
    pub findings: Findings,
}

fn run_cell(m: &ExperimentMatrix, cell: Cell, data_dir: &Path, out_dir: &Path) -> Result<CellResult> {
    let mut cfg = m.config.clone();
    cfg.data.scale = cell.scale;
    let bundle = load_dataset(data_dir, cell.scale)?;
    match cell.io {
        Some(io) => {
            let run_dir = out_dir.join("runs").join(cell.name());
            let opts = TrainOptions { resume: true, halt_at: None };
            train(&cfg, cell.method, io, data_dir, &run_dir, &opts)?;
            evaluate_cell(&cfg, &bundle, cell.method, io, Some(&run_dir))
        }
        None => evaluate_cell(&cfg, &bundle, cell.method, IoConfig::ThreeInThreeOut, None),
    }
}

/// Trains and scores every cell (skipping cached ones), running up to `jobs`
/// cells at once. A failing cell is recorded and the rest continue.
pub fn run_matrix(m: &ExperimentMatrix, data_dir: &Path, out_dir: &Path, jobs: usize) -> Result<MatrixOutcome> {
    m.config.validate()?;
    let data_hash = dataset_hash(data_dir)?;
    let cell_dir = out_dir.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let cells = m.cells();
    let queue = Mutex::new(cells.to_vec());
    let done: Mutex<Vec<(Cell, std::result::Result<CellResult, String>)>> = Mutex::new(Vec::new());
    let work = || loop {
        let Some(cell) = queue.lock().expect("queue").pop() else { break };
        let path = cell_dir.join(format!("{}.json", m.cell_hash(&cell, &data_hash)));
        let cached = fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str::<CachedCell>(&t).ok());
        let result = match cached {
            Some(c) if c.cell == cell => {
                log::info!("{}: cached", cell.name());
                Ok(c.result)
            }
            _ => {
                log::info!("{}: running", cell.name());
                run_cell(m, cell, data_dir, out_dir).and_then(|r| {
                    let text = serde_json::to_string_pretty(&CachedCell { cell, result: r.clone() })?;
                    fs::write(&path, text + "\n")?;
                    Ok(r)
                })
            }
        };
        done.lock().expect("results").push((cell, result.map_err(|e| e.to_string())));
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1) {
            s.spawn(work);
        }
        work();
    });

    let mut done = done.into_inner().expect("results");
    done.sort_by_key(|(c, _)| *c);
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in done {
        match r {
            Ok(r) => results.push(r),
            Err(e) => failures.push((cell, e)),
        }
    }
    let report =
        if results.is_empty() { None } else { Some(EvalReport::new(results.iter().map(|r| r.row.clone()).collect())?) };
    let findings = Findings::from_results(&results);
    let outcome = MatrixOutcome { results, failures, report, findings };
    write_outputs(&outcome, out_dir)?;
    Ok(outcome)
}

/// Rebuilds the consolidated report from cached cells without running anything.
pub fn collect(out_dir: &Path) -> Result<MatrixOutcome> {
    let cell_dir = out_dir.join("cells");
    let mut entries: Vec<PathBuf> = fs::read_dir(&cell_dir)
        .map_err(|_| Error::Missing(format!("no matrix results in {}", out_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    let mut cached: Vec<CachedCell> =
        entries.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect::<Result<_>>()?;
    cached.sort_by_key(|c| c.cell);
    // several cached configurations of one cell: keep the first in hash order
    cached.dedup_by_key(|c| c.cell);
    let results: Vec<CellResult> = cached.into_iter().map(|c| c.result).collect();
    if results.is_empty() {
        return Err(Error::Missing(format!("no matrix results in {}", out_dir.display())));
    }
    let report = Some(EvalReport::new(results.iter().map(|r| r.row.clone()).collect())?);
    let findings = Findings::from_results(&results);
    let outcome = MatrixOutcome { results, failures: Vec::new(), report, findings };
    write_outputs(&outcome, out_dir)?;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Matches,
    Contradicts,
    /// The cells the claim needs were not evaluated.
    Inconclusive,
}

impl Verdict {
    fn from_checks(checks: &[bool]) -> Self {
        if checks.is_empty() {
            Verdict::Inconclusive
        } else if checks.iter().all(|&c| c) {
            Verdict::Matches
        } else {
            Verdict::Contradicts
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Matches => "MATCHES",
            Verdict::Contradicts => "CONTRADICTS",
            Verdict::Inconclusive => "INCONCLUSIVE",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Claim {
    pub id: char,
    pub statement: &'static str,
    pub verdict: Verdict,
    pub evidence: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Findings {
    pub claims: Vec<Claim>,
}

impl Findings {
    pub fn from_results(results: &[CellResult]) -> Self {
        let rows: Vec<&EvalRow> = results.iter().map(|r| &r.row).collect();
        let find = |m: Method, io: Option<IoConfig>, s: usize| {
            rows.iter().find(|r| r.method == m && r.io_config == io && r.scale == s)
        };

        let mut a_checks = Vec::new();
        let mut a_ev = Vec::new();
        for r in rows.iter().filter(|r| r.scale == 4) {
            if let Some(r8) = find(r.method, r.io_config, 8) {
                a_checks.push(r8.rmse > r.rmse);
                let io = r.io_config.map_or("-".to_string(), |c| c.to_string());
                a_ev.push(format!("{} {io}: 4x {:.6} vs 8x {:.6}", r.method, r.rmse, r8.rmse));
            }
        }

        let mut b_checks = Vec::new();
        let mut b_ev = Vec::new();
        for s in [4, 8] {
            if let (Some(one), Some(three)) = (
                find(Method::Ddpm, Some(IoConfig::ThreeInOneOut), s),
                find(Method::Ddpm, Some(IoConfig::ThreeInThreeOut), s),
            ) {
                b_checks.push(one.rmse < three.rmse);
                b_ev.push(format!("{s}x: 3in1out {:.6} vs 3in3out {:.6}", one.rmse, three.rmse));
            }
        }

        let mut c_checks = Vec::new();
        let mut c_ev = Vec::new();
        for s in [4, 8] {
            let ddpm = results.iter().find(|r| {
                r.row.method == Method::Ddpm && r.row.io_config == Some(IoConfig::ThreeInOneOut) && r.row.scale == s
            });
            let bicubic = results.iter().find(|r| r.row.method == Method::Bicubic && r.row.scale == s);
            if let (Some(d), Some(b)) = (ddpm, bicubic) {
                c_checks.push(d.highfreq_energy > b.highfreq_energy);
                c_ev.push(format!(
                    "{s}x: ddpm-3in1out {:.6e} vs bicubic {:.6e} (HR truth {:.6e})",
                    d.highfreq_energy, b.highfreq_energy, d.truth_highfreq_energy
                ));
            }
        }

        Findings {
            claims: vec![
                Claim {
                    id: 'a',
                    statement: "every method has higher RMSE at 8x than at 4x",
                    verdict: Verdict::from_checks(&a_checks),
                    evidence: a_ev,
                },
                Claim {
                    id: 'b',
                    statement: "conditional DDPM 3in1out has lower RMSE than DDPM 3in3out",
                    verdict: Verdict::from_checks(&b_checks),
                    evidence: b_ev,
                },
                Claim {
                    id: 'c',
                    statement: "DDPM 3in1out outputs carry more high-frequency energy than bicubic upsampling",
                    verdict: Verdict::from_checks(&c_checks),
                    evidence: c_ev,
                },
            ],
        }
    }

    pub fn claim(&self, id: char) -> Option<&Claim> {
        self.claims.iter().find(|c| c.id == id)
    }

    pub fn to_markdown(&self, report: Option<&EvalReport>, failures: &[(Cell, String)]) -> String {
        let mut s = String::from("# Findings\n\nDirectional checks of the comparison table on synthetic data.\n\n");
        for c in &self.claims {
            writeln!(s, "verdict ({}): {} - {}", c.id, c.verdict.as_str(), c.statement).unwrap();
            for e in &c.evidence {
                writeln!(s, "    {e}").unwrap();
            }
        }
        if let Some(r) = report {
            s.push_str("\n## RMSE\n\n```\n");
            s.push_str(&r.to_table());
            s.push_str("```\n");
        }
        if !failures.is_empty() {
            s.push_str("\n## Failed cells\n\n");
            for (c, e) in failures {
                writeln!(s, "- {}: {e}", c.name()).unwrap();
            }
        }
        s
    }
}

fn write_outputs(o: &MatrixOutcome, out_dir: &Path) -> Result<()> {
    if let Some(r) = &o.report {
        fs::write(out_dir.join("report.csv"), r.to_csv())?;
    }
    fs::write(out_dir.join("findings.md"), o.findings.to_markdown(o.report.as_ref(), &o.failures))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn highfreq_examples() {
        let c = Field::constant(&["a"], 6, 6, 3.0).unwrap();
        assert_eq!(highfreq_energy(&c), 0.0);
        let checker = Field::from_fn(&["a"], 6, 6, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let ramp = Field::from_fn(&["a"], 6, 6, |_, y, x| (x + y) as f32 * 0.3).unwrap();
        // each interior checkerboard pixel has Laplacian ∓8
        assert_eq!(highfreq_energy(&checker), 64.0);
        assert!(highfreq_energy(&checker) > highfreq_energy(&ramp));
    }

    #[test]
    fn cells_of_small_matrix() {
        let m = ExperimentMatrix {
            methods: vec![Method::Bicubic, Method::Bilinear],
            io_configs: vec![IoConfig::ThreeInOneOut],
            scales: vec![4],
            config: RunConfig::default(),
        };
        assert_eq!(m.cells().len(), 2);
        let full = ExperimentMatrix::full(RunConfig::default());
        assert_eq!(full.cells().len(), 2 * (2 + 3 * 2));
        let c = full.cells()[0];
        assert_eq!(full.cell_hash(&c, "x"), full.cell_hash(&c, "x"));
        assert_ne!(full.cell_hash(&c, "x"), full.cell_hash(&c, "y"));
    }

    #[test]
    fn verdicts_from_rows() {
        let row = |method, io, scale, rmse| CellResult {
            row: EvalRow { method, io_config: io, scale, rmse, n: 1 },
            highfreq_energy: if method == Method::Ddpm { 2.0 } else { 1.0 },
            truth_highfreq_energy: 3.0,
        };
        let one = Some(IoConfig::ThreeInOneOut);
        let three = Some(IoConfig::ThreeInThreeOut);
        let f = Findings::from_results(&[
            row(Method::Bicubic, None, 4, 1.0),
            row(Method::Bicubic, None, 8, 2.0),
            row(Method::Ddpm, one, 4, 0.5),
            row(Method::Ddpm, one, 8, 0.4),
            row(Method::Ddpm, three, 4, 0.7),
        ]);
        assert_eq!(f.claim('a').unwrap().verdict, Verdict::Contradicts);
        assert_eq!(f.claim('b').unwrap().verdict, Verdict::Matches);
        assert_eq!(f.claim('c').unwrap().verdict, Verdict::Matches);
        assert_eq!(Findings::from_results(&[]).claim('a').unwrap().verdict, Verdict::Inconclusive);
        assert!(f.to_markdown(None, &[]).contains("verdict (b): MATCHES"));
    }
}

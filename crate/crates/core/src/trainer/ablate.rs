//! Ablation sweeps over module toggles, alignment sets, fusion weight and
//! speech perturbations, repeated over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::{evaluate, train};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::Alignment;
use crate::scenegen::Dataset;

pub const BETA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];
pub const ABLATION_HEADER: &str = "cell,seed,subset,thresh,accuracy";
pub const SUMMARY_HEADER: &str = "cell,subset,thresh,mean,std,seeds";

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// none, sll, sll+ccm, sll+cbm+ccm
    Modules,
    /// none, t&o, t&o+t&s, t&o+s&o+t&s
    Alignment,
    /// One training run per seed, evaluated at every weight of [`BETA_GRID`].
    Beta,
    Rate(Vec<f64>),
    Noise(Vec<f64>),
}

impl Sweep {
    pub fn parse(kind: &str, values: &[f64]) -> Result<Self> {
        let need = |s: Sweep| if values.is_empty() { Err(Error::Config(format!("sweep `{kind}` needs values"))) } else { Ok(s) };
        match kind {
            "modules" => Ok(Sweep::Modules),
            "alignment" => Ok(Sweep::Alignment),
            "beta" => Ok(Sweep::Beta),
            "rate" => need(Sweep::Rate(values.to_vec())),
            "noise" => need(Sweep::Noise(values.to_vec())),
            _ => Err(Error::Config(format!("unknown sweep `{kind}`"))),
        }
    }

    /// Cells that each need their own training run.
    fn train_cells(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Sweep::Modules => vec![
                ("modules=none".into(), with(&|c| (c.sll, c.cbm, c.ccm) = (false, false, false))),
                ("modules=sll".into(), with(&|c| (c.sll, c.cbm, c.ccm) = (true, false, false))),
                ("modules=sll+ccm".into(), with(&|c| (c.sll, c.cbm, c.ccm) = (true, false, true))),
                ("modules=sll+cbm+ccm".into(), with(&|c| (c.sll, c.cbm, c.ccm) = (true, true, true))),
            ],
            Sweep::Alignment => {
                let set = |t_o, s_o, t_s| Alignment { text_object: t_o, speech_object: s_o, text_speech: t_s };
                vec![
                    ("align=none".into(), with(&|c| c.align = Alignment::NONE)),
                    ("align=t&o".into(), with(&|c| c.align = set(true, false, false))),
                    ("align=t&o+t&s".into(), with(&|c| c.align = set(true, false, true))),
                    ("align=t&o+s&o+t&s".into(), with(&|c| c.align = Alignment::ALL)),
                ]
            }
            Sweep::Beta => vec![("beta".into(), base.clone())],
            Sweep::Rate(v) => v.iter().map(|&r| (format!("rate={r}"), with(&|c| c.rate_scale = r))).collect(),
            Sweep::Noise(v) => v.iter().map(|&n| (format!("noise={n}"), with(&|c| c.noise_level = n))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub subset: String,
    pub thresh: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.cell, r.seed, r.subset, r.thresh, r.accuracy).expect("write to string");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { path: "ablation".into(), line: line + 1, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == ABLATION_HEADER => {}
            _ => return Err(bad(0, format!("expected header `{ABLATION_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i, format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(i, e.to_string()));
            rows.push(AblationRow {
                cell: f[0].to_string(),
                seed: f[1].trim().parse().map_err(|e: std::num::ParseIntError| bad(i, e.to_string()))?,
                subset: f[2].to_string(),
                thresh: num(f[3])?,
                accuracy: num(f[4])?,
            });
        }
        if rows.is_empty() {
            return Err(bad(1, "no data rows".into()));
        }
        Ok(Self { rows })
    }

    /// Cells in first-appearance order.
    pub fn cells(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell) {
                out.push(r.cell.clone());
            }
        }
        out
    }

    /// Seed-mean accuracy of one cell.
    pub fn mean(&self, cell: &str, subset: &str, thresh: f64) -> Option<f64> {
        let v: Vec<f64> =
            self.rows.iter().filter(|r| r.cell == cell && r.subset == subset && r.thresh == thresh).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean and sample standard deviation over seeds per (cell, subset, thresh).
    pub fn summary_csv(&self) -> String {
        let mut groups: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
        let cells = self.cells();
        for r in &self.rows {
            let ci = cells.iter().position(|c| *c == r.cell).expect("known cell");
            groups.entry((ci, r.subset.clone(), r.thresh.to_string())).or_default().push(r.accuracy);
        }
        let mut out = format!("{SUMMARY_HEADER}\n");
        for ((ci, subset, thresh), v) in groups {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            writeln!(out, "{},{subset},{thresh},{mean},{std},{}", cells[ci], v.len()).expect("write to string");
        }
        out
    }
}

/// Worker count from `SPEECHGROUND_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("SPEECHGROUND_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn ablate(base: &TrainConfig, train_set: &Dataset, val: &Dataset, sweep: &Sweep, seeds: &[u64]) -> Result<AblationTable> {
    ablate_with_threads(base, train_set, val, sweep, seeds, thread_count())
}

/// Each (cell, seed) run is single-threaded; runs are spread over `threads`
/// workers and reassembled in cell-major, seed-minor order.
pub fn ablate_with_threads(
    base: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    sweep: &Sweep,
    seeds: &[u64],
    threads: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = sweep.train_cells(base);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let run = |&(c, seed): &(usize, u64)| -> Result<Vec<AblationRow>> {
        let (name, cfg) = &cells[c];
        let cfg = TrainConfig { seed, val_every: 0, ..cfg.clone() };
        let (model, _) = train(&cfg, train_set, None)?;
        let betas: Vec<(String, f64)> = match sweep {
            Sweep::Beta => BETA_GRID.iter().map(|&b| (format!("beta={b}"), b)).collect(),
            _ => vec![(name.clone(), cfg.effective_beta())],
        };
        let mut rows = Vec::new();
        for (cell, beta) in betas {
            for m in evaluate(&model, &cfg, val, beta)?.breakdown.rows {
                rows.push(AblationRow { cell: cell.clone(), seed, subset: m.subset, thresh: m.thresh, accuracy: m.accuracy });
            }
        }
        Ok(rows)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<AblationRow>>> = pool.install(|| jobs.par_iter().map(run).collect());
    let mut per_job = Vec::with_capacity(results.len());
    for r in results {
        per_job.push(r?);
    }
    // beta cells come out seed-major; regroup so every table is cell-major
    let mut rows: Vec<AblationRow> = per_job.into_iter().flatten().collect();
    let order: Vec<String> = {
        let mut o: Vec<String> = Vec::new();
        for r in &rows {
            if !o.contains(&r.cell) {
                o.push(r.cell.clone());
            }
        }
        o
    };
    rows.sort_by_key(|r| order.iter().position(|c| *c == r.cell).expect("known cell"));
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_layouts() {
        let base = TrainConfig::default();
        let m = Sweep::Modules.train_cells(&base);
        assert_eq!(m.len(), 4);
        assert!(!m[0].1.sll && !m[0].1.cbm && !m[0].1.ccm);
        assert!(m[3].1.sll && m[3].1.cbm && m[3].1.ccm);
        let a = Sweep::Alignment.train_cells(&base);
        assert_eq!(a[1].1.align, Alignment { text_object: true, speech_object: false, text_speech: false });
        assert_eq!(Sweep::Rate(vec![0.5, 2.0]).train_cells(&base)[1].0, "rate=2");
        assert_eq!(BETA_GRID.len(), 5);
        assert!(Sweep::parse("rate", &[]).is_err());
        assert!(Sweep::parse("bogus", &[]).is_err());
    }

    #[test]
    fn csv_and_summary() {
        let rows = vec![
            AblationRow { cell: "beta=0".into(), seed: 0, subset: "overall".into(), thresh: 0.25, accuracy: 40.0 },
            AblationRow { cell: "beta=0".into(), seed: 1, subset: "overall".into(), thresh: 0.25, accuracy: 50.0 },
        ];
        let t = AblationTable { rows };
        assert_eq!(AblationTable::parse_csv(&t.to_csv()).unwrap(), t);
        assert_eq!(t.mean("beta=0", "overall", 0.25), Some(45.0));
        let s = t.summary_csv();
        assert!(s.lines().nth(1).unwrap().starts_with("beta=0,overall,0.25,45,7.07"), "{s}");
        assert!(AblationTable::parse_csv("cell,seed,subset,thresh,accuracy\n").is_err());
    }
}

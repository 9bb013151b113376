use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use speechground::config::KEYS;
use speechground::evalmetrics::METRICS_HEADER;
use speechground::scenegen::{generate_dataset, load_dataset, save_dataset, Dataset, GenConfig, SubsetTag};
use speechground::trainer::{self, AblationTable, Model, RunLog, Sweep};
use speechground::TrainConfig;

use crate::plot::{bar_chart, line_chart, Series};
use crate::{Common, VERSION};

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const MANIFEST: &str = "manifest.json";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &Common) -> Result<()> {
    let out = &common.out;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !common.force {
            bail!("output directory {} is not empty (use --force to overwrite)", out.display());
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

/// Writes the manifest and the config snapshot before any computation.
fn start(common: &Common, command: &str, cfg: &TrainConfig, args: Value) -> Result<()> {
    prepare_out(common)?;
    let mut snapshot = Map::new();
    for (k, _) in KEYS {
        snapshot.insert(k.to_string(), Value::String(cfg.get(k).expect("listed key")));
    }
    let manifest = json!({
        "command": command,
        "config_path": common.config.as_ref().map(|p| p.display().to_string()),
        "config": snapshot,
        "out": common.out.display().to_string(),
        "version": VERSION,
        "args": args,
    });
    std::fs::write(common.out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(common.out.join(CONFIG_SNAPSHOT), cfg.to_text())?;
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Dataset> {
    let dir = data.join(split);
    load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen_data(common: &Common, scenes: Option<u64>, val_scenes: Option<u64>, per_scene: Option<u64>) -> Result<ExitCode> {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = scenes {
        cfg.scenes = n as usize;
    }
    if let Some(n) = val_scenes {
        cfg.val_scenes = n as usize;
    }
    if let Some(n) = per_scene {
        cfg.utterances_per_scene = n as usize;
    }
    if cfg.scenes == 0 || cfg.val_scenes == 0 || cfg.utterances_per_scene == 0 {
        bail!("scenes, val_scenes and utterances_per_scene must be >= 1");
    }
    start(common, "gen-data", &cfg, json!({}))?;
    let gen = GenConfig::default();
    for (split, n) in [("train", cfg.scenes), ("val", cfg.val_scenes)] {
        let ds = generate_dataset(cfg.seed, n, cfg.utterances_per_scene, &gen, split)?;
        save_dataset(&ds, &common.out.join(split))?;
        let unique = ds.utterances.iter().filter(|u| u.subset_tag == SubsetTag::Unique).count();
        let total = ds.utterances.len();
        println!(
            "{split}: {} scenes, {total} utterances, unique {unique} ({:.1}%), multiple {} ({:.1}%)",
            ds.scenes.len(),
            100.0 * unique as f64 / total as f64,
            total - unique,
            100.0 * (total - unique) as f64 / total as f64
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, data: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    start(common, "train", &cfg, json!({ "data": data.display().to_string() }))?;
    let train_set = load_split(data, "train")?;
    let val = if data.join("val").exists() { Some(load_split(data, "val")?) } else { None };
    let (model, mut log) = trainer::train(&cfg, &train_set, val.as_ref())?;
    trainer::save_run(&common.out, &model, &mut log)?;
    for e in &log.epochs {
        let acc = e.val.as_ref().map(|v| format!("  val acc@0.25 {:.2} acc@0.5 {:.2}", v.overall(0.25), v.overall(0.5)));
        println!(
            "epoch {:>3}  loss {:.4}  (contrastive {:.4}, reference {:.4}, cls {:.4}){}",
            e.epoch + 1,
            e.total,
            e.contrastive,
            e.reference,
            e.cls,
            acc.unwrap_or_default()
        );
    }
    if let Some(v) = log.epochs.last().and_then(|e| e.val.as_ref()) {
        std::fs::write(common.out.join("metrics.csv"), v.to_csv())?;
    }
    println!("wrote {}", common.out.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, data: &Path, checkpoint: &Path, beta: Option<f64>, split: &str) -> Result<ExitCode> {
    // the training snapshot next to the checkpoint fills in when no config is given
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_SNAPSHOT)).filter(|p| p.exists());
    let common = match (&common.config, sibling) {
        (None, Some(p)) => Common { config: Some(p), ..common.clone() },
        _ => common.clone(),
    };
    let cfg = resolve_config(&common)?;
    let beta = beta.unwrap_or(cfg.loss.beta);
    speechground::grounding::check_beta(beta)?;
    start(
        &common,
        "eval",
        &cfg,
        json!({ "data": data.display().to_string(), "checkpoint": checkpoint.display().to_string(), "beta": beta, "split": split }),
    )?;
    let ds = load_split(data, split)?;
    let model = Model::load(&cfg, checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ev = trainer::evaluate(&model, &cfg, &ds, beta)?;
    std::fs::write(common.out.join("metrics.csv"), ev.breakdown.to_csv())?;
    let summary = json!({ "beta": beta, "utterances": ds.utterances.len(), "match_rate": ev.match_rate() });
    std::fs::write(common.out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print!("{}", ev.breakdown.to_csv());
    println!("match rate {:.2}%", ev.match_rate());
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(common: &Common, data: &Path, sweep: &str, values: &[f64], seeds: &[u64]) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let sweep_spec = Sweep::parse(sweep, values)?;
    let seeds: Vec<u64> = if seeds.is_empty() { (0..3).map(|k| cfg.seed + k).collect() } else { seeds.to_vec() };
    start(common, "ablate", &cfg, json!({ "data": data.display().to_string(), "sweep": sweep, "values": values, "seeds": seeds }))?;
    let train_set = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let threads = trainer::thread_count();
    eprintln!("ablating `{sweep}` over {} seeds on {threads} threads", seeds.len());
    let table = trainer::ablate_with_threads(&cfg, &train_set, &val, &sweep_spec, &seeds, threads)?;
    std::fs::write(common.out.join("ablation.csv"), table.to_csv())?;
    std::fs::write(common.out.join("summary.csv"), table.summary_csv())?;
    print!("{}", table.summary_csv());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common, data: Option<&Path>, eps: f64) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    start(common, "gradcheck", &cfg, json!({ "data": data.map(|d| d.display().to_string()), "eps": eps }))?;
    let ds = match data {
        Some(d) => load_split(d, "train")?,
        None => generate_dataset(cfg.seed, 8, 2, &GenConfig { max_objects: 8, ..GenConfig::default() }, "gradcheck")?,
    };
    let report = trainer::grad_check(&cfg, &ds, eps)?;
    let mut csv = String::from("group,entries,rel_err\n");
    for g in &report.groups {
        csv.push_str(&format!("{},{},{:e}\n", g.name, g.entries, g.rel_err));
    }
    std::fs::write(common.out.join("gradcheck.csv"), csv)?;
    println!("max relative error {:.3e} in `{}` over {} tensors", report.max_rel_err, report.worst, report.groups.len());
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_err);
        Ok(ExitCode::FAILURE)
    }
}

enum PlotInput {
    Ablation(AblationTable),
    RunLog(RunLog),
}

fn read_plot_input(path: &Path) -> Result<PlotInput> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() {
        bail!("{} is empty", path.display());
    }
    let first = text.lines().next().unwrap_or_default().trim();
    if first.starts_with('{') {
        let log = RunLog::parse_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
        if log.epochs.is_empty() {
            bail!("{} has no epoch records", path.display());
        }
        return Ok(PlotInput::RunLog(log));
    }
    if first == METRICS_HEADER {
        bail!("{}: metrics tables are not plotted; pass an ablation table", path.display());
    }
    Ok(PlotInput::Ablation(AblationTable::parse_csv(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

/// Chart name, SVG and pass-through data for one input.
fn render(path: &Path, input: &PlotInput) -> Result<(String, String, String)> {
    match input {
        PlotInput::RunLog(log) => {
            let cols: [(&str, fn(&trainer::EpochRecord) -> f64); 4] =
                [("total", |e| e.total), ("contrastive", |e| e.contrastive), ("reference", |e| e.reference), ("cls", |e| e.cls)];
            let series: Vec<Series> = cols
                .iter()
                .map(|(n, f)| Series { name: n.to_string(), points: log.epochs.iter().map(|e| ((e.epoch + 1) as f64, f(e))).collect() })
                .collect();
            let mut data = String::from("epoch,total,contrastive,reference,cls\n");
            for e in &log.epochs {
                data.push_str(&format!("{},{},{},{},{}\n", e.epoch + 1, e.total, e.contrastive, e.reference, e.cls));
            }
            Ok((format!("{}_loss", stem(path)), line_chart("Training loss", "epoch", "loss", &series), data))
        }
        PlotInput::Ablation(table) => {
            let cells = table.cells();
            let thresholds: Vec<f64> = {
                let mut t: Vec<f64> = table.rows.iter().map(|r| r.thresh).collect();
                t.sort_by(f64::total_cmp);
                t.dedup();
                t
            };
            let data = table.to_csv();
            let is_beta = cells.iter().all(|c| c.starts_with("beta="));
            if is_beta {
                let mut series = Vec::new();
                for &t in &thresholds {
                    let mut points = Vec::new();
                    for c in &cells {
                        let b: f64 = c["beta=".len()..].parse().with_context(|| format!("bad beta cell `{c}`"))?;
                        if let Some(m) = table.mean(c, "overall", t) {
                            points.push((b, m));
                        }
                    }
                    series.push(Series { name: format!("Acc@{t}"), points });
                }
                return Ok(("beta_sweep".into(), line_chart("Fusion weight sweep", "beta", "overall accuracy (%)", &series), data));
            }
            let series: Vec<Series> = thresholds
                .iter()
                .map(|&t| Series {
                    name: format!("Acc@{t}"),
                    points: cells.iter().enumerate().filter_map(|(i, c)| table.mean(c, "overall", t).map(|m| (i as f64, m))).collect(),
                })
                .collect();
            let name = if cells.iter().all(|c| c.starts_with("modules=")) { "modules".to_string() } else { stem(path) };
            let labels: Vec<String> = cells.iter().map(|c| c.split_once('=').map_or(c.clone(), |(_, v)| v.to_string())).collect();
            Ok((name, bar_chart("Ablation (mean over seeds)", "overall accuracy (%)", &labels, &series), data))
        }
    }
}

pub fn plot(common: &Common, inputs: &[PathBuf]) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    // inputs are validated before anything is written
    let parsed: Vec<(PathBuf, PlotInput)> =
        inputs.iter().map(|p| read_plot_input(p).map(|i| (p.clone(), i))).collect::<Result<_>>()?;
    let rendered: Vec<(String, String, String)> = parsed.iter().map(|(p, i)| render(p, i)).collect::<Result<_>>()?;
    let args: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    start(common, "plot", &cfg, json!({ "inputs": args }))?;
    for (name, svg, data) in rendered {
        std::fs::write(common.out.join(format!("{name}.svg")), svg)?;
        std::fs::write(common.out.join(format!("{name}.csv")), data)?;
        println!("wrote {name}.svg");
    }
    Ok(ExitCode::SUCCESS)
}

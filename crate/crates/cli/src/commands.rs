use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dbraf::data::{
    load_csv, make_windows, split_train_valid, synth_generate, write_labels, write_series, InjectedAnomaly, NormStats,
    RawSeries, SynthSpec, Window, WindowSet,
};
use dbraf::evalkit::{config_hash, evaluate_scores, score_windows, write_scores, EvalReport, ScoreSeries};
use dbraf::model::DbrAfModel;
use dbraf::numkit::Tensor;
use dbraf::train::{fit_with, load_checkpoint_with, save_checkpoint, Checkpoint, EpochRecord};

use crate::config::{DataConfig, RunConfig};
use crate::plot::{self, Line, Panel};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Raw train and labelled test series, from CSV files or the generator.
pub fn load_data(cfg: &DataConfig) -> Result<(RawSeries, RawSeries)> {
    if cfg.uses_files() {
        let (Some(tr), Some(te), Some(lb)) = (&cfg.train_path, &cfg.test_path, &cfg.label_path) else {
            bail!("data.train_path, data.test_path and data.label_path must be given together");
        };
        Ok(load_csv(tr, te, lb)?)
    } else {
        let d = synth_generate(&cfg.synth)?;
        Ok((d.train, d.test))
    }
}

/// Normalised training windows (split 80/20) and non-overlapping test
/// windows.
pub struct Prepared {
    pub windows: WindowSet,
    pub test: Vec<Window>,
    pub test_series: RawSeries,
    pub norm: NormStats,
}

pub fn prepare(cfg: &RunConfig, norm: Option<NormStats>) -> Result<Prepared> {
    let (train, test) = load_data(&cfg.data)?;
    let norm = match norm {
        Some(n) => n,
        None => NormStats::fit(&train, cfg.data.standardize)?,
    };
    let (train, test) = (norm.apply(&train)?, norm.apply(&test)?);
    let t = cfg.train.model.window;
    let stride = cfg.data.stride.unwrap_or(t);
    let windows = split_train_valid(make_windows(&train, t, stride)?, Some(norm.clone()))?;
    // every scored test step appears exactly once
    let test_windows = make_windows(&test, t, t)?;
    Ok(Prepared {
        windows,
        test: test_windows,
        test_series: test,
        norm,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: SynthSpec,
    pub seed: u64,
    pub anomalies: Vec<InjectedAnomaly>,
    pub labelled_fraction: f64,
    pub peak_timesteps: usize,
}

/// Writes `train.csv`, `test.csv`, `labels.csv` and `provenance.json`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Provenance> {
    let spec = &cfg.data.synth;
    if let Err(e) = spec.validate() {
        bail!("invalid synthetic spec: {e}");
    }
    let d = synth_generate(spec)?;
    create_dir(out)?;
    write_series(out.join("train.csv"), &d.train)?;
    write_series(out.join("test.csv"), &d.test)?;
    let labels = d.test.labels.clone().unwrap_or_default();
    write_labels(out.join("labels.csv"), &labels)?;
    let prov = Provenance {
        spec: spec.clone(),
        seed: spec.seed,
        anomalies: d.anomalies,
        labelled_fraction: labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len().max(1) as f64,
        peak_timesteps: d.peak_mask.iter().filter(|&&p| p).count(),
    };
    write_json(&out.join("provenance.json"), &prov)?;
    Ok(prov)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
    pub seconds: f64,
}

/// Trains on the configured data and writes the checkpoint, the per-epoch
/// history and the resolved configuration.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let prep = prepare(cfg, None)?;
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let start = std::time::Instant::now();
    let trained = fit_with(&prep.windows, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:>12.5}  rec {:>12.5}  nll {:>10.5}  valid {:>12.5}",
            r.epoch, r.loss, r.rec, r.nll, r.valid_rec
        );
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let mut hist = Vec::new();
    for r in &trained.history {
        hist.extend(serde_json::to_vec(r)?);
        hist.push(b'\n');
    }
    let hist_path = out.join(HISTORY_FILE);
    fs::write(&hist_path, hist).with_context(|| format!("writing {}", hist_path.display()))?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            config: cfg.train.clone(),
            model: trained.model,
            epoch: trained.best_epoch,
            best_valid: trained.best_valid,
            rng: trained.rng,
            norm: Some(prep.norm),
        },
    )?;
    Ok(TrainSummary {
        checkpoint,
        history: trained.history,
        best_epoch: trained.best_epoch,
        best_valid: trained.best_valid,
        seconds,
    })
}

pub struct EvalSummary {
    pub report: EvalReport,
    pub series: ScoreSeries,
    pub plots: Vec<PathBuf>,
}

/// Percentage of labelled test steps, the default threshold ratio.
pub fn label_rate(labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        bail!("eval.ratio must be set: the test labels do not contain both classes");
    }
    Ok(100.0 * pos as f64 / labels.len() as f64)
}

fn evaluate_model(
    cfg: &RunConfig,
    model: &DbrAfModel,
    prep: &Prepared,
    out: &Path,
) -> Result<(EvalReport, ScoreSeries, Vec<Tensor>, Vec<u8>, Vec<u8>)> {
    let (series, recons) = score_windows(model, &prep.test, cfg.eval.score)?;
    let ratio = match cfg.eval.ratio {
        Some(r) => r,
        None => label_rate(&series.labels)?,
    };
    let (report, raw, adj) = evaluate_scores(&series, ratio, config_hash(cfg)?, cfg.train.seed)?;
    create_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_scores(out.join(SCORES_FILE), &series, &raw, &adj)?;
    Ok((report, series, recons, raw, adj))
}

/// Scores the test series with a saved model and writes the report, the
/// per-step scores and one plot per channel plus a score plot.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let ck = load_checkpoint_with(checkpoint, &cfg.train)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let prep = prepare(cfg, ck.norm.clone())?;
    if prep.test_series.channels() != ck.model.channels {
        bail!(
            "checkpoint expects {} channels, test data has {}",
            ck.model.channels,
            prep.test_series.channels()
        );
    }
    let (report, series, recons, _, _) = evaluate_model(cfg, &ck.model, &prep, out)?;
    let plots = if cfg.eval.plots {
        write_plots(&out.join("plots"), &prep, &series, &recons, report.threshold)?
    } else {
        Vec::new()
    };
    Ok(EvalSummary { report, series, plots })
}

fn write_plots(
    dir: &Path,
    prep: &Prepared,
    series: &ScoreSeries,
    recons: &[Tensor],
    threshold: f64,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let n = series.len();
    let names = &prep.test_series.channel_names;
    let mut paths = Vec::with_capacity(names.len() + 1);
    for (c, name) in names.iter().enumerate() {
        let signal: Vec<f64> = (0..n).map(|t| prep.test_series.values.row(t)[c]).collect();
        let recon: Vec<f64> = recons.iter().flat_map(|r| (0..r.rows()).map(move |t| r.row(t)[c])).collect();
        let svg = plot::render(
            &format!("channel {name}"),
            &[
                Panel {
                    title: "signal",
                    lines: vec![Line { label: "signal", color: "#1f77b4", values: &signal }],
                    hline: None,
                },
                Panel {
                    title: "reconstruction",
                    lines: vec![Line { label: "reconstruction", color: "#ff7f0e", values: &recon }],
                    hline: None,
                },
                Panel {
                    title: "anomaly score",
                    lines: vec![Line { label: "score", color: "#333333", values: &series.scores }],
                    hline: Some(threshold),
                },
            ],
            &series.labels,
        );
        let path = dir.join(format!("channel_{c:02}.svg"));
        plot::write(&path, &svg)?;
        paths.push(path);
    }
    let svg = plot::render(
        "anomaly score",
        &[Panel {
            title: "score and threshold",
            lines: vec![Line { label: "score", color: "#333333", values: &series.scores }],
            hline: Some(threshold),
        }],
        &series.labels,
    );
    let path = dir.join("score.svg");
    plot::write(&path, &svg)?;
    paths.push(path);
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Vec<String>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    /// After point adjustment.
    pub f1: f64,
    pub f1_raw: f64,
    pub false_positives: usize,
    pub best_epoch: usize,
}

/// Trains and evaluates the full model and every configured flag row with
/// the same seed and data.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let prep = prepare(cfg, None)?;
    let mut rows_cfg: Vec<Vec<String>> = vec![Vec::new()];
    rows_cfg.extend(cfg.ablate.rows.iter().filter(|r| !r.is_empty()).cloned());
    let mut rows = Vec::with_capacity(rows_cfg.len());
    for flags in rows_cfg {
        let name = if flags.is_empty() { "full".to_string() } else { flags.join("+") };
        let mut run = cfg.clone();
        for f in &flags {
            run.train.ablation.set(f)?;
        }
        run.train.validate().with_context(|| format!("ablation row {name}"))?;
        eprintln!("ablation row {name}");
        let trained = fit_with(&prep.windows, &run.train, |_| {})?;
        let (report, ..) = evaluate_model(&run, &trained.model, &prep, &out.join("rows").join(&name))?;
        rows.push(AblationRow {
            name,
            flags,
            auc_roc: report.auc_roc,
            auc_pr: report.auc_pr,
            f1: report.adjusted.f1,
            f1_raw: report.raw.f1,
            false_positives: report.raw.confusion.fp,
            best_epoch: trained.best_epoch,
        });
    }
    write_json(&out.join("ablation.json"), &rows)?;
    let table = format_table(&rows);
    let path = out.join("ablation.txt");
    let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(table.as_bytes())?;
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                fmt(r.auc_roc),
                fmt(r.auc_pr),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.f1_raw),
                r.false_positives.to_string(),
            ]
        })
        .collect();
    let head = ["row", "auc_roc", "auc_pr", "f1_pa", "f1_raw", "fp"].map(String::from);
    let mut widths = head.clone().map(|h| h.len());
    for r in &body {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String; 6]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ") + "\n"
    };
    let mut s = line(&head);
    for r in &body {
        s.push_str(&line(r));
    }
    s
}

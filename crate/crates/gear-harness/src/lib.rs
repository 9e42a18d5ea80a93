//! Experiment harness: runs configured topologies, writes one metrics
//! CSV per worker plus a merged summary, and offers run comparison and a
//! TTL sweep. The CSV files are the output boundary — plotting happens
//! elsewhere.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gear_core::wire;
use gear_train::engine::{self, RunOutput, RunParams};
use gear_train::metrics::{read_csv_file, write_csv_file, MetricsRow};
use gear_train::TrainError;

use config::{ClockCfg, Config, ModeCfg, TransportCfg};

/// Environment variable that overrides the config's `output_dir`.
pub const OUT_DIR_ENV: &str = "GEAR_OUT_DIR";

/// Window of the moving average used for loss thresholds; per-step loss
/// on small batches is too jittery to compare raw.
pub const SMOOTH_WINDOW: usize = 20;

/// Trailing moving average with a growing head window (element `i`
/// averages the last `min(window, i+1)` values), accumulated in f64.
pub fn moving_average(xs: &[f32], window: usize) -> Vec<f32> {
    assert!(window >= 1, "window must be at least 1");
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0f64;
    for i in 0..xs.len() {
        sum += xs[i] as f64;
        if i >= window {
            sum -= xs[i - window] as f64;
        }
        out.push((sum / (i.min(window - 1) + 1) as f64) as f32);
    }
    out
}

/// First 1-based step whose smoothed loss is at or below `threshold`.
pub fn steps_to_threshold(losses: &[f32], threshold: f32) -> Option<u64> {
    moving_average(losses, SMOOTH_WINDOW).iter().position(|&v| v <= threshold).map(|i| i as u64 + 1)
}

/// Per-step mean over every loss-bearing row (fastgears, or the baseline
/// worker), indexed by step. Steps must form a contiguous 1..=n range.
pub fn loss_series(rows: &[MetricsRow]) -> Result<Vec<f32>> {
    series_of(rows, |r| r.loss)
}

pub fn accuracy_series(rows: &[MetricsRow]) -> Result<Vec<f32>> {
    series_of(rows, |r| r.accuracy)
}

fn series_of(rows: &[MetricsRow], field: impl Fn(&MetricsRow) -> Option<f32>) -> Result<Vec<f32>> {
    let mut by_step: BTreeMap<u64, (f64, u32)> = BTreeMap::new();
    for row in rows {
        if let Some(v) = field(row) {
            let slot = by_step.entry(row.step).or_insert((0.0, 0));
            slot.0 += v as f64;
            slot.1 += 1;
        }
    }
    if by_step.is_empty() {
        bail!("no loss-bearing rows in the metrics set");
    }
    let n = *by_step.keys().last().unwrap();
    if by_step.len() as u64 != n || *by_step.keys().next().unwrap() != 1 {
        bail!("metrics steps are not contiguous from 1 (got {} steps up to {n})", by_step.len());
    }
    Ok(by_step.values().map(|&(sum, count)| (sum / count as f64) as f32).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TotalsSummary {
    pub steps: u64,
    pub infer_requests: u64,
    pub dense_forward_count: u64,
    pub dense_update_count: u64,
    pub grad_pushes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub skips: u64,
    pub dropped_grad_batches: u64,
}

/// The merged run summary written next to the per-worker CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub mode: String,
    pub transport: String,
    pub clock: String,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: u64,
    pub ttl: u64,
    pub m: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Last clock value seen in any row: ticks (logical) or ms (wall).
    pub elapsed: u64,
    /// Per-worker CSV files, relative to this summary's directory.
    pub workers: Vec<String>,
    pub totals: TotalsSummary,
}

impl Summary {
    fn from_run(
        cfg: &Config,
        params: &RunParams,
        output: &RunOutput,
        worker_files: &[String],
    ) -> Result<Self> {
        let losses = loss_series(&output.rows)?;
        let accuracies = accuracy_series(&output.rows)?;
        let t = &output.totals;
        Ok(Summary {
            run_id: params.run_id.clone(),
            mode: match cfg.mode {
                ModeCfg::Gear => "gear",
                ModeCfg::Nogear => "nogear",
            }
            .into(),
            transport: match cfg.transport {
                TransportCfg::Inproc => "inproc",
                TransportCfg::Socket => "socket",
            }
            .into(),
            clock: match cfg.clock {
                ClockCfg::Logical => "logical",
                ClockCfg::Wall => "wall",
            }
            .into(),
            seed: cfg.seed,
            steps: cfg.steps,
            batch_size: cfg.batch_size as u64,
            ttl: cfg.cache.ttl,
            m: cfg.cache.m as u64,
            final_loss: *losses.last().unwrap() as f64,
            final_accuracy: *accuracies.last().unwrap() as f64,
            elapsed: output.rows.iter().map(|r| r.time).max().unwrap_or(0),
            workers: worker_files.to_vec(),
            totals: TotalsSummary {
                steps: t.steps,
                infer_requests: t.infer_requests,
                dense_forward_count: t.dense_forward_count,
                dense_update_count: t.dense_update_count,
                grad_pushes: t.grad_pushes,
                cache_hits: t.cache_hits,
                cache_misses: t.cache_misses,
                skips: t.skips,
                dropped_grad_batches: t.dropped_grad_batches,
            },
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {} ({} / {} / {} clock)", self.run_id, self.mode, self.transport, self.clock);
        let _ = writeln!(
            s,
            "  {} steps x batch {} | ttl {} | m {} | seed {}",
            self.steps, self.batch_size, self.ttl, self.m, self.seed
        );
        let _ = writeln!(
            s,
            "  final loss {:.6} | final accuracy {:.4} | elapsed {}",
            self.final_loss, self.final_accuracy, self.elapsed
        );
        let t = &self.totals;
        let _ = writeln!(
            s,
            "  dense forwards {} | dense updates {} | cache {}/{} hit/miss | skips {} | dropped {}",
            t.dense_forward_count, t.dense_update_count, t.cache_hits, t.cache_misses, t.skips,
            t.dropped_grad_batches
        );
        s
    }
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary_path: PathBuf,
    pub csv_paths: Vec<PathBuf>,
    pub summary: Summary,
}

/// The config's output directory, unless [`OUT_DIR_ENV`] overrides it.
pub fn resolve_output_dir(cfg: &Config) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone())
}

/// Groups rows per worker (first-appearance order) and writes one CSV
/// each. Returns the written file names.
fn write_worker_csvs(out_dir: &Path, rows: &[MetricsRow]) -> Result<Vec<String>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_worker: BTreeMap<&str, Vec<MetricsRow>> = BTreeMap::new();
    for row in rows {
        if !by_worker.contains_key(row.worker.as_str()) {
            order.push(&row.worker);
        }
        by_worker.entry(&row.worker).or_default().push(row.clone());
    }
    let mut files = Vec::with_capacity(order.len());
    for worker in order {
        let file = format!("{worker}.csv");
        write_csv_file(&out_dir.join(&file), &by_worker[worker])
            .with_context(|| format!("writing {file}"))?;
        files.push(file);
    }
    Ok(files)
}

/// Runs the experiment into an explicit directory (no env override).
pub fn run_experiment_in(cfg: &Config, out_dir: &Path) -> Result<RunArtifacts> {
    let params = cfg.to_run_params();
    let dataset = cfg.build_dataset()?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;

    let output = match engine::run(&params, &dataset) {
        Ok(output) => output,
        Err(TrainError::Aborted { worker, reason, rows }) => {
            let files = write_worker_csvs(out_dir, &rows)?;
            bail!(
                "worker {worker} failed: {reason} — partial metrics for {} workers flushed to {}",
                files.len(),
                out_dir.display()
            );
        }
        Err(e) => return Err(e).context("run failed before any metrics were produced"),
    };

    let worker_files = write_worker_csvs(out_dir, &output.rows)?;
    fs::write(out_dir.join("params_final.bin"), wire::encode_snapshot(&output.final_params))
        .context("writing params_final.bin")?;
    let summary = Summary::from_run(cfg, &params, &output, &worker_files)?;
    let summary_path = out_dir.join("summary.toml");
    fs::write(&summary_path, toml::to_string(&summary)?).context("writing summary.toml")?;

    let csv_paths = worker_files.iter().map(|f| out_dir.join(f)).collect();
    Ok(RunArtifacts { out_dir: out_dir.to_path_buf(), summary_path, csv_paths, summary })
}

/// Runs the experiment into the configured (or overridden) directory.
pub fn run_experiment(cfg: &Config) -> Result<RunArtifacts> {
    let out_dir = resolve_output_dir(cfg);
    run_experiment_in(cfg, &out_dir)
}

/// One completed run reloaded from disk.
pub struct RunData {
    pub summary: Summary,
    pub losses: Vec<f32>,
    pub accuracies: Vec<f32>,
}

pub fn load_run(summary_path: &Path) -> Result<RunData> {
    let text = fs::read_to_string(summary_path)
        .with_context(|| format!("reading {}", summary_path.display()))?;
    let summary: Summary =
        toml::from_str(&text).with_context(|| format!("parsing {}", summary_path.display()))?;
    let dir = summary_path.parent().unwrap_or_else(|| Path::new("."));
    let mut rows = Vec::new();
    for file in &summary.workers {
        rows.extend(
            read_csv_file(&dir.join(file)).with_context(|| format!("reading {file}"))?,
        );
    }
    let losses = loss_series(&rows)?;
    let accuracies = accuracy_series(&rows)?;
    Ok(RunData { summary, losses, accuracies })
}

/// Step-aligned comparison of two completed runs.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub steps: usize,
    /// Per-step `loss_a - loss_b`.
    pub loss_delta: Vec<f32>,
    pub max_abs_loss_delta: f32,
    pub mean_abs_loss_delta: f64,
    pub max_abs_accuracy_delta: f32,
    /// Smoothed-loss level both runs are measured against: the larger of
    /// the two final smoothed losses, so both runs reach it.
    pub threshold: f32,
    pub steps_to_threshold_a: Option<u64>,
    pub steps_to_threshold_b: Option<u64>,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let fmt_steps =
            |s: Option<u64>| s.map(|v| v.to_string()).unwrap_or_else(|| "never".into());
        let mut s = String::new();
        let _ = writeln!(s, "compare {} vs {} over {} steps", self.run_a, self.run_b, self.steps);
        let _ = writeln!(
            s,
            "  loss delta: max |d| {:.3e}, mean |d| {:.3e}",
            self.max_abs_loss_delta, self.mean_abs_loss_delta
        );
        let _ = writeln!(s, "  accuracy delta: max |d| {:.3e}", self.max_abs_accuracy_delta);
        let _ = writeln!(s, "  smoothed-loss threshold {:.6}", self.threshold);
        let _ = writeln!(
            s,
            "  steps to threshold: {} = {}, {} = {}",
            self.run_a,
            fmt_steps(self.steps_to_threshold_a),
            self.run_b,
            fmt_steps(self.steps_to_threshold_b)
        );
        s
    }
}

pub fn compare(summary_a: &Path, summary_b: &Path) -> Result<CompareReport> {
    let a = load_run(summary_a)?;
    let b = load_run(summary_b)?;
    if a.losses.len() != b.losses.len() {
        bail!(
            "alignment error: {} has {} steps but {} has {}",
            a.summary.run_id,
            a.losses.len(),
            b.summary.run_id,
            b.losses.len()
        );
    }
    let loss_delta: Vec<f32> = a.losses.iter().zip(&b.losses).map(|(x, y)| x - y).collect();
    let max_abs_loss_delta = loss_delta.iter().fold(0f32, |m, d| m.max(d.abs()));
    let mean_abs_loss_delta =
        loss_delta.iter().map(|d| d.abs() as f64).sum::<f64>() / loss_delta.len() as f64;
    let max_abs_accuracy_delta = a
        .accuracies
        .iter()
        .zip(&b.accuracies)
        .fold(0f32, |m, (x, y)| m.max((x - y).abs()));

    let smooth_a = moving_average(&a.losses, SMOOTH_WINDOW);
    let smooth_b = moving_average(&b.losses, SMOOTH_WINDOW);
    let threshold = smooth_a.last().unwrap().max(*smooth_b.last().unwrap());
    Ok(CompareReport {
        run_a: a.summary.run_id,
        run_b: b.summary.run_id,
        steps: loss_delta.len(),
        max_abs_loss_delta,
        mean_abs_loss_delta,
        max_abs_accuracy_delta,
        threshold,
        steps_to_threshold_a: steps_to_threshold(&a.losses, threshold),
        steps_to_threshold_b: steps_to_threshold(&b.losses, threshold),
        loss_delta,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub ttl: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_to_threshold: Option<u64>,
    pub dense_forward_count: u64,
}

/// Result of a TTL sweep: one gear run per TTL against a fixed-seed
/// baseline threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    /// The baseline's final smoothed loss, the level every row races to.
    pub threshold: f64,
    pub baseline_steps: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ttl sweep vs baseline threshold {:.6} ({} baseline steps)",
            self.threshold, self.baseline_steps
        );
        let _ = writeln!(s, "  {:>6} {:>20} {:>22}", "ttl", "steps_to_threshold", "dense_forward_count");
        for row in &self.rows {
            let steps =
                row.steps_to_threshold.map(|v| v.to_string()).unwrap_or_else(|| "never".into());
            let _ = writeln!(s, "  {:>6} {:>20} {:>22}", row.ttl, steps, row.dense_forward_count);
        }
        s
    }
}

/// Runs the baseline plus one gear run per TTL (same seed throughout)
/// under the sweep root directory, and writes `sweep.toml` there.
pub fn ttl_sweep(cfg: &Config, ttls: &[u64]) -> Result<(SweepTable, PathBuf)> {
    if ttls.len() < 2 {
        bail!("ttl-sweep needs at least 2 ttl values, got {}", ttls.len());
    }
    if cfg.mode != ModeCfg::Gear {
        bail!("ttl-sweep requires mode = \"gear\" as the base config");
    }
    let root = resolve_output_dir(cfg);

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.mode = ModeCfg::Nogear;
    if cfg.run_id.is_some() {
        baseline_cfg.run_id = Some(format!("{}-baseline", cfg.run_id()));
    }
    let baseline = run_experiment_in(&baseline_cfg, &root.join("baseline-nogear"))?;
    let baseline_data = load_run(&baseline.summary_path)?;
    let threshold = *moving_average(&baseline_data.losses, SMOOTH_WINDOW).last().unwrap();

    let mut rows = Vec::with_capacity(ttls.len());
    for &ttl in ttls {
        let mut run_cfg = cfg.clone();
        run_cfg.cache.ttl = ttl;
        if cfg.run_id.is_some() {
            run_cfg.run_id = Some(format!("{}-ttl{}", cfg.run_id(), ttl));
        }
        let art = run_experiment_in(&run_cfg, &root.join(format!("ttl-{ttl}")))?;
        let data = load_run(&art.summary_path)?;
        rows.push(SweepRow {
            ttl,
            steps_to_threshold: steps_to_threshold(&data.losses, threshold),
            dense_forward_count: data.summary.totals.dense_forward_count,
        });
    }

    let table =
        SweepTable { threshold: threshold as f64, baseline_steps: baseline.summary.steps, rows };
    let table_path = root.join("sweep.toml");
    fs::write(&table_path, toml::to_string(&table)?).context("writing sweep.toml")?;
    Ok((table, table_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(worker: &str, step: u64, loss: Option<f32>) -> MetricsRow {
        MetricsRow {
            run_id: "r".into(),
            worker: worker.into(),
            step,
            time: step,
            loss,
            accuracy: loss.map(|l| 1.0 - l),
            dense_forward_count: 0,
            dense_update_count: 0,
            cache_hits: 0,
            cache_misses: 0,
            skips: 0,
            dropped_grad_batches: 0,
        }
    }

    #[test]
    fn moving_average_grows_its_window_then_slides() {
        let xs = [4.0f32, 8.0, 0.0, 8.0];
        let ma = moving_average(&xs, 2);
        assert_eq!(ma, vec![4.0, 6.0, 4.0, 4.0]);
        assert_eq!(moving_average(&xs, 1), xs.to_vec());
        // A window longer than the series is the running mean throughout.
        assert_eq!(moving_average(&xs, 10), vec![4.0, 6.0, 4.0, 5.0]);
        assert!(moving_average(&[], 3).is_empty());
    }

    #[test]
    fn steps_to_threshold_finds_the_first_smoothed_crossing() {
        // Constant series: the moving average equals the raw value.
        let flat = vec![1.0f32; 30];
        assert_eq!(steps_to_threshold(&flat, 1.0), Some(1));
        assert_eq!(steps_to_threshold(&flat, 0.5), None);

        let mut falling: Vec<f32> = (0..100).map(|i| 1.0 - i as f32 / 100.0).collect();
        let crossing = steps_to_threshold(&falling, 0.5).unwrap();
        // Smoothing trails the raw series, so the crossing comes later
        // than the raw step 51 but must still be found.
        assert!((51..70).contains(&(crossing as usize)), "crossing {crossing}");
        falling.truncate(10);
        assert_eq!(steps_to_threshold(&falling, 0.5), None);
    }

    #[test]
    fn loss_series_averages_workers_per_step() {
        let rows = vec![
            row("fastgear-0", 1, Some(1.0)),
            row("fastgear-1", 1, Some(3.0)),
            row("slowgear-0", 1, None),
            row("fastgear-0", 2, Some(0.5)),
            row("fastgear-1", 2, None), // all-skipped step on one worker
        ];
        assert_eq!(loss_series(&rows).unwrap(), vec![2.0, 0.5]);
    }

    #[test]
    fn loss_series_rejects_gaps_and_empty_input() {
        let rows = vec![row("w", 1, Some(1.0)), row("w", 3, Some(1.0))];
        let err = loss_series(&rows).unwrap_err().to_string();
        assert!(err.contains("not contiguous"), "{err}");
        assert!(loss_series(&[row("w", 1, None)]).is_err());
    }

    #[test]
    fn worker_csvs_keep_first_appearance_order() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row("fastgear-1", 1, Some(1.0)),
            row("fastgear-0", 1, Some(1.0)),
            row("fastgear-1", 2, Some(0.9)),
        ];
        let files = write_worker_csvs(dir.path(), &rows).unwrap();
        assert_eq!(files, vec!["fastgear-1.csv".to_string(), "fastgear-0.csv".to_string()]);
        let back = read_csv_file(&dir.path().join("fastgear-1.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].step, 2);
    }

    #[test]
    fn sweep_table_serializes_unreached_thresholds_by_omission() {
        let table = SweepTable {
            threshold: 0.25,
            baseline_steps: 100,
            rows: vec![
                SweepRow { ttl: 1, steps_to_threshold: Some(42), dense_forward_count: 9 },
                SweepRow { ttl: 9, steps_to_threshold: None, dense_forward_count: 3 },
            ],
        };
        let text = toml::to_string(&table).unwrap();
        let back: SweepTable = toml::from_str(&text).unwrap();
        assert_eq!(back.rows[0].steps_to_threshold, Some(42));
        assert_eq!(back.rows[1].steps_to_threshold, None);
        assert!(table.render().contains("never"));
    }
}

//! Sweep orchestration: deterministic per-cell seeding, prediction and
//! control metrics, confidence-interval aggregation, CSV and SVG emission.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::{run_control, ControlConfig, ControlMode, EpsilonSchedule};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::learners::{algorithm1_episode, LearnerState};
use crate::oracle::FeatureMatrix;

/// Which metric a sweep cell produces: per-episode value-prediction error or
/// per-episode return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Predict,
    Control,
}

impl Task {
    pub fn tag(&self) -> &'static str {
        match self {
            Task::Predict => "predict",
            Task::Control => "control",
        }
    }
}

/// Cartesian sweep over mixture weights, learning rates, and seeds on one
/// environment.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    /// Short name written to the CSV `env` column, e.g. `random-walk-19`.
    pub env_label: String,
    pub env: EnvSpec,
    pub gamma: f64,
    pub etas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Episodes per cell for prediction; total environment steps for control.
    pub episodes: usize,
}

impl SweepGrid {
    fn validate(&self) -> Result<()> {
        if self.etas.is_empty() || self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidSpec("sweep grid has an empty dimension".into()));
        }
        if self.episodes == 0 {
            return Err(Error::InvalidSpec("sweep needs a positive episode budget".into()));
        }
        if let Some(eta) = self.etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidSpec(format!("eta must lie in [0,1], got {eta}")));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite() || **a <= 0.0) {
            return Err(Error::InvalidSpec(format!("alpha must be positive, got {a}")));
        }
        if self.env_label.contains(',') || self.env_label.is_empty() {
            return Err(Error::InvalidSpec("env label must be non-empty and comma-free".into()));
        }
        Ok(())
    }
}

/// One executed sweep cell: its configuration, the per-episode metric
/// series, and whether it ended in numeric failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub task: Task,
    pub env: String,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub alpha_sf: f64,
    pub alpha_r: f64,
    pub seed: u64,
    pub metrics: Vec<f64>,
    pub failed: bool,
    /// Wall-clock time; informational only, never serialized.
    pub duration: Duration,
}

/// Root mean squared value error over non-terminal states, uniformly
/// weighted: `sqrt(mean_s (phi(s)^T theta - v(s))^2)`.
pub fn rmse(theta: &DVector<f64>, phi: &FeatureMatrix, true_values: &DVector<f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in 0..phi.n_states() {
        if !phi.nonterminal(s) {
            continue;
        }
        let err = phi.phi(s).dot(theta) - true_values[s];
        sum += err * err;
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    (sum / count as f64).sqrt()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream seed for one sweep cell. Hashing (seed, eta, alpha, task) keeps
/// every cell's stream fixed when the grid around it grows or shrinks.
pub fn cell_seed(global_seed: u64, eta: f64, alpha: f64, task: Task) -> u64 {
    let mut bytes = Vec::with_capacity(25);
    bytes.extend_from_slice(&global_seed.to_le_bytes());
    bytes.extend_from_slice(&eta.to_bits().to_le_bytes());
    bytes.extend_from_slice(&alpha.to_bits().to_le_bytes());
    bytes.extend_from_slice(task.tag().as_bytes());
    fnv1a64(&bytes)
}

/// Runs every (eta, alpha, seed) cell of the grid, in parallel, each with
/// its own deterministic rng. Cells that blow up numerically come back as
/// failed records; structural errors abort the sweep.
pub fn run_sweep(grid: &SweepGrid, task: Task) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    match (task, &grid.env) {
        (Task::Predict, EnvSpec::Mrp(_)) | (Task::Control, EnvSpec::Mdp(_)) => {}
        (Task::Predict, EnvSpec::Mdp(_)) => {
            return Err(Error::InvalidSpec(
                "prediction sweeps need a policy-free chain environment".into(),
            ));
        }
        (Task::Control, EnvSpec::Mrp(_)) => {
            return Err(Error::InvalidSpec("control sweeps need an action environment".into()));
        }
    }
    let mut cells = Vec::with_capacity(grid.etas.len() * grid.alphas.len() * grid.seeds.len());
    for &eta in &grid.etas {
        for &alpha in &grid.alphas {
            for &seed in &grid.seeds {
                cells.push((eta, alpha, seed));
            }
        }
    }
    cells.sort_by(|a, b| a.partial_cmp(b).expect("validated grid values are ordered"));
    cells
        .par_iter()
        .map(|&(eta, alpha, seed)| run_cell(grid, task, eta, alpha, seed))
        .collect()
}

fn run_cell(grid: &SweepGrid, task: Task, eta: f64, alpha: f64, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, eta, alpha, task));
    let outcome = match (task, &grid.env) {
        (Task::Predict, EnvSpec::Mrp(spec)) => {
            prediction_metrics(spec, grid.gamma, eta, [alpha, alpha, alpha], grid.episodes, &mut rng)
        }
        (Task::Control, EnvSpec::Mdp(spec)) => {
            let config = ControlConfig {
                eta,
                gamma: grid.gamma,
                alpha_q: alpha,
                alpha_xi: alpha,
                alpha_w: alpha,
                epsilon: EpsilonSchedule::new(1.0, 0.1, (grid.episodes / 5).max(1))?,
                total_steps: grid.episodes,
                max_episode_steps: 100,
                mode: ControlMode::Online,
            };
            run_control(spec, &config, &mut rng).map(|run| run.episode_returns)
        }
        _ => unreachable!("run_sweep validated the task/env pairing"),
    };
    let (metrics, failed) = match outcome {
        Ok(metrics) => (metrics, false),
        // A blown-up cell is a data point about the learning rate, not a
        // reason to abort the other cells.
        Err(Error::Overflow(_)) | Err(Error::Divergence { .. }) => (Vec::new(), true),
        Err(other) => return Err(other),
    };
    Ok(RunRecord {
        task,
        env: grid.env_label.clone(),
        eta,
        gamma: grid.gamma,
        alpha,
        alpha_sf: alpha,
        alpha_r: alpha,
        seed,
        metrics,
        failed,
        duration: started.elapsed(),
    })
}

/// Per-episode prediction error of the mixture learner against the exact
/// values. `alphas` holds the value, successor-feature, and reward rates.
pub fn prediction_metrics<R: rand::Rng + ?Sized>(
    spec: &crate::env::MrpSpec,
    gamma: f64,
    eta: f64,
    alphas: [f64; 3],
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let nonterminal: Vec<bool> =
        (0..spec.n_states).map(|s| !spec.terminal.contains(&s)).collect();
    let phi = FeatureMatrix::tabular(&nonterminal);
    let truth = spec.true_values(gamma)?;
    let mut state = LearnerState::new(phi.d(), eta, gamma, alphas[0], alphas[1], alphas[2])?;
    let mut metrics = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        algorithm1_episode(&mut state, spec, &phi, rng)?;
        let m = rmse(&state.theta, &phi, &truth);
        if !m.is_finite() {
            return Err(Error::Overflow("prediction error left the finite range".into()));
        }
        metrics.push(m);
    }
    Ok(metrics)
}

/// How a per-episode series collapses to one number per (config, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    MeanOverEpisodes,
    Final,
}

/// Across-seed summary for one (task, env, eta, alpha) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub task: Task,
    pub env: String,
    pub eta: f64,
    pub alpha: f64,
    pub metric_mean: f64,
    pub ci95_half: f64,
    pub n_seeds: usize,
    /// Half-width is 0 by fiat with one seed; flagged so callers can warn.
    pub single_seed: bool,
}

/// Aggregation result plus how many failed records were left out.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub rows: Vec<AggregateRow>,
    pub failed_excluded: usize,
}

/// Reduces each record to a scalar and summarizes across seeds as
/// mean +/- 1.96 sigma / sqrt(n). Failed records are excluded and counted;
/// processing order is fixed by sorting, so seed order cannot change the
/// output.
/// Group key for aggregation: (task tag, env label, eta bits, alpha bits).
type CellKey = (&'static str, String, u64, u64);

pub fn aggregate(records: &[RunRecord], reduce: Reduce) -> Result<Aggregation> {
    let mut failed_excluded = 0usize;
    let mut groups: BTreeMap<CellKey, Vec<(u64, f64)>> = BTreeMap::new();
    for record in records {
        if record.failed {
            failed_excluded += 1;
            continue;
        }
        if record.metrics.is_empty() {
            return Err(Error::Contract(format!(
                "record (eta={}, alpha={}, seed={}) has an empty metric series",
                record.eta, record.alpha, record.seed
            )));
        }
        let value = match reduce {
            Reduce::MeanOverEpisodes => {
                record.metrics.iter().sum::<f64>() / record.metrics.len() as f64
            }
            Reduce::Final => *record.metrics.last().expect("checked non-empty"),
        };
        // Non-negative floats sort correctly by their bit patterns.
        let key = (record.task.tag(), record.env.clone(), record.eta.to_bits(), record.alpha.to_bits());
        groups.entry(key).or_default().push((record.seed, value));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((task_tag, env, eta_bits, alpha_bits), mut values) in groups {
        values.sort_by_key(|(seed, _)| *seed);
        let n = values.len() as f64;
        let mean = values.iter().map(|(_, v)| v).sum::<f64>() / n;
        let variance = values.iter().map(|(_, v)| (v - mean) * (v - mean)).sum::<f64>() / n;
        let ci95_half = if values.len() == 1 { 0.0 } else { 1.96 * variance.sqrt() / n.sqrt() };
        rows.push(AggregateRow {
            task: if task_tag == "predict" { Task::Predict } else { Task::Control },
            env,
            eta: f64::from_bits(eta_bits),
            alpha: f64::from_bits(alpha_bits),
            metric_mean: mean,
            ci95_half,
            n_seeds: values.len(),
            single_seed: values.len() == 1,
        });
    }
    Ok(Aggregation { rows, failed_excluded })
}

/// For each eta, the aggregate row with the lowest mean metric across the
/// swept learning rates (the tuned-per-eta view of a sweep).
pub fn best_alpha_rows(rows: &[AggregateRow]) -> Vec<AggregateRow> {
    let mut best: BTreeMap<u64, &AggregateRow> = BTreeMap::new();
    for row in rows {
        best.entry(row.eta.to_bits())
            .and_modify(|b| {
                if row.metric_mean < b.metric_mean {
                    *b = row;
                }
            })
            .or_insert(row);
    }
    best.into_values().cloned().collect()
}

/// One raw CSV line: a single episode's metric for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub task: String,
    pub env: String,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub alpha_sf: f64,
    pub alpha_r: f64,
    pub seed: u64,
    pub episode: usize,
    pub metric: f64,
}

pub const RAW_HEADER: &str = "task,env,eta,gamma,alpha,alpha_sf,alpha_r,seed,episode,metric";
pub const AGGREGATE_HEADER: &str = "task,env,eta,alpha,metric_mean,ci95_half,n_seeds";

/// 17 significant digits: enough to reparse the exact same f64.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Flattens records into raw rows, one per recorded episode. Failed records
/// contribute the episodes they managed before blowing up.
pub fn raw_rows(records: &[RunRecord]) -> Vec<RawRow> {
    let mut rows = Vec::new();
    for r in records {
        for (episode, &metric) in r.metrics.iter().enumerate() {
            rows.push(RawRow {
                task: r.task.tag().to_string(),
                env: r.env.clone(),
                eta: r.eta,
                gamma: r.gamma,
                alpha: r.alpha,
                alpha_sf: r.alpha_sf,
                alpha_r: r.alpha_r,
                seed: r.seed,
                episode,
                metric,
            });
        }
    }
    rows
}

pub fn raw_csv_string(rows: &[RawRow]) -> String {
    let mut out = String::from(RAW_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.env,
            fmt_f64(r.eta),
            fmt_f64(r.gamma),
            fmt_f64(r.alpha),
            fmt_f64(r.alpha_sf),
            fmt_f64(r.alpha_r),
            r.seed,
            r.episode,
            fmt_f64(r.metric),
        ));
    }
    out
}

pub fn write_raw_csv(rows: &[RawRow], path: &Path) -> Result<()> {
    std::fs::write(path, raw_csv_string(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_raw_csv(text: &str) -> Result<Vec<RawRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RAW_HEADER => {}
        other => {
            return Err(Error::Contract(format!(
                "raw csv header mismatch: expected `{RAW_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Contract(format!(
                "raw csv line {}: expected 10 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let f = |k: usize| parse_field::<f64>(fields[k], i + 2);
        rows.push(RawRow {
            task: fields[0].to_string(),
            env: fields[1].to_string(),
            eta: f(2)?,
            gamma: f(3)?,
            alpha: f(4)?,
            alpha_sf: f(5)?,
            alpha_r: f(6)?,
            seed: parse_field::<u64>(fields[7], i + 2)?,
            episode: parse_field::<usize>(fields[8], i + 2)?,
            metric: f(9)?,
        });
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(text: &str, line: usize) -> Result<T> {
    text.parse::<T>()
        .map_err(|_| Error::Contract(format!("csv line {line}: cannot parse `{text}`")))
}

pub fn aggregate_csv_string(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task.tag(),
            r.env,
            fmt_f64(r.eta),
            fmt_f64(r.alpha),
            fmt_f64(r.metric_mean),
            fmt_f64(r.ci95_half),
            r.n_seeds,
        ));
    }
    out
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    std::fs::write(path, aggregate_csv_string(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == AGGREGATE_HEADER => {}
        other => {
            return Err(Error::Contract(format!(
                "aggregate csv header mismatch: expected `{AGGREGATE_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Contract(format!(
                "aggregate csv line {}: expected 7 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let task = match fields[0] {
            "predict" => Task::Predict,
            "control" => Task::Control,
            other => {
                return Err(Error::Contract(format!(
                    "aggregate csv line {}: unknown task `{other}`",
                    i + 2
                )))
            }
        };
        let n_seeds = parse_field::<usize>(fields[6], i + 2)?;
        rows.push(AggregateRow {
            task,
            env: fields[1].to_string(),
            eta: parse_field(fields[2], i + 2)?,
            alpha: parse_field(fields[3], i + 2)?,
            metric_mean: parse_field(fields[4], i + 2)?,
            ci95_half: parse_field(fields[5], i + 2)?,
            n_seeds,
            single_seed: n_seeds == 1,
        });
    }
    Ok(rows)
}

/// Axis labels and title for the sweep chart.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Self-contained line chart of `metric_mean` against alpha, one polyline
/// per eta with 95% CI error bars.
pub fn render_svg(rows: &[AggregateRow], path: &Path, plot: &PlotSpec) -> Result<()> {
    std::fs::write(path, svg_string(rows, plot)).map_err(|e| Error::io(path, e))
}

pub fn svg_string(rows: &[AggregateRow], plot: &PlotSpec) -> String {
    let (width, height) = (800.0, 520.0);
    let (left, right, top, bottom) = (70.0, 150.0, 50.0, 60.0);
    let (pw, ph) = (width - left - right, height - top - bottom);

    let mut series: BTreeMap<u64, Vec<&AggregateRow>> = BTreeMap::new();
    for row in rows {
        series.entry(row.eta.to_bits()).or_default().push(row);
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.alpha.partial_cmp(&b.alpha).expect("finite alphas"));
    }

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in rows {
        x_min = x_min.min(row.alpha);
        x_max = x_max.max(row.alpha);
        y_min = y_min.min(row.metric_mean - row.ci95_half);
        y_max = y_max.max(row.metric_mean + row.ci95_half);
    }
    if rows.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    let sx = move |v: f64| left + (v - x_min) / (x_max - x_min) * pw;
    let sy = move |v: f64| top + ph - (v - y_min) / (y_max - y_min) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"17\">{}</text>\n",
        left + pw / 2.0,
        xml_escape(&plot.title)
    ));

    // Frame, ticks, grid.
    svg.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n"
    ));
    let n_ticks = 5;
    for i in 0..=n_ticks {
        let fx = i as f64 / n_ticks as f64;
        let xv = x_min + fx * (x_max - x_min);
        let yv = y_min + fx * (y_max - y_min);
        let (x, y) = (sx(xv), sy(yv));
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{top}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n",
            top + ph
        ));
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n",
            left + pw
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            top + ph + 20.0,
            xml_escape(&format!("{xv:.3}"))
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            y + 4.0,
            xml_escape(&format!("{yv:.3}"))
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        left + pw / 2.0,
        height - 14.0,
        xml_escape(&plot.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        top + ph / 2.0,
        top + ph / 2.0,
        xml_escape(&plot.y_label)
    ));

    if rows.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#777\">no data</text>\n",
            left + pw / 2.0,
            top + ph / 2.0
        ));
    }

    for (idx, (eta_bits, points)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.alpha), sy(p.metric_mean)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path.join(" ")
        ));
        for p in points {
            let (x, y) = (sx(p.alpha), sy(p.metric_mean));
            let (y_lo, y_hi) = (sy(p.metric_mean - p.ci95_half), sy(p.metric_mean + p.ci95_half));
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{y_lo:.2}\" x2=\"{x:.2}\" y2=\"{y_hi:.2}\" stroke=\"{color}\"/>\n"
            ));
            for cap in [y_lo, y_hi] {
                svg.push_str(&format!(
                    "<line x1=\"{:.2}\" y1=\"{cap:.2}\" x2=\"{:.2}\" y2=\"{cap:.2}\" stroke=\"{color}\"/>\n",
                    x - 4.0,
                    x + 4.0
                ));
            }
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = top + 16.0 + idx as f64 * 20.0;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + pw + 16.0,
            ly - 4.0,
            left + pw + 40.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>\n",
            left + pw + 46.0,
            xml_escape(&format!("eta = {}", f64::from_bits(*eta_bits)))
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

//! Aggregate score statistics, stratified bootstrap intervals and the
//! `report.csv` / `report.svg` formats.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::envs::baseline;
use crate::error::{Error, Result};
use crate::rlcore::{final_score, MetricsRow};
use crate::rng::{self, derive_seed};

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const REPORT_HEADER: &str = "arch,metric,value,ci_low,ci_high";

/// `(raw - random) / (reference - random)`, unclipped.
pub fn normalize_score(raw: f64, random_score: f64, reference_score: f64) -> Result<f64> {
    if reference_score == random_score || !(random_score.is_finite() && reference_score.is_finite()) {
        return Err(Error::invalid(format!(
            "degenerate baselines: random {random_score}, reference {reference_score}"
        )));
    }
    Ok((raw - random_score) / (reference_score - random_score))
}

fn non_empty(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        Err(Error::invalid(format!("{what} of an empty score list")))
    } else {
        Ok(())
    }
}

pub fn mean(scores: &[f64]) -> Result<f64> {
    non_empty(scores, "mean")?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    non_empty(values, "median")?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Interquartile mean: drops `floor(N/4)` scores from each end.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    non_empty(scores, "iqm")?;
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    mean(&v[cut..v.len() - cut])
}

/// Mean shortfall below 1.
pub fn optimality_gap(scores: &[f64]) -> Result<f64> {
    non_empty(scores, "optimality gap")?;
    Ok(scores.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Statistic {
    Iqm,
    Median,
    Mean,
    OptimalityGap,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Statistic::Iqm, Statistic::Median, Statistic::Mean, Statistic::OptimalityGap];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Iqm => "iqm",
            Statistic::Median => "median",
            Statistic::Mean => "mean",
            Statistic::OptimalityGap => "optimality_gap",
        }
    }

    /// IQM, mean and gap pool every run; the median is taken over per-game
    /// mean scores.
    pub fn compute(self, table: &ScoreTable) -> Result<f64> {
        match self {
            Statistic::Iqm => iqm(&table.flat()),
            Statistic::Mean => mean(&table.flat()),
            Statistic::OptimalityGap => optimality_gap(&table.flat()),
            Statistic::Median => {
                let per_game = table.scores.iter().map(|s| mean(s)).collect::<Result<Vec<_>>>()?;
                median(&per_game)
            }
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Scores indexed by game, then run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    games: Vec<String>,
    scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(games: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if games.is_empty() || games.len() != scores.len() {
            return Err(Error::invalid("score table needs one non-empty score list per game"));
        }
        for (i, g) in games.iter().enumerate() {
            if games[..i].contains(g) {
                return Err(Error::invalid(format!("duplicate game `{g}` in score table")));
            }
        }
        for (g, s) in games.iter().zip(&scores) {
            if s.is_empty() {
                return Err(Error::invalid(format!("game `{g}` has no runs")));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("game `{g}` has a non-finite score")));
            }
        }
        Ok(Self { games, scores })
    }

    pub fn games(&self) -> &[String] {
        &self.games
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    fn sorted_games(&self) -> Vec<&String> {
        let mut g: Vec<&String> = self.games.iter().collect();
        g.sort();
        g
    }
}

/// One bootstrap resample: runs are redrawn with replacement within each game.
pub fn bootstrap_resample(table: &ScoreTable, seed: u64, index: u64) -> ScoreTable {
    let mut r = rng::indexed_stream(seed, "bootstrap", index);
    let scores = table
        .scores
        .iter()
        .map(|s| (0..s.len()).map(|_| s[r.gen_range(0..s.len())]).collect())
        .collect();
    ScoreTable {
        games: table.games.clone(),
        scores,
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of `statistic` over `resamples` stratified resamples.
pub fn stratified_bootstrap_ci(
    table: &ScoreTable,
    statistic: Statistic,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let mut stats = (0..resamples as u64)
        .map(|b| statistic.compute(&bootstrap_resample(table, seed, b)))
        .collect::<Result<Vec<_>>>()?;
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub arch: String,
    pub metric: Statistic,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Point estimates and intervals for every arch and statistic. All tables
/// must cover the same games.
pub fn aggregate_report(arms: &[(String, ScoreTable)], resamples: usize, level: f64, seed: u64) -> Result<Vec<ReportRow>> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    let games = first.sorted_games();
    let mut rows = Vec::new();
    for (arch, table) in arms {
        if table.sorted_games() != games {
            return Err(Error::invalid(format!(
                "arch `{arch}` covers games {:?}, expected {:?}",
                table.sorted_games(),
                games
            )));
        }
        for metric in Statistic::ALL {
            let (ci_low, ci_high) =
                stratified_bootstrap_ci(table, metric, resamples, level, derive_seed(seed, &format!("{arch}/{metric}")))?;
            rows.push(ReportRow {
                arch: arch.clone(),
                metric,
                value: metric.compute(table)?,
                ci_low,
                ci_high,
            });
        }
    }
    Ok(rows)
}

/// Groups evaluation rows into per-arch tables of normalized final scores.
/// Archs keep their order of first appearance; runs are ordered by seed.
pub fn score_tables(rows: &[MetricsRow]) -> Result<Vec<(String, ScoreTable)>> {
    let mut runs: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        runs.entry(r.run_id.as_str()).or_default().push(r);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.arch.as_str()) {
            order.push(&r.arch);
        }
    }
    let mut cells: BTreeMap<(&str, String), Vec<(u64, f64)>> = BTreeMap::new();
    for (id, mut run) in runs {
        let head = run[0];
        if run.iter().any(|r| r.arch != head.arch || r.game != head.game || r.seed != head.seed) {
            return Err(Error::invalid(format!("run `{id}` mixes archs, games or seeds")));
        }
        run.sort_by_key(|r| r.env_step);
        let owned: Vec<MetricsRow> = run.iter().map(|r| (*r).clone()).collect();
        let raw = final_score(&owned).expect("runs are non-empty");
        let b = baseline(head.game);
        let score = normalize_score(raw, b.random_score, b.reference_score)?;
        cells
            .entry((head.arch.as_str(), head.game.to_string()))
            .or_default()
            .push((head.seed, score));
    }
    let mut out = Vec::new();
    for arch in order {
        let (mut games, mut scores) = (Vec::new(), Vec::new());
        for ((a, game), runs) in &cells {
            if *a == arch {
                let mut runs = runs.clone();
                runs.sort_by_key(|r| r.0);
                games.push(game.clone());
                scores.push(runs.into_iter().map(|r| r.1).collect());
            }
        }
        out.push((arch.to_string(), ScoreTable::new(games, scores)?));
    }
    Ok(out)
}

pub fn report_csv_string(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.arch.clone(),
            r.metric.to_string(),
            r.value.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, report_csv_string(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let err = |line: usize, msg: String| Error::Format {
        path: format!("report.csv line {line}"),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(err(1, format!("header must be `{REPORT_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("not a finite number `{}`", &rec[j])))
        };
        if rec[0].is_empty() {
            return Err(err(line, "empty arch".into()));
        }
        let row = ReportRow {
            arch: rec[0].to_string(),
            metric: rec[1].parse().map_err(|e: Error| err(line, e.to_string()))?,
            value: num(2)?,
            ci_low: num(3)?,
            ci_high: num(4)?,
        };
        if row.ci_low > row.ci_high {
            return Err(err(line, "ci_low exceeds ci_high".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Mean normalized evaluation return per arch at each evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub arch: String,
    pub points: Vec<(u64, f64)>,
}

pub fn learning_curves(rows: &[MetricsRow]) -> Result<Vec<Curve>> {
    let mut acc: BTreeMap<&str, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let b = baseline(r.game);
        let s = normalize_score(r.episode_return, b.random_score, b.reference_score)?;
        let cell = acc.entry(&r.arch).or_default().entry(r.env_step).or_insert((0.0, 0));
        cell.0 += s;
        cell.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(arch, pts)| Curve {
            arch: arch.to_string(),
            points: pts.into_iter().map(|(step, (sum, n))| (step, sum / n as f64)).collect(),
        })
        .collect())
}

const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];
const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const LABEL_H: f64 = 90.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((0.0f64, 1.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (lo, if hi > lo { hi } else { lo + 1.0 })
}

/// Bar chart with interval whiskers, one panel per metric, followed by a
/// learning-curve panel when curves are given. Output depends only on the
/// inputs.
pub fn report_svg(rows: &[ReportRow], curves: &[Curve]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("empty report"));
    }
    let mut archs: Vec<&str> = Vec::new();
    for r in rows {
        if !archs.contains(&r.arch.as_str()) {
            archs.push(&r.arch);
        }
    }
    let metrics: Vec<Statistic> = Statistic::ALL.into_iter().filter(|m| rows.iter().any(|r| r.metric == *m)).collect();
    let color = |arch: &str| PALETTE[archs.iter().position(|a| *a == arch).unwrap_or(0) % PALETTE.len()];

    let bar_h = MARGIN + PANEL_H + LABEL_H;
    let curve_h = if curves.is_empty() { 0.0 } else { PANEL_H + 2.0 * MARGIN };
    let width = MARGIN + metrics.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = bar_h + curve_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (pi, metric) in metrics.iter().enumerate() {
        let x0 = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == *metric).collect();
        let (lo, hi) = bounds(mine.iter().flat_map(|r| [r.value, r.ci_low, r.ci_high]));
        let y = |v: f64| y0 + PANEL_H * (hi - v) / (hi - lo);
        let _ = writeln!(s, r#"<g class="panel" data-metric="{metric}">"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{metric}</text>"#, x0 + PANEL_W / 2.0, y0 - 12.0);
        let _ = writeln!(s, r#"<line class="axis" x1="{x0:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, y(0.0), x0 + PANEL_W, y(0.0));
        let _ = writeln!(s, r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{:.2}" stroke="black"/>"#, y0 + PANEL_H);
        for t in [lo, 0.0, 1.0, hi] {
            if t >= lo && t <= hi {
                let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.2}</text>"#, x0 - 4.0, y(t) + 4.0);
            }
        }
        let slot = PANEL_W / mine.len() as f64;
        for (i, r) in mine.iter().enumerate() {
            let cx = x0 + slot * (i as f64 + 0.5);
            let bw = slot * 0.6;
            let (top, bottom) = (y(r.value.max(0.0)), y(r.value.min(0.0)));
            let arch = escape(&r.arch);
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-arch="{arch}" x="{:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#,
                cx - bw / 2.0,
                bottom - top,
                color(&r.arch)
            );
            let _ = writeln!(
                s,
                r#"<g class="whisker" data-arch="{arch}" stroke="black"><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/></g>"#,
                y(r.ci_high),
                y(r.ci_low),
                cx - bw / 4.0,
                y(r.ci_high),
                cx + bw / 4.0,
                y(r.ci_high),
                cx - bw / 4.0,
                y(r.ci_low),
                cx + bw / 4.0,
                y(r.ci_low)
            );
            let ly = y0 + PANEL_H + 10.0;
            let _ = writeln!(
                s,
                r#"<text x="{cx:.2}" y="{ly:.2}" transform="rotate(45 {cx:.2} {ly:.2})">{arch}</text>"#
            );
        }
        let _ = writeln!(s, "</g>");
    }

    if !curves.is_empty() {
        let x0 = MARGIN;
        let y0 = bar_h + MARGIN;
        let w = width - 2.0 * MARGIN;
        let max_step = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).max().unwrap_or(1).max(1) as f64;
        let (lo, hi) = bounds(curves.iter().flat_map(|c| c.points.iter().map(|p| p.1)));
        let y = |v: f64| y0 + PANEL_H * (hi - v) / (hi - lo);
        let _ = writeln!(s, r#"<g class="curves">"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">normalized return vs env steps</text>"#, x0 + w / 2.0, y0 - 12.0);
        let _ = writeln!(s, r#"<line class="axis" x1="{x0:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, y0 + PANEL_H, x0 + w, y0 + PANEL_H);
        let _ = writeln!(s, r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{:.2}" stroke="black"/>"#, y0 + PANEL_H);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{max_step:.0}</text>"#, x0 + w, y0 + PANEL_H + 14.0);
        for t in [lo, hi] {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.2}</text>"#, x0 - 4.0, y(t) + 4.0);
        }
        for (i, c) in curves.iter().enumerate() {
            let pts: Vec<String> = c
                .points
                .iter()
                .map(|(step, v)| format!("{:.2},{:.2}", x0 + w * *step as f64 / max_step, y(*v)))
                .collect();
            let col = if archs.contains(&c.arch.as_str()) { color(&c.arch) } else { PALETTE[i % PALETTE.len()] };
            let _ = writeln!(
                s,
                r#"<polyline class="curve" data-arch="{}" fill="none" stroke="{col}" stroke-width="1.5" points="{}"/>"#,
                escape(&c.arch),
                pts.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" fill="{col}">{}</text>"#,
                x0 + 8.0,
                y0 + 14.0 + 13.0 * i as f64,
                escape(&c.arch)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Game;
    use proptest::prelude::*;

    fn table(scores: Vec<Vec<f64>>) -> ScoreTable {
        let games = (0..scores.len()).map(|i| format!("g{i}")).collect();
        ScoreTable::new(games, scores).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[0.0, 1.0, 2.0, 3.0, 100.0]).unwrap(), 2.0);
        assert_eq!(iqm(&[7.0; 9]).unwrap(), 7.0);
        assert_eq!(optimality_gap(&[0.5, 1.5]).unwrap(), 0.25);
        assert_eq!(optimality_gap(&[1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(normalize_score(-0.5, -0.5, 2.0).unwrap(), 0.0);
        assert_eq!(normalize_score(2.0, -0.5, 2.0).unwrap(), 1.0);
        assert_eq!(normalize_score(4.5, -0.5, 2.0).unwrap(), 2.0);
        assert!(normalize_score(1.0, 2.0, 2.0).is_err());
        assert!(iqm(&[]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]).unwrap(), 2.5);
    }

    #[test]
    fn median_is_over_game_means() {
        let t = table(vec![vec![0.0, 2.0], vec![5.0, 5.0], vec![9.0, 100.0]]);
        assert_eq!(Statistic::Median.compute(&t).unwrap(), 5.0);
        assert_eq!(Statistic::Mean.compute(&t).unwrap(), 121.0 / 6.0);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let t = table(vec![vec![0.4; 5], vec![0.4; 3]]);
        for m in Statistic::ALL {
            let (lo, hi) = stratified_bootstrap_ci(&t, m, 200, 0.95, 3).unwrap();
            assert_eq!(lo, hi);
        }
        let t = table(vec![vec![0.1, 0.9, 0.3, 0.5], vec![1.2, -0.4, 0.0]]);
        let a = stratified_bootstrap_ci(&t, Statistic::Iqm, 500, 0.95, 11).unwrap();
        assert_eq!(a, stratified_bootstrap_ci(&t, Statistic::Iqm, 500, 0.95, 11).unwrap());
        assert_ne!(a, stratified_bootstrap_ci(&t, Statistic::Iqm, 500, 0.95, 12).unwrap());
        assert!(stratified_bootstrap_ci(&t, Statistic::Iqm, 0, 0.95, 1).is_err());
    }

    #[test]
    fn resampling_stays_within_games() {
        let t = table((0..4).map(|g| (0..6).map(|j| (1000 * g + j) as f64).collect()).collect());
        for b in 0..200 {
            let r = bootstrap_resample(&t, 5, b);
            for (g, s) in r.scores().iter().enumerate() {
                assert_eq!(s.len(), 6);
                assert!(s.iter().all(|v| (*v as usize) / 1000 == g));
            }
        }
    }

    #[test]
    fn point_estimate_inside_interval() {
        let mut r = rng::stream(77, "tables");
        for _ in 0..100 {
            let t = table((0..3).map(|_| (0..5).map(|_| r.gen_range(-0.5..1.5)).collect()).collect());
            for m in Statistic::ALL {
                let v = m.compute(&t).unwrap();
                let (lo, hi) = stratified_bootstrap_ci(&t, m, 500, 0.95, 1).unwrap();
                assert!(lo <= v && v <= hi, "{m}: {v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn report_single_cell_and_ordering() {
        let one = vec![("a".to_string(), table(vec![vec![0.7]]))];
        for row in aggregate_report(&one, 100, 0.95, 0).unwrap() {
            match row.metric {
                Statistic::OptimalityGap => assert!((row.value - 0.3).abs() < 1e-12),
                _ => assert_eq!(row.value, 0.7),
            }
            assert_eq!((row.ci_low, row.ci_high), (row.value, row.value));
        }
        let low = table(vec![vec![0.0, 0.1, 0.2, 0.3], vec![0.05, 0.15, 0.25, 0.35]]);
        let high = table(vec![vec![2.0, 2.1, 2.2, 2.3], vec![2.05, 2.15, 2.25, 2.35]]);
        let rows = aggregate_report(&[("low".into(), low), ("high".into(), high)], 100, 0.95, 0).unwrap();
        let get = |arch: &str, m: Statistic| rows.iter().find(|r| r.arch == arch && r.metric == m).unwrap().value;
        assert!(get("low", Statistic::Iqm) < get("high", Statistic::Iqm));
        assert!(get("low", Statistic::Mean) < get("high", Statistic::Mean));
    }

    #[test]
    fn mismatched_games_rejected() {
        let a = ScoreTable::new(vec!["x".into(), "y".into()], vec![vec![1.0], vec![2.0]]).unwrap();
        let b = ScoreTable::new(vec!["y".into(), "x".into()], vec![vec![1.0], vec![2.0]]).unwrap();
        let c = ScoreTable::new(vec!["x".into(), "z".into()], vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(aggregate_report(&[("a".into(), a.clone()), ("b".into(), b)], 10, 0.95, 0).is_ok());
        assert!(aggregate_report(&[("a".into(), a), ("c".into(), c)], 10, 0.95, 0).is_err());
        assert!(ScoreTable::new(vec!["x".into(), "x".into()], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(ScoreTable::new(vec!["x".into()], vec![vec![]]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let rows = aggregate_report(
            &[("soft,moe".into(), table(vec![vec![0.1, 0.72, 1.0 / 3.0], vec![0.9, -0.2, 0.5]]))],
            300,
            0.95,
            9,
        )
        .unwrap();
        let text = report_csv_string(&rows);
        assert_eq!(parse_report_csv(&text).unwrap(), rows);
        assert!(parse_report_csv("arch,metric\n").is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\na,iqm,1,2,0\n")).is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\na,best,1,0,2\n")).is_err());
    }

    fn metrics_row(arch: &str, game: Game, seed: u64, step: u64, ret: f64) -> MetricsRow {
        MetricsRow {
            run_id: format!("{arch}-{game}-s{seed}"),
            game,
            seed,
            arch: arch.into(),
            env_step: step,
            episode_return: ret,
            loss: None,
            dormant_fraction: None,
        }
    }

    #[test]
    fn tables_from_metrics() {
        let b = baseline(Game::PixelCatch);
        let mut rows = Vec::new();
        for (seed, rets) in [(1u64, [0.0, 0.2, 0.4, 0.6]), (0, [1.0, 1.0, 1.0, 1.0])] {
            for (k, r) in rets.iter().enumerate() {
                rows.push(metrics_row("z", Game::PixelCatch, seed, 1000 * (k as u64 + 1), *r));
            }
        }
        rows.push(metrics_row("a", Game::PixelCatch, 0, 1000, b.random_score));
        let t = score_tables(&rows).unwrap();
        assert_eq!(t.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["z", "a"]);
        let z = &t[0].1;
        let expect = |raw: f64| (raw - b.random_score) / (b.reference_score - b.random_score);
        assert_eq!(z.scores()[0], vec![expect(1.0), expect((0.2 + 0.4 + 0.6) / 3.0)]);
        assert_eq!(t[1].1.scores()[0], vec![0.0]);
    }

    #[test]
    fn svg_structure_and_determinism() {
        let arms: Vec<(String, ScoreTable)> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, a)| (a.to_string(), table(vec![vec![0.2 * i as f64, 0.5, 0.9]])))
            .collect();
        let rows = aggregate_report(&arms, 50, 0.95, 0).unwrap();
        let curves = vec![Curve {
            arch: "a".into(),
            points: vec![(1000, 0.1), (2000, 0.6)],
        }];
        let svg = report_svg(&rows, &curves).unwrap();
        assert_eq!(svg, report_svg(&rows, &curves).unwrap());
        assert_eq!(svg.matches(r#"class="bar""#).count(), 3 * Statistic::ALL.len());
        assert_eq!(svg.matches(r#"class="whisker""#).count(), 3 * Statistic::ALL.len());
        assert_eq!(svg.matches(r#"class="curve""#).count(), 1);
        assert!(report_svg(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn iqm_equivariance(v in prop::collection::vec(-10.0f64..10.0, 1..40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let base = iqm(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            prop_assert!((iqm(&moved).unwrap() - (a * base + b)).abs() < 1e-9);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= base && base <= hi + 1e-12);
            if v.len() <= 3 {
                prop_assert!((base - mean(&v).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn gap_oracle_and_bounds(v in prop::collection::vec(-2.0f64..3.0, 1..30)) {
            let mut direct = 0.0;
            for x in &v {
                if *x < 1.0 {
                    direct += 1.0 - x;
                }
            }
            direct /= v.len() as f64;
            let g = optimality_gap(&v).unwrap();
            prop_assert!((g - direct).abs() < 1e-12);
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(g >= 0.0 && g <= 1.0 - min.min(0.0) + 1e-12);
            prop_assert_eq!(g == 0.0, v.iter().all(|x| *x >= 1.0));
        }
    }
}

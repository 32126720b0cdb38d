//! Ablation grids over MHM, view count, data fraction and seed.
//!
//! A grid file is `key = value` text. `mhm`, `views`, `data_fraction` and
//! `seeds` take comma-separated lists; `work_dir`, `data_seed` and
//! `eval_views` control the data; every other key sets the base run
//! configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::evaluate::evaluate;
use super::pretrain::{pretrain, PretrainOptions};
use crate::body::BodyModel;
use crate::config::{parse_pairs, RunConfig};
use crate::dataset::{generate, shard_paths, subset, GenerateMode, GenerateOptions, PairSource, ShardSet, Split};
use crate::metrics::EvalReport;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub base: RunConfig,
    pub mhm: Vec<bool>,
    pub views: Vec<usize>,
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub work_dir: PathBuf,
    /// Generation seed shared by every cell.
    pub data_seed: u64,
    /// Views of the held-out rig.
    pub eval_views: usize,
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::config(format!("cannot parse {key} entry {v:?}"))))
        .collect()
}

impl AblationGrid {
    pub fn new(base: RunConfig, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            mhm: vec![base.train.mhm],
            views: vec![base.train.views],
            data_fractions: vec![base.train.data_fraction],
            seeds: vec![base.train.seed],
            base,
            work_dir: work_dir.into(),
            data_seed: 0,
            eval_views: 4,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut base = RunConfig::default();
        for (k, v) in &pairs {
            if !matches!(k.as_str(), "mhm" | "views" | "data_fraction" | "seeds" | "work_dir" | "data_seed" | "eval_views") {
                base.set(k, v)?;
            }
        }
        let mut grid = Self::new(base, "ablation");
        for (k, v) in &pairs {
            match k.as_str() {
                "mhm" => {
                    grid.mhm = v
                        .split(',')
                        .map(|s| match s.trim() {
                            "on" | "true" => Ok(true),
                            "off" | "false" => Ok(false),
                            o => Err(Error::config(format!("mhm entries are on/off, got {o:?}"))),
                        })
                        .collect::<Result<_>>()?
                }
                "views" => grid.views = list(k, v)?,
                "data_fraction" => grid.data_fractions = list(k, v)?,
                "seeds" => grid.seeds = list(k, v)?,
                "work_dir" => grid.work_dir = PathBuf::from(v),
                "data_seed" => grid.data_seed = list(k, v)?[0],
                "eval_views" => grid.eval_views = list(k, v)?[0],
                _ => {}
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mhm.is_empty() || self.views.is_empty() || self.data_fractions.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("every grid axis needs at least one value"));
        }
        for &v in self.views.iter().chain([&self.eval_views]) {
            if ![1, 2, 4, 8].contains(&v) {
                return Err(Error::config(format!("views must be 1, 2, 4 or 8, got {v}")));
            }
        }
        if let Some(f) = self.data_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!("data fraction {f} outside (0, 1]")));
        }
        self.base.validate()
    }

    /// Cell configurations in grid order: mhm, views, data fraction, seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &mhm in &self.mhm {
            for &views in &self.views {
                for &data_fraction in &self.data_fractions {
                    for &seed in &self.seeds {
                        out.push(CellKey { mhm, views, data_fraction, seed });
                    }
                }
            }
        }
        out
    }

    pub fn cell_config(&self, key: &CellKey) -> RunConfig {
        let mut c = self.base.clone();
        c.train.mhm = key.mhm;
        c.train.views = key.views;
        c.train.data_fraction = key.data_fraction;
        c.train.seed = key.seed;
        c
    }

    /// Training shards for `views` cameras, generated on first use.
    pub fn train_data(&self, body: &BodyModel, views: usize) -> Result<ShardSet> {
        let opts = GenerateOptions::new(self.base.train.train_meshes, views, self.data_seed);
        open_or_generate(body, &self.train_dir(views), &opts)
    }

    /// Held-out shards with full vertices, generated on first use.
    pub fn held_out_data(&self, body: &BodyModel) -> Result<ShardSet> {
        let opts = GenerateOptions {
            mode: GenerateMode::Enumerate,
            split: Split::HeldOut,
            store_full: true,
            ..GenerateOptions::new(self.base.train.eval_meshes, self.eval_views, self.data_seed)
        };
        open_or_generate(body, &self.held_out_dir(), &opts)
    }

    fn train_dir(&self, views: usize) -> PathBuf {
        self.work_dir
            .join(format!("train-v{views}-n{}-s{}", self.base.train.train_meshes, self.data_seed))
    }

    fn held_out_dir(&self) -> PathBuf {
        self.work_dir
            .join(format!("heldout-v{}-n{}-s{}", self.eval_views, self.base.train.eval_meshes, self.data_seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub mhm: bool,
    pub views: usize,
    pub data_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub report: EvalReport,
    pub final_loss: f64,
    pub train_records: usize,
    pub seconds: f64,
}

/// A qualitative direction check over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<CellResult>,
    pub trends: Vec<TrendCheck>,
}

fn open_or_generate(body: &BodyModel, dir: &Path, opts: &GenerateOptions) -> Result<ShardSet> {
    if shard_paths(dir)?.is_empty() {
        log::info!("generating {} meshes x {} views into {}", opts.meshes, opts.views, dir.display());
        generate(body, opts, dir)?;
    }
    let set = ShardSet::open_dir(dir)?;
    if set.seeds() != [opts.seed] || set.rig().len() != opts.views {
        return Err(Error::config(format!(
            "{} holds data for seeds {:?} with {} views, expected seed {} with {} views",
            dir.display(),
            set.seeds(),
            set.rig().len(),
            opts.seed,
            opts.views
        )));
    }
    Ok(set)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Train and evaluate one cell on prepared data.
pub fn run_cell(grid: &AblationGrid, key: &CellKey, body: &BodyModel, train: &ShardSet, held_out: &ShardSet) -> Result<CellResult> {
    let started = Instant::now();
    let config = grid.cell_config(key);
    let data = subset(train, key.data_fraction, grid.data_seed)?;
    let outcome = pretrain(&config, body, &data, &PretrainOptions::default())?;
    let (report, _) = evaluate(&config, &outcome.checkpoint.params, held_out)?;
    Ok(CellResult {
        key: *key,
        report,
        final_loss: outcome.history.last().map_or(f64::NAN, |s| s.report.total),
        train_records: data.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Run every cell of the grid. Data is generated once per view count under
/// `work_dir` and reused by later runs.
pub fn ablate(grid: &AblationGrid, body: &BodyModel) -> Result<AblationTable> {
    grid.validate()?;
    let held_out = grid.held_out_data(body)?;
    let mut cells = Vec::new();
    for &views in &grid.views {
        let train = grid.train_data(body, views)?;
        for key in grid.cells().iter().filter(|k| k.views == views) {
            let r = run_cell(grid, key, body, &train, &held_out)?;
            log::info!(
                "cell mhm={} views={} data={} seed={}: PA-MPJPE {:.2} mm in {:.0}s",
                key.mhm,
                key.views,
                key.data_fraction,
                key.seed,
                r.report.pa_mpjpe,
                r.seconds
            );
            cells.push(r);
        }
    }
    let trends = trend_checks(&cells);
    Ok(AblationTable { cells, trends })
}

/// Direction checks: MHM on no worse than off (in mean and in at least two
/// thirds of the seeds), every view count no worse than the fewest views,
/// and the largest data fraction no worse than the smallest. All compare
/// PA-MPJPE.
pub fn trend_checks(cells: &[CellResult]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    let pa = |f: &dyn Fn(&CellKey) -> bool| mean(cells.iter().filter(|c| f(&c.key)).map(|c| c.report.pa_mpjpe));
    let distinct = |get: fn(&CellKey) -> f64| {
        let mut v: Vec<f64> = cells.iter().map(|c| get(&c.key)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let views = distinct(|k| k.views as f64);
    let fractions = distinct(|k| k.data_fraction);
    let has = |m: bool| cells.iter().any(|c| c.key.mhm == m);
    if has(true) && has(false) {
        let on = pa(&|k| k.mhm);
        let off = pa(&|k| !k.mhm);
        let mut holding = 0;
        let mut pairs = 0;
        for a in cells.iter().filter(|c| c.key.mhm) {
            if let Some(b) = cells.iter().find(|b| !b.key.mhm && b.key.seed == a.key.seed && b.key.views == a.key.views && b.key.data_fraction == a.key.data_fraction) {
                pairs += 1;
                if a.report.pa_mpjpe <= b.report.pa_mpjpe {
                    holding += 1;
                }
            }
        }
        out.push(TrendCheck {
            name: "MHM on <= MHM off".into(),
            passed: on <= off && 3 * holding >= 2 * pairs,
            detail: format!("mean PA-MPJPE {on:.2} vs {off:.2} mm; holds in {holding} of {pairs} paired cells"),
        });
    }
    if views.len() > 1 {
        let fewest = views[0];
        let base = pa(&|k| k.views as f64 == fewest);
        for &v in &views[1..] {
            let value = pa(&|k| k.views as f64 == v);
            out.push(TrendCheck {
                name: format!("{v} views <= {fewest} views"),
                passed: value <= base,
                detail: format!("PA-MPJPE {value:.2} vs {base:.2} mm"),
            });
        }
    }
    if fractions.len() > 1 {
        let (lo, hi) = (fractions[0], fractions[fractions.len() - 1]);
        let (a, b) = (pa(&|k| k.data_fraction == hi), pa(&|k| k.data_fraction == lo));
        out.push(TrendCheck {
            name: format!("{:.0}% data <= {:.0}% data", hi * 100.0, lo * 100.0),
            passed: a <= b,
            detail: format!("PA-MPJPE {a:.2} vs {b:.2} mm"),
        });
    }
    out
}

impl AblationTable {
    /// Text table with one row per setting (averaged over seeds) and only
    /// the columns that vary, followed by the trend flags.
    pub fn render(&self) -> String {
        let cells = &self.cells;
        let varies = |f: fn(&CellKey) -> String| {
            let first = cells.first().map(|c| f(&c.key));
            cells.iter().any(|c| Some(f(&c.key)) != first)
        };
        let mhm = |k: &CellKey| if k.mhm { "on".to_string() } else { "off".to_string() };
        let views = |k: &CellKey| k.views.to_string();
        let data = |k: &CellKey| format!("{:.0}%", k.data_fraction * 100.0);
        let mut columns: Vec<(&str, fn(&CellKey) -> String)> = Vec::new();
        if varies(mhm) {
            columns.push(("MHM", mhm));
        }
        if varies(views) {
            columns.push(("Views", views));
        }
        if varies(data) {
            columns.push(("PT Data", data));
        }
        if columns.is_empty() {
            columns = vec![("MHM", mhm), ("Views", views), ("PT Data", data)];
        }
        let mut rows: Vec<(Vec<String>, Vec<&CellResult>)> = Vec::new();
        for c in cells {
            let label: Vec<String> = columns.iter().map(|(_, f)| f(&c.key)).collect();
            match rows.iter_mut().find(|(l, _)| *l == label) {
                Some((_, members)) => members.push(c),
                None => rows.push((label, vec![c])),
            }
        }
        let mut s = String::new();
        for (name, _) in &columns {
            let _ = write!(s, "{name:<9}");
        }
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>6}", "MPJPE", "PA-MPJPE", "MPVE", "seeds");
        for (label, members) in &rows {
            for l in label {
                let _ = write!(s, "{l:<9}");
            }
            let m = |f: fn(&EvalReport) -> f64| mean(members.iter().map(|c| f(&c.report)));
            let mpve = m(|r| r.mpve);
            let mpve = if mpve.is_nan() { "n/a".to_string() } else { format!("{mpve:.2}") };
            let _ = writeln!(s, "{:>10.2} {:>10.2} {mpve:>10} {:>6}", m(|r| r.mpjpe), m(|r| r.pa_mpjpe), members.len());
        }
        for t in &self.trends {
            let _ = writeln!(s, "[{}] {}: {}", if t.passed { "PASS" } else { "FAIL" }, t.name, t.detail);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mhm: bool, views: usize, data_fraction: f64, seed: u64, pa: f64) -> CellResult {
        CellResult {
            key: CellKey { mhm, views, data_fraction, seed },
            report: EvalReport {
                mpjpe: pa * 1.5,
                pa_mpjpe: pa,
                mpve: f64::NAN,
                sample_count: 4,
            },
            final_loss: 0.1,
            train_records: 10,
            seconds: 1.0,
        }
    }

    #[test]
    fn grid_parses_axes_and_base_keys() {
        let g = AblationGrid::from_text("views = 1, 2,4\nmhm = on,off\nseeds = 0,1,2\nbatch_size = 4\nmax_steps = 10\nwork_dir = /tmp/x\n").unwrap();
        assert_eq!(g.views, vec![1, 2, 4]);
        assert_eq!(g.mhm, vec![true, false]);
        assert_eq!(g.base.train.batch_size, 4);
        assert_eq!(g.cells().len(), 18);
        assert_eq!(g.work_dir, PathBuf::from("/tmp/x"));
        assert!(AblationGrid::from_text("views = 3").is_err());
        assert!(AblationGrid::from_text("mhm = maybe").is_err());
    }

    #[test]
    fn views_grid_renders_one_row_per_view_count() {
        let table = AblationTable {
            cells: vec![cell(true, 1, 1.0, 0, 70.0), cell(true, 2, 1.0, 0, 69.0), cell(true, 4, 1.0, 0, 66.0)],
            trends: Vec::new(),
        };
        let text = table.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "{text}");
        assert!(lines[0].starts_with("Views") && lines[0].contains("PA-MPJPE"));
        assert!(lines[3].starts_with('4') && lines[3].contains("66.00"));
    }

    #[test]
    fn trend_flags() {
        let cells = vec![
            cell(true, 4, 1.0, 0, 60.0),
            cell(true, 4, 1.0, 1, 62.0),
            cell(true, 4, 1.0, 2, 70.0),
            cell(false, 4, 1.0, 0, 61.0),
            cell(false, 4, 1.0, 1, 63.0),
            cell(false, 4, 1.0, 2, 65.0),
        ];
        let t = trend_checks(&cells);
        assert_eq!(t.len(), 1);
        // holds in 2 of 3 seeds but the mean is worse
        assert!(!t[0].passed, "{:?}", t[0]);
        let mut better = cells.clone();
        better[2].report.pa_mpjpe = 64.0;
        assert!(trend_checks(&better)[0].passed);
        let views = vec![cell(true, 1, 1.0, 0, 70.0), cell(true, 4, 1.0, 0, 66.0), cell(true, 8, 1.0, 0, 71.0)];
        let t = trend_checks(&views);
        assert_eq!(t.iter().map(|c| c.passed).collect::<Vec<_>>(), vec![true, false]);
        let data = vec![cell(true, 4, 0.2, 0, 70.0), cell(true, 4, 1.0, 0, 66.0)];
        assert!(trend_checks(&data)[0].passed);
    }
}

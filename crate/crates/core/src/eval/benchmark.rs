//! Prompt suites, the ablation grid and the benchmark runner.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::AttentionDenoiser;
use crate::image_io::RgbImage;
use crate::layout::LayoutSpec;
use crate::losses::ActiveTerms;
use crate::rng::{stream, SeededRng};
use crate::sampler::{generate, NoiseSchedule, SamplerConfig};
use crate::toymodel::scene::{sample_scene_with, scene_layout, SceneSampling};

use super::detect::detect_objects;
use super::metrics::{aggregate, score_run, AggregateMetrics, RunMetrics};

pub const SUITE_SCHEMA: u32 = 1;
pub const DEFAULT_SUITE_SIZE: usize = 50;
pub const DEFAULT_SEEDS: [u64; 4] = [0, 42, 2718, 31415];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub id: String,
    pub layout: LayoutSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub entries: Vec<SuiteEntry>,
}

impl Suite {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SUITE_SCHEMA {
            return Err(Error::Invalid(format!("unsupported suite schema {}", self.schema)));
        }
        if self.entries.is_empty() {
            return Err(Error::Invalid("suite has no entries".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let suite: Suite = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("suite: {e}")))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Seeded toy prompts with distinct shapes and colors, mostly two or three
/// subjects.
pub fn default_suite(size: usize, seed: u64) -> Result<Suite> {
    let opts = SceneSampling {
        count_weights: [0.2, 0.4, 0.4],
        distinct: true,
        gap: 2,
    };
    let mut rng = SeededRng::new(seed, stream::SUITE);
    let entries = (0..size)
        .map(|i| {
            let (spec, _) = sample_scene_with(&mut rng, &opts)?;
            Ok(SuiteEntry {
                id: format!("p{i:03}"),
                layout: scene_layout(&spec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Suite {
        schema: SUITE_SCHEMA,
        name: "toy-default".into(),
        description: format!("{size} seeded prompts, suite seed {seed}"),
        entries,
    })
}

/// One on/off pattern of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub terms: ActiveTerms,
}

impl AblationRow {
    pub fn new(name: &str, iou: bool, mask: bool, kl: bool, att: bool) -> Self {
        Self {
            name: name.into(),
            terms: ActiveTerms { iou, mask, kl, att },
        }
    }

    /// Compact `+`-joined list of active terms, e.g. `iou+mask`.
    pub fn pattern(&self) -> String {
        let t = self.terms;
        let on: Vec<&str> = [(t.iou, "iou"), (t.mask, "mask"), (t.kl, "kl"), (t.att, "att")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

/// The five loss-component rows: IoU alone, with mask, with KL, with both,
/// and the full objective.
pub fn default_grid() -> Vec<AblationRow> {
    vec![
        AblationRow::new("1", true, false, false, false),
        AblationRow::new("2", true, true, false, false),
        AblationRow::new("3", true, false, true, false),
        AblationRow::new("4", true, true, true, false),
        AblationRow::new("5", true, true, true, true),
    ]
}

/// Parses a grid given as comma-separated row numbers of [`default_grid`]
/// (`"1,4,5"`) or `all`.
pub fn parse_grid(spec: &str) -> Result<Vec<AblationRow>> {
    let all = default_grid();
    if spec.trim() == "all" {
        return Ok(all);
    }
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            all.iter()
                .find(|r| r.name == s)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("unknown ablation row '{s}' (expected 1-5 or all)")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub prompt: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub image: Option<RgbImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowReport {
    pub row: AblationRow,
    pub pattern: String,
    pub aggregate: AggregateMetrics,
    pub failures: usize,
    pub runs: Vec<RunRecord>,
}

impl RowReport {
    pub fn failure_rate(&self) -> f64 {
        if self.runs.is_empty() {
            0.0
        } else {
            self.failures as f64 / self.runs.len() as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowReport>,
}

impl BenchmarkReport {
    pub fn failure_rate(&self) -> f64 {
        let total: usize = self.rows.iter().map(|r| r.runs.len()).sum();
        let failed: usize = self.rows.iter().map(|r| r.failures).sum();
        if total == 0 {
            0.0
        } else {
            failed as f64 / total as f64
        }
    }

    pub fn row(&self, name: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<4} {:<3} {:<4} {:<3} {:<3} | {:>7} {:>7} {:>6} {:>6} {:>6} {:>7} | {:>4} {:>4}",
            "row", "iou", "mask", "kl", "att", "spatial", "attr", "P", "R", "F1", "leak", "runs", "fail"
        );
        let mark = |b: bool| if b { "x" } else { "-" };
        for r in &self.rows {
            let (t, a) = (r.row.terms, r.aggregate);
            let _ = writeln!(
                out,
                "{:<4} {:<3} {:<4} {:<3} {:<3} | {:>7.3} {:>7.3} {:>6.3} {:>6.3} {:>6.3} {:>7.3} | {:>4} {:>4}",
                r.row.name,
                mark(t.iou),
                mark(t.mask),
                mark(t.kl),
                mark(t.att),
                a.spatial,
                a.attribute,
                a.precision,
                a.recall,
                a.f1,
                a.leakage,
                a.runs,
                r.failures
            );
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    /// Keep generated images in the run records.
    pub keep_images: bool,
}

/// Runs every `(row, prompt, seed)` combination in parallel and aggregates
/// per row. A failed generation is recorded and excluded from the means.
pub fn run_benchmark<D: AttentionDenoiser + Sync + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    suite: &Suite,
    seeds: &[u64],
    grid: &[AblationRow],
    base: &SamplerConfig,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    suite.validate()?;
    base.validate()?;
    if seeds.is_empty() || grid.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one seed and one row".into()));
    }
    let jobs: Vec<(usize, usize, u64)> = (0..grid.len())
        .flat_map(|r| (0..suite.entries.len()).flat_map(move |p| seeds.iter().map(move |&s| (r, p, s))))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(r, p, seed)| {
            let entry = &suite.entries[p];
            let mut cfg = base.clone();
            cfg.guidance.terms = grid[r].terms;
            let mut rec = RunRecord {
                prompt: entry.id.clone(),
                seed,
                metrics: None,
                error: None,
                image: None,
            };
            match generate(model, schedule, &entry.layout, seed, &cfg) {
                Ok(g) => {
                    rec.metrics = Some(score_run(&detect_objects(&g.image), &entry.layout));
                    if opts.keep_images {
                        rec.image = Some(g.image);
                    }
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect();

    let per_row = suite.entries.len() * seeds.len();
    let mut records = records.into_iter();
    let rows = grid
        .iter()
        .map(|row| {
            let runs: Vec<RunRecord> = records.by_ref().take(per_row).collect();
            let failures = runs.iter().filter(|r| r.metrics.is_none()).count();
            RowReport {
                row: row.clone(),
                pattern: row.pattern(),
                aggregate: aggregate(runs.iter().filter_map(|r| r.metrics.as_ref())),
                failures,
                runs,
            }
        })
        .collect();
    Ok(BenchmarkReport {
        suite: suite.name.clone(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionBundle, BundleGrad};
    use crate::guidance::AttentionProbe;
    use crate::image_io::LATENT_LEN;
    use crate::sampler::ScheduleInfo;

    /// Predicts zero noise; the image is the scaled initial latent.
    struct Silent;

    impl AttentionDenoiser for Silent {
        fn predict_noise(&self, _z: &[f64], _t: usize, _tokens: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![0.0; LATENT_LEN])
        }

        fn probe(&self, z: &[f64], _t: usize, tokens: &[usize]) -> Result<AttentionProbe> {
            let (hw, n) = (64, tokens.len());
            let bundle = AttentionBundle::new(8, 8, n, 1, vec![vec![1.0 / n as f64; hw * n]], vec![vec![1.0 / hw as f64; hw * hw]])?;
            let len = z.len();
            Ok(AttentionProbe::new(bundle, Box::new(move |_g: &BundleGrad| vec![0.0; len])))
        }
    }

    #[test]
    fn default_suite_is_seeded_and_valid() {
        let a = default_suite(DEFAULT_SUITE_SIZE, 0).unwrap();
        let b = default_suite(DEFAULT_SUITE_SIZE, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 50);
        let multi = a.entries.iter().filter(|e| e.layout.bindings.len() >= 2).count();
        assert!(multi >= 30, "{multi}");
        let back = Suite::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn grid_contains_iou_only_and_full_rows() {
        let g = default_grid();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0].terms, ActiveTerms { iou: true, mask: false, kl: false, att: false });
        assert_eq!(g[4].terms, ActiveTerms::ALL);
        assert_eq!(g[3].pattern(), "iou+mask+kl");
        assert_eq!(parse_grid("1, 5").unwrap(), vec![g[0].clone(), g[4].clone()]);
        assert_eq!(parse_grid("all").unwrap(), g);
        assert!(parse_grid("6").is_err());
    }

    #[test]
    fn suite_rejects_bad_documents() {
        assert!(Suite::from_json("{}").is_err());
        let mut s = default_suite(1, 0).unwrap();
        s.schema = 9;
        assert!(Suite::from_json(&s.to_json().unwrap()).is_err());
        s.schema = SUITE_SCHEMA;
        s.entries.clear();
        assert!(Suite::from_json(&s.to_json().unwrap()).is_err());
    }

    #[test]
    fn single_run_and_mean_aggregation() {
        let sched = NoiseSchedule::from_info(&ScheduleInfo::default()).unwrap();
        let suite = default_suite(2, 3).unwrap();
        let mut base = SamplerConfig::default();
        base.guidance.k_iters = 1;
        let one = Suite { entries: suite.entries[..1].to_vec(), ..suite.clone() };
        let rep = run_benchmark(&Silent, &sched, &one, &[0], &default_grid()[..1], &base, &Default::default()).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].runs.len(), 1);
        assert_eq!(rep.rows[0].aggregate.runs, 1);
        assert_eq!(Some(rep.rows[0].aggregate.f1), rep.rows[0].runs[0].metrics.map(|m| m.f1));

        let rep = run_benchmark(&Silent, &sched, &suite, &[0, 42], &parse_grid("1,5").unwrap(), &base, &Default::default())
            .unwrap();
        assert_eq!(rep.rows.len(), 2);
        for row in &rep.rows {
            assert_eq!(row.runs.len(), 4);
            let mean = row.runs.iter().map(|r| r.metrics.unwrap().f1).sum::<f64>() / 4.0;
            assert!((row.aggregate.f1 - mean).abs() < 1e-15);
        }
        assert!(rep.render_table().lines().count() == 3);
    }
}

//! Trains and evaluates a list of config variants on one train/val split and
//! lays the results out as a comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mutualforce_core::config::{IndicativeMask, Toggles};
use mutualforce_core::salc::threshold_filter;
use mutualforce_core::train::{evaluate_model, Trainer};
use mutualforce_core::{Config, Error, Frame, Model, ObjectClass, Result};

pub const TAU_SWEEP: [f64; 3] = [0.05, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: Config,
}

fn variant(name: &str, base: &Config, edit: impl FnOnce(&mut Config)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant { name: name.to_string(), config }
}

fn mark(on: bool) -> &'static str {
    if on { "x" } else { "-" }
}

/// Named variant lists: `modules`, `indicative` and `tau`.
pub fn preset(name: &str, base: &Config) -> Result<Vec<Variant>> {
    let toggles = |rr, rl, salc| Toggles { irb_rr: rr, irb_rl: rl, salc };
    let mask = |v_r, v_a, rcs| IndicativeMask { v_r, v_a, rcs };
    let v = match name {
        "modules" => [(false, false, false), (true, false, false), (false, true, false), (true, true, false), (false, false, true), (true, true, true)]
            .into_iter()
            .map(|(rr, rl, s)| {
                let n = format!("rr={} rl={} salc={}", mark(rr), mark(rl), mark(s));
                variant(&n, base, |c| c.toggles = toggles(rr, rl, s))
            })
            .collect(),
        "indicative" => {
            // The first row has no indicative input at all: IRB is removed.
            let mut rows = vec![variant("v_r=- v_a=- rcs=-", base, |c| c.toggles = toggles(false, false, true))];
            for (vr, va, rcs) in [(true, false, false), (false, true, false), (false, false, true), (true, true, false), (false, true, true), (true, false, true), (true, true, true)] {
                let n = format!("v_r={} v_a={} rcs={}", mark(vr), mark(va), mark(rcs));
                rows.push(variant(&n, base, |c| {
                    c.toggles = Toggles::default();
                    c.indicative = mask(vr, va, rcs);
                }));
            }
            rows
        }
        "tau" => TAU_SWEEP
            .iter()
            .map(|&t| variant(&format!("tau={t}"), base, |c| {
                c.toggles.salc = true;
                c.model.salc.tau = t;
            }))
            .collect(),
        other => return Err(Error::Config(format!("unknown ablation preset {other:?}; use modules, indicative or tau"))),
    };
    Ok(v)
}

/// Reads variants from JSON config files, named after the file stem.
pub fn variants_from_files(paths: &[impl AsRef<Path>]) -> Result<Vec<Variant>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(Variant { name, config: Config::load(p)? })
        })
        .collect()
}

/// Cells kept by the background filter, per frame, at each threshold of `taus`.
pub fn mask_cell_counts(model: &Model, frames: &[Frame], taus: &[f64]) -> Result<Vec<Vec<usize>>> {
    frames
        .iter()
        .map(|f| {
            let x = model.prepare(f)?;
            let scores = model
                .detect_with_heatmaps(&x)?
                .1
                .ok_or_else(|| Error::Config("mask counts need SALC enabled".into()))?;
            Ok(taus.iter().map(|&t| threshold_filter(&scores, t).into_iter().filter(|&k| k).count()).collect())
        })
        .collect()
}

/// True when every frame's counts never increase as the threshold grows.
pub fn counts_monotone(counts: &[Vec<usize>]) -> bool {
    counts.iter().all(|c| c.windows(2).all(|w| w[1] <= w[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    /// Mean over seeds of each class AP; `None` when undefined for every seed.
    pub ap: BTreeMap<String, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    /// mAP of each seed in order.
    pub per_seed: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub regions: BTreeMap<String, RegionRow>,
    /// Mean cells kept per val frame at this row's threshold (first seed), SALC rows only.
    pub mean_mask_cells: Option<f64>,
    /// Whether mask counts were monotone in the threshold on every val frame.
    pub mask_monotone: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean(v: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.into_iter().flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains every variant once per seed on `train`, evaluates on `val`.
pub fn run(
    variants: &[Variant],
    train: &[Frame],
    val: &[Frame],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &Model),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in variants {
        v.config.validate()?;
        let mut reports = Vec::new();
        let mut mask = None;
        for &seed in seeds {
            let mut cfg = v.config.clone();
            cfg.train.seed = seed;
            let mut trainer = Trainer::new(Model::new(&cfg, seed)?, train)?;
            trainer.run(|_| {})?;
            let model = trainer.model;
            progress(&v.name, seed, &model);
            reports.push(evaluate_model(&model, val)?);
            if mask.is_none() && cfg.toggles.salc {
                let mut taus: Vec<f64> = TAU_SWEEP.to_vec();
                if !taus.contains(&cfg.model.salc.tau) {
                    taus.push(cfg.model.salc.tau);
                }
                taus.sort_by(f64::total_cmp);
                let counts = mask_cell_counts(&model, val, &taus)?;
                let k = taus.iter().position(|&t| t == cfg.model.salc.tau).expect("tau present");
                let own = counts.iter().map(|c| c[k] as f64).sum::<f64>() / counts.len().max(1) as f64;
                mask = Some((own, counts_monotone(&counts)));
            }
        }
        let mut regions = BTreeMap::new();
        for region in ["all", "corridor"] {
            let ap = ObjectClass::ALL
                .iter()
                .map(|c| {
                    let vals = reports.iter().map(|r| r.regions[region].ap[c.name()]);
                    (c.name().to_string(), mean(vals))
                })
                .collect();
            let per_seed: Vec<Option<f64>> = reports.iter().map(|r| r.map(region)).collect();
            regions.insert(region.to_string(), RegionRow { ap, map: mean(per_seed.clone()), per_seed });
        }
        rows.push(AblationRow {
            name: v.name.clone(),
            regions,
            mean_mask_cells: mask.map(|m| m.0),
            mask_monotone: mask.map(|m| m.1),
        });
    }
    Ok(AblationReport { seeds: seeds.to_vec(), rows })
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Per-class AP and mAP in percent for both regions, one line per variant.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$} |", "variant");
        for region in ["all", "corridor"] {
            for c in ObjectClass::ALL {
                let _ = write!(s, " {:>7}", &c.name()[..3]);
            }
            let _ = write!(s, " {:>7} |", format!("{region:.4}"));
        }
        let _ = writeln!(s, " mask cells");
        for r in &self.rows {
            let _ = write!(s, "{:<width$} |", r.name);
            for region in ["all", "corridor"] {
                let rr = &r.regions[region];
                for c in ObjectClass::ALL {
                    let _ = write!(s, " {:>7}", cell(rr.ap[c.name()]));
                }
                let _ = write!(s, " {:>7} |", cell(rr.map));
            }
            let _ = writeln!(s, " {}", r.mean_mask_cells.map_or_else(|| "-".into(), |m| format!("{m:.1}")));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        for (file, text) in [("ablation.json", self.to_json()), ("ablation.txt", self.to_table())] {
            let p = dir.join(file);
            fs::write(&p, text).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        }
        Ok(())
    }
}

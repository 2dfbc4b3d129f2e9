use std::path::{Path, PathBuf};

use ptmap::harness::{run_filter, FilterRunResult, Method};
use ptmap::map::{validate_parent_sets, MapConfig, TriangularMap};
use ptmap::objective::FitReport;
use ptmap::wavy::{profile_lambda, WavyProfile};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Criterion, Experiment, LoadedConfig};
use crate::io::{self, header, num, opt_num, table};
use crate::{CliError, CommonArgs};

pub fn run(args: &CommonArgs, expected: Experiment) -> Result<(), CliError> {
    let loaded = LoadedConfig::load(&args.config)?;
    if loaded.config.experiment != expected {
        return Err(CliError::Config(format!(
            "config declares experiment {:?}, but the {:?} command was run",
            loaded.config.experiment, expected
        )));
    }
    match loaded.config.criterion {
        Criterion::Aicc => log::debug!("outer criterion: AICc"),
    }
    let out = match (&args.out, &loaded.config.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => loaded.resolve(o),
        (None, None) => return Err(CliError::Config("no output directory (use --out or output_dir)".into())),
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    let seeds: Vec<u64> = loaded.config.seeds.iter().map(|s| s + args.seed_offset).collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match expected {
        Experiment::Fit => cmd_fit(&loaded, &out),
        Experiment::Wavy => cmd_wavy(&loaded, &out, &seeds),
        Experiment::Lorenz63 => cmd_lorenz63(&loaded, &out, &seeds),
    })
}

#[derive(Serialize)]
struct ComponentReport<'a> {
    component: usize,
    #[serde(flatten)]
    report: &'a FitReport,
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    config_sha256: &'a str,
    seed: Option<u64>,
    components: Vec<ComponentReport<'a>>,
}

fn cmd_fit(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    let section = loaded.config.fit.as_ref().expect("validated");
    let ensemble = io::read_ensemble(&loaded.resolve(&section.input))?;
    let d = ensemble.dim();
    let parents = section
        .parent_sets
        .clone()
        .unwrap_or_else(|| (0..d).map(|j| (0..j).collect()).collect());
    validate_parent_sets(&parents, d).map_err(|e| CliError::Config(e.to_string()))?;
    if section.block_split > d {
        return Err(CliError::Config(format!("block_split {} exceeds dimension {d}", section.block_split)));
    }
    let config = MapConfig {
        component: loaded.config.component,
        block_split: section.block_split,
        fit_block_a: true,
    };
    let (mut map, reports) =
        TriangularMap::fit(&ensemble, &parents, &config, None).map_err(|e| CliError::Compute(e.to_string()))?;
    map.set_provenance("config_sha256", &loaded.sha256);
    map.set_provenance("seed", "none");
    let json = map.to_json().map_err(|e| CliError::Compute(e.to_string()))?;
    io::write(&out.join("map.json"), &(json + "\n"))?;

    let first = d - reports.len();
    let doc = ReportDocument {
        config_sha256: &loaded.sha256,
        seed: None,
        components: reports
            .iter()
            .enumerate()
            .map(|(k, report)| ComponentReport { component: first + k, report })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Compute(e.to_string()))?;
    io::write(&out.join("fit_reports.json"), &(text + "\n"))?;
    for (k, r) in reports.iter().enumerate() {
        log::info!(
            "component {}: nll {:.4} edf {:.3} aicc {:.4} log lambdas {:?}",
            first + k,
            r.nll,
            r.edf,
            r.aicc,
            r.log_lambdas
        );
    }
    Ok(())
}

fn cmd_wavy(loaded: &LoadedConfig, out: &Path, seeds: &[u64]) -> Result<(), CliError> {
    let base = loaded.config.wavy.clone().unwrap_or_default();
    let results: Vec<(u64, Result<WavyProfile, String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            (seed, profile_lambda(&cfg).map_err(|e| e.to_string()))
        })
        .collect();

    let mut summary = Vec::new();
    for (seed, res) in &results {
        let h = header(&loaded.sha256, Some(*seed), &[]);
        match res {
            Ok(p) => {
                write_wavy_seed(out, &h, *seed, p)?;
                let best = p.grid_argmin();
                summary.push(vec![
                    seed.to_string(),
                    opt_num(best.map(|r| r.log_lambda)),
                    opt_num(best.and_then(|r| r.aicc)),
                    opt_num(p.optimized_log_lambda),
                    opt_num(p.optimized_aicc),
                    String::new(),
                ]);
            }
            Err(e) => {
                log::error!("wavy seed {seed}: {e}");
                summary.push(vec![seed.to_string(), String::new(), String::new(), String::new(), String::new(), csv_text(e)]);
            }
        }
    }
    let text = table(
        &header(&loaded.sha256, None, &[("seeds", join(seeds))]),
        &["seed", "grid_argmin_log_lambda", "grid_min_aicc", "optimized_log_lambda", "optimized_aicc", "error"],
        summary,
    );
    io::write(&out.join("wavy_summary.csv"), &text)
}

fn write_wavy_seed(out: &Path, h: &str, seed: u64, p: &WavyProfile) -> Result<(), CliError> {
    let names: Vec<&str> = p.samples.names().iter().map(String::as_str).collect();
    io::write(
        &out.join(format!("wavy_seed{seed}_samples.csv")),
        &table(h, &names, io::matrix_rows(p.samples.data())),
    )?;
    let rows = p.rows.iter().map(|r| {
        vec![
            num(r.log_lambda),
            opt_num(r.nll),
            opt_num(r.edf),
            opt_num(r.edf_nonmonotone),
            opt_num(r.aicc),
            r.error.as_deref().map(csv_text).unwrap_or_default(),
        ]
    });
    io::write(
        &out.join(format!("wavy_seed{seed}_profile.csv")),
        &table(h, &["log_lambda", "nll", "edf", "edf_nonmonotone", "aicc", "error"], rows),
    )?;
    for s in &p.snapshots {
        let tag = num(s.log_lambda);
        let h = format!("{}# log_lambda={tag}\n", h);
        io::write(
            &out.join(format!("wavy_seed{seed}_pushforward_ll{tag}.csv")),
            &table(&h, &["z1", "z2"], io::matrix_rows(&s.pushforward)),
        )?;
        io::write(
            &out.join(format!("wavy_seed{seed}_pullback_ll{tag}.csv")),
            &table(&h, &names, io::matrix_rows(&s.pullback)),
        )?;
    }
    Ok(())
}

pub fn run_file_name(method: Method, n: usize, seed: u64) -> String {
    format!("lorenz63_{}_n{n}_seed{seed}.csv", method.name())
}

fn cmd_lorenz63(loaded: &LoadedConfig, out: &Path, seeds: &[u64]) -> Result<(), CliError> {
    let section = loaded.lorenz();
    let filter = loaded.filter_config();
    let mut jobs = Vec::new();
    for &method in &section.methods {
        for &n in &section.ensemble_sizes {
            for &seed in seeds {
                jobs.push((method, n, seed));
            }
        }
    }
    let results: Vec<((Method, usize, u64), Result<FilterRunResult, String>)> = jobs
        .par_iter()
        .map(|&(method, n, seed)| {
            let res = run_filter(&filter, n, seed, method).map_err(|e| e.to_string());
            match &res {
                Ok(r) => log::info!("{} n={n} seed={seed}: rmse {:.4} diverged {}", method.name(), r.mean_rmse, r.diverged),
                Err(e) => log::error!("{} n={n} seed={seed}: {e}", method.name()),
            }
            ((method, n, seed), res)
        })
        .collect();

    let mut per_seed = Vec::new();
    for ((method, n, seed), res) in &results {
        let h = header(&loaded.sha256, Some(*seed), &[("method", method.name().to_string()), ("n", n.to_string())]);
        let rows: Vec<Vec<String>> = match res {
            Ok(r) => r
                .steps
                .iter()
                .map(|s| {
                    vec![
                        s.step.to_string(),
                        num(s.rmse),
                        num(s.edf_fractions[0]),
                        num(s.edf_fractions[1]),
                        num(s.edf_fractions[2]),
                        u8::from(s.diverged).to_string(),
                    ]
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        let path: PathBuf = out.join(run_file_name(*method, *n, *seed));
        io::write(&path, &table(&h, &["step", "rmse", "edf_s2", "edf_s3", "edf_s4", "diverged"], rows))?;
        per_seed.push(match res {
            Ok(r) => (*method, *n, *seed, r.mean_rmse, r.diverged, r.failed_updates, String::new()),
            Err(e) => (*method, *n, *seed, f64::NAN, true, 0, csv_text(e)),
        });
    }

    let mut rows: Vec<Vec<String>> = per_seed
        .iter()
        .map(|(m, n, s, rmse, div, failed, err)| {
            vec![
                m.name().to_string(),
                n.to_string(),
                s.to_string(),
                num(*rmse),
                u8::from(*div).to_string(),
                failed.to_string(),
                err.clone(),
            ]
        })
        .collect();
    for &method in &section.methods {
        for &n in &section.ensemble_sizes {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter(|r| r.0 == method && r.1 == n)
                .map(|r| r.3)
                .collect();
            for (label, v) in aggregates(&vals) {
                rows.push(vec![method.name().to_string(), n.to_string(), label, num(v), String::new(), String::new(), String::new()]);
            }
        }
    }
    let h = header(&loaded.sha256, None, &[("seeds", join(seeds))]);
    io::write(
        &out.join("lorenz63_summary.csv"),
        &table(&h, &["method", "n", "seed", "mean_rmse", "diverged", "failed_updates", "error"], rows),
    )
}

/// Mean, median and mean of the best `k - 1` of `k` seeds. NaN counts as worst.
pub fn aggregates(vals: &[f64]) -> Vec<(String, f64)> {
    if vals.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = vals.iter().map(|v| if v.is_nan() { f64::INFINITY } else { *v }).collect();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let mean = vals.iter().sum::<f64>() / k as f64;
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let mut out = vec![("mean".to_string(), mean), ("median".to_string(), median)];
    if k >= 2 {
        let best = sorted[..k - 1].iter().sum::<f64>() / (k - 1) as f64;
        out.push((format!("best{}_mean", k - 1), best));
    }
    out
}

fn join(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Keeps messages on one comma-free line.
fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

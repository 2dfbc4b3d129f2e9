//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.
//!
//! Criterion 7 runs the reduced grid plus the ten-seed n = 50 band by
//! default; set `PTMAP_FULL_GRID=1` to also run n = 1000 for both methods.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use ptmap::component::{ComponentConfig, ComponentLayout};
use ptmap::harness::{run_filter, FilterConfig, FilterRunResult, Method};
use ptmap::map::{Ensemble, MapConfig, TriangularMap};
use ptmap::objective::DesignCache;
use ptmap::spline::{make_knots, make_penalty, KnotRule, SplineBasis};
use ptmap::wavy::{profile_lambda, sample_wavy, WavyConfig, WavyGenerator};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t <= budget, format!("runtime {:.1}s exceeds {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut unity, mut deriv, mut tail, mut null) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..50 {
        let n = r.random_range(30..2000);
        let xs: Vec<f64> = normals(&mut r, n).iter().map(|x| 2.0 * x + trial as f64 * 0.1).collect();
        let b = SplineBasis::new(make_knots(&xs, 3, KnotRule::Auto).map_err(|e| e.to_string())?);
        let (lo, hi) = (b.knots().first(), b.knots().last());
        let span = hi - lo;
        for _ in 0..100 {
            let x = r.random_range(lo - 0.5 * span..hi + 0.5 * span);
            if (lo..=hi).contains(&x) {
                let v = b.eval(x).unwrap();
                unity = unity.max((v.iter().sum::<f64>() - 1.0).abs());
            }
            let h = 1e-6;
            let d = b.eval_deriv(x).unwrap();
            let p = b.eval(x + h).unwrap();
            let m = b.eval(x - h).unwrap();
            for i in 0..b.num_basis() {
                let fd = (p[i] - m[i]) / (2.0 * h);
                deriv = deriv.max((d[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
        let coef: Vec<f64> = (0..b.num_basis()).map(|_| r.random_range(-2.0..2.0)).collect();
        let f = |x: f64| b.eval_spline(&coef, x).unwrap().0;
        for _ in 0..20 {
            let h = r.random_range(0.05..2.0);
            for edge in [lo - 3.0 * h, hi] {
                let second = f(edge) - 2.0 * f(edge + h) + f(edge + 2.0 * h);
                tail = tail.max(second.abs() / (1.0 + f(edge).abs()));
            }
        }
        let pen = make_penalty(b.num_basis(), 2).unwrap();
        // dyadic level and slope keep the test sequence exact, so the residual is the penalty's own
        let (a, s) = (r.random_range(-64i32..64) as f64 / 16.0, r.random_range(-64i32..64) as f64 / 16.0);
        let beta = DVector::from_fn(b.num_basis(), |i, _| a + s * i as f64);
        null = null.max((pen.gram_matrix() * &beta).amax());
    }
    check(unity <= 1e-12, format!("partition of unity error {unity:e}"))?;
    check(deriv <= 1e-6, format!("derivative relative error {deriv:e}"))?;
    check(tail <= 1e-10, format!("tail second difference {tail:e}"))?;
    check(null <= 1e-14, format!("penalty null space residual {null:e}"))?;
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("unity {unity:.1e}, derivative {deriv:.1e}, tails {tail:.1e}, null space {null:.1e}"))
}

/// Plain BFGS with finite-difference gradients and backtracking.
fn bfgs_oracle<F: Fn(&DVector<f64>) -> f64>(f: F, x0: DVector<f64>) -> DVector<f64> {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = central_gradient(&f, &x, 1e-6);
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..2000 {
        if g.norm() < 1e-9 {
            break;
        }
        let mut d = -(&h * &g);
        if d.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let xn = &x + t * &d;
            let fnew = f(&xn);
            if fnew <= fx + 1e-4 * t * g.dot(&d) {
                let gn = central_gradient(&f, &xn, 1e-6);
                let s = &xn - &x;
                let y = &gn - &g;
                let sy = s.dot(&y);
                if sy > 1e-14 {
                    let rho = 1.0 / sy;
                    let eye = DMatrix::<f64>::identity(n, n);
                    h = (&eye - rho * &s * y.transpose()) * &h * (&eye - rho * &y * s.transpose())
                        + rho * &s * s.transpose();
                }
                x = xn;
                fx = fnew;
                g = gn;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

fn random_feasible(cache: &DesignCache, r: &mut impl Rng) -> DVector<f64> {
    let start = cache.default_start();
    DVector::from_fn(start.len(), |k, _| {
        if k == 0 {
            r.random_range(-1.0..1.0)
        } else {
            start[k] * r.random_range(0.3..2.0)
        }
    })
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let data = wavy_data(100, 201);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let mut r = rng(202);
    let mut coef_err = 0.0f64;
    let mut value_err = 0.0f64;
    for ll in [[0.0, 0.0], [-3.0, 2.0], [4.0, -1.0]] {
        let prob = cache.penalized(&ll).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let raw = random_feasible(&cache, &mut r);
            let closed = prob.solve_non_closed_form(&raw);
            let oracle = bfgs_oracle(|b| prob.penalized_value(b, &raw).unwrap(), DVector::zeros(cache.num_non()));
            coef_err = coef_err.max((&closed - &oracle).amax());
            let reduced = prob.reduced_value(&raw).map_err(|e| e.to_string())?;
            let full = prob.penalized_value(&closed, &raw).map_err(|e| e.to_string())?;
            value_err = value_err.max((reduced - full).abs() / full.abs().max(1.0));
        }
    }
    check(coef_err <= 1e-6, format!("closed form vs joint minimizer {coef_err:e}"))?;
    check(value_err <= 1e-9, format!("reduced vs substituted objective {value_err:e}"))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("coefficients {coef_err:.1e}, reduced value {value_err:.1e}"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let data = wavy_data(100, 301);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let prob = cache.penalized(&[1.0, -0.5]).map_err(|e| e.to_string())?;
    let mut r = rng(302);
    let (mut g_err, mut h_err) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let raw = random_feasible(&cache, &mut r);
        let (_, g, h) = prob.reduced_derivatives(&raw).map_err(|e| e.to_string())?;
        let fd_g = central_gradient(|x| prob.reduced_value(x).unwrap(), &raw, 1e-6);
        g_err = g_err.max(vec_rel_err(&g, &fd_g));
        let step = 1e-6;
        let mut fd_h = DMatrix::zeros(raw.len(), raw.len());
        for k in 0..raw.len() {
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[k] += step;
            m[k] -= step;
            let gp = prob.reduced_derivatives(&p).unwrap().1;
            let gm = prob.reduced_derivatives(&m).unwrap().1;
            fd_h.set_column(k, &((gp - gm) / (2.0 * step)));
        }
        h_err = h_err.max(mat_rel_err(&h, &fd_h));
    }
    check(g_err <= 1e-6, format!("gradient relative error {g_err:e}"))?;
    check(h_err <= 1e-5, format!("hessian relative error {h_err:e}"))?;

    let mut ift_err = 0.0f64;
    let h = 1e-3;
    for ll in [[0.0, 0.0], [1.0, -1.0], [2.0, 3.0], [-2.0, 1.0], [3.0, 0.5]] {
        let base = cache.penalized(&ll).unwrap().outer_objective_with_gradient(None).map_err(|e| e.to_string())?;
        let grad = base.gradient.clone().ok_or("no outer gradient")?;
        for b in 0..2 {
            let (mut lp, mut lm) = (ll, ll);
            lp[b] += h;
            lm[b] -= h;
            let fp = cache.penalized(&lp).unwrap().outer_objective(Some(&base.inner.raw)).unwrap().aicc;
            let fm = cache.penalized(&lm).unwrap().outer_objective(Some(&base.inner.raw)).unwrap().aicc;
            let fd = (fp - fm) / (2.0 * h);
            // absolute floor for components that vanish at the optimum
            if (grad[b] - fd).abs() > 1e-6 {
                ift_err = ift_err.max(rel_err(grad[b], fd));
            }
        }
    }
    check(ift_err <= 1e-3, format!("implicit outer gradient vs refit {ift_err:e}"))?;
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!("gradient {g_err:.1e}, hessian {h_err:.1e}, outer gradient {ift_err:.1e}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let ens = sample_wavy(100, 0, &WavyGenerator::default()).map_err(|e| e.to_string())?;
    let cfg = ComponentConfig::default();
    let layout = ComponentLayout::build(ens.data(), 1, &[0], &cfg).map_err(|e| e.to_string())?;
    let cache = layout.design(ens.data(), cfg.ridge).map_err(|e| e.to_string())?;
    let sizes = cache.block_sizes();
    let mut details = Vec::new();
    for (ll, targets) in [(-12.0, sizes.iter().map(|&s| s as f64).collect::<Vec<_>>()), (12.0, vec![2.0; sizes.len()])] {
        let prob = cache.penalized(&vec![ll; sizes.len()]).map_err(|e| e.to_string())?;
        let sol = prob.fit_inner(None).map_err(|e| e.to_string())?;
        let edf = prob.implicit_system(&sol).map_err(|e| e.to_string())?.edf();
        for (b, (&got, &want)) in edf.blocks.iter().zip(&targets).enumerate() {
            check((got - want).abs() <= 0.1, format!("log lambda {ll}, block {b}: edf {got:.4}, expected {want}"))?;
        }
        details.push(format!("log lambda {ll}: {:?}", edf.blocks.iter().map(|e| (e * 1e3).round() / 1e3).collect::<Vec<_>>()));
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("blocks {sizes:?}; {}", details.join("; ")))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let p = profile_lambda(&WavyConfig::default()).map_err(|e| e.to_string())?;
    let rows: Vec<(f64, f64, f64, f64)> = p
        .rows
        .iter()
        .map(|r| match (r.nll, r.edf, r.aicc) {
            (Some(a), Some(b), Some(c)) => Ok((r.log_lambda, a, b, c)),
            _ => Err(format!("grid point {} failed: {:?}", r.log_lambda, r.error)),
        })
        .collect::<Result<_, _>>()?;
    for w in rows.windows(2) {
        // increasing log lambda: nll and edf must not decrease / increase respectively
        check(w[1].1 >= w[0].1 - 1e-6, format!("nll decreases from {} to {}", w[0].0, w[1].0))?;
        check(w[1].2 <= w[0].2 + 1e-6, format!("edf increases from {} to {}", w[0].0, w[1].0))?;
    }
    let best = p.grid_argmin().ok_or("no grid minimum")?;
    let (lo, hi) = (rows[0].0, rows[rows.len() - 1].0);
    check(best.log_lambda > lo && best.log_lambda < hi, format!("AICc minimum at grid edge {}", best.log_lambda))?;
    let opt = p.optimized_log_lambda.ok_or("outer optimizer failed")?;
    check((opt - best.log_lambda).abs() <= 0.5, format!("optimizer {opt} vs grid argmin {}", best.log_lambda))?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!("grid argmin {}, optimizer {opt:.3}", best.log_lambda))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let rho = 0.8;
    let data = gaussian_pair(10_000, rho, 601);
    let ens = Ensemble::unnamed(data.clone()).map_err(|e| e.to_string())?;
    let config = MapConfig { block_split: 1, ..Default::default() };
    let (map, _) = TriangularMap::fit(&ens, &[vec![], vec![0]], &config, None).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, 0.0f64);
    for y_star in [-1.0, 0.0, 1.0] {
        let out = map.conditional_update(&data, &[y_star]).map_err(|e| e.to_string())?;
        let xs: Vec<f64> = out.column(1).iter().copied().collect();
        let (m, v) = mean_var(&xs);
        let (dm, dv) = ((m - rho * y_star).abs(), (v - (1.0 - rho * rho)).abs());
        check(dm <= 0.05 && dv <= 0.05, format!("y* = {y_star}: mean {m:.4}, var {v:.4}"))?;
        worst = (worst.0.max(dm), worst.1.max(dv));
    }
    let full = TriangularMap::fit(&ens, &[vec![], vec![0]], &MapConfig::default(), None).map_err(|e| e.to_string())?.0;
    let z = full.pushforward_ensemble(&ens).map_err(|e| e.to_string())?;
    let corr = correlation(&z.column(0), &z.column(1));
    check(corr.abs() <= 0.05, format!("pushforward correlation {corr}"))?;
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!("mean error {:.3}, variance error {:.3}, pushforward corr {corr:.3}", worst.0, worst.1))
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().map(|x| if x.is_nan() { f64::INFINITY } else { *x }).collect();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

fn run_grid(cfg: &FilterConfig, sizes: &[usize], seeds: &[u64], methods: &[Method]) -> BTreeMap<(&'static str, usize), Vec<f64>> {
    let jobs: Vec<(Method, usize, u64)> = methods
        .iter()
        .flat_map(|&m| sizes.iter().flat_map(move |&n| seeds.iter().map(move |&s| (m, n, s))))
        .collect();
    let results: Vec<((Method, usize), f64)> = jobs
        .par_iter()
        .map(|&(m, n, s)| {
            let rmse = run_filter(cfg, n, s, m).map(|r: FilterRunResult| r.mean_rmse).unwrap_or(f64::NAN);
            ((m, n), rmse)
        })
        .collect();
    let mut out: BTreeMap<(&'static str, usize), Vec<f64>> = BTreeMap::new();
    for ((m, n), v) in results {
        out.entry((m.name(), n)).or_default().push(v);
    }
    out
}

fn monotone_and_beats(grid: &BTreeMap<(&'static str, usize), Vec<f64>>, sizes: &[usize]) -> Result<String, String> {
    let med: Vec<f64> = sizes.iter().map(|&n| median(&grid[&("transport", n)])).collect();
    let largest = *sizes.last().unwrap();
    let base = median(&grid[&("linear_baseline", largest)]);
    let text = format!("transport medians {:?} at n = {sizes:?}, baseline median {base:.4} at n = {largest}", med.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>());
    check(med.windows(2).all(|w| w[1] <= w[0]), format!("medians not non-increasing: {text}"))?;
    check(med[med.len() - 1] < base, format!("transport does not beat baseline: {text}"))?;
    Ok(text)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    let mut ci = FilterConfig::default();
    ci.model.steps = 200;
    let sizes = [50, 250];
    let grid = run_grid(&ci, &sizes, &[0, 1, 2], &[Method::Transport, Method::LinearBaseline]);
    match monotone_and_beats(&grid, &sizes) {
        Ok(t) => notes.push(format!("reduced grid: {t}")),
        Err(e) => failures.push(format!("reduced grid: {e}")),
    }
    if start.elapsed() > Duration::from_secs(900) {
        failures.push(format!("reduced grid took {:.0}s", start.elapsed().as_secs_f64()));
    }

    let full = FilterConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let band = run_grid(&full, &[50], &seeds, &[Method::Transport]);
    let mut v = band[&("transport", 50)].clone();
    v.sort_by(|a, b| f64::total_cmp(&if a.is_nan() { f64::INFINITY } else { *a }, &if b.is_nan() { f64::INFINITY } else { *b }));
    let best9 = v[..9].iter().sum::<f64>() / 9.0;
    let text = format!("n = 50 best-9 mean RMSE {best9:.4} (per seed {:?})", v.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>());
    if (0.39..=0.59).contains(&best9) {
        notes.push(text);
    } else {
        failures.push(format!("{text} outside [0.39, 0.59]"));
    }

    if std::env::var("PTMAP_FULL_GRID").is_ok_and(|v| v == "1") {
        let sizes = [50, 250, 1000];
        let grid = run_grid(&full, &sizes, &seeds, &[Method::Transport, Method::LinearBaseline]);
        match monotone_and_beats(&grid, &sizes) {
            Ok(t) => notes.push(format!("full grid: {t}")),
            Err(e) => failures.push(format!("full grid: {e}")),
        }
    } else {
        notes.push("full grid skipped (PTMAP_FULL_GRID=1 to run)".into());
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(failures.join("; "))
    }
}

fn ptmap_run(dir: &Path, cmd: &str, config: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).map_err(|e| e.to_string())?;
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_ptmap"))
        .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)))?;
    std::fs::read_dir(&out)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.map_err(|e| e.to_string())?;
            Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(|e| e.to_string())?))
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let data = gaussian_pair(300, 0.5, 801);
    let mut csv = String::from("a,b\n");
    for i in 0..data.nrows() {
        csv.push_str(&format!("{},{}\n", data[(i, 0)], data[(i, 1)]));
    }
    let cases = [
        ("fit", "experiment = \"fit\"\n[fit]\ninput = \"ens.csv\"\n"),
        ("wavy", "experiment = \"wavy\"\nseeds = [0, 1]\n"),
        ("lorenz63", "experiment = \"lorenz63\"\nseeds = [0, 1]\n[lorenz63]\nensemble_sizes = [50]\n[lorenz63.model]\nsteps = 20\n"),
    ];
    let mut files = 0;
    for (cmd, config) in cases {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            std::fs::write(dir.path().join("ens.csv"), &csv).map_err(|e| e.to_string())?;
            runs.push(ptmap_run(dir.path(), cmd, config)?);
        }
        check(!runs[0].is_empty() && runs[0].keys().eq(runs[1].keys()), format!("{cmd}: file sets differ"))?;
        for (name, bytes) in &runs[0] {
            check(bytes == &runs[1][name], format!("{cmd}: {name} differs between reruns"))?;
        }
        files += runs[0].len();
    }
    Ok(format!("{files} output files byte-identical across reruns"))
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let only: Option<u32> = std::env::var("PTMAP_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (k, f) in criteria {
        if only.is_some_and(|o| o != k) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {k}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {k}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

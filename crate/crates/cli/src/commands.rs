use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use markov_renewal::apps::{self, BranchingModel, BranchingOptions, LindleyOptions, PerpetuityModel, PerpetuityOptions, RootOptions};
use markov_renewal::family::Family;
use markov_renewal::kernel::{drift, lattice_type, default_snap_tol, stationary_drift, KernelForm, KernelStats, LatticeType, SemiMarkovKernel};
use markov_renewal::mre::{TailDecay, asymptotic_limit, class_report, dri_check, residual, right_edge_mean, solve_mre, GridFunction};
use markov_renewal::perron::{harmonic_transform, is_primitive, perron_pair, PerronData, DEFAULT_TOL};
use markov_renewal::renewal::{blackwell_check, lattice_blackwell_check, renewal_measure, stone_density, uv_transform, GridMeasure, RenewalOptions, UvDirection};
use markov_renewal::report::{fmt_num, write_table};
use markov_renewal::simulate::{cell_masses, cycle_estimators, empirical_renewal, sample_paths, EmpiricalOptions, Walker};
use markov_renewal::{Error, Exec};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::config::{slowest_decay, Config};
use crate::{CliError, Flags};

const DEFAULT_STEP: f64 = 0.01;

/// Output directory plus the summary being assembled.
pub struct Run<'a> {
    pub cfg: &'a Config,
    pub flags: &'a Flags,
    pub summary: Map<String, Value>,
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn lattice_json(l: &LatticeType) -> Value {
    match l {
        LatticeType::Arithmetic { span, shifts } => json!({"type": "arithmetic", "span": span, "shifts": shifts}),
        LatticeType::NonArithmetic { spread_out } => json!({"type": "nonarithmetic", "spread_out": spread_out}),
    }
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a Config, flags: &'a Flags) -> Self {
        Self { cfg, flags, summary: Map::new() }
    }

    fn out(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.flags.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(&path, e))?;
        }
        File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_summary(&self) -> Result<(), CliError> {
        let path: PathBuf = self.flags.out.join("summary.json");
        fs::create_dir_all(&self.flags.out).map_err(|e| CliError::io(&self.flags.out, e))?;
        let text = serde_json::to_string_pretty(&Value::Object(self.summary.clone())).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    fn step(&self) -> f64 {
        self.flags.step.or(self.cfg.spec.grid.step).unwrap_or(DEFAULT_STEP)
    }

    fn perron_tol(&self) -> f64 {
        self.flags.tol.or(self.cfg.spec.tolerances.perron).unwrap_or(DEFAULT_TOL)
    }

    fn seed(&self) -> u64 {
        self.flags.seed.or(self.cfg.spec.seeds.master).unwrap_or(1)
    }

    fn window(&self) -> Result<(f64, f64), CliError> {
        let w = self.flags.window.or(self.cfg.spec.grid.window.map(|[a, b]| (a, b)));
        let (a, b) = w.ok_or_else(|| self.cfg.error("grid", "a window is required (grid.window or --window)"))?;
        if !(b > a) {
            return Err(self.cfg.error("window", format!("window [{a}, {b}] is empty")));
        }
        Ok((a, b))
    }

    fn renewal_opts(&self) -> RenewalOptions {
        let mut o = RenewalOptions::default();
        if let Some(eps) = self.cfg.spec.tolerances.renewal {
            o.eps = eps;
        }
        o
    }

    fn kernel(&self) -> Result<SemiMarkovKernel, CliError> {
        self.cfg.kernel(self.step())
    }

    /// Kernel with Perron data; the weights must be quasi-stochastic.
    fn qs_kernel(&self) -> Result<(SemiMarkovKernel, PerronData), CliError> {
        let k = self.kernel()?;
        let pd = perron_pair(&k.weights, self.perron_tol()).map_err(|e| CliError::numerical("perron", e))?;
        if (pd.rho - 1.0).abs() > pd.tol_used {
            return Err(CliError::numerical("perron", Error::NotQuasiStochastic { rho: pd.rho, tol: pd.tol_used }));
        }
        Ok((k, pd))
    }

    /// Stochastic kernel: `P` as given, or the harmonic transform of `Q`.
    fn stochastic_kernel(&self) -> Result<(SemiMarkovKernel, PerronData), CliError> {
        let (k, pd) = self.qs_kernel()?;
        let kp = match k.form {
            KernelForm::P => k,
            KernelForm::Q => k.harmonic(&pd).map_err(|e| CliError::numerical("perron", e))?,
        };
        let pp = perron_pair(&kp.weights, self.perron_tol()).map_err(|e| CliError::numerical("perron", e))?;
        Ok((kp, pp))
    }

    fn measure(&self, k: &SemiMarkovKernel, pd: &PerronData) -> Result<(KernelStats, GridMeasure), CliError> {
        let stats = stationary_drift(k, pd).map_err(|e| CliError::numerical("kernel", e))?;
        let v = renewal_measure(k, pd, &stats, self.window()?, &self.renewal_opts()).map_err(|e| CliError::numerical("renewal", e))?;
        Ok((stats, v))
    }

    pub fn analyze(&mut self) -> Result<(), CliError> {
        let k = self.kernel()?;
        let pd = perron_pair(&k.weights, self.perron_tol()).map_err(|e| CliError::numerical("perron", e))?;
        let qs = (pd.rho - 1.0).abs() <= pd.tol_used;
        let mut s = json!({
            "rho": pd.rho,
            "u": vec_json(&pd.u),
            "v": vec_json(&pd.v),
            "pi": vec_json(&pd.pi),
            "quasi_stochastic": qs,
            "primitive": is_primitive(&k.weights),
            "iterations": pd.iterations,
        });
        if qs {
            let h = harmonic_transform(&k.weights, &pd).map_err(|e| CliError::numerical("perron", e))?;
            let (mu, means) = drift(&k, &pd).map_err(|e| CliError::numerical("kernel", e))?;
            let lattice = lattice_type(&k, &pd, default_snap_tol(&k));
            s["harmonic_transform"] = mat_json(&h.p);
            s["drift"] = json!(mu);
            s["mean_matrix"] = mat_json(&means);
            s["lattice"] = lattice_json(&lattice);
            let m = k.dim();
            let rows = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| vec![(i + 1).to_string(), (j + 1).to_string(), fmt_num(h.p[(i, j)])]);
            write_table(self.out("harmonic.csv")?, &["i", "j", "p"], rows).map_err(|e| CliError::numerical("perron", e))?;
        }
        self.summary.insert("analyze".into(), s);
        Ok(())
    }

    pub fn renewal(&mut self) -> Result<(), CliError> {
        let (k, pd) = self.qs_kernel()?;
        let (stats, v) = self.measure(&k, &pd)?;
        let u = uv_transform(&v, &pd, UvDirection::VToU);
        let io = |e| CliError::numerical("renewal", e);
        v.write_csv(self.out("renewal_V.csv")?).map_err(io)?;
        u.write_csv(self.out("renewal_U.csv")?).map_err(io)?;
        let (a, b) = v.window;
        let h = self.cfg.spec.renewal.h.unwrap_or(1.0);
        let m = k.dim();
        let n_slabs = ((b - a) / h + 1e-9).floor() as usize;
        let mut rows = Vec::new();
        for i in 0..m {
            for j in 0..m {
                for s in 0..n_slabs {
                    let t = a + s as f64 * h;
                    rows.push(vec![(i + 1).to_string(), (j + 1).to_string(), fmt_num(t), fmt_num(h), fmt_num(v.half_open(i, j, t, h))]);
                }
            }
        }
        write_table(self.out("renewal_slabs.csv")?, &["i", "j", "t", "h", "mass"], rows).map_err(io)?;
        let mut s = json!({
            "mu": stats.mu,
            "lattice": lattice_json(&stats.lattice),
            "terms": v.report.n_terms,
            "residual_bound": v.report.residual_bound,
            "left_escape": v.report.left_escape,
            "window": [a, b],
            "step": v.step,
        });
        let right: Vec<f64> = {
            let t0 = a + 0.75 * (b - a);
            let n = ((b - h - t0) / h).floor().max(0.0) as usize;
            (0..=n).map(|k| t0 + k as f64 * h).collect()
        };
        let bw = if stats.lattice.is_arithmetic() { lattice_blackwell_check(&v, &pd, &stats, &right) } else { blackwell_check(&v, &pd, &stats, h, &right) }
            .map_err(io)?;
        bw.write_csv(self.out("renewal_blackwell.csv")?).map_err(io)?;
        s["blackwell"] = json!({"h": bw.h, "max_rel_err": bw.max_rel_err(), "max_left_edge": bw.max_left_edge()});
        if stats.lattice.is_spread_out() {
            let smooth = self.cfg.spec.renewal.smooth.unwrap_or(0.5);
            let st = stone_density(&v, &pd, &stats, smooth, 0.05).map_err(io)?;
            let mut rows = Vec::new();
            for i in 0..m {
                for j in 0..m {
                    for (n, d) in st.densities[i * m + j].iter().enumerate() {
                        rows.push(vec![(i + 1).to_string(), (j + 1).to_string(), fmt_num(st.origin + (n as f64 + 0.5) * st.step), fmt_num(*d)]);
                    }
                }
            }
            write_table(self.out("renewal_stone.csv")?, &["i", "j", "x", "density"], rows).map_err(io)?;
            s["stone"] = json!({
                "limits": st.limits,
                "right_edge": st.right_edge,
                "max_right_rel_err": st.max_right_rel_err(),
                "max_left_edge": st.max_left_edge(),
                "min_density": st.min_density,
            });
        }
        self.summary.insert("renewal".into(), s);
        Ok(())
    }

    pub fn solve(&mut self) -> Result<(), CliError> {
        let (k, pd) = self.qs_kernel()?;
        let zf = self.cfg.z_functions(k.dim())?;
        let (stats, v) = self.measure(&k, &pd)?;
        let io = |e| CliError::numerical("mre", e);
        let z = GridFunction::from_fn(k.dim(), v.window, v.step, |i, t| zf[i].eval(t)).map_err(io)?.with_tails(TailDecay::Zero, slowest_decay(&zf));
        let exec = Exec::default();
        let sol = solve_mre(&k, &pd, &v, &z, exec).map_err(io)?;
        let res = residual(&sol.z_star, Some(&z), &k, exec).map_err(io)?;
        let limit = asymptotic_limit(&z, &pd, &stats);
        let edge = right_edge_mean(&sol.z_star, 0.05);
        let u: Vec<f64> = pd.u.iter().copied().collect();
        let dri = dri_check(&z, &u, 1.0);
        let class = class_report(&sol.z_star, &pd, 1e-6);
        sol.z_star.write_csv(self.out("solve_z_star.csv")?).map_err(io)?;
        res.write_csv(self.out("solve_residual.csv")?).map_err(io)?;
        let rel: Vec<f64> = limit.iter().zip(&edge).map(|(l, e)| if *l != 0.0 { ((e - l) / l).abs() } else { e.abs() }).collect();
        self.summary.insert(
            "solve".into(),
            json!({
                "mu": stats.mu,
                "limit": limit,
                "right_edge": edge,
                "right_edge_rel_err": rel,
                "residual": {"global": res.global, "per_state": res.per_state},
                "dri": {"dri": dri.dri, "sup_sum": dri.sup_sum, "spread_out_ok": dri.spread_out_ok, "window_only": dri.window_only},
                "class": {"left_edge_max": class.left_edge_max, "bounded": class.bounded, "sup_norm": class.sup_norm, "max_jump": class.max_jump},
            }),
        );
        Ok(())
    }

    pub fn simulate(&mut self) -> Result<(), CliError> {
        let (kp, pp) = self.stochastic_kernel()?;
        let sim = &self.cfg.spec.simulate;
        let m = kp.dim();
        let start = sim.start.unwrap_or(1);
        if start == 0 || start > m {
            return Err(self.cfg.error("start", format!("start state {start} is not in 1..={m}")));
        }
        let i0 = start - 1;
        let n_paths = self.flags.paths.or(sim.paths).unwrap_or(100);
        let steps = sim.steps.unwrap_or(1000);
        let seed = self.seed();
        let io = |e| CliError::numerical("simulate", e);
        let walker = Walker::new(&kp).map_err(io)?;
        let exec = Exec::default();
        let paths = sample_paths(&walker, i0, steps, seed, n_paths, exec);
        for (r, p) in paths.iter().take(sim.dump.unwrap_or(10)).enumerate() {
            p.write_csv(self.out(&format!("paths/path_{:04}.csv", r + 1))?).map_err(io)?;
        }
        let est = cycle_estimators(&paths, i0, m, None).map_err(io)?;
        est.write_csv(self.out("simulate_cycles.csv")?).map_err(io)?;
        let (mu, _) = drift(&kp, &pp).map_err(|e| CliError::numerical("kernel", e))?;
        let pi_i = pp.pi_relative_to(i0);
        let mut s = json!({
            "seed": seed,
            "paths": n_paths,
            "steps": steps,
            "start": start,
            "cycles": est.n_cycles,
            "cycle_drift": {"estimate": est.cycle_drift.mean, "std_error": est.cycle_drift.se, "theory": mu / pp.pi[i0]},
            "occupation": {
                "estimate": est.occupation.iter().map(|e| e.mean).collect::<Vec<_>>(),
                "std_error": est.occupation.iter().map(|e| e.se).collect::<Vec<_>>(),
                "theory": vec_json(&pi_i),
            },
            "drift": mu,
        });
        let window = self.flags.window.or(self.cfg.spec.grid.window.map(|[a, b]| (a, b)));
        if let (Some(window), true) = (window, mu > 0.0) {
            let opts = EmpiricalOptions {
                replicates: n_paths,
                master_seed: seed,
                exit_margin: (4.0 * kp.negative_reach()).max(kp.step),
                max_steps: 10_000_000,
                exec,
            };
            let (emp, _) = empirical_renewal(&walker, i0, window, kp.step, &opts);
            emp.write_csv(self.out("simulate_empirical.csv")?).map_err(io)?;
            let stats = stationary_drift(&kp, &pp).map_err(|e| CliError::numerical("kernel", e))?;
            let u = renewal_measure(&kp, &pp, &stats, window, &self.renewal_opts()).map_err(|e| CliError::numerical("renewal", e))?;
            let (mut within, mut total, mut max_z) = (0usize, 0usize, 0.0f64);
            for j in 0..m {
                let cells = cell_masses(u.get(i0, j), emp.start, emp.len());
                for (c, (mean, se)) in cells.iter().zip(emp.mean[j].iter().zip(&emp.se[j])) {
                    // one hit per replicate floors the standard error of empty cells
                    let z = (mean - c).abs() / se.max(1.0 / n_paths as f64);
                    total += 1;
                    within += usize::from(z <= 3.0);
                    max_z = max_z.max(z);
                }
            }
            s["empirical_renewal"] = json!({
                "cells": total,
                "fraction_within_3se": within as f64 / total.max(1) as f64,
                "censored": emp.censored,
                "max_abs_z": max_z,
            });
        }
        self.summary.insert("simulate".into(), s);
        Ok(())
    }

    pub fn lindley(&mut self) -> Result<(), CliError> {
        let (kp, _) = self.stochastic_kernel()?;
        let spec = self.cfg.spec.apps.lindley.clone().unwrap_or_default();
        let mut opts = LindleyOptions { seed: self.seed(), ..Default::default() };
        if let Some([a, b]) = spec.bracket {
            opts.bracket = (a, b);
        }
        if let Some(t) = spec.t_grid {
            opts.t_grid = t;
        }
        if let Some(n) = self.flags.paths.or(spec.paths) {
            opts.n_paths = n;
        }
        if let Some(tol) = self.flags.tol {
            opts.root = RootOptions { tol, ..opts.root };
        }
        let rep = apps::lindley_tail(&kp, &opts).map_err(|e| CliError::numerical("apps", e))?;
        rep.write_csv(self.out("lindley_tail.csv")?).map_err(|e| CliError::numerical("apps", e))?;
        let states: Vec<Value> = rep
            .states
            .iter()
            .map(|s| {
                json!({
                    "state": s.state + 1,
                    "slope": s.fit.map(|f| f.slope),
                    "slope_se": s.fit.map(|f| f.slope_se),
                    "prefactor": s.prefactor,
                    "ascent_probability": [s.ascent.mean, s.ascent.se],
                    "ladder_row_identity": [s.row_identity.mean, s.row_identity.se],
                    "tilt_identity": [s.tilt_identity.mean, s.tilt_identity.se],
                    "censored": s.censored,
                })
            })
            .collect();
        self.summary.insert(
            "lindley".into(),
            json!({
                "drift": rep.drift,
                "lambda": rep.lambda(),
                "rho_at_lambda": rep.root.map(|r| r.rho),
                "v": rep.tilted.as_ref().map(|t| vec_json(&t.perron.v)),
                "paths": opts.n_paths,
                "seed": opts.seed,
                "states": states,
                "ladder_classes": rep.ladder_classes.iter().map(|c| c.iter().map(|i| i + 1).collect::<Vec<_>>()).collect::<Vec<_>>(),
            }),
        );
        Ok(())
    }

    pub fn branching(&mut self) -> Result<(), CliError> {
        let spec = self.cfg.spec.apps.branching.clone().ok_or_else(|| CliError::validation(format!("{}:1: missing apps.branching section", self.cfg.path)))?;
        let m = spec.offspring.len();
        if m == 0 || spec.offspring.iter().any(|r| r.len() != m) || spec.lifetimes.len() != m {
            return Err(self.cfg.error("offspring", format!("branching needs an {m}x{m} offspring matrix and {m} lifetimes")));
        }
        let lifetimes = spec
            .lifetimes
            .iter()
            .enumerate()
            .map(|(i, s)| Family::parse(s).map_err(|e| self.cfg.error("lifetimes", format!("type {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        let model = BranchingModel { offspring: DMatrix::from_fn(m, m, |i, j| spec.offspring[i][j]), lifetimes };
        model.validate().map_err(|e| self.cfg.error("branching", e))?;
        let mut opts = BranchingOptions { age: spec.age, require_primitive: spec.require_primitive, renewal: self.renewal_opts(), ..Default::default() };
        if let Some([a, b]) = spec.bracket {
            opts.bracket = (a, b);
        }
        if let Some(h) = spec.horizon {
            opts.horizon = h;
        }
        if let Some(s) = self.flags.step.or(spec.step) {
            opts.step = s;
        }
        let io = |e| CliError::numerical("apps", e);
        let rep = apps::malthusian(&model, &opts).map_err(io)?;
        for c in &rep.counts {
            c.solution.write_csv(self.out(&format!("branching_counts_col{}.csv", c.column + 1))?).map_err(io)?;
        }
        if let Some(ages) = &rep.ages {
            for c in ages {
                c.solution.write_csv(self.out(&format!("branching_age_col{}.csv", c.column + 1))?).map_err(io)?;
            }
        }
        let cols = |cs: &[apps::branching::ColumnAsymptotics]| -> Value {
            json!(cs.iter().map(|c| json!({"column": c.column + 1, "limit": c.limit, "right_edge": c.right_edge, "max_rel_err": c.max_rel_err})).collect::<Vec<_>>())
        };
        self.summary.insert(
            "branching".into(),
            json!({
                "alpha": rep.alpha,
                "rho_at_alpha": rep.root.rho,
                "phi": rep.phi,
                "primitive": rep.primitive,
                "u": vec_json(&rep.perron.u),
                "v": vec_json(&rep.perron.v),
                "mu": rep.mu,
                "counts": cols(&rep.counts),
                "ages": rep.ages.as_deref().map(cols),
            }),
        );
        Ok(())
    }

    pub fn perpetuity(&mut self) -> Result<(), CliError> {
        let spec = self.cfg.spec.apps.perpetuity.clone().ok_or_else(|| CliError::validation(format!("{}:1: missing apps.perpetuity section", self.cfg.path)))?;
        let m = spec.values.len();
        if spec.p.len() != m || spec.p.iter().any(|r| r.len() != m) {
            return Err(self.cfg.error("values", format!("{m} values need an {m}x{m} matrix p")));
        }
        let b = Family::parse(&spec.b).map_err(|e| self.cfg.error("b", e))?;
        let model = PerpetuityModel { values: spec.values.clone(), p: DMatrix::from_fn(m, m, |i, j| spec.p[i][j]), b };
        model.chain().map_err(|e| self.cfg.error("perpetuity", e))?;
        let mut opts = PerpetuityOptions { seed: self.seed(), ..Default::default() };
        if let Some([a, b]) = spec.bracket {
            opts.bracket = (a, b);
        }
        if let Some(n) = self.flags.paths.or(spec.samples) {
            opts.n_samples = n;
        }
        if let Some(n) = spec.forward {
            opts.n_forward = n;
        }
        if let Some(n) = spec.burn_in {
            opts.burn_in = n;
        }
        if let Some(tol) = self.flags.tol {
            opts.root = RootOptions { tol, ..opts.root };
        }
        let io = |e| CliError::numerical("apps", e);
        let rep = apps::perpetuity(&model, &opts).map_err(io)?;
        rep.write_csv(self.out("perpetuity_tail.csv")?).map_err(io)?;
        rep.write_smoothed_csv(self.out("perpetuity_smoothed.csv")?).map_err(io)?;
        let fit = |f: &apps::perpetuity::TailFit| f.fit.map(|f| json!({"slope": f.slope, "slope_se": f.slope_se, "points": f.n}));
        self.summary.insert(
            "perpetuity".into(),
            json!({
                "alpha": rep.alpha,
                "rho_at_alpha": rep.rho_at_alpha,
                "pi": vec_json(&rep.chain.pi),
                "p_hat": mat_json(&rep.chain.p_hat),
                "e_log_a": rep.chain.e_log_a,
                "e_log_b_plus": rep.chain.e_log_b_plus,
                "samples": opts.n_samples,
                "seed": opts.seed,
                "tail_plus": fit(&rep.plus),
                "tail_minus": fit(&rep.minus),
                "ks_statistic": rep.ks.0,
                "ks_p_value": rep.ks.1,
            }),
        );
        Ok(())
    }
}


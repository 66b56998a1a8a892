//! Command implementations. Each command reads one `RunConfig`, drives the
//! solver crate, and leaves artifacts in the output directory:
//! `effective_params.json`, field and profile CSVs under `profiles/`, SVG
//! charts under `plots/`, and a machine-readable `report.json` for the full
//! validation pipeline.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use poroflow::boundary_layers::{row_speed_profile, solve_boundary_layers, StripeSet};
use poroflow::dns::{
    extract_macro_profile, extract_profile, rel_l2, run_dns, run_ensemble, LineProfile,
    ProfileLine,
};
use poroflow::linalg::SolveOptions;
use poroflow::macro_solver::{solve_coupled, CoupledSolution, InterfaceMode};
use poroflow::params::EffectiveParameters;

use crate::config::{MacroVariant, RunConfig};
use crate::plot::{line_chart, Series};

/// Hard ceiling on the per-cell continuity defect of any reported solution.
pub const DIV_TOL: f64 = 1e-9;

pub struct Dirs {
    pub out: PathBuf,
    pub profiles: PathBuf,
    pub plots: PathBuf,
}

pub fn ensure_dirs(out: &Path) -> Result<Dirs> {
    let dirs = Dirs {
        out: out.to_path_buf(),
        profiles: out.join("profiles"),
        plots: out.join("plots"),
    };
    for d in [&dirs.out, &dirs.profiles, &dirs.plots] {
        fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
    }
    Ok(dirs)
}

fn opts() -> SolveOptions {
    SolveOptions::default()
}

// ---------------------------------------------------------------------------
// effective-params

pub fn cmd_effective_params(cfg: &RunConfig) -> Result<()> {
    let dirs = ensure_dirs(&cfg.output.dir)?;
    let t0 = Instant::now();
    let doc = compute_params(cfg, &dirs)?;
    print_params(&doc);
    println!(
        "wrote {} in {:.1}s",
        dirs.out.join("effective_params.json").display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn compute_params(cfg: &RunConfig, dirs: &Dirs) -> Result<EffectiveParameters> {
    let d = &cfg.discretization;
    let set = solve_boundary_layers(
        &cfg.geometry.shape.to_shape(),
        d.stripe_half_height,
        d.cell_resolution,
        &opts(),
    )
    .context("effective-parameter computation failed")?;
    let doc = EffectiveParameters::from_set(&cfg.geometry.shape, cfg.geometry.epsilon, &set)?;
    doc.save(&dirs.out.join("effective_params.json"))?;
    write_stripe_decay(&dirs.profiles.join("stripe_decay.csv"), &set)?;
    Ok(doc)
}

/// Per-row speed magnitudes of the three stripe solutions, for eyeballing the
/// exponential decay below the interface.
fn write_stripe_decay(path: &Path, set: &StripeSet) -> Result<()> {
    let t = row_speed_profile(&set.t.grid, &set.t.field);
    let b1 = row_speed_profile(&set.beta[0].grid, &set.beta[0].field);
    let b2 = row_speed_profile(&set.beta[1].grid, &set.beta[1].field);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "y,t,beta1,beta2")?;
    for ((a, b), c) in t.iter().zip(&b1).zip(&b2) {
        writeln!(w, "{},{},{},{}", a.0, a.1, b.1, c.1)?;
    }
    Ok(())
}

fn print_params(doc: &EffectiveParameters) {
    let zero = |name: &str| -> &'static str {
        if doc.symmetry_zeros.iter().any(|z| z == name) {
            "  (symmetry zero)"
        } else {
            ""
        }
    };
    println!("porosity {:.6}", doc.porosity);
    println!("unit-cell permeability (resolution {}):", doc.resolution);
    println!("  k11 {:+.10e}", doc.k[0][0]);
    println!("  k12 {:+.10e}{}", doc.k[0][1], zero("k12"));
    println!("  k21 {:+.10e}{}", doc.k[1][0], zero("k21"));
    println!("  k22 {:+.10e}", doc.k[1][1]);
    println!(
        "interface constants (stripe half-height {}):",
        doc.bl.l
    );
    println!("  N1_bl      {:+.10e}", doc.bl.n1_bl);
    println!("  Ns_bl      {:+.10e}{}", doc.bl.ns_bl, zero("ns_bl"));
    println!("  M1_bl[0]   {:+.10e}", doc.bl.m1_bl[0]);
    println!("  M1_bl[1]   {:+.10e}{}", doc.bl.m1_bl[1], zero("m1_bl[1]"));
    println!(
        "  Mw_bl[0]   {:+.10e}{}",
        doc.bl.momega_bl[0],
        zero("momega_bl[0]")
    );
    println!("  Mw_bl[1]   {:+.10e}", doc.bl.momega_bl[1]);
    println!(
        "  plateau drift {:.2e}, decay rate {:.2}",
        doc.bl.max_plateau_drift, doc.bl.min_decay_gamma
    );
}

// ---------------------------------------------------------------------------
// run-macro

pub fn cmd_run_macro(cfg: &RunConfig) -> Result<()> {
    let dirs = ensure_dirs(&cfg.output.dir)?;
    let params_path = dirs.out.join("effective_params.json");
    if !params_path.exists() {
        bail!(
            "no effective parameters at {}; run `poroflow effective-params` first",
            params_path.display()
        );
    }
    let params = EffectiveParameters::load(&params_path)?;
    cfg.check_params(&params)?;
    let variant = cfg.selected_variant();
    let t0 = Instant::now();
    let (prob, interface_y) = cfg.macro_problem(&params, variant)?;
    let sol = solve_coupled(&prob, &opts())
        .with_context(|| format!("macroscale solve ({}) failed", variant.key()))?;
    check_divergence(&sol, variant.key())?;

    write_field_csv(&dirs.out.join("macro_ff.csv"), &sol.ff_grid, |w| {
        sol.ff.write_csv(&sol.ff_grid, w)
    })?;
    write_field_csv(&dirs.out.join("macro_pm.csv"), &sol.pm_grid, |w| {
        sol.pm.write_csv(&sol.pm_grid, w)
    })?;
    write_interface_csvs(&dirs.out, &sol)?;

    let dx = sol.ff_grid.dx;
    let net_flux: f64 = sol.trace.v_normal.iter().sum::<f64>() * dx;
    let abs_flux: f64 = sol.trace.v_normal.iter().map(|v| v.abs()).sum::<f64>() * dx;
    let mean_slip: f64 =
        sol.trace.u_slip.iter().sum::<f64>() / sol.trace.u_slip.len().max(1) as f64;
    let constants = match &sol.mode {
        InterfaceMode::New {
            epsilon,
            n1_bl,
            ns_bl,
            m1_bl,
        } => serde_json::json!({
            "epsilon": epsilon, "n1_bl": n1_bl, "ns_bl": ns_bl, "m1_bl": m1_bl,
        }),
        InterfaceMode::ClassicalBj { alpha } => serde_json::json!({
            "alpha": alpha, "sqrt_k_eps_tangential": params.sqrt_k_eps_tangential(),
        }),
    };
    let summary = serde_json::json!({
        "case": cfg.case.preset.to_string(),
        "variant": variant.key(),
        "interface_y": interface_y,
        "k_eps": params.k_eps,
        "constants": constants,
        "max_div_ff": sol.max_div_ff,
        "max_div_pm": sol.max_div_pm,
        "net_interface_flux": net_flux,
        "abs_interface_flux": abs_flux,
        "mean_slip": mean_slip,
        "seconds": t0.elapsed().as_secs_f64(),
        "files": {
            "ff": "macro_ff.csv",
            "pm": "macro_pm.csv",
            "interface_centers": "macro_interface_centers.csv",
            "interface_faces": "macro_interface_faces.csv",
        },
    });
    write_json(&dirs.out.join("macro_summary.json"), &summary)?;
    println!(
        "{} run at interface y = {interface_y}: net interface flux {net_flux:.3e}, \
         mean slip {mean_slip:.3e}, div (ff {:.1e}, pm {:.1e}), {:.1}s",
        variant.label(),
        sol.max_div_ff,
        sol.max_div_pm,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn check_divergence(sol: &CoupledSolution, what: &str) -> Result<()> {
    if !(sol.max_div_ff <= DIV_TOL && sol.max_div_pm <= DIV_TOL) {
        bail!(
            "{what}: continuity defect exceeds {DIV_TOL:.0e} (ff {:.2e}, pm {:.2e})",
            sol.max_div_ff,
            sol.max_div_pm
        );
    }
    Ok(())
}

fn write_field_csv<F>(path: &Path, _grid: &poroflow::grid::StaggeredGrid, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> poroflow::Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    Ok(())
}

fn write_interface_csvs(out: &Path, sol: &CoupledSolution) -> Result<()> {
    let tr = &sol.trace;
    let mut w = BufWriter::new(File::create(out.join("macro_interface_centers.csv"))?);
    writeln!(w, "x,v_normal,p_ff,p_pm")?;
    for (((x, v), pf), pp) in tr
        .x_centers
        .iter()
        .zip(&tr.v_normal)
        .zip(&tr.p_ff)
        .zip(&tr.p_pm)
    {
        writeln!(w, "{x},{v},{pf},{pp}")?;
    }
    let mut w = BufWriter::new(File::create(out.join("macro_interface_faces.csv"))?);
    writeln!(w, "x,u_slip,u_pm")?;
    for ((x, s), up) in tr.x_faces.iter().zip(&tr.u_slip).zip(&tr.u_pm) {
        writeln!(w, "{x},{s},{up}")?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// run-dns

pub fn cmd_run_dns(cfg: &RunConfig, members: usize) -> Result<()> {
    let dirs = ensure_dirs(&cfg.output.dir)?;
    let prob = cfg.dns_problem()?;
    let t0 = Instant::now();
    if members <= 1 {
        let sol = run_dns(&prob, &opts()).context("pore-scale run failed")?;
        if sol.max_div > DIV_TOL {
            bail!("pore-scale continuity defect {:.2e} exceeds {DIV_TOL:.0e}", sol.max_div);
        }
        write_field_csv(&dirs.out.join("dns_field.csv"), &sol.grid, |w| {
            sol.field.write_csv(&sol.grid, w)
        })?;
        let summary = serde_json::json!({
            "case": cfg.case.preset.to_string(),
            "members": 1,
            "resolution": cfg.discretization.dns_resolution,
            "cells": sol.grid.n_cells(),
            "solid_cells": sol.grid.solid_cell_count(),
            "max_div": sol.max_div,
            "seconds": t0.elapsed().as_secs_f64(),
            "files": { "field": "dns_field.csv" },
        });
        write_json(&dirs.out.join("dns_summary.json"), &summary)?;
        println!(
            "pore-scale run: {} cells ({} solid), div {:.1e}, {:.1}s",
            sol.grid.n_cells(),
            sol.grid.solid_cell_count(),
            sol.max_div,
            t0.elapsed().as_secs_f64()
        );
    } else {
        let (sols, avg) =
            run_ensemble(&prob, members, &opts()).context("pore-scale ensemble failed")?;
        let divs: Vec<f64> = sols.iter().map(|s| s.max_div).collect();
        if let Some(worst) = divs.iter().cloned().fold(None::<f64>, |a, d| {
            Some(a.map_or(d, |a| a.max(d)))
        }) {
            if worst > DIV_TOL {
                bail!("worst member continuity defect {worst:.2e} exceeds {DIV_TOL:.0e}");
            }
        }
        write_field_csv(&dirs.out.join("dns_mean.csv"), &avg.grid, |w| {
            avg.mean.write_csv(&avg.grid, w)
        })?;
        let mut w = BufWriter::new(File::create(dirs.out.join("dns_fluid_fraction.csv"))?);
        writeln!(w, "i,j,x,y,fraction")?;
        for j in 0..avg.grid.ny {
            for i in 0..avg.grid.nx {
                let (x, y) = avg.grid.cell_center(i, j);
                writeln!(w, "{i},{j},{x},{y},{}", avg.fluid_fraction[avg.grid.cell_index(i, j)])?;
            }
        }
        drop(w);
        let summary = serde_json::json!({
            "case": cfg.case.preset.to_string(),
            "members": members,
            "resolution": cfg.discretization.dns_resolution,
            "max_div": divs,
            "seconds": t0.elapsed().as_secs_f64(),
            "files": { "mean": "dns_mean.csv", "fluid_fraction": "dns_fluid_fraction.csv" },
        });
        write_json(&dirs.out.join("dns_summary.json"), &summary)?;
        println!(
            "pore-scale ensemble of {members}: worst div {:.1e}, {:.1}s",
            divs.iter().cloned().fold(0.0f64, f64::max),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub case: String,
    pub epsilon: f64,
    pub ensemble_members: usize,
    pub alpha: f64,
    /// Depth of the first inclusion row's top, exact and as placed on the grid.
    pub sigma_d_resolved: f64,
    pub sigma_d_snapped: f64,
    pub params_file: String,
    pub stages: BTreeMap<String, StageStats>,
    pub profiles: Vec<ProfileEntry>,
    /// Every solution kept its per-cell continuity defect under the ceiling.
    pub divergence_ok: bool,
    pub ok: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct StageStats {
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_div_ff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_div_pm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_max_div: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub name: String,
    /// Coordinate the samples run along ("x1" or "x2").
    pub axis: String,
    /// Fixed coordinate of the line.
    pub at: f64,
    pub title: String,
    pub csv: String,
    /// Component the headline chart shows (the others live in the CSV).
    pub plot_component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<String>,
    /// Per-variant profile errors against the ensemble mean.
    pub rel_l2: BTreeMap<String, RelL2>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelL2 {
    pub u: f64,
    pub v: f64,
    pub p: f64,
}

struct LineSpec {
    name: String,
    line: ProfileLine,
    axis: &'static str,
    at: f64,
    component: &'static str,
    n: usize,
}

/// The comparison cross-sections: tangential velocity along two vertical
/// lines, normal velocity along interface-parallel lines half a period above
/// and below the interface.
fn profile_lines(cfg: &RunConfig) -> Vec<LineSpec> {
    let eps = cfg.geometry.epsilon;
    let res = cfg.discretization.dns_resolution as f64;
    let n_vert = (2.0 * cfg.height() * res).round() as usize;
    let n_horiz = (cfg.length() * res).round() as usize;
    let station = |frac: f64| frac * cfg.length();
    vec![
        LineSpec {
            name: format!("x1_{:.2}", station(0.1)),
            line: ProfileLine::AlongX2 { x1: station(0.1) },
            axis: "x2",
            at: station(0.1),
            component: "u",
            n: n_vert,
        },
        LineSpec {
            name: format!("x1_{:.2}", station(0.2)),
            line: ProfileLine::AlongX2 { x1: station(0.2) },
            axis: "x2",
            at: station(0.2),
            component: "u",
            n: n_vert,
        },
        LineSpec {
            name: "x2_above".into(),
            line: ProfileLine::AlongX1 { x2: 0.5 * eps },
            axis: "x1",
            at: 0.5 * eps,
            component: "v",
            n: n_horiz,
        },
        LineSpec {
            name: "x2_below".into(),
            line: ProfileLine::AlongX1 { x2: -0.5 * eps },
            axis: "x1",
            at: -0.5 * eps,
            component: "v",
            n: n_horiz,
        },
    ]
}

fn series_labels() -> [&'static str; 4] {
    [
        "pore-scale ensemble",
        "homogenized",
        "Beavers-Joseph",
        "Beavers-Joseph, shifted",
    ]
}

/// The full comparison pipeline; returns the report it also writes to disk.
pub fn validate_run(cfg: &RunConfig) -> Result<Report> {
    let dirs = ensure_dirs(&cfg.output.dir)?;
    let case = cfg.case.preset.to_string();
    let mut stages = BTreeMap::new();
    let mut divergence_ok = true;

    let t0 = Instant::now();
    let (params, reused) = obtain_params(cfg, &dirs)?;
    stages.insert(
        "effective_params".to_string(),
        StageStats {
            seconds: t0.elapsed().as_secs_f64(),
            ..Default::default()
        },
    );
    println!(
        "[{case}] effective parameters {} in {:.1}s (k11 = {:.6e}, N1_bl = {:.6e})",
        if reused { "reused" } else { "computed" },
        t0.elapsed().as_secs_f64(),
        params.k[0][0],
        params.bl.n1_bl
    );

    let mut sols: Vec<CoupledSolution> = Vec::with_capacity(3);
    for variant in MacroVariant::ALL {
        let t = Instant::now();
        let (prob, interface_y) = cfg.macro_problem(&params, variant)?;
        let sol = solve_coupled(&prob, &opts())
            .with_context(|| format!("macroscale solve ({}) failed", variant.key()))?;
        divergence_ok &= sol.max_div_ff <= DIV_TOL && sol.max_div_pm <= DIV_TOL;
        println!(
            "[{case}] {} at y = {interface_y}: {:.1}s (div ff {:.1e}, pm {:.1e})",
            variant.label(),
            t.elapsed().as_secs_f64(),
            sol.max_div_ff,
            sol.max_div_pm
        );
        stages.insert(
            format!("macro_{}", variant.key()),
            StageStats {
                seconds: t.elapsed().as_secs_f64(),
                max_div_ff: Some(sol.max_div_ff),
                max_div_pm: Some(sol.max_div_pm),
                member_max_div: None,
            },
        );
        sols.push(sol);
    }

    let t = Instant::now();
    let base = cfg.dns_problem()?;
    let (members, avg) = run_ensemble(&base, cfg.ensemble_members, &opts())
        .context("pore-scale ensemble failed")?;
    let member_divs: Vec<f64> = members.iter().map(|m| m.max_div).collect();
    divergence_ok &= member_divs.iter().all(|&d| d <= DIV_TOL);
    println!(
        "[{case}] pore-scale ensemble of {}: {:.1}s (worst div {:.1e})",
        cfg.ensemble_members,
        t.elapsed().as_secs_f64(),
        member_divs.iter().cloned().fold(0.0f64, f64::max)
    );
    stages.insert(
        "dns_ensemble".to_string(),
        StageStats {
            seconds: t.elapsed().as_secs_f64(),
            member_max_div: Some(member_divs),
            ..Default::default()
        },
    );

    let mut profiles = Vec::new();
    for spec in profile_lines(cfg) {
        let dns_prof = extract_profile(&avg.grid, &avg.mean, spec.line, spec.n);
        let macro_profs: Vec<LineProfile> = sols
            .iter()
            .map(|s| extract_macro_profile(s, spec.line, spec.n))
            .collect();
        let csv_rel = format!("profiles/{case}_{}.csv", spec.name);
        write_profile_csv(&dirs.out.join(&csv_rel), &dns_prof, &macro_profs)?;

        let mut table = BTreeMap::new();
        for (variant, prof) in MacroVariant::ALL.iter().zip(&macro_profs) {
            table.insert(
                variant.key().to_string(),
                RelL2 {
                    u: rel_l2(&prof.u, &dns_prof.u),
                    v: rel_l2(&prof.v, &dns_prof.v),
                    p: rel_l2(&prof.p, &dns_prof.p),
                },
            );
        }

        let title = format!("{case}: {} along {} at {} = {:.3}", spec.component, spec.axis,
            if spec.axis == "x2" { "x1" } else { "x2" }, spec.at);
        let plot = if cfg.output.plots {
            let rel = format!("plots/{case}_{}_{}.svg", spec.name, spec.component);
            let pick = |p: &LineProfile| -> Vec<f64> {
                match spec.component {
                    "u" => p.u.clone(),
                    "v" => p.v.clone(),
                    _ => p.p.clone(),
                }
            };
            let labels = series_labels();
            let mut series = vec![Series {
                label: labels[0].to_string(),
                y: pick(&dns_prof),
            }];
            for (k, prof) in macro_profs.iter().enumerate() {
                series.push(Series {
                    label: labels[k + 1].to_string(),
                    y: pick(prof),
                });
            }
            line_chart(
                &dirs.out.join(&rel),
                &title,
                spec.axis,
                spec.component,
                &dns_prof.s,
                &series,
            )?;
            Some(rel)
        } else {
            None
        };

        profiles.push(ProfileEntry {
            name: spec.name,
            axis: spec.axis.to_string(),
            at: spec.at,
            title,
            csv: csv_rel,
            plot_component: spec.component.to_string(),
            plot,
            rel_l2: table,
        });
    }

    let (sigma_d_resolved, sigma_d_snapped) =
        cfg.sigma_d(cfg.discretization.macro_resolution)?;
    let report = Report {
        case,
        epsilon: cfg.geometry.epsilon,
        ensemble_members: cfg.ensemble_members,
        alpha: cfg.interface.alpha,
        sigma_d_resolved,
        sigma_d_snapped,
        params_file: "effective_params.json".to_string(),
        stages,
        profiles,
        divergence_ok,
        ok: divergence_ok,
    };
    let mut w = BufWriter::new(File::create(dirs.out.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    Ok(report)
}

fn obtain_params(cfg: &RunConfig, dirs: &Dirs) -> Result<(EffectiveParameters, bool)> {
    let path = dirs.out.join("effective_params.json");
    if path.exists() {
        if let Ok(doc) = EffectiveParameters::load(&path) {
            if cfg.check_params(&doc).is_ok()
                && doc.resolution == cfg.discretization.cell_resolution
                && doc.bl.l == cfg.discretization.stripe_half_height
            {
                return Ok((doc, true));
            }
        }
        println!(
            "existing {} does not match this configuration; recomputing",
            path.display()
        );
    }
    Ok((compute_params(cfg, dirs)?, false))
}

fn write_profile_csv(path: &Path, dns: &LineProfile, macros: &[LineProfile]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("s,dns_u,dns_v,dns_p");
    for variant in MacroVariant::ALL {
        let k = variant.key();
        header.push_str(&format!(",{k}_u,{k}_v,{k}_p"));
    }
    writeln!(w, "{header}")?;
    for i in 0..dns.s.len() {
        let mut row = format!("{},{},{},{}", dns.s[i], dns.u[i], dns.v[i], dns.p[i]);
        for prof in macros {
            row.push_str(&format!(",{},{},{}", prof.u[i], prof.v[i], prof.p[i]));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<()> {
    let report = validate_run(cfg)?;
    println!();
    println!(
        "{:<14} {:<4} {:>12} {:>12} {:>12}",
        "profile", "", "homogenized", "bj_sigma0", "bj_sigmad"
    );
    for entry in &report.profiles {
        for comp in ["u", "v", "p"] {
            let cell = |key: &str| -> f64 {
                let r = &entry.rel_l2[key];
                match comp {
                    "u" => r.u,
                    "v" => r.v,
                    _ => r.p,
                }
            };
            println!(
                "{:<14} {:<4} {:>12.4e} {:>12.4e} {:>12.4e}",
                entry.name,
                comp,
                cell("new"),
                cell("bj_sigma0"),
                cell("bj_sigmad")
            );
        }
    }
    println!();
    if !report.ok {
        bail!("hard invariants failed; see report.json");
    }
    println!(
        "all stages completed; artifacts in {}",
        cfg.output.dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plot

/// Re-renders the charts of an earlier run from its CSV artifacts.
pub fn cmd_plot(out: &Path) -> Result<usize> {
    let report_path = out.join("report.json");
    let mut rendered = 0;
    if report_path.exists() {
        let report: Report = serde_json::from_reader(BufReader::new(
            File::open(&report_path).with_context(|| format!("cannot open {}", report_path.display()))?,
        ))
        .context("malformed report.json")?;
        fs::create_dir_all(out.join("plots"))?;
        for entry in &report.profiles {
            let (headers, columns) = read_csv(&out.join(&entry.csv))?;
            let comp = entry.plot_component.as_str();
            let x = &columns[0];
            let labels = series_labels();
            let keys = ["dns", "new", "bj_sigma0", "bj_sigmad"];
            let mut series = Vec::new();
            for (key, label) in keys.iter().zip(labels) {
                let col = headers
                    .iter()
                    .position(|h| h == &format!("{key}_{comp}"))
                    .with_context(|| format!("column {key}_{comp} missing in {}", entry.csv))?;
                series.push(Series {
                    label: label.to_string(),
                    y: columns[col].clone(),
                });
            }
            let rel = entry
                .plot
                .clone()
                .unwrap_or_else(|| format!("plots/{}_{}_{comp}.svg", report.case, entry.name));
            line_chart(&out.join(&rel), &entry.title, &entry.axis, comp, x, &series)?;
            rendered += 1;
        }
    }
    let decay = out.join("profiles/stripe_decay.csv");
    if decay.exists() {
        let (headers, columns) = read_csv(&decay)?;
        let series: Vec<Series> = headers
            .iter()
            .zip(&columns)
            .skip(1)
            .map(|(h, c)| Series {
                label: h.clone(),
                y: c.clone(),
            })
            .collect();
        fs::create_dir_all(out.join("plots"))?;
        line_chart(
            &out.join("plots/stripe_decay.svg"),
            "stripe velocity decay",
            "y",
            "row rms speed",
            &columns[0],
            &series,
        )?;
        rendered += 1;
    }
    if rendered == 0 {
        bail!(
            "nothing to plot in {}; run validate or effective-params first",
            out.display()
        );
    }
    Ok(rendered)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let headers: Vec<String> = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != headers.len() {
            bail!("{}:{} has {} fields, expected {}", path.display(), ln + 2, fields.len(), headers.len());
        }
        for (col, field) in columns.iter_mut().zip(fields) {
            col.push(
                field
                    .trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number {field:?}", path.display(), ln + 2))?,
            );
        }
    }
    Ok((headers, columns))
}

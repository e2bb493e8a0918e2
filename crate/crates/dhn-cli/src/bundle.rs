//! Result bundle export: metrics.json, states.csv, inputs.csv, loops.csv,
//! and a run manifest, all under a directory named by timestamp and config
//! hash so identical configs land in recognizably related places.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dhn_core::scenario::{Instance, Scenario};
use dhn_core::simulation::{ClosedLoopRecord, Metrics};

pub fn write_bundle(
    out: &Path,
    scenario: &Scenario,
    inst: &Instance,
    record: &ClosedLoopRecord,
    metrics: &Metrics,
) -> anyhow::Result<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
    let dir = out.join(format!(
        "{stamp}-{}-{}",
        &scenario.manifest_hash[..8],
        record.name.to_lowercase()
    ));
    std::fs::create_dir_all(&dir)?;

    write_metrics(&dir.join("metrics.json"), record, metrics)?;
    write_states(&dir.join("states.csv"), inst, record)?;
    write_inputs(&dir.join("inputs.csv"), inst, record)?;
    write_loops(&dir.join("loops.csv"), inst, record)?;
    write_manifest(&dir.join("manifest.json"), scenario, record)?;
    Ok(dir)
}

fn write_metrics(path: &Path, record: &ClosedLoopRecord, m: &Metrics) -> anyhow::Result<()> {
    let json = serde_json::json!({
        "controller": record.name,
        "steps": m.steps,
        "total_cost": m.total_cost,
        "atv_degc": m.atv,
        "dv_percent": m.dv,
        "dv_undefined": m.dv_undefined,
        "solve_median_s": m.solve_median_s,
        "solve_p90_s": m.solve_p90_s,
        "fallbacks": m.fallbacks,
        "events": record.events,
    });
    Ok(std::fs::write(path, serde_json::to_string_pretty(&json)?)?)
}

/// One row per step: the controller-mesh state in °C, labeled per node.
fn write_states(path: &Path, inst: &Instance, record: &ClosedLoopRecord) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "t")?;
    for label in &inst.tg.labels {
        write!(w, ",{label}")?;
    }
    writeln!(w)?;
    let t_a = record.t_ambient;
    for step in &record.steps {
        write!(w, "{}", step.t)?;
        for v in step.x.iter() {
            write!(w, ",{:.6}", v + t_a)?;
        }
        writeln!(w)?;
    }
    Ok(w.flush()?)
}

/// Applied inputs: reduced loop flows (L/s) and exchanger heat rates (kW).
fn write_inputs(path: &Path, inst: &Instance, record: &ClosedLoopRecord) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "t")?;
    for i in 0..inst.hyd.loops.m_r() {
        write!(w, ",q_r{i}_lps")?;
    }
    for ex in &inst.layout.exchangers {
        write!(w, ",w_{}_kw", ex.name)?;
    }
    writeln!(w, ",price,cost")?;
    for step in &record.steps {
        write!(w, "{}", step.t)?;
        for q in step.q_r.iter() {
            write!(w, ",{:.6}", q * 1e3)?;
        }
        for v in step.w.iter() {
            write!(w, ",{:.4}", v * 1e-3)?;
        }
        writeln!(w, ",{:.6},{:.6}", step.price, step.cost)?;
    }
    Ok(w.flush()?)
}

/// Hydraulic residuals: per step and reduced loop, the feasibility margin
/// q' Z_i q - rhs_i (nonpositive when the applied flow is admissible).
fn write_loops(path: &Path, inst: &Instance, record: &ClosedLoopRecord) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,loop,margin_pa")?;
    for step in &record.steps {
        let margins = inst.hyd.loop_feasibility(&step.q_r)?;
        for (i, m) in margins.iter().enumerate() {
            writeln!(w, "{},{},{:.6e}", step.t, i, m)?;
        }
    }
    Ok(w.flush()?)
}

fn write_manifest(path: &Path, scenario: &Scenario, record: &ClosedLoopRecord) -> anyhow::Result<()> {
    let json = serde_json::json!({
        "scenario": scenario.name,
        "config_hash": scenario.manifest_hash,
        "controller": record.name,
        "tau_s": scenario.tau,
        "steps": record.steps.len(),
        "beta": scenario.beta,
        "horizon": scenario.ocp.horizon,
        "toolkit_version": env!("CARGO_PKG_VERSION"),
        "warnings": scenario.warnings,
    });
    Ok(std::fs::write(path, serde_json::to_string_pretty(&json)?)?)
}

/// Long-format table for external plotting: step,series,key,value.
pub fn write_long_format(path: &Path, record: &ClosedLoopRecord) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,series,key,value")?;
    for step in &record.steps {
        for (k, (col, name)) in record.consumers.iter().enumerate() {
            writeln!(w, "{},temp_c,{name},{:.4}", step.t, step.consumer_temps[k])?;
            writeln!(w, "{},demand_kw,{name},{:.4}", step.t, step.demand[*col] * 1e-3)?;
            writeln!(w, "{},delivered_kw,{name},{:.4}", step.t, step.delivered[*col] * 1e-3)?;
            writeln!(w, "{},flow_lps,{name},{:.5}", step.t, step.q_consumer[*col] * 1e3)?;
        }
        writeln!(w, "{},power_kw,producer,{:.4}", step.t, step.producer_power * 1e-3)?;
        writeln!(w, "{},price,grid,{:.6}", step.t, step.price)?;
        writeln!(w, "{},cost,run,{:.6}", step.t, step.cost)?;
        if let Some(info) = &step.solve {
            writeln!(w, "{},solve_s,{},{:.4}", step.t, record.name, info.wall.as_secs_f64())?;
        }
    }
    Ok(w.flush()?)
}

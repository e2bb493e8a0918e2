fn main() -> dhn_core::Result<()> {
    env_logger::init();
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let iters: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let mut s = dhn_core::scenario::build_aroma()?;
    s.ocp.horizon = n;
    s.ocp.control_horizon = n;
    if let Ok(f) = std::env::var("PMAX_FACTOR") {
        s.ocp.p_max *= f.parse::<f64>().unwrap();
    }
    if let Ok(f) = std::env::var("QMAX_FACTOR") {
        s.ocp.q_r_max_lps *= f.parse::<f64>().unwrap();
    }
    if let Ok(f) = std::env::var("RSLACK") {
        s.ocp.r_slack = f.parse::<f64>().unwrap();
    }
    let inst = s.instance()?;
    let v = std::env::args().nth(3).unwrap_or_else(|| "sp".into());
    let mut cfg = dhn_core::controllers::ControllerConfig::for_variant(
        dhn_core::controllers::Variant::parse(&v)?,
    );
    cfg.limits.max_iter = iters;
    let mut c = dhn_core::controllers::make_controller(&cfg, &s, &inst)?;
    let a = c.step(&inst.x0, 0)?;
    let i = a.solve.unwrap();
    println!("N={n}: {:?} in {} iters, viol {:.3e}, fallback {}", i.status, i.iterations, i.max_violation, i.fallback);
    Ok(())
}

fn main() -> dhn_core::Result<()> {
    let s = dhn_core::scenario::build_aroma()?;
    let inst = s.instance()?;
    let labels = inst.tg.labels.clone();
    println!("n={} node 92 = {}", labels.len(), labels[92]);
    for (i, l) in labels.iter().enumerate().skip(85).take(15) {
        println!("{i}: {l}");
    }
    Ok(())
}

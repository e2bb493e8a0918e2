//! Regenerate the reference scenario files under data/aroma.

fn main() -> dhn_core::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/aroma".to_string());
    dhn_core::scenario::write_aroma(&dir)?;
    println!("wrote scenario files to {dir}");
    Ok(())
}

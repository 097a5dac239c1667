//! Renders the caustic of a few printed filaments and checks that every
//! emitted watt is either deposited on the sensor or reported as lost.
//!
//!     cargo run --release --example render_caustic [out_dir]

use caustic_recon::heightfield::handpicked_lines;
use caustic_recon::io::write_png;
use caustic_recon::render::{render_with, RenderOptions};
use caustic_recon::{HeightField, SceneParams};

fn main() -> caustic_recon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out".into());
    let scene = SceneParams { n_l: 200_000, ..SceneParams::desk() };
    let field = HeightField::from_lines(64, scene.substrate_extent, scene.base_thickness, &handpicked_lines())?;
    println!("field: {} lines, tallest {:.2} mm", handpicked_lines().len(), field.max_height() * 1e3);

    let (img, stats) = render_with(&field, &scene, 7, RenderOptions { deterministic: true })?;
    for (c, nm) in scene.wavelengths.iter().enumerate() {
        println!(
            "{nm} nm: emitted {:.4e} W, deposited {:.4e}, off-sensor {:.2e}, TIR {:.2e}, balance error {:.1e}",
            stats.emitted[c],
            stats.deposited[c],
            stats.offscreen[c],
            stats.tir[c],
            stats.balance_error(c)
        );
    }
    let peak = img.values().iter().cloned().fold(0.0, f64::max);
    println!("peak irradiance {peak:.2} W/m^2 (flat glass gives about 1)");

    let path = std::path::Path::new(&out).join("caustic.png");
    write_png(&img.to_grid(), -2.0, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

//! NSFC1 grids, PNG export and network checkpoints.
//!
//!     cargo run --example file_formats [out_dir]

use std::path::Path;

use caustic_recon::io::{read_png, write_png, Grid};
use caustic_recon::neural::{load_network, save_network, Network, NetworkConfig};

fn main() -> caustic_recon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/formats".into());
    let out = Path::new(&out);

    let ramp: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 64) as f32 / 63.0).collect();
    let grid = Grid::new(3, 8, 8, ramp)?;
    grid.write(out.join("ramp.nsfc"))?;
    let back = Grid::read(out.join("ramp.nsfc"))?;
    println!("NSFC1 round trip exact: {}", back == grid);

    write_png(&grid, 0.0, out.join("ramp.png"))?;
    let png = read_png(out.join("ramp.png"), 0.0)?;
    let err = png.data.iter().zip(&grid.data).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    println!("PNG round trip max error {err:.4} (8-bit)");
    grid.write_csv(out.join("ramp.csv"))?;

    let net = Network::updater(NetworkConfig::desk_updater(), 3, 4)?;
    save_network(&net, 4, 0, out.join("updater.nsfw"))?;
    let (loaded, header) = load_network(out.join("updater.nsfw"))?;
    println!("checkpoint: {:?} with {} parameters, seed {}", header.role, header.param_count, header.seed);
    // weights are stored as f32
    let rounded: Vec<f64> = net.params().iter().map(|&w| w as f32 as f64).collect();
    println!("weights match after f32 rounding: {}", loaded.params() == rounded.as_slice());
    Ok(())
}

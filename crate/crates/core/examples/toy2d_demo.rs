//! The 2D phenomenon: driving intersection points onto their targets
//! leaves the surface far from the one that produced them.
//!
//!     cargo run --release --example toy2d_demo [out_dir]

use caustic_recon::toy2d::{run_demo, write_demo_plots};

fn main() -> caustic_recon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/toy2d".into());
    let demo = run_demo(1000, 64)?;
    let h = &demo.result.history;
    for step in [0, 10, 100, 500, h.len() - 1] {
        println!("step {step:4}: hausdorff {:.5}", h[step]);
    }
    println!(
        "hausdorff reduced by {:.1}%, shape error l_rel {:.3} -> {:.3}",
        100.0 * (1.0 - demo.final_hausdorff / demo.initial_hausdorff),
        demo.initial_l_rel,
        demo.final_l_rel
    );
    write_demo_plots(&demo, std::path::Path::new(&out))?;
    println!("plots in {out}");
    Ok(())
}

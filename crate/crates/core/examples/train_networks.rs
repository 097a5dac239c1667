//! Trains a small denoiser and updater end to end on freshly generated
//! data, then saves both checkpoints.
//!
//!     cargo run --release --example train_networks [out_dir]

use std::path::Path;

use caustic_recon::datasets::{gen_denoise_pairs, gen_updater_samples, GenConfig, Quality, UpdaterGen};
use caustic_recon::metrics::l_irrad;
use caustic_recon::neural::{denoise, save_network, train_denoiser, train_updater, NetworkConfig, TrainOptions};

fn main() -> caustic_recon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out".into());
    let mut cfg = GenConfig::desk(5);
    cfg.scene.sensor_res = 32;
    cfg.field_res = 32;
    cfg.quality = Quality { low: 2_000, high: 32_000 };

    let (pairs, _) = gen_denoise_pairs(&cfg, 60)?;
    let (train, held) = pairs.split_at(50);
    let train: Vec<_> = train.iter().map(|p| (p.low.clone(), p.high.clone())).collect();
    let opts = TrainOptions { epochs: 6, ..TrainOptions::default() };
    let (den, rep) = train_denoiser(&train, &NetworkConfig { c_init: 4, ..NetworkConfig::desk_denoiser() }, &opts, 5)?;
    println!("denoiser: validation {:.3e} -> {:.3e}", rep.initial_validation_loss, rep.best_validation_loss());
    let (mut before, mut after) = (0.0, 0.0);
    for p in held {
        before += l_irrad(&p.low, &p.high)?;
        after += l_irrad(&denoise(&den, &p.low)?, &p.high)?;
    }
    println!("held-out l_irrad: noisy {:.3e}, denoised {:.3e}", before / 10.0, after / 10.0);
    save_network(&den, 5, rep.best_epoch, Path::new(&out).join("denoiser.nsfw"))?;

    let (samples, _) = gen_updater_samples(&cfg, &UpdaterGen::default(), Some(&den), 80)?;
    let examples = samples.iter().map(|s| s.example()).collect::<caustic_recon::Result<Vec<_>>>()?;
    let ucfg = NetworkConfig { m_s: 2, ..NetworkConfig::desk_updater() };
    let (upd, rep) = train_updater(&examples, cfg.scene.n_w(), &ucfg, &opts, 6)?;
    println!("updater: validation {:.3e} -> {:.3e}", rep.initial_validation_loss, rep.best_validation_loss());
    save_network(&upd, 6, rep.best_epoch, Path::new(&out).join("updater.nsfw"))?;
    Ok(())
}

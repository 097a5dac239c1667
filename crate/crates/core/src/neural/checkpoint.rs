//! Weight files: one JSON header line followed by an NSFC1 blob holding the
//! flat parameter vector as a `1 x 1 x P` grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_bytes, Grid};

use super::network::{Network, NetworkConfig, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub role: Role,
    pub config: NetworkConfig,
    pub in_channels: usize,
    pub param_count: usize,
    pub seed: u64,
    pub epoch: usize,
}

const FORMAT: &str = "nsfc-weights-1";

pub fn encode_network(net: &Network, seed: u64, epoch: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        role: net.role(),
        config: net.config().clone(),
        in_channels: net.in_channels(),
        param_count: net.param_count(),
        seed,
        epoch,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    let grid = Grid::from_f64(1, 1, net.param_count(), net.params()).expect("flat grid");
    bytes.extend_from_slice(&grid.encode());
    bytes
}

pub fn decode_network(bytes: &[u8], origin: &Path) -> Result<(Network, CheckpointHeader)> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown weight format '{}'", header.format)));
    }
    let grid = Grid::decode(&bytes[split + 1..], origin)?;
    if grid.data.len() != header.param_count {
        return Err(bad(format!("{} parameters, header says {}", grid.data.len(), header.param_count)));
    }
    let net = Network::from_parts(header.role, header.config.clone(), header.in_channels, grid.to_f64())
        .map_err(|e| bad(e.to_string()))?;
    Ok((net, header))
}

pub fn save_network(net: &Network, seed: u64, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_network(net, seed, epoch))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<(Network, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes, path)
}

/// Loads weights and checks they were trained for `role`.
pub fn load_role(path: impl AsRef<Path>, role: Role) -> Result<Network> {
    let (net, header) = load_network(path.as_ref())?;
    if header.role != role {
        return Err(Error::invalid(format!(
            "{} holds {:?} weights, expected {:?}",
            path.as_ref().display(),
            header.role,
            role
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_weights() {
        let mut net = Network::denoiser(NetworkConfig::desk_denoiser(), 5).unwrap();
        let rounded: Vec<f64> = net.params().iter().map(|&p| p as f32 as f64).collect();
        net.set_params(rounded).unwrap();
        let bytes = encode_network(&net, 5, 3);
        let (back, header) = decode_network(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.epoch, 3);
        assert_eq!(header.role, Role::Denoiser);
    }

    #[test]
    fn rejects_corrupt_files() {
        let net = Network::updater(NetworkConfig::desk_updater(), 3, 1).unwrap();
        let mut bytes = encode_network(&net, 1, 0);
        assert!(decode_network(&bytes[..10], Path::new("x")).is_err());
        bytes.truncate(bytes.len() - 4);
        assert!(decode_network(&bytes, Path::new("x")).is_err());
    }
}

//! Parameter dumps and network checkpoints.
//!
//! A dump is a directory holding one tensor file per named tensor plus
//! `manifest.txt`, one `name<TAB>file<TAB>d0xd1x...` line per tensor. A
//! network checkpoint adds `config.txt` with the `net.*` keys.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{build_sth_network, Network, NetworkConfig};
use crate::sth::SthLayer;
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write named tensors into `dir`.
pub fn write_dump<'a>(dir: impl AsRef<Path>, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\', '\t', '\n']) {
            return Err(Error::InvalidArgument(format!("tensor name {name:?} is not a plain file stem")));
        }
        let file = format!("{name}.stht");
        write_tensor(dir.join(&file), t)?;
        let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{name}\t{file}\t{}", dims.join("x"));
    }
    write_text(&dir.join(MANIFEST), &manifest)
}

/// Read every tensor listed in `dir`'s manifest, in manifest order. Listed
/// files that are absent are reported together.
pub fn read_dump(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = read_text(&mpath)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [name, file, dims] = parts[..] else {
            return Err(Error::Parse { path: mpath, offset: i + 1, msg: format!("expected 3 fields, got {line:?}") });
        };
        let dims: std::result::Result<Vec<usize>, _> = dims.split('x').map(str::parse).collect();
        let dims = dims.map_err(|_| Error::Parse { path: mpath.clone(), offset: i + 1, msg: "bad dims".into() })?;
        entries.push((name.to_string(), dir.join(file), dims));
    }
    let missing: Vec<PathBuf> = entries.iter().filter(|e| !e.1.exists()).map(|e| e.1.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }
    entries
        .into_iter()
        .map(|(name, path, dims)| {
            let t = read_tensor(&path)?;
            if t.dims() != dims {
                return Err(Error::ShapeMismatch(format!("{}: manifest says {:?}, file has {:?}", name, dims, t.dims())));
            }
            Ok((name, t))
        })
        .collect()
}

/// Dump a hybrid layer's parameters.
pub fn dump_layer(layer: &SthLayer, dir: impl AsRef<Path>) -> Result<()> {
    write_dump(dir, layer.params().into_iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Save parameters, normalization statistics and the network config.
pub fn save_checkpoint(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let params = net.params().into_iter().map(|p| (p.name.as_str(), &p.value));
    let buffers = net.buffers().into_iter().map(|b| (b.name.as_str(), &b.value));
    write_dump(dir, params.chain(buffers))?;
    write_text(&dir.join(CONFIG), &network_config_text(&net.cfg))
}

/// `net.*` lines of a run config.
pub fn network_config_text(cfg: &NetworkConfig) -> String {
    let run = RunConfig { net: cfg.clone(), ..RunConfig::default() };
    run.to_text().lines().filter(|l| l.starts_with("net.")).map(|l| format!("{l}\n")).collect()
}

/// Rebuild a network from [`save_checkpoint`] output. Every parameter and
/// buffer must be present with its expected shape.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let cfg = RunConfig::parse(&read_text(&dir.join(CONFIG))?)?.net;
    let mut net = build_sth_network(&cfg, 0)?;
    let mut stored: HashMap<String, Tensor> = read_dump(dir)?.into_iter().collect();
    let mut take = |name: &str, dims: &[usize]| -> Result<Tensor> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint has no tensor {name:?}")))?;
        if t.dims() != dims {
            return Err(Error::ShapeMismatch(format!("{name}: expected {dims:?}, found {:?}", t.dims())));
        }
        Ok(t)
    };
    for p in net.params_mut() {
        p.value = take(&p.name, p.value.dims())?;
        p.apply_mask();
    }
    for b in net.buffers_mut() {
        b.value = take(&b.name, b.value.dims())?;
    }
    if let Some(extra) = stored.keys().min() {
        return Err(Error::ShapeMismatch(format!("checkpoint tensor {extra:?} matches nothing in the network")));
    }
    Ok(net)
}

/// Scalars in a checkpoint excluding structural zeros.
pub fn live_scalars(net: &Network) -> usize {
    net.params().iter().map(|p| p.live_count()).sum::<usize>() + net.buffers().iter().map(|b| b.value.numel()).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::plan;

    fn small() -> NetworkConfig {
        let mut cfg = NetworkConfig::desk(16, 32, 4, 3);
        cfg.attention = true;
        cfg
    }

    #[test]
    fn checkpoint_round_trips_at_file_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build_sth_network(&small(), 3).unwrap();
        for b in net.buffers_mut() {
            b.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + i as f64 * 0.25);
        }
        save_checkpoint(&net, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.cfg, net.cfg);
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        for (a, b) in back.buffers().iter().zip(net.buffers()) {
            assert_eq!(a.value, b.value);
        }
        // saving the reloaded network reproduces the files
        let again = tempfile::tempdir().unwrap();
        save_checkpoint(&back, again.path()).unwrap();
        for e in std::fs::read_dir(dir.path()).unwrap() {
            let e = e.unwrap();
            let other = std::fs::read(again.path().join(e.file_name())).unwrap();
            assert_eq!(std::fs::read(e.path()).unwrap(), other, "{:?}", e.file_name());
        }
    }

    #[test]
    fn live_scalars_match_the_plan() {
        for p in ["0", "1/4", "1/2"] {
            let mut cfg = small();
            cfg.p = p.parse().unwrap();
            let net = build_sth_network(&cfg, 0).unwrap();
            let planned: usize = plan(&cfg).unwrap().layers.iter().map(|l| l.params + l.buffers).sum();
            assert_eq!(live_scalars(&net), planned, "p = {p}");
        }
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_sth_network(&small(), 0).unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let victim = dir.path().join("fc.bias.stht");
        std::fs::remove_file(&victim).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Validation(missing)) => assert_eq!(missing, [victim.clone()]),
            other => panic!("{other:?}"),
        }
        write_tensor(&victim, &Tensor::zeros(&[7]).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::ShapeMismatch(_))));
        std::fs::remove_file(dir.path().join(CONFIG)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFile { .. })));
    }

    #[test]
    fn layer_dump_lists_every_parameter() {
        let net = build_sth_network(&small(), 0).unwrap();
        let layer = net.hybrid_layers().next().unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_layer(layer, dir.path()).unwrap();
        let back = read_dump(dir.path()).unwrap();
        let names: Vec<&str> = back.iter().map(|(n, _)| n.as_str()).collect();
        let want: Vec<&str> = layer.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, want);
    }
}

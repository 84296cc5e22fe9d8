//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SSDGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then every tensor
//! listed in the header as little-endian `f32` values, in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, NetState, NormLayer, SegmentationNet};

pub const MAGIC: &[u8; 8] = b"SSDGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub len: usize,
}

/// Per-layer settings that are not stored as tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSettings {
    pub name: String,
    pub epsilon: f32,
    pub running_momentum: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    pub state: NetState,
    pub n_domains: Option<usize>,
    pub layers: Vec<LayerSettings>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: SegmentationNet,
    pub metadata: BTreeMap<String, serde_json::Value>,
    /// Auxiliary named arrays such as optimizer moments.
    pub extras: Vec<(String, Vec<f32>)>,
}

fn layer_settings(layer: &NormLayer) -> LayerSettings {
    let (epsilon, running_momentum, mix_trainable) = match layer {
        NormLayer::Standard(n) => (n.epsilon, n.branch.running_momentum, None),
        NormLayer::Site(s) => (s.epsilon, s.aggregated.running_momentum, Some(s.mix.trainable)),
        NormLayer::Stripped(s) => (s.epsilon, s.aggregated.running_momentum, Some(s.mix.trainable)),
    };
    LayerSettings {
        name: layer.name().to_string(),
        epsilon,
        running_momentum,
        mix_trainable,
    }
}

fn apply_settings(layer: &mut NormLayer, s: &LayerSettings) -> Result<()> {
    if layer.name() != s.name {
        return Err(Error::checkpoint(&s.name, format!("expected layer `{}`", layer.name())));
    }
    match layer {
        NormLayer::Standard(n) => {
            n.epsilon = s.epsilon;
            n.branch.running_momentum = s.running_momentum;
        }
        NormLayer::Site(site) => {
            site.epsilon = s.epsilon;
            for b in site.individual.iter_mut().chain(std::iter::once(&mut site.aggregated)) {
                b.running_momentum = s.running_momentum;
            }
            site.mix.trainable = s.mix_trainable.unwrap_or(true);
        }
        NormLayer::Stripped(site) => {
            site.epsilon = s.epsilon;
            site.aggregated.running_momentum = s.running_momentum;
            site.mix.trainable = s.mix_trainable.unwrap_or(true);
        }
    }
    Ok(())
}

/// Serializes `net` (parameters and running buffers) plus `extras` into bytes.
pub fn encode(
    net: &SegmentationNet,
    metadata: &BTreeMap<String, serde_json::Value>,
    extras: &[(String, Vec<f32>)],
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    net.visit_params(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name,
            kind: TensorKind::Param,
            len: p.values.len(),
        });
        payload.extend_from_slice(p.values);
    });
    for (name, values) in net.buffers() {
        tensors.push(TensorEntry {
            name,
            kind: TensorKind::Buffer,
            len: values.len(),
        });
        payload.extend_from_slice(&values);
    }
    for (name, values) in extras {
        tensors.push(TensorEntry {
            name: name.clone(),
            kind: TensorKind::Extra,
            len: values.len(),
        });
        payload.extend_from_slice(values);
    }
    let header = Header {
        architecture: net.architecture().clone(),
        state: net.state().clone(),
        n_domains: net.n_domains(),
        layers: net.norm_layers().map(layer_settings).collect(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads only the header.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::checkpoint("header", "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::checkpoint("header", e.to_string()))?;
    Ok((header, end))
}

/// Rebuilds a network from bytes. `expected_domains`, when given, must match the
/// stored domain count of a converted network.
pub fn decode(bytes: &[u8], expected_domains: Option<usize>) -> Result<Checkpoint> {
    let (header, offset) = decode_header(bytes)?;
    if let Some(k) = expected_domains {
        if header.n_domains != Some(k) {
            return Err(Error::checkpoint(
                "n_domains",
                format!("checkpoint holds {:?} domains, {k} requested", header.n_domains),
            ));
        }
    }
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let payload = &bytes[offset..];
    if payload.len() != 4 * total {
        return Err(Error::checkpoint(
            "payload",
            format!("expected {} bytes of tensor data, found {}", 4 * total, payload.len()),
        ));
    }
    let mut values: BTreeMap<&str, (TensorKind, Vec<f32>)> = BTreeMap::new();
    let mut extras = Vec::new();
    let mut pos = 0;
    for t in &header.tensors {
        let data: Vec<f32> = payload[pos..pos + 4 * t.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * t.len;
        if t.kind == TensorKind::Extra {
            extras.push((t.name.clone(), data));
        } else if values.insert(&t.name, (t.kind, data)).is_some() {
            return Err(Error::checkpoint(&t.name, "duplicate tensor"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plain = SegmentationNet::new(header.architecture.clone(), &mut rng)
        .map_err(|e| Error::checkpoint("architecture", e.to_string()))?;
    let mut net = match header.state {
        NetState::Plain => plain,
        NetState::Converted { n_domains } => plain.convert(n_domains, 0.5)?,
        NetState::Stripped => plain.convert(1, 0.5)?.strip_individual_branches()?,
    };
    if net.n_domains() != header.n_domains {
        return Err(Error::checkpoint("n_domains", "inconsistent with the stored state"));
    }
    let layers: Vec<&mut NormLayer> = net.norm_layers_mut().collect();
    if layers.len() != header.layers.len() {
        return Err(Error::checkpoint(
            "layers",
            format!("{} layer settings for {} normalization layers", header.layers.len(), layers.len()),
        ));
    }
    for (layer, s) in layers.into_iter().zip(&header.layers) {
        apply_settings(layer, s)?;
    }

    let mut failure: Option<Error> = None;
    let mut take = |name: &str, kind: TensorKind, dst: &mut Vec<f32>, failure: &mut Option<Error>| {
        if failure.is_some() {
            return;
        }
        match values.remove(name) {
            None => *failure = Some(Error::checkpoint(name, "missing from checkpoint")),
            Some((k, _)) if k != kind => *failure = Some(Error::checkpoint(name, format!("stored as {k:?}, expected {kind:?}"))),
            Some((_, v)) if v.len() != dst.len() => {
                *failure = Some(Error::checkpoint(
                    name,
                    format!("length {} does not match expected {}", v.len(), dst.len()),
                ))
            }
            Some((_, v)) => *dst = v,
        }
    };
    net.visit_params_mut(&mut |p| take(&p.name, TensorKind::Param, p.values, &mut failure));
    net.visit_buffers_mut(&mut |name, dst| take(name, TensorKind::Buffer, dst, &mut failure));
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = values.keys().next() {
        return Err(Error::checkpoint(*name, "not part of this architecture"));
    }
    Ok(Checkpoint {
        net,
        metadata: header.metadata,
        extras,
    })
}

pub fn save_checkpoint(
    path: &Path,
    net: &SegmentationNet,
    metadata: &BTreeMap<String, serde_json::Value>,
    extras: &[(String, Vec<f32>)],
) -> Result<()> {
    let bytes = encode(net, metadata, extras)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_domains: Option<usize>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_domains)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_header(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RoutingContext, StatsSource};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn trained_like_net(k: usize) -> SegmentationNet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Architecture::with_widths(1, 2, &[4, 8]);
        let mut net = SegmentationNet::new(arch, &mut rng).unwrap().convert(k, 0.5).unwrap();
        net.visit_params_mut(&mut |p| p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)));
        let x = Tensor::from_vec([4, 1, 8, 8], (0..256).map(|_| rng.gen()).collect()).unwrap();
        let domains: Vec<usize> = (0..4).map(|i| i % k + 1).collect();
        net.forward(&x, &mut RoutingContext::individual(&domains), true).unwrap();
        net.forward(&x, &mut RoutingContext::aggregated(), true).unwrap();
        net
    }

    #[test]
    fn round_trip_is_exact() {
        let net = trained_like_net(3);
        let mut meta = BTreeMap::new();
        meta.insert("iteration".to_string(), serde_json::json!(17));
        let extras = vec![("adam.step".to_string(), vec![17.0])];
        let bytes = encode(&net, &meta, &extras).unwrap();
        let back = decode(&bytes, Some(3)).unwrap();
        assert_eq!(back.net, net);
        assert_eq!(back.metadata["iteration"], 17);
        assert_eq!(back.extras, extras);
        let (header, _) = decode_header(&bytes).unwrap();
        assert_eq!(header.n_domains, Some(3));

        let x = Tensor::full([2, 1, 8, 8], 0.3);
        let a = net.infer(&x, &mut RoutingContext::aggregated(), StatsSource::Running).unwrap();
        let b = back.net.infer(&x, &mut RoutingContext::aggregated(), StatsSource::Running).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_count_mismatch_is_rejected() {
        let bytes = encode(&trained_like_net(3), &BTreeMap::new(), &[]).unwrap();
        let err = decode(&bytes, Some(2)).unwrap_err();
        assert!(err.to_string().contains("n_domains"), "{err}");
    }

    #[test]
    fn stripped_and_plain_round_trip() {
        let net = trained_like_net(2);
        let stripped = net.strip_individual_branches().unwrap();
        let bytes = encode(&stripped, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(decode(&bytes, None).unwrap().net, stripped);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain = SegmentationNet::new(Architecture::with_widths(1, 2, &[4, 8]), &mut rng).unwrap();
        let bytes = encode(&plain, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(decode(&bytes, None).unwrap().net, plain);
    }

    #[test]
    fn frozen_mixing_survives() {
        let mut net = trained_like_net(2);
        net.freeze_mixing(40.0).unwrap();
        let bytes = encode(&net, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(decode(&bytes, None).unwrap().net, net);
    }

    #[test]
    fn corrupted_files_name_the_problem() {
        let net = trained_like_net(2);
        let bytes = encode(&net, &BTreeMap::new(), &[]).unwrap();

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(decode(&bad_version, None).unwrap_err().to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 4];
        assert!(decode(truncated, None).unwrap_err().to_string().contains("payload"));

        // rename one tensor inside the header so it no longer matches
        let (mut header, offset) = decode_header(&bytes).unwrap();
        header.tensors[0].name = "enc0.conv1.kernel".into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut renamed = bytes[..12].to_vec();
        renamed.extend_from_slice(&(json.len() as u64).to_le_bytes());
        renamed.extend_from_slice(&json);
        renamed.extend_from_slice(&bytes[offset..]);
        let err = decode(&renamed, None).unwrap_err().to_string();
        assert!(err.contains("enc0.conv1.weight"), "{err}");

        assert!(decode(b"not a checkpoint at all", None).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/student.ckpt");
        let net = trained_like_net(2);
        save_checkpoint(&path, &net, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(load_checkpoint(&path, Some(2)).unwrap().net, net);
        assert_eq!(read_header(&path).unwrap().n_domains, Some(2));
    }
}

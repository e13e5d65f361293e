//! The DRN1 checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DRN1"  magic
//! u32     version (1)
//! u32     variant id (network depth: 18, 34, 50, 101, 152)
//! u32     dilated flag (0 or 1)
//! u32     class count
//! u32     tensor count
//! then per tensor, in lexicographic name order:
//!   u32       name length, then that many UTF-8 bytes
//!   u32       rank, then rank extents as u32
//!   f32 * n   row-major values
//! ```
//!
//! Tensors are the trainable parameters plus batch-norm running statistics
//! (`<layer>.running_mean` / `<layer>.running_var`). Widths are not stored;
//! they are reconstructed from the tensor shapes on load.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::resnet::{ArchSpec, Network, Variant};
use crate::tensor::{BatchNormState, Tensor};

pub const MAGIC: [u8; 4] = *b"DRN1";
pub const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_usize(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArg(format!("{what} exceeds u32")))?;
    push_u32(out, v);
    Ok(())
}

pub fn encode_model(net: &Network) -> Result<Vec<u8>> {
    let variant = net
        .arch
        .variant
        .ok_or_else(|| Error::InvalidArg("only standard variants serialize".into()))?;

    // One ordered map of everything that goes to disk.
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, t) in &net.params {
        tensors.insert(name.clone(), (t.shape().to_vec(), t.data().to_vec()));
    }
    for (layer, state) in &net.bn_state {
        tensors.insert(
            format!("{layer}.running_mean"),
            (vec![state.running_mean.len()], state.running_mean.clone()),
        );
        tensors.insert(
            format!("{layer}.running_var"),
            (vec![state.running_var.len()], state.running_var.clone()),
        );
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, variant.depth() as u32);
    push_u32(&mut out, net.arch.dilated as u32);
    push_usize(&mut out, net.arch.class_count, "class count")?;
    push_usize(&mut out, tensors.len(), "tensor count")?;
    for (name, (shape, data)) in &tensors {
        push_usize(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        push_usize(&mut out, shape.len(), "rank")?;
        for &e in shape {
            push_usize(&mut out, e, "extent")?;
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode(format!("truncated reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Decode("bad magic, not a DRN1 model".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Decode(format!(
            "unsupported version {version}, want {VERSION}"
        )));
    }
    let depth = r.u32("variant id")? as usize;
    let variant = Variant::from_depth(depth)
        .map_err(|_| Error::Decode(format!("unknown variant id {depth}")))?;
    let dilated = match r.u32("dilated flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::Decode(format!("bad dilated flag {v}"))),
    };
    let class_count = r.u32("class count")? as usize;
    let tensor_count = r.u32("tensor count")? as usize;

    let mut tensors: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Decode(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let e = r.u32("extent")? as usize;
            len = len
                .checked_mul(e)
                .ok_or_else(|| Error::Decode(format!("tensor {name:?} size overflows")))?;
            shape.push(e);
        }
        let raw = r.take(len * 4, &format!("data of {name:?}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Decode(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Decode(format!("duplicate tensor {name:?}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.at
        )));
    }

    // Reconstruct the plan from the stored shapes.
    let batch_norm = tensors.contains_key("stem.bn.gamma");
    let stem_ch = tensors
        .get("stem.conv.weight")
        .ok_or_else(|| Error::Decode("missing stem.conv.weight".into()))?
        .extent(0);
    let mut mids = [0usize; 4];
    for (si, mid) in mids.iter_mut().enumerate() {
        let key = format!("s{}.u1.conv1.weight", si + 1);
        *mid = tensors
            .get(&key)
            .ok_or_else(|| Error::Decode(format!("missing {key}")))?
            .extent(0);
    }
    let arch =
        ArchSpec::resnet_with_widths(variant, dilated, class_count, batch_norm, stem_ch, mids)
            .map_err(|e| Error::Decode(format!("stored shapes form no valid plan: {e}")))?;
    let (want_shapes, bn_layers) = Network::parameter_plan(&arch);

    // Pull running statistics out, leaving only parameters behind.
    let mut bn_state = BTreeMap::new();
    for layer in &bn_layers {
        let mean = tensors
            .remove(&format!("{layer}.running_mean"))
            .ok_or_else(|| Error::Decode(format!("missing {layer}.running_mean")))?;
        let var = tensors
            .remove(&format!("{layer}.running_var"))
            .ok_or_else(|| Error::Decode(format!("missing {layer}.running_var")))?;
        let channels = want_shapes[&format!("{layer}.gamma")][0];
        if mean.len() != channels || var.len() != channels {
            return Err(Error::Decode(format!(
                "running stats of {layer} have wrong length"
            )));
        }
        bn_state.insert(
            layer.clone(),
            BatchNormState {
                running_mean: mean.into_data(),
                running_var: var.into_data(),
            },
        );
    }

    for (name, want) in &want_shapes {
        match tensors.get(name) {
            None => return Err(Error::Decode(format!("missing parameter {name:?}"))),
            Some(t) if t.shape() != &want[..] => {
                return Err(Error::Decode(format!(
                    "parameter {name:?} has shape {:?}, want {want:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if tensors.len() != want_shapes.len() {
        let extra: Vec<&String> = tensors
            .keys()
            .filter(|k| !want_shapes.contains_key(*k))
            .collect();
        return Err(Error::Decode(format!("unexpected tensors {extra:?}")));
    }

    Ok(Network {
        arch,
        params: tensors,
        bn_state,
    })
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    write_atomic(path, &encode_model(net)?)
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(dilated: bool, batch_norm: bool) -> Network {
        let arch = ArchSpec::resnet(Variant::R18, dilated, 8, 0.0625, batch_norm).unwrap();
        Network::build(arch, 7).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything_at_f32() {
        let mut net = small_net(false, true);
        // Make running stats non-trivial so they are actually exercised.
        for s in net.bn_state.values_mut() {
            for (i, m) in s.running_mean.iter_mut().enumerate() {
                *m = 0.01 * i as f64;
            }
        }
        let bytes = encode_model(&net).unwrap();
        let back = decode_model(&bytes).unwrap();

        assert_eq!(back.arch.variant, Some(Variant::R18));
        assert!(!back.arch.dilated);
        assert_eq!(back.arch.class_count, 8);
        assert!(back.arch.batch_norm);
        assert_eq!(back.arch.stem.channels, 4);
        assert_eq!(back.params.len(), net.params.len());
        for (name, t) in &net.params {
            let got = &back.params[name];
            assert_eq!(got.shape(), t.shape(), "{name}");
            for (a, b) in t.data().iter().zip(got.data()) {
                assert_eq!(*a as f32, *b as f32, "{name}");
                assert_eq!(*b, (*b as f32) as f64, "{name} not f32-clean");
            }
        }
        for (layer, s) in &net.bn_state {
            let got = &back.bn_state[layer];
            for (a, b) in s.running_mean.iter().zip(&got.running_mean) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let net = small_net(true, true);
        let bytes = encode_model(&net).unwrap();
        let again = encode_model(&decode_model(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn dilated_and_biased_flags_roundtrip() {
        let net = small_net(true, false);
        let back = decode_model(&encode_model(&net).unwrap()).unwrap();
        assert!(back.arch.dilated);
        assert!(!back.arch.batch_norm);
        assert!(back.bn_state.is_empty());
        assert!(back.params.contains_key("stem.conv.bias"));
        assert_eq!(back.arch.stages[3][0].first_unit_stride, 1);
        assert_eq!(back.arch.stages[3][0].dilation_per_conv, vec![3, 3]);
    }

    #[test]
    fn widths_come_back_from_shapes() {
        let arch =
            ArchSpec::resnet_with_widths(Variant::R50, false, 5, true, 6, [6, 10, 12, 20]).unwrap();
        let net = Network::build(arch, 1).unwrap();
        let back = decode_model(&encode_model(&net).unwrap()).unwrap();
        assert_eq!(back.arch.stem.channels, 6);
        let mids: Vec<usize> = back.arch.stages.iter().map(|s| s[0].mid_ch).collect();
        assert_eq!(mids, vec![6, 10, 12, 20]);
        assert_eq!(back.arch.class_count, 5);
        assert_eq!(back.param_count(), net.param_count());
    }

    #[test]
    fn header_corruption_is_rejected() {
        let net = small_net(false, true);
        let good = encode_model(&net).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Decode(_))));

        let mut bad = good.clone();
        bad[4] = 9; // version
        assert!(matches!(decode_model(&bad), Err(Error::Decode(_))));

        let mut bad = good.clone();
        bad[8] = 77; // variant id
        assert!(matches!(decode_model(&bad), Err(Error::Decode(_))));

        assert!(matches!(decode_model(&good[..10]), Err(Error::Decode(_))));
        assert!(matches!(
            decode_model(&good[..good.len() - 1]),
            Err(Error::Decode(_))
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Decode(_))));
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let mut net = small_net(false, true);
        net.params.remove("fc.bias").unwrap();
        let bytes = encode_model(&net).unwrap();
        let err = decode_model(&bytes).unwrap_err();
        assert!(err.to_string().contains("fc.bias"), "{err}");
    }

    #[test]
    fn file_roundtrip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.drn1");
        let net = small_net(false, true);
        save_model(&path, &net).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params.len(), net.params.len());
        // Corrupt on disk -> decode error mentioning the path.
        std::fs::write(&path, b"DRNX").unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("model.drn1"), "{err}");
    }
}

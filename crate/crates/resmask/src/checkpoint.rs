//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RMSK" | u16 version | spec block | u32 entry count | entries...
//! spec block:  u32 input_channels, input_size, num_classes, stem_channels,
//!              u32 stage count, then per stage u32 channels/blocks/depth/stride
//! entry:       u16 name len | name UTF-8 | u8 dtype (0=f32, 1=f64) | u8 rank |
//!              rank x u32 dims | raw element data
//! ```
//!
//! Entries cover every trainable parameter and every running-statistics
//! buffer, so a saved and reloaded network reproduces eval outputs exactly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{build_network, Network, NetworkSpec, StageSpec};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"RMSK";
const VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// writing
// ---------------------------------------------------------------------------

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_spec(out: &mut Vec<u8>, spec: &NetworkSpec) {
    push_u32(out, spec.input_channels as u32);
    push_u32(out, spec.input_size as u32);
    push_u32(out, spec.num_classes as u32);
    push_u32(out, spec.stem_channels as u32);
    push_u32(out, spec.stages.len() as u32);
    for st in &spec.stages {
        push_u32(out, st.channels as u32);
        push_u32(out, st.blocks as u32);
        push_u32(out, st.masking_depth as u32);
        push_u32(out, st.stride as u32);
    }
}

fn encode_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    push_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE_TAG);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    out.reserve(t.numel() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Write the network's parameters and running statistics to `path`.
pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let store = net.store();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);

    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(MAGIC);
    push_u16(&mut header, VERSION);
    encode_spec(&mut header, net.spec());
    let count = store.params().count() + store.buffers().count();
    push_u32(&mut header, count as u32);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;

    // one buffer per entry keeps peak memory at a single tensor's size
    for (_, name, t) in store.params() {
        let mut buf = Vec::new();
        encode_entry(&mut buf, name, t.as_ref());
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    for (_, name, t) in store.buffers() {
        let mut buf = Vec::new();
        encode_entry(&mut buf, name, t.as_ref());
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// reading
// ---------------------------------------------------------------------------

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CheckpointTruncated(format!("while reading {what}")))?;
        Ok(buf)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }
}

fn decode_spec<R: Read>(r: &mut Reader<R>) -> Result<NetworkSpec> {
    let input_channels = r.u32("spec input channels")? as usize;
    let input_size = r.u32("spec input size")? as usize;
    let num_classes = r.u32("spec class count")? as usize;
    let stem_channels = r.u32("spec stem channels")? as usize;
    let n_stages = r.u32("spec stage count")? as usize;
    if n_stages > 64 {
        return Err(Error::CheckpointTruncated(format!(
            "implausible stage count {n_stages}"
        )));
    }
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(StageSpec {
            channels: r.u32("stage channels")? as usize,
            blocks: r.u32("stage blocks")? as usize,
            masking_depth: r.u32("stage masking depth")? as usize,
            stride: r.u32("stage stride")? as usize,
        });
    }
    Ok(NetworkSpec { input_channels, input_size, num_classes, stem_channels, stages })
}

/// One decoded tensor entry.
struct RawEntry<T> {
    name: String,
    tensor: Tensor<T>,
}

fn decode_entry<T: Scalar, R: Read>(r: &mut Reader<R>) -> Result<RawEntry<T>> {
    let name_len = r.u16("entry name length")? as usize;
    let name_bytes = r.bytes(name_len, "entry name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::CheckpointTruncated("entry name is not UTF-8".into()))?;
    let dtype = r.u8("entry dtype")?;
    let rank = r.u8("entry rank")? as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(Error::CheckpointTruncated(format!(
            "entry {name}: rank {rank} out of range"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("entry dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    let tensor = match dtype {
        0 => {
            let raw = r.bytes(numel * 4, &format!("data of {name}"))?;
            // exact for f32 targets, exact upcast for f64 targets
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|ch| T::from_f64(f32::read_le(ch) as f64))
                .collect();
            Tensor::from_vec(&shape, data)?
        }
        1 => {
            if T::DTYPE_TAG == 0 {
                return Err(Error::CheckpointDtype(format!(
                    "entry {name} holds f64 data; load it with --precision f64"
                )));
            }
            let raw = r.bytes(numel * 8, &format!("data of {name}"))?;
            let data: Vec<T> = raw.chunks_exact(8).map(|ch| T::read_le(ch)).collect();
            Tensor::from_vec(&shape, data)?
        }
        other => {
            return Err(Error::CheckpointDtype(format!(
                "entry {name}: unknown dtype tag {other}"
            )))
        }
    };
    Ok(RawEntry { name, tensor })
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<(NetworkSpec, usize)> {
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CheckpointBadVersion(version));
    }
    let spec = decode_spec(r)?;
    let count = r.u32("entry count")? as usize;
    Ok((spec, count))
}

/// Read only the spec of a checkpoint (cheap: header only).
pub fn peek_spec(path: &Path) -> Result<NetworkSpec> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file) };
    Ok(read_header(&mut r)?.0)
}

/// Load a checkpoint into an existing network. The stored spec must equal the
/// network's, and the entries must cover its parameters and buffers exactly.
pub fn load_into<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file) };
    let (spec, count) = read_header(&mut r)?;
    if &spec != net.spec() {
        return Err(Error::CheckpointSpecMismatch(format!(
            "checkpoint was written for a different configuration \
             (stored {} stages, {}x{} input; network has {} stages, {}x{} input)",
            spec.stages.len(),
            spec.input_size,
            spec.input_size,
            net.spec().stages.len(),
            net.spec().input_size,
            net.spec().input_size,
        )));
    }

    let mut seen: HashSet<String> = HashSet::new();
    for _ in 0..count {
        let entry = decode_entry::<T, _>(&mut r)?;
        if !seen.insert(entry.name.clone()) {
            return Err(Error::CheckpointTruncated(format!(
                "duplicate entry {}",
                entry.name
            )));
        }
        if let Some(id) = net.store().find_param(&entry.name) {
            if net.store().param(id).shape() != entry.tensor.shape() {
                return Err(Error::CheckpointSpecMismatch(format!(
                    "parameter {}: stored shape {:?}, network expects {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    net.store().param(id).shape()
                )));
            }
            net.store_mut().set_param(id, entry.tensor)?;
        } else if let Some(id) = net.store().find_buffer(&entry.name) {
            if net.store().buffer(id).shape() != entry.tensor.shape() {
                return Err(Error::CheckpointSpecMismatch(format!(
                    "buffer {}: stored shape {:?}, network expects {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    net.store().buffer(id).shape()
                )));
            }
            net.store().set_buffer(id, entry.tensor);
        } else {
            return Err(Error::CheckpointUnknownParam(entry.name));
        }
    }

    // ensure nothing resumed half-initialized
    for (_, name, _) in net.store().params() {
        if !seen.contains(name) {
            return Err(Error::CheckpointMissingParam(name.to_string()));
        }
    }
    for (_, name, _) in net.store().buffers() {
        if !seen.contains(name) {
            return Err(Error::CheckpointMissingParam(name.to_string()));
        }
    }

    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::CheckpointTruncated(
            "unexpected trailing bytes after the last entry".into(),
        ));
    }
    Ok(())
}

/// Build the network a checkpoint describes and load its tensors.
pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let spec = peek_spec(path)?;
    let mut net = build_network(&spec, 0)?;
    load_into(&mut net, path)?;
    Ok(net)
}

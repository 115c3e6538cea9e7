//! Checkpoint files: text header, raw little-endian payload, content digest.
//!
//! Layout:
//! ```text
//! zfs-checkpoint format=1
//! dtype=f32
//! meta <key>=<value>            (repeated)
//! group name=.. params=.. start=.. end=.. seed=.. scheme=.. digest=.. external=..
//! entry params=.. name=.. trainable=.. shape=d1 d2 ..
//! payload_bytes=<n>
//! <raw bytes>
//! sha256=<hex over header+payload>
//! ```

use crate::autograd::Params;
use crate::element::Element;
use crate::encoders::WeightProvenance;
use crate::error::{io_ingest, Result, ZfsError};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "zfs-checkpoint format=1";

#[derive(Clone, Debug)]
pub struct GroupRecord {
    pub name: String,
    /// Which registry the group lives in ("phi" | "theta").
    pub registry: String,
    pub range: std::ops::Range<usize>,
    pub provenance: WeightProvenance,
}

#[derive(Clone, Debug)]
pub struct EntryRecord {
    pub registry: String,
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub dtype: String,
    pub meta: BTreeMap<String, String>,
    pub groups: Vec<GroupRecord>,
    pub entries: Vec<EntryRecord>,
}

pub fn save_checkpoint<F: Element>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    groups: &[GroupRecord],
    registries: &[(&str, &Params<F>)],
) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("dtype={}\n", F::DTYPE));
    for (k, v) in meta {
        header.push_str(&format!("meta {k}={v}\n"));
    }
    for g in groups {
        header.push_str(&format!(
            "group name={} params={} start={} end={} seed={} scheme={} digest={} external={}\n",
            g.name,
            g.registry,
            g.range.start,
            g.range.end,
            g.provenance.init_seed,
            g.provenance.init_scheme,
            g.provenance.parameter_digest,
            g.provenance.external_sources.join(",")
        ));
    }
    let mut payload: Vec<u8> = Vec::new();
    for (reg_name, params) in registries {
        for e in params.entries() {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "entry params={} name={} trainable={} shape={}\n",
                reg_name,
                e.name,
                u8::from(e.trainable),
                dims.join(" ")
            ));
            for v in e.value.iter() {
                v.write_le(&mut payload);
            }
        }
    }
    header.push_str(&format!("payload_bytes={}\n", payload.len()));

    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    h.update(&payload);
    let digest = crate::autograd::hex(&h.finalize());

    let mut f = std::fs::File::create(path).map_err(|e| io_ingest(path, e))?;
    f.write_all(header.as_bytes()).map_err(|e| io_ingest(path, e))?;
    f.write_all(&payload).map_err(|e| io_ingest(path, e))?;
    f.write_all(format!("sha256={digest}\n").as_bytes())
        .map_err(|e| io_ingest(path, e))?;
    Ok(())
}

/// Read and checksum-verify a checkpoint. Any modified byte fails here.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(|e| io_ingest(path, e))?;
    let bad = |m: &str| ZfsError::ZfsViolation(format!("{}: {m}", path.display()));

    // Split header / payload / trailer.
    let marker = b"payload_bytes=";
    let hpos = find_line_start(&bytes, marker)
        .ok_or_else(|| bad("missing payload_bytes line"))?;
    let line_end = bytes[hpos..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated header"))?
        + hpos;
    let count: usize = std::str::from_utf8(&bytes[hpos + marker.len()..line_end])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("bad payload size"))?;
    let payload_start = line_end + 1;
    let payload_end = payload_start + count;
    if bytes.len() < payload_end {
        return Err(bad("payload truncated"));
    }
    let trailer = std::str::from_utf8(&bytes[payload_end..])
        .map_err(|_| bad("bad trailer"))?;
    let stored = trailer
        .trim()
        .strip_prefix("sha256=")
        .ok_or_else(|| bad("missing sha256 trailer"))?;

    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(&bytes[..payload_end]);
    let actual = crate::autograd::hex(&h.finalize());
    if actual != stored {
        return Err(ZfsError::ZfsViolation(format!(
            "{}: content digest mismatch (file corrupted or tampered)",
            path.display()
        )));
    }

    // Parse the header.
    let header = std::str::from_utf8(&bytes[..payload_start]).map_err(|_| bad("bad header"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let mut dtype = String::new();
    let mut meta = BTreeMap::new();
    let mut groups = Vec::new();
    let mut entries: Vec<EntryRecord> = Vec::new();
    for line in lines {
        if let Some(v) = line.strip_prefix("dtype=") {
            dtype = v.to_string();
        } else if let Some(rest) = line.strip_prefix("meta ") {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("group ") {
            let kv = parse_kv(rest);
            let get = |k: &str| -> Result<&str> {
                kv.get(k)
                    .map(|s| s.as_str())
                    .ok_or_else(|| bad(&format!("group line missing '{k}'")))
            };
            let external: Vec<String> = get("external")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            groups.push(GroupRecord {
                name: get("name")?.to_string(),
                registry: get("params")?.to_string(),
                range: get("start")?.parse().map_err(|_| bad("bad start"))?
                    ..get("end")?.parse().map_err(|_| bad("bad end"))?,
                provenance: WeightProvenance {
                    init_seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
                    init_scheme: get("scheme")?.to_string(),
                    external_sources: external,
                    parameter_digest: get("digest")?.to_string(),
                },
            });
        } else if let Some(rest) = line.strip_prefix("entry ") {
            let kv = parse_kv(rest);
            let get = |k: &str| -> Result<&str> {
                kv.get(k)
                    .map(|s| s.as_str())
                    .ok_or_else(|| bad(&format!("entry line missing '{k}'")))
            };
            let shape: Vec<usize> = get("shape")?
                .split_whitespace()
                .map(|d| d.parse().unwrap_or(0))
                .collect();
            entries.push(EntryRecord {
                registry: get("params")?.to_string(),
                name: get("name")?.to_string(),
                trainable: get("trainable")? == "1",
                shape,
                data: Vec::new(),
            });
        }
    }

    // Slice the payload into entries.
    let width = match dtype.as_str() {
        "f32" => 4usize,
        "f64" => 8,
        other => return Err(bad(&format!("unknown dtype '{other}'"))),
    };
    let mut offset = payload_start;
    for e in &mut entries {
        let len: usize = e.shape.iter().product::<usize>() * width;
        if offset + len > payload_end {
            return Err(bad("payload shorter than entry table"));
        }
        e.data = bytes[offset..offset + len].to_vec();
        offset += len;
    }
    if offset != payload_end {
        return Err(bad("payload longer than entry table"));
    }

    Ok(CheckpointData {
        dtype,
        meta,
        groups,
        entries,
    })
}

/// Overwrite registry values from checkpoint entries (names, order, and
/// shapes must match the freshly built registries).
pub fn restore_registry<F: Element>(
    data: &CheckpointData,
    registry: &str,
    params: &mut Params<F>,
) -> Result<()> {
    if data.dtype != F::DTYPE {
        return Err(ZfsError::ZfsViolation(format!(
            "checkpoint dtype {} does not match runtime {}",
            data.dtype,
            F::DTYPE
        )));
    }
    let stored: Vec<&EntryRecord> = data
        .entries
        .iter()
        .filter(|e| e.registry == registry)
        .collect();
    if stored.len() != params.len() {
        return Err(ZfsError::ZfsViolation(format!(
            "checkpoint has {} entries for '{registry}', expected {}",
            stored.len(),
            params.len()
        )));
    }
    for (entry, rec) in params.entries_mut().iter_mut().zip(stored) {
        if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() {
            return Err(ZfsError::ZfsViolation(format!(
                "checkpoint entry '{}' does not match expected '{}'",
                rec.name, entry.name
            )));
        }
        for (i, v) in entry.value.iter_mut().enumerate() {
            *v = F::read_le(&rec.data[i * F::BYTE_WIDTH..]);
        }
    }
    Ok(())
}

fn parse_kv(s: &str) -> BTreeMap<String, String> {
    // Tokens are `key=value`; `shape` and `external` may hold spaces, so a
    // token without '=' appends to the previous value.
    let mut map = BTreeMap::new();
    let mut last: Option<String> = None;
    for tok in s.split(' ') {
        if let Some((k, v)) = tok.split_once('=') {
            map.insert(k.to_string(), v.to_string());
            last = Some(k.to_string());
        } else if let Some(k) = &last {
            let cur = map.get_mut(k).unwrap();
            cur.push(' ');
            cur.push_str(tok);
        }
    }
    map
}

fn find_line_start(bytes: &[u8], prefix: &[u8]) -> Option<usize> {
    if bytes.starts_with(prefix) {
        return Some(0);
    }
    let mut i = 0;
    while let Some(nl) = bytes[i..].iter().position(|&b| b == b'\n') {
        let start = i + nl + 1;
        if bytes[start..].starts_with(prefix) {
            return Some(start);
        }
        if start >= bytes.len() {
            break;
        }
        i = start;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn sample_checkpoint(dir: &Path) -> std::path::PathBuf {
        let mut phi = Params::<f32>::new();
        phi.add("a.w", arr1(&[1.0f32, 2.0, 3.0]).into_dyn());
        phi.add_state("a.stat", arr1(&[0.5f32]).into_dyn());
        let mut theta = Params::<f32>::new();
        theta.add("p.w", arr1(&[4.0f32, 5.0]).into_dyn());
        let groups = vec![GroupRecord {
            name: "encoder".into(),
            registry: "phi".into(),
            range: 0..2,
            provenance: WeightProvenance {
                init_seed: 7,
                init_scheme: "fan_in_normal_v1".into(),
                external_sources: vec![],
                parameter_digest: phi.digest_range(0..2),
            },
        }];
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), "3".into());
        let path = dir.join("ck.bin");
        save_checkpoint(&path, &meta, &groups, &[("phi", &phi), ("theta", &theta)]).unwrap();
        path
    }

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let tmp = tempfile::tempdir().unwrap();
        let path = sample_checkpoint(tmp.path());
        let data = load_checkpoint(&path).unwrap();
        assert_eq!(data.meta["epoch"], "3");
        assert_eq!(data.groups.len(), 1);
        assert_eq!(data.entries.len(), 3);

        let mut phi = Params::<f32>::new();
        phi.add("a.w", arr1(&[0.0f32, 0.0, 0.0]).into_dyn());
        phi.add_state("a.stat", arr1(&[0.0f32]).into_dyn());
        restore_registry(&data, "phi", &mut phi).unwrap();
        assert_eq!(
            phi.get(crate::autograd::ParamId(0)).as_slice().unwrap(),
            &[1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = sample_checkpoint(tmp.path());
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip one payload byte.
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).err(),
            Some(ZfsError::ZfsViolation(_))
        ));
    }
}

//! Parameter checkpoints.
//!
//! Layout, byte for byte:
//!
//! ```text
//! TOKENMOE-CHECKPOINT 1\n
//! params <count>\n
//! <name> <d0>x<d1>x...\n      one line per parameter, in store order
//! end\n
//! <f64 little-endian values of every parameter, row-major, in header order>
//! ```
//!
//! Names are non-empty and contain no whitespace. The payload length must
//! equal eight times the total number of scalars; trailing bytes are rejected.

use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "TOKENMOE-CHECKPOINT 1";
/// Upper bound on declared scalars, so a corrupt header cannot request huge allocations.
const MAX_SCALARS: usize = 1 << 28;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{MAGIC}\nparams {}\n", store.len()).into_bytes();
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{} {}\n", p.name, dims.join("x")).as_bytes());
    }
    out.extend_from_slice(b"end\n");
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        path: "checkpoint".into(),
        msg: msg.into(),
    }
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated header line"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
}

/// Parses a checkpoint into (name, tensor) pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(bad("bad magic line"));
    }
    let count: usize = take_line(bytes, &mut pos)?
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("expected `params <count>`"))?;
    let mut entries = Vec::new();
    let mut total = 0usize;
    for _ in 0..count {
        let line = take_line(bytes, &mut pos)?;
        let (name, dims) = line.split_once(' ').ok_or_else(|| bad(format!("bad entry `{line}`")))?;
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad(format!("bad parameter name `{name}`")));
        }
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(format!("bad shape `{dims}`")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_SCALARS)
            .ok_or_else(|| bad("shape too large"))?;
        total = total.checked_add(n).filter(|&t| t <= MAX_SCALARS).ok_or_else(|| bad("checkpoint too large"))?;
        entries.push((name.to_string(), shape, n));
    }
    if take_line(bytes, &mut pos)? != "end" {
        return Err(bad("expected `end`"));
    }
    let payload = &bytes[pos..];
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(entries.len());
    for (name, shape, n) in entries {
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value in `{name}`")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values in `store` from decoded entries, checking names and shapes.
pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, network has {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(entries) {
        if store.get(id).name != name {
            return Err(bad(format!("expected `{}`, found `{name}`", store.get(id).name)));
        }
        store.set_value(id, t)?;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::InitSpec;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let mut s = ParamStore::new();
        s.add("enc.w", InitSpec::zeros(), &[2, 3]).unwrap();
        s.add("b", InitSpec::zeros(), &[1]).unwrap();
        let bytes = encode(&s);
        let header = b"TOKENMOE-CHECKPOINT 1\nparams 2\nenc.w 2x3\nb 1\nend\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 7 * 8);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let mut s = ParamStore::new();
        s.add("w", InitSpec::fan_in(3, 2), &[3]).unwrap();
        let bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"nope").is_err());
        assert!(decode(b"TOKENMOE-CHECKPOINT 1\nparams 1\nw 0\nend\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5), seed in 0u64..1000) {
            let mut s = ParamStore::new();
            for (i, sh) in shapes.iter().enumerate() {
                s.add(&format!("p{i}"), InitSpec::fan_in(3, seed + i as u64), sh).unwrap();
            }
            let mut other = s.clone();
            for id in other.ids().collect::<Vec<_>>() {
                let shape = other.value(id).shape().to_vec();
                other.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
            restore(&mut other, decode(&encode(&s)).unwrap()).unwrap();
            for id in s.ids() {
                prop_assert_eq!(s.value(id), other.value(id));
            }
        }
    }
}

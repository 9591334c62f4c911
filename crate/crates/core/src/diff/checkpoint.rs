//! Text checkpoint format.
//!
//! ```text
//! MME-CKPT v1
//! <path> <d0>x<d1>... <base64 of little-endian f64 values>
//! ```
//!
//! Records are sorted by path. Values round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "MME-CKPT v1";

pub fn encode_checkpoint(params: &ParameterSet) -> String {
    let mut s = String::new();
    s.push_str(CHECKPOINT_HEADER);
    s.push('\n');
    for (path, t) in params.iter() {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let mut bytes = Vec::with_capacity(t.values.len() * 8);
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let _ = writeln!(s, "{path} {} {}", shape.join("x"), STANDARD.encode(bytes));
    }
    s
}

pub fn decode_checkpoint(text: &str) -> Result<ParameterSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CHECKPOINT_HEADER => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "expected header {CHECKPOINT_HEADER:?}, found {:?}",
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut set = ParameterSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Checkpoint(format!("line {}: {m}", i + 1));
        let mut parts = line.split(' ');
        let (Some(path), Some(shape), Some(data), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `path shape data`"));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let bytes = STANDARD.decode(data).map_err(|e| bad(&format!("base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| bad(&e.to_string()))?;
        set.insert(path, t).map_err(|e| bad(&e.to_string()))?;
    }
    Ok(set)
}

pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    decode_checkpoint(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), split in 1usize..4) {
            let mut set = ParameterSet::new();
            let n = vals.len();
            set.insert("a.w", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            if n % split == 0 {
                set.insert("b", Tensor::new(vec![split, n / split], vals.clone()).unwrap()).unwrap();
            }
            let back = decode_checkpoint(&encode_checkpoint(&set)).unwrap();
            prop_assert_eq!(back.len(), set.len());
            for ((k1, t1), (k2, t2)) in set.iter().zip(back.iter()) {
                prop_assert_eq!(k1, k2);
                prop_assert_eq!(&t1.shape, &t2.shape);
                let b1: Vec<u64> = t1.values.iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_bad_header_and_shape() {
        assert!(decode_checkpoint("MME-CKPT v2\n").is_err());
        let mut set = ParameterSet::new();
        set.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let text = encode_checkpoint(&set).replace(" 2 ", " 3 ");
        assert!(decode_checkpoint(&text).is_err());
    }
}

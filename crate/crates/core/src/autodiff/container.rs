//! Parameter checkpoint container.
//!
//! A checkpoint is UTF-8 JSON lines:
//!
//! 1. header: `{"format": "migdial-checkpoint", "version": 1, "kind": str,
//!    "vocab_hash": str, "config": object}`
//! 2. `{"vocab": [str, ...]}`: the full token list, specials last
//! 3. `{"extras": any}`: model-specific data (may be `null`)
//! 4. one line per parameter, in insertion order:
//!    `{"name": str, "shape": [int, ...], "frozen": bool, "values": [f64, ...]}`
//!
//! Floats are written in shortest round-trip form, so reading a checkpoint
//! back yields bit-identical parameters.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensor::{ParameterSet, Tensor};
use crate::embeddings::tokens_hash;
use crate::{Error, Result};

pub const FORMAT: &str = "migdial-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub vocab_hash: String,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub vocab: Vec<String>,
    pub extras: Value,
    pub params: ParameterSet,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ExtrasLine {
    extras: Value,
}

#[derive(Serialize, Deserialize)]
struct ParamLine {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    values: Vec<f64>,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_checkpoint<W: Write>(mut out: W, ck: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        kind: ck.kind.clone(),
        vocab_hash: tokens_hash(&ck.vocab),
        config: ck.config.clone(),
    };
    write_line(&mut out, &header)?;
    write_line(
        &mut out,
        &VocabLine {
            vocab: ck.vocab.clone(),
        },
    )?;
    write_line(
        &mut out,
        &ExtrasLine {
            extras: ck.extras.clone(),
        },
    )?;
    for p in ck.params.ids() {
        let t = ck.params.value(p);
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "parameter {} has non-finite values",
                ck.params.name(p)
            )));
        }
        write_line(
            &mut out,
            &ParamLine {
                name: ck.params.name(p).to_string(),
                shape: t.shape().to_vec(),
                frozen: ck.params.is_frozen(p),
                values: t.data().to_vec(),
            },
        )?;
    }
    Ok(())
}

fn write_line<W: Write, T: Serialize>(out: &mut W, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, v).map_err(json_err)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::Format(format!("checkpoint ends before the {what} line"))),
        }
    };
    let at = |n: usize| move |e: serde_json::Error| Error::Format(format!("checkpoint line {n}: {e}"));

    let (n, l) = next("header")?;
    let header: CheckpointHeader = serde_json::from_str(&l).map_err(at(n))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    let (n, l) = next("vocab")?;
    let vocab: VocabLine = serde_json::from_str(&l).map_err(at(n))?;
    if tokens_hash(&vocab.vocab) != header.vocab_hash {
        return Err(Error::Format("vocabulary hash does not match the header".into()));
    }
    let (n, l) = next("extras")?;
    let extras: ExtrasLine = serde_json::from_str(&l).map_err(at(n))?;

    let mut params = ParameterSet::new();
    for (i, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let p: ParamLine = serde_json::from_str(&l).map_err(at(i + 1))?;
        let id = params.add(p.name, Tensor::new(p.shape, p.values)?)?;
        params.set_frozen(id, p.frozen);
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        vocab: vocab.vocab,
        extras: extras.extras,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut params = ParameterSet::new();
        params.add("a", Tensor::uniform(vec![3, 2], 1.0, &mut rng)).unwrap();
        let b = params.add("b", Tensor::vector(vec![1e-300, -0.1, 1.0 / 3.0])).unwrap();
        params.set_frozen(b, true);
        Checkpoint {
            kind: "seq2seq".into(),
            config: serde_json::json!({"hidden_size": 4}),
            vocab: vec!["x".into(), "<unk>".into()],
            extras: Value::Null,
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_tampered_vocab_and_version() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("\"x\"", "\"y\"", 1);
        assert!(read_checkpoint(tampered.as_bytes()).is_err());
        let v2 = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(read_checkpoint(v2.as_bytes()), Err(Error::Format(_))));
        assert!(read_checkpoint("".as_bytes()).is_err());
    }
}

//! Self-describing binary checkpoint container.
//!
//! Layout: the magic `AFTCKPT1`, a kind byte (0 = single DCN bank,
//! 1 = AutoFT composite), a length-prefixed JSON header (architecture,
//! vocabulary sizes and hash, policy settings), then every parameter
//! matrix with a name and shape header, values as little-endian f64.
//! Serialization is a pure function of the contents, so
//! save -> load -> save reproduces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dcn::{ArchConfig, CrossParams, DcnParams, DeepParams, EmbeddingTable, PredictionParams};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::policy::{AutoftModel, PolicyComponents, PolicyNetwork, PolicySet};

const MAGIC: &[u8; 8] = b"AFTCKPT1";
const KIND_DCN: u8 = 0;
const KIND_AUTOFT: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    vocab_sizes: Vec<usize>,
    vocab_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    policy_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    components: Option<(bool, bool, bool)>,
}

/// A loaded single-bank checkpoint.
#[derive(Debug, Clone)]
pub struct DcnCheckpoint {
    pub params: DcnParams,
    pub vocab_sizes: Vec<usize>,
    pub vocab_hash: String,
}

/// A loaded composite AutoFT checkpoint.
#[derive(Debug, Clone)]
pub struct AutoftCheckpoint {
    pub model: AutoftModel,
    pub vocab_sizes: Vec<usize>,
    pub vocab_hash: String,
    pub policy_hidden: usize,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Checkpoint {
    Dcn(DcnCheckpoint),
    Autoft(AutoftCheckpoint),
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> &str {
        match self {
            Checkpoint::Dcn(c) => &c.vocab_hash,
            Checkpoint::Autoft(c) => &c.vocab_hash,
        }
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, m: &DenseMatrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(header: &Header, kind: u8, tensors: &[(String, &DenseMatrix)]) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("header serialization is infallible");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, m) in tensors {
        write_tensor(&mut out, name, m);
    }
    out
}

fn collect_bank_tensors<'a>(prefix: &str, params: &'a DcnParams) -> Vec<(String, &'a DenseMatrix)> {
    let mut names = Vec::new();
    params.visit(&mut |name, _, _| names.push(format!("{prefix}{name}")));
    names.into_iter().zip(params.matrices()).collect()
}

/// Serializes a single parameter bank.
pub fn dcn_to_bytes(params: &DcnParams, vocab_sizes: &[usize], vocab_hash: &str) -> Vec<u8> {
    let header = Header {
        arch: params.arch.clone(),
        vocab_sizes: vocab_sizes.to_vec(),
        vocab_hash: vocab_hash.to_string(),
        policy_hidden: None,
        components: None,
    };
    encode(&header, KIND_DCN, &collect_bank_tensors("", params))
}

/// Serializes the AutoFT composite: frozen source bank, trainable target
/// bank and whichever policy networks exist.
pub fn autoft_to_bytes(
    model: &AutoftModel,
    vocab_sizes: &[usize],
    vocab_hash: &str,
    policy_hidden: usize,
) -> Vec<u8> {
    let c = model.components();
    let header = Header {
        arch: model.source.arch.clone(),
        vocab_sizes: vocab_sizes.to_vec(),
        vocab_hash: vocab_hash.to_string(),
        policy_hidden: Some(policy_hidden),
        components: Some((c.embed, c.cross, c.deep)),
    };
    let mut tensors = collect_bank_tensors("source.", &model.source);
    tensors.extend(collect_bank_tensors("target.", &model.target));
    let mut policy_names = Vec::new();
    model.policies.visit(&mut |name, _, _| policy_names.push(name.to_string()));
    tensors.extend(policy_names.into_iter().zip(model.policies.matrices()));
    encode(&header, KIND_AUTOFT, &tensors)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Config("corrupt checkpoint: truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, DenseMatrix)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Config("corrupt checkpoint: bad tensor name".into()))?
            .to_string();
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Config("corrupt checkpoint: tensor too large".into()))?;
        let raw = self.take(count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = DenseMatrix::from_values(rows, cols, values)
            .map_err(|e| Error::Config(format!("corrupt checkpoint tensor '{name}': {e}")))?;
        Ok((name, m))
    }
}

/// Sequential tensor stream with name verification.
struct TensorStream {
    tensors: std::vec::IntoIter<(String, DenseMatrix)>,
}

impl TensorStream {
    fn next(&mut self, expected: &str) -> Result<DenseMatrix> {
        let (name, m) = self
            .tensors
            .next()
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor '{expected}'")))?;
        if name != expected {
            return Err(Error::Config(format!(
                "checkpoint tensor order mismatch: expected '{expected}', found '{name}'"
            )));
        }
        Ok(m)
    }
}

fn bank_from_stream(
    prefix: &str,
    arch: &ArchConfig,
    vocab_sizes: &[usize],
    stream: &mut TensorStream,
) -> Result<DcnParams> {
    let mut tables = Vec::with_capacity(vocab_sizes.len());
    for i in 0..vocab_sizes.len() {
        tables.push(stream.next(&format!("{prefix}embed.{i}"))?);
    }
    let embedding = EmbeddingTable::from_tables(tables, arch.embed_dim)?;
    let n_cross = match arch.backbone {
        crate::dcn::Backbone::Dcn => arch.cross_layers,
        crate::dcn::Backbone::Dnn => 0,
    };
    let mut cross = CrossParams {
        weights: Vec::with_capacity(n_cross),
        biases: Vec::with_capacity(n_cross),
    };
    for l in 0..n_cross {
        cross.weights.push(stream.next(&format!("{prefix}cross.w.{l}"))?);
    }
    for l in 0..n_cross {
        cross.biases.push(stream.next(&format!("{prefix}cross.b.{l}"))?);
    }
    let mut deep = DeepParams {
        weights: Vec::with_capacity(arch.deep_layers.len()),
        biases: Vec::with_capacity(arch.deep_layers.len()),
    };
    for l in 0..arch.deep_layers.len() {
        deep.weights.push(stream.next(&format!("{prefix}deep.w.{l}"))?);
    }
    for l in 0..arch.deep_layers.len() {
        deep.biases.push(stream.next(&format!("{prefix}deep.b.{l}"))?);
    }
    let prediction = PredictionParams {
        weight: stream.next(&format!("{prefix}pred.w"))?,
        bias: stream.next(&format!("{prefix}pred.b"))?,
    };
    DcnParams::from_parts(arch.clone(), embedding, cross, deep, prediction)
}

fn policy_from_stream(name: &str, stream: &mut TensorStream) -> Result<PolicyNetwork> {
    let w1 = stream.next(&format!("policy.{name}.w1"))?;
    let b1 = stream.next(&format!("policy.{name}.b1"))?;
    let w2 = stream.next(&format!("policy.{name}.w2"))?;
    let b2 = stream.next(&format!("policy.{name}.b2"))?;
    if w2.rows() % 2 != 0 {
        return Err(Error::Config(format!("policy '{name}' has odd logit count")));
    }
    let decision_count = w2.rows() / 2;
    Ok(PolicyNetwork {
        w1,
        b1,
        w2,
        b2,
        decision_count,
    })
}

/// Parses a checkpoint of either kind.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Config("not an AutoFT checkpoint (bad magic)".into()));
    }
    let kind = r.u8()?;
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Config(format!("corrupt checkpoint header: {e}")))?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Config("corrupt checkpoint: trailing bytes".into()));
    }
    let mut stream = TensorStream {
        tensors: tensors.into_iter(),
    };
    match kind {
        KIND_DCN => {
            let params = bank_from_stream("", &header.arch, &header.vocab_sizes, &mut stream)?;
            Ok(Checkpoint::Dcn(DcnCheckpoint {
                params,
                vocab_sizes: header.vocab_sizes,
                vocab_hash: header.vocab_hash,
            }))
        }
        KIND_AUTOFT => {
            let source = bank_from_stream("source.", &header.arch, &header.vocab_sizes, &mut stream)?;
            let target = bank_from_stream("target.", &header.arch, &header.vocab_sizes, &mut stream)?;
            let (e, c, d) = header
                .components
                .ok_or_else(|| Error::Config("AutoFT checkpoint missing component flags".into()))?;
            let policies = PolicySet {
                embed: e.then(|| policy_from_stream("embed", &mut stream)).transpose()?,
                cross: c.then(|| policy_from_stream("cross", &mut stream)).transpose()?,
                deep: d.then(|| policy_from_stream("deep", &mut stream)).transpose()?,
            };
            Ok(Checkpoint::Autoft(AutoftCheckpoint {
                model: AutoftModel {
                    source,
                    target,
                    policies,
                },
                vocab_sizes: header.vocab_sizes,
                vocab_hash: header.vocab_hash,
                policy_hidden: header.policy_hidden.unwrap_or(0),
            }))
        }
        other => Err(Error::Config(format!("unknown checkpoint kind {other}"))),
    }
}

pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

impl PolicyComponents {
    pub fn as_tuple(&self) -> (bool, bool, bool) {
        (self.embed, self.cross, self.deep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcn::Backbone;
    use crate::numerics::SeededRng;

    fn arch() -> ArchConfig {
        ArchConfig {
            embed_dim: 3,
            cross_layers: 2,
            deep_layers: vec![6, 4],
            backbone: Backbone::Dcn,
        }
    }

    #[test]
    fn dcn_round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(17);
        let sizes = vec![5, 7, 4];
        let params = DcnParams::init(&arch(), &sizes, &mut rng).unwrap();
        let bytes = dcn_to_bytes(&params, &sizes, "deadbeef");
        let loaded = match from_bytes(&bytes).unwrap() {
            Checkpoint::Dcn(c) => c,
            _ => panic!("wrong kind"),
        };
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.vocab_hash, "deadbeef");
        let again = dcn_to_bytes(&loaded.params, &loaded.vocab_sizes, &loaded.vocab_hash);
        assert_eq!(again, bytes, "save -> load -> save must be identical");
    }

    #[test]
    fn autoft_round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(18);
        let sizes = vec![5, 7, 4];
        let pretrained = DcnParams::init(&arch(), &sizes, &mut rng).unwrap();
        let mut model = AutoftModel::from_pretrained(
            pretrained,
            9,
            PolicyComponents {
                embed: true,
                cross: false,
                deep: true,
            },
            &mut rng,
        )
        .unwrap();
        for m in model.target.matrices_mut() {
            for v in m.as_mut_slice() {
                *v += 0.01;
            }
        }
        let bytes = autoft_to_bytes(&model, &sizes, "cafe", 9);
        let loaded = match from_bytes(&bytes).unwrap() {
            Checkpoint::Autoft(c) => c,
            _ => panic!("wrong kind"),
        };
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.policy_hidden, 9);
        let again = autoft_to_bytes(&loaded.model, &loaded.vocab_sizes, &loaded.vocab_hash, 9);
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = SeededRng::new(19);
        let sizes = vec![3, 3];
        let params = DcnParams::init(&arch(), &sizes, &mut rng).unwrap();
        let bytes = dcn_to_bytes(&params, &sizes, "x");
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err(), "truncation");
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err(), "magic");
        let mut trailing = bytes;
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err(), "trailing bytes");
    }
}

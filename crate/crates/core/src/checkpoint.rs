//! Versioned checkpoint container.
//!
//! ```text
//! "MBCKPT\0"  u32 LE version
//! repeated:   [u8; 4] tag, u64 LE payload length, payload
//! ```
//!
//! Sections, in order: `KIND`, `CONF` (canonical `key = value` text), `VOCB`,
//! then for networks `PARM` and `ADAM`, terminated by an empty `END\0`.
//! Strings are u32 LE length + UTF-8. Tensors are name, u32 rank, u64 dims,
//! and little-endian f64 values.

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MetadataVocab};
use crate::model::{Example, Model, ModelConfig, Params};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Anything `evaluate` can score: a trained network or the constant-mean baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Network(Box<Model>),
    ConstantMean { mos: f64, vocab: MetadataVocab },
}

impl Predictor {
    pub fn vocab(&self) -> &MetadataVocab {
        match self {
            Predictor::Network(m) => &m.vocab,
            Predictor::ConstantMean { vocab, .. } => vocab,
        }
    }

    /// Feature requirements; the constant predictor needs none.
    pub fn features(&self) -> FeatureConfig {
        match self {
            Predictor::Network(m) => m.features,
            Predictor::ConstantMean { .. } => FeatureConfig::default(),
        }
    }

    pub fn predict_batch(&self, examples: &[Example], blinded: bool) -> Result<Vec<(String, f64)>> {
        match self {
            Predictor::Network(m) => m.predict_batch(examples, blinded),
            Predictor::ConstantMean { mos, .. } => Ok(examples
                .iter()
                .map(|e| (e.record.utterance_id.clone(), *mos))
                .collect()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Predictor::Network(m) => m.features.to_string(),
            Predictor::ConstantMean { .. } => "Constant Mean".into(),
        }
    }
}

impl From<Model> for Predictor {
    fn from(m: Model) -> Self {
        Predictor::Network(Box::new(m))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, params: &Params) {
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        put_str(out, &name);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn features_text(kv: &mut KeyValues, f: &FeatureConfig) {
    kv.set("use_acoustic", f.use_acoustic);
    kv.set("use_system", f.use_system);
    kv.set("use_rater", f.use_rater);
    kv.set("rater_blinded", f.rater_blinded);
    kv.set("use_baseline_mos", f.use_baseline_mos);
    kv.set("unknown_dropout_p", format!("{:?}", f.unknown_dropout_p));
}

fn features_from(kv: &KeyValues) -> Result<FeatureConfig> {
    Ok(FeatureConfig {
        use_acoustic: kv.require("use_acoustic")?,
        use_system: kv.require("use_system")?,
        use_rater: kv.require("use_rater")?,
        rater_blinded: kv.require("rater_blinded")?,
        use_baseline_mos: kv.require("use_baseline_mos")?,
        unknown_dropout_p: kv.require("unknown_dropout_p")?,
    })
}

pub fn encode_checkpoint(predictor: &Predictor) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let mut conf = KeyValues::new();
    let kind = match predictor {
        Predictor::Network(m) => {
            m.config.write_to(&mut conf);
            features_text(&mut conf, &m.features);
            "network"
        }
        Predictor::ConstantMean { mos, .. } => {
            conf.set("constant_mos", format!("{mos:?}"));
            "constant_mean"
        }
    };
    w.section(b"KIND", kind.as_bytes());
    w.section(b"CONF", conf.render().as_bytes());

    let vocab = predictor.vocab();
    let mut payload = Vec::new();
    for ids in [vocab.systems(), vocab.rater_groups()] {
        payload.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            put_str(&mut payload, id);
        }
    }
    w.section(b"VOCB", &payload);

    if let Predictor::Network(m) = predictor {
        let mut payload = Vec::new();
        put_tensors(&mut payload, &m.params);
        w.section(b"PARM", &payload);
        let mut payload = m.adam.step.to_le_bytes().to_vec();
        put_tensors(&mut payload, &m.adam.m);
        put_tensors(&mut payload, &m.adam.v);
        w.section(b"ADAM", &payload);
    }
    w.section(b"END\0", &[]);
    w.buf
}

pub fn save_checkpoint(predictor: &Predictor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(predictor)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Predictor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Format(format!("corrupt checkpoint: {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn section(&mut self) -> Result<([u8; 4], Reader<'a>)> {
        let tag: [u8; 4] = self.take(4)?.try_into().unwrap();
        let len = usize::try_from(self.u64()?).map_err(|_| corrupt("section too large"))?;
        let bytes = self.take(len)?;
        Ok((tag, Reader { bytes, pos: 0 }))
    }

    /// Reads tensors into `params`, which supplies the expected names and shapes.
    fn tensors_into(&mut self, params: &mut Params) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(corrupt(&format!(
                "{count} tensors stored, configuration implies {}",
                expected.len()
            )));
        }
        for ((name, shape), target) in expected.into_iter().zip(params.tensors_mut()) {
            let stored = self.string()?;
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if stored != name || dims != shape {
                return Err(corrupt(&format!(
                    "tensor `{stored}` {dims:?} does not match expected `{name}` {shape:?}"
                )));
            }
            for v in target.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Predictor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }

    let mut kind = None;
    let mut conf = None;
    let mut vocab = None;
    let mut parm = None;
    let mut adam = None;
    loop {
        let (tag, body) = r.section()?;
        match &tag {
            b"KIND" => kind = Some(String::from_utf8_lossy(body.bytes).into_owned()),
            b"CONF" => {
                let text = std::str::from_utf8(body.bytes).map_err(|_| corrupt("CONF not UTF-8"))?;
                conf = Some(KeyValues::parse(text, "checkpoint").map_err(|e| corrupt(&e.to_string()))?);
            }
            b"VOCB" => {
                let mut body = body;
                let mut lists = Vec::new();
                for _ in 0..2 {
                    let n = body.u32()? as usize;
                    lists.push((0..n).map(|_| body.string()).collect::<Result<Vec<_>>>()?);
                }
                let groups = lists.pop().unwrap();
                let systems = lists.pop().unwrap();
                vocab = Some(
                    MetadataVocab::new(systems, groups).map_err(|e| corrupt(&e.to_string()))?,
                );
            }
            b"PARM" => parm = Some(body),
            b"ADAM" => adam = Some(body),
            b"END\0" => break,
            // Unknown sections are skipped.
            _ => {}
        }
    }
    if !r.done() {
        return Err(corrupt("trailing bytes after END section"));
    }

    let conf = conf.ok_or_else(|| corrupt("missing CONF section"))?;
    let vocab = vocab.ok_or_else(|| corrupt("missing VOCB section"))?;
    let in_conf = |e: Error| corrupt(&format!("CONF: {e}"));
    match kind.as_deref() {
        Some("constant_mean") => Ok(Predictor::ConstantMean {
            mos: conf.require("constant_mos").map_err(in_conf)?,
            vocab,
        }),
        Some("network") => {
            let config = ModelConfig::read_from(&conf).map_err(in_conf)?;
            let features = features_from(&conf).map_err(in_conf)?;
            let mut model = Model::init(config, features, vocab).map_err(in_conf)?;
            let mut parm = parm.ok_or_else(|| corrupt("missing PARM section"))?;
            parm.tensors_into(&mut model.params)?;
            let mut adam = adam.ok_or_else(|| corrupt("missing ADAM section"))?;
            model.adam.step = adam.u64()?;
            adam.tensors_into(&mut model.adam.m)?;
            adam.tensors_into(&mut model.adam.v)?;
            if !parm.done() || !adam.done() {
                return Err(corrupt("oversized tensor section"));
            }
            Ok(Predictor::Network(Box::new(model)))
        }
        Some(other) => Err(corrupt(&format!("unknown kind `{other}`"))),
        None => Err(corrupt("missing KIND section")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let vocab = MetadataVocab::new(vec!["a".into(), "b".into()], vec!["g".into()]).unwrap();
        let cfg = ModelConfig {
            embed_dim: 3,
            conv_channels: vec![4, 2],
            pooled_dim: 2,
            fc_dims: vec![5, 4, 3],
            seed: 5,
            ..Default::default()
        };
        Model::init(cfg, "W2V+R+S+M".parse().unwrap(), vocab).unwrap()
    }

    #[test]
    fn encode_decode_is_exact() {
        let mut m = model();
        m.adam.step = 17;
        m.adam.v.tensors_mut()[1][0] = 0.123;
        let p = Predictor::from(m);
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..7], b"MBCKPT\0");
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
    }

    #[test]
    fn constant_mean_roundtrip() {
        let vocab = MetadataVocab::new(vec!["a".into()], vec!["g1".into(), "g2".into()]).unwrap();
        let p = Predictor::ConstantMean { mos: 2.93, vocab };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap(), p);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode_checkpoint(&Predictor::from(model()));
        for cut in [0, 5, 11, 20, bytes.len() / 2, bytes.len() - 13, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode_checkpoint(&Predictor::from(model()));
        bytes[7] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}

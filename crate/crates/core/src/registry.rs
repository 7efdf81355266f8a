//! Module store: per-language encoders and decoders, freezing, pipeline
//! composition (translation, autoencoding, zero-shot) and checkpointing.
//!
//! A system with N languages holds exactly 2N modules. Adding a language
//! registers one new encoder and leaves every existing parameter untouched.
//!
//! Checkpoint format (binary, little-endian): magic `IMT1`; u32 version;
//! u32 module count; per module: length-prefixed UTF-8 language, u8 role,
//! u8 frozen, length-prefixed key=value config text, u32 vocab fingerprint,
//! u32 tensor count, per tensor: length-prefixed name, u8 rank, u64 extents,
//! raw 32-bit floats; trailing CRC32 of all preceding bytes. Parameters are
//! stored 32-bit; greedy decode is unchanged by the rounding.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::dvq::{quantize_decomposed, CodebookSet};
use crate::error::{Error, Result};
use crate::tensor::{IdMatrix, Mask, Tape, Tensor};
use crate::transformer::{encode, generate_greedy, DecoderStack, EncoderStack, ModelConfig};
use crate::util::crc32;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModuleRole {
    Encoder,
    Decoder,
}

impl ModuleRole {
    fn to_byte(self) -> u8 {
        match self {
            ModuleRole::Encoder => 0,
            ModuleRole::Decoder => 1,
        }
    }
}

/// Language tag reserved for the shared interlingua quantizer entry in
/// checkpoints (serialized with role byte 2 alongside the real modules).
const CODEBOOK_TAG: &str = "interlingua";
const CODEBOOK_ROLE: u8 = 2;

#[derive(Clone)]
pub enum ModuleStack {
    Encoder(EncoderStack),
    Decoder(DecoderStack),
}

impl ModuleStack {
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        match self {
            ModuleStack::Encoder(s) => s.named_params(),
            ModuleStack::Decoder(s) => s.named_params(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            ModuleStack::Encoder(s) => &s.config,
            ModuleStack::Decoder(s) => &s.config,
        }
    }
}

pub struct LanguageModule {
    pub language: String,
    pub role: ModuleRole,
    pub frozen: bool,
    pub vocab_fingerprint: u32,
    pub stack: ModuleStack,
}

impl LanguageModule {
    pub fn new(
        language: &str,
        role: ModuleRole,
        stack: ModuleStack,
        vocab_fingerprint: u32,
    ) -> Self {
        LanguageModule {
            language: language.to_string(),
            role,
            frozen: false,
            vocab_fingerprint,
            stack,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.stack.config()
    }
}

/// All registered modules plus the optional shared quantizer.
#[derive(Default)]
pub struct SystemState {
    pub modules: BTreeMap<(String, ModuleRole), LanguageModule>,
    pub codebooks: Option<CodebookSet>,
}

/// A read-only composition of one encoder with one decoder.
pub struct Pipeline {
    pub src_lang: String,
    pub tgt_lang: String,
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
    pub codebooks: Option<CodebookSet>,
}

impl Pipeline {
    /// Greedy-decode a batch of source id rows into target id payloads
    /// (control tokens stripped).
    pub fn translate_ids(&self, src_ids: &IdMatrix, src_mask: &Mask) -> Result<Vec<Vec<u32>>> {
        let tape = Tape::new();
        let enc_out = encode(&tape, &self.encoder, src_ids, src_mask)?;
        let max_out = 2 * src_ids.cols + 5;
        let out = match &self.codebooks {
            Some(cb) => {
                let pooled = tape.masked_mean_time(&enc_out, src_mask)?;
                let (_, zq) = quantize_decomposed(cb, &pooled)?;
                let b = src_ids.rows;
                let d = zq.shape()[1];
                let memory = Tensor::new(vec![b, 1, d], zq.to_vec());
                generate_greedy(&self.decoder, &memory, &Mask::all_true(b, 1), max_out)
            }
            None => generate_greedy(&self.decoder, &enc_out, src_mask, max_out),
        };
        tape.clear();
        out
    }
}

impl SystemState {
    pub fn new() -> Self {
        SystemState::default()
    }

    pub fn get(&self, language: &str, role: ModuleRole) -> Option<&LanguageModule> {
        self.modules.get(&(language.to_string(), role))
    }

    fn require(&self, language: &str, role: ModuleRole) -> Result<&LanguageModule> {
        self.get(language, role).ok_or_else(|| {
            Error::MissingModule(format!("{}/{:?}", language, role).to_lowercase())
        })
    }

    /// Store a module, auditing that no tensor is shared with an existing
    /// module (or within the new one).
    pub fn register_module(&mut self, module: LanguageModule, overwrite: bool) -> Result<()> {
        let key = (module.language.clone(), module.role);
        if !overwrite && self.modules.contains_key(&key) {
            return Err(Error::DuplicateModule(format!(
                "{}/{:?}",
                key.0, key.1
            )));
        }
        let mut seen: HashSet<usize> = HashSet::new();
        for (other_key, other) in &self.modules {
            if *other_key == key && overwrite {
                continue;
            }
            for (_, t) in other.stack.named_params() {
                seen.insert(t.ptr_id());
            }
        }
        if let Some(cb) = &self.codebooks {
            for (_, t) in cb.named_params() {
                seen.insert(t.ptr_id());
            }
        }
        for (name, t) in module.stack.named_params() {
            if !seen.insert(t.ptr_id()) {
                return Err(Error::ParameterAliasing(format!(
                    "{}/{:?}:{}",
                    key.0, key.1, name
                )));
            }
        }
        self.modules.insert(key, module);
        Ok(())
    }

    pub fn set_codebooks(&mut self, cb: CodebookSet) {
        self.codebooks = Some(cb);
    }

    /// Toggle the freeze flag. Frozen parameters stop requiring gradients,
    /// so both backward writes and optimizer updates skip them.
    pub fn set_frozen(&mut self, language: &str, role: ModuleRole, frozen: bool) -> Result<()> {
        let key = (language.to_string(), role);
        let module = self
            .modules
            .get_mut(&key)
            .ok_or_else(|| Error::MissingModule(format!("{}/{:?}", language, role).to_lowercase()))?;
        module.frozen = frozen;
        for (_, t) in module.stack.named_params() {
            t.set_requires_grad(!frozen);
        }
        Ok(())
    }

    /// Compose encoder(src) with decoder(tgt). Fingerprints, when supplied,
    /// must match the fingerprints the modules were trained with.
    pub fn compose_pipeline(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        src_fingerprint: Option<u32>,
        tgt_fingerprint: Option<u32>,
    ) -> Result<Pipeline> {
        let enc_mod = self.require(src_lang, ModuleRole::Encoder)?;
        let dec_mod = self.require(tgt_lang, ModuleRole::Decoder)?;
        if let Some(fp) = src_fingerprint {
            if fp != enc_mod.vocab_fingerprint {
                return Err(Error::VocabFingerprintMismatch {
                    language: src_lang.to_string(),
                    expected: enc_mod.vocab_fingerprint,
                    actual: fp,
                });
            }
        }
        if let Some(fp) = tgt_fingerprint {
            if fp != dec_mod.vocab_fingerprint {
                return Err(Error::VocabFingerprintMismatch {
                    language: tgt_lang.to_string(),
                    expected: dec_mod.vocab_fingerprint,
                    actual: fp,
                });
            }
        }
        let encoder = match &enc_mod.stack {
            ModuleStack::Encoder(s) => s.clone(),
            ModuleStack::Decoder(_) => unreachable!("encoder slot holds a decoder"),
        };
        let decoder = match &dec_mod.stack {
            ModuleStack::Decoder(s) => s.clone(),
            ModuleStack::Encoder(_) => unreachable!("decoder slot holds an encoder"),
        };
        if encoder.config.model_dim != decoder.config.model_dim {
            return Err(Error::DimMismatch(format!(
                "encoder D={} vs decoder D={}",
                encoder.config.model_dim, decoder.config.model_dim
            )));
        }
        Ok(Pipeline {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            encoder,
            decoder,
            codebooks: self.codebooks.clone(),
        })
    }

    /// Copy of every parameter value, for best-state snapshots during
    /// training. Order matches [`SystemState::restore_values`].
    pub fn snapshot_values(&self) -> Vec<Vec<f64>> {
        self.iter_params().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore_values(&self, snapshot: &[Vec<f64>]) {
        for ((_, t), vals) in self.iter_params().zip(snapshot) {
            t.set_values(vals);
        }
    }

    fn iter_params(&self) -> impl Iterator<Item = (String, Tensor)> + '_ {
        self.modules
            .values()
            .flat_map(|m| m.stack.named_params())
            .chain(self.codebooks.iter().flat_map(|cb| cb.named_params()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut buf, CHECKPOINT_VERSION);
        let count = self.modules.len() + usize::from(self.codebooks.is_some());
        write_u32(&mut buf, count as u32);
        for module in self.modules.values() {
            write_str(&mut buf, &module.language);
            buf.push(module.role.to_byte());
            buf.push(u8::from(module.frozen));
            write_str(&mut buf, &module.config().to_text());
            write_u32(&mut buf, module.vocab_fingerprint);
            write_tensors(&mut buf, &module.stack.named_params());
        }
        if let Some(cb) = &self.codebooks {
            write_str(&mut buf, CODEBOOK_TAG);
            buf.push(CODEBOOK_ROLE);
            buf.push(0);
            let cfg = format!(
                "n={}\nk={}\nsub_dim={}\nbeta={}\n",
                cb.n, cb.k, cb.sub_dim, cb.commitment_weight
            );
            write_str(&mut buf, &cfg);
            write_u32(&mut buf, 0);
            write_tensors(&mut buf, &cb.named_params());
        }
        let crc = crc32(&buf);
        write_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<SystemState> {
        if data.len() < 12 {
            return Err(Error::ChecksumMismatch);
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32(body) != stored {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { data: body, pos: 0 };
        let magic = r.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let count = r.u32()? as usize;
        let mut state = SystemState::new();
        for _ in 0..count {
            let language = r.string()?;
            let role = r.u8()?;
            let frozen = r.u8()? != 0;
            let config_text = r.string()?;
            let fingerprint = r.u32()?;
            let tensors = r.tensors()?;
            match role {
                0 | 1 => {
                    let config = ModelConfig::from_text(&config_text)?;
                    let (role, stack) = if role == 0 {
                        let s = EncoderStack::init(config, 0)?;
                        assign_params(&s.named_params(), &tensors)?;
                        (ModuleRole::Encoder, ModuleStack::Encoder(s))
                    } else {
                        let s = DecoderStack::init(config, 0)?;
                        assign_params(&s.named_params(), &tensors)?;
                        (ModuleRole::Decoder, ModuleStack::Decoder(s))
                    };
                    let mut module = LanguageModule::new(&language, role, stack, fingerprint);
                    module.frozen = frozen;
                    for (_, t) in module.stack.named_params() {
                        t.set_requires_grad(!frozen);
                    }
                    state.register_module(module, false)?;
                }
                CODEBOOK_ROLE => {
                    let cb = codebooks_from_parts(&config_text, &tensors)?;
                    state.codebooks = Some(cb);
                }
                other => {
                    return Err(Error::Config(format!("unknown module role byte {}", other)))
                }
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SystemState> {
        SystemState::from_bytes(&fs::read(path)?)
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensors(buf: &mut Vec<u8>, params: &[(String, Tensor)]) {
    write_u32(buf, params.len() as u32);
    for (name, t) in params {
        write_str(buf, name);
        let shape = t.shape();
        buf.push(shape.len() as u8);
        for &e in &shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.to_vec() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

type StoredTensor = (Vec<usize>, Vec<f64>);

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Config("checkpoint truncated inside body".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::InvalidUtf8)
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, StoredTensor>> {
        let count = self.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.bytes(numel * 4)?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            out.insert(name, (shape, vals));
        }
        Ok(out)
    }
}

fn assign_params(
    params: &[(String, Tensor)],
    stored: &BTreeMap<String, StoredTensor>,
) -> Result<()> {
    if params.len() != stored.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, module expects {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, t) in params {
        let (shape, vals) = stored
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {}", name)))?;
        if *shape != t.shape() {
            return Err(Error::Config(format!(
                "tensor {} shape {:?} vs expected {:?}",
                name,
                shape,
                t.shape()
            )));
        }
        t.set_values(vals);
    }
    Ok(())
}

fn codebooks_from_parts(
    config_text: &str,
    tensors: &BTreeMap<String, StoredTensor>,
) -> Result<CodebookSet> {
    let (mut n, mut k, mut sub_dim, mut beta) = (0usize, 0usize, 0usize, 0.25f64);
    for line in config_text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad quantizer config line: {}", line)))?;
        let bad = || Error::Config(format!("bad quantizer value for {}: {}", key, v));
        match key {
            "n" => n = v.parse().map_err(|_| bad())?,
            "k" => k = v.parse().map_err(|_| bad())?,
            "sub_dim" => sub_dim = v.parse().map_err(|_| bad())?,
            "beta" => beta = v.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown quantizer key: {}", other))),
        }
    }
    let mut cb = crate::dvq::codebook_init(n, k, n * sub_dim, 0)?;
    cb.commitment_weight = beta;
    assign_params(&cb.named_params(), tensors)?;
    Ok(cb)
}

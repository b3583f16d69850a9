//! Binary checkpoint of a frozen network.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "MOGNETCK" | version u16
//! n u32 | g u32 | k u32 | stages u32 | blocks_per_stage u32 | classes u32
//! input_channels u32 | input_size u32 | master_seed u64 | ca_rule u8
//! stem        ternary, 2 bits/weight (00 = 0, 01 = +1, 11 = -1), LSB first
//! stem_bn     channels u32, gamma, beta, mean, var as f32 arrays, epsilon f32
//! per block, twice:
//!     rule u8 | width u32 | steps u32 | seed row, 1 bit/cell
//!     reduce binary, 1 bit/weight (1 = +1)
//!     grouped ternary
//! per block: bn1, bn2
//! head binary | head_bn
//! ```
//!
//! Every packed field is padded to a whole byte with zero bits. Expansion
//! kernels are not stored; they are regenerated from their seed rows.

use std::fs;
use std::path::Path;

use crate::blocks::ModelConfig;
use crate::ca::{generate_kernel, CaConfig};
use crate::error::{Error, Result};
use crate::model::{QuantBlock, QuantCflog, QuantModel};
use crate::tensor::BnParams;

pub const MAGIC: &[u8; 8] = b"MOGNETCK";
pub const VERSION: u16 = 1;

pub fn pack_ternary(w: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; w.len().div_ceil(4)];
    for (i, &v) in w.iter().enumerate() {
        let code = match v {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b11,
            other => panic!("not a ternary weight: {other}"),
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    out
}

pub fn pack_binary(w: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; w.len().div_ceil(8)];
    for (i, &v) in w.iter().enumerate() {
        assert!(v == 1 || v == -1, "not a binary weight: {v}");
        if v == 1 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b & 1) << (i % 8);
    }
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn bn(&mut self, p: &BnParams) {
        self.u32(p.channels());
        for v in [&p.gamma, &p.beta, &p.moving_mean, &p.moving_var] {
            v.iter().for_each(|&x| self.f32(x));
        }
        self.f32(p.epsilon);
    }
}

pub fn to_bytes(model: &QuantModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u16(VERSION);
    for v in [c.n, c.g, c.k as usize, c.stages, c.blocks_per_stage, c.class_count, c.input_channels, c.input_size] {
        w.u32(v);
    }
    w.u64(c.master_seed);
    w.u8(c.ca_rule);
    w.bytes(&pack_ternary(&model.stem));
    w.bn(&model.stem_bn);
    for b in &model.blocks {
        for cf in &b.cflogs {
            let ca = &cf.config.ca;
            w.u8(ca.rule);
            w.u32(ca.width);
            w.u32(ca.steps);
            w.bytes(&pack_bits(&ca.seed_row));
            w.bytes(&pack_binary(&cf.reduce));
            w.bytes(&pack_ternary(&cf.grouped));
        }
        w.bn(&b.bns[0]);
        w.bn(&b.bns[1]);
    }
    w.bytes(&pack_binary(&model.head));
    w.bn(&model.head_bn);
    w.0
}

pub fn export_checkpoint(model: &QuantModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(self.err(format!("truncated {what}: need {len} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self, what: &str) -> Result<f64> {
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            self.pos -= 4;
            return Err(self.err(format!("{what} is not finite")));
        }
        Ok(f64::from(v))
    }

    fn ternary(&mut self, count: usize, what: &str) -> Result<Vec<i8>> {
        let start = self.pos;
        let bytes = self.take(count.div_ceil(4), what)?;
        let mut out = Vec::with_capacity(count);
        for (i, &byte) in bytes.iter().enumerate() {
            for slot in 0..4 {
                let code = (byte >> (2 * slot)) & 0b11;
                let idx = i * 4 + slot;
                if idx >= count {
                    if code != 0 {
                        return Err(Error::Parse {
                            offset: start + i,
                            reason: format!("non-zero padding in {what}"),
                        });
                    }
                    continue;
                }
                out.push(match code {
                    0b00 => 0,
                    0b01 => 1,
                    0b11 => -1,
                    _ => {
                        return Err(Error::Parse {
                            offset: start + i,
                            reason: format!("invalid ternary code 10 in {what}"),
                        })
                    }
                });
            }
        }
        Ok(out)
    }

    fn bits(&mut self, count: usize, what: &str) -> Result<Vec<u8>> {
        let start = self.pos;
        let bytes = self.take(count.div_ceil(8), what)?;
        let mut out = Vec::with_capacity(count);
        for (i, &byte) in bytes.iter().enumerate() {
            for slot in 0..8 {
                let bit = (byte >> slot) & 1;
                if i * 8 + slot < count {
                    out.push(bit);
                } else if bit != 0 {
                    return Err(Error::Parse {
                        offset: start + i,
                        reason: format!("non-zero padding in {what}"),
                    });
                }
            }
        }
        Ok(out)
    }

    fn binary(&mut self, count: usize, what: &str) -> Result<Vec<i8>> {
        Ok(self.bits(count, what)?.into_iter().map(|b| if b == 1 { 1 } else { -1 }).collect())
    }

    fn bn(&mut self, channels: usize, what: &str) -> Result<BnParams> {
        let at = self.pos;
        let c = self.u32(what)?;
        if c != channels {
            return Err(Error::Parse {
                offset: at,
                reason: format!("{what} has {c} channels, expected {channels}"),
            });
        }
        let read = |r: &mut Self| (0..c).map(|_| r.f32(what)).collect::<Result<Vec<f64>>>();
        let gamma = read(self)?;
        let beta = read(self)?;
        let moving_mean = read(self)?;
        let moving_var = read(self)?;
        let at = self.pos;
        let epsilon = self.f32(what)?;
        let p = BnParams {
            gamma,
            beta,
            moving_mean,
            moving_var,
            epsilon,
        };
        p.validate().map_err(|e| Error::Parse {
            offset: at,
            reason: format!("{what}: {e}"),
        })?;
        Ok(p)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<QuantModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let cfg_start = r.pos;
    let mut f = [0usize; 8];
    for (v, name) in f.iter_mut().zip([
        "n",
        "g",
        "k",
        "stages",
        "blocks_per_stage",
        "classes",
        "input_channels",
        "input_size",
    ]) {
        *v = r.u32(name)?;
    }
    let config = ModelConfig {
        n: f[0],
        g: f[1],
        k: f[2] as u32,
        stages: f[3],
        blocks_per_stage: f[4],
        class_count: f[5],
        input_channels: f[6],
        input_size: f[7],
        master_seed: r.u64("master_seed")?,
        ca_rule: r.u8("ca_rule")?,
    };
    config.validate().map_err(|e| Error::Parse {
        offset: cfg_start,
        reason: format!("invalid model config: {e}"),
    })?;
    let (n, m) = (config.n, config.latent());
    let stem = r.ternary(n * config.input_channels * 9, "stem weights")?;
    let stem_bn = r.bn(n, "stem batch norm")?;
    let mut blocks = Vec::with_capacity(config.block_count());
    for b in 0..config.block_count() {
        let cflog = |r: &mut Reader| -> Result<QuantCflog> {
            let at = r.pos;
            let rule = r.u8("ca rule")?;
            let width = r.u32("ca width")?;
            let steps = r.u32("ca steps")?;
            if width != n || steps != m {
                return Err(Error::Parse {
                    offset: at,
                    reason: format!("block {b}: automaton {width}x{steps}, expected {n}x{m}"),
                });
            }
            let seed = r.bits(width, "ca seed row")?;
            let ca = CaConfig::new(rule, width, steps, seed).map_err(|e| Error::Parse {
                offset: at,
                reason: format!("block {b}: {e}"),
            })?;
            let cfg = config.cflog_config(ca.seed_row.clone())?;
            let cfg = crate::blocks::CflogConfig { ca, ..cfg };
            let reduce = r.binary(m * n, "reduce weights")?;
            let grouped = r.ternary(m * (m / config.g) * 9, "grouped weights")?;
            Ok(QuantCflog {
                expand: generate_kernel(&cfg.ca)?,
                config: cfg,
                reduce,
                grouped,
            })
        };
        let c0 = cflog(&mut r)?;
        let c1 = cflog(&mut r)?;
        let b0 = r.bn(n, "block batch norm")?;
        let b1 = r.bn(n, "block batch norm")?;
        blocks.push(QuantBlock {
            cflogs: [c0, c1],
            bns: [b0, b1],
        });
    }
    let head = r.binary(config.class_count * n, "head weights")?;
    let head_bn = r.bn(config.class_count, "head batch norm")?;
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(QuantModel {
        config,
        stem,
        stem_bn,
        blocks,
        head,
        head_bn,
    })
}

pub fn import_checkpoint(path: &Path) -> Result<QuantModel> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn model() -> QuantModel {
        let cfg = ModelConfig {
            n: 8,
            g: 2,
            k: 2,
            stages: 2,
            blocks_per_stage: 1,
            class_count: 3,
            input_channels: 3,
            input_size: 8,
            master_seed: 4,
            ca_rule: 30,
        };
        build_model(&cfg).unwrap().to_quant()
    }

    #[test]
    fn packing_codes() {
        assert_eq!(pack_ternary(&[0, 1, -1, 1, -1]), vec![0b01_11_01_00, 0b11]);
        assert_eq!(pack_binary(&[1, -1, -1, 1, 1, 1, 1, 1, -1]), vec![0b1111_1001, 0]);
    }

    #[test]
    fn round_trip_is_exact() {
        let q = model();
        let bytes = to_bytes(&q);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corruption_reports_offsets() {
        let bytes = to_bytes(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(from_bytes(&bad).unwrap_err(), Error::Parse { offset: 0, reason: "bad magic".into() });
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Parse { offset: 8, .. })));
        // k = 0
        let mut bad = bytes.clone();
        bad[18..22].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Parse { offset: 10, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Parse { offset, .. }) if offset == bytes.len()));
        assert!(matches!(from_bytes(&[]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn file_round_trip() {
        let q = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        export_checkpoint(&q, &path).unwrap();
        assert_eq!(import_checkpoint(&path).unwrap(), q);
        assert!(matches!(import_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    proptest::proptest! {
        #[test]
        fn packed_weights_unpack(ternary in proptest::collection::vec(-1i8..=1, 0..70), bits in proptest::collection::vec(proptest::bool::ANY, 0..70)) {
            let binary: Vec<i8> = bits.iter().map(|&b| if b { 1 } else { -1 }).collect();
            let mut r = Reader { buf: &pack_ternary(&ternary), pos: 0 };
            proptest::prop_assert_eq!(r.ternary(ternary.len(), "t").unwrap(), ternary.clone());
            proptest::prop_assert_eq!(r.pos, r.buf.len());
            let packed = pack_binary(&binary);
            let mut r = Reader { buf: &packed, pos: 0 };
            proptest::prop_assert_eq!(r.binary(binary.len(), "b").unwrap(), binary);
        }
    }

    #[test]
    fn invalid_ternary_code_is_rejected() {
        let bytes = to_bytes(&model());
        let stem_at = 8 + 2 + 8 * 4 + 8 + 1;
        let mut bad = bytes.clone();
        bad[stem_at] = 0b10;
        assert!(matches!(from_bytes(&bad), Err(Error::Parse { offset, .. }) if offset == stem_at));
    }
}

//! Flat binary container of named float64 arrays and u64 scalars.
//!
//! Used for model checkpoints and AGOP snapshots. Payloads are written as
//! little-endian bit patterns, so a load/save round trip is bit-exact.
//!
//! Layout: magic `GOLDBIN1`, then a u32 entry count, then per entry a
//! length-prefixed UTF-8 name, a one-byte kind tag (0 = f64 array,
//! 1 = u64 scalar), and the payload (u64 length + values for arrays).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Activation, Backbone, ClassifierHead, PrototypeBank};

const MAGIC: &[u8; 8] = b"GOLDBIN1";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64s(Vec<f64>),
    U64(u64),
}

/// Named entries with deterministic (sorted) write order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn put_f64s(&mut self, name: &str, values: Vec<f64>) {
        self.entries.insert(name.to_string(), Entry::F64s(values));
    }

    pub fn put_u64(&mut self, name: &str, value: u64) {
        self.entries.insert(name.to_string(), Entry::U64(value));
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.entries.get(name) {
            Some(Entry::F64s(v)) => Ok(v),
            Some(Entry::U64(_)) => Err(Error::data(format!("entry `{name}` is a scalar, not an array"))),
            None => Err(Error::data(format!("missing entry `{name}`"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.entries.get(name) {
            Some(Entry::U64(v)) => Ok(*v),
            Some(Entry::F64s(_)) => Err(Error::data(format!("entry `{name}` is an array, not a scalar"))),
            None => Err(Error::data(format!("missing entry `{name}`"))),
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u32).to_le_bytes())?;
            out.write_all(bytes)?;
            match entry {
                Entry::F64s(values) => {
                    out.write_all(&[0u8])?;
                    out.write_all(&(values.len() as u64).to_le_bytes())?;
                    for v in values {
                        out.write_all(&v.to_bits().to_le_bytes())?;
                    }
                }
                Entry::U64(v) => {
                    out.write_all(&[1u8])?;
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a GOLDBIN1 container"));
        }
        let count = read_u32(&mut input)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            if name_len > 4096 {
                return Err(Error::data("entry name too long"));
            }
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::data("entry name is not UTF-8"))?;
            let mut kind = [0u8; 1];
            input.read_exact(&mut kind)?;
            let entry = match kind[0] {
                0 => {
                    let len = read_u64(&mut input)? as usize;
                    let mut values = Vec::with_capacity(len);
                    let mut buf = [0u8; 8];
                    for _ in 0..len {
                        input.read_exact(&mut buf)?;
                        values.push(f64::from_bits(u64::from_le_bytes(buf)));
                    }
                    Entry::F64s(values)
                }
                1 => Entry::U64(read_u64(&mut input)?),
                k => return Err(Error::data(format!("unknown entry kind {k}"))),
            };
            entries.insert(name, entry);
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Container::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Checkpoint of the frozen model plus prototypes.
pub fn checkpoint_to_container(
    backbone: &Backbone,
    head: &ClassifierHead,
    protos: &PrototypeBank,
) -> Container {
    let mut c = Container::new();
    c.put_u64("dims.l_in", backbone.input_dim() as u64);
    c.put_u64("dims.l", backbone.feature_dim() as u64);
    c.put_u64("dims.c", head.classes() as u64);
    c.put_u64(
        "backbone.activation",
        match backbone.activation {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        },
    );
    c.put_u64("backbone.affine_trainable", backbone.affine_trainable as u64);
    c.put_f64s("backbone.weight", backbone.weight().data().to_vec());
    c.put_f64s("backbone.bias", backbone.bias().to_vec());
    c.put_f64s("backbone.gain", backbone.gain.clone());
    c.put_f64s("backbone.abias", backbone.abias.clone());
    c.put_f64s("head.w", head.w.data().to_vec());
    c.put_f64s("head.b", head.b.clone());
    c.put_f64s("prototypes.p", protos.p.data().to_vec());
    c.put_f64s("prototypes.counts", protos.counts.iter().map(|&n| n as f64).collect());
    c
}

pub fn checkpoint_from_container(c: &Container) -> Result<(Backbone, ClassifierHead, PrototypeBank)> {
    let l_in = c.u64("dims.l_in")? as usize;
    let l = c.u64("dims.l")? as usize;
    let classes = c.u64("dims.c")? as usize;
    let activation = match c.u64("backbone.activation")? {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        k => return Err(Error::data(format!("unknown activation tag {k}"))),
    };
    let weight = Mat::new(l, l_in, c.f64s("backbone.weight")?.to_vec())?;
    let mut backbone = Backbone::new(weight, c.f64s("backbone.bias")?.to_vec(), activation)?;
    backbone.gain = c.f64s("backbone.gain")?.to_vec();
    backbone.abias = c.f64s("backbone.abias")?.to_vec();
    backbone.affine_trainable = c.u64("backbone.affine_trainable")? != 0;
    if backbone.gain.len() != l || backbone.abias.len() != l {
        return Err(Error::dimension("affine arrays do not match the feature dimension"));
    }
    let head = ClassifierHead::new(Mat::new(classes, l, c.f64s("head.w")?.to_vec())?, c.f64s("head.b")?.to_vec())?;
    let p = Mat::new(classes, l, c.f64s("prototypes.p")?.to_vec())?;
    let counts: Vec<usize> = c.f64s("prototypes.counts")?.iter().map(|&v| v as usize).collect();
    if counts.len() != classes {
        return Err(Error::dimension("prototype counts do not match the class count"));
    }
    Ok((backbone, head, PrototypeBank { p, counts }))
}

/// Save/load an AGOP matrix snapshot (`agop.g` plus its dimension).
pub fn snapshot_g_to_container(g: &Mat) -> Container {
    let mut c = Container::new();
    c.put_u64("dims.l", g.rows() as u64);
    c.put_f64s("agop.g", g.data().to_vec());
    c
}

pub fn snapshot_g_from_container(c: &Container) -> Result<Mat> {
    let l = c.u64("dims.l")? as usize;
    Mat::new(l, l, c.f64s("agop.g")?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_prototypes, pretrain_source, PretrainConfig};
    use crate::stream::{make_source, SourceConfig};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let src = make_source(&SourceConfig {
            classes: 3,
            input_dim: 6,
            samples_per_class: 12,
            mu_sep: 5.0,
            sigma: 1.0,
            seed: 2,
        })
        .unwrap();
        let (mut backbone, head) = pretrain_source(
            &src,
            &PretrainConfig { feature_dim: 10, epochs: 50, ..Default::default() },
        )
        .unwrap();
        backbone.gain[3] = 1.25;
        backbone.abias[0] = -0.5;
        let protos = build_prototypes(&backbone, &src).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_to_container(&backbone, &head, &protos).save(&path).unwrap();
        let loaded = Container::load(&path).unwrap();
        let (b2, h2, p2) = checkpoint_from_container(&loaded).unwrap();

        assert!(b2.weight().bits_eq(backbone.weight()));
        assert_eq!(b2.bias(), backbone.bias());
        assert_eq!(b2.gain, backbone.gain);
        assert_eq!(b2.abias, backbone.abias);
        assert_eq!(b2.activation, backbone.activation);
        assert!(h2.w.bits_eq(&head.w));
        assert_eq!(h2.b, head.b);
        assert!(p2.p.bits_eq(&protos.p));
        assert_eq!(p2.counts, protos.counts);

        // byte-identical when re-serialized
        let mut first = Vec::new();
        checkpoint_to_container(&backbone, &head, &protos).write_to(&mut first).unwrap();
        let mut second = Vec::new();
        checkpoint_to_container(&b2, &h2, &p2).write_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn snapshot_round_trip() {
        let g = Mat::from_fn(5, 5, |i, j| ((i * 5 + j) as f64).sin());
        let mut buf = Vec::new();
        snapshot_g_to_container(&g).write_to(&mut buf).unwrap();
        let c = Container::read_from(buf.as_slice()).unwrap();
        let g2 = snapshot_g_from_container(&c).unwrap();
        assert!(g2.bits_eq(&g));
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTGOLD1\x00\x00\x00\x00".to_vec();
        assert!(Container::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn missing_entry_reported() {
        let c = Container::new();
        assert!(matches!(c.u64("dims.l"), Err(Error::Data(_))));
    }
}

//! Versioned binary model format.
//!
//! Layout (all integers little-endian, floats as IEEE-754 bit patterns):
//! 8-byte magic, u32 version, u64 total stream length, a sequence of
//! length-prefixed sections (u32 tag, u64 payload length, payload), and a
//! trailing 8-byte checksum (first 8 bytes of SHA-256 over everything before
//! it). Sections: 1 = header (cell size, canonical height, parts, tree),
//! 2 = appearance filters, 3 = deformation parameters, 4 = biases. Numeric
//! round-trips are bit-exact. See docs/model-format.md for the full byte
//! layout table.

use ndarray::Array3;
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{validate_model, ModelParameters, PartKind, PartSpec, TreeStructure};
use crate::scoring::DeformationParams;

pub const MAGIC: &[u8; 8] = b"TREEPOSE";
pub const FORMAT_VERSION: u32 = 1;

const SECTION_HEADER: u32 = 1;
const SECTION_APPEARANCE: u32 = 2;
const SECTION_DEFORMATION: u32 = 3;
const SECTION_BIASES: u32 = 4;
const CHECKSUM_LEN: usize = 8;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.buf.len() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    /// Bytes left; used to sanity-check element counts before allocating.
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
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
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptFile("bad utf-8".into()))
    }
    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(bytes);
    digest[..CHECKSUM_LEN].try_into().unwrap()
}

/// Serialize a validated model to bytes. Fails if validation does not pass.
pub fn serialize_model(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
) -> Result<Vec<u8>> {
    let report = validate_model(model, parts, tree);
    if !report.is_pass() {
        return Err(Error::InvalidModel(report.violations));
    }

    let mut out = Writer::new();
    out.buf.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    let len_field_at = out.buf.len();
    out.u64(0); // total stream length, patched below

    let section = |tag: u32, body: Writer, out: &mut Writer| {
        out.u32(tag);
        out.u64(body.buf.len() as u64);
        out.buf.extend_from_slice(&body.buf);
    };

    // Header: cell size, canonical height, roster, tree.
    let mut w = Writer::new();
    w.u32(model.cell_size as u32);
    w.f64(model.canonical_height);
    w.u32(parts.len() as u32);
    for p in parts {
        w.str(&p.name);
        w.u8(match p.kind {
            PartKind::Single => 0,
            PartKind::Combined => 1,
        });
        w.u32(p.num_types as u32);
        w.u32(p.constituent_ids.len() as u32);
        for &c in &p.constituent_ids {
            w.u32(c as u32);
        }
    }
    w.u32(tree.num_nodes() as u32);
    w.u32(tree.root() as u32);
    w.u32(tree.edges().len() as u32);
    for &(a, b) in tree.edges() {
        w.u32(a as u32);
        w.u32(b as u32);
    }
    section(SECTION_HEADER, w, &mut out);

    let mut w = Writer::new();
    for per_type in &model.appearance {
        for f in per_type {
            let sh = f.shape();
            w.u32(sh[0] as u32);
            w.u32(sh[1] as u32);
            w.u32(sh[2] as u32);
            for &x in f.iter() {
                w.f64(x);
            }
        }
    }
    section(SECTION_APPEARANCE, w, &mut out);

    let mut w = Writer::new();
    for per_edge in &model.deformation {
        for per_parent in per_edge {
            for d in per_parent {
                for &x in &d.w {
                    w.f64(x);
                }
                w.i32(d.anchor.0);
                w.i32(d.anchor.1);
            }
        }
    }
    section(SECTION_DEFORMATION, w, &mut out);

    let mut w = Writer::new();
    for per_part in &model.unary_bias {
        for &b in per_part {
            w.f64(b);
        }
    }
    for per_edge in &model.pairwise_bias {
        for per_parent in per_edge {
            for &b in per_parent {
                w.f64(b);
            }
        }
    }
    section(SECTION_BIASES, w, &mut out);

    let total = (out.buf.len() + CHECKSUM_LEN) as u64;
    out.buf[len_field_at..len_field_at + 8].copy_from_slice(&total.to_le_bytes());
    let sum = checksum(&out.buf);
    out.buf.extend_from_slice(&sum);
    Ok(out.buf)
}

/// Decode a model stream produced by `serialize_model`.
pub fn deserialize_model(bytes: &[u8]) -> Result<(ModelParameters, Vec<PartSpec>, TreeStructure)> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let total = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < total {
        return Err(Error::Truncated);
    }
    if bytes.len() > total || total < 20 + CHECKSUM_LEN {
        return Err(Error::CorruptFile("stream length field mismatch".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if checksum(body) != *tail {
        return Err(Error::ChecksumMismatch);
    }

    let mut r = Reader::new(&body[20..]);
    let mut header: Option<(usize, f64, Vec<PartSpec>, TreeStructure)> = None;
    let mut appearance_raw: Option<Vec<u8>> = None;
    let mut deformation_raw: Option<Vec<u8>> = None;
    let mut biases_raw: Option<Vec<u8>> = None;

    while !r.done() {
        let tag = r.u32()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        match tag {
            SECTION_HEADER => {
                let mut h = Reader::new(payload);
                // Counts are validated against the bytes they imply before
                // any allocation sized by them.
                let check = |n: usize, min_bytes: usize, h: &Reader| -> Result<()> {
                    if n.checked_mul(min_bytes).map_or(true, |b| b > h.remaining()) {
                        Err(Error::Truncated)
                    } else {
                        Ok(())
                    }
                };
                let cell_size = h.u32()? as usize;
                let canonical_height = h.f64()?;
                let num_parts = h.u32()? as usize;
                check(num_parts, 13, &h)?;
                let mut parts = Vec::with_capacity(num_parts);
                for id in 0..num_parts {
                    let name = h.str()?;
                    let kind = match h.u8()? {
                        0 => PartKind::Single,
                        1 => PartKind::Combined,
                        k => {
                            return Err(Error::CorruptFile(format!("unknown part kind {}", k)))
                        }
                    };
                    let num_types = h.u32()? as usize;
                    let n_con = h.u32()? as usize;
                    check(n_con, 4, &h)?;
                    let mut constituent_ids = Vec::with_capacity(n_con);
                    for _ in 0..n_con {
                        constituent_ids.push(h.u32()? as usize);
                    }
                    parts.push(PartSpec {
                        id,
                        name,
                        kind,
                        constituent_ids,
                        num_types,
                    });
                }
                let num_nodes = h.u32()? as usize;
                let root = h.u32()? as usize;
                let n_edges = h.u32()? as usize;
                check(n_edges, 8, &h)?;
                let mut edges = Vec::with_capacity(n_edges);
                for _ in 0..n_edges {
                    edges.push((h.u32()? as usize, h.u32()? as usize));
                }
                let tree = TreeStructure::new(num_nodes, edges, root)?;
                header = Some((cell_size, canonical_height, parts, tree));
            }
            SECTION_APPEARANCE => appearance_raw = Some(payload.to_vec()),
            SECTION_DEFORMATION => deformation_raw = Some(payload.to_vec()),
            SECTION_BIASES => biases_raw = Some(payload.to_vec()),
            _ => return Err(Error::CorruptFile(format!("unknown section tag {}", tag))),
        }
    }

    let (cell_size, canonical_height, parts, tree) =
        header.ok_or_else(|| Error::CorruptFile("missing header section".into()))?;
    let appearance_raw =
        appearance_raw.ok_or_else(|| Error::CorruptFile("missing appearance section".into()))?;
    let deformation_raw =
        deformation_raw.ok_or_else(|| Error::CorruptFile("missing deformation section".into()))?;
    let biases_raw =
        biases_raw.ok_or_else(|| Error::CorruptFile("missing biases section".into()))?;

    let mut a = Reader::new(&appearance_raw);
    let mut appearance = Vec::with_capacity(parts.len());
    for p in &parts {
        let mut per_type = Vec::new();
        for _ in 0..p.num_types {
            let fh = a.u32()? as usize;
            let fw = a.u32()? as usize;
            let ch = a.u32()? as usize;
            let count = fh
                .checked_mul(fw)
                .and_then(|x| x.checked_mul(ch))
                .ok_or_else(|| Error::CorruptFile("filter dims overflow".into()))?;
            if count.checked_mul(8).map_or(true, |bytes| bytes > a.remaining()) {
                return Err(Error::Truncated);
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(a.f64()?);
            }
            let arr = Array3::from_shape_vec((fh, fw, ch), data)
                .map_err(|e| Error::CorruptFile(format!("filter shape: {}", e)))?;
            per_type.push(arr);
        }
        appearance.push(per_type);
    }

    let mut d = Reader::new(&deformation_raw);
    let mut deformation = Vec::new();
    for &(p, c) in tree.edges() {
        let mut per_parent = Vec::new();
        for _ in 0..parts[p].num_types {
            let mut per_child = Vec::new();
            for _ in 0..parts[c].num_types {
                let w = [d.f64()?, d.f64()?, d.f64()?, d.f64()?];
                let anchor = (d.i32()?, d.i32()?);
                per_child.push(DeformationParams { w, anchor });
            }
            per_parent.push(per_child);
        }
        deformation.push(per_parent);
    }

    let mut b = Reader::new(&biases_raw);
    let mut unary_bias = Vec::with_capacity(parts.len());
    for p in &parts {
        let mut per_type = Vec::new();
        for _ in 0..p.num_types {
            per_type.push(b.f64()?);
        }
        unary_bias.push(per_type);
    }
    let mut pairwise_bias = Vec::new();
    for &(p, c) in tree.edges() {
        let mut per_parent = Vec::new();
        for _ in 0..parts[p].num_types {
            let mut per_child = Vec::new();
            for _ in 0..parts[c].num_types {
                per_child.push(b.f64()?);
            }
            per_parent.push(per_child);
        }
        pairwise_bias.push(per_parent);
    }

    let model = ModelParameters {
        cell_size,
        canonical_height,
        appearance,
        unary_bias,
        deformation,
        pairwise_bias,
    };
    let report = validate_model(&model, &parts, &tree);
    if !report.is_pass() {
        return Err(Error::InvalidModel(report.violations));
    }
    Ok((model, parts, tree))
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
) -> Result<()> {
    let bytes = serialize_model(model, parts, tree)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParameters, Vec<PartSpec>, TreeStructure)> {
    let bytes = std::fs::read(path)?;
    deserialize_model(&bytes)
}

//! Binary file formats shared by every pipeline stage.
//!
//! All formats start with an 8-byte ASCII magic and store integers as
//! little-endian `u32` and tensors as little-endian IEEE-754 `f32`, row-major
//! `(y, x, d)`. In-memory `f64` values are truncated to `f32` on save.
//!
//! | magic      | payload                                                     |
//! |------------|-------------------------------------------------------------|
//! | `RAIDEMB1` | one [`TokenEmbeddingSet`]                                   |
//! | `RAIDDB01` | a [`HierarchicalDatabase`], coarse level first              |
//! | `RAIDFLT1` | [`FilterParameters`]: config record, then tensors in order   |
//! | `RAIDMAP1` | one [`AnomalyMap`]                                          |
//!
//! Ground-truth masks use binary PGM (`P5`) with values `{0, 255}`.

use std::io::{self, BufRead, BufReader, Read, Write};

use crate::database::{Bucket, ClassEntry, HierarchicalDatabase, Provenance};
use crate::error::{ensure, RaidError, Result};
use crate::filter::{AnomalyMap, FilterConfig, FilterParameters};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"RAIDEMB1";
pub const DATABASE_MAGIC: &[u8; 8] = b"RAIDDB01";
pub const FILTER_MAGIC: &[u8; 8] = b"RAIDFLT1";
pub const MAP_MAGIC: &[u8; 8] = b"RAIDMAP1";

/// One image's encoder output: a CLS token plus an `H' x W'` grid of patch
/// tokens, all of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSet {
    image_id: String,
    dim: usize,
    grid_height: usize,
    grid_width: usize,
    source_height: usize,
    source_width: usize,
    class_label: Option<String>,
    cls_token: Vec<f32>,
    patch_tokens: Vec<f32>,
}

impl TokenEmbeddingSet {
    /// Builds a set, checking every invariant. `patch_tokens` is row-major
    /// `(y, x, d)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        cls_token: Vec<f32>,
        grid_height: usize,
        grid_width: usize,
        patch_tokens: Vec<f32>,
        source_height: usize,
        source_width: usize,
        class_label: Option<String>,
    ) -> Result<Self> {
        let dim = cls_token.len();
        ensure(dim >= 1 && grid_height >= 1 && grid_width >= 1, || {
            RaidError::InvalidArgument("embedding set needs D, H', W' >= 1".into())
        })?;
        ensure(patch_tokens.len() == grid_height * grid_width * dim, || {
            RaidError::DimensionMismatch(format!(
                "{grid_height}x{grid_width} grid of D={dim} needs {} values, got {}",
                grid_height * grid_width * dim,
                patch_tokens.len()
            ))
        })?;
        ensure(
            cls_token.iter().chain(&patch_tokens).all(|v| v.is_finite()),
            || RaidError::NonFinite("token embedding set".into()),
        )?;
        Ok(Self {
            image_id: image_id.into(),
            dim,
            grid_height,
            grid_width,
            source_height,
            source_width,
            class_label,
            cls_token,
            patch_tokens,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn num_patches(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn source_height(&self) -> usize {
        self.source_height
    }

    pub fn source_width(&self) -> usize {
        self.source_width
    }

    pub fn class_label(&self) -> Option<&str> {
        self.class_label.as_deref()
    }

    pub fn cls_token(&self) -> &[f32] {
        &self.cls_token
    }

    pub fn patch_tokens(&self) -> &[f32] {
        &self.patch_tokens
    }

    pub fn patch(&self, y: usize, x: usize) -> &[f32] {
        self.patch_at(y * self.grid_width + x)
    }

    /// Patch token by flat row-major cell index.
    pub fn patch_at(&self, cell: usize) -> &[f32] {
        &self.patch_tokens[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    /// Replaces the patch grid, keeping everything else.
    pub fn with_patch_tokens(&self, patch_tokens: Vec<f32>) -> Result<Self> {
        Self::new(
            self.image_id.clone(),
            self.cls_token.clone(),
            self.grid_height,
            self.grid_width,
            patch_tokens,
            self.source_height,
            self.source_width,
            self.class_label.clone(),
        )
    }
}

/// Binary anomaly mask at source resolution; values are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        mask: Vec<u8>,
    ) -> Result<Self> {
        ensure(mask.len() == height * width, || {
            RaidError::DimensionMismatch(format!(
                "mask {height}x{width} with {} values",
                mask.len()
            ))
        })?;
        ensure(mask.iter().all(|&m| m <= 1), || {
            RaidError::InvalidArgument("mask values must be 0 or 1".into())
        })?;
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            mask,
        })
    }

    /// An all-normal mask.
    pub fn empty(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            mask: vec![0; height * width],
        }
    }

    pub fn is_anomalous(&self) -> bool {
        self.mask.contains(&1)
    }
}

// --- low-level helpers -------------------------------------------------------

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        self.written += b.len() as u64;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| RaidError::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes())
    }

    fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn f64s_as_f32(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for &v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn finish(mut self) -> Result<u64> {
        self.inner.flush()?;
        Ok(self.written)
    }
}

struct Reader<R> {
    inner: R,
    context: &'static str,
}

const CHUNK: usize = 1 << 16;

impl<R: Read> Reader<R> {
    fn new(inner: R, context: &'static str) -> Self {
        Self { inner, context }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => RaidError::UnexpectedEof {
                context: self.context,
            },
            _ => RaidError::Io(e),
        })
    }

    fn magic(&mut self, expected: &'static [u8; 8], name: &'static str) -> Result<()> {
        let mut m = [0u8; 8];
        self.exact(&mut m)?;
        ensure(&m == expected, || RaidError::BadMagic { expected: name })
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let bytes = self.raw(len)?;
        String::from_utf8(bytes)
            .map_err(|_| RaidError::CorruptPayload("invalid UTF-8 string".into()))
    }

    /// Reads `len` bytes in bounded chunks so a lying header cannot force a
    /// huge allocation before EOF is detected.
    fn raw(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(len.min(CHUNK));
        let mut remaining = len;
        let mut buf = vec![0u8; len.min(CHUNK)];
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            self.exact(&mut buf[..n])?;
            out.extend_from_slice(&buf[..n]);
            remaining -= n;
        }
        Ok(out)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes_len = count
            .checked_mul(4)
            .ok_or_else(|| RaidError::CorruptPayload("tensor size overflow".into()))?;
        let bytes = self.raw(bytes_len)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ensure(values.iter().all(|v| v.is_finite()), || {
            RaidError::CorruptPayload(format!("non-finite value in {}", self.context))
        })?;
        Ok(values)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(RaidError::CorruptPayload(format!(
                "trailing bytes after {}",
                self.context
            ))),
        }
    }
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| RaidError::CorruptPayload("declared size overflows".into()))
}

// --- embeddings --------------------------------------------------------------

/// Writes `set` as `RAIDEMB1`; returns the number of bytes written.
pub fn save_embedding_set<W: Write>(set: &TokenEmbeddingSet, sink: W) -> Result<u64> {
    ensure(
        set.cls_token
            .iter()
            .chain(&set.patch_tokens)
            .all(|v| v.is_finite()),
        || RaidError::NonFinite(format!("embedding set `{}`", set.image_id)),
    )?;
    let mut w = CountingWriter::new(sink);
    w.bytes(EMBEDDING_MAGIC)?;
    w.u32(set.dim)?;
    w.u32(set.grid_height)?;
    w.u32(set.grid_width)?;
    w.u32(set.source_height)?;
    w.u32(set.source_width)?;
    w.string(&set.image_id)?;
    match &set.class_label {
        Some(label) => {
            w.u8(1)?;
            w.string(label)?;
        }
        None => w.u8(0)?,
    }
    w.f32s(&set.cls_token)?;
    w.f32s(&set.patch_tokens)?;
    w.finish()
}

pub fn load_embedding_set<R: Read>(source: R) -> Result<TokenEmbeddingSet> {
    let mut r = Reader::new(source, "embedding set");
    r.magic(EMBEDDING_MAGIC, "RAIDEMB1")?;
    let dim = r.u32()?;
    let gh = r.u32()?;
    let gw = r.u32()?;
    let sh = r.u32()?;
    let sw = r.u32()?;
    ensure(dim >= 1 && gh >= 1 && gw >= 1, || {
        RaidError::CorruptPayload("zero dimension in embedding header".into())
    })?;
    let image_id = r.string()?;
    let class_label = match r.u8()? {
        0 => None,
        1 => Some(r.string()?),
        f => return Err(RaidError::CorruptPayload(format!("bad label flag {f}"))),
    };
    let cls = r.f32s(dim)?;
    let patches = r.f32s(checked_product(&[gh, gw, dim])?)?;
    TokenEmbeddingSet::new(image_id, cls, gh, gw, patches, sh, sw, class_label)
}

// --- database ----------------------------------------------------------------

/// Writes the database: header `(D, C)`, the `C` class prototypes, then for
/// every class its semantic prototypes, then for every `(class, prototype)`
/// its instance tokens with provenance, and finally the image-id table.
pub fn save_database<W: Write>(db: &HierarchicalDatabase, sink: W) -> Result<u64> {
    let mut w = CountingWriter::new(sink);
    w.bytes(DATABASE_MAGIC)?;
    w.u32(db.dim())?;
    w.u32(db.num_classes())?;
    w.f32s(db.class_prototypes_flat())?;
    for class in db.classes() {
        w.u32(class.num_prototypes())?;
        w.f32s(class.semantic_prototypes_flat())?;
    }
    for class in db.classes() {
        for bucket in class.buckets() {
            w.u32(bucket.len())?;
            for (i, p) in bucket.provenance().iter().enumerate() {
                w.u32(p.image as usize)?;
                w.u32(p.y as usize)?;
                w.u32(p.x as usize)?;
                w.f32s(bucket.vector(i))?;
            }
        }
    }
    w.u32(db.image_ids().len())?;
    for id in db.image_ids() {
        w.string(id)?;
    }
    w.finish()
}

pub fn load_database<R: Read>(source: R) -> Result<HierarchicalDatabase> {
    let mut r = Reader::new(source, "database");
    r.magic(DATABASE_MAGIC, "RAIDDB01")?;
    let dim = r.u32()?;
    let num_classes = r.u32()?;
    ensure(dim >= 1, || {
        RaidError::CorruptPayload("database dimension 0".into())
    })?;
    let class_protos = r.f32s(checked_product(&[num_classes, dim])?)?;
    let mut semantic = Vec::new();
    for _ in 0..num_classes {
        let j = r.u32()?;
        semantic.push((j, r.f32s(checked_product(&[j, dim])?)?));
    }
    let mut classes = Vec::with_capacity(num_classes);
    for (j, protos) in semantic {
        let mut buckets = Vec::with_capacity(j);
        for _ in 0..j {
            let n = r.u32()?;
            let mut vectors = Vec::with_capacity(n.min(CHUNK) * dim);
            let mut provenance = Vec::with_capacity(n.min(CHUNK));
            for _ in 0..n {
                let image = r.u32()? as u32;
                let y = r.u32()? as u32;
                let x = r.u32()? as u32;
                provenance.push(Provenance { image, y, x });
                vectors.extend(r.f32s(dim)?);
            }
            buckets.push(Bucket::new(dim, vectors, provenance)?);
        }
        classes.push(ClassEntry::new(dim, protos, buckets)?);
    }
    let n_ids = r.u32()?;
    let mut ids = Vec::with_capacity(n_ids.min(CHUNK));
    for _ in 0..n_ids {
        ids.push(r.string()?);
    }
    r.expect_end()?;
    HierarchicalDatabase::from_parts(dim, class_protos, classes, ids)
        .map_err(|e| RaidError::CorruptPayload(e.to_string()))
}

// --- filter ------------------------------------------------------------------

/// Writes the config record `(D, K, M1, M2, top-k, beta)` followed by every
/// parameter tensor in [`FilterParameters::tensors`] order.
pub fn save_filter<W: Write>(params: &FilterParameters, sink: W) -> Result<u64> {
    let cfg = params.config();
    let tensors = params.tensors();
    for (name, t) in &tensors {
        ensure(t.iter().all(|v| v.is_finite()), || {
            RaidError::NonFinite(format!("filter tensor `{name}`"))
        })?;
    }
    let mut w = CountingWriter::new(sink);
    w.bytes(FILTER_MAGIC)?;
    w.u32(cfg.dim)?;
    w.u32(cfg.cost_channels)?;
    w.u32(cfg.guidance_experts)?;
    w.u32(cfg.filter_experts)?;
    w.u32(cfg.top_k)?;
    w.bytes(&cfg.beta.to_le_bytes())?;
    w.u32(tensors.len())?;
    for (_, t) in tensors {
        w.u32(t.len())?;
        w.f64s_as_f32(t)?;
    }
    w.finish()
}

pub fn load_filter<R: Read>(source: R) -> Result<FilterParameters> {
    let mut r = Reader::new(source, "filter");
    r.magic(FILTER_MAGIC, "RAIDFLT1")?;
    let config = FilterConfig {
        dim: r.u32()?,
        cost_channels: r.u32()?,
        guidance_experts: r.u32()?,
        filter_experts: r.u32()?,
        top_k: r.u32()?,
        beta: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| RaidError::CorruptPayload(e.to_string()))?;
    let mut params = FilterParameters::zeros(config);
    let count = r.u32()?;
    let mut tensors = params.tensors_mut();
    ensure(count == tensors.len(), || {
        RaidError::CorruptPayload(format!("expected {} tensors, found {count}", tensors.len()))
    })?;
    for (name, t) in tensors.iter_mut() {
        let len = r.u32()?;
        ensure(len == t.len(), || {
            RaidError::CorruptPayload(format!(
                "tensor `{name}` has length {len}, expected {}",
                t.len()
            ))
        })?;
        for (dst, v) in t.iter_mut().zip(r.f32s(len)?) {
            *dst = f64::from(v);
        }
    }
    r.expect_end()?;
    Ok(params)
}

/// Loads a filter and checks it against the pipeline's `(D, K)`.
pub fn load_filter_for<R: Read>(
    source: R,
    dim: usize,
    cost_channels: usize,
) -> Result<FilterParameters> {
    let params = load_filter(source)?;
    params.config().ensure_compatible(dim, cost_channels)?;
    Ok(params)
}

// --- anomaly map -------------------------------------------------------------

pub fn save_map<W: Write>(map: &AnomalyMap, sink: W) -> Result<u64> {
    ensure(map.values().iter().all(|v| v.is_finite()), || {
        RaidError::NonFinite("anomaly map".into())
    })?;
    let mut w = CountingWriter::new(sink);
    w.bytes(MAP_MAGIC)?;
    w.u32(map.height())?;
    w.u32(map.width())?;
    w.u32(map.source_height())?;
    w.u32(map.source_width())?;
    w.f64s_as_f32(map.values())?;
    w.finish()
}

pub fn load_map<R: Read>(source: R) -> Result<AnomalyMap> {
    let mut r = Reader::new(source, "anomaly map");
    r.magic(MAP_MAGIC, "RAIDMAP1")?;
    let h = r.u32()?;
    let w = r.u32()?;
    let sh = r.u32()?;
    let sw = r.u32()?;
    let values = r.f32s(checked_product(&[h, w])?)?;
    r.expect_end()?;
    AnomalyMap::new(h, w, values.into_iter().map(f64::from).collect(), sh, sw)
        .map_err(|e| RaidError::CorruptPayload(e.to_string()))
}

// --- PGM ---------------------------------------------------------------------

/// Writes an 8-bit binary PGM. Values are clamped to `[0, 255]`.
pub fn write_pgm<W: Write>(mut sink: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    ensure(pixels.len() == width * height, || {
        RaidError::DimensionMismatch("pgm pixel count".into())
    })?;
    write!(sink, "P5\n{width} {height}\n255\n")?;
    sink.write_all(pixels)?;
    sink.flush()?;
    Ok(())
}

/// Reads an 8-bit binary PGM, returning `(width, height, pixels)`.
pub fn read_pgm<R: Read>(source: R) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(source);
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(RaidError::UnexpectedEof {
                context: "pgm header",
            });
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_owned));
    }
    ensure(fields[0] == "P5", || RaidError::BadMagic {
        expected: "binary PGM (P5)",
    })?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| RaidError::CorruptPayload(format!("bad pgm header field `{s}`")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    ensure(maxval == 255, || {
        RaidError::CorruptPayload("only 8-bit PGM is supported".into())
    })?;
    let mut pixels = vec![0u8; checked_product(&[width, height])?];
    r.read_exact(&mut pixels).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RaidError::UnexpectedEof {
            context: "pgm pixels",
        },
        _ => RaidError::Io(e),
    })?;
    Ok((width, height, pixels))
}

pub fn save_mask_pgm<W: Write>(mask: &GroundTruthMask, sink: W) -> Result<()> {
    let pixels: Vec<u8> = mask
        .mask
        .iter()
        .map(|&m| if m == 1 { 255 } else { 0 })
        .collect();
    write_pgm(sink, mask.width, mask.height, &pixels)
}

/// Loads a mask PGM, thresholding at 128.
pub fn load_mask_pgm<R: Read>(image_id: impl Into<String>, source: R) -> Result<GroundTruthMask> {
    let (width, height, pixels) = read_pgm(source)?;
    let mask = pixels.into_iter().map(|p| u8::from(p >= 128)).collect();
    GroundTruthMask::new(image_id, height, width, mask)
}

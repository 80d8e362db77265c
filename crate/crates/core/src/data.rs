//! Synthetic token-grid corpora and their binary file format.
//!
//! Each sample is one foreground shape drawn on a background. The shape
//! family and its three-token palette are fixed by the class; size and
//! placement are random per sample. The background is either a single token
//! or uniform noise from the top quarter of the codebook, which foregrounds
//! never use.
//!
//! File layout, little-endian: magic `OARDATA1`, version `u32`, the spec
//! block, a split tag `u8`, sample count `u64`, then per sample its
//! condition tokens and grid tokens as `u16`, an order flag `u8` and, when
//! set, the permutation as `u16`. A CRC-32 of every preceding byte closes
//! the file.

use std::path::Path;

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{GridShape, Order};
use crate::rng::{Purpose, SeededStream};

pub const DATA_MAGIC: &[u8; 8] = b"OARDATA1";
const VERSION: u32 = 1;
const PALETTE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Constant,
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Cross,
    DiagonalBand,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub grid: GridShape,
    pub vocab: usize,
    pub classes: usize,
    pub per_class: usize,
    pub background: Background,
    /// Background token in constant mode.
    pub background_token: u32,
    pub cond_vocab: usize,
    pub cond_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            grid: GridShape { rows: 8, cols: 8 },
            vocab: 64,
            classes: 8,
            per_class: 250,
            background: Background::Constant,
            background_token: 0,
            cond_vocab: 16,
            cond_len: 4,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// First token of the noise sub-vocabulary `[3V/4, V)`.
    pub fn noise_start(&self) -> usize {
        3 * self.vocab / 4
    }

    pub fn palette(&self, class: usize) -> [u32; PALETTE] {
        let b = (1 + PALETTE * class) as u32;
        [b, b + 1, b + 2]
    }

    pub fn shape_of(class: usize) -> Shape {
        match class % 3 {
            0 => Shape::Rectangle,
            1 => Shape::Cross,
            _ => Shape::DiagonalBand,
        }
    }

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if self.vocab < 8 || self.vocab > u16::MAX as usize {
            return bad(format!("corpus vocab {} outside [8, 65535]", self.vocab));
        }
        if self.classes == 0 {
            return bad("at least one class required".into());
        }
        let top = 1 + PALETTE * self.classes;
        if top > self.noise_start() {
            return bad(format!(
                "{} classes need palette tokens up to {}, which reach the noise range from {}",
                self.classes,
                top - 1,
                self.noise_start()
            ));
        }
        if self.background_token as usize >= self.vocab {
            return bad(format!(
                "background token {} not below vocab {}",
                self.background_token, self.vocab
            ));
        }
        if self.background == Background::Constant && (1..top).contains(&(self.background_token as usize)) {
            return bad(format!(
                "background token {} collides with a class palette",
                self.background_token
            ));
        }
        if self.cond_vocab < 2 || self.cond_len == 0 {
            return bad("cond_vocab must be ≥ 2 and cond_len ≥ 1".into());
        }
        if self.cond_vocab > u16::MAX as usize {
            return bad("cond_vocab exceeds u16".into());
        }
        let capacity = (self.cond_vocab as f64).powi(self.cond_len as i32);
        if (self.classes as f64) > capacity {
            return bad(format!(
                "{} classes do not fit in {} condition tokens over {} symbols",
                self.classes, self.cond_len, self.cond_vocab
            ));
        }
        if self.grid.len() > u16::MAX as usize + 1 {
            return bad("grid too large for u16 cell indices".into());
        }
        Ok(())
    }

    /// Class id as base-`cond_vocab` digits, most significant first.
    pub fn encode_class(&self, class: usize) -> Vec<u32> {
        let mut digits = vec![0u32; self.cond_len];
        let mut c = class;
        for d in digits.iter_mut().rev() {
            *d = (c % self.cond_vocab) as u32;
            c /= self.cond_vocab;
        }
        digits
    }

    pub fn decode_class(&self, cond: &[u32]) -> usize {
        cond.iter().fold(0usize, |acc, &d| acc * self.cond_vocab + d as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cond: Vec<u32>,
    pub tokens: Vec<u32>,
    pub order: Option<Order>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: CorpusSpec,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.spec.decode_class(&self.samples[i].cond)
    }

    /// Cells holding foreground tokens, i.e. neither the constant
    /// background token nor a noise token.
    pub fn foreground_mask(&self, i: usize) -> Vec<bool> {
        let s = &self.spec;
        self.samples[i]
            .tokens
            .iter()
            .map(|&t| match s.background {
                Background::Constant => t != s.background_token,
                Background::Noisy => (t as usize) < s.noise_start(),
            })
            .collect()
    }
}

fn foreground_cells(shape: Shape, grid: GridShape, s: &mut SeededStream) -> Vec<(usize, usize)> {
    let (h, w) = (grid.rows, grid.cols);
    let span = |n: usize, s: &mut SeededStream| -> usize {
        // Side length in [min(2, n), max(1, 0.6 n)].
        let hi = ((n * 3) / 5).max(1);
        let lo = 2.min(n).min(hi);
        lo + s.below(hi - lo + 1)
    };
    match shape {
        Shape::Rectangle => {
            let (rh, rw) = (span(h, s), span(w, s));
            let (r0, c0) = (s.below(h - rh + 1), s.below(w - rw + 1));
            (r0..r0 + rh).flat_map(|r| (c0..c0 + rw).map(move |c| (r, c))).collect()
        }
        Shape::Cross => {
            let arm = 1 + s.below((h.max(w) / 4).max(1));
            let (r, c) = (s.below(h), s.below(w));
            let mut cells = Vec::new();
            for cc in c.saturating_sub(arm)..(c + arm + 1).min(w) {
                cells.push((r, cc));
            }
            for rr in r.saturating_sub(arm)..(r + arm + 1).min(h) {
                if rr != r {
                    cells.push((rr, c));
                }
            }
            cells
        }
        Shape::DiagonalBand => {
            let thick = 1 + s.below(2);
            let anti = s.bernoulli(0.5);
            let span_total = h + w - 1;
            let offset = s.below(span_total.div_ceil(2)) + span_total / 4;
            let mut cells = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    let key = if anti { r + c } else { r + (w - 1 - c) };
                    if key >= offset && key < offset + thick {
                        cells.push((r, c));
                    }
                }
            }
            cells
        }
    }
}

fn make_sample(spec: &CorpusSpec, class: usize, index: usize) -> Sample {
    let g = spec.grid;
    let mut s = SeededStream::keyed(spec.seed, Purpose::Corpus, &[class as u64, index as u64]);
    let noise = spec.noise_start();
    let mut tokens: Vec<u32> = match spec.background {
        Background::Constant => vec![spec.background_token; g.len()],
        Background::Noisy => (0..g.len())
            .map(|_| (noise + s.below(spec.vocab - noise)) as u32)
            .collect(),
    };
    let palette = spec.palette(class);
    let mut cells = foreground_cells(CorpusSpec::shape_of(class), g, &mut s);
    if spec.background == Background::Constant {
        cells.truncate(g.len() / 2);
    }
    let phase = s.below(PALETTE);
    for (r, c) in cells {
        tokens[r * g.cols + c] = palette[(r + c + phase) % PALETTE];
    }
    Sample {
        cond: spec.encode_class(class),
        tokens,
        order: None,
    }
}

/// Builds the full corpus, class-major. A pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.classes)
        .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
        .map(|(c, i)| make_sample(spec, c, i))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        split: Split::All,
    })
}

/// Per-class random split; each class contributes `round(ratio · n_c)`
/// samples to train. Both halves keep the original sample order.
pub fn split_dataset(data: &Dataset, ratio: f64, stream: &mut SeededStream) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.spec.classes.max(1)];
    for i in 0..data.len() {
        let c = data.class_of(i).min(by_class.len() - 1);
        by_class[c].push(i);
    }
    let mut in_train = vec![false; data.len()];
    for members in &mut by_class {
        for i in (1..members.len()).rev() {
            let j = stream.below(i + 1);
            members.swap(i, j);
        }
        let k = (ratio * members.len() as f64).round() as usize;
        for &i in &members[..k] {
            in_train[i] = true;
        }
    }
    let pick = |want: bool, split: Split| Dataset {
        spec: data.spec.clone(),
        samples: (0..data.len())
            .filter(|&i| in_train[i] == want)
            .map(|i| data.samples[i].clone())
            .collect(),
        split,
    };
    Ok((pick(true, Split::Train), pick(false, Split::Test)))
}

/// Replaces every sample's order label.
pub fn attach_orders(data: &Dataset, orders: Vec<Order>) -> Result<Dataset> {
    if orders.len() != data.len() {
        return Err(Error::Validation(format!(
            "{} orders for {} samples",
            orders.len(),
            data.len()
        )));
    }
    let n = data.spec.grid.len();
    let mut out = data.clone();
    for (s, o) in out.samples.iter_mut().zip(orders) {
        if o.len() != n {
            return Err(Error::Validation(format!("order of length {} for {n} cells", o.len())));
        }
        s.order = Some(o);
    }
    Ok(out)
}

fn write_spec(w: &mut Writer, s: &CorpusSpec) {
    w.usize32(s.grid.rows);
    w.usize32(s.grid.cols);
    w.usize32(s.vocab);
    w.usize32(s.classes);
    w.usize32(s.per_class);
    w.u8(match s.background {
        Background::Constant => 0,
        Background::Noisy => 1,
    });
    w.u32(s.background_token);
    w.usize32(s.cond_vocab);
    w.usize32(s.cond_len);
    w.u64(s.seed);
}

fn read_spec(r: &mut Reader<'_>) -> Result<CorpusSpec> {
    let at = r.offset();
    let rows = r.usize32()?;
    let cols = r.usize32()?;
    let vocab = r.usize32()?;
    let classes = r.usize32()?;
    let per_class = r.usize32()?;
    let bg_at = r.offset();
    let background = match r.u8()? {
        0 => Background::Constant,
        1 => Background::Noisy,
        b => return Err(Error::format(bg_at, format!("unknown background mode {b}"))),
    };
    let spec = CorpusSpec {
        grid: GridShape { rows, cols },
        vocab,
        classes,
        per_class,
        background,
        background_token: r.u32()?,
        cond_vocab: r.usize32()?,
        cond_len: r.usize32()?,
        seed: r.u64()?,
    };
    spec.validate()
        .map_err(|e| Error::format(at, format!("invalid corpus spec: {e}")))?;
    Ok(spec)
}

pub fn dataset_to_bytes(data: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DATA_MAGIC);
    w.u32(VERSION);
    write_spec(&mut w, &data.spec);
    w.u8(match data.split {
        Split::All => 0,
        Split::Train => 1,
        Split::Test => 2,
    });
    w.u64(data.len() as u64);
    for s in &data.samples {
        for &t in s.cond.iter().chain(&s.tokens) {
            w.u16(t as u16);
        }
        match &s.order {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                for &c in o.as_slice() {
                    w.u16(c as u16);
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATA_MAGIC)?;
    if bytes.len() < DATA_MAGIC.len() + 4 {
        return Err(Error::format(bytes.len() as u64, "truncated before checksum"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            body.len() as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader::with_base(&body[DATA_MAGIC.len()..], DATA_MAGIC.len() as u64);
    let at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let spec = read_spec(&mut r)?;
    let at = r.offset();
    let split = match r.u8()? {
        0 => Split::All,
        1 => Split::Train,
        2 => Split::Test,
        b => return Err(Error::format(at, format!("unknown split tag {b}"))),
    };
    let count = r.u64()? as usize;
    let n = spec.grid.len();
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut read_tokens = |len: usize, bound: usize, what: &str| -> Result<Vec<u32>> {
            (0..len)
                .map(|_| {
                    let at = r.offset();
                    let t = r.u16()? as u32;
                    if t as usize >= bound {
                        return Err(Error::format(at, format!("{what} {t} not below {bound}")));
                    }
                    Ok(t)
                })
                .collect()
        };
        let cond = read_tokens(spec.cond_len, spec.cond_vocab, "condition token")?;
        let tokens = read_tokens(n, spec.vocab, "grid token")?;
        let at = r.offset();
        let order = match r.u8()? {
            0 => None,
            1 => {
                let at = r.offset();
                let cells = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
                Some(Order::new(cells, n).map_err(|e| Error::format(at, e.to_string()))?)
            }
            b => return Err(Error::format(at, format!("bad order flag {b}"))),
        };
        samples.push(Sample { cond, tokens, order });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after samples"));
    }
    Ok(Dataset { spec, samples, split })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_bytes(data)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}

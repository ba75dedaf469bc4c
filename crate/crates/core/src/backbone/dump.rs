//! `.fvd` feature dumps: a little-endian container for one generated sample.
//!
//! ```text
//! magic        4 bytes  "FVD1"
//! version      u32      1
//! flags        u32      bit 0 image, bit 1 truth, bit 2 seeded latent
//! seed         u64      (0 when not seeded)
//! dz           u32      latent dimension
//! k            u32      number of feature maps
//! channels     u32      declared total channel count D
//! kp_count     u32      number of truth keypoints
//! kp_bytes     u32      bytes of keypoint names incl. u16 length prefixes
//! maps         k x (h u32, w u32, c u32)
//! -- payload --
//! z            dz x f64
//! map i        h*w*c x f32, (y, x, channel) order
//! image        H*W*3 u8 (if flagged; H, W of the last map)
//! mask         H*W u8   (if truth flagged)
//! keypoints    kp_count x (name_len u16, name, x f64, y f64)
//! ```
//!
//! The payload length follows from the header alone; decoding checks it
//! before touching the payload.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Backbone, BackboneError, GeneratedSample, GroundTruth, LatentCode};
use crate::feature_volume::{FeatureError, FeatureMap, FeatureVolume};
use crate::hash::sha256_hex;
use crate::keypoints::Keypoint;
use crate::raster::{LabelMask, RgbImage};

pub const FVD_MAGIC: [u8; 4] = *b"FVD1";
pub const FVD_VERSION: u32 = 1;

const FLAG_IMAGE: u32 = 1;
const FLAG_TRUTH: u32 = 2;
const FLAG_SEEDED: u32 = 4;
const FIXED_HEADER: usize = 4 + 4 + 4 + 8 + 4 * 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpSection {
    Header,
    Latent,
    Map(usize),
    Image,
    Mask,
    Keypoints,
}

impl fmt::Display for DumpSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DumpSection::Header => write!(f, "header"),
            DumpSection::Latent => write!(f, "latent"),
            DumpSection::Map(i) => write!(f, "feature map {i}"),
            DumpSection::Image => write!(f, "image"),
            DumpSection::Mask => write!(f, "truth mask"),
            DumpSection::Keypoints => write!(f, "keypoints"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic {0:?}, expected \"FVD1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dump version {found}, expected {FVD_VERSION}")]
    Version { found: u32 },
    #[error("truncated payload in {section}: need {needed} bytes, {available} available")]
    Truncated {
        section: DumpSection,
        needed: usize,
        available: usize,
    },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid dump content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

struct Header {
    flags: u32,
    seed: u64,
    dz: usize,
    kp_count: usize,
    kp_bytes: usize,
    maps: Vec<(usize, usize, usize)>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: DumpSection) -> Result<&'a [u8], DumpError> {
        let available = self.data.len() - self.pos;
        if n > available {
            return Err(DumpError::Truncated {
                section,
                needed: n,
                available,
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, s: DumpSection) -> Result<u16, DumpError> {
        Ok(u16::from_le_bytes(self.take(2, s)?.try_into().unwrap()))
    }
    fn u32(&mut self, s: DumpSection) -> Result<u32, DumpError> {
        Ok(u32::from_le_bytes(self.take(4, s)?.try_into().unwrap()))
    }
    fn u64(&mut self, s: DumpSection) -> Result<u64, DumpError> {
        Ok(u64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }
    fn f64(&mut self, s: DumpSection) -> Result<f64, DumpError> {
        Ok(f64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }
}

fn mismatch(msg: impl Into<String>) -> DumpError {
    DumpError::HeaderMismatch(msg.into())
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, DumpError> {
    let h = DumpSection::Header;
    let magic: [u8; 4] = r.take(4, h)?.try_into().unwrap();
    if magic != FVD_MAGIC {
        return Err(DumpError::BadMagic(magic));
    }
    let version = r.u32(h)?;
    if version != FVD_VERSION {
        return Err(DumpError::Version { found: version });
    }
    let flags = r.u32(h)?;
    if flags & !(FLAG_IMAGE | FLAG_TRUTH | FLAG_SEEDED) != 0 {
        return Err(mismatch(format!("unknown flag bits {flags:#x}")));
    }
    let seed = r.u64(h)?;
    let dz = r.u32(h)? as usize;
    let k = r.u32(h)? as usize;
    let declared = r.u32(h)? as usize;
    let kp_count = r.u32(h)? as usize;
    let kp_bytes = r.u32(h)? as usize;
    if k == 0 {
        return Err(mismatch("dump declares zero feature maps"));
    }
    if kp_count > 0 && flags & FLAG_TRUTH == 0 {
        return Err(mismatch("keypoints declared without truth flag"));
    }
    if kp_bytes < 2 * kp_count {
        return Err(mismatch("keypoint name block smaller than its length prefixes"));
    }
    // Each map entry is 12 bytes; refuse counts the buffer cannot hold before allocating.
    let remaining = r.data.len() - r.pos;
    if k.checked_mul(12).is_none_or(|n| n > remaining) {
        return Err(DumpError::Truncated {
            section: h,
            needed: k.saturating_mul(12),
            available: remaining,
        });
    }
    let mut maps = Vec::with_capacity(k);
    for _ in 0..k {
        let hh = r.u32(h)? as usize;
        let ww = r.u32(h)? as usize;
        let cc = r.u32(h)? as usize;
        if hh == 0 || ww == 0 || cc == 0 {
            return Err(mismatch(format!("map with zero dimension {hh}x{ww}x{cc}")));
        }
        maps.push((hh, ww, cc));
    }
    let actual: usize = maps.iter().map(|m| m.2).sum();
    if actual != declared {
        return Err(mismatch(format!(
            "header declares D={declared} but maps sum to {actual}"
        )));
    }
    Ok(Header {
        flags,
        seed,
        dz,
        kp_count,
        kp_bytes,
        maps,
    })
}

impl Header {
    /// Exact payload length, or `None` on arithmetic overflow.
    fn payload_len(&self) -> Option<usize> {
        let mut total = self.dz.checked_mul(8)?;
        for &(h, w, c) in &self.maps {
            total = total.checked_add(h.checked_mul(w)?.checked_mul(c)?.checked_mul(4)?)?;
        }
        let (th, tw, _) = *self.maps.last()?;
        let px = th.checked_mul(tw)?;
        if self.flags & FLAG_IMAGE != 0 {
            total = total.checked_add(px.checked_mul(3)?)?;
        }
        if self.flags & FLAG_TRUTH != 0 {
            total = total
                .checked_add(px)?
                .checked_add(self.kp_bytes)?
                .checked_add(self.kp_count.checked_mul(16)?)?;
        }
        Some(total)
    }
}

pub fn decode_feature_dump(data: &[u8]) -> Result<GeneratedSample, DumpError> {
    let mut r = Reader { data, pos: 0 };
    let header = read_header(&mut r)?;
    let payload = header
        .payload_len()
        .ok_or_else(|| mismatch("declared payload size overflows"))?;
    let available = data.len() - r.pos;
    if available > payload {
        return Err(DumpError::TrailingBytes(available - payload));
    }
    // Shorter files fall through: the section that runs out reports itself.

    let z = {
        let bytes = r.take(header.dz * 8, DumpSection::Latent)?;
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>()
    };
    let latent = LatentCode {
        seed: (header.flags & FLAG_SEEDED != 0).then_some(header.seed),
        z,
    };

    let mut maps = Vec::with_capacity(header.maps.len());
    for (i, &(h, w, c)) in header.maps.iter().enumerate() {
        let bytes = r.take(h * w * c * 4, DumpSection::Map(i))?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        maps.push(FeatureMap::new(h, w, c, values)?);
    }
    let features = FeatureVolume::new(maps)?;
    let (th, tw) = (features.height(), features.width());

    let image = if header.flags & FLAG_IMAGE != 0 {
        let bytes = r.take(th * tw * 3, DumpSection::Image)?;
        Some(RgbImage::new(tw, th, bytes.to_vec()).expect("length checked"))
    } else {
        None
    };

    let truth = if header.flags & FLAG_TRUTH != 0 {
        let bytes = r.take(th * tw, DumpSection::Mask)?;
        let mask = LabelMask::new(tw, th, bytes.to_vec()).expect("length checked");
        let mut keypoints = Vec::with_capacity(header.kp_count.min((data.len() - r.pos) / 18));
        let mut name_bytes = 0usize;
        for _ in 0..header.kp_count {
            let len = r.u16(DumpSection::Keypoints)? as usize;
            let name = std::str::from_utf8(r.take(len, DumpSection::Keypoints)?)
                .map_err(|_| DumpError::Invalid("keypoint name is not UTF-8".into()))?
                .to_string();
            name_bytes += 2 + len;
            let x = r.f64(DumpSection::Keypoints)?;
            let y = r.f64(DumpSection::Keypoints)?;
            if !(x.is_finite() && y.is_finite()) {
                return Err(DumpError::Invalid(format!("keypoint `{name}` is not finite")));
            }
            keypoints.push(Keypoint { name, x, y });
        }
        if name_bytes != header.kp_bytes {
            return Err(mismatch(format!(
                "keypoint names occupy {name_bytes} bytes, header declares {}",
                header.kp_bytes
            )));
        }
        Some(GroundTruth { mask, keypoints })
    } else {
        None
    };
    debug_assert_eq!(r.pos, data.len());

    Ok(GeneratedSample {
        latent,
        image,
        features,
        truth,
    })
}

pub fn encode_feature_dump(sample: &GeneratedSample) -> Vec<u8> {
    let maps = sample.features.maps();
    let mut flags = 0;
    if sample.image.is_some() {
        flags |= FLAG_IMAGE;
    }
    if sample.truth.is_some() {
        flags |= FLAG_TRUTH;
    }
    if sample.latent.seed.is_some() {
        flags |= FLAG_SEEDED;
    }
    let kps: &[Keypoint] = sample.truth.as_ref().map_or(&[], |t| &t.keypoints);
    let kp_bytes: usize = kps.iter().map(|k| 2 + k.name.len()).sum();

    let mut out = Vec::new();
    out.extend_from_slice(&FVD_MAGIC);
    out.extend_from_slice(&FVD_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&sample.latent.seed.unwrap_or(0).to_le_bytes());
    for v in [
        sample.latent.dim(),
        maps.len(),
        sample.features.dim(),
        kps.len(),
        kp_bytes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    debug_assert_eq!(out.len(), FIXED_HEADER);
    for m in maps {
        for v in [m.height(), m.width(), m.channels()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for v in &sample.latent.z {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in maps {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(img) = &sample.image {
        out.extend_from_slice(&img.data);
    }
    if let Some(t) = &sample.truth {
        out.extend_from_slice(&t.mask.data);
        for k in &t.keypoints {
            out.extend_from_slice(&(k.name.len() as u16).to_le_bytes());
            out.extend_from_slice(k.name.as_bytes());
            out.extend_from_slice(&k.x.to_le_bytes());
            out.extend_from_slice(&k.y.to_le_bytes());
        }
    }
    out
}

pub fn write_feature_dump(sample: &GeneratedSample, path: &Path) -> Result<(), DumpError> {
    std::fs::write(path, encode_feature_dump(sample)).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_feature_dump(path: &Path) -> Result<GeneratedSample, DumpError> {
    let bytes = std::fs::read(path).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_feature_dump(&bytes)
}

/// Serves samples from a directory of `NNNNNN.fvd` files named by latent seed.
#[derive(Clone, Debug)]
pub struct DumpBackbone {
    dir: PathBuf,
    latent_dim: usize,
    listing_hash: String,
}

impl DumpBackbone {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackboneError> {
        let dir = dir.into();
        let mut entries: Vec<(String, u64)> = std::fs::read_dir(&dir)
            .map_err(|source| DumpError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_some_and(|x| x == "fvd"))
            .map(|e| {
                let len = e.metadata().map(|m| m.len()).unwrap_or(0);
                (e.file_name().to_string_lossy().into_owned(), len)
            })
            .collect();
        entries.sort();
        let first = entries
            .first()
            .ok_or_else(|| BackboneError::Config(format!("no .fvd files in {}", dir.display())))?;
        let latent_dim = load_feature_dump(&dir.join(&first.0))?.latent.dim();
        let listing = entries
            .iter()
            .map(|(n, l)| format!("{n}:{l}\n"))
            .collect::<String>();
        Ok(Self {
            dir,
            latent_dim,
            listing_hash: sha256_hex(listing.as_bytes()),
        })
    }

    pub fn path_for_seed(dir: &Path, seed: u64) -> PathBuf {
        dir.join(format!("{seed:06}.fvd"))
    }
}

impl Backbone for DumpBackbone {
    fn descriptor(&self) -> String {
        format!("dump:{}", self.dir.display())
    }

    fn config_hash(&self) -> String {
        self.listing_hash.clone()
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn generate(&self, latent: &LatentCode) -> Result<GeneratedSample, BackboneError> {
        let seed = latent.seed.ok_or(BackboneError::Missing(None))?;
        let path = Self::path_for_seed(&self.dir, seed);
        if !path.exists() {
            return Err(BackboneError::Missing(Some(seed)));
        }
        Ok(load_feature_dump(&path)?)
    }

    fn latent_for_seed(&self, seed: u64) -> LatentCode {
        // Dumps carry their own latents; the seed is the lookup key.
        load_feature_dump(&Self::path_for_seed(&self.dir, seed))
            .map(|s| s.latent)
            .unwrap_or(LatentCode {
                seed: Some(seed),
                z: Vec::new(),
            })
    }
}

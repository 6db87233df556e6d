//! On-disk step files.
//!
//! Layout: the 8-byte magic `LAMSSTP1`, a little-endian `u32` header length,
//! a JSON header, then the raw little-endian tensor body.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::snapshot::{AttentionSnapshot, SiteInfo};
use super::TrajectoryError;
use crate::tensor::{shape3, Latent};

const MAGIC: &[u8; 8] = b"LAMSSTP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F16,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepHeader {
    pub kind: String,
    pub t: usize,
    pub dtype: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sites: Vec<SiteInfo>,
}

/// A value that can live in a trajectory and be spilled to disk.
pub trait Payload: Clone + Send + Sync + 'static {
    const KIND: &'static str;

    /// Shape signature; all entries of a trajectory must agree on it.
    fn signature(&self) -> String;

    fn byte_len(&self) -> usize;

    /// Rounds the payload to what `precision` can represent, so that a
    /// stored-then-read value equals the recorded one.
    fn quantize(self, precision: Precision) -> Self;

    fn header(&self, t: usize, precision: Precision) -> StepHeader;

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_>;

    fn from_parts(header: &StepHeader, values: Vec<f64>) -> Result<Self, TrajectoryError>;
}

impl Payload for Latent {
    const KIND: &'static str = "latent";

    fn signature(&self) -> String {
        format!("{:?}", shape3(self))
    }

    fn byte_len(&self) -> usize {
        self.len() * 8
    }

    fn quantize(self, precision: Precision) -> Self {
        match precision {
            Precision::F64 => self,
            Precision::F16 => self.mapv(|v| f16::from_f64(v).to_f64()),
        }
    }

    fn header(&self, t: usize, precision: Precision) -> StepHeader {
        StepHeader { kind: Self::KIND.into(), t, dtype: precision, shape: Some(shape3(self)), sites: Vec::new() }
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.iter().copied())
    }

    fn from_parts(header: &StepHeader, values: Vec<f64>) -> Result<Self, TrajectoryError> {
        let [c, h, w] = header.shape.ok_or_else(|| TrajectoryError::Corrupt("latent header without shape".into()))?;
        Array3::from_shape_vec((c, h, w), values).map_err(|e| TrajectoryError::Corrupt(e.to_string()))
    }
}

impl Payload for AttentionSnapshot {
    const KIND: &'static str = "attention";

    fn signature(&self) -> String {
        serde_json::to_string(self.sites()).unwrap_or_default()
    }

    fn byte_len(&self) -> usize {
        AttentionSnapshot::byte_len(self)
    }

    fn quantize(self, precision: Precision) -> Self {
        match precision {
            Precision::F64 => self,
            Precision::F16 => {
                let (sites, maps) = self.into_parts();
                let maps = maps.into_iter().map(|m| m.mapv(|v| f16::from_f64(v).to_f64())).collect();
                AttentionSnapshot::new(sites, maps).expect("quantization keeps shapes")
            }
        }
    }

    fn header(&self, t: usize, precision: Precision) -> StepHeader {
        StepHeader { kind: Self::KIND.into(), t, dtype: precision, shape: None, sites: self.sites().to_vec() }
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.maps().iter().flat_map(|m| m.iter().copied()))
    }

    fn from_parts(header: &StepHeader, values: Vec<f64>) -> Result<Self, TrajectoryError> {
        let mut rest = values.as_slice();
        let mut maps = Vec::with_capacity(header.sites.len());
        for site in &header.sites {
            let n = site.heads * site.tokens_q * site.tokens_k;
            if rest.len() < n {
                return Err(TrajectoryError::Corrupt(format!("truncated map for site {}", site.name)));
            }
            let (head, tail) = rest.split_at(n);
            maps.push(Array3::from_shape_vec(site.map_shape(), head.to_vec()).expect("length checked"));
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(TrajectoryError::Corrupt("trailing bytes after maps".into()));
        }
        AttentionSnapshot::new(header.sites.clone(), maps)
    }
}

pub fn write_step<P: Payload>(path: &Path, t: usize, payload: &P, precision: Precision) -> Result<(), TrajectoryError> {
    let header =
        serde_json::to_vec(&payload.header(t, precision)).map_err(|e| TrajectoryError::Corrupt(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + header.len() + payload.byte_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in payload.values() {
        match precision {
            Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            Precision::F16 => buf.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    // Write-then-rename so readers never see a partial file.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_step<P: Payload>(path: &Path) -> Result<(StepHeader, P), TrajectoryError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(TrajectoryError::Corrupt(format!("{}: bad magic", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + hlen;
    if bytes.len() < body_start {
        return Err(TrajectoryError::Corrupt(format!("{}: truncated header", path.display())));
    }
    let header: StepHeader =
        serde_json::from_slice(&bytes[12..body_start]).map_err(|e| TrajectoryError::Corrupt(e.to_string()))?;
    if header.kind != P::KIND {
        return Err(TrajectoryError::Corrupt(format!("expected {} step, found {}", P::KIND, header.kind)));
    }
    let body = &bytes[body_start..];
    let width = header.dtype.width();
    if body.len() % width != 0 {
        return Err(TrajectoryError::Corrupt(format!("{}: ragged body", path.display())));
    }
    let values = match header.dtype {
        Precision::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Precision::F16 => {
            body.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f64()).collect()
        }
    };
    let payload = P::from_parts(&header, values)?;
    Ok((header, payload))
}

//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Uncompressed little-endian only: 348-byte header, 4 zero extension bytes,
//! payload at offset 352. Datatypes: uint8 (masks), int16 (labels), float32
//! (intensities). The sform is a diagonal spacing matrix plus the origin.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, LabelVolume, Mask, ScalarVolume, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

/// A volume read from disk, typed by its on-disk datatype.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Mask(Mask),
}

impl NiftiVolume {
    pub fn geometry(&self) -> &GridGeometry {
        match self {
            NiftiVolume::Scalar(v) => v.geometry(),
            NiftiVolume::Label(v) => v.geometry(),
            NiftiVolume::Mask(v) => v.geometry(),
        }
    }

    /// Any variant as intensities.
    pub fn into_scalar(self) -> ScalarVolume {
        match self {
            NiftiVolume::Scalar(v) => v,
            NiftiVolume::Label(v) => v.map(f64::from),
            NiftiVolume::Mask(v) => v.to_scalar(),
        }
    }

    /// Masks and labels as binary (nonzero = set); intensities are rejected.
    pub fn into_mask(self) -> Result<Mask> {
        match self {
            NiftiVolume::Mask(m) => Ok(m),
            NiftiVolume::Label(l) => Ok(l.map(|v| v != 0)),
            NiftiVolume::Scalar(_) => Err(Error::InvalidArgument("expected a mask, found float32 data".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            NiftiVolume::Label(l) => Ok(l),
            NiftiVolume::Mask(m) => Ok(m.map(u16::from)),
            NiftiVolume::Scalar(_) => Err(Error::InvalidArgument("expected labels, found float32 data".into())),
        }
    }
}

/// Element types with an on-disk NIfTI encoding.
pub trait NiftiElement: Copy + Send + Sync {
    const DATATYPE: i16;
    const BYTES: usize;
    fn encode(self, out: &mut Vec<u8>) -> Result<()>;
}

impl NiftiElement for f64 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BYTES: usize = 4;
    fn encode(self, out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(&(self as f32).to_le_bytes());
        Ok(())
    }
}

impl NiftiElement for u16 {
    const DATATYPE: i16 = DT_INT16;
    const BYTES: usize = 2;
    fn encode(self, out: &mut Vec<u8>) -> Result<()> {
        let v = i16::try_from(self).map_err(|_| Error::InvalidArgument(format!("label {self} exceeds int16")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
}

impl NiftiElement for bool {
    const DATATYPE: i16 = DT_UINT8;
    const BYTES: usize = 1;
    fn encode(self, out: &mut Vec<u8>) -> Result<()> {
        out.push(self as u8);
        Ok(())
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn header(geom: &GridGeometry, datatype: i16, bytes: usize) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, OFF_DIM, 3);
    for a in 0..3 {
        let d = i16::try_from(geom.dims[a]).map_err(|_| Error::Geometry(format!("dim {} exceeds int16", geom.dims[a])))?;
        put_i16(&mut h, OFF_DIM + 2 * (a + 1), d);
    }
    for a in 3..7 {
        put_i16(&mut h, OFF_DIM + 2 * (a + 1), 1);
    }
    put_i16(&mut h, OFF_DATATYPE, datatype);
    put_i16(&mut h, OFF_BITPIX, (bytes * 8) as i16);
    for a in 0..3 {
        put_f32(&mut h, OFF_PIXDIM + 4 * (a + 1), geom.spacing[a] as f32);
    }
    put_f32(&mut h, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut h, OFF_SCL_SLOPE, 1.0);
    put_i16(&mut h, OFF_SFORM_CODE, 1);
    for row in 0..3 {
        let off = OFF_SROW + 16 * row;
        put_f32(&mut h, off + 4 * row, geom.spacing[row] as f32);
        put_f32(&mut h, off + 12, geom.origin[row] as f32);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

/// Serializes a volume to NIfTI bytes.
pub fn encode<T: NiftiElement>(vol: &Volume<T>) -> Result<Vec<u8>> {
    let mut out = header(vol.geometry(), T::DATATYPE, T::BYTES)?;
    out.reserve(vol.len() * T::BYTES);
    for &v in vol.data() {
        v.encode(&mut out)?;
    }
    Ok(out)
}

pub fn write_nifti<T: NiftiElement>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(vol)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses NIfTI bytes.
pub fn decode(buf: &[u8]) -> Result<NiftiVolume> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::NotNifti(format!("file is {} bytes, shorter than the header", buf.len())));
    }
    let sizeof_hdr = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::NotNifti(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    if &buf[OFF_MAGIC..OFF_MAGIC + 4] != b"n+1\0" {
        return Err(Error::NotNifti(format!("magic {:?}", &buf[OFF_MAGIC..OFF_MAGIC + 4])));
    }
    let ndim = get_i16(buf, OFF_DIM);
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = get_i16(buf, OFF_DIM + 2 * (a + 1));
        if d < 1 {
            return Err(Error::NotNifti(format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    let extra_frames = (4..=7.min(ndim.max(3) as usize)).any(|a| get_i16(buf, OFF_DIM + 2 * a) > 1);
    if !(3..=7).contains(&ndim) || extra_frames {
        return Err(Error::NotNifti(format!("only single-frame 3D volumes are supported (dim[0] = {ndim})")));
    }
    let datatype = get_i16(buf, OFF_DATATYPE);
    let bytes = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let slope = get_f32(buf, OFF_SCL_SLOPE);
    let inter = get_f32(buf, OFF_SCL_INTER);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(Error::NotNifti(format!("intensity scaling slope={slope} inter={inter} is not supported")));
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| get_f32(buf, OFF_PIXDIM + 4 * (a + 1)) as f64);
    let origin: [f64; 3] = std::array::from_fn(|a| get_f32(buf, OFF_SROW + 16 * a + 12) as f64);
    let geom = GridGeometry::new(dims, spacing, origin)?;

    let vox_offset = get_f32(buf, OFF_VOX_OFFSET) as usize;
    let offset = vox_offset.max(HEADER_SIZE);
    let expected = geom.len() * bytes;
    let found = buf.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    let payload = &buf[offset..offset + expected];
    Ok(match datatype {
        DT_FLOAT32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            NiftiVolume::Scalar(ScalarVolume::checked(geom, data)?)
        }
        DT_INT16 => {
            let raw: Vec<i16> = payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            if raw.iter().any(|&v| v < 0) {
                return Err(Error::InvalidArgument("negative label values".into()));
            }
            NiftiVolume::Label(Volume::new(geom, raw.into_iter().map(|v| v as u16).collect())?)
        }
        _ => {
            if payload.iter().all(|&b| b <= 1) {
                NiftiVolume::Mask(Volume::new(geom, payload.iter().map(|&b| b == 1).collect())?)
            } else {
                NiftiVolume::Label(Volume::new(geom, payload.iter().map(|&b| b as u16).collect())?)
            }
        }
    })
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

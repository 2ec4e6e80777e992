//! NIfTI-1 reading and writing.
//!
//! Only the single-volume 3D subset of the format is handled: `n+1` files
//! (optionally gzip-compressed) and `ni1` header/image pairs. Intensities are
//! converted to `f32` at load with `scl_slope`/`scl_inter` applied, and the
//! affine is carried along as metadata only.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const SPACING_TOLERANCE: f64 = 1e-6;

/// Voxel grid shape, spacing in mm and the voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
}

impl VolumeGeometry {
    /// Geometry with a diagonal affine built from `spacing`.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidGeometry(format!("voxel count overflows for {dims:?}")))?;
        let mut affine = [[0.0; 4]; 4];
        for (axis, &s) in spacing.iter().enumerate() {
            affine[axis][axis] = s;
        }
        affine[3][3] = 1.0;
        Ok(Self {
            dims,
            spacing,
            affine,
        })
    }

    pub fn with_affine(mut self, affine: [[f64; 4]; 4]) -> Self {
        self.affine = affine;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &[[f64; 4]; 4] {
        &self.affine
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        voxel_volume_mm3(self)
    }

    /// Linear offset of voxel `(x, y, z)`; x varies fastest, as on disk.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Same dims and spacing (within 1e-6 mm). The affine is not compared.
    pub fn same_grid(&self, other: &VolumeGeometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() < SPACING_TOLERANCE)
    }
}

/// Volume of one voxel in mm³.
pub fn voxel_volume_mm3(geometry: &VolumeGeometry) -> f64 {
    let [sx, sy, sz] = geometry.spacing;
    sx * sy * sz
}

/// On-disk voxel types this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub const ALL: [Datatype; 5] = [
        Datatype::U8,
        Datatype::I16,
        Datatype::I32,
        Datatype::F32,
        Datatype::F64,
    ];

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            8 => Ok(Datatype::I32),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        (self.byte_size() * 8) as i16
    }

    pub fn byte_size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Datatype::U8 => "uint8",
            Datatype::I16 => "int16",
            Datatype::I32 => "int32",
            Datatype::F32 => "float32",
            Datatype::F64 => "float64",
        }
    }

    fn integer_range(self) -> Option<(f64, f64)> {
        match self {
            Datatype::U8 => Some((0.0, u8::MAX as f64)),
            Datatype::I16 => Some((i16::MIN as f64, i16::MAX as f64)),
            Datatype::I32 => Some((i32::MIN as f64, i32::MAX as f64)),
            Datatype::F32 | Datatype::F64 => None,
        }
    }
}

/// Linear intensity scaling `value = raw * slope + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub slope: f64,
    pub intercept: f64,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling {
        slope: 1.0,
        intercept: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.slope == 1.0 && self.intercept == 0.0
    }

    /// NIfTI treats a zero (or unusable) slope as "no scaling".
    fn from_header(slope: f32, intercept: f32) -> Self {
        if slope == 0.0 || !slope.is_finite() {
            Scaling::IDENTITY
        } else {
            Scaling {
                slope: slope as f64,
                intercept: if intercept.is_finite() {
                    intercept as f64
                } else {
                    0.0
                },
            }
        }
    }

    #[inline]
    fn apply(&self, raw: f64) -> f32 {
        if self.is_identity() {
            raw as f32
        } else {
            (raw * self.slope + self.intercept) as f32
        }
    }
}

impl Default for Scaling {
    fn default() -> Self {
        Scaling::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ByteOrder {
    #[default]
    Little,
    Big,
}

/// A scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    geometry: VolumeGeometry,
    data: Vec<f32>,
    scaling: Scaling,
    datatype: Datatype,
}

impl VoxelVolume {
    /// New float32 volume with identity scaling.
    pub fn new(geometry: VolumeGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            geometry,
            data,
            scaling: Scaling::IDENTITY,
            datatype: Datatype::F32,
        })
    }

    pub fn from_fn(
        geometry: VolumeGeometry,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let data = (0..geometry.voxel_count())
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(geometry, data)
    }

    /// Storage type and scaling used when this volume is written back out.
    pub fn with_storage(mut self, datatype: Datatype, scaling: Scaling) -> Self {
        self.datatype = datatype;
        self.scaling = scaling;
        self
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn datatype(&self) -> Datatype {
        self.datatype
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Binary mask, 0 = background, 1 = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    geometry: VolumeGeometry,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(geometry: VolumeGeometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidMask {
                index,
                value: data[index] as f32,
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: VolumeGeometry) -> Self {
        let n = geometry.voxel_count();
        Self {
            geometry,
            data: vec![0; n],
        }
    }

    pub fn from_fn(geometry: VolumeGeometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let data = (0..geometry.voxel_count())
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                f(x, y, z) as u8
            })
            .collect();
        Self { geometry, data }
    }

    /// Interprets a loaded volume as a mask; every voxel must be exactly 0 or 1.
    pub fn from_volume(volume: &VoxelVolume) -> Result<Self> {
        let mut data = Vec::with_capacity(volume.data.len());
        for (index, &v) in volume.data.iter().enumerate() {
            match v {
                v if v == 0.0 => data.push(0),
                v if v == 1.0 => data.push(1),
                value => return Err(Error::InvalidMask { index, value }),
            }
        }
        Ok(Self {
            geometry: volume.geometry.clone(),
            data,
        })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates of every foreground voxel, in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.geometry.coords(i))
    }

    pub fn zeroed(&self) -> Self {
        Self::empty(self.geometry.clone())
    }
}

/// The subset of NIfTI-1 header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub byte_order: ByteOrder,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            datatype: Datatype::F32.code(),
            bitpix: Datatype::F32.bitpix(),
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm + sec
            xyzt_units: 2 | 8,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: *MAGIC_SINGLE,
            byte_order: ByteOrder::Little,
        }
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        b
    }
    fn i16(&self, off: usize) -> i16 {
        let b = self.bytes::<2>(off);
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn i32(&self, off: usize) -> i32 {
        let b = self.bytes::<4>(off);
        if self.big {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }
    fn f32(&self, off: usize) -> f32 {
        let b = self.bytes::<4>(off);
        if self.big {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

struct FieldsMut<'a> {
    buf: &'a mut [u8],
    big: bool,
}

impl FieldsMut<'_> {
    fn put(&mut self, off: usize, le: &[u8], be: &[u8]) {
        let src = if self.big { be } else { le };
        self.buf[off..off + src.len()].copy_from_slice(src);
    }
    fn i16(&mut self, off: usize, v: i16) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn i32(&mut self, off: usize, v: i32) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn f32(&mut self, off: usize, v: f32) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
}

impl NiftiHeader {
    /// Parses the 348-byte header, detecting byte order from `dim[0]`.
    pub fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "file holds {} bytes, a header needs {HEADER_SIZE}",
                buf.len()
            )));
        }
        let dim0_le = i16::from_le_bytes([buf[40], buf[41]]);
        let dim0_be = i16::from_be_bytes([buf[40], buf[41]]);
        let big = match (dim0_le, dim0_be) {
            (1..=7, _) => false,
            (_, 1..=7) => true,
            _ => {
                return Err(Error::MalformedHeader(format!(
                    "dim[0] = {dim0_le} is outside 1..=7 in either byte order"
                )))
            }
        };
        let f = Fields { buf, big };
        let sizeof_hdr = f.i32(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::MalformedHeader(format!(
                "sizeof_hdr = {sizeof_hdr}, expected {HEADER_SIZE}"
            )));
        }
        let magic = f.bytes::<4>(344);
        if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
            return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = f.i16(40 + 2 * i);
            pixdim[i] = f.f32(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c);
            }
        }
        Ok(Self {
            sizeof_hdr,
            dim,
            datatype: f.i16(70),
            bitpix: f.i16(72),
            pixdim,
            vox_offset: f.f32(108),
            scl_slope: f.f32(112),
            scl_inter: f.f32(116),
            xyzt_units: buf[123],
            descrip: f.bytes::<80>(148),
            qform_code: f.i16(252),
            sform_code: f.i16(254),
            quatern: [f.f32(256), f.f32(260), f.f32(264)],
            qoffset: [f.f32(268), f.f32(272), f.f32(276)],
            srow,
            magic,
            byte_order: if big { ByteOrder::Big } else { ByteOrder::Little },
        })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut buf = [0u8; HEADER_SIZE];
        let mut f = FieldsMut {
            buf: &mut buf,
            big: self.byte_order == ByteOrder::Big,
        };
        f.i32(0, self.sizeof_hdr);
        // regular = 'r' for old ANALYZE readers
        f.buf[38] = b'r';
        for i in 0..8 {
            f.i16(40 + 2 * i, self.dim[i]);
            f.f32(76 + 4 * i, self.pixdim[i]);
        }
        f.i16(70, self.datatype);
        f.i16(72, self.bitpix);
        f.f32(108, self.vox_offset);
        f.f32(112, self.scl_slope);
        f.f32(116, self.scl_inter);
        f.buf[123] = self.xyzt_units;
        f.buf[148..228].copy_from_slice(&self.descrip);
        f.i16(252, self.qform_code);
        f.i16(254, self.sform_code);
        for i in 0..3 {
            f.f32(256 + 4 * i, self.quatern[i]);
            f.f32(268 + 4 * i, self.qoffset[i]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                f.f32(280 + 16 * r + 4 * c, v);
            }
        }
        f.buf[344..348].copy_from_slice(&self.magic);
        buf
    }

    pub fn datatype(&self) -> Result<Datatype> {
        let dt = Datatype::from_code(self.datatype)?;
        if self.bitpix != dt.bitpix() {
            return Err(Error::MalformedHeader(format!(
                "bitpix {} does not match datatype {}",
                self.bitpix,
                dt.name()
            )));
        }
        Ok(dt)
    }

    /// Spatial dims; any dimension past the third must be 1.
    pub fn dims(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0] as usize;
        let mut dims = [1usize; 3];
        for axis in 0..ndim {
            let d = self.dim[axis + 1];
            if d < 1 {
                return Err(Error::MalformedHeader(format!("dim[{}] = {d}", axis + 1)));
            }
            if axis < 3 {
                dims[axis] = d as usize;
            } else if d != 1 {
                return Err(Error::MalformedHeader(format!(
                    "only 3D volumes are supported, dim[{}] = {d}",
                    axis + 1
                )));
            }
        }
        Ok(dims)
    }

    pub fn scaling(&self) -> Scaling {
        Scaling::from_header(self.scl_slope, self.scl_inter)
    }

    pub fn geometry(&self) -> Result<VolumeGeometry> {
        let dims = self.dims()?;
        let ndim = self.dim[0] as usize;
        let mut spacing = [1.0f64; 3];
        for (axis, s) in spacing.iter_mut().enumerate().take(ndim.min(3)) {
            *s = (self.pixdim[axis + 1] as f64).abs();
        }
        let geometry = VolumeGeometry::new(dims, spacing)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        Ok(match self.affine(spacing) {
            Some(affine) => geometry.with_affine(affine),
            None => geometry,
        })
    }

    fn affine(&self, spacing: [f64; 3]) -> Option<[[f64; 4]; 4]> {
        let mut m = [[0.0; 4]; 4];
        m[3][3] = 1.0;
        if self.sform_code > 0 {
            for (r, row) in self.srow.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    m[r][c] = v as f64;
                }
            }
            return Some(m);
        }
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let scale = [spacing[0], spacing[1], spacing[2] * qfac];
            for row in 0..3 {
                for col in 0..3 {
                    m[row][col] = r[row][col] * scale[col];
                }
                m[row][3] = self.qoffset[row] as f64;
            }
            return Some(m);
        }
        None
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    if head.starts_with(&GZIP_MAGIC) {
        Ok(Box::new(MultiGzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_header_from(reader: &mut dyn Read, path: &Path) -> Result<NiftiHeader> {
    let mut buf = Vec::with_capacity(HEADER_SIZE);
    reader
        .take(HEADER_SIZE as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    NiftiHeader::parse(&buf)
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let mut reader = open_maybe_gz(path)?;
    read_header_from(&mut reader, path)
}

/// `foo.hdr[.gz]` -> `foo.img[.gz]`.
fn pair_image_path(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let image = if let Some(stem) = name.strip_suffix(".hdr.gz") {
        format!("{stem}.img.gz")
    } else if let Some(stem) = name.strip_suffix(".hdr") {
        format!("{stem}.img")
    } else {
        return None;
    };
    Some(path.with_file_name(image))
}

/// Loads a volume, applying intensity scaling.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<VoxelVolume> {
    let path = path.as_ref();
    let mut reader = open_maybe_gz(path)?;
    let header = read_header_from(&mut reader, path)?;
    let datatype = header.datatype()?;
    let geometry = header.geometry()?;
    let scaling = header.scaling();

    let mut payload = Vec::new();
    if &header.magic == MAGIC_PAIR {
        let image_path = pair_image_path(path).ok_or_else(|| {
            Error::MalformedHeader(format!(
                "{} has ni1 magic but is not a .hdr file",
                path.display()
            ))
        })?;
        let mut image = open_maybe_gz(&image_path)?;
        skip(&mut image, header.vox_offset.max(0.0) as usize, &image_path)?;
        image
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(&image_path, e))?;
    } else {
        let offset = header.vox_offset as usize;
        if !(header.vox_offset.is_finite()) || offset < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "vox_offset {} precedes the end of the header",
                header.vox_offset
            )));
        }
        // extension blocks are skipped unread
        skip(&mut reader, offset - HEADER_SIZE, path)?;
        reader
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
    }

    let expected = geometry.voxel_count() * datatype.byte_size();
    if payload.len() < expected {
        return Err(Error::TruncatedData {
            expected,
            actual: payload.len(),
        });
    }
    let data = decode_payload(
        &payload[..expected],
        datatype,
        header.byte_order == ByteOrder::Big,
        scaling,
    );
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(VoxelVolume {
        geometry,
        data,
        scaling,
        datatype,
    })
}

/// Loads a mask file; voxel values must be exactly 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SegmentationMask> {
    SegmentationMask::from_volume(&read_nifti(path)?)
}

fn skip(reader: &mut dyn Read, n: usize, path: &Path) -> Result<()> {
    let copied = std::io::copy(&mut reader.take(n as u64), &mut std::io::sink())
        .map_err(|e| Error::io(path, e))?;
    if copied < n as u64 {
        return Err(Error::TruncatedData {
            expected: n,
            actual: copied as usize,
        });
    }
    Ok(())
}

fn decode_payload(bytes: &[u8], datatype: Datatype, big: bool, scaling: Scaling) -> Vec<f32> {
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|c| {
                    let b: [u8; $n] = c.try_into().unwrap();
                    let v = if big {
                        <$t>::from_be_bytes(b)
                    } else {
                        <$t>::from_le_bytes(b)
                    };
                    scaling.apply(v as f64)
                })
                .collect()
        };
    }
    match datatype {
        Datatype::U8 => bytes.iter().map(|&v| scaling.apply(v as f64)).collect(),
        Datatype::I16 => decode!(i16, 2),
        Datatype::I32 => decode!(i32, 4),
        Datatype::F32 => decode!(f32, 4),
        Datatype::F64 => decode!(f64, 8),
    }
}

/// How a volume is laid out on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    pub datatype: Datatype,
    pub scaling: Scaling,
    pub compress: bool,
    pub byte_order: ByteOrder,
}

impl WriteOptions {
    pub fn new(datatype: Datatype, compress: bool) -> Self {
        Self {
            datatype,
            scaling: Scaling::IDENTITY,
            compress,
            byte_order: ByteOrder::Little,
        }
    }
}

/// Something that can be written as a NIfTI file.
pub enum NiftiSource<'a> {
    Volume(&'a VoxelVolume),
    Mask(&'a SegmentationMask),
}

impl<'a> From<&'a VoxelVolume> for NiftiSource<'a> {
    fn from(v: &'a VoxelVolume) -> Self {
        NiftiSource::Volume(v)
    }
}

impl<'a> From<&'a SegmentationMask> for NiftiSource<'a> {
    fn from(m: &'a SegmentationMask) -> Self {
        NiftiSource::Mask(m)
    }
}

impl NiftiSource<'_> {
    fn geometry(&self) -> &VolumeGeometry {
        match self {
            NiftiSource::Volume(v) => &v.geometry,
            NiftiSource::Mask(m) => &m.geometry,
        }
    }

    fn default_options(&self, compress: bool) -> WriteOptions {
        match self {
            NiftiSource::Volume(v) => WriteOptions {
                scaling: v.scaling,
                ..WriteOptions::new(v.datatype, compress)
            },
            NiftiSource::Mask(_) => WriteOptions::new(Datatype::U8, compress),
        }
    }
}

/// Writes a volume in its own storage type, or a mask as uint8.
pub fn write_nifti<'a>(
    source: impl Into<NiftiSource<'a>>,
    path: impl AsRef<Path>,
    compress: bool,
) -> Result<()> {
    let source = source.into();
    let options = source.default_options(compress);
    write_nifti_with(source, path, &options)
}

/// Writes with explicit storage options. Fails if any value cannot be stored
/// exactly under the requested datatype and scaling.
pub fn write_nifti_with<'a>(
    source: impl Into<NiftiSource<'a>>,
    path: impl AsRef<Path>,
    options: &WriteOptions,
) -> Result<()> {
    let source = source.into();
    let path = path.as_ref();
    let bytes = encode(&source, options)?;
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let file = BufWriter::new(File::create(&tmp)?);
        if options.compress {
            let mut gz = GzEncoder::new(file, Compression::default());
            gz.write_all(&bytes)?;
            gz.finish()?.flush()?;
        } else {
            let mut file = file;
            file.write_all(&bytes)?;
            file.flush()?;
        }
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Header + extension flag + payload of an uncompressed single-file NIfTI.
fn encode(source: &NiftiSource<'_>, options: &WriteOptions) -> Result<Vec<u8>> {
    let geometry = source.geometry();
    let dt = options.datatype;
    let scaling = options.scaling;
    if !(scaling.slope.is_finite() && scaling.slope != 0.0 && scaling.intercept.is_finite()) {
        return Err(Error::InvalidArgument(format!("unusable scaling {scaling:?}")));
    }

    let mut header = NiftiHeader {
        datatype: dt.code(),
        bitpix: dt.bitpix(),
        scl_slope: scaling.slope as f32,
        scl_inter: scaling.intercept as f32,
        byte_order: options.byte_order,
        sform_code: 1,
        ..NiftiHeader::default()
    };
    let [nx, ny, nz] = geometry.dims();
    for (slot, d) in header.dim[1..4].iter_mut().zip([nx, ny, nz]) {
        *slot = i16::try_from(d).map_err(|_| {
            Error::InvalidGeometry(format!("dimension {d} exceeds the NIfTI-1 limit"))
        })?;
    }
    for (axis, &s) in geometry.spacing().iter().enumerate() {
        header.pixdim[axis + 1] = s as f32;
    }
    for (r, row) in header.srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = geometry.affine()[r][c] as f32;
        }
    }
    let tag = b"testvol";
    header.descrip[..tag.len()].copy_from_slice(tag);

    let n = geometry.voxel_count();
    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + n * dt.byte_size());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; 4]);
    let big = options.byte_order == ByteOrder::Big;

    match source {
        NiftiSource::Mask(m) => {
            for (index, &v) in m.data.iter().enumerate() {
                encode_value(&mut out, v as f32, index, dt, scaling, big)?;
            }
        }
        NiftiSource::Volume(v) => {
            for (index, &value) in v.data.iter().enumerate() {
                encode_value(&mut out, value, index, dt, scaling, big)?;
            }
        }
    }
    Ok(out)
}

fn encode_value(
    out: &mut Vec<u8>,
    value: f32,
    index: usize,
    dt: Datatype,
    scaling: Scaling,
    big: bool,
) -> Result<()> {
    let unrepresentable = || Error::Unrepresentable {
        value: value as f64,
        index,
        datatype: dt.name(),
    };
    let raw = if scaling.is_identity() {
        value as f64
    } else {
        (value as f64 - scaling.intercept) / scaling.slope
    };
    macro_rules! push {
        ($v:expr) => {
            if big {
                out.extend_from_slice(&$v.to_be_bytes())
            } else {
                out.extend_from_slice(&$v.to_le_bytes())
            }
        };
    }
    match dt.integer_range() {
        Some((lo, hi)) => {
            let r = raw.round();
            if !(lo..=hi).contains(&r) || scaling.apply(r).to_bits() != value.to_bits() {
                return Err(unrepresentable());
            }
            match dt {
                Datatype::U8 => out.push(r as u8),
                Datatype::I16 => push!(r as i16),
                _ => push!(r as i32),
            }
        }
        None => {
            if dt == Datatype::F32 {
                let r = raw as f32;
                if scaling.apply(r as f64).to_bits() != value.to_bits() {
                    return Err(unrepresentable());
                }
                push!(r);
            } else {
                if scaling.apply(raw).to_bits() != value.to_bits() {
                    return Err(unrepresentable());
                }
                push!(raw);
            }
        }
    }
    Ok(())
}

//! File formats: `PXGRID1` voxel grids, `PXMODEL1` model checkpoints,
//! `PXFRAME1` trajectories, and CSV/PLY exporters.
//!
//! All binary payloads are little-endian. Grid scalars are stored as f32
//! regardless of the in-memory scalar type; masks and labels as single
//! bytes. Readers validate magic bytes, element kinds, reserved bytes,
//! payload sizes and value domains, and reject trailing garbage.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::grid::{
    DensityGrid, FeatureGrid, GridDims, GridError, OccupancyMask, PartLabelGrid,
};
use crate::materials::{MaterialClass, MaterialError, MaterialGrid};
use crate::mpm::Trajectory;
use crate::predictor::{LossBreakdown, PredictionGrid, PredictorError, PredictorModel};
use crate::real::Real;

pub const GRID_MAGIC: [u8; 8] = *b"PXGRID1\0";
pub const MODEL_MAGIC: [u8; 8] = *b"PXMODEL1";
pub const FRAME_MAGIC: [u8; 8] = *b"PXFRAME1";

/// Number of parameter blobs in a model checkpoint (two weight/bias pairs
/// for the head plus the projector pair).
pub const MODEL_LAYER_COUNT: u32 = 6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },
    #[error("bad element kind: expected {expected}, found {found}")]
    BadKind { expected: u8, found: u8 },
    #[error("unknown element kind {0}")]
    UnknownKind(u8),
    #[error("reserved header bytes must be zero")]
    ReservedNonzero,
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: u32, found: u32 },
    #[error("grid size mismatch between paired files: {0} vs {1}")]
    PairMismatch(usize, usize),
    #[error("non-finite value at element {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid boolean byte {value} at element {index}")]
    BadBool { index: usize, value: u8 },
    #[error("invalid class byte {value} at voxel {index}")]
    BadClassByte { index: usize, value: u8 },
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("layer count must be {MODEL_LAYER_COUNT}, found {0}")]
    BadLayerCount(u32),
    #[error("frame {frame} has {found} particles, expected {expected}")]
    FrameCountMismatch {
        frame: usize,
        expected: u32,
        found: u32,
    },
    #[error("trajectory file contains no frames")]
    EmptyTrajectory,
    #[error("frame index {frame} out of range ({frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum ElementKind {
    F32 = 0,
    U8 = 1,
    Bool = 2,
}

impl ElementKind {
    fn from_u8(v: u8) -> Result<Self, IoError> {
        match v {
            0 => Ok(Self::F32),
            1 => Ok(Self::U8),
            2 => Ok(Self::Bool),
            other => Err(IoError::UnknownKind(other)),
        }
    }
}

fn write_grid_header<W: Write>(w: &mut W, n: u32, d: u32, kind: ElementKind) -> Result<(), IoError> {
    w.write_all(&GRID_MAGIC)?;
    w.write_u32::<LittleEndian>(n)?;
    w.write_u32::<LittleEndian>(d)?;
    w.write_u8(kind as u8)?;
    w.write_all(&[0u8; 7])?;
    Ok(())
}

fn expect_magic<R: Read>(r: &mut R, expected: &[u8; 8]) -> Result<(), IoError> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != expected {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

struct GridHeader {
    dims: GridDims,
}

fn read_grid_header<R: Read>(r: &mut R, expected_kind: ElementKind) -> Result<GridHeader, IoError> {
    expect_magic(r, &GRID_MAGIC)?;
    let n = r.read_u32::<LittleEndian>()?;
    let d = r.read_u32::<LittleEndian>()?;
    let kind_byte = r.read_u8()?;
    let mut reserved = [0u8; 7];
    r.read_exact(&mut reserved)?;
    if reserved != [0u8; 7] {
        return Err(IoError::ReservedNonzero);
    }
    let kind = ElementKind::from_u8(kind_byte)?;
    if kind != expected_kind {
        return Err(IoError::BadKind {
            expected: expected_kind as u8,
            found: kind_byte,
        });
    }
    let dims = GridDims::new(n as usize, d as usize)?;
    Ok(GridHeader { dims })
}

/// Errors if any byte remains unread.
fn expect_eof<R: Read>(r: &mut R) -> Result<(), IoError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(IoError::TrailingBytes),
    }
}

fn write_f32_payload<T: Real, W: Write>(w: &mut W, values: &[T]) -> Result<(), IoError> {
    for (index, v) in values.iter().enumerate() {
        let f = v.to64() as f32;
        if !f.is_finite() {
            return Err(IoError::NonFiniteValue { index });
        }
        w.write_f32::<LittleEndian>(f)?;
    }
    Ok(())
}

fn read_f32_payload<T: Real, R: Read>(r: &mut R, count: usize) -> Result<Vec<T>, IoError> {
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let f = r.read_f32::<LittleEndian>()?;
        if !f.is_finite() {
            return Err(IoError::NonFiniteValue { index });
        }
        out.push(T::of(f as f64));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PXGRID1 readers and writers, one pair per grid type.
// ---------------------------------------------------------------------------

pub fn write_feature_grid<T: Real>(path: impl AsRef<Path>, grid: &FeatureGrid<T>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims = grid.dims();
    write_grid_header(&mut w, dims.n as u32, dims.d as u32, ElementKind::F32)?;
    write_f32_payload(&mut w, grid.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_grid<T: Real>(path: impl AsRef<Path>) -> Result<FeatureGrid<T>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_grid_header(&mut r, ElementKind::F32)?;
    let data = read_f32_payload(&mut r, header.dims.elements())?;
    expect_eof(&mut r)?;
    Ok(FeatureGrid::from_data(header.dims, data)?)
}

pub fn write_density_grid<T: Real>(path: impl AsRef<Path>, grid: &DensityGrid<T>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid_header(&mut w, grid.n() as u32, 1, ElementKind::F32)?;
    write_f32_payload(&mut w, grid.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_density_grid<T: Real>(path: impl AsRef<Path>) -> Result<DensityGrid<T>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_grid_header(&mut r, ElementKind::F32)?;
    if header.dims.d != 1 {
        return Err(IoError::ChannelMismatch {
            expected: 1,
            found: header.dims.d as u32,
        });
    }
    let data = read_f32_payload(&mut r, header.dims.voxels())?;
    expect_eof(&mut r)?;
    Ok(DensityGrid::from_data(header.dims.n, data)?)
}

pub fn write_occupancy(path: impl AsRef<Path>, mask: &OccupancyMask) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid_header(&mut w, mask.n() as u32, 1, ElementKind::Bool)?;
    for b in mask.data() {
        w.write_u8(u8::from(*b))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_occupancy(path: impl AsRef<Path>) -> Result<OccupancyMask, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_grid_header(&mut r, ElementKind::Bool)?;
    if header.dims.d != 1 {
        return Err(IoError::ChannelMismatch {
            expected: 1,
            found: header.dims.d as u32,
        });
    }
    let mut bytes = vec![0u8; header.dims.voxels()];
    r.read_exact(&mut bytes)?;
    expect_eof(&mut r)?;
    let mut data = Vec::with_capacity(bytes.len());
    for (index, value) in bytes.into_iter().enumerate() {
        match value {
            0 => data.push(false),
            1 => data.push(true),
            _ => return Err(IoError::BadBool { index, value }),
        }
    }
    Ok(OccupancyMask::from_data(header.dims.n, data)?)
}

pub fn write_part_labels(path: impl AsRef<Path>, labels: &PartLabelGrid) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid_header(&mut w, labels.n() as u32, 1, ElementKind::U8)?;
    w.write_all(labels.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_part_labels(path: impl AsRef<Path>) -> Result<PartLabelGrid, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_grid_header(&mut r, ElementKind::U8)?;
    if header.dims.d != 1 {
        return Err(IoError::ChannelMismatch {
            expected: 1,
            found: header.dims.d as u32,
        });
    }
    let mut data = vec![0u8; header.dims.voxels()];
    r.read_exact(&mut data)?;
    expect_eof(&mut r)?;
    Ok(PartLabelGrid::from_data(header.dims.n, data)?)
}

/// Writes a material grid as a pair of files: a class-byte grid and a
/// 3-channel parameter grid.
pub fn write_material_grid<T: Real>(
    class_path: impl AsRef<Path>,
    params_path: impl AsRef<Path>,
    grid: &MaterialGrid<T>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(class_path)?);
    write_grid_header(&mut w, grid.n() as u32, 1, ElementKind::U8)?;
    for class in grid.classes() {
        w.write_u8(class.as_u8())?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(params_path)?);
    write_grid_header(&mut w, grid.n() as u32, 3, ElementKind::F32)?;
    for triple in grid.params() {
        write_f32_payload(&mut w, triple)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_material_grid<T: Real>(
    class_path: impl AsRef<Path>,
    params_path: impl AsRef<Path>,
) -> Result<MaterialGrid<T>, IoError> {
    let mut r = BufReader::new(File::open(class_path)?);
    let header = read_grid_header(&mut r, ElementKind::U8)?;
    if header.dims.d != 1 {
        return Err(IoError::ChannelMismatch {
            expected: 1,
            found: header.dims.d as u32,
        });
    }
    let n = header.dims.n;
    let mut bytes = vec![0u8; header.dims.voxels()];
    r.read_exact(&mut bytes)?;
    expect_eof(&mut r)?;
    let mut classes = Vec::with_capacity(bytes.len());
    for (index, value) in bytes.into_iter().enumerate() {
        classes.push(
            MaterialClass::from_u8(value)
                .map_err(|_| IoError::BadClassByte { index, value })?,
        );
    }

    let mut r = BufReader::new(File::open(params_path)?);
    let header = read_grid_header(&mut r, ElementKind::F32)?;
    if header.dims.d != 3 {
        return Err(IoError::ChannelMismatch {
            expected: 3,
            found: header.dims.d as u32,
        });
    }
    if header.dims.n != n {
        return Err(IoError::PairMismatch(n, header.dims.n));
    }
    let flat: Vec<T> = read_f32_payload(&mut r, header.dims.elements())?;
    expect_eof(&mut r)?;
    let params: Vec<[T; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(MaterialGrid::from_parts(n, classes, params)?)
}

pub fn write_prediction_grid<T: Real>(
    path: impl AsRef<Path>,
    grid: &PredictionGrid<T>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid_header(
        &mut w,
        grid.n() as u32,
        PredictionGrid::<T>::CHANNELS as u32,
        ElementKind::F32,
    )?;
    write_f32_payload(&mut w, grid.raw())?;
    w.flush()?;
    Ok(())
}

pub fn read_prediction_grid<T: Real>(path: impl AsRef<Path>) -> Result<PredictionGrid<T>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_grid_header(&mut r, ElementKind::F32)?;
    if header.dims.d != PredictionGrid::<T>::CHANNELS {
        return Err(IoError::ChannelMismatch {
            expected: PredictionGrid::<T>::CHANNELS as u32,
            found: header.dims.d as u32,
        });
    }
    let data = read_f32_payload(&mut r, header.dims.elements())?;
    expect_eof(&mut r)?;
    Ok(PredictionGrid::from_raw(header.dims.n, data)?)
}

// ---------------------------------------------------------------------------
// PXMODEL1 checkpoints.
// ---------------------------------------------------------------------------

/// Saves a model checkpoint. Parameters are written as f64 in declaration
/// order (projector weight, projector bias, two head layers), preceded by
/// the feature dimension and hidden width that fix every blob's shape.
pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &PredictorModel<T>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(model.d() as u32)?;
    w.write_u32::<LittleEndian>(model.h() as u32)?;
    w.write_u32::<LittleEndian>(MODEL_LAYER_COUNT)?;
    for (index, v) in model.params().iter().enumerate() {
        let f = v.to64();
        if !f.is_finite() {
            return Err(IoError::NonFiniteValue { index });
        }
        w.write_f64::<LittleEndian>(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<PredictorModel<T>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, &MODEL_MAGIC)?;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let layers = r.read_u32::<LittleEndian>()?;
    if layers != MODEL_LAYER_COUNT {
        return Err(IoError::BadLayerCount(layers));
    }
    let count = PredictorModel::<T>::expected_param_count(d, h);
    let mut params = Vec::with_capacity(count);
    for index in 0..count {
        let f = r.read_f64::<LittleEndian>()?;
        if !f.is_finite() {
            return Err(IoError::NonFiniteValue { index });
        }
        params.push(T::of(f));
    }
    expect_eof(&mut r)?;
    Ok(PredictorModel::from_params(d, h, params)?)
}

// ---------------------------------------------------------------------------
// PXFRAME1 trajectories.
// ---------------------------------------------------------------------------

/// Writes per-frame particle positions. Each frame is an independent
/// record: magic, u32 particle count, then xyz f32 triples.
pub fn write_trajectory<T: Real>(path: impl AsRef<Path>, trajectory: &Trajectory<T>) -> Result<(), IoError> {
    if trajectory.positions.is_empty() {
        return Err(IoError::EmptyTrajectory);
    }
    let mut w = BufWriter::new(File::create(path)?);
    for frame in &trajectory.positions {
        w.write_all(&FRAME_MAGIC)?;
        w.write_u32::<LittleEndian>(frame.len() as u32)?;
        for p in frame {
            write_f32_payload(&mut w, p)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<T: Real>(path: impl AsRef<Path>) -> Result<Trajectory<T>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut positions: Vec<Vec<[T; 3]>> = Vec::new();
    let mut expected: Option<u32> = None;
    loop {
        let mut magic = [0u8; 8];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof && positions.is_empty() => {
                return Err(IoError::EmptyTrajectory);
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        if magic != FRAME_MAGIC {
            return Err(IoError::BadMagic {
                expected: String::from_utf8_lossy(&FRAME_MAGIC).into_owned(),
                found: magic.to_vec(),
            });
        }
        let count = r.read_u32::<LittleEndian>()?;
        match expected {
            None => expected = Some(count),
            Some(e) if e != count => {
                return Err(IoError::FrameCountMismatch {
                    frame: positions.len(),
                    expected: e,
                    found: count,
                });
            }
            Some(_) => {}
        }
        let flat: Vec<T> = read_f32_payload(&mut r, count as usize * 3)?;
        positions.push(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
    }
    Ok(Trajectory {
        positions,
        velocities: None,
    })
}

// ---------------------------------------------------------------------------
// Text exporters.
// ---------------------------------------------------------------------------

/// Writes a trajectory as CSV with columns `frame,id,x,y,z`.
pub fn write_trajectory_csv<T: Real>(
    path: impl AsRef<Path>,
    trajectory: &Trajectory<T>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame,id,x,y,z")?;
    for (frame, positions) in trajectory.positions.iter().enumerate() {
        for (id, p) in positions.iter().enumerate() {
            writeln!(
                w,
                "{frame},{id},{},{},{}",
                p[0].to64(),
                p[1].to64(),
                p[2].to64()
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one frame of a trajectory as an ASCII PLY point cloud.
pub fn write_frame_ply<T: Real>(
    path: impl AsRef<Path>,
    trajectory: &Trajectory<T>,
    frame: usize,
) -> Result<(), IoError> {
    let positions = trajectory
        .positions
        .get(frame)
        .ok_or(IoError::FrameOutOfRange {
            frame,
            frames: trajectory.positions.len(),
        })?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", positions.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in positions {
        writeln!(
            w,
            "{} {} {}",
            p[0].to64() as f32,
            p[1].to64() as f32,
            p[2].to64() as f32
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a training loss trace as CSV with columns
/// `epoch,total,ce,mse_e,mse_nu,mse_rho`.
pub fn write_loss_trace_csv<T: Real>(
    path: impl AsRef<Path>,
    trace: &[LossBreakdown<T>],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,total,ce,mse_e,mse_nu,mse_rho")?;
    for (epoch, loss) in trace.iter().enumerate() {
        writeln!(
            w,
            "{epoch},{},{},{},{},{}",
            loss.total.to64(),
            loss.ce.to64(),
            loss.mse_e.to64(),
            loss.mse_nu.to64(),
            loss.mse_rho.to64()
        )?;
    }
    w.flush()?;
    Ok(())
}

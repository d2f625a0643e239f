//! Volume file I/O.
//!
//! Two formats are supported:
//!
//! * `.svol` — the internal raw format: an 8-byte magic `SINUSVOL`, a `u32`
//!   version, the shape as three `u32`, the spacing as three `f32`, then the
//!   voxel data as little-endian `f32` in C order `(D, H, W)`. Read/write.
//! * `.nii` / `.nii.gz` — NIfTI-1, read-only. Integer and float voxel types
//!   are converted to `f32` with `scl_slope`/`scl_inter` applied.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::Volume;

const SVOL_MAGIC: &[u8; 8] = b"SINUSVOL";
const SVOL_VERSION: u32 = 1;

/// Load a volume, dispatching on the file extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else {
        load_svol(path)
    }
}

/// Write `v` in the raw `.svol` format.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(SVOL_MAGIC)?;
        w.write_all(&SVOL_VERSION.to_le_bytes())?;
        let (d, h, wd) = v.shape();
        for dim in [d, h, wd] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for s in v.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        // standard layout for an owned Array3 is C order
        for &x in v.data.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn load_svol(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != SVOL_MAGIC {
        return Err(Error::format(path, "bad magic, not a .svol volume"));
    }
    let version = read_u32(&mut r, path)?;
    if version != SVOL_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", version)));
    }
    let d = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let n = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::format(path, "shape overflow"))?;
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = read_f32(&mut r, path)?;
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec((d, h, w), vals)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Volume::new(data, spacing, file_stem(path))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    read_u32(r, path).map(f32::from_bits)
}

/// File name without `.svol` / `.nii` / `.nii.gz` extensions.
fn file_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for suffix in [".nii.gz", ".nii", ".svol"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    name.to_string()
}

// ---------------------------------------------------------------------------
// NIfTI-1 (read-only)
// ---------------------------------------------------------------------------

struct NiftiHeader {
    dim: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    swapped: bool,
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".gz") {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    if bytes.len() < 352 {
        return Err(Error::format(path, "file too short for a NIfTI-1 header"));
    }
    let hdr = parse_nifti_header(&bytes, path)?;
    let [nx, ny, nz] = hdr.dim;
    let n = nx * ny * nz;
    let vals = decode_voxels(&bytes, &hdr, n, path)?;
    // NIfTI stores x fastest; map (x, y, z) onto our (D, H, W) = (z, y, x)
    // so the raw linear order is already C order for shape (nz, ny, nx).
    let data = Array3::from_shape_vec((nz, ny, nx), vals)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let spacing = [hdr.pixdim[2], hdr.pixdim[1], hdr.pixdim[0]];
    Volume::new(data, spacing, file_stem(path))
}

fn parse_nifti_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    let rd_i32 = |off: usize, swap: bool| -> i32 {
        let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
        if swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
    };
    let swapped = match rd_i32(0, false) {
        348 => false,
        _ if rd_i32(0, true) == 348 => true,
        other => {
            return Err(Error::format(
                path,
                format!("sizeof_hdr is {}, expected 348", other),
            ))
        }
    };
    let rd_i16 = |off: usize| -> i16 {
        let b = [bytes[off], bytes[off + 1]];
        if swapped { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    };
    let rd_f32 = |off: usize| -> f32 {
        let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
        if swapped { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    };
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        return Err(Error::format(path, "missing NIfTI-1 magic"));
    }
    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("bad dim[0] = {}", ndim)));
    }
    let get_dim = |i: usize| -> usize {
        if (i as i16) <= ndim { rd_i16(40 + 2 * i).max(1) as usize } else { 1 }
    };
    let dim = [get_dim(1), get_dim(2), get_dim(3)];
    for i in 4..=ndim as usize {
        if get_dim(i) > 1 {
            return Err(Error::format(
                path,
                format!("volume has more than 3 non-trivial dimensions (dim[{}] > 1)", i),
            ));
        }
    }
    Ok(NiftiHeader {
        dim,
        datatype: rd_i16(70),
        pixdim: [rd_f32(80), rd_f32(84), rd_f32(88)],
        vox_offset: rd_f32(108) as usize,
        scl_slope: rd_f32(112),
        scl_inter: rd_f32(116),
        swapped,
    })
}

fn decode_voxels(bytes: &[u8], hdr: &NiftiHeader, n: usize, path: &Path) -> Result<Vec<f32>> {
    let bytes_per: usize = match hdr.datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 768 | 16 => 4,
        64 => 8,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported NIfTI datatype code {}", other),
            ))
        }
    };
    let start = hdr.vox_offset.max(352);
    let end = start + n * bytes_per;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            format!("truncated voxel data: need {} bytes, have {}", end, bytes.len()),
        ));
    }
    let raw = &bytes[start..end];
    let swap = hdr.swapped;
    let take4 = |c: &[u8]| -> [u8; 4] {
        if swap { [c[3], c[2], c[1], c[0]] } else { [c[0], c[1], c[2], c[3]] }
    };
    let mut vals: Vec<f32> = match hdr.datatype {
        2 => raw.iter().map(|&b| b as f32).collect(),
        256 => raw.iter().map(|&b| b as i8 as f32).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = if swap { [c[1], c[0]] } else { [c[0], c[1]] };
                i16::from_le_bytes(b) as f32
            })
            .collect(),
        512 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = if swap { [c[1], c[0]] } else { [c[0], c[1]] };
                u16::from_le_bytes(b) as f32
            })
            .collect(),
        8 => raw.chunks_exact(4).map(|c| i32::from_le_bytes(take4(c)) as f32).collect(),
        768 => raw.chunks_exact(4).map(|c| u32::from_le_bytes(take4(c)) as f32).collect(),
        16 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(take4(c))).collect(),
        64 => raw
            .chunks_exact(8)
            .map(|c| {
                let b = if swap {
                    [c[7], c[6], c[5], c[4], c[3], c[2], c[1], c[0]]
                } else {
                    [c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]
                };
                f64::from_le_bytes(b) as f32
            })
            .collect(),
        _ => unreachable!(),
    };
    if hdr.scl_slope != 0.0 && (hdr.scl_slope != 1.0 || hdr.scl_inter != 0.0) {
        for v in &mut vals {
            *v = *v * hdr.scl_slope + hdr.scl_inter;
        }
    }
    Ok(vals)
}

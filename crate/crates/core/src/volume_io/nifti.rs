//! Minimal NIfTI-1 reader/writer: enough for BraTS-convention volumes
//! (gzipped or plain single-file `.nii`, common datatypes, scl scaling).
//! Orientation metadata is ignored; BraTS ships co-registered data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

/// Read a `.nii` / `.nii.gz` volume as `(data[x,y,z], spacing)`.
pub fn read_nifti(path: &Path) -> Result<(Array3<f32>, [f32; 3])> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::InvalidFile {
            path: path.into(),
            details: format!("file too short for a NIfTI-1 header: {} bytes", bytes.len()),
        });
    }

    let sizeof_hdr_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swap = match sizeof_hdr_le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        _ => {
            return Err(Error::InvalidFile {
                path: path.into(),
                details: format!("sizeof_hdr is {sizeof_hdr_le}, expected 348"),
            })
        }
    };
    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::InvalidFile {
            path: path.into(),
            details: "missing NIfTI-1 magic".into(),
        });
    }

    let i16_at = |off: usize| -> i16 {
        let raw: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
        if swap { i16::from_be_bytes(raw) } else { i16::from_le_bytes(raw) }
    };
    let f32_at = |off: usize| -> f32 {
        let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if swap { f32::from_be_bytes(raw) } else { f32::from_le_bytes(raw) }
    };

    let ndim = i16_at(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::InvalidFile {
            path: path.into(),
            details: format!("expected a 3D volume, got dim[0]={ndim}"),
        });
    }
    let nx = i16_at(42) as usize;
    let ny = i16_at(44) as usize;
    let nz = i16_at(46) as usize;
    if ndim == 4 && i16_at(48) != 1 {
        return Err(Error::InvalidFile {
            path: path.into(),
            details: "4D volumes with more than one frame are not supported".into(),
        });
    }
    let datatype = i16_at(70);
    let spacing = [f32_at(80), f32_at(84), f32_at(88)];
    let vox_offset = f32_at(108) as usize;
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);

    let n_vox = nx * ny * nz;
    let elem = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => {
            return Err(Error::InvalidFile {
                path: path.into(),
                details: format!("unsupported NIfTI datatype {other}"),
            })
        }
    };
    if bytes.len() < vox_offset + n_vox * elem {
        return Err(Error::InvalidFile {
            path: path.into(),
            details: format!(
                "truncated voxel data: need {} bytes at offset {vox_offset}, have {}",
                n_vox * elem,
                bytes.len()
            ),
        });
    }
    let raw = &bytes[vox_offset..vox_offset + n_vox * elem];

    let mut values = vec![0.0f32; n_vox];
    read_values(raw, datatype, swap, &mut values);
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in values.iter_mut() {
            *v = *v * scl_slope + scl_inter;
        }
    }

    // NIfTI stores x fastest; repack into [x, y, z] with z contiguous.
    let mut data = Array3::zeros((nx, ny, nz));
    for (i, &v) in values.iter().enumerate() {
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        data[[x, y, z]] = v;
    }
    Ok((data, spacing))
}

fn read_values(raw: &[u8], datatype: i16, swap: bool, out: &mut [f32]) {
    match datatype {
        2 => {
            for (o, b) in out.iter_mut().zip(raw) {
                *o = *b as f32;
            }
        }
        256 => {
            for (o, b) in out.iter_mut().zip(raw) {
                *o = *b as i8 as f32;
            }
        }
        4 => {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(2)) {
                let raw2: [u8; 2] = c.try_into().unwrap();
                *o = if swap { i16::from_be_bytes(raw2) } else { i16::from_le_bytes(raw2) } as f32;
            }
        }
        512 => {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(2)) {
                let raw2: [u8; 2] = c.try_into().unwrap();
                *o = if swap { u16::from_be_bytes(raw2) } else { u16::from_le_bytes(raw2) } as f32;
            }
        }
        8 => {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
                let raw4: [u8; 4] = c.try_into().unwrap();
                *o = if swap { i32::from_be_bytes(raw4) } else { i32::from_le_bytes(raw4) } as f32;
            }
        }
        16 => {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
                let raw4: [u8; 4] = c.try_into().unwrap();
                *o = if swap { f32::from_be_bytes(raw4) } else { f32::from_le_bytes(raw4) };
            }
        }
        64 => {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
                let raw8: [u8; 8] = c.try_into().unwrap();
                *o = if swap { f64::from_be_bytes(raw8) } else { f64::from_le_bytes(raw8) } as f32;
            }
        }
        _ => unreachable!(),
    }
}

/// Write a float volume as single-file NIfTI-1 (gzipped when the path ends
/// in `.gz`).
pub fn write_nifti_volume(path: &Path, data: &Array3<f32>, spacing: [f32; 3]) -> Result<()> {
    let (nx, ny, nz) = data.dim();
    let mut payload = Vec::with_capacity(nx * ny * nz * 4);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                payload.extend_from_slice(&data[[x, y, z]].to_le_bytes());
            }
        }
    }
    write_nifti_raw(path, (nx, ny, nz), spacing, 16, 32, &payload)
}

/// Write a binary mask as uint8 NIfTI-1.
pub fn write_nifti_mask(path: &Path, mask: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let (nx, ny, nz) = mask.dim();
    let mut payload = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                payload.push(mask[[x, y, z]]);
            }
        }
    }
    write_nifti_raw(path, (nx, ny, nz), spacing, 2, 8, &payload)
}

fn write_nifti_raw(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: [f32; 3],
    datatype: i16,
    bitpix: i16,
    payload: &[u8],
) -> Result<()> {
    let mut header = vec![0u8; 352];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, dims.0 as i16, dims.1 as i16, dims.2 as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&datatype.to_le_bytes());
    header[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    header[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(&header)?;
        enc.write_all(payload)?;
        enc.finish()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header)?;
        w.write_all(payload)?;
    }
    Ok(())
}

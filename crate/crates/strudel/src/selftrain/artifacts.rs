//! On-disk artifacts of a run: uncertainty grids, loss traces, pseudo-label
//! manifests.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::backbone::EpochLoss;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::pseudo::PseudoLabel;

const SIGMA_MAGIC: &[u8; 4] = b"SGMA";

/// Writes a raw uncertainty grid as 32-bit little-endian floats with a small
/// self-describing header.
pub fn write_sigma(path: &Path, grid: &Grid) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SIGMA_MAGIC)?;
    let (h, wd) = grid.dim();
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    for &v in grid.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sigma(path: &Path) -> Result<Grid> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SIGMA_MAGIC {
        return Err(Error::Format(format!("{path:?} is not an uncertainty grid")));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; h * w];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok(Grid::from_shape_vec(
        (h, w),
        data.into_iter().map(f64::from).collect(),
    )
    .expect("shape matches data"))
}

/// Loss trace CSV: one row per epoch with the component breakdown.
pub fn write_loss_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "dice", "bce", "ubce"])
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([
            &(i + 1).to_string(),
            &format!("{:.9}", e.total),
            &format!("{:.9}", e.dice),
            &format!("{:.9}", e.bce),
            &format!("{:.9}", e.ubce),
        ])
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance manifest for the pseudo labels of one iteration.
pub fn write_pseudo_manifest(
    path: &Path,
    labels: &[PseudoLabel],
    network_threshold: f64,
    aux_threshold: Option<f64>,
) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        let aux = aux_threshold
            .map(|t| t.to_string())
            .unwrap_or_else(|| "-".to_string());
        text.push_str(&format!(
            "id={} provenance={} iteration={} thr_net={} thr_aux={}\n",
            l.id, l.provenance, l.iteration, network_threshold, aux
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn sigma_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.f32");
        let g = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 / 100.0);
        write_sigma(&path, &g).unwrap();
        let back = read_sigma(&path).unwrap();
        assert_eq!(back.dim(), (5, 7));
        for (a, b) in g.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

//! Versioned binary dump of the public parameters.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FTCK" | version: u32 | tiers: u32
//! per tier: id: u32 | rows: u64 | dims: u64 | rows*dims f64 (row-major)
//!           | scorer_len: u64 | scorer_len f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::aggregation::TieredPublicParams;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, ScorerParams, Tier, TierWidths};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_params(params: &TieredPublicParams, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(Tier::ALL.len() as u32).to_le_bytes())?;
    for t in Tier::ALL {
        let table = params.table(t);
        out.write_all(&(t.index() as u32).to_le_bytes())?;
        out.write_all(&(table.rows() as u64).to_le_bytes())?;
        out.write_all(&(table.dim() as u64).to_le_bytes())?;
        for v in table.values().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        let theta = params.theta(t).as_slice();
        out.write_all(&(theta.len() as u64).to_le_bytes())?;
        for v in theta {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| bad("length overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<TieredPublicParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let tiers = c.u32()?;
    if tiers as usize != Tier::ALL.len() {
        return Err(bad(format!("expected 3 tiers, found {tiers}")));
    }
    let mut tables = Vec::with_capacity(3);
    let mut thetas = Vec::with_capacity(3);
    for t in Tier::ALL {
        let id = c.u32()?;
        if id as usize != t.index() {
            return Err(bad(format!("tier id {id} out of order")));
        }
        let rows = c.u64()?;
        let dims = c.u64()?;
        let values = c.f64s(
            rows.checked_mul(dims)
                .ok_or_else(|| bad("shape overflow"))?,
        )?;
        let table = Array2::from_shape_vec((rows, dims), values).map_err(|e| bad(e.to_string()))?;
        let len = c.u64()?;
        let theta = ScorerParams::from_flat(dims, c.f64s(len)?).map_err(|e| bad(e.to_string()))?;
        tables.push(EmbeddingTable::new(table));
        thetas.push(theta);
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let widths = TierWidths::new(tables[0].dim(), tables[1].dim(), tables[2].dim())?;
    if tables.iter().any(|t| t.rows() != tables[0].rows()) {
        return Err(bad("tier tables disagree on item count"));
    }
    Ok(TieredPublicParams {
        widths,
        tables: tables.try_into().unwrap(),
        thetas: thetas.try_into().unwrap(),
    })
}

pub fn save(params: &TieredPublicParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_params(params, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<TieredPublicParams> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    use crate::rng::SimRng;

    fn encode(p: &TieredPublicParams) -> Vec<u8> {
        let mut buf = Vec::new();
        write_params(p, &mut buf).unwrap();
        buf
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), items in 1usize..20, s in 1usize..5, dm in 1usize..5, dl in 1usize..5) {
            let widths = TierWidths::new(s, s + dm, s + dm + dl).unwrap();
            let p = TieredPublicParams::init_aligned(widths, items, &mut SimRng::seed_from_u64(seed));
            let back = decode_params(&encode(&p)).unwrap();
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = TieredPublicParams::init_aligned(
            TierWidths::default(),
            3,
            &mut SimRng::seed_from_u64(1),
        );
        let good = encode(&p);
        let mut b = good.clone();
        b[0] = b'X';
        assert!(decode_params(&b).unwrap_err().to_string().contains("magic"));
        let mut b = good.clone();
        b[4] = 9;
        assert!(decode_params(&b)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(decode_params(&good[..good.len() - 1]).is_err());
        let mut b = good.clone();
        b.push(0);
        assert!(decode_params(&b).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("fedtier-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ftck");
        let p = TieredPublicParams::init_aligned(
            TierWidths::default(),
            7,
            &mut SimRng::seed_from_u64(2),
        );
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

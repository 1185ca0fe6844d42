//! Checkpoint container: magic `HCMTCKPT`, format version, a config echo,
//! then named f64 blocks (little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HCMTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_blocks(path: &Path, config_text: &str, blocks: &[Block]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(config_text.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(config_text.as_bytes()).map_err(io_err)?;
    w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io_err)?;
    for b in blocks {
        let expect: usize = b.shape.iter().product();
        assert_eq!(expect, b.data.len(), "block {} shape/payload mismatch", b.name);
        w.write_all(&(b.name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(b.name.as_bytes()).map_err(io_err)?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in &b.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in &b.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_blocks(path: &Path) -> Result<(String, Vec<Block>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Dataset(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let config_len = read_u32(&mut r, path)? as usize;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config).map_err(io_err)?;
    let config_text = String::from_utf8(config)
        .map_err(|_| Error::Dataset(format!("{}: config echo is not utf-8", path.display())))?;

    let num_blocks = read_u32(&mut r, path)? as usize;
    let mut blocks = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Dataset(format!("{}: block name is not utf-8", path.display())))?;
        let ndims = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        blocks.push(Block { name, shape, data });
    }
    Ok((config_text, blocks))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = std::env::temp_dir().join("hcmt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.ckpt");
        let blocks = vec![
            Block { name: "a.weight".into(), shape: vec![2, 3], data: vec![1., 2., 3., 4., 5., 6.] },
            Block { name: "b".into(), shape: vec![1], data: vec![-0.25] },
        ];
        write_blocks(&path, "seed = 1\n", &blocks).unwrap();
        let (cfg, got) = read_blocks(&path).unwrap();
        assert_eq!(cfg, "seed = 1\n");
        assert_eq!(got, blocks);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("hcmt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC....").unwrap();
        assert!(read_blocks(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}

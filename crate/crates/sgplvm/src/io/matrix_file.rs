//! Self-describing container of named 2-D arrays.
//!
//! Two encodings: a text CSV where each array carries `#array:<name>` and
//! `#shape:rows,cols` header lines, and a binary layout with magic "SGPL",
//! a little-endian u32 version, u32 array count, then per array a u16 name
//! length + UTF-8 name, u64 rows, u64 cols, and row-major f64 LE payload.
//! Writes go through a temp file and rename.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SGPL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct MatrixFile {
    arrays: Vec<(String, DMatrix<f64>)>,
}

impl MatrixFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, m: DMatrix<f64>) {
        self.arrays.push((name.to_string(), m));
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Input(format!("array `{name}` not present")))
    }

    pub fn maybe(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> Vec<&str> {
        self.arrays.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, DMatrix<f64>)> {
        self.arrays.iter()
    }

    fn check_finite(&self, file: &str) -> Result<()> {
        for (name, m) in &self.arrays {
            for v in m.iter() {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        file: file.to_string(),
                        message: format!("array `{name}` contains a non-finite value"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let tmp = temp_sibling(path);
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
            for (name, m) in &self.arrays {
                let bytes = name.as_bytes();
                if bytes.len() > u16::MAX as usize {
                    return Err(Error::Input(format!("array name `{name}` too long")));
                }
                w.write_all(&(bytes.len() as u16).to_le_bytes())?;
                w.write_all(bytes)?;
                w.write_all(&(m.nrows() as u64).to_le_bytes())?;
                w.write_all(&(m.ncols() as u64).to_le_bytes())?;
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        w.write_all(&m[(i, j)].to_le_bytes())?;
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let fname = path.display().to_string();
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                file: fname,
                message: "bad magic bytes (not an SGPL file)".into(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse {
                file: fname,
                message: format!("unsupported format version {version}"),
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut out = MatrixFile::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Parse {
                file: fname.clone(),
                message: "array name is not UTF-8".into(),
            })?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut m = DMatrix::zeros(rows, cols);
            let mut buf = [0u8; 8];
            for i in 0..rows {
                for j in 0..cols {
                    r.read_exact(&mut buf)?;
                    m[(i, j)] = f64::from_le_bytes(buf);
                }
            }
            out.push(&name, m);
        }
        out.check_finite(&fname)?;
        Ok(out)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let tmp = temp_sibling(path);
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            for (name, m) in &self.arrays {
                writeln!(w, "#array:{name}")?;
                writeln!(w, "#shape:{},{}", m.nrows(), m.ncols())?;
                for i in 0..m.nrows() {
                    let row: Vec<String> =
                        (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
                    writeln!(w, "{}", row.join(","))?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let fname = path.display().to_string();
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut out = MatrixFile::new();
        let mut name: Option<String> = None;
        let mut shape: Option<(usize, usize)> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let flush =
            |name: &mut Option<String>, shape: &mut Option<(usize, usize)>, rows: &mut Vec<Vec<f64>>, out: &mut MatrixFile| -> Result<()> {
                if rows.is_empty() && name.is_none() {
                    return Ok(());
                }
                let n = rows.len();
                let c = rows.first().map(|r| r.len()).unwrap_or(0);
                if let Some((er, ec)) = shape.take() {
                    if er != n || ec != c {
                        return Err(Error::Parse {
                            file: fname.clone(),
                            message: format!(
                                "declared shape {er}x{ec} but parsed {n}x{c}"
                            ),
                        });
                    }
                }
                let m = DMatrix::from_fn(n, c, |i, j| rows[i][j]);
                out.push(name.take().as_deref().unwrap_or("data"), m);
                rows.clear();
                Ok(())
            };
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix("#array:") {
                flush(&mut name, &mut shape, &mut rows, &mut out)?;
                name = Some(rest.trim().to_string());
            } else if let Some(rest) = t.strip_prefix("#shape:") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::Parse {
                        file: fname.clone(),
                        message: format!("bad shape header `{t}`"),
                    });
                }
                let r0 = parts[0].trim().parse().map_err(|_| Error::Parse {
                    file: fname.clone(),
                    message: format!("bad row count in `{t}`"),
                })?;
                let c0 = parts[1].trim().parse().map_err(|_| Error::Parse {
                    file: fname.clone(),
                    message: format!("bad column count in `{t}`"),
                })?;
                shape = Some((r0, c0));
            } else if t.starts_with('#') {
                continue;
            } else {
                let vals: Result<Vec<f64>> = t
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| Error::Parse {
                            file: fname.clone(),
                            message: format!("bad number `{s}`"),
                        })
                    })
                    .collect();
                let vals = vals?;
                if let Some(first) = rows.first() {
                    if first.len() != vals.len() {
                        return Err(Error::Parse {
                            file: fname.clone(),
                            message: "ragged rows".into(),
                        });
                    }
                }
                rows.push(vals);
            }
        }
        flush(&mut name, &mut shape, &mut rows, &mut out)?;
        out.check_finite(&fname)?;
        Ok(out)
    }

    /// Load either encoding, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        let is_binary = f.read_exact(&mut magic).is_ok() && &magic == MAGIC;
        drop(f);
        if is_binary {
            Self::load_binary(path)
        } else {
            Self::load_csv(path)
        }
    }
}

fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut tmp = path.to_path_buf();
    let name = format!(
        ".{}.tmp-{}",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    );
    tmp.set_file_name(name);
    tmp
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

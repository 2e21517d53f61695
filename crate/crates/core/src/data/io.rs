//! `AFRE` binary container and the CSV alternative.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! "AFRE" | version u32 | N u64 | D u64 | C u32 | G u32 | flags u8
//! | features N·D f64 (row-major) | labels N u32
//! | [groups N u32 if flags & 1] | [split tags N u8 if flags & 2]
//! ```

use std::fs;
use std::path::Path;

use super::{EmbeddingDataset, Split};
use crate::binio::Reader;
use crate::error::{AfrError, Result};
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"AFRE";
pub const EMBEDDING_VERSION: u32 = 1;

const FLAG_GROUPS: u8 = 0b01;
const FLAG_SPLITS: u8 = 0b10;

pub fn encode_embeddings(ds: &EmbeddingDataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(33 + n * (ds.dim() * 8 + 9));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_groups() as u32).to_le_bytes());
    let mut flags = 0u8;
    if ds.groups().is_some() {
        flags |= FLAG_GROUPS;
    }
    if ds.split_tags().is_some() {
        flags |= FLAG_SPLITS;
    }
    out.push(flags);
    for v in ds.features().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    if let Some(groups) = ds.groups() {
        for &g in groups {
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
    }
    if let Some(tags) = ds.split_tags() {
        out.extend(tags.iter().map(|t| t.code()));
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(EMBEDDING_MAGIC)?;
    r.expect_version(EMBEDDING_VERSION)?;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let c = r.u32()? as usize;
    let g = r.u32()? as usize;
    let flags_at = r.offset();
    let flags = r.u8()?;
    if flags & !(FLAG_GROUPS | FLAG_SPLITS) != 0 {
        return Err(AfrError::parse(
            flags_at,
            format!("unknown flag bits {flags:#04b}"),
        ));
    }
    let has_groups = flags & FLAG_GROUPS != 0;
    if has_groups && g == 0 {
        return Err(AfrError::parse(flags_at, "group flag set but G = 0"));
    }
    let cells = n
        .checked_mul(d)
        .ok_or_else(|| AfrError::parse(r.offset(), "N·D overflows"))?;
    r.ensure_remaining(cells.saturating_mul(8))?;

    let features = r.f64s(cells)?;
    let labels = r.indices(n, c, "label")?;
    let groups = if has_groups {
        Some(r.indices(n, g, "group")?)
    } else {
        None
    };
    let tags = if flags & FLAG_SPLITS != 0 {
        let start = r.offset();
        let raw = r.bytes(n)?;
        let mut tags = Vec::with_capacity(n);
        for (i, &code) in raw.iter().enumerate() {
            tags.push(Split::from_code(code).ok_or_else(|| {
                AfrError::parse(start + i as u64, format!("split tag {code} out of range"))
            })?);
        }
        Some(tags)
    } else {
        None
    };
    r.expect_end()?;

    let mut ds = EmbeddingDataset::new(Matrix::new(n, d, features)?, labels, c)?;
    if let Some(groups) = groups {
        ds = ds.with_groups(groups, g)?;
    }
    if let Some(tags) = tags {
        ds = ds.with_split_tags(tags)?;
    }
    Ok(ds)
}

pub fn write_embedding_file(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_embeddings(ds))?;
    Ok(())
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    decode_embeddings(&fs::read(path)?)
}

/// Writes `f0..f{D-1},label[,group][,split]`. Floats use Rust's shortest
/// round-trip formatting, so reading the file back is exact.
pub fn write_embedding_csv(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if ds.groups().is_some() {
        header.push("group".into());
    }
    if ds.split_tags().is_some() {
        header.push("split".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds.features().row(i).iter().map(|v| v.to_string()).collect();
        record.push(ds.labels()[i].to_string());
        if let Some(g) = ds.groups() {
            record.push(g[i].to_string());
        }
        if let Some(t) = ds.split_tags() {
            record.push(t[i].name().to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV form. Class and group counts are inferred as one past the
/// largest index seen.
pub fn read_embedding_csv(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let d = cols.iter().take_while(|c| c.starts_with('f')).count();
    for (j, name) in cols.iter().take(d).enumerate() {
        if *name != format!("f{j}") {
            return Err(AfrError::invalid(format!(
                "expected column f{j}, found `{name}`"
            )));
        }
    }
    let rest = &cols[d..];
    let has_group = rest.contains(&"group");
    let has_split = rest.contains(&"split");
    let mut expected = vec!["label"];
    if has_group {
        expected.push("group");
    }
    if has_split {
        expected.push("split");
    }
    if rest != expected.as_slice() {
        return Err(AfrError::invalid(format!(
            "unexpected trailing columns {rest:?}, expected {expected:?}"
        )));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut tags = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or("").trim();
        let bad =
            |what: &str, v: &str| AfrError::invalid(format!("row {}: bad {what} `{v}`", line + 1));
        for j in 0..d {
            let v = field(j);
            features.push(v.parse::<f64>().map_err(|_| bad("feature", v))?);
        }
        let v = field(d);
        labels.push(v.parse::<usize>().map_err(|_| bad("label", v))?);
        let mut next = d + 1;
        if has_group {
            let v = field(next);
            groups.push(v.parse::<usize>().map_err(|_| bad("group", v))?);
            next += 1;
        }
        if has_split {
            tags.push(field(next).parse::<Split>()?);
        }
    }
    let n = labels.len();
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = EmbeddingDataset::new(Matrix::new(n, d, features)?, labels, c)?;
    if has_group {
        let g = groups.iter().max().map_or(0, |m| m + 1);
        ds = ds.with_groups(groups, g)?;
    }
    if has_split {
        ds = ds.with_split_tags(tags)?;
    }
    Ok(ds)
}

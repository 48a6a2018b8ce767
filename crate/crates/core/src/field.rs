//! Multi-channel grids and the `CGF1` sample file format.
//!
//! A [`Field`] stores `C×H×W` values channel-major then row-major, so
//! concatenating two fields along the channel axis is a plain append.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TS: &str = "TS";
pub const PRECT: &str = "PRECT";
pub const DPHIS: &str = "dPHIS";

/// Channel order used throughout: conditioning variables in this order,
/// with `PRECT` as the single target in the 3in1out configuration.
pub const CLIMATE_CHANNELS: [&str; 3] = [TS, PRECT, DPHIS];

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    channels: Vec<String>,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Field {
    pub fn new(channels: Vec<String>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidField(format!("empty grid {height}x{width}")));
        }
        if data.len() != channels.len() * height * width {
            return Err(Error::InvalidField(format!(
                "{} channels of {height}x{width} need {} values, got {}",
                channels.len(),
                channels.len() * height * width,
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = channels.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::InvalidField(format!("duplicate channel `{dup}`")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value at index {i}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(
        channels: &[&str],
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels.len() * height * width);
        for c in 0..channels.len() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels.iter().map(|s| s.to_string()).collect(), height, width, data)
    }

    pub fn constant(channels: &[&str], height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_fn(channels, height, width, |_, _, _| value)
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels.len(), self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::ChannelMismatch(format!("no channel `{name}` in {:?}", self.channels)))
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Copy holding only the named channels, in the order given.
    pub fn select(&self, names: &[impl AsRef<str>]) -> Result<Field> {
        let mut data = Vec::with_capacity(names.len() * self.height * self.width);
        for n in names {
            let c = self.channel_index(n.as_ref())?;
            data.extend_from_slice(self.plane(c));
        }
        Field::new(names.iter().map(|n| n.as_ref().to_string()).collect(), self.height, self.width, data)
    }

    /// Same grid and channels with new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Field> {
        Field::new(self.channels.clone(), self.height, self.width, data)
    }

    pub fn map(&self, f: impl Fn(usize, f32) -> f32) -> Result<Field> {
        let hw = self.height * self.width;
        self.with_data(self.data.iter().enumerate().map(|(i, &v)| f(i / hw, v)).collect())
    }

    /// Appends `other`'s channels after this field's.
    pub fn concat(&self, other: &Field) -> Result<Field> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimensionMismatch(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut channels = self.channels.clone();
        channels.extend(other.channels.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Field::new(channels, self.height, self.width, data)
    }

    /// Centered `out_h × out_w` window. Odd remainders drop the extra
    /// row/column from the high-index side.
    pub fn center_crop(&self, out_h: usize, out_w: usize) -> Result<Field> {
        if out_h > self.height || out_w > self.width || out_h == 0 || out_w == 0 {
            return Err(Error::DimensionTooSmall(format!(
                "cannot crop {}x{} to {out_h}x{out_w}",
                self.height, self.width
            )));
        }
        let (y0, x0) = ((self.height - out_h) / 2, (self.width - out_w) / 2);
        let mut data = Vec::with_capacity(self.channels.len() * out_h * out_w);
        for c in 0..self.channels.len() {
            let plane = self.plane(c);
            for y in y0..y0 + out_h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + out_w]);
            }
        }
        Field::new(self.channels.clone(), out_h, out_w, data)
    }

    /// Per-channel mean and population standard deviation.
    pub fn stats(&self) -> Vec<ChannelStats> {
        pooled_stats(std::slice::from_ref(self)).expect("a single field is always consistent")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel statistics pooled over every pixel of every sample, in f64.
pub fn pooled_stats(fields: &[Field]) -> Result<Vec<ChannelStats>> {
    let Some(first) = fields.first() else {
        return Err(Error::InvalidField("no samples to compute statistics over".into()));
    };
    check_consistent(fields)?;
    let c = first.num_channels();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let count = (fields.len() * first.height * first.width) as f64;
        let mean = fields.iter().flat_map(|f| f.plane(ch)).map(|&v| v as f64).sum::<f64>() / count;
        let var = fields.iter().flat_map(|f| f.plane(ch)).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
        out.push(ChannelStats { mean, std: var.sqrt() });
    }
    Ok(out)
}

/// All samples share channels and grid size.
pub fn check_consistent(fields: &[Field]) -> Result<()> {
    if let Some(first) = fields.first() {
        for f in &fields[1..] {
            if f.channels != first.channels || f.height != first.height || f.width != first.width {
                return Err(Error::DimensionMismatch(format!(
                    "sample {:?} {}x{} differs from {:?} {}x{}",
                    f.channels, f.height, f.width, first.channels, first.height, first.width
                )));
            }
        }
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"CGF1";

/// Writes samples as a `CGF1` file: magic, `u32` count, `u32` c/h/w,
/// length-prefixed channel names, then little-endian `f32` payload.
pub fn write_fields(path: impl AsRef<Path>, samples: &[Field]) -> Result<()> {
    check_consistent(samples)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let (c, h, wd) = samples.first().map_or((0, 0, 0), Field::dims);
    for v in [samples.len(), c, h, wd] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    if let Some(first) = samples.first() {
        for name in &first.channels {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
    }
    for s in samples {
        for v in &s.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn eof_as_malformed(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("file ends before the declared payload".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_as_malformed)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_fields(path: impl AsRef<Path>) -> Result<Vec<Field>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_malformed)?;
    if &magic != MAGIC {
        return Err(Error::Malformed(format!("bad magic {magic:?}")));
    }
    let n = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut channels = Vec::with_capacity(c);
    for _ in 0..c {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(eof_as_malformed)?;
        channels.push(String::from_utf8(buf).map_err(|_| Error::Malformed("channel name is not UTF-8".into()))?);
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(n);
    let mut bytes = vec![0u8; per * 4];
    for _ in 0..n {
        r.read_exact(&mut bytes).map_err(eof_as_malformed)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Field::new(channels.clone(), h, w, data).map_err(|e| Error::Malformed(e.to_string()))?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Malformed("trailing bytes after payload".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("climdiff-field-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn crop_paper_dims_offsets() {
        let f = Field::from_fn(&["a"], 213, 321, |_, y, x| (y * 1000 + x) as f32).unwrap();
        let c = f.center_crop(192, 256).unwrap();
        assert_eq!((c.height(), c.width()), (192, 256));
        assert_eq!(c.get(0, 0, 0), (10 * 1000 + 32) as f32);
        assert_eq!(c.get(0, 191, 255), (201 * 1000 + 287) as f32);
    }

    #[test]
    fn crop_same_size_is_identity() {
        let f = Field::from_fn(&["a", "b"], 5, 7, |c, y, x| (c * 100 + y * 10 + x) as f32).unwrap();
        assert_eq!(f.center_crop(5, 7).unwrap(), f);
    }

    #[test]
    fn crop_constant() {
        let f = Field::constant(&["a"], 4, 4, 2.5).unwrap();
        let c = f.center_crop(2, 2).unwrap();
        assert_eq!(c.data(), &[2.5; 4]);
    }

    #[test]
    fn crop_too_large_fails() {
        let f = Field::constant(&["a"], 4, 4, 0.0).unwrap();
        assert!(matches!(f.center_crop(5, 2), Err(Error::DimensionTooSmall(_))));
    }

    #[test]
    fn crop_index_mapping_exhaustive() {
        for h in 1..7 {
            for w in 1..7 {
                let f = Field::from_fn(&["a", "b"], h, w, |c, y, x| (c * 1000 + y * 10 + x) as f32).unwrap();
                for oh in 1..=h {
                    for ow in 1..=w {
                        let c = f.center_crop(oh, ow).unwrap();
                        let (y0, x0) = ((h - oh) / 2, (w - ow) / 2);
                        for ch in 0..2 {
                            for y in 0..oh {
                                for x in 0..ow {
                                    assert_eq!(c.get(ch, y, x), f.get(ch, y + y0, x + x0));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stats_examples() {
        let f = Field::new(vec!["a".into(), "b".into()], 2, 2, vec![5.0, 5.0, 5.0, 5.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = f.stats();
        assert_eq!(s[0], ChannelStats { mean: 5.0, std: 0.0 });
        assert!((s[1].mean - 2.5).abs() < 1e-12);
        assert!((s[1].std - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_of_z_scored_field() {
        let f = Field::from_fn(&["a"], 9, 11, |_, y, x| ((y * 31 + x * 17) % 13) as f32 * 0.7 + 3.0).unwrap();
        let s = &f.stats()[0];
        let z = f.map(|_, v| ((v as f64 - s.mean) / s.std) as f32).unwrap();
        let zs = &z.stats()[0];
        assert!(zs.mean.abs() < 1e-6);
        assert!((zs.std - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Field::new(vec!["a".into()], 2, 2, vec![0.0; 3]).is_err());
        assert!(Field::new(vec!["a".into(), "a".into()], 1, 1, vec![0.0; 2]).is_err());
        assert!(Field::new(vec!["a".into()], 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn file_round_trip_and_empty() {
        let p = temp("one.cgf");
        let f = Field::new(vec!["a".into()], 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_fields(&p, std::slice::from_ref(&f)).unwrap();
        assert_eq!(read_fields(&p).unwrap(), vec![f]);

        let p = temp("empty.cgf");
        write_fields(&p, &[]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[4..8], &0u32.to_le_bytes());
        assert!(read_fields(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_is_malformed() {
        let p = temp("trunc.cgf");
        let f = Field::new(vec!["a".into()], 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_fields(&p, &[f]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_fields(&p), Err(Error::Malformed(_))));
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(matches!(read_fields(&p), Err(Error::Malformed(_))));
    }

    #[test]
    fn write_rejects_mixed_dims() {
        let a = Field::constant(&["a"], 2, 2, 0.0).unwrap();
        let b = Field::constant(&["a"], 2, 3, 0.0).unwrap();
        assert!(matches!(write_fields(temp("mixed.cgf"), &[a, b]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn concat_and_select_round_trip() {
        let a = Field::from_fn(&["x", "y", "z"], 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f32).unwrap();
        let b = Field::constant(&["t"], 3, 3, -1.0).unwrap();
        let ab = a.concat(&b).unwrap();
        assert_eq!(ab.num_channels(), 4);
        assert_eq!(ab.select(&["x", "y", "z"]).unwrap(), a);
    }
}

//! Dataset directories: a `manifest.txt` listing `image mask` file pairs,
//! either GSTN tensors or binary PGM (P5) images.

use std::fs;
use std::path::{Path, PathBuf};

use super::gstn::{load_tensor, save_tensor};
use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

/// Writes `img_%05d.gstn` / `msk_%05d.gstn` files and the manifest into an
/// existing or new directory.
pub fn save_dataset<T: Real>(dir: impl AsRef<Path>, ds: &Dataset<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (h, w) = ds.extent();
    let mut manifest = String::new();
    for i in 0..ds.len() {
        let (img, msk) = ds.pair(i)?;
        let (ip, mp) = (format!("img_{i:05}.gstn"), format!("msk_{i:05}.gstn"));
        save_tensor(dir.join(&ip), &img.reshape(&[1, h, w])?)?;
        save_tensor(dir.join(&mp), &msk.reshape(&[1, h, w])?)?;
        manifest.push_str(&format!("{ip} {mp}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset<T: Real>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", manifest.display())))?;
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::invalid(format!("{}:{}: expected `image mask`, got {line:?}", manifest.display(), n + 1)));
        }
        images.push(read_plane::<T>(&dir.join(fields[0]), false)?);
        masks.push(read_plane::<T>(&dir.join(fields[1]), true)?);
    }
    if images.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", dir.display())));
    }
    let stack = |v: &[Tensor<T>]| -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = v.iter().collect();
        let t = Tensor::stack(&refs)?;
        let s = t.shape().to_vec();
        t.reshape(&[s[0], 1, s[1], s[2]])
    };
    Dataset::new(stack(&images)?, stack(&masks)?, dir.display().to_string())
}

/// Loads one plane as (H, W). PGM images map 0..=255 onto [−1, 1] and PGM
/// masks threshold at 128.
fn read_plane<T: Real>(path: &Path, is_mask: bool) -> Result<Tensor<T>> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let t = if is_pgm {
        let (h, w, px) = read_pgm(path)?;
        let data = px
            .iter()
            .map(|&v| {
                if is_mask {
                    if v >= 128 { T::one() } else { T::zero() }
                } else {
                    T::lit(v as f64 / 127.5 - 1.0)
                }
            })
            .collect();
        Tensor::new(vec![h, w], data)?
    } else {
        let t: Tensor<T> = load_tensor(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        match t.shape() {
            [1, h, w] | [1, 1, h, w] => t.reshape(&[*h, *w])?,
            [_, _] => t,
            s => return Err(Error::invalid(format!("{}: expected a single-channel plane, got shape {s:?}", path.display()))),
        }
    };
    Ok(t)
}

/// Parses a binary PGM with maxval 255 into (height, width, pixels).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path.as_ref())?;
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: start as u64, msg: format!("missing PGM {what}") });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token("magic")? != "P5" {
        return Err(Error::Format { offset: 0, msg: "not a binary PGM (P5)".into() });
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token(what)?;
        t.parse().map_err(|_| Error::Format { offset: 0, msg: format!("bad PGM {what} {t:?}") })
    };
    let (w, h, maxval) = (number("width")?, number("height")?, number("maxval")?);
    if maxval != 255 {
        return Err(Error::Format { offset: 0, msg: format!("PGM maxval must be 255, got {maxval}") });
    }
    if w == 0 || h == 0 {
        return Err(Error::Format { offset: 0, msg: "PGM has a zero extent".into() });
    }
    let start = pos + 1;
    let need = w * h;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(Error::Format { offset: start as u64, msg: format!("truncated PGM payload: expected {need} bytes, found {have}") });
    }
    Ok((h, w, bytes[start..start + need].to_vec()))
}

/// Train, validation and optional test data for a run.
#[derive(Debug, Clone)]
pub struct DataSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Option<Dataset<T>>,
}

/// Uses `train/`, `val/` and optional `test/` subdirectories when present;
/// otherwise splits a flat dataset 80/20 into train/val with `seed`.
pub fn load_splits<T: Real>(dir: impl AsRef<Path>, seed: u64) -> Result<DataSplits<T>> {
    let dir = dir.as_ref();
    let sub = |name: &str| -> PathBuf { dir.join(name) };
    if sub("train").join(MANIFEST).exists() {
        let val = sub("val");
        if !val.join(MANIFEST).exists() {
            return Err(Error::invalid(format!("{} has a train split but no val split", dir.display())));
        }
        let test = sub("test");
        return Ok(DataSplits {
            train: load_dataset(sub("train"))?,
            val: load_dataset(val)?,
            test: if test.join(MANIFEST).exists() { Some(load_dataset(test)?) } else { None },
        });
    }
    let all = load_dataset::<T>(dir)?;
    if all.len() < 2 {
        return Err(Error::invalid(format!("{} needs at least two pairs to split", dir.display())));
    }
    let (train, val, _) = all.split((0.8, 0.2, 0.0), seed)?;
    match (train, val) {
        (Some(train), Some(val)) => Ok(DataSplits { train, val, test: None }),
        _ => Err(Error::invalid(format!("{} is too small to split", dir.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_task, Difficulty};

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_task::<f64>(2, 5, 8, Difficulty::Default).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), "img_00000.gstn msk_00000.gstn");
        let back = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(back.images(), ds.images());
        assert_eq!(back.masks(), ds.masks());
    }

    #[test]
    fn pgm_import() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, px: &[u8]| {
            let mut b = b"P5\n# comment\n2 2\n255\n".to_vec();
            b.extend_from_slice(px);
            fs::write(dir.path().join(name), b).unwrap();
        };
        write("a.pgm", &[0, 255, 51, 204]);
        write("a_m.pgm", &[0, 127, 128, 255]);
        fs::write(dir.path().join(MANIFEST), "a.pgm a_m.pgm\n").unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(ds.images().data(), &[-1.0, 1.0, 51.0 / 127.5 - 1.0, 204.0 / 127.5 - 1.0]);
        assert_eq!(ds.masks().data(), &[0.0, 0.0, 1.0, 1.0]);

        write("bad.pgm", &[0, 1]);
        assert!(read_pgm(dir.path().join("bad.pgm")).is_err());
        fs::write(dir.path().join("p2.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(read_pgm(dir.path().join("p2.pgm")).is_err());
    }

    #[test]
    fn empty_and_missing_manifests() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset::<f64>(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), "").unwrap();
        assert!(load_dataset::<f64>(dir.path()).is_err());
    }

    #[test]
    fn split_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_task::<f64>(4, 10, 8, Difficulty::Default).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let s = load_splits::<f64>(dir.path(), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (8, 2));
        assert!(s.test.is_none());

        let nested = tempfile::tempdir().unwrap();
        save_dataset(nested.path().join("train"), &ds).unwrap();
        assert!(load_splits::<f64>(nested.path(), 0).is_err());
        save_dataset(nested.path().join("val"), &ds.subset(&[0, 1], "v").unwrap()).unwrap();
        save_dataset(nested.path().join("test"), &ds.subset(&[2], "t").unwrap()).unwrap();
        let s = load_splits::<f64>(nested.path(), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.unwrap().len()), (10, 2, 1));
    }
}

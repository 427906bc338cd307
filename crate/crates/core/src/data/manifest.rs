use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::netpbm::{read_image, read_mask, write_image, write_mask};
use super::Sample;
use crate::error::{Error, Result};

const FORMAT: &str = "manifest";

/// Reads a tab-separated manifest (`id`, image path, mask path per line).
/// Relative paths resolve against the manifest's directory; blank lines and
/// lines starting with `#` are skipped. With `num_classes`, mask labels are
/// checked against it.
pub fn load_dataset(manifest: &Path, num_classes: Option<usize>) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, mask] = fields[..] else {
            return Err(Error::format(
                FORMAT,
                format!("{}:{}: expected 3 tab-separated fields, got {}", manifest.display(), lineno + 1, fields.len()),
            ));
        };
        let image = read_image(&base.join(image))?;
        let mask = read_mask(&base.join(mask))?;
        if let Some(k) = num_classes {
            mask.check_classes(k)
                .map_err(|e| Error::format(FORMAT, format!("sample `{id}`: {e}")))?;
        }
        samples.push(Sample::new(id, image, mask)?);
    }
    Ok(samples)
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.tsv` under
/// `dir`, returning the manifest path.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        if s.id.contains(['\t', '\n', '/']) {
            return Err(Error::InvalidArgument(format!("sample id `{}` is not a plain name", s.id)));
        }
        let image = format!("images/{}.ppm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        write_image(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        writeln!(manifest, "{}\t{image}\t{mask}", s.id).expect("writing to a String");
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelMask, VOID};
    use crate::nn::Tensor;

    fn sample(id: &str, seed: u8) -> Sample {
        let image = Tensor::new(
            vec![2, 3, 3],
            (0..18u8).map(|i| f64::from(i.wrapping_mul(seed)) / 255.0).collect(),
        )
        .unwrap();
        Sample::new(id, image, LabelMask::new(2, 3, vec![0, 1, 2, VOID, 1, seed % 3]).unwrap()).unwrap()
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "").unwrap();
        assert!(load_dataset(&m, Some(3)).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_order_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample("b", 7), sample("a", 11)];
        let path = save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(&path, Some(3)).unwrap();
        assert_eq!(loaded.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(loaded, samples);
        let bytes = fs::read(dir.path().join("images/a.ppm")).unwrap();
        save_dataset(dir.path(), &loaded).unwrap();
        assert_eq!(fs::read(dir.path().join("images/a.ppm")).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_rows_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &[sample("x", 5)]).unwrap();
        assert!(matches!(load_dataset(&path, Some(2)), Err(Error::Format { .. })));
        fs::write(&path, "x\timages/x.ppm\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Format { .. })));
        fs::write(&path, "x\timages/x.ppm\tmasks/missing.pgm\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Io { .. })));
        let small = LabelMask::filled(1, 1, 0);
        write_mask(&dir.path().join("masks/small.pgm"), &small).unwrap();
        fs::write(&path, "x\timages/x.ppm\tmasks/small.pgm\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Shape { .. })));
    }
}

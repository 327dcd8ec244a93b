//! Dataset directories of binary PPM images and PGM masks.
//!
//! ```text
//! classes.txt        id<TAB>name per line, id >= 1
//! split.txt          "train: 1,2,..." and "novel: 5,6,..."
//! images/<name>.ppm  P6, 8-bit RGB
//! masks/<name>.pgm   P5, 8-bit, pixel = global class id (0 = background)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Record, SegDataset};
use crate::error::{Error, Result};

struct Netpbm {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn parse_netpbm(bytes: &[u8], magic: &str, channels: usize, what: &str) -> Result<Netpbm> {
    let bad = |m: &str| Error::Dataset(format!("{what}: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected magic {magic}, found {}", fields[0])));
    }
    let num = |s: &str, name: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("header {name} `{s}` is not a number")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit files are supported (maxval {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(bad(&format!(
            "raster holds {} bytes, header promises {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(Netpbm {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read a P6 file into planar RGB. Returns `(width, height, planes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = parse_netpbm(&read_file(path)?, "P6", 3, &path.display().to_string())?;
    let px = img.width * img.height;
    let mut planar = vec![0u8; 3 * px];
    for (i, rgb) in img.pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            planar[ch * px + i] = rgb[ch];
        }
    }
    Ok((img.width, img.height, planar))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = parse_netpbm(&read_file(path)?, "P5", 1, &path.display().to_string())?;
    Ok((img.width, img.height, img.pixels))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, planar: &[u8]) -> Result<()> {
    let px = width * height;
    if planar.len() != 3 * px {
        return Err(Error::Shape(format!("{width}x{height} RGB image needs {} bytes", 3 * px)));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..px {
        out.extend_from_slice(&[planar[i], planar[px + i], planar[2 * px + i]]);
    }
    write_file(path, &out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{width}x{height} mask needs {} bytes", width * height)));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

fn join_ids(ids: &[u8]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_dataset_dir(dataset: &SegDataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let classes: String = dataset
        .classes
        .iter()
        .map(|(id, name)| format!("{id}\t{name}\n"))
        .collect();
    write_file(&dir.join("classes.txt"), classes.as_bytes())?;
    let split = format!(
        "train: {}\nnovel: {}\n",
        join_ids(&dataset.train_classes),
        join_ids(&dataset.novel_classes)
    );
    write_file(&dir.join("split.txt"), split.as_bytes())?;
    for r in &dataset.records {
        write_ppm(&dir.join("images").join(format!("{}.ppm", r.name)), dataset.width, dataset.height, &r.image)?;
        write_pgm(&dir.join("masks").join(format!("{}.pgm", r.name)), dataset.width, dataset.height, &r.mask)?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_classes(text: &str) -> Result<Vec<(u8, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("classes.txt line {}: expected `id<TAB>name`", n + 1)))?;
        let id: u8 = id
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("classes.txt line {}: bad id `{id}`", n + 1)))?;
        if id == 0 {
            return Err(Error::Dataset(format!("classes.txt line {}: id 0 is reserved for background", n + 1)));
        }
        out.push((id, name.trim().to_string()));
    }
    out.sort();
    Ok(out)
}

fn parse_split(text: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut train = None;
    let mut novel = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, list) = line
            .split_once(':')
            .ok_or_else(|| Error::Dataset(format!("split.txt line {}: expected `train:` or `novel:`", n + 1)))?;
        let mut ids = Vec::new();
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            ids.push(
                tok.parse::<u8>()
                    .map_err(|_| Error::Dataset(format!("split.txt line {}: bad id `{tok}`", n + 1)))?,
            );
        }
        ids.sort_unstable();
        match key.trim() {
            "train" => train = Some(ids),
            "novel" => novel = Some(ids),
            other => return Err(Error::Dataset(format!("split.txt line {}: unknown key `{other}`", n + 1))),
        }
    }
    Ok((train.unwrap_or_default(), novel.unwrap_or_default()))
}

fn list_stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Load and validate a dataset directory. Records are ordered by name.
pub fn load_dataset_dir(dir: &Path) -> Result<SegDataset> {
    let classes = parse_classes(&read_text(&dir.join("classes.txt"))?)?;
    let (train_classes, novel_classes) = parse_split(&read_text(&dir.join("split.txt"))?)?;
    let images = list_stems(&dir.join("images"), "ppm")?;
    let masks = list_stems(&dir.join("masks"), "pgm")?;
    if let Some((name, path)) = images.iter().find(|(n, _)| !masks.contains_key(*n)) {
        return Err(Error::Dataset(format!(
            "image {} has no mask (expected masks/{name}.pgm)",
            path.display()
        )));
    }
    if let Some((name, path)) = masks.iter().find(|(n, _)| !images.contains_key(*n)) {
        return Err(Error::Dataset(format!(
            "mask {} has no image (expected images/{name}.ppm)",
            path.display()
        )));
    }
    let mut declared = [false; 256];
    for (id, _) in &classes {
        declared[*id as usize] = true;
    }
    let mut records = Vec::with_capacity(images.len());
    let mut extent = None;
    for (name, img_path) in &images {
        let (w, h, image) = read_ppm(img_path)?;
        let mask_path = &masks[name];
        let (mw, mh, mask) = read_pgm(mask_path)?;
        if (w, h) != (mw, mh) {
            return Err(Error::Dataset(format!(
                "{} is {w}x{h} but {} is {mw}x{mh}",
                img_path.display(),
                mask_path.display()
            )));
        }
        if *extent.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Dataset(format!(
                "{} is {w}x{h}, other images are {}x{}",
                img_path.display(),
                extent.unwrap().0,
                extent.unwrap().1
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&v| v != 0 && !declared[v as usize]) {
            return Err(Error::Dataset(format!(
                "{} contains undeclared class id {bad}",
                mask_path.display()
            )));
        }
        records.push(Record::new(name.clone(), image, mask));
    }
    let (width, height) = extent.ok_or_else(|| Error::Dataset(format!("{} holds no images", dir.display())))?;
    let ds = SegDataset {
        height,
        width,
        classes,
        records,
        train_classes,
        novel_classes,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{gen_synthetic, SynthConfig};

    fn tiny() -> SegDataset {
        gen_synthetic(&SynthConfig {
            num_classes: 3,
            images_per_class: 3,
            novel_classes: vec![3],
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.checksum(), ds.checksum());
    }

    #[test]
    fn undeclared_mask_value_names_file_and_value() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path()).unwrap();
        let name = &ds.records[1].name;
        let mut mask = ds.records[1].mask.clone();
        mask[5] = 99;
        write_pgm(&dir.path().join("masks").join(format!("{name}.pgm")), ds.width, ds.height, &mask).unwrap();
        let msg = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("99") && msg.contains(&format!("{name}.pgm")), "{msg}");
    }

    #[test]
    fn orphan_image_is_reported() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path()).unwrap();
        let name = &ds.records[0].name;
        fs::remove_file(dir.path().join("masks").join(format!("{name}.pgm"))).unwrap();
        let msg = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(msg.contains(&format!("{name}.ppm")) && msg.contains("no mask"), "{msg}");
    }

    #[test]
    fn malformed_headers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        for bytes in [&b"P5\n2 2\n255\n0000"[..], b"P6\n2\n", b"P6\n2 2\n65535\n", b"P6\n2 2\n255\n012"] {
            fs::write(&p, bytes).unwrap();
            assert!(matches!(read_ppm(&p), Err(Error::Dataset(_))));
        }
        fs::write(&p, b"P6\n# comment\n1 1\n255\nabc").unwrap();
        assert_eq!(read_ppm(&p).unwrap(), (1, 1, b"abc".to_vec()));
    }

    #[test]
    fn size_mismatch_and_overlapping_split_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path()).unwrap();
        let name = &ds.records[0].name;
        write_pgm(&dir.path().join("masks").join(format!("{name}.pgm")), 4, 4, &[0; 16]).unwrap();
        assert!(load_dataset_dir(dir.path()).is_err());

        write_dataset_dir(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("split.txt"), "train: 1,2,3\nnovel: 3\n").unwrap();
        assert!(matches!(load_dataset_dir(dir.path()), Err(Error::Dataset(_))));
    }
}

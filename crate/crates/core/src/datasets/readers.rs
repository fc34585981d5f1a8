//! Corpus readers: image folders plus the standard distribution formats of
//! the four benchmark corpora (IDX for MNIST / Fashion-MNIST, the binary
//! batches for CIFAR-10 / CIFAR-100).

use super::{normalize_image, Corpus, CorpusExample, DataError, Partition, RawImage};
use crate::scalar::Scalar;
use flate2::read::GzDecoder;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Reads a file, transparently gunzipping `.gz` paths.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut buf)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut buf)?;
    }
    Ok(buf)
}

/// Finds `name` or `name.gz` under `dir`.
fn find_file(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(DataError::Corpus(format!(
        "missing {name}[.gz] under {}",
        dir.display()
    )))
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parses an IDX image file (magic 0x00000803) into raw grayscale images.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    if bytes.len() < 16 {
        return Err(DataError::Format("idx image file truncated".into()));
    }
    if be_u32(bytes, 0) != 0x0000_0803 {
        return Err(DataError::Format(format!(
            "bad idx image magic {:#010x}",
            be_u32(bytes, 0)
        )));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Format(format!(
            "idx image file holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    Ok((count, rows, cols, &bytes[16..expected]))
}

/// Parses an IDX label file (magic 0x00000801).
fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    if bytes.len() < 8 {
        return Err(DataError::Format("idx label file truncated".into()));
    }
    if be_u32(bytes, 0) != 0x0000_0801 {
        return Err(DataError::Format(format!(
            "bad idx label magic {:#010x}",
            be_u32(bytes, 0)
        )));
    }
    let count = be_u32(bytes, 4) as usize;
    if bytes.len() < 8 + count {
        return Err(DataError::Format("idx label file truncated".into()));
    }
    Ok(&bytes[8..8 + count])
}

/// Loads an IDX-format corpus (MNIST or Fashion-MNIST layout) from a
/// directory holding the four standard files, raw or gzipped.
pub fn load_idx_corpus<T: Scalar>(
    dir: &Path,
    name: &str,
    image_size: usize,
) -> Result<Corpus<T>, DataError> {
    let mut examples = Vec::new();
    for (partition, img_name, lbl_name, prefix) in [
        (
            Partition::Train,
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "train",
        ),
        (
            Partition::Test,
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            "test",
        ),
    ] {
        let img_bytes = read_maybe_gz(&find_file(dir, img_name)?)?;
        let lbl_bytes = read_maybe_gz(&find_file(dir, lbl_name)?)?;
        let (count, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
        let labels = parse_idx_labels(&lbl_bytes)?;
        if labels.len() != count {
            return Err(DataError::Format(format!(
                "{img_name}: {count} images but {} labels",
                labels.len()
            )));
        }
        for i in 0..count {
            let raw = RawImage::new(
                1,
                rows,
                cols,
                pixels[i * rows * cols..(i + 1) * rows * cols].to_vec(),
            )?;
            examples.push(CorpusExample {
                id: format!("{prefix}/{i:05}"),
                image: normalize_image(&raw, image_size)?,
                class: labels[i] as u32,
                partition,
            });
        }
    }
    Corpus::from_examples(name, examples, Vec::new())
}

const CIFAR_PLANE: usize = 32 * 32;

fn cifar_dir(dir: &Path, nested: &str) -> PathBuf {
    let candidate = dir.join(nested);
    if candidate.is_dir() {
        candidate
    } else {
        dir.to_path_buf()
    }
}

/// Loads CIFAR-10 from its binary batches (`data_batch_*.bin`, `test_batch.bin`).
pub fn load_cifar10<T: Scalar>(dir: &Path, image_size: usize) -> Result<Corpus<T>, DataError> {
    let dir = cifar_dir(dir, "cifar-10-batches-bin");
    let mut examples = Vec::new();
    let mut index = 0usize;
    for batch in 1..=5 {
        let bytes = read_maybe_gz(&find_file(&dir, &format!("data_batch_{batch}.bin"))?)?;
        parse_cifar_records(&bytes, 1, |label, raw| {
            examples.push(make_cifar_example(
                Partition::Train,
                index,
                label,
                raw,
                image_size,
            )?);
            index += 1;
            Ok(())
        })?;
    }
    let bytes = read_maybe_gz(&find_file(&dir, "test_batch.bin")?)?;
    let mut test_index = 0usize;
    parse_cifar_records(&bytes, 1, |label, raw| {
        examples.push(make_cifar_example(
            Partition::Test,
            test_index,
            label,
            raw,
            image_size,
        )?);
        test_index += 1;
        Ok(())
    })?;
    Corpus::from_examples("cifar10", examples, Vec::new())
}

/// Loads CIFAR-100 from `train.bin` / `test.bin`, labeling by the 20 coarse
/// superclasses.
pub fn load_cifar100<T: Scalar>(dir: &Path, image_size: usize) -> Result<Corpus<T>, DataError> {
    let dir = cifar_dir(dir, "cifar-100-binary");
    let mut examples = Vec::new();
    for (partition, file, prefix) in [
        (Partition::Train, "train.bin", "train"),
        (Partition::Test, "test.bin", "test"),
    ] {
        let bytes = read_maybe_gz(&find_file(&dir, file)?)?;
        let mut index = 0usize;
        parse_cifar_records(&bytes, 2, |label, raw| {
            examples.push(CorpusExample {
                id: format!("{prefix}/{index:05}"),
                image: normalize_image(&raw, image_size)?,
                class: label as u32,
                partition,
            });
            index += 1;
            Ok(())
        })?;
    }
    Corpus::from_examples("cifar100", examples, Vec::new())
}

/// Iterates fixed-size CIFAR records; `label_bytes` is 1 (CIFAR-10) or 2
/// (CIFAR-100, where the first byte is the coarse label we keep).
fn parse_cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    mut sink: impl FnMut(u8, RawImage) -> Result<(), DataError>,
) -> Result<(), DataError> {
    let record = label_bytes + 3 * CIFAR_PLANE;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(DataError::Format(format!(
            "cifar file length {} is not a multiple of record size {record}",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(record) {
        let label = rec[0];
        let raw = RawImage::new(3, 32, 32, rec[label_bytes..].to_vec())?;
        sink(label, raw)?;
    }
    Ok(())
}

fn make_cifar_example<T: Scalar>(
    partition: Partition,
    index: usize,
    label: u8,
    raw: RawImage,
    image_size: usize,
) -> Result<CorpusExample<T>, DataError> {
    let prefix = match partition {
        Partition::Train => "train",
        Partition::Test => "test",
    };
    Ok(CorpusExample {
        id: format!("{prefix}/{index:05}"),
        image: normalize_image(&raw, image_size)?,
        class: label as u32,
        partition,
    })
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode_image(path: &Path, force_rgb: bool) -> Result<RawImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?;
    if force_rgb {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut planes = vec![0u8; 3 * h * w];
        for (y, x, px) in rgb.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
            planes[y * w + x] = px[0];
            planes[h * w + y * w + x] = px[1];
            planes[2 * h * w + y * w + x] = px[2];
        }
        RawImage::new(3, h, w, planes)
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        RawImage::new(1, h as usize, w as usize, gray.into_raw())
    }
}

fn list_class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::Corpus(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Corpus(format!(
            "class directory {} holds no image files",
            dir.display()
        )));
    }
    Ok(files)
}

/// Ingests an image-folder corpus.
///
/// Layout is either `root/<class>/<images>` (a deterministic 80/20 split by
/// sorted filename supplies the test partition) or `root/{train,test}/<class>/
/// <images>` when the corpus ships its own partitions. `mapping` optionally
/// assigns class names to integer labels; otherwise classes are numbered in
/// sorted-name order. Undecodable files are skipped with a warning.
pub fn ingest_image_folder<T: Scalar>(
    root: &Path,
    mapping: Option<&BTreeMap<String, u32>>,
    image_size: usize,
) -> Result<Corpus<T>, DataError> {
    if !root.is_dir() {
        return Err(DataError::Corpus(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let top = list_class_dirs(root)?;
    let nested = top.len() == 2
        && top.iter().any(|(n, _)| n == "train")
        && top.iter().any(|(n, _)| n == "test");

    // (partition, class name, files)
    let mut groups: Vec<(Partition, String, Vec<PathBuf>)> = Vec::new();
    if nested {
        for (name, dir) in &top {
            let partition = if name == "train" {
                Partition::Train
            } else {
                Partition::Test
            };
            for (class_name, class_dir) in list_class_dirs(dir)? {
                groups.push((partition, class_name, sorted_image_files(&class_dir)?));
            }
        }
    } else {
        for (class_name, class_dir) in &top {
            let files = sorted_image_files(class_dir)?;
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, f) in files.into_iter().enumerate() {
                if i % 5 == 4 {
                    test.push(f);
                } else {
                    train.push(f);
                }
            }
            groups.push((Partition::Train, class_name.clone(), train));
            if !test.is_empty() {
                groups.push((Partition::Test, class_name.clone(), test));
            }
        }
    }

    let label_of = |class_name: &str| -> Result<u32, DataError> {
        match mapping {
            Some(map) => map.get(class_name).copied().ok_or_else(|| {
                DataError::Corpus(format!("class {class_name} missing from mapping file"))
            }),
            None => {
                let mut names: Vec<&String> = groups.iter().map(|(_, n, _)| n).collect();
                names.sort();
                names.dedup();
                Ok(names.iter().position(|n| n.as_str() == class_name).unwrap() as u32)
            }
        }
    };

    // probe the first decodable image to fix the corpus channel count
    let mut force_rgb = None;
    'probe: for (_, _, files) in &groups {
        for f in files {
            if let Ok(img) = image::open(f) {
                force_rgb = Some(!matches!(
                    img.color(),
                    image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
                ));
                break 'probe;
            }
        }
    }
    let force_rgb =
        force_rgb.ok_or_else(|| DataError::Corpus("no decodable image in corpus".into()))?;

    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    for (partition, class_name, files) in &groups {
        let class = label_of(class_name)?;
        let prefix = match partition {
            Partition::Train => "train",
            Partition::Test => "test",
        };
        for file in files {
            let raw = match decode_image(file, force_rgb) {
                Ok(raw) => raw,
                Err(e) => {
                    warnings.push(format!("skipped {}: {e}", file.display()));
                    continue;
                }
            };
            let file_name = file.file_name().unwrap_or_default().to_string_lossy();
            examples.push(CorpusExample {
                id: format!("{prefix}/{class_name}/{file_name}"),
                image: normalize_image(&raw, image_size)?,
                class,
                partition: *partition,
            });
        }
    }
    Corpus::from_examples(
        root.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .as_deref()
            .unwrap_or("folder"),
        examples,
        warnings,
    )
}

/// Loads a class-name mapping file (`{"class_name": label, ...}`).
pub fn load_class_mapping(path: &Path) -> Result<BTreeMap<String, u32>, DataError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

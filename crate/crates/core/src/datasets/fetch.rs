//! Downloaders for the four benchmark corpora in their standard
//! distribution formats.
//!
//! Files land under `dest/<corpus>/`; archives are unpacked in place so the
//! directory is immediately loadable by the matching reader. Downloads are
//! skipped when the target file already exists, so a fetch is resumable.

use super::DataError;
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// The benchmark corpora with built-in download support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkCorpus {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl FromStr for BenchmarkCorpus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(BenchmarkCorpus::Mnist),
            "fashion_mnist" | "fashion-mnist" => Ok(BenchmarkCorpus::FashionMnist),
            "cifar10" => Ok(BenchmarkCorpus::Cifar10),
            "cifar100" => Ok(BenchmarkCorpus::Cifar100),
            other => Err(format!(
                "unknown corpus {other:?} (expected mnist, fashion_mnist, cifar10 or cifar100)"
            )),
        }
    }
}

impl BenchmarkCorpus {
    pub fn dir_name(&self) -> &'static str {
        match self {
            BenchmarkCorpus::Mnist => "mnist",
            BenchmarkCorpus::FashionMnist => "fashion_mnist",
            BenchmarkCorpus::Cifar10 => "cifar10",
            BenchmarkCorpus::Cifar100 => "cifar100",
        }
    }

    /// `(file name, url)` pairs in the corpus's standard distribution format.
    pub fn downloads(&self) -> &'static [(&'static str, &'static str)] {
        const MNIST: &[(&str, &str)] = &[
            (
                "train-images-idx3-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
            ),
            (
                "train-labels-idx1-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
            ),
            (
                "t10k-images-idx3-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
            ),
            (
                "t10k-labels-idx1-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
            ),
        ];
        const FASHION: &[(&str, &str)] = &[
            (
                "train-images-idx3-ubyte.gz",
                "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-images-idx3-ubyte.gz",
            ),
            (
                "train-labels-idx1-ubyte.gz",
                "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-labels-idx1-ubyte.gz",
            ),
            (
                "t10k-images-idx3-ubyte.gz",
                "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-images-idx3-ubyte.gz",
            ),
            (
                "t10k-labels-idx1-ubyte.gz",
                "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-labels-idx1-ubyte.gz",
            ),
        ];
        const CIFAR10: &[(&str, &str)] = &[(
            "cifar-10-binary.tar.gz",
            "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        )];
        const CIFAR100: &[(&str, &str)] = &[(
            "cifar-100-binary.tar.gz",
            "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        )];
        match self {
            BenchmarkCorpus::Mnist => MNIST,
            BenchmarkCorpus::FashionMnist => FASHION,
            BenchmarkCorpus::Cifar10 => CIFAR10,
            BenchmarkCorpus::Cifar100 => CIFAR100,
        }
    }

    /// Downloads any missing files into `dest/<corpus>/` and unpacks
    /// archives. Returns the corpus directory.
    pub fn fetch(&self, dest: &Path) -> Result<PathBuf, DataError> {
        let dir = dest.join(self.dir_name());
        std::fs::create_dir_all(&dir)?;
        for (name, url) in self.downloads() {
            let target = dir.join(name);
            if !target.exists() {
                download(url, &target)?;
            }
            if name.ends_with(".tar.gz") {
                extract_tar_gz(&target, &dir)?;
            }
        }
        Ok(dir)
    }
}

fn download(url: &str, target: &Path) -> Result<(), DataError> {
    let tmp = target.with_extension("partial");
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| DataError::Corpus(format!("download of {url} failed: {e}")))?;
    let mut reader = response.body_mut().as_reader();
    let mut out = BufWriter::new(File::create(&tmp)?);
    std::io::copy(&mut reader, &mut out)
        .map_err(|e| DataError::Corpus(format!("download of {url} interrupted: {e}")))?;
    drop(out);
    std::fs::rename(&tmp, target)?;
    Ok(())
}

/// Unpacks a `.tar.gz` archive into `dest`.
pub fn extract_tar_gz(archive: &Path, dest: &Path) -> Result<(), DataError> {
    let file = File::open(archive)?;
    let mut tar = tar::Archive::new(GzDecoder::new(file));
    tar.unpack(dest)
        .map_err(|e| DataError::Corpus(format!("unpacking {} failed: {e}", archive.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;

    #[test]
    fn tar_gz_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let payload = b"0123456789abcdef";
        let archive_path = dir.path().join("fixture.tar.gz");
        {
            let gz = GzEncoder::new(File::create(&archive_path).unwrap(), Compression::fast());
            let mut builder = tar::Builder::new(gz);
            let mut header = tar::Header::new_gnu();
            header.set_size(payload.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            builder
                .append_data(&mut header, "nested/file.bin", payload.as_slice())
                .unwrap();
            builder.into_inner().unwrap().finish().unwrap();
        }
        let out = dir.path().join("out");
        extract_tar_gz(&archive_path, &out).unwrap();
        let read = std::fs::read(out.join("nested/file.bin")).unwrap();
        assert_eq!(read, payload);
    }

    #[test]
    fn corpus_names_parse() {
        assert_eq!(
            "mnist".parse::<BenchmarkCorpus>().unwrap(),
            BenchmarkCorpus::Mnist
        );
        assert_eq!(
            "fashion_mnist".parse::<BenchmarkCorpus>().unwrap(),
            BenchmarkCorpus::FashionMnist
        );
        assert!("imagenet".parse::<BenchmarkCorpus>().is_err());
        for corpus in [
            BenchmarkCorpus::Mnist,
            BenchmarkCorpus::FashionMnist,
            BenchmarkCorpus::Cifar10,
            BenchmarkCorpus::Cifar100,
        ] {
            assert!(!corpus.downloads().is_empty());
        }
    }
}

//! Download, checksum and unpack the CIFAR-100 binary archive.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};

use crate::{Error, Result};

pub const CIFAR100_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz";
pub const CIFAR100_MD5: &str = "03b5dce01913d631647c71ecec9e9cb8";
pub const ARCHIVE_NAME: &str = "cifar-100-binary.tar.gz";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchOutcome {
    pub archive: PathBuf,
    pub data_dir: PathBuf,
    pub downloaded: bool,
    pub extracted: bool,
}

pub fn md5_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut h = Md5::new();
    io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn open_source(url: &str) -> Result<Box<dyn Read>> {
    if let Some(path) = url.strip_prefix("file://") {
        return Ok(Box::new(
            fs::File::open(path).map_err(|e| Error::Download(format!("{url}: {e}")))?,
        ));
    }
    let resp = ureq::get(url)
        .call()
        .map_err(|e| Error::Download(format!("{url}: {e}")))?;
    Ok(Box::new(resp.into_reader()))
}

/// Ensures `target/cifar-100-binary.tar.gz` exists with checksum `md5` and is
/// unpacked. An already valid archive is not downloaded again; a failed or
/// corrupted download leaves nothing behind.
pub fn fetch_data(target: &Path, url: &str, md5: &str) -> Result<FetchOutcome> {
    fs::create_dir_all(target)?;
    let archive = target.join(ARCHIVE_NAME);
    let mut downloaded = false;
    let valid = archive.exists() && md5_file(&archive)? == md5;
    if !valid {
        if archive.exists() {
            log::warn!("{} fails its checksum; downloading again", archive.display());
            fs::remove_file(&archive)?;
        }
        let partial = target.join(format!("{ARCHIVE_NAME}.partial"));
        let result = (|| -> Result<()> {
            let mut src = open_source(url)?;
            let mut out = fs::File::create(&partial)?;
            io::copy(&mut src, &mut out)?;
            out.sync_all()?;
            let actual = md5_file(&partial)?;
            if actual != md5 {
                return Err(Error::Checksum {
                    path: archive.clone(),
                    expected: md5.to_string(),
                    actual,
                });
            }
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&partial);
            return Err(e);
        }
        fs::rename(&partial, &archive)?;
        downloaded = true;
    }

    let data_dir = target.join("cifar-100-binary");
    let extracted = if downloaded || !data_dir.join("train.bin").exists() {
        let staging = target.join(".extract.partial");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        let gz = flate2::read::GzDecoder::new(fs::File::open(&archive)?);
        tar::Archive::new(gz).unpack(&staging)?;
        let unpacked = staging.join("cifar-100-binary");
        if !unpacked.join("train.bin").exists() {
            fs::remove_dir_all(&staging)?;
            return Err(Error::Corrupt {
                path: archive,
                reason: "archive has no cifar-100-binary/train.bin".into(),
            });
        }
        if data_dir.exists() {
            fs::remove_dir_all(&data_dir)?;
        }
        fs::rename(&unpacked, &data_dir)?;
        fs::remove_dir_all(&staging)?;
        true
    } else {
        false
    };
    Ok(FetchOutcome {
        archive,
        data_dir,
        downloaded,
        extracted,
    })
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, MicroLm};
use crate::checkpoint::{BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

pub const MICROLM_MAGIC: &[u8; 8] = b"MTLMCKPT";
pub const MICROLM_FORMAT_VERSION: u64 = 1;

pub(crate) fn write_arch<W: Write>(w: &mut BlobWriter<W>, cfg: &ArchConfig) -> Result<()> {
    for v in [cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.n_layers, cfg.n_heads] {
        w.u64(v as u64)?;
    }
    Ok(())
}

pub(crate) fn read_arch<R: Read>(r: &mut BlobReader<R>) -> Result<ArchConfig> {
    let cfg = ArchConfig {
        vocab_size: r.usize()?,
        context_len: r.usize()?,
        d_model: r.usize()?,
        n_layers: r.usize()?,
        n_heads: r.usize()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn write_params<W: Write>(w: &mut BlobWriter<W>, model: &MicroLm) -> Result<()> {
    let named = model.named_params();
    w.u64(named.len() as u64)?;
    named.iter().try_for_each(|(n, t)| w.tensor(n, t))
}

pub(crate) fn read_params<R: Read>(r: &mut BlobReader<R>, cfg: ArchConfig) -> Result<MicroLm> {
    // A template of the right architecture; its values are overwritten.
    let mut model = MicroLm::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.usize()?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        return Err(Error::format(
            "microlm checkpoint",
            format!("{count} blobs, architecture requires {}", names.len()),
        ));
    }
    let slots: Vec<&mut Tensor> = model.params_mut();
    r.fill(names.into_iter().zip(slots).collect())?;
    Ok(model)
}

pub fn write_microlm<W: Write>(out: W, model: &MicroLm) -> Result<W> {
    let mut w = BlobWriter::new(out);
    w.magic(MICROLM_MAGIC)?;
    w.u64(MICROLM_FORMAT_VERSION)?;
    write_arch(&mut w, &model.cfg)?;
    write_params(&mut w, model)?;
    Ok(w.into_inner())
}

pub fn read_microlm<R: Read>(input: R) -> Result<MicroLm> {
    let mut r = BlobReader::new(input, "microlm checkpoint");
    r.expect_magic(MICROLM_MAGIC)?;
    let version = r.u64()?;
    if version != MICROLM_FORMAT_VERSION {
        return Err(Error::format("microlm checkpoint", format!("unsupported version {version}")));
    }
    let cfg = read_arch(&mut r)?;
    let model = read_params(&mut r, cfg)?;
    r.expect_end()?;
    Ok(model)
}

pub fn save_microlm(path: &Path, model: &MicroLm) -> Result<()> {
    let out = write_microlm(BufWriter::new(File::create(path)?), model)?;
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Loads a checkpoint and, when `expected` is given, rejects any
/// architecture mismatch.
pub fn load_microlm(path: &Path, expected: Option<&ArchConfig>) -> Result<MicroLm> {
    let model = read_microlm(BufReader::new(File::open(path)?))?;
    if let Some(cfg) = expected {
        if &model.cfg != cfg {
            return Err(Error::Config(format!(
                "checkpoint {} has architecture {:?}, expected {:?}",
                path.display(),
                model.cfg,
                cfg
            )));
        }
    }
    Ok(model)
}

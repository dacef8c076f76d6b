use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MetaTunerModel, PipelineConfig};
use crate::adapters::{read_hypernetwork, write_hypernetwork, LoraConfig};
use crate::checkpoint::{BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::microlm::checkpoint::{read_arch, read_params, write_arch, write_params};
use crate::numerics::{Parameters, Tensor};

pub const PIPELINE_MAGIC: &[u8; 8] = b"MTPIPECK";
pub const PIPELINE_FORMAT_VERSION: u64 = 1;

fn write_section<W: Write>(w: &mut BlobWriter<W>, section: &str, params: Vec<&Tensor>) -> Result<()> {
    w.str(section)?;
    w.u64(params.len() as u64)?;
    params
        .into_iter()
        .enumerate()
        .try_for_each(|(i, t)| w.tensor(&format!("{section}.{i}"), t))
}

fn read_section<R: Read>(r: &mut BlobReader<R>, section: &str, slots: Vec<&mut Tensor>) -> Result<()> {
    let name = r.str()?;
    if name != section {
        return Err(Error::format("pipeline checkpoint", format!("expected section {section:?}, found {name:?}")));
    }
    let n = r.usize()?;
    if n != slots.len() {
        return Err(Error::format(
            "pipeline checkpoint",
            format!("section {section:?} has {n} blobs, model requires {}", slots.len()),
        ));
    }
    r.fill(slots.into_iter().enumerate().map(|(i, t)| (format!("{section}.{i}"), t)).collect())
}

pub fn write_pipeline<W: Write>(out: W, model: &MetaTunerModel) -> Result<W> {
    let mut w = BlobWriter::new(out);
    w.magic(PIPELINE_MAGIC)?;
    w.u64(PIPELINE_FORMAT_VERSION)?;
    let cfg = serde_json::to_string(&model.cfg).map_err(|e| Error::format("pipeline config", e.to_string()))?;
    w.str(&cfg)?;
    let lora = serde_json::to_string(&model.lora).map_err(|e| Error::format("lora config", e.to_string()))?;
    w.str(&lora)?;
    write_arch(&mut w, &model.gen_cfg)?;
    write_params(&mut w, &model.generator())?;
    write_arch(&mut w, &model.actor.cfg)?;
    write_params(&mut w, &model.actor)?;
    write_section(&mut w, "snapshot", model.snapshot.params())?;
    if let Some(e) = &model.snapshot_encoder {
        write_section(&mut w, "snapshot_encoder", e.params())?;
    }
    if let Some(e) = &model.param_encoder {
        write_section(&mut w, "param_encoder", e.params())?;
    }
    write_hypernetwork(&mut w, &model.hyper)?;
    Ok(w.into_inner())
}

pub fn read_pipeline<R: Read>(input: R) -> Result<MetaTunerModel> {
    let mut r = BlobReader::new(input, "pipeline checkpoint");
    r.expect_magic(PIPELINE_MAGIC)?;
    let version = r.u64()?;
    if version != PIPELINE_FORMAT_VERSION {
        return Err(Error::format("pipeline checkpoint", format!("unsupported version {version}")));
    }
    let cfg: PipelineConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::format("pipeline config", e.to_string()))?;
    let lora: LoraConfig = serde_json::from_str(&r.str()?).map_err(|e| Error::format("lora config", e.to_string()))?;
    let gen_cfg = read_arch(&mut r)?;
    let generator = read_params(&mut r, gen_cfg)?;
    let actor_cfg = read_arch(&mut r)?;
    let actor = read_params(&mut r, actor_cfg)?;
    let mut model = MetaTunerModel::new(generator, actor, lora, cfg, 0)?;
    read_section(&mut r, "snapshot", model.snapshot.params_mut())?;
    if let Some(e) = model.snapshot_encoder.as_mut() {
        read_section(&mut r, "snapshot_encoder", e.params_mut())?;
    }
    if let Some(e) = model.param_encoder.as_mut() {
        read_section(&mut r, "param_encoder", e.params_mut())?;
    }
    let hyper = read_hypernetwork(&mut r)?;
    if hyper.lora != model.lora || hyper.n_targets != model.actor.cfg.n_layers || hyper.l != model.gen_cfg.context_len {
        return Err(Error::format("pipeline checkpoint", "hypernetwork does not fit the stored models"));
    }
    model.hyper = hyper;
    r.expect_end()?;
    Ok(model)
}

pub fn save_pipeline(path: &Path, model: &MetaTunerModel) -> Result<()> {
    let w = write_pipeline(BufWriter::new(File::create(path)?), model)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

pub fn load_pipeline(path: &Path) -> Result<MetaTunerModel> {
    read_pipeline(BufReader::new(File::open(path)?))
}

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use metatuner::microlm::{load_microlm, MicroLm, MICROLM_MAGIC};
use metatuner::pipeline::{load_pipeline, MetaTunerModel, PIPELINE_MAGIC};
use metatuner::tasks::vocab::{TokenId, INSTR_GENERIC};
use metatuner::tasks::Example;
use metatuner::training::{Answerer, PromptPolicy, PromptedActor, ScriptedModel};

/// Marks a checkpoint that answers with the task oracle. Used to check the
/// evaluation harness end to end.
pub const SCRIPTED_MAGIC: &[u8; 8] = b"MTSCRIPT";
const SCRIPTED_VERSION: u64 = 1;

pub enum AnyModel {
    Pipeline(Box<MetaTunerModel>),
    /// A bare actor; prompted with the instruction when the split carries
    /// it, with the generic prompt otherwise.
    Actor(Box<MicroLm>),
    Scripted,
}

pub fn write_scripted(path: &Path) -> Result<()> {
    let mut bytes = SCRIPTED_MAGIC.to_vec();
    bytes.extend_from_slice(&SCRIPTED_VERSION.to_le_bytes());
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let mut magic = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let what = || format!("loading {}", path.display());
    Ok(match &magic {
        m if m == PIPELINE_MAGIC => AnyModel::Pipeline(Box::new(load_pipeline(path).with_context(what)?)),
        m if m == MICROLM_MAGIC => AnyModel::Actor(Box::new(load_microlm(path, None).with_context(what)?)),
        m if m == SCRIPTED_MAGIC => {
            let bytes = fs::read(path)?;
            let version = bytes.get(8..16).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
            if version != Some(SCRIPTED_VERSION) || bytes.len() != 16 {
                bail!("{}: unsupported scripted checkpoint", path.display());
            }
            AnyModel::Scripted
        }
        _ => bail!("{}: not a metatuner checkpoint", path.display()),
    })
}

pub fn load_pipeline_checkpoint(path: &Path) -> Result<MetaTunerModel> {
    match load_any(path)? {
        AnyModel::Pipeline(m) => Ok(*m),
        _ => bail!("{} is not a pipeline checkpoint", path.display()),
    }
}

/// Borrowed answerer for a loaded checkpoint.
pub struct Evaluable<'a> {
    model: &'a AnyModel,
    explicit_instructions: bool,
}

impl AnyModel {
    pub fn answerer(&self, explicit_instructions: bool) -> Evaluable<'_> {
        Evaluable {
            model: self,
            explicit_instructions,
        }
    }
}

impl Evaluable<'_> {
    fn actor(&self) -> Option<PromptedActor<'_>> {
        match self.model {
            AnyModel::Actor(a) => Some(PromptedActor {
                actor: a,
                policy: if self.explicit_instructions {
                    PromptPolicy::Instruction
                } else {
                    PromptPolicy::Fixed(vec![INSTR_GENERIC])
                },
            }),
            _ => None,
        }
    }
}

impl Answerer for Evaluable<'_> {
    fn answer(&self, ex: &Example) -> metatuner::Result<Vec<TokenId>> {
        match self.model {
            AnyModel::Pipeline(m) => Answerer::answer(m.as_ref(), ex),
            AnyModel::Actor(_) => self.actor().expect("actor").answer(ex),
            AnyModel::Scripted => ScriptedModel.answer(ex),
        }
    }

    fn answer_loss(&self, ex: &Example) -> metatuner::Result<Option<f64>> {
        match self.model {
            AnyModel::Pipeline(m) => Answerer::answer_loss(m.as_ref(), ex),
            AnyModel::Actor(_) => self.actor().expect("actor").answer_loss(ex),
            AnyModel::Scripted => Ok(None),
        }
    }
}

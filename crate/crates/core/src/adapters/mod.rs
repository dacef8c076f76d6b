//! Low-rank adapters for the actor's attention output projections and the
//! hypernetwork that produces them from generator hidden states.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::microlm::{ArchConfig, MicroLm};
use crate::numerics::{kernels, Graph, Parameters, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub lambda: f64,
    /// Rows of the adapted projection.
    pub d_m: usize,
    /// Columns of the adapted projection.
    pub k_m: usize,
}

impl LoraConfig {
    /// Square o_proj of an actor with the given width.
    pub fn for_actor(actor: &ArchConfig, rank: usize, lambda: f64) -> Result<Self> {
        let cfg = LoraConfig {
            rank,
            lambda,
            d_m: actor.d_model,
            k_m: actor.d_model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let max = self.d_m.min(self.k_m);
        if self.rank == 0 || self.rank > max {
            return Err(Error::Range {
                name: "lora rank".into(),
                value: self.rank,
                lo: 1,
                hi: max,
            });
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lora lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Concrete per-layer factors: `b` is d_M×r, `a` is r×k_M.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Factors still on a tape.
#[derive(Debug, Clone)]
pub struct LoraVars {
    pub layers: Vec<(Var, Var)>,
}

impl LoraVars {
    pub fn values(&self, g: &Graph) -> Result<LoraFactors> {
        let t = |v: Var| Tensor::from_vec(g.shape(v), g.value(v).to_vec());
        Ok(LoraFactors {
            layers: self
                .layers
                .iter()
                .map(|&(b, a)| Ok((t(b)?, t(a)?)))
                .collect::<Result<_>>()?,
        })
    }
}

impl LoraFactors {
    /// True when every layer's update θᵇθᵃ is exactly zero because θᵇ is.
    pub fn delta_is_zero(&self) -> bool {
        self.layers.iter().all(|(b, _)| b.data.iter().all(|&x| x == 0.0))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(b, a)| b.data.iter().chain(&a.data).all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(b, a)| b.is_finite() && a.is_finite())
    }
}

/// The four matrices producing one layer's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperLayer {
    /// d_M×l
    pub w_d_b: Tensor,
    /// h_G×r
    pub w_u_b: Tensor,
    /// r×l
    pub w_d_a: Tensor,
    /// h_G×k_M
    pub w_u_a: Tensor,
}

impl HyperLayer {
    pub const NAMES: [&'static str; 4] = ["W_d_b", "W_u_b", "W_d_a", "W_u_a"];
}

impl Parameters for HyperLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_d_b, &self.w_u_b, &self.w_d_a, &self.w_u_a]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_d_b, &mut self.w_u_b, &mut self.w_d_a, &mut self.w_u_a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetwork {
    pub lora: LoraConfig,
    /// Rows of the hidden-state input (the generator's context length).
    pub l: usize,
    /// Width of the hidden-state input.
    pub h_g: usize,
    /// Number of actor layers that receive factors.
    pub n_targets: usize,
    /// One decoder reused for every actor layer instead of one per layer.
    pub shared: bool,
    pub layers: Vec<HyperLayer>,
}

impl Parameters for HyperNetwork {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.params_mut()
    }
}

/// Down-projections ~ N(0, 1/l). `W_u_b` starts at zero so every generated
/// update θᵇθᵃ is exactly zero; `W_u_a` ~ N(0, 1/h_G) because with both
/// up-projections at zero every hypernetwork gradient vanishes.
pub fn init_hypernetwork(
    lora: &LoraConfig,
    generator: &ArchConfig,
    n_actor_layers: usize,
    shared: bool,
    seed: u64,
) -> Result<HyperNetwork> {
    lora.validate()?;
    if n_actor_layers == 0 {
        return Err(Error::Config("actor has no layers to adapt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, h_g, r) = (generator.context_len, generator.d_model, lora.rank);
    let std = 1.0 / (l as f64).sqrt();
    let n = if shared { 1 } else { n_actor_layers };
    let layers = (0..n)
        .map(|_| HyperLayer {
            w_d_b: Tensor::randn(&[lora.d_m, l], std, &mut rng),
            w_u_b: Tensor::zeros(&[h_g, r]),
            w_d_a: Tensor::randn(&[r, l], std, &mut rng),
            w_u_a: Tensor::randn(&[h_g, lora.k_m], 1.0 / (h_g as f64).sqrt(), &mut rng),
        })
        .collect();
    Ok(HyperNetwork {
        lora: *lora,
        l,
        h_g,
        n_targets: n_actor_layers,
        shared,
        layers,
    })
}

impl HyperNetwork {
    fn layer_for(&self, target: usize) -> &HyperLayer {
        if self.shared {
            &self.layers[0]
        } else {
            &self.layers[target]
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let LoraConfig { rank: r, d_m, k_m, .. } = self.lora;
        let expect = [[d_m, self.l], [self.h_g, r], [r, self.l], [self.h_g, k_m]];
        let want = if self.shared { 1 } else { self.n_targets };
        if self.layers.len() != want {
            return Err(Error::shape("hypernetwork layers", &[self.layers.len()], &[want]));
        }
        for layer in &self.layers {
            for ((name, t), e) in HyperLayer::NAMES.iter().zip(layer.params()).zip(expect) {
                if t.shape() != e {
                    return Err(Error::shape(*name, t.shape(), &e));
                }
            }
        }
        Ok(())
    }
}

/// θᵇ = ReLU(W_d_b·h)·W_u_b and θᵃ = ReLU(W_d_a·h)·W_u_a for every actor
/// layer, recorded on `g`.
pub fn generate_lora(g: &mut Graph, hyper: &HyperNetwork, h: Var) -> Result<LoraVars> {
    hyper.check_shapes()?;
    let hs = g.shape(h);
    if hs != [hyper.l, hyper.h_g] {
        return Err(Error::shape("hidden states h", hs, &[hyper.l, hyper.h_g]));
    }
    let mut out = Vec::with_capacity(hyper.n_targets);
    let mut cache: Option<(Var, Var)> = None;
    for t in 0..hyper.n_targets {
        if hyper.shared {
            if let Some(f) = cache {
                out.push(f);
                continue;
            }
        }
        let layer = hyper.layer_for(t);
        let wdb = g.param(&layer.w_d_b);
        let wub = g.param(&layer.w_u_b);
        let wda = g.param(&layer.w_d_a);
        let wua = g.param(&layer.w_u_a);
        let zb = g.matmul(wdb, h)?;
        let zb = g.relu(zb);
        let b = g.matmul(zb, wub)?;
        let za = g.matmul(wda, h)?;
        let za = g.relu(za);
        let a = g.matmul(za, wua)?;
        cache = Some((b, a));
        out.push((b, a));
    }
    Ok(LoraVars { layers: out })
}

fn check_factor_shapes(cfg: &LoraConfig, n_layers: usize, shapes: &[(&[usize], &[usize])]) -> Result<()> {
    if shapes.len() != n_layers {
        return Err(Error::shape("lora factor layers", &[shapes.len()], &[n_layers]));
    }
    for (b, a) in shapes {
        if *b != [cfg.d_m, cfg.rank] {
            return Err(Error::shape("theta_b", b, &[cfg.d_m, cfg.rank]));
        }
        if *a != [cfg.rank, cfg.k_m] {
            return Err(Error::shape("theta_a", a, &[cfg.rank, cfg.k_m]));
        }
    }
    Ok(())
}

/// Effective o_proj per actor layer, W_o + λ·θᵇθᵃ, on the tape. The actor's
/// own tensors are read, never written.
pub fn apply_lora(g: &mut Graph, actor: &MicroLm, factors: &LoraVars, cfg: &LoraConfig) -> Result<Vec<Var>> {
    let shapes: Vec<(&[usize], &[usize])> = factors.layers.iter().map(|&(b, a)| (g.shape(b), g.shape(a))).collect();
    check_factor_shapes(cfg, actor.blocks.len(), &shapes)?;
    let mut out = Vec::with_capacity(actor.blocks.len());
    for (block, &(b, a)) in actor.blocks.iter().zip(&factors.layers) {
        if block.wo.shape() != [cfg.d_m, cfg.k_m] {
            return Err(Error::shape("o_proj", block.wo.shape(), &[cfg.d_m, cfg.k_m]));
        }
        let wo = g.param(&block.wo);
        let delta = g.matmul(b, a)?;
        let delta = g.scale(delta, cfg.lambda);
        out.push(g.add(wo, delta)?);
    }
    Ok(out)
}

/// Same arithmetic as [`apply_lora`] on plain values, for the cached decoder.
pub fn apply_lora_values(actor: &MicroLm, factors: &LoraFactors, cfg: &LoraConfig) -> Result<Vec<Vec<f64>>> {
    let shapes: Vec<(&[usize], &[usize])> = factors.layers.iter().map(|(b, a)| (b.shape(), a.shape())).collect();
    check_factor_shapes(cfg, actor.blocks.len(), &shapes)?;
    let mut out = Vec::with_capacity(actor.blocks.len());
    for (block, (b, a)) in actor.blocks.iter().zip(&factors.layers) {
        if block.wo.shape() != [cfg.d_m, cfg.k_m] {
            return Err(Error::shape("o_proj", block.wo.shape(), &[cfg.d_m, cfg.k_m]));
        }
        let delta = kernels::matmul(&b.data, &a.data, cfg.d_m, cfg.rank, cfg.k_m);
        out.push(
            block
                .wo
                .data
                .iter()
                .zip(delta)
                .map(|(w, d)| w + d * cfg.lambda)
                .collect(),
        );
    }
    Ok(out)
}

pub(crate) fn write_hypernetwork<W: Write>(w: &mut BlobWriter<W>, hyper: &HyperNetwork) -> Result<()> {
    let c = &hyper.lora;
    for v in [c.rank, c.d_m, c.k_m, hyper.l, hyper.h_g, hyper.n_targets, hyper.shared as usize] {
        w.u64(v as u64)?;
    }
    w.f64(c.lambda)?;
    for (i, layer) in hyper.layers.iter().enumerate() {
        for (n, t) in HyperLayer::NAMES.iter().zip(layer.params()) {
            w.tensor(&format!("hyper.{i}.{n}"), t)?;
        }
    }
    Ok(())
}

pub(crate) fn read_hypernetwork<R: Read>(r: &mut BlobReader<R>) -> Result<HyperNetwork> {
    let mut v = [0usize; 7];
    for x in v.iter_mut() {
        *x = r.usize()?;
    }
    let [rank, d_m, k_m, l, h_g, n_targets, shared] = v;
    let lora = LoraConfig {
        rank,
        lambda: r.f64()?,
        d_m,
        k_m,
    };
    lora.validate().map_err(|e| Error::format("hypernetwork", e.to_string()))?;
    let n = if shared == 1 { 1 } else { n_targets };
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let mut layer = HyperLayer {
            w_d_b: Tensor::zeros(&[d_m, l]),
            w_u_b: Tensor::zeros(&[h_g, rank]),
            w_d_a: Tensor::zeros(&[rank, l]),
            w_u_a: Tensor::zeros(&[h_g, k_m]),
        };
        r.fill(
            HyperLayer::NAMES
                .iter()
                .map(|n| format!("hyper.{i}.{n}"))
                .zip(layer.params_mut())
                .collect(),
        )?;
        layers.push(layer);
    }
    Ok(HyperNetwork {
        lora,
        l,
        h_g,
        n_targets,
        shared: shared == 1,
        layers,
    })
}

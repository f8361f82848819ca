//! Segmentation backbone with two predictor heads, and the annotation
//! uncertainty estimator (shared encoder, one decoder per annotation source).

mod params;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{Binding, ParamGrads, ParamStore};

use crate::autodiff::{AutodiffError, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegBackboneConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for SegBackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 3,
        }
    }
}

fn validate_unet(base_width: usize, depth: usize) -> Result<(), ModelError> {
    if depth < 2 {
        return Err(ModelError::Config(format!(
            "depth must be >= 2, got {depth}"
        )));
    }
    if base_width < 4 {
        return Err(ModelError::Config(format!(
            "base_width must be >= 4, got {base_width}"
        )));
    }
    Ok(())
}

fn check_extents(shape: &[usize], depth: usize) -> Result<(), ModelError> {
    let factor = 1usize << depth;
    for (axis, &len) in ["H", "W"].iter().zip(&shape[shape.len() - 2..]) {
        if len % factor != 0 {
            return Err(ModelError::Config(format!(
                "{axis}={len} is not divisible by 2^depth = {factor}"
            )));
        }
    }
    Ok(())
}

impl SegBackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be positive".into()));
        }
        validate_unet(self.base_width, self.depth)
    }

    /// Rejects spatial extents the pooling pyramid cannot halve `depth` times.
    pub fn check_input(&self, height: usize, width: usize) -> Result<(), ModelError> {
        check_extents(&[height, width], self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuemConfig {
    pub num_sources: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl AuemConfig {
    pub fn new(num_sources: usize) -> Self {
        Self {
            num_sources,
            base_width: 8,
            depth: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_sources < 2 {
            return Err(ModelError::Config(format!(
                "uncertainty estimation needs at least 2 sources, got {}",
                self.num_sources
            )));
        }
        validate_unet(self.base_width, self.depth)
    }
}

/// Which predictor heads a backbone forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Primary,
    Auxiliary,
    Both,
}

/// Backbone outputs; a head's map is `None` when it was not requested.
#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    pub primary_prob: Option<Var>,
    pub auxiliary_prob: Option<Var>,
    pub shared_features: Var,
}

pub const PRIMARY_HEAD: &str = "seg.head.primary";
pub const AUXILIARY_HEAD: &str = "seg.head.auxiliary";

/// U-Net backbone with primary and auxiliary 1×1 sigmoid heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    cfg: SegBackboneConfig,
    params: ParamStore,
}

impl SegNet {
    pub fn new(cfg: SegBackboneConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        unet::add_encoder(
            &mut params,
            "seg",
            cfg.in_channels,
            cfg.base_width,
            cfg.depth,
            &mut rng,
        )?;
        unet::add_decoder(&mut params, "seg", cfg.base_width, cfg.depth, &mut rng)?;
        unet::add_projection(&mut params, PRIMARY_HEAD, cfg.base_width, &mut rng)?;
        unet::add_projection(&mut params, AUXILIARY_HEAD, cfg.base_width, &mut rng)?;
        Ok(Self { cfg, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(cfg: SegBackboneConfig, params: ParamStore) -> Result<Self, ModelError> {
        let template = Self::new(cfg, 0)?;
        ensure_same_layout(&template.params, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &SegBackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Names of one head's parameters.
    pub fn head_param_names(head: &str) -> [String; 2] {
        [format!("{head}.weight"), format!("{head}.bias")]
    }

    /// Forward pass on `image[C,H,W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        image: Var,
        heads: Heads,
    ) -> Result<SegOutput, ModelError> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(ModelError::Config(format!(
                "expected image [{}, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(shape[1], shape[2])?;
        let encoded = unet::encode(tape, &self.params, binding, "seg", self.cfg.depth, image)?;
        let features = unet::decode(tape, &self.params, binding, "seg", &encoded)?;
        let mut head = |tape: &mut Tape, name: &str| -> Result<Var, ModelError> {
            let logits = unet::conv(tape, &self.params, binding, name, features, 0)?;
            Ok(tape.sigmoid(logits)?)
        };
        let primary_prob = match heads {
            Heads::Primary | Heads::Both => Some(head(tape, PRIMARY_HEAD)?),
            Heads::Auxiliary => None,
        };
        let auxiliary_prob = match heads {
            Heads::Auxiliary | Heads::Both => Some(head(tape, AUXILIARY_HEAD)?),
            Heads::Primary => None,
        };
        Ok(SegOutput {
            primary_prob,
            auxiliary_prob,
            shared_features: features,
        })
    }
}

/// Shared encoder over `[image; annotations]` and one sigmoid decoder per source.
#[derive(Debug, Clone, PartialEq)]
pub struct Auem {
    cfg: AuemConfig,
    params: ParamStore,
}

impl Auem {
    pub fn new(cfg: AuemConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        unet::add_encoder(
            &mut params,
            "auem",
            cfg.num_sources + 1,
            cfg.base_width,
            cfg.depth,
            &mut rng,
        )?;
        for m in 0..cfg.num_sources {
            let prefix = Self::decoder_prefix(m);
            unet::add_decoder(&mut params, &prefix, cfg.base_width, cfg.depth, &mut rng)?;
            unet::add_projection(
                &mut params,
                &format!("{prefix}.out"),
                cfg.base_width,
                &mut rng,
            )?;
        }
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: AuemConfig, params: ParamStore) -> Result<Self, ModelError> {
        let template = Self::new(cfg, 0)?;
        ensure_same_layout(&template.params, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn decoder_prefix(source: usize) -> String {
        format!("auem.src{source}")
    }

    pub fn config(&self) -> &AuemConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Uncertainty maps `[M,H,W]` for `image[1,H,W]` and `annotations[M,H,W]`;
    /// map `m` comes from decoder `m`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        image: Var,
        annotations: Var,
    ) -> Result<Var, ModelError> {
        let si = tape.shape(image).to_vec();
        let sa = tape.shape(annotations).to_vec();
        if sa.len() != 3 || sa[0] != self.cfg.num_sources {
            return Err(ModelError::Config(format!(
                "expected {} annotation maps, got shape {sa:?}",
                self.cfg.num_sources
            )));
        }
        if si.len() != 3 || si[0] != 1 || si[1..] != sa[1..] {
            return Err(ModelError::Config(format!(
                "image {si:?} does not match annotations {sa:?}"
            )));
        }
        check_extents(&si, self.cfg.depth)?;
        let input = tape.concat(image, annotations, 0)?;
        let encoded = unet::encode(tape, &self.params, binding, "auem", self.cfg.depth, input)?;
        let mut sigma: Option<Var> = None;
        for m in 0..self.cfg.num_sources {
            let prefix = Self::decoder_prefix(m);
            let features = unet::decode(tape, &self.params, binding, &prefix, &encoded)?;
            let logits = unet::conv(
                tape,
                &self.params,
                binding,
                &format!("{prefix}.out"),
                features,
                0,
            )?;
            let map = tape.sigmoid(logits)?;
            sigma = Some(match sigma {
                None => map,
                Some(acc) => tape.concat(acc, map, 0)?,
            });
        }
        Ok(sigma.expect("at least two sources"))
    }
}

fn ensure_same_layout(template: &ParamStore, actual: &ParamStore) -> Result<(), ModelError> {
    if template.names() != actual.names() {
        return Err(ModelError::Config(format!(
            "parameter set differs from configuration ({} expected, {} found)",
            template.len(),
            actual.len()
        )));
    }
    for ((name, a), (_, b)) in template.iter().zip(actual.iter()) {
        if a.shape() != b.shape() {
            return Err(ModelError::Config(format!(
                "{name}: expected shape {:?}, found {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

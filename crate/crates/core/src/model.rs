//! The full network: encoder followed by the condenser and smelter branches.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::condenser::{CondenserParams, CondenserVars};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{invalid, Result};
use crate::nn::{join, Module};
use crate::smelter::{AlignmentTriple, SmelterParams, SmelterShape, SmelterVars};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub spatial_width: usize,
    pub channel_reduction: usize,
    pub detail_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 4,
            proj_hidden: 640,
            proj_dim: 128,
            spatial_width: 4,
            channel_reduction: 4,
            detail_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.encoder.feature_shape().2
    }

    pub fn smelter_shape(&self) -> SmelterShape {
        SmelterShape {
            channels: self.channels(),
            classes: self.num_classes,
            spatial_width: self.spatial_width,
            reduction: self.channel_reduction,
            detail_dim: self.detail_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(invalid!(
                "need at least 2 training classes, got {}",
                self.num_classes
            ));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(invalid!("projection widths must be positive"));
        }
        let (h, w, _) = self.encoder.feature_shape();
        if h < 2 || w < 2 {
            return Err(invalid!(
                "feature maps are {h}x{w}; the smelter needs at least 2x2"
            ));
        }
        self.smelter_shape().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcnModel<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub condenser: CondenserParams<T>,
    pub smelter: SmelterParams<T>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub condenser: CondenserVars,
    pub smelter: SmelterVars,
}

/// Everything the training losses need from one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutput {
    pub features: Var,
    pub enhanced: Var,
    pub context: Var,
    pub detail: Var,
    pub context_logits: Var,
    pub detail_logits: Var,
    pub embedding: Var,
    pub triple: AlignmentTriple,
}

/// Frozen-network outputs used at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFeatures<T> {
    /// `Z_c`, length `c`.
    pub context: Vec<T>,
    /// Global average of `Z_d`, length `c`.
    pub detail: Vec<T>,
}

impl<T: Real> DcnModel<T> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels();
        let encoder = EncoderParams::init(&config.encoder, rng);
        let condenser = CondenserParams::init(
            c,
            config.num_classes,
            config.proj_hidden,
            config.proj_dim,
            rng,
        );
        let smelter = SmelterParams::init(config.smelter_shape(), rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            condenser,
            smelter,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut m = Self::init(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        m.zero_parameters();
        Ok(m)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape, &self.config.encoder),
            condenser: self.condenser.bind(tape),
            smelter: self.smelter.bind(tape),
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> DcnModel<U> {
        let mut out = DcnModel::<U>::zeros(&self.config).expect("config already validated");
        let mut src = Vec::new();
        self.visit("", &mut |_, t| src.push(t));
        let mut i = 0;
        out.visit_mut("", &mut |_, t| {
            *t = src[i].cast();
            i += 1;
        });
        out
    }

    /// Inference-only forward pass.
    pub fn features(&self, image: &Tensor<T>) -> Result<EvalFeatures<T>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let x = tape.constant(image.clone());
        let z = vars.encoder.encode(&mut tape, x)?;
        let cond = vars.condenser.condense(&mut tape, z)?;
        let smelt = vars.smelter.smelt(&mut tape, z)?;
        let pooled = tape.global_avg_pool(smelt.detail)?;
        Ok(EvalFeatures {
            context: tape.value(cond.context).data().to_vec(),
            detail: tape.value(pooled).data().to_vec(),
        })
    }
}

impl<T: Real> Module<T> for DcnModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.condenser.visit(&join(prefix, "condenser"), f);
        self.smelter.visit(&join(prefix, "smelter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.condenser.visit_mut(&join(prefix, "condenser"), f);
        self.smelter.visit_mut(&join(prefix, "smelter"), f);
    }
}

impl ModelVars {
    pub fn forward_view<T: Real>(&self, tape: &mut Tape<T>, image: Var) -> Result<ViewOutput> {
        let features = self.encoder.encode(tape, image)?;
        let cond = self.condenser.condense(tape, features)?;
        let smelt = self.smelter.smelt(tape, features)?;
        let context_logits = self.condenser.context_logits(tape, cond.context)?;
        let detail_logits = self.smelter.detail_logits(tape, smelt.detail)?;
        let embedding = self.condenser.project_context(tape, cond.context)?;
        let triple = self.smelter.project_detail(tape, smelt.detail)?;
        Ok(ViewOutput {
            features,
            enhanced: cond.enhanced,
            context: cond.context,
            detail: smelt.detail,
            context_logits,
            detail_logits,
            embedding,
            triple,
        })
    }

    /// Parameter leaves in `Module::visit` order.
    pub fn push_vars(&self, out: &mut Vec<Var>) {
        self.encoder.push_vars(out);
        self.condenser.push_vars(out);
        self.smelter.push_vars(out);
    }
}

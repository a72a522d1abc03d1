//! The full set of networks of one model and its description.

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{parse_arch, LayerGraph, LOCAL_ENHANCER_FUSION};
use crate::data::{build_conditioning_pair, InstanceMap, LabelMap, StyleVector, FEATURE_PLANES};
use crate::discriminator::{discriminator_graph, MultiScaleDiscriminator, DEFAULT_SCALES};
use crate::error::ModelError;
use crate::feature_encoder::{instance_vectors, Encoder};
use crate::generator::{ComposedGenerator, GeneratorMode, GlobalGenerator, LocalEnhancer};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Width-scaled architecture strings as stored in a bundle manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchStrings {
    pub global_generator: String,
    pub local_enhancer: Option<String>,
    pub discriminator: String,
    pub encoder: Option<String>,
}

/// Everything needed to rebuild the networks of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_classes: usize,
    pub width_divisor: usize,
    pub generator_mode: GeneratorMode,
    pub discriminator_scales: usize,
    pub use_instance_maps: bool,
    pub use_encoder: bool,
    pub arch: ArchStrings,
}

impl ModelSpec {
    /// Standard architectures scaled by `width_divisor`.
    pub fn standard(
        num_classes: usize,
        width_divisor: usize,
        generator_mode: GeneratorMode,
        discriminator_scales: usize,
        use_instance_maps: bool,
        use_encoder: bool,
    ) -> Result<Self, ModelError> {
        let g = ComposedGenerator::build(num_classes + 1, width_divisor, generator_mode)?;
        let arch = ArchStrings {
            global_generator: g.g1.net.graph.to_string(),
            local_enhancer: g.g2.as_ref().map(|e| e.net.graph.to_string()),
            discriminator: discriminator_graph(width_divisor)?.to_string(),
            encoder: use_encoder.then(|| Encoder::new(width_divisor).map(|e| e.net.graph.to_string())).transpose()?,
        };
        Ok(Self { num_classes, width_divisor, generator_mode, discriminator_scales, use_instance_maps, use_encoder, arch })
    }

    pub fn desk(num_classes: usize) -> Self {
        Self::standard(num_classes, 4, GeneratorMode::Composed, DEFAULT_SCALES, true, true).expect("standard architectures parse")
    }

    /// One-hot planes plus the boundary plane.
    pub fn label_planes(&self) -> usize {
        self.num_classes + 1
    }

    pub fn generator_input_planes(&self) -> usize {
        self.label_planes() + if self.use_encoder { FEATURE_PLANES } else { 0 }
    }

    pub fn discriminator_input_planes(&self) -> usize {
        self.label_planes() + 3
    }
}

/// Networks built from a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub spec: ModelSpec,
    pub generator: ComposedGenerator,
    pub discriminator: MultiScaleDiscriminator,
    pub encoder: Option<Encoder>,
}

impl Models {
    pub fn build(spec: &ModelSpec) -> Result<Self, ModelError> {
        let gin = spec.generator_input_planes();
        let g1 = GlobalGenerator::from_graph(parse_arch(&spec.arch.global_generator)?, gin)?;
        let g2 = match (&spec.arch.local_enhancer, spec.generator_mode) {
            (Some(s), GeneratorMode::Composed) => {
                Some(LocalEnhancer::from_graph(parse_arch(s)?.with_fusion_point(LOCAL_ENHANCER_FUSION)?, gin)?)
            }
            (None, GeneratorMode::GlobalOnly) => None,
            _ => return Err(ModelError::Invalid("generator mode and enhancer architecture disagree".into())),
        };
        let generator = ComposedGenerator::new(g1, g2)?;
        let discriminator = MultiScaleDiscriminator::from_graph(
            parse_arch(&spec.arch.discriminator)?,
            spec.discriminator_input_planes(),
            spec.discriminator_scales,
        )?;
        let encoder = match (&spec.arch.encoder, spec.use_encoder) {
            (Some(s), true) => Some(Encoder::from_graph(parse_arch(s)?)?),
            (None, false) => None,
            _ => return Err(ModelError::Invalid("encoder flag and encoder architecture disagree".into())),
        };
        if let Some(e) = &encoder {
            if e.output_planes() != FEATURE_PLANES {
                return Err(ModelError::PlaneMismatch { what: "encoder output", expected: FEATURE_PLANES, found: e.output_planes() });
            }
        }
        Ok(Self { spec: spec.clone(), generator, discriminator, encoder })
    }

    /// Build from explicit graphs (used for small test models).
    pub fn from_graphs(
        spec: &ModelSpec,
        global: LayerGraph,
        enhancer: Option<LayerGraph>,
        discriminator: LayerGraph,
        encoder: Option<LayerGraph>,
    ) -> Result<Self, ModelError> {
        let mut spec = spec.clone();
        spec.arch = ArchStrings {
            global_generator: global.to_string(),
            local_enhancer: enhancer.as_ref().map(ToString::to_string),
            discriminator: discriminator.to_string(),
            encoder: encoder.as_ref().map(ToString::to_string),
        };
        spec.generator_mode = if enhancer.is_some() { GeneratorMode::Composed } else { GeneratorMode::GlobalOnly };
        spec.use_encoder = encoder.is_some();
        Self::build(&spec)
    }

    /// Name and shape of every parameter: generator, discriminators, encoder.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.generator.param_shapes();
        v.extend(self.discriminator.param_shapes());
        if let Some(e) = &self.encoder {
            v.extend(e.net.param_shapes());
        }
        v
    }

    /// Gaussian weights and zero biases for every network, deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = self.generator.init_params(&mut rng);
        store.extend(self.discriminator.init_params(&mut rng));
        if let Some(e) = &self.encoder {
            store.extend(e.net.init_params(&mut rng));
        }
        store
    }

    /// Synthesize one `3 x H x W` image. Models with an encoder need a style
    /// vector for every instance; models without one ignore `styles`.
    pub fn synthesize<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        label: &LabelMap,
        instance: &InstanceMap,
        styles: Option<&BTreeMap<u16, StyleVector>>,
    ) -> Result<Array3<T>, ModelError> {
        if label.num_classes() != self.spec.num_classes {
            return Err(ModelError::Invalid(format!(
                "label map has {} classes, model expects {}",
                label.num_classes(),
                self.spec.num_classes
            )));
        }
        let styles = match (self.spec.use_encoder, styles) {
            (true, None) => return Err(ModelError::Invalid("model conditions on style vectors but none were given".into())),
            (true, s) => s,
            (false, _) => None,
        };
        let (mut full, mut half) = build_conditioning_pair::<T>(label, instance, styles)?;
        if !self.spec.use_instance_maps {
            full = full.without_boundary();
            half = half.without_boundary();
        }
        let full = full.planes.insert_axis(Axis(0));
        let half = half.planes.insert_axis(Axis(0));
        let out = self.generator.generate(store, &full, &half)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Per-instance style vectors the encoder assigns to a real image.
    pub fn encode_styles<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Array3<T>,
        instance: &InstanceMap,
    ) -> Result<BTreeMap<u16, StyleVector>, ModelError> {
        let enc = self.encoder.as_ref().ok_or_else(|| ModelError::Invalid("model has no encoder".into()))?;
        let pooled = enc.encode_pooled(store, &image.clone().insert_axis(Axis(0)), std::slice::from_ref(instance))?;
        Ok(instance_vectors(pooled.index_axis(Axis(0), 0), instance))
    }

    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), ModelError> {
        self.generator.check_params(store)?;
        self.discriminator.check_params(store)?;
        if let Some(e) = &self.encoder {
            e.net.check_params(store)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_strings_round_trip() {
        let spec = ModelSpec::desk(4);
        let models = Models::build(&spec).unwrap();
        assert_eq!(models.generator.g1.net.graph.to_string(), spec.arch.global_generator);
        assert_eq!(models.generator.g1.net.graph, parse_arch(&spec.arch.global_generator).unwrap());
        assert_eq!(models.discriminator.nets[0].graph.receptive_field(), 70);
        assert_eq!(models.discriminator.taps(), 5);
        let fresh = ComposedGenerator::build(spec.generator_input_planes(), 4, GeneratorMode::Composed).unwrap();
        assert_eq!(models.generator, fresh);
    }

    #[test]
    fn init_is_deterministic() {
        let models = Models::build(&ModelSpec::desk(4)).unwrap();
        let a = models.init_params::<f32>(3);
        assert_eq!(a, models.init_params::<f32>(3));
        assert_ne!(a, models.init_params::<f32>(4));
        models.check_params(&a).unwrap();
    }
}

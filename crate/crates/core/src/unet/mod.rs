//! Miniature conditional latent-diffusion UNet organised as blocks of layers,
//! each layer a ResNet unit optionally followed by a Transformer unit.

mod condconv;
mod model;
mod params;
mod spec;

pub use condconv::CondConvUnit;
pub use model::{
    build_unet, timestep_embed, BoundParams, ForwardReport, Taps, UNetModel, NORM_EPS,
};
pub use params::{layer_prefix, ParamStore, EXPERT0_BIAS};
pub use spec::{
    ArchConfig, BlockId, BlockIo, BlockSpec, CondConvSpec, LayerIo, LayerSpec, Part,
    ResNetUnitSpec, Resample, SkipSource, Topology, TransformerUnitSpec, UNetSpec,
};

pub(crate) use params::{inventory, Init, ParamDef};

impl UNetModel {
    /// The CondConv unit behind `{block}.l{layer_id}.resnet.{conv}` where
    /// `conv` is `conv1` or `conv2`, if that layer is CondConv-augmented.
    pub fn condconv_unit(
        &self,
        block: BlockId,
        layer_id: usize,
        conv: &str,
    ) -> Option<CondConvUnit> {
        let p = format!("{}.resnet.{conv}", layer_prefix(block, layer_id));
        let get = |s: &str| self.params().get(&format!("{p}.{s}")).cloned();
        CondConvUnit::new(
            get("experts")?,
            get("bias")?,
            get("router.weight")?,
            get("router.bias")?,
        )
        .ok()
    }
}

#[cfg(test)]
pub(crate) mod tests;

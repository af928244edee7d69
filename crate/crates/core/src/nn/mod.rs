//! Layers and the composite blocks the segmentation network is assembled from.

mod backbone;
mod blocks;
mod layers;

pub use backbone::{Backbone, BackboneBlock, BackboneConfig, BlockKind, StageConfig, StemConfig};
pub use blocks::{
    BottleneckBlock, ClassifierHead, InitBlock, PspConfig, PspHead, ResidualBlock, SeResNetBlock,
    SeResNetConfig,
};
pub use layers::{he_std, BatchNorm2d, Conv2d, Linear};

use crate::tensor::{Buffer, Float, Parameter};

/// Anything that owns named parameters (and possibly buffers).
pub trait Module<T: Float> {
    fn parameters(&self) -> Vec<&Parameter<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    /// Number of scalars over all parameters.
    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Concatenates the parameter lists of child modules.
macro_rules! delegate_module {
    ($ty:ident, [$($field:ident),*] $(, opt [$($opt:ident),*])?) => {
        impl<T: Float> Module<T> for $ty<T> {
            fn parameters(&self) -> Vec<&Parameter<T>> {
                let mut out = Vec::new();
                $(out.extend(self.$field.parameters());)*
                $($(if let Some(m) = &self.$opt { out.extend(m.parameters()); })*)?
                out
            }

            fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
                let mut out = Vec::new();
                $(out.extend(self.$field.parameters_mut());)*
                $($(if let Some(m) = &mut self.$opt { out.extend(m.parameters_mut()); })*)?
                out
            }

            fn buffers(&self) -> Vec<&Buffer<T>> {
                let mut out = Vec::new();
                $(out.extend(self.$field.buffers());)*
                $($(if let Some(m) = &self.$opt { out.extend(m.buffers()); })*)?
                out
            }
        }
    };
}
pub(crate) use delegate_module;

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.iter().flat_map(|m| m.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().flat_map(|m| m.parameters_mut()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.iter().flat_map(|m| m.buffers()).collect()
    }
}

impl<T: Float, A: Module<T>, B: Module<T>> Module<T> for (A, B) {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = self.0.parameters();
        out.extend(self.1.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.0.parameters_mut();
        out.extend(self.1.parameters_mut());
        out
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.0.buffers();
        out.extend(self.1.buffers());
        out
    }
}

//! Function approximators for both scenarios.
//!
//! Convolutional networks run their 3-D convolutions (kernel depth 1 along
//! time) as 2-D convolutions over a `[B·T, C, H, W]` batch; the flatten
//! after the trunk regroups that into `[B, T·C·h·w]`.

use crate::error::NetworkError;

/// Implements [`Module`] for a struct by delegating to the listed fields,
/// each stored under its field name.
macro_rules! composite_module {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T: Real> Module<T> for $ty<T> {
            fn params(&self) -> Vec<&Param<T>> {
                let mut out = Vec::new();
                $(out.extend(self.$field.params());)+
                out
            }

            fn params_mut(&mut self) -> Vec<&mut Param<T>> {
                let mut out = Vec::new();
                $(out.extend(self.$field.params_mut());)+
                out
            }

            fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
                $(self.$field.save_state(&join(prefix, stringify!($field)), out);)+
            }

            fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
                $(self.$field.load_state(&join(prefix, stringify!($field)), src)?;)+
                Ok(())
            }
        }
    };
}

mod checkpoint;
mod mlp;
mod observation;
mod qnet;
mod vae;

pub use checkpoint::Checkpoint;
pub use mlp::{transition_input, EfeValueNet, Mlp, PolicyNet, QMlp, TransitionNet};
pub use observation::{stacks_to_batch, FrameHistory, LatentBelief, ObservationStack, STACK_LEN};
pub use qnet::ConvQNet;
pub use vae::{ConvTrunk, Decoder, Encoder, Vae};

/// Layer sizes of the pixel-based networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PomdpArch {
    /// `[C, H, W]` of one frame.
    pub frame: [usize; 3],
    pub stack: usize,
    /// Output channels of the three trunk convolutions.
    pub conv_channels: [usize; 3],
    /// Output channels of the three decoder transposed convolutions.
    pub deconv_channels: [usize; 3],
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub fc_hidden: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    pub actions: usize,
}

impl Default for PomdpArch {
    fn default() -> Self {
        PomdpArch {
            frame: [3, 37, 85],
            stack: 4,
            conv_channels: [16, 32, 32],
            deconv_channels: [16, 3, 3],
            kernel: (5, 5),
            stride: (2, 2),
            fc_hidden: 1024,
            latent: 32,
            mlp_hidden: 64,
            actions: 2,
        }
    }
}

impl PomdpArch {
    /// Four-latent clone on 3×9×9×4 stacks, small enough for
    /// finite-difference checks.
    pub fn miniature() -> Self {
        PomdpArch {
            frame: [3, 9, 9],
            stack: 4,
            conv_channels: [2, 3, 2],
            deconv_channels: [3, 2, 3],
            kernel: (3, 3),
            stride: (1, 1),
            fc_hidden: 6,
            latent: 4,
            mlp_hidden: 5,
            actions: 2,
        }
    }

    /// `[C, H, W]` at the input and after each trunk convolution.
    pub fn trunk_shapes(&self) -> Result<[[usize; 3]; 4], NetworkError> {
        let mut shapes = [self.frame; 4];
        for i in 0..3 {
            let [_, h, w] = shapes[i];
            let (oh, ow) = efe_autodiff::conv::ConvGeometry::conv_output(h, w, self.kernel, self.stride)
                .ok_or_else(|| NetworkError::Format(format!("kernel {:?} does not fit a {h}×{w} input", self.kernel)))?;
            shapes[i + 1] = [self.conv_channels[i], oh, ow];
        }
        Ok(shapes)
    }

    /// Length of the flattened trunk output per stack.
    pub fn flatten_len(&self) -> usize {
        let [c, h, w] = self.trunk_shapes().expect("valid architecture")[3];
        self.stack * c * h * w
    }

    /// `[C, H, W, T]` of one observation stack.
    pub fn stack_shape(&self) -> [usize; 4] {
        [self.frame[0], self.frame[1], self.frame[2], self.stack]
    }

    pub fn stack_len(&self) -> usize {
        self.stack_shape().iter().product()
    }

    pub fn belief_dim(&self) -> usize {
        2 * self.latent
    }

    /// Checks that the trunk fits the frame and that the decoder restores it.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let shapes = self.trunk_shapes()?;
        let [_, mut h, mut w] = shapes[3];
        for _ in 0..3 {
            (h, w) = efe_autodiff::conv::ConvGeometry::transposed_output(h, w, self.kernel, self.stride);
        }
        let restored = [self.deconv_channels[2], h, w];
        if restored != self.frame {
            return Err(NetworkError::Format(format!("decoder produces {restored:?}, frame is {:?}", self.frame)));
        }
        Ok(())
    }
}

/// Layer sizes of the state-based networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdpArch {
    pub state_dim: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl Default for MdpArch {
    fn default() -> Self {
        MdpArch { state_dim: 4, hidden: 64, actions: 2 }
    }
}

//! Sliding-window inference with a trained artifact-removal generator.

use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use mar3d_core::translate::{TranslateError, WindowTranslator};

use crate::nets::{Generator, ModelConfig};
use crate::training::{TrainError, TrainState};

/// Wraps `G_Y`. Inputs whose in-plane size is not a multiple of the
/// network's pooling factor are edge-padded and cropped back.
#[derive(Clone, Debug)]
pub struct GeneratorTranslator {
    generator: Generator<f32>,
}

impl GeneratorTranslator {
    pub fn new(generator: Generator<f32>) -> Self {
        Self { generator }
    }

    /// Loads `G_Y` from a training checkpoint. With `expected_slices`, a
    /// checkpoint trained on a different window size is rejected.
    pub fn from_checkpoint(path: impl AsRef<Path>, expected_slices: Option<usize>) -> Result<Self, TrainError> {
        let state = TrainState::load(path, None)?;
        if let Some(n) = expected_slices {
            if n != state.config.model.n_slices {
                return Err(TrainError::Config(format!(
                    "checkpoint was trained with {} slices per window, {n} requested",
                    state.config.model.n_slices
                )));
            }
        }
        Ok(Self::new(state.nets.g_y))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_slices: self.generator.n_channels(),
            generator: self.generator.config().clone(),
            ..ModelConfig::default()
        }
    }

    fn multiple(&self) -> usize {
        1 << (self.generator.config().depth - 1)
    }
}

fn edge_pad(window: ArrayView3<f32>, ph: usize, pw: usize) -> Array3<f32> {
    let (n, h, w) = window.dim();
    Array3::from_shape_fn((n, ph, pw), |(c, i, j)| window[[c, i.min(h - 1), j.min(w - 1)]])
}

impl WindowTranslator for GeneratorTranslator {
    fn n_channels(&self) -> usize {
        self.generator.n_channels()
    }

    fn translate_window(&mut self, window: ArrayView3<f32>) -> Result<Array3<f32>, TranslateError> {
        let (n, h, w) = window.dim();
        if n != self.n_channels() {
            return Err(TranslateError::ChannelMismatch {
                expected: self.n_channels(),
                actual: n,
            });
        }
        let m = self.multiple();
        let ph = h.div_ceil(m) * m;
        let pw = w.div_ceil(m) * m;
        let padded = if (ph, pw) == (h, w) {
            window.to_owned()
        } else {
            edge_pad(window, ph, pw)
        };
        let batch: Array4<f32> = padded.insert_axis(Axis(0));
        let out = self
            .generator
            .forward(&batch)
            .map_err(|e| TranslateError::Generator(Box::new(e)))?;
        Ok(out.slice(s![0, .., ..h, ..w]).to_owned())
    }
}

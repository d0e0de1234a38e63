use serde::{Deserialize, Serialize};

use super::{ArchitectureDescriptor, LayerSpec};
use crate::NnError;

/// Hyperparameters of the ST-LSTM stack. The first six fields are the
/// tunable ones; kernel sizes and scaling are fixed configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StLstmConfig {
    pub convlstm_maps: [usize; 4],
    pub conv3d_maps: usize,
    pub fc_neurons: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    #[serde(default = "default_lstm_kernel")]
    pub convlstm_kernel: (usize, usize),
    #[serde(default = "default_conv3d_kernel")]
    pub conv3d_kernel: [usize; 3],
    /// Apply `x / 127.5 - 1` at the input. Off for samples that the data
    /// pipeline has already scaled to `[-1, 1]`.
    #[serde(default)]
    pub pixel_scaling: bool,
}

fn default_lstm_kernel() -> (usize, usize) {
    (3, 3)
}

fn default_conv3d_kernel() -> [usize; 3] {
    [3, 3, 3]
}

impl Default for StLstmConfig {
    /// Smallest level of every tunable hyperparameter.
    fn default() -> Self {
        Self {
            convlstm_maps: [4, 4, 4, 4],
            conv3d_maps: 1,
            fc_neurons: 5,
            dropout_rate: 0.0,
            learning_rate: 1e-3,
            convlstm_kernel: default_lstm_kernel(),
            conv3d_kernel: default_conv3d_kernel(),
            pixel_scaling: false,
        }
    }
}

impl StLstmConfig {
    fn validate(&self) -> Result<(), NnError> {
        if self.convlstm_maps.contains(&0) || self.conv3d_maps == 0 || self.fc_neurons == 0 {
            return Err(NnError::Config("feature-map and neuron counts must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!("dropout {} outside [0, 0.5]", self.dropout_rate)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.conv3d_kernel.iter().any(|k| k % 2 == 0) {
            return Err(NnError::Config("Conv3D kernel extents must be odd".into()));
        }
        Ok(())
    }
}

/// Normalization, four ConvLSTM + batch-norm blocks, a same-padded 3-D
/// convolution, 2×2×2 max pooling, a hidden dense layer, dropout and the
/// scalar output.
pub fn build_stlstm(cfg: &StLstmConfig, input_shape: [usize; 4]) -> Result<ArchitectureDescriptor, NnError> {
    cfg.validate()?;
    let mut layers = vec![LayerSpec::Normalize { pixel_scaling: cfg.pixel_scaling }, LayerSpec::FramesChannelsFirst];
    for &filters in &cfg.convlstm_maps {
        layers.push(LayerSpec::ConvLstm { filters, kernel: cfg.convlstm_kernel, return_sequence: true });
        layers.push(LayerSpec::BatchNorm { axis: 1 });
    }
    let k = cfg.conv3d_kernel;
    layers.extend([
        LayerSpec::Conv3d {
            filters: cfg.conv3d_maps,
            kernel: k,
            stride: [1, 1, 1],
            padding: [k[0] / 2, k[1] / 2, k[2] / 2],
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: vec![2, 2, 2] },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: cfg.fc_neurons },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: cfg.dropout_rate },
        LayerSpec::Dense { units: 1 },
    ]);
    let desc = ArchitectureDescriptor { name: "stlstm".into(), input_shape, layers };
    check_shapes(&desc)?;
    Ok(desc)
}

/// Closed-form trainable-parameter count of [`build_stlstm`].
pub fn stlstm_param_count(cfg: &StLstmConfig, input_shape: [usize; 4]) -> usize {
    let [t, h, w, c] = input_shape;
    let (kh, kw) = cfg.convlstm_kernel;
    let mut cin = c;
    let mut total = 0;
    for &f in &cfg.convlstm_maps {
        total += 4 * f * cin * kh * kw + 4 * f * f * kh * kw + 3 * f * h * w + 4 * f;
        total += 2 * f;
        cin = f;
    }
    let k3: usize = cfg.conv3d_kernel.iter().product();
    total += cfg.conv3d_maps * cin * k3 + cfg.conv3d_maps;
    let flat = cfg.conv3d_maps * (t / 2) * (h / 2) * (w / 2);
    total += cfg.fc_neurons * flat + cfg.fc_neurons;
    total += cfg.fc_neurons + 1;
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotNetConfig {
    /// Three 5×5 stride-2 convolutions, then two 3×3 unit-stride ones.
    pub conv_maps: [usize; 5],
    pub dense_units: [usize; 3],
    pub pixel_scaling: bool,
}

impl Default for PilotNetConfig {
    fn default() -> Self {
        Self { conv_maps: [24, 36, 48, 64, 64], dense_units: [100, 50, 10], pixel_scaling: false }
    }
}

pub fn build_pilotnet(cfg: &PilotNetConfig, input_shape: [usize; 4]) -> Result<ArchitectureDescriptor, NnError> {
    let mut layers = vec![LayerSpec::Normalize { pixel_scaling: cfg.pixel_scaling }, LayerSpec::LastFrame];
    for (i, &filters) in cfg.conv_maps.iter().enumerate() {
        let (kernel, stride) = if i < 3 { ([5, 5], [2, 2]) } else { ([3, 3], [1, 1]) };
        layers.push(LayerSpec::Conv2d { filters, kernel, stride, padding: [0, 0] });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Flatten);
    for &units in &cfg.dense_units {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: 1 });
    let desc = ArchitectureDescriptor { name: "pilotnet".into(), input_shape, layers };
    check_shapes(&desc)?;
    Ok(desc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JNetConfig {
    pub conv_maps: [usize; 3],
    pub conv_kernels: [usize; 3],
    /// Width of the last hidden fully connected layer.
    pub dense_units: usize,
    pub pixel_scaling: bool,
}

impl Default for JNetConfig {
    fn default() -> Self {
        Self { conv_maps: [16, 32, 64], conv_kernels: [5, 5, 3], dense_units: 10, pixel_scaling: false }
    }
}

/// Three convolutions each followed by 2×2 max pooling, one hidden dense
/// layer and the output.
pub fn build_jnet(cfg: &JNetConfig, input_shape: [usize; 4]) -> Result<ArchitectureDescriptor, NnError> {
    let mut layers = vec![LayerSpec::Normalize { pixel_scaling: cfg.pixel_scaling }, LayerSpec::LastFrame];
    for (&filters, &k) in cfg.conv_maps.iter().zip(&cfg.conv_kernels) {
        layers.push(LayerSpec::Conv2d { filters, kernel: [k, k], stride: [1, 1], padding: [0, 0] });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { window: vec![2, 2] });
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: cfg.dense_units },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 1 },
    ]);
    let desc = ArchitectureDescriptor { name: "jnet".into(), input_shape, layers };
    check_shapes(&desc)?;
    Ok(desc)
}

/// Runs the shape algebra without keeping the weights.
fn check_shapes(desc: &ArchitectureDescriptor) -> Result<(), NnError> {
    super::Network::from_descriptor(desc, 0).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;
    use crate::ops::Mode;
    use crate::Tensor;

    #[test]
    fn toy_stlstm_forward_yields_scalar() {
        let desc = build_stlstm(&StLstmConfig::default(), [3, 16, 32, 1]).unwrap();
        let net = Network::from_descriptor(&desc, 1).unwrap();
        let (y, _) = net.forward_stateless(&Tensor::full(&[2, 3, 16, 32, 1], 0.3), Mode::Eval, 0).unwrap();
        assert_eq!(y.len(), 2);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfgs = [
            (StLstmConfig::default(), [3, 16, 32, 1]),
            (
                StLstmConfig {
                    convlstm_maps: [8, 10, 16, 4],
                    conv3d_maps: 3,
                    fc_neurons: 25,
                    ..StLstmConfig::default()
                },
                [3, 10, 12, 3],
            ),
        ];
        for (cfg, shape) in cfgs {
            let net = Network::from_descriptor(&build_stlstm(&cfg, shape).unwrap(), 0).unwrap();
            assert_eq!(net.param_count(), stlstm_param_count(&cfg, shape));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let desc = build_stlstm(&StLstmConfig::default(), [3, 8, 8, 1]).unwrap();
        let a = Network::from_descriptor(&desc, 5).unwrap();
        let b = Network::from_descriptor(&desc, 5).unwrap();
        let c = Network::from_descriptor(&desc, 6).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn too_small_input_for_pooling_fails() {
        assert!(build_stlstm(&StLstmConfig::default(), [1, 8, 8, 1]).is_err());
        assert!(build_stlstm(&StLstmConfig::default(), [3, 1, 8, 1]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_fail() {
        let cfg = StLstmConfig { dropout_rate: 0.7, ..StLstmConfig::default() };
        assert!(build_stlstm(&cfg, [3, 8, 8, 1]).is_err());
    }

    #[test]
    fn pilotnet_on_full_frame() {
        let desc = build_pilotnet(&PilotNetConfig::default(), [3, 66, 200, 1]).unwrap();
        let convs = desc.layers.iter().filter(|l| matches!(l, LayerSpec::Conv2d { .. })).count();
        let denses = desc.layers.iter().filter(|l| matches!(l, LayerSpec::Dense { .. })).count();
        assert_eq!((convs, denses), (5, 4));
        let net = Network::from_descriptor(&desc, 0).unwrap();
        let (y, _) = net.forward_stateless(&Tensor::full(&[1, 3, 66, 200, 1], 0.1), Mode::Eval, 0).unwrap();
        assert_eq!(y.len(), 1);
        assert!(build_pilotnet(&PilotNetConfig::default(), [3, 16, 32, 1]).is_err());
    }

    #[test]
    fn jnet_structure() {
        let desc = build_jnet(&JNetConfig::default(), [3, 66, 200, 1]).unwrap();
        let pools = desc.layers.iter().filter(|l| matches!(l, LayerSpec::MaxPool { .. })).count();
        assert_eq!(pools, 3);
        let widths: Vec<usize> = desc
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![10, 1]);
        let a = Network::from_descriptor(&desc, 2).unwrap();
        let x = Tensor::full(&[1, 3, 66, 200, 1], -0.2);
        let (p, _) = a.forward_stateless(&x, Mode::Eval, 0).unwrap();
        let (q, _) = a.forward_stateless(&x, Mode::Eval, 0).unwrap();
        assert_eq!(p, q);
    }
}

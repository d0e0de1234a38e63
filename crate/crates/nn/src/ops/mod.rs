//! Differentiable layer kernels. Each forward returns whatever the matching
//! backward needs; there is no global tape.

pub mod adam;
pub mod conv;
pub mod convlstm;
pub mod dense;
pub mod norm;
pub mod pool;

pub use adam::{adam_step, AdamState};
pub use conv::{conv2d, conv2d_backward, conv3d, conv3d_backward, ConvGrads};
pub use convlstm::{convlstm_cell, convlstm_cell_backward, convlstm_layer, convlstm_layer_backward, ConvLstmParams};
pub use dense::{dense, dense_backward, dropout, dropout_backward, mse_loss, relu, relu_backward, DropoutMask};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormState};
pub use pool::{maxpool, maxpool_backward, PoolCache};

/// Train/eval switch for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

use std::path::PathBuf;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use steerbo_nn::gradcheck::{convlstm_zero_weight_residual, grad_check, op_suite};
use steerbo_nn::model::{
    build_jnet, build_pilotnet, build_stlstm, ArchitectureDescriptor, JNetConfig, Network, PilotNetConfig, StLstmConfig,
};
use steerbo_nn::Tensor;

use crate::config::{prepare_output, resolve_seed};
use crate::{write_json, CliError};

/// Largest relative error a gradient check may report.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `gradcheck.json` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_batch(n: usize, shape: [usize; 4], rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<f64>), CliError> {
    let len = n * shape.iter().product::<usize>();
    let mut full = vec![n];
    full.extend(shape);
    let x = Tensor::new(&full, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let y = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Ok((x, y))
}

/// Small instances of each architecture, sized so finite differences over
/// every weight stay quick.
pub fn probe_networks() -> Result<Vec<ArchitectureDescriptor>, CliError> {
    let stlstm = StLstmConfig {
        convlstm_maps: [2, 2, 2, 2],
        conv3d_maps: 1,
        fc_neurons: 3,
        dropout_rate: 0.25,
        ..StLstmConfig::default()
    };
    let pilotnet = PilotNetConfig { conv_maps: [2, 2, 2, 2, 2], dense_units: [3, 3, 3], pixel_scaling: false };
    let jnet = JNetConfig { conv_maps: [2, 2, 2], conv_kernels: [3, 3, 3], dense_units: 3, pixel_scaling: false };
    Ok(vec![
        build_stlstm(&stlstm, [3, 4, 6, 1])?,
        build_pilotnet(&pilotnet, [3, 61, 61, 1])?,
        build_jnet(&jnet, [3, 22, 22, 1])?,
    ])
}

/// Zero-initialized biases can leave pre-activations exactly on a ReLU
/// kink, where central differences and the subgradient disagree.
fn offset_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    let names = net.param_names();
    for (name, p) in names.iter().zip(net.params_mut()) {
        if name.ends_with("bias") {
            p.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(0.05..0.2));
        }
    }
}

pub fn suite(seed: u64) -> Result<Vec<CheckResult>, CliError> {
    let mut out = Vec::new();
    let mut push = |name: String, value: f64, tolerance: f64| {
        out.push(CheckResult { name, value, tolerance, passed: value < tolerance });
    };
    push("convlstm_zero_weight_closed_form".into(), convlstm_zero_weight_residual(seed)?, 1e-12);
    for op in op_suite(seed)? {
        push(format!("op/{}", op.op), op.max_rel_error, TOLERANCE);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for desc in probe_networks()? {
        let mut net = Network::from_descriptor(&desc, seed)?;
        offset_biases(&mut net, &mut rng);
        let (x, y) = random_batch(2, desc.input_shape, &mut rng)?;
        let report = grad_check(&net, &x, &y, STEP, seed)?;
        push(format!("network/{}", desc.name), report.max_rel_error, TOLERANCE);
    }
    Ok(out)
}

pub fn run(args: GradcheckArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, None)?;
    let results = suite(seed)?;
    for r in &results {
        println!("{:<40} {:>12.3e}  {}", r.name, r.value, if r.passed { "ok" } else { "FAILED" });
    }
    if let Some(dir) = &args.out {
        prepare_output(dir)?;
        write_json(&dir.join("gradcheck.json"), &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

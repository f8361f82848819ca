//! U-shaped encoder/decoder blocks shared by the segmentation backbone and
//! the uncertainty estimator.

use rand::Rng;

use super::params::{Binding, ParamStore};
use super::ModelError;
use crate::autodiff::{Tape, Var};

/// Channel count at `level` (0 = full resolution).
pub(crate) fn width_at(base: usize, level: usize) -> usize {
    base << level
}

fn add_conv(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    let fan_in = (c_in * k * k) as f64;
    let bound = (3.0 * gain / fan_in).sqrt();
    store.insert_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng)?;
    store.insert(
        format!("{name}.bias"),
        crate::autodiff::Tensor::zeros(&[c_out]),
    )
}

/// Kaiming-uniform bound for ReLU layers: `sqrt(6 / fan_in)`.
const RELU_GAIN: f64 = 2.0;
/// Output projections feed a sigmoid, no ReLU correction.
pub(crate) const LINEAR_GAIN: f64 = 1.0;

fn add_block(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    add_conv(
        store,
        &format!("{prefix}.conv1"),
        c_in,
        c_out,
        3,
        RELU_GAIN,
        rng,
    )?;
    add_conv(
        store,
        &format!("{prefix}.conv2"),
        c_out,
        c_out,
        3,
        RELU_GAIN,
        rng,
    )
}

pub(crate) fn add_projection(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    add_conv(store, name, c_in, 1, 1, LINEAR_GAIN, rng)
}

/// Parameters for `depth` encoder levels plus the bottleneck.
pub(crate) fn add_encoder(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    base: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    let mut c = in_channels;
    for level in 0..depth {
        let out = width_at(base, level);
        add_block(store, &format!("{prefix}.enc{level}"), c, out, rng)?;
        c = out;
    }
    add_block(
        store,
        &format!("{prefix}.bottleneck"),
        c,
        width_at(base, depth),
        rng,
    )
}

/// Parameters for one decoder consuming the encoder's skips.
pub(crate) fn add_decoder(
    store: &mut ParamStore,
    prefix: &str,
    base: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    let mut below = width_at(base, depth);
    for level in (0..depth).rev() {
        let skip = width_at(base, level);
        add_block(
            store,
            &format!("{prefix}.dec{level}"),
            below + skip,
            skip,
            rng,
        )?;
        below = skip;
    }
    Ok(())
}

pub(crate) fn conv(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    name: &str,
    x: Var,
    pad: usize,
) -> Result<Var, ModelError> {
    let w = store.bind(tape, binding, &format!("{name}.weight"))?;
    let b = store.bind(tape, binding, &format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, 1, pad)?;
    Ok(tape.add_bias(y, b)?)
}

fn block(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let y = conv(tape, store, binding, &format!("{prefix}.conv1"), x, 1)?;
    let y = tape.relu(y)?;
    let y = conv(tape, store, binding, &format!("{prefix}.conv2"), y, 1)?;
    Ok(tape.relu(y)?)
}

/// Encoder activations: one skip per level and the bottleneck output.
pub(crate) struct Encoded {
    pub skips: Vec<Var>,
    pub bottom: Var,
}

pub(crate) fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    prefix: &str,
    depth: usize,
    input: Var,
) -> Result<Encoded, ModelError> {
    let mut skips = Vec::with_capacity(depth);
    let mut x = input;
    for level in 0..depth {
        let y = block(tape, store, binding, &format!("{prefix}.enc{level}"), x)?;
        skips.push(y);
        x = tape.maxpool2x(y)?;
    }
    let bottom = block(tape, store, binding, &format!("{prefix}.bottleneck"), x)?;
    Ok(Encoded { skips, bottom })
}

pub(crate) fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    prefix: &str,
    encoded: &Encoded,
) -> Result<Var, ModelError> {
    let mut x = encoded.bottom;
    for level in (0..encoded.skips.len()).rev() {
        let up = tape.upsample2x(x)?;
        let cat = tape.concat(up, encoded.skips[level], 0)?;
        x = block(tape, store, binding, &format!("{prefix}.dec{level}"), cat)?;
    }
    Ok(x)
}

//! Dense-tensor neural core sized for the two policy networks: an MLP
//! Q-network and a small strided-convolution patch encoder, with hand
//! written reverse-mode gradients, smoothed-L1 loss, and RMSProp.
//!
//! Everything runs in `f32`. Inner loops accumulate into fixed 8-wide
//! lanes so they vectorize without reassociating a single serial sum,
//! which keeps results bit-stable across builds of the same binary.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape-tagged row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn uniform_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (1.0 / fan_in as f64).sqrt() as f32;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Tensor { shape, data }
    }
}

/// Named-tensor access shared by parameter containers; drives the
/// optimizer, EMA tracking, and checkpointing.
pub trait ParamTensors: Sized {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;
    fn zeros_like(&self) -> Self;

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

// ---------------------------------------------------------------------------
// Vectorization helpers
// ---------------------------------------------------------------------------

const LANES: usize = 8;

/// Dot product accumulated in 8 independent lanes, then folded in a fixed
/// order. Deterministic and autovectorizable.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ab = &a[c * LANES..(c + 1) * LANES];
        let bb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            lanes[l] += ab[l] * bb[l];
        }
    }
    let mut sum = 0.0;
    for l in &lanes {
        sum += l;
    }
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// `y += a * x`, elementwise.
#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// ---------------------------------------------------------------------------
// MLP Q-network
// ---------------------------------------------------------------------------

pub const MLP_HIDDEN: usize = 256;
pub const MLP_OUTPUTS: usize = 3;

/// Fully-connected Q-network: input -> hidden -> hidden -> outputs with
/// ReLU after both hidden layers and a linear head.
///
/// Weight tensors are `[rows, cols] = [outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl QNetworkParams {
    /// Standard geometry: two hidden layers of 256, three outputs.
    pub fn new(input_width: usize, seed: u64) -> Self {
        Self::with_dims(input_width, MLP_HIDDEN, MLP_OUTPUTS, seed)
    }

    pub fn with_dims(input: usize, hidden: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QNetworkParams {
            w1: Tensor::uniform_init(vec![hidden, input], input, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::uniform_init(vec![hidden, hidden], hidden, &mut rng),
            b2: Tensor::zeros(vec![hidden]),
            w3: Tensor::uniform_init(vec![outputs, hidden], hidden, &mut rng),
            b3: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn output_width(&self) -> usize {
        self.w3.shape[0]
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::WidthMismatch {
                context: "mlp input",
                expected: self.input_width(),
                got: width,
            });
        }
        Ok(())
    }
}

impl ParamTensors for QNetworkParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("q.w1", &self.w1),
            ("q.b1", &self.b1),
            ("q.w2", &self.w2),
            ("q.b2", &self.b2),
            ("q.w3", &self.w3),
            ("q.b3", &self.b3),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("q.w1", &mut self.w1),
            ("q.b1", &mut self.b1),
            ("q.w2", &mut self.w2),
            ("q.b2", &mut self.b2),
            ("q.w3", &mut self.w3),
            ("q.b3", &mut self.b3),
        ]
    }

    fn zeros_like(&self) -> Self {
        QNetworkParams {
            w1: Tensor::zeros(self.w1.shape.clone()),
            b1: Tensor::zeros(self.b1.shape.clone()),
            w2: Tensor::zeros(self.w2.shape.clone()),
            b2: Tensor::zeros(self.b2.shape.clone()),
            w3: Tensor::zeros(self.w3.shape.clone()),
            b3: Tensor::zeros(self.b3.shape.clone()),
        }
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f32], out: &mut [f32]) {
    let cols = w.shape[1];
    for (o, (row, bias)) in w.data.chunks_exact(cols).zip(&b.data).enumerate() {
        out[o] = bias + dot(row, x);
    }
}

fn relu_inplace(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Forward pass for one state vector.
pub fn mlp_forward(params: &QNetworkParams, state: &[f32]) -> Result<Vec<f32>> {
    params.check_input(state.len())?;
    let hidden = params.hidden_width();
    let mut a1 = vec![0.0; hidden];
    affine(&params.w1, &params.b1, state, &mut a1);
    relu_inplace(&mut a1);
    let mut a2 = vec![0.0; hidden];
    affine(&params.w2, &params.b2, &a1, &mut a2);
    relu_inplace(&mut a2);
    let mut q = vec![0.0; params.output_width()];
    affine(&params.w3, &params.b3, &a2, &mut q);
    Ok(q)
}

/// Recorded intermediates of a batched forward pass.
pub struct MlpTape {
    batch: usize,
    x: Vec<f32>,
    a1: Vec<f32>,
    a2: Vec<f32>,
}

/// Batched forward with intermediates kept for `mlp_backward`.
/// `states` is `batch` concatenated input vectors; returns `batch`
/// concatenated q-vectors.
pub fn mlp_forward_batch(
    params: &QNetworkParams,
    states: &[f32],
    batch: usize,
) -> Result<(Vec<f32>, MlpTape)> {
    if batch == 0 || states.len() % batch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "state buffer of {} does not divide into {batch} rows",
            states.len()
        )));
    }
    let input = states.len() / batch;
    params.check_input(input)?;
    let hidden = params.hidden_width();
    let outputs = params.output_width();

    let mut a1 = vec![0.0; batch * hidden];
    let mut a2 = vec![0.0; batch * hidden];
    let mut q = vec![0.0; batch * outputs];
    for bi in 0..batch {
        let x = &states[bi * input..(bi + 1) * input];
        let h1 = &mut a1[bi * hidden..(bi + 1) * hidden];
        affine(&params.w1, &params.b1, x, h1);
        relu_inplace(h1);
        let h2 = &mut a2[bi * hidden..(bi + 1) * hidden];
        affine(&params.w2, &params.b2, &a1[bi * hidden..(bi + 1) * hidden], h2);
        relu_inplace(h2);
        affine(
            &params.w3,
            &params.b3,
            &a2[bi * hidden..(bi + 1) * hidden],
            &mut q[bi * outputs..(bi + 1) * outputs],
        );
    }
    Ok((
        q,
        MlpTape {
            batch,
            x: states.to_vec(),
            a1,
            a2,
        },
    ))
}

/// Reverse-mode gradients of the batched forward. `dq` holds one upstream
/// gradient row per sample; gradients accumulate into `grads`. Returns the
/// gradient with respect to the input states when requested (needed to
/// chain into the patch encoder). ReLU uses subgradient 0 at exactly 0.
pub fn mlp_backward(
    params: &QNetworkParams,
    tape: &MlpTape,
    dq: &[f32],
    grads: &mut QNetworkParams,
    want_dx: bool,
) -> Result<Option<Vec<f32>>> {
    let hidden = params.hidden_width();
    let outputs = params.output_width();
    let input = params.input_width();
    if dq.len() != tape.batch * outputs {
        return Err(Error::ShapeMismatch(format!(
            "dq length {} for batch {} of {outputs} outputs",
            dq.len(),
            tape.batch
        )));
    }

    let mut dx_all = if want_dx {
        Some(vec![0.0f32; tape.batch * input])
    } else {
        None
    };
    let mut da2 = vec![0.0f32; hidden];
    let mut da1 = vec![0.0f32; hidden];
    for bi in 0..tape.batch {
        let x = &tape.x[bi * input..(bi + 1) * input];
        let a1 = &tape.a1[bi * hidden..(bi + 1) * hidden];
        let a2 = &tape.a2[bi * hidden..(bi + 1) * hidden];
        let dq_b = &dq[bi * outputs..(bi + 1) * outputs];

        da2.iter_mut().for_each(|v| *v = 0.0);
        for (o, &g) in dq_b.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut grads.w3.data[o * hidden..(o + 1) * hidden], g, a2);
                grads.b3.data[o] += g;
                axpy(&mut da2, g, &params.w3.data[o * hidden..(o + 1) * hidden]);
            }
        }
        // dz2 = da2 masked by relu
        for (v, &a) in da2.iter_mut().zip(a2) {
            if a <= 0.0 {
                *v = 0.0;
            }
        }
        da1.iter_mut().for_each(|v| *v = 0.0);
        for (j, &g) in da2.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut grads.w2.data[j * hidden..(j + 1) * hidden], g, a1);
                grads.b2.data[j] += g;
                axpy(&mut da1, g, &params.w2.data[j * hidden..(j + 1) * hidden]);
            }
        }
        for (v, &a) in da1.iter_mut().zip(a1) {
            if a <= 0.0 {
                *v = 0.0;
            }
        }
        let dx_b = dx_all
            .as_mut()
            .map(|dx| &mut dx[bi * input..(bi + 1) * input]);
        let mut dx_b = dx_b;
        for (j, &g) in da1.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut grads.w1.data[j * input..(j + 1) * input], g, x);
                grads.b1.data[j] += g;
                if let Some(dx) = dx_b.as_deref_mut() {
                    axpy(dx, g, &params.w1.data[j * input..(j + 1) * input]);
                }
            }
        }
    }
    Ok(dx_all)
}

// ---------------------------------------------------------------------------
// CNN patch encoder
// ---------------------------------------------------------------------------

pub const PATCH_SIDE: usize = 32;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;
pub const ENCODER_CHANNELS: usize = 8;
pub const ENCODING_WIDTH: usize = ENCODER_CHANNELS;

/// Spatial side lengths through the stride-2 stack: 32 -> 16 -> 8 -> 4 -> 2.
pub const ENCODER_SIDES: [usize; 5] = [32, 16, 8, 4, 2];

/// Four 3x3 stride-2 zero-padded convolutions with 8 filters each and
/// ReLU, followed by a spatial mean-pool down to an 8-vector.
///
/// Convolution weights are stored `[in_c, 3, 3, out_c]` so the innermost
/// loop runs over the 8 output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv_w: [Tensor; 4],
    pub conv_b: [Tensor; 4],
}

const ENC_IN_CHANNELS: [usize; 4] = [1, 8, 8, 8];

impl EncoderParams {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_w = ENC_IN_CHANNELS.map(|in_c| {
            Tensor::uniform_init(
                vec![in_c, 3, 3, ENCODER_CHANNELS],
                in_c * 9,
                &mut rng,
            )
        });
        let conv_b = [(); 4].map(|_| Tensor::zeros(vec![ENCODER_CHANNELS]));
        EncoderParams { conv_w, conv_b }
    }
}

impl ParamTensors for EncoderParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.conv1.w", &self.conv_w[0]),
            ("enc.conv1.b", &self.conv_b[0]),
            ("enc.conv2.w", &self.conv_w[1]),
            ("enc.conv2.b", &self.conv_b[1]),
            ("enc.conv3.w", &self.conv_w[2]),
            ("enc.conv3.b", &self.conv_b[2]),
            ("enc.conv4.w", &self.conv_w[3]),
            ("enc.conv4.b", &self.conv_b[3]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let [w1, w2, w3, w4] = &mut self.conv_w;
        let [b1, b2, b3, b4] = &mut self.conv_b;
        vec![
            ("enc.conv1.w", w1),
            ("enc.conv1.b", b1),
            ("enc.conv2.w", w2),
            ("enc.conv2.b", b2),
            ("enc.conv3.w", w3),
            ("enc.conv3.b", b3),
            ("enc.conv4.w", w4),
            ("enc.conv4.b", b4),
        ]
    }

    fn zeros_like(&self) -> Self {
        EncoderParams {
            conv_w: [
                Tensor::zeros(self.conv_w[0].shape.clone()),
                Tensor::zeros(self.conv_w[1].shape.clone()),
                Tensor::zeros(self.conv_w[2].shape.clone()),
                Tensor::zeros(self.conv_w[3].shape.clone()),
            ],
            conv_b: [(); 4].map(|_| Tensor::zeros(vec![ENCODER_CHANNELS])),
        }
    }
}

/// One stride-2 conv layer with fused ReLU. Activations are channel-last
/// `[y][x][c]`; zero padding of 1. `IN_C` is 1 for the first layer and 8
/// afterwards; monomorphizing lets the 8-lane inner loops fully unroll.
fn conv_fwd<const IN_C: usize, const SIDE_IN: usize>(
    x: &[f32],
    w: &Tensor,
    b: &Tensor,
    y: &mut [f32],
) {
    let side_in = SIDE_IN;
    let side_out = side_in / 2;
    debug_assert_eq!(x.len(), side_in * side_in * IN_C);
    debug_assert_eq!(y.len(), side_out * side_out * ENCODER_CHANNELS);
    const C: usize = ENCODER_CHANNELS;
    let bias: &[f32; C] = b.data[..C].try_into().unwrap();
    for oy in 0..side_out {
        for ox in 0..side_out {
            // Four independent accumulator groups keep the FMA dependency
            // chains short; they are folded pairwise at the end.
            let mut acc0 = *bias;
            let mut acc1 = [0.0f32; C];
            let mut acc2 = [0.0f32; C];
            let mut acc3 = [0.0f32; C];
            for ky in 0..3usize {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy as usize >= side_in {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix as usize >= side_in {
                        continue;
                    }
                    let xoff = (iy as usize * side_in + ix as usize) * IN_C;
                    let xs: &[f32; IN_C] = x[xoff..xoff + IN_C].try_into().unwrap();
                    let wtap = (ky * 3 + kx) * C;
                    let row = |ic: usize| -> &[f32; C] {
                        let off = ic * 9 * C + wtap;
                        w.data[off..off + C].try_into().unwrap()
                    };
                    if IN_C == 8 {
                        for p in 0..2 {
                            let r0 = row(4 * p);
                            let r1 = row(4 * p + 1);
                            let r2 = row(4 * p + 2);
                            let r3 = row(4 * p + 3);
                            for l in 0..C {
                                acc0[l] += xs[4 * p] * r0[l];
                                acc1[l] += xs[4 * p + 1] * r1[l];
                                acc2[l] += xs[4 * p + 2] * r2[l];
                                acc3[l] += xs[4 * p + 3] * r3[l];
                            }
                        }
                    } else {
                        for (ic, &s) in xs.iter().enumerate() {
                            let r = row(ic);
                            for l in 0..C {
                                acc0[l] += s * r[l];
                            }
                        }
                    }
                }
            }
            let base = (oy * side_out + ox) * C;
            let out: &mut [f32; C] = (&mut y[base..base + C]).try_into().unwrap();
            for l in 0..C {
                out[l] = ((acc0[l] + acc1[l]) + (acc2[l] + acc3[l])).max(0.0);
            }
        }
    }
}

/// Backward of `conv_fwd`. `dy` is the gradient at the post-ReLU output;
/// the ReLU mask is recovered from the stored activations (`y > 0`).
///
/// Two passes: a position-major sweep masks the ReLU, accumulates the
/// bias gradient, and scatters the input gradient; a tap-major sweep then
/// accumulates each weight row in registers across all output positions.
fn conv_bwd<const IN_C: usize, const SIDE_IN: usize>(
    x: &[f32],
    y: &[f32],
    dy: &[f32],
    w: &Tensor,
    gw: &mut Tensor,
    gb: &mut Tensor,
    dx: Option<&mut [f32]>,
) {
    let side_in = SIDE_IN;
    let side_out = side_in / 2;
    const C: usize = ENCODER_CHANNELS;
    let mut dx = dx;

    let positions = side_out * side_out;
    // Stack scratch sized for the largest layer (16x16 output).
    let mut dz_buf = [0.0f32; 16 * 16 * C];
    let dz_all = &mut dz_buf[..positions * C];
    for pos in 0..positions {
        let base = pos * C;
        let mut any = false;
        for l in 0..C {
            let g = if y[base + l] > 0.0 { dy[base + l] } else { 0.0 };
            dz_all[base + l] = g;
            any |= g != 0.0;
        }
        if !any {
            continue;
        }
        for l in 0..C {
            gb.data[l] += dz_all[base + l];
        }
    }

    // Input gradient with the weights transposed to `[tap][out][in]`, so
    // the inner loop is a lane-parallel FMA over input channels instead of
    // a horizontal reduction.
    if let Some(dx) = dx.as_deref_mut() {
        let mut wt_buf = [0.0f32; 9 * C * C];
        let wt = &mut wt_buf[..9 * C * IN_C];
        for ic in 0..IN_C {
            for tap in 0..9 {
                for l in 0..C {
                    wt[(tap * C + l) * IN_C + ic] = w.data[(ic * 9 + tap) * C + l];
                }
            }
        }
        for oy in 0..side_out {
            for ox in 0..side_out {
                let base = (oy * side_out + ox) * C;
                let dz: &[f32; C] = dz_all[base..base + C].try_into().unwrap();
                if dz.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for ky in 0..3usize {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy as usize >= side_in {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix as usize >= side_in {
                            continue;
                        }
                        let xoff = (iy as usize * side_in + ix as usize) * IN_C;
                        let dxv: &mut [f32; IN_C] =
                            (&mut dx[xoff..xoff + IN_C]).try_into().unwrap();
                        let tap = ky * 3 + kx;
                        for (l, &g) in dz.iter().enumerate() {
                            if g != 0.0 {
                                let wrow: &[f32; IN_C] = wt
                                    [(tap * C + l) * IN_C..(tap * C + l + 1) * IN_C]
                                    .try_into()
                                    .unwrap();
                                for ic in 0..IN_C {
                                    dxv[ic] += g * wrow[ic];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    for ky in 0..3usize {
        for kx in 0..3usize {
            for ic in 0..IN_C {
                let mut acc0 = [0.0f32; C];
                let mut acc1 = [0.0f32; C];
                for oy in 0..side_out {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy as usize >= side_in {
                        continue;
                    }
                    let row_in = iy as usize * side_in;
                    let row_out = oy * side_out;
                    for ox in 0..side_out {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix as usize >= side_in {
                            continue;
                        }
                        let s = x[(row_in + ix as usize) * IN_C + ic];
                        let dz = &dz_all[(row_out + ox) * C..(row_out + ox + 1) * C];
                        let acc = if ox % 2 == 0 { &mut acc0 } else { &mut acc1 };
                        for l in 0..C {
                            acc[l] += s * dz[l];
                        }
                    }
                }
                let woff = ((ic * 3 + ky) * 3 + kx) * C;
                let gw_row: &mut [f32; C] = (&mut gw.data[woff..woff + C]).try_into().unwrap();
                for l in 0..C {
                    gw_row[l] += acc0[l] + acc1[l];
                }
            }
        }
    }
}

/// Intermediates of one encoder forward (post-ReLU activations per layer).
pub struct EncoderTape {
    input: Vec<f32>,
    acts: [Vec<f32>; 4],
}

impl EncoderTape {
    pub fn activation_len(&self, layer: usize) -> usize {
        self.acts[layer].len()
    }
}

fn encode_inner(params: &EncoderParams, patch: &[f32]) -> EncoderTape {
    let mut acts: [Vec<f32>; 4] = [0, 1, 2, 3].map(|layer| {
        let side = ENCODER_SIDES[layer + 1];
        vec![0.0f32; side * side * ENCODER_CHANNELS]
    });
    let (a1, rest) = acts.split_at_mut(1);
    let (a2, rest) = rest.split_at_mut(1);
    let (a3, a4) = rest.split_at_mut(1);
    conv_fwd::<1, 32>(patch, &params.conv_w[0], &params.conv_b[0], &mut a1[0]);
    conv_fwd::<8, 16>(&a1[0], &params.conv_w[1], &params.conv_b[1], &mut a2[0]);
    conv_fwd::<8, 8>(&a2[0], &params.conv_w[2], &params.conv_b[2], &mut a3[0]);
    conv_fwd::<8, 4>(&a3[0], &params.conv_w[3], &params.conv_b[3], &mut a4[0]);
    EncoderTape {
        input: patch.to_vec(),
        acts,
    }
}

fn mean_pool(act: &[f32]) -> [f32; ENCODING_WIDTH] {
    // Final activation is 2x2x8.
    let mut out = [0.0f32; ENCODING_WIDTH];
    for p in 0..4 {
        for l in 0..ENCODER_CHANNELS {
            out[l] += act[p * ENCODER_CHANNELS + l];
        }
    }
    for v in &mut out {
        *v *= 0.25;
    }
    out
}

/// Encodes a 32x32 patch (row-major `f32` pixels) into an 8-vector.
pub fn cnn_encode(params: &EncoderParams, patch: &[f32]) -> Result<[f32; ENCODING_WIDTH]> {
    if patch.len() != PATCH_PIXELS {
        return Err(Error::WidthMismatch {
            context: "encoder patch",
            expected: PATCH_PIXELS,
            got: patch.len(),
        });
    }
    // Allocation-free path: no intermediates survive the call.
    let mut a1 = [0.0f32; 16 * 16 * ENCODER_CHANNELS];
    let mut a2 = [0.0f32; 8 * 8 * ENCODER_CHANNELS];
    let mut a3 = [0.0f32; 4 * 4 * ENCODER_CHANNELS];
    let mut a4 = [0.0f32; 2 * 2 * ENCODER_CHANNELS];
    conv_fwd::<1, 32>(patch, &params.conv_w[0], &params.conv_b[0], &mut a1);
    conv_fwd::<8, 16>(&a1, &params.conv_w[1], &params.conv_b[1], &mut a2);
    conv_fwd::<8, 8>(&a2, &params.conv_w[2], &params.conv_b[2], &mut a3);
    conv_fwd::<8, 4>(&a3, &params.conv_w[3], &params.conv_b[3], &mut a4);
    Ok(mean_pool(&a4))
}

/// Forward pass that keeps intermediates for `cnn_backward`.
pub fn cnn_encode_with_tape(
    params: &EncoderParams,
    patch: &[f32],
) -> Result<([f32; ENCODING_WIDTH], EncoderTape)> {
    if patch.len() != PATCH_PIXELS {
        return Err(Error::WidthMismatch {
            context: "encoder patch",
            expected: PATCH_PIXELS,
            got: patch.len(),
        });
    }
    let tape = encode_inner(params, patch);
    Ok((mean_pool(&tape.acts[3]), tape))
}

/// Accumulates encoder gradients for one patch given the gradient at the
/// 8-wide encoding.
pub fn cnn_backward(
    params: &EncoderParams,
    tape: &EncoderTape,
    dout: &[f32; ENCODING_WIDTH],
    grads: &mut EncoderParams,
) {
    // Undo the mean pool: spread dout/4 over the 2x2 positions.
    let mut d4 = [0.0f32; 4 * ENCODER_CHANNELS];
    for p in 0..4 {
        for l in 0..ENCODER_CHANNELS {
            d4[p * ENCODER_CHANNELS + l] = dout[l] * 0.25;
        }
    }
    let mut d3 = [0.0f32; 4 * 4 * ENCODER_CHANNELS];
    conv_bwd::<8, 4>(
        &tape.acts[2],
        &tape.acts[3],
        &d4,
        &params.conv_w[3],
        &mut grads.conv_w[3],
        &mut grads.conv_b[3],
        Some(&mut d3),
    );
    let mut d2 = [0.0f32; 8 * 8 * ENCODER_CHANNELS];
    conv_bwd::<8, 8>(
        &tape.acts[1],
        &tape.acts[2],
        &d3,
        &params.conv_w[2],
        &mut grads.conv_w[2],
        &mut grads.conv_b[2],
        Some(&mut d2),
    );
    let mut d1 = [0.0f32; 16 * 16 * ENCODER_CHANNELS];
    conv_bwd::<8, 16>(
        &tape.acts[0],
        &tape.acts[1],
        &d2,
        &params.conv_w[1],
        &mut grads.conv_w[1],
        &mut grads.conv_b[1],
        Some(&mut d1),
    );
    conv_bwd::<1, 32>(
        &tape.input,
        &tape.acts[0],
        &d1,
        &params.conv_w[0],
        &mut grads.conv_w[0],
        &mut grads.conv_b[0],
        None,
    );
}

/// Combined end-to-end parameter set (encoder + Q-network) so the
/// optimizer, EMA target, and checkpoints treat it as one model.
#[derive(Debug, Clone, PartialEq)]
pub struct E2eParams {
    pub encoder: EncoderParams,
    pub qnet: QNetworkParams,
}

impl ParamTensors for E2eParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.encoder.tensors();
        v.extend(self.qnet.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.qnet.tensors_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        E2eParams {
            encoder: self.encoder.zeros_like(),
            qnet: self.qnet.zeros_like(),
        }
    }
}

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

/// Smoothed L1 over aligned vectors: mean of `0.5 d^2` for `|d| < 1`,
/// else `|d| - 0.5`, with the transition fixed at 1.
pub fn huber_loss(pred: &[f32], target: &[f32]) -> f32 {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f32;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        sum += if d.abs() < 1.0 {
            0.5 * d * d
        } else {
            d.abs() - 0.5
        };
    }
    sum / n
}

/// Gradient of `huber_loss` with respect to `pred`.
pub fn huber_grad(pred: &[f32], target: &[f32]) -> Vec<f32> {
    let n = pred.len() as f32;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).clamp(-1.0, 1.0) / n)
        .collect()
}

/// RMSProp with a squared-gradient EMA:
/// `acc <- s * acc + (1 - s) * g^2`, `theta <- theta - lr * g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f32,
    pub smoothing: f32,
    pub eps: f32,
    acc: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(lr: f32, smoothing: f32, eps: f32) -> Self {
        RmsProp {
            lr,
            smoothing,
            eps,
            acc: Vec::new(),
        }
    }

    /// One update step. Accumulators are allocated to mirror the parameter
    /// shapes on first use.
    pub fn step<P: ParamTensors>(&mut self, params: &mut P, grads: &P) {
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        assert_eq!(ps.len(), gs.len());
        if self.acc.is_empty() {
            self.acc = ps.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        let s = self.smoothing;
        for (ti, ((_, p), (_, g))) in ps.iter_mut().zip(&gs).enumerate() {
            let acc = &mut self.acc[ti];
            assert_eq!(acc.len(), g.len());
            for i in 0..acc.len() {
                let gi = g.data[i];
                acc[i] = s * acc[i] + (1.0 - s) * gi * gi;
                p.data[i] -= self.lr * gi / (acc[i].sqrt() + self.eps);
            }
        }
    }

    pub fn accumulators(&self) -> &[Vec<f32>] {
        &self.acc
    }
}

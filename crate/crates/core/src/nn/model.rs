use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{gemm, sgemm, ConvShape};
use super::{ArchConfig, InputImage, Label, TrainingExample, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::masking::LayerMask;

/// Weights, biases and Adadelta accumulators of the classifier.
///
/// Tensors are stored in a fixed order: `(weight, bias)` for every
/// convolution (blocks first, then the head convolution), followed by the
/// linear head weight (`2 x C`, row-major) and bias. Convolution weights are
/// row-major `(out, in, ky, kx)`; all convolutions use one pixel of zero
/// padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(super) arch: ArchConfig,
    pub(super) params: Vec<Vec<f64>>,
    pub(super) grad_sq: Vec<Vec<f64>>,
    pub(super) update_sq: Vec<Vec<f64>>,
    pub(super) version: u64,
}

pub(super) fn conv_shapes(arch: &ArchConfig) -> Vec<ConvShape> {
    let mut shapes = Vec::with_capacity(arch.block_channels.len() + 1);
    let mut in_channels = 3;
    let mut side = arch.input_side;
    for &out in &arch.block_channels {
        shapes.push(ConvShape {
            in_channels,
            out_channels: out,
            in_side: side,
            out_side: side / 2,
            stride: 2,
        });
        in_channels = out;
        side /= 2;
    }
    shapes.push(ConvShape {
        in_channels,
        out_channels: arch.head_channels,
        in_side: side,
        out_side: side,
        stride: 1,
    });
    shapes
}

pub(super) fn tensor_lens(arch: &ArchConfig) -> Vec<usize> {
    let mut lens = Vec::new();
    for s in conv_shapes(arch) {
        lens.push(s.out_channels * s.patch_len());
        lens.push(s.out_channels);
    }
    lens.push(CLASS_COUNT * arch.head_channels);
    lens.push(CLASS_COUNT);
    lens
}

/// Seeded initialization: fan-in-scaled normal weights, zero biases, zero
/// accumulators, version 0.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = 2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope);
    let mut params = Vec::new();
    for s in conv_shapes(arch) {
        let std = (gain / s.patch_len() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        params.push(
            (0..s.out_channels * s.patch_len())
                .map(|_| normal.sample(&mut rng))
                .collect(),
        );
        params.push(vec![0.0; s.out_channels]);
    }
    let normal = Normal::new(0.0, (1.0 / arch.head_channels as f64).sqrt()).expect("finite std");
    params.push(
        (0..CLASS_COUNT * arch.head_channels)
            .map(|_| normal.sample(&mut rng))
            .collect(),
    );
    params.push(vec![0.0; CLASS_COUNT]);
    let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    Ok(ModelState {
        arch: arch.clone(),
        params,
        grad_sq: zeros.clone(),
        update_sq: zeros,
        version: 0,
    })
}

impl ModelState {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Number of weight updates applied so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// Direct parameter access, for perturbation-based checks.
    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    /// Adadelta running average of squared gradients, per tensor.
    pub fn grad_sq(&self) -> &[Vec<f64>] {
        &self.grad_sq
    }

    /// Adadelta running average of squared updates, per tensor.
    pub fn update_sq(&self) -> &[Vec<f64>] {
        &self.update_sq
    }

    /// Human-readable tensor names in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        let convs = self.arch.block_channels.len() + 1;
        let mut names = Vec::new();
        for i in 0..convs {
            let layer = if i + 1 == convs {
                "head".to_string()
            } else {
                format!("block{i}")
            };
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn fc_weight(&self) -> &[f64] {
        &self.params[self.params.len() - 2]
    }

    fn fc_bias(&self) -> &[f64] {
        &self.params[self.params.len() - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

/// Gradient tensors congruent to [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
    /// Mean cross-entropy of the batch the gradients were computed on.
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            tensors: model.params.iter().map(|p| vec![0.0; p.len()]).collect(),
            loss: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Everything computed by one forward pass over a single example.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// Final convolution output after leaky ReLU, before masking (`C x S*S`).
    pub activations: Vec<f64>,
    /// `activations` multiplied by the broadcast mask.
    pub masked: Vec<f64>,
    /// Global average of `masked` per channel.
    pub gap: Vec<f64>,
    pub logits: [f64; CLASS_COUNT],
    pub probs: [f64; CLASS_COUNT],
    /// im2col buffers per convolution, kept for backpropagation.
    pub cols: Vec<Vec<f64>>,
    /// Pre-activation outputs per convolution.
    pub pre_activations: Vec<Vec<f64>>,
}

struct Pass {
    batch: usize,
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<f64>,
    masked: Vec<f64>,
    gap: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn check_image(arch: &ArchConfig, image: &InputImage) -> Result<()> {
    if image.side() != arch.input_side {
        return Err(Error::Usage(format!(
            "image side {} does not match network input {}",
            image.side(),
            arch.input_side
        )));
    }
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite pixel in input image".into()));
    }
    Ok(())
}

fn check_mask(arch: &ArchConfig, mask: Option<&LayerMask>) -> Result<()> {
    match mask {
        Some(m) if m.side() != arch.grid_side => Err(Error::Usage(format!(
            "mask side {} does not match grid side {}",
            m.side(),
            arch.grid_side
        ))),
        _ => Ok(()),
    }
}

fn run_forward(
    model: &ModelState,
    images: &[&InputImage],
    masks: &[Option<&LayerMask>],
    keep: bool,
) -> Result<Pass> {
    let arch = &model.arch;
    let batch = images.len();
    for (img, mask) in images.iter().zip(masks) {
        check_image(arch, img)?;
        check_mask(arch, *mask)?;
    }
    let area = arch.input_side * arch.input_side;
    let mut x = vec![0.0; 3 * batch * area];
    for (b, img) in images.iter().enumerate() {
        for c in 0..3 {
            let src = &img.data()[c * area..][..area];
            let dst = &mut x[c * batch * area + b * area..][..area];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s as f64;
            }
        }
    }

    let shapes = conv_shapes(arch);
    let mut all_cols = Vec::with_capacity(shapes.len());
    let mut all_pre = Vec::with_capacity(shapes.len());
    let mut cols = Vec::new();
    for (l, shape) in shapes.iter().enumerate() {
        shape.im2col(&x, batch, &mut cols);
        let width = batch * shape.out_area();
        let mut pre = vec![0.0; shape.out_channels * width];
        let weight = &model.params[2 * l];
        let bias = &model.params[2 * l + 1];
        for (row, b) in pre.chunks_exact_mut(width).zip(bias) {
            row.fill(*b);
        }
        gemm(
            shape.out_channels,
            shape.patch_len(),
            width,
            weight,
            false,
            &cols,
            false,
            1.0,
            &mut pre,
        );
        x = pre.iter().map(|v| leaky(*v, arch.leaky_slope)).collect();
        if keep {
            all_cols.push(std::mem::take(&mut cols));
            all_pre.push(pre);
        }
    }

    let act = x;
    let grid = arch.grid_area();
    let channels = arch.head_channels;
    let mut masked = act.clone();
    for (b, mask) in masks.iter().enumerate() {
        if let Some(mask) = mask {
            for c in 0..channels {
                let row = &mut masked[c * batch * grid + b * grid..][..grid];
                for (v, m) in row.iter_mut().zip(mask.values()) {
                    *v *= m;
                }
            }
        }
    }
    let mut gap = vec![0.0; batch * channels];
    for c in 0..channels {
        for b in 0..batch {
            let row = &masked[c * batch * grid + b * grid..][..grid];
            gap[b * channels + c] = row.iter().sum::<f64>() / grid as f64;
        }
    }
    let fc_w = model.fc_weight();
    let fc_b = model.fc_bias();
    let mut logits = vec![0.0; batch * CLASS_COUNT];
    let mut probs = vec![0.0; batch * CLASS_COUNT];
    for b in 0..batch {
        let g = &gap[b * channels..][..channels];
        for j in 0..CLASS_COUNT {
            let w = &fc_w[j * channels..][..channels];
            logits[b * CLASS_COUNT + j] =
                fc_b[j] + w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
        }
        let z = &logits[b * CLASS_COUNT..][..CLASS_COUNT];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..CLASS_COUNT {
            probs[b * CLASS_COUNT + j] = exps[j] / total;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(Pass {
        batch,
        cols: all_cols,
        pre: all_pre,
        act,
        masked,
        gap,
        logits,
        probs,
    })
}

/// Forward pass for one example. The mask, if any, multiplies the final
/// leaky-ReLU output before global average pooling.
pub fn forward(model: &ModelState, example: &TrainingExample) -> Result<ForwardRecord> {
    let mask = example.mask.as_deref();
    let pass = run_forward(model, &[&example.image], &[mask], true)?;
    Ok(ForwardRecord {
        activations: pass.act,
        masked: pass.masked,
        gap: pass.gap,
        logits: [pass.logits[0], pass.logits[1]],
        probs: [pass.probs[0], pass.probs[1]],
        cols: pass.cols,
        pre_activations: pass.pre,
    })
}

/// Mean softmax cross-entropy over `batch`.
pub fn loss(model: &ModelState, batch: &[TrainingExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let images: Vec<&InputImage> = batch.iter().map(|e| &e.image).collect();
    let masks: Vec<Option<&LayerMask>> = batch.iter().map(|e| e.mask.as_deref()).collect();
    let pass = run_forward(model, &images, &masks, false)?;
    Ok(batch_loss(&pass, batch))
}

fn batch_loss(pass: &Pass, batch: &[TrainingExample]) -> f64 {
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(b, e)| -pass.probs[b * CLASS_COUNT + e.label.index()].ln())
        .sum();
    total / batch.len() as f64
}

/// Returns parameter gradients and, per example, the gradient with respect to
/// the pre-mask activations (`C x S*S`).
fn backprop(model: &ModelState, batch: &[TrainingExample]) -> Result<(Gradients, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let arch = &model.arch;
    let images: Vec<&InputImage> = batch.iter().map(|e| &e.image).collect();
    let masks: Vec<Option<&LayerMask>> = batch.iter().map(|e| e.mask.as_deref()).collect();
    let pass = run_forward(model, &images, &masks, true)?;
    let n = pass.batch;
    let channels = arch.head_channels;
    let grid = arch.grid_area();
    let mut grads = Gradients::zeros_like(model);
    grads.loss = batch_loss(&pass, batch);

    // softmax cross-entropy, averaged over the batch
    let mut dlogits = pass.probs.clone();
    for (b, e) in batch.iter().enumerate() {
        dlogits[b * CLASS_COUNT + e.label.index()] -= 1.0;
    }
    for v in &mut dlogits {
        *v /= n as f64;
    }

    let last = grads.tensors.len();
    let fc_w = model.fc_weight();
    let mut dgap = vec![0.0; n * channels];
    {
        let (head, tail) = grads.tensors.split_at_mut(last - 1);
        let dw = &mut head[last - 2];
        let db = &mut tail[0];
        for b in 0..n {
            let g = &pass.gap[b * channels..][..channels];
            for j in 0..CLASS_COUNT {
                let d = dlogits[b * CLASS_COUNT + j];
                db[j] += d;
                for c in 0..channels {
                    dw[j * channels + c] += d * g[c];
                    dgap[b * channels + c] += fc_w[j * channels + c] * d;
                }
            }
        }
    }

    // through the pooling average and the mask multiply
    let mut dact = vec![0.0; channels * n * grid];
    for c in 0..channels {
        for b in 0..n {
            let d = dgap[b * channels + c] / grid as f64;
            let row = &mut dact[c * n * grid + b * grid..][..grid];
            match masks[b] {
                Some(mask) => {
                    for (v, m) in row.iter_mut().zip(mask.values()) {
                        *v = d * m;
                    }
                }
                None => row.fill(d),
            }
        }
    }
    let act_grads = (0..n)
        .map(|b| {
            let mut out = Vec::with_capacity(channels * grid);
            for c in 0..channels {
                out.extend_from_slice(&dact[c * n * grid + b * grid..][..grid]);
            }
            out
        })
        .collect();

    let shapes = conv_shapes(arch);
    let mut dout = dact;
    let mut dcols = Vec::new();
    let mut dx = Vec::new();
    for l in (0..shapes.len()).rev() {
        let shape = &shapes[l];
        let width = n * shape.out_area();
        let pre = &pass.pre[l];
        for (d, p) in dout.iter_mut().zip(pre) {
            if *p <= 0.0 {
                *d *= arch.leaky_slope;
            }
        }
        let cols = &pass.cols[l];
        gemm(
            shape.out_channels,
            width,
            shape.patch_len(),
            &dout,
            false,
            cols,
            true,
            1.0,
            &mut grads.tensors[2 * l],
        );
        for (db, row) in grads.tensors[2 * l + 1]
            .iter_mut()
            .zip(dout.chunks_exact(width))
        {
            *db += row.iter().sum::<f64>();
        }
        if l > 0 {
            dcols.clear();
            dcols.resize(shape.patch_len() * width, 0.0);
            gemm(
                shape.patch_len(),
                shape.out_channels,
                width,
                &model.params[2 * l],
                true,
                &dout,
                false,
                0.0,
                &mut dcols,
            );
            shape.col2im(&dcols, n, &mut dx);
            std::mem::swap(&mut dout, &mut dx);
        }
    }
    Ok((grads, act_grads))
}

/// Gradients of the mean cross-entropy over `batch` with respect to every
/// parameter tensor.
pub fn backward(model: &ModelState, batch: &[TrainingExample]) -> Result<Gradients> {
    backprop(model, batch).map(|(g, _)| g)
}

/// Per-example gradient of the batch loss with respect to the final
/// activations before the mask multiply, each `C x S*S`.
pub fn activation_gradients(
    model: &ModelState,
    batch: &[TrainingExample],
) -> Result<Vec<Vec<f64>>> {
    backprop(model, batch).map(|(_, a)| a)
}

fn decide(probs: &[f64]) -> (Label, f64) {
    // ties go to the negative class
    if probs[1] > probs[0] {
        (Label::Positive, probs[1])
    } else {
        (Label::Negative, probs[0])
    }
}

/// Unmasked class probabilities computed in single precision. Used only for
/// prediction; training and CAM extraction stay in double precision.
fn infer_probs(model: &ModelState, images: &[InputImage]) -> Result<Vec<[f64; CLASS_COUNT]>> {
    let arch = &model.arch;
    for img in images {
        check_image(arch, img)?;
    }
    let batch = images.len();
    let area = arch.input_side * arch.input_side;
    let mut x = vec![0f32; 3 * batch * area];
    for (b, img) in images.iter().enumerate() {
        for c in 0..3 {
            x[c * batch * area + b * area..][..area]
                .copy_from_slice(&img.data()[c * area..][..area]);
        }
    }
    let slope = arch.leaky_slope as f32;
    let mut cols = Vec::new();
    for (l, shape) in conv_shapes(arch).iter().enumerate() {
        shape.im2col(&x, batch, &mut cols);
        let width = batch * shape.out_area();
        let weight: Vec<f32> = model.params[2 * l].iter().map(|v| *v as f32).collect();
        x.clear();
        x.resize(shape.out_channels * width, 0.0);
        for (row, b) in x.chunks_exact_mut(width).zip(&model.params[2 * l + 1]) {
            row.fill(*b as f32);
        }
        sgemm(
            shape.out_channels,
            shape.patch_len(),
            width,
            &weight,
            &cols,
            1.0,
            &mut x,
        );
        for v in x.iter_mut() {
            *v = v.max(*v * slope);
        }
    }

    let grid = arch.grid_area();
    let channels = arch.head_channels;
    let fc_w = model.fc_weight();
    let fc_b = model.fc_bias();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let gap: Vec<f64> = (0..channels)
            .map(|c| {
                x[c * batch * grid + b * grid..][..grid]
                    .iter()
                    .map(|v| *v as f64)
                    .sum::<f64>()
                    / grid as f64
            })
            .collect();
        let mut z = [0.0; CLASS_COUNT];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = fc_b[j]
                + fc_w[j * channels..][..channels]
                    .iter()
                    .zip(&gap)
                    .map(|(w, g)| w * g)
                    .sum::<f64>();
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let max = z[0].max(z[1]);
        let e = [(z[0] - max).exp(), (z[1] - max).exp()];
        let total = e[0] + e[1];
        out.push([e[0] / total, e[1] / total]);
    }
    Ok(out)
}

/// Label and its softmax probability, unmasked. Evaluated in single
/// precision, so the probability can differ from [`forward`] in the last
/// few digits.
pub fn predict(model: &ModelState, image: &InputImage) -> Result<(Label, f64)> {
    let probs = infer_probs(model, std::slice::from_ref(image))?;
    Ok(decide(&probs[0]))
}

const PREDICT_CHUNK: usize = 25;

/// [`predict`] over many images, evaluated in chunks.
pub fn predict_batch(model: &ModelState, images: &[InputImage]) -> Result<Vec<(Label, f64)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        out.extend(infer_probs(model, chunk)?.iter().map(|p| decide(p)));
    }
    Ok(out)
}

/// Class activation map: head-weighted sum of the unmasked final activations,
/// `S*S` row-major, unnormalized.
pub fn cam_map(model: &ModelState, image: &InputImage, class_index: usize) -> Result<Vec<f64>> {
    if class_index >= CLASS_COUNT {
        return Err(Error::Usage(format!(
            "class index {class_index} out of range"
        )));
    }
    let pass = run_forward(model, &[image], &[None], false)?;
    let channels = model.arch.head_channels;
    let grid = model.arch.grid_area();
    let w = &model.fc_weight()[class_index * channels..][..channels];
    let mut cam = vec![0.0; grid];
    for (c, wc) in w.iter().enumerate() {
        for (m, a) in cam.iter_mut().zip(&pass.act[c * grid..][..grid]) {
            *m += wc * a;
        }
    }
    Ok(cam)
}

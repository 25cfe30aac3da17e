//! Per-pixel segmentation model with closed-form gradients.
//!
//! For each pixel the model sees five fixed features (intensity, 3x3 local
//! mean, horizontal and vertical central differences, normalised radius)
//! plus the responses of a small learnable 3x3 convolution bank. A tanh
//! hidden layer and a linear head produce scores for the three classes.
//!
//! Parameter layers, in layout order: `conv`, `hidden`, `head`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fedstyle::{extract_stats, StyleMixer, StyleStats};
use crate::grid::{Image, Mask};
use crate::params::{FlatParams, Layout, ParamError};
use crate::sim::data::{SegSample, NUM_CLASSES};

pub const FIXED_FEATURES: usize = 5;
const TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub kernels: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { kernels: 4, hidden: 8 }
    }
}

impl Architecture {
    fn hidden_inputs(&self) -> usize {
        FIXED_FEATURES + self.kernels
    }

    pub fn layout(&self) -> Layout {
        Layout::from_lengths([
            ("conv", self.kernels * TAPS + self.kernels),
            ("hidden", self.hidden * self.hidden_inputs() + self.hidden),
            ("head", NUM_CLASSES * self.hidden + NUM_CLASSES),
        ])
        .expect("distinct layer names")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    arch: Architecture,
    params: FlatParams,
}

/// Scores for every pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<[f64; NUM_CLASSES]>,
}

impl ScoreGrid {
    /// Argmax per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> Mask {
        let labels = self.scores.iter().map(|s| argmax(s) as u8).collect();
        Mask::new(self.height, self.width, labels)
    }
}

fn argmax(s: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if s[c] > s[best] {
            best = c;
        }
    }
    best
}

/// Borrowed parameter slices, in the order the forward pass uses them.
struct Weights<'a> {
    conv_w: &'a [f64],
    conv_b: &'a [f64],
    hid_w: &'a [f64],
    hid_b: &'a [f64],
    head_w: &'a [f64],
    head_b: &'a [f64],
}

/// Intermediate values of one pixel's forward pass.
struct PixelCache {
    patch: [f64; TAPS],
    input: Vec<f64>,
    hidden: Vec<f64>,
    probs: [f64; NUM_CLASSES],
    scores: [f64; NUM_CLASSES],
}

impl ToyModel {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: FlatParams::zeros(arch.layout()),
        }
    }

    /// Uniform fan-in scaled initialisation, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(arch);
        let fill = |slice: &mut [f64], scale: f64, rng: &mut ChaCha8Rng| {
            for w in slice {
                *w = rng.random_range(-scale..scale);
            }
        };
        let (k, h, i) = (arch.kernels, arch.hidden, arch.hidden_inputs());
        let conv = model.params.layer_mut("conv").unwrap();
        fill(&mut conv[..k * TAPS], 1.0 / (TAPS as f64).sqrt(), &mut rng);
        let hidden = model.params.layer_mut("hidden").unwrap();
        fill(&mut hidden[..h * i], 1.0 / (i as f64).sqrt(), &mut rng);
        let head = model.params.layer_mut("head").unwrap();
        fill(&mut head[..NUM_CLASSES * h], 1.0 / (h as f64).sqrt(), &mut rng);
        model
    }

    pub fn from_params(arch: Architecture, params: FlatParams) -> Result<Self, ParamError> {
        if params.layout() != &arch.layout() {
            return Err(ParamError::LayoutMismatch);
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FlatParams {
        &mut self.params
    }

    pub fn into_params(self) -> FlatParams {
        self.params
    }

    fn weights(&self) -> Weights<'_> {
        let (k, h, i) = (self.arch.kernels, self.arch.hidden, self.arch.hidden_inputs());
        let conv = self.params.layer("conv").unwrap();
        let hidden = self.params.layer("hidden").unwrap();
        let head = self.params.layer("head").unwrap();
        Weights {
            conv_w: &conv[..k * TAPS],
            conv_b: &conv[k * TAPS..],
            hid_w: &hidden[..h * i],
            hid_b: &hidden[h * i..],
            head_w: &head[..NUM_CLASSES * h],
            head_b: &head[NUM_CLASSES * h..],
        }
    }

    fn scratch(&self) -> PixelCache {
        PixelCache {
            patch: [0.0; TAPS],
            input: vec![0.0; self.arch.hidden_inputs()],
            hidden: vec![0.0; self.arch.hidden],
            probs: [0.0; NUM_CLASSES],
            scores: [0.0; NUM_CLASSES],
        }
    }

    /// Forward pass of one pixel into a reused `cache`.
    fn pixel_forward(
        &self,
        w: &Weights<'_>,
        feats: &[f64; FIXED_FEATURES],
        patch: [f64; TAPS],
        cache: &mut PixelCache,
    ) {
        let (k, h, ni) = (self.arch.kernels, self.arch.hidden, self.arch.hidden_inputs());
        cache.patch = patch;
        cache.input[..FIXED_FEATURES].copy_from_slice(feats);
        for kk in 0..k {
            let row = &w.conv_w[kk * TAPS..(kk + 1) * TAPS];
            let a: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() + w.conv_b[kk];
            cache.input[FIXED_FEATURES + kk] = a.tanh();
        }
        for j in 0..h {
            let row = &w.hid_w[j * ni..(j + 1) * ni];
            let a: f64 = row.iter().zip(&cache.input).map(|(a, b)| a * b).sum::<f64>() + w.hid_b[j];
            cache.hidden[j] = a.tanh();
        }
        for c in 0..NUM_CLASSES {
            let row = &w.head_w[c * h..(c + 1) * h];
            cache.scores[c] = row.iter().zip(&cache.hidden).map(|(a, b)| a * b).sum::<f64>() + w.head_b[c];
        }
        cache.probs = softmax(&cache.scores);
    }

    pub fn forward(&self, image: &Image) -> ScoreGrid {
        let w = self.weights();
        let feats = pixel_features(image);
        let mut cache = self.scratch();
        let scores = (0..image.plane_len())
            .map(|p| {
                let (r, c) = (p / image.width(), p % image.width());
                self.pixel_forward(&w, &feats[p], patch(image, r, c), &mut cache);
                cache.scores
            })
            .collect();
        ScoreGrid {
            height: image.height(),
            width: image.width(),
            scores,
        }
    }

    pub fn predict(&self, image: &Image) -> Mask {
        self.forward(image).argmax()
    }

    /// Mean per-pixel cross-entropy over the given samples.
    pub fn loss(&self, batch: &[(&Image, &Mask)]) -> f64 {
        self.loss_and_grad_inner(batch, false).0
    }

    /// Mean per-pixel cross-entropy and its gradient with respect to every
    /// parameter, in layout order.
    pub fn loss_and_grad(&self, batch: &[(&Image, &Mask)]) -> (f64, Vec<f64>) {
        self.loss_and_grad_inner(batch, true)
    }

    fn loss_and_grad_inner(&self, batch: &[(&Image, &Mask)], want_grad: bool) -> (f64, Vec<f64>) {
        let (k, h, ni) = (self.arch.kernels, self.arch.hidden, self.arch.hidden_inputs());
        let w = self.weights();
        let layout = self.params.layout();
        let conv_off = layout.get("conv").unwrap().offset;
        let hid_off = layout.get("hidden").unwrap().offset;
        let head_off = layout.get("head").unwrap().offset;
        let mut grad = vec![0.0; if want_grad { self.params.values().len() } else { 0 }];

        let n_pixels: usize = batch.iter().map(|(img, _)| img.plane_len()).sum();
        if n_pixels == 0 {
            return (0.0, grad);
        }
        let scale = 1.0 / n_pixels as f64;
        let mut loss = 0.0;
        let mut d_hidden = vec![0.0; h];
        let mut d_input = vec![0.0; ni];
        let mut cache = self.scratch();

        for (image, mask) in batch {
            let feats = pixel_features(image);
            for (p, feat) in feats.iter().enumerate() {
                let (r, c) = (p / image.width(), p % image.width());
                self.pixel_forward(&w, feat, patch(image, r, c), &mut cache);
                let target = mask.labels()[p] as usize;
                loss -= log_softmax(&cache.scores)[target] * scale;
                if !want_grad {
                    continue;
                }

                // head
                let mut d_scores = cache.probs;
                d_scores[target] -= 1.0;
                for v in &mut d_scores {
                    *v *= scale;
                }
                d_hidden.iter_mut().for_each(|v| *v = 0.0);
                for (cls, &ds) in d_scores.iter().enumerate() {
                    let base = head_off + cls * h;
                    for j in 0..h {
                        grad[base + j] += ds * cache.hidden[j];
                        d_hidden[j] += ds * w.head_w[cls * h + j];
                    }
                    grad[head_off + NUM_CLASSES * h + cls] += ds;
                }

                // hidden
                d_input.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..h {
                    let da = d_hidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
                    let base = hid_off + j * ni;
                    for i in 0..ni {
                        grad[base + i] += da * cache.input[i];
                        d_input[i] += da * w.hid_w[j * ni + i];
                    }
                    grad[hid_off + h * ni + j] += da;
                }

                // conv
                for kk in 0..k {
                    let out = cache.input[FIXED_FEATURES + kk];
                    let da = d_input[FIXED_FEATURES + kk] * (1.0 - out * out);
                    let base = conv_off + kk * TAPS;
                    for t in 0..TAPS {
                        grad[base + t] += da * cache.patch[t];
                    }
                    grad[conv_off + k * TAPS + kk] += da;
                }
            }
        }
        (loss, grad)
    }
}

fn softmax(s: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; NUM_CLASSES];
    let mut z = 0.0;
    for (o, &x) in e.iter_mut().zip(s) {
        *o = (x - m).exp();
        z += *o;
    }
    e.map(|v| v / z)
}

fn log_softmax(s: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    s.map(|x| x - lse)
}

/// 3x3 neighbourhood of channel 0, zero outside the image.
fn patch(image: &Image, r: usize, c: usize) -> [f64; TAPS] {
    let mut out = [0.0; TAPS];
    let (h, w) = (image.height() as isize, image.width() as isize);
    let plane = image.plane(0);
    let mut t = 0;
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && rr < h && cc >= 0 && cc < w {
                out[t] = plane[(rr * w + cc) as usize];
            }
            t += 1;
        }
    }
    out
}

/// Fixed per-pixel features of channel 0: intensity, in-bounds 3x3 mean,
/// horizontal and vertical central differences (clamped at borders), and
/// distance from the image centre in half-widths.
pub fn pixel_features(image: &Image) -> Vec<[f64; FIXED_FEATURES]> {
    let (h, w) = (image.height(), image.width());
    let plane = image.plane(0);
    let at = |r: usize, c: usize| plane[r * w + c];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let half = (h.min(w) as f64 / 2.0).max(1.0);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    sum += at(rr, cc);
                    n += 1.0;
                }
            }
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            let dy = (r as f64 - cy) / half;
            let dx = (c as f64 - cx) / half;
            out.push([at(r, c), sum / n, gx, gy, (dx * dx + dy * dy).sqrt()]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean batch loss of the last epoch, `None` when no epoch ran.
    pub final_loss: Option<f64>,
    /// Raw (unmixed) statistics of each batch of the last epoch.
    pub style_buffer: Vec<StyleStats>,
}

/// Mini-batch SGD on per-pixel cross-entropy. Batches are reshuffled every
/// epoch with `rng`; when a mixer is supplied every batch passes through it
/// before the forward pass.
pub fn train_local<R: Rng>(
    model: &ToyModel,
    data: &[SegSample],
    config: &TrainConfig,
    mut mixer: Option<&mut StyleMixer<'_>>,
    rng: &mut R,
) -> TrainOutcome {
    let mut model = model.clone();
    let mut final_loss = None;
    let mut style_buffer = Vec::new();
    let batch_size = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        let last_epoch = epoch + 1 == config.epochs;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let images: Vec<Image> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            if last_epoch {
                style_buffer.push(extract_stats(&images).expect("non-empty batch"));
            }
            let images = match mixer.as_deref_mut() {
                Some(m) => m.apply(&images, rng),
                None => images,
            };
            let batch: Vec<(&Image, &Mask)> = images
                .iter()
                .zip(chunk)
                .map(|(img, &i)| (img, &data[i].mask))
                .collect();
            let (loss, grad) = model.loss_and_grad(&batch);
            epoch_loss += loss;
            batches += 1;
            if config.lr != 0.0 {
                for (p, g) in model.params.values_mut().iter_mut().zip(&grad) {
                    *p -= config.lr * g;
                }
            }
        }
        if batches > 0 {
            final_loss = Some(epoch_loss / batches as f64);
        }
    }
    model.params.set_sample_count(data.len() as u64);
    TrainOutcome {
        model,
        final_loss,
        style_buffer,
    }
}

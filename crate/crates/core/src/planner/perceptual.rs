use rand_distr::{Distribution, Normal};

use crate::cdit::{decode, LatentState, ModelConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::world::Frame;

const STAGES: [usize; 3] = [8, 16, 32];
const FEATURE_SEED: u64 = 0x5eed_f00d;
const NORM_EPS: f64 = 1e-10;
/// Input resolutions: full, half and quarter.
const PYRAMID: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    w: Vec<f64>,
}

impl Conv {
    /// 3x3, stride 2, zero padding 1, leaky ReLU.
    fn apply(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; oh * ow * self.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * self.cout..][..self.cout];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &x[(iy as usize * w + ix as usize) * self.cin..][..self.cin];
                        for (co, acc) in o.iter_mut().enumerate() {
                            let wk = &self.w[co * self.cin * 9..];
                            for (ci, &v) in px.iter().enumerate() {
                                *acc += wk[ci * 9 + ky * 3 + kx] * v;
                            }
                        }
                    }
                }
                for v in o.iter_mut() {
                    if *v < 0.0 {
                        *v *= 0.2;
                    }
                }
            }
        }
        (out, oh, ow)
    }
}

/// 2x2 average pooling (odd edges keep their last row/column).
fn avg_pool(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = [2 * oy, (2 * oy + 1).min(h - 1)];
            let xs = [2 * ox, (2 * ox + 1).min(w - 1)];
            for ch in 0..c {
                let mut acc = 0.0;
                for y in ys {
                    for xx in xs {
                        acc += x[(y * w + xx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc / 4.0;
            }
        }
    }
    (out, oh, ow)
}

/// Channel-normalized activations of every stage at every pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    stages: Vec<(Vec<f64>, usize)>,
    pixels: Vec<f64>,
    dims: (usize, usize, usize),
}

/// Similarity from a frozen random convolutional network blended with pixel
/// MSE: `S = -(lambda * feature_distance + (1 - lambda) * mse)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualScorer {
    convs: Vec<Conv>,
    pub lambda: f64,
}

impl Default for PerceptualScorer {
    fn default() -> Self {
        Self::new(3, 0.8)
    }
}

impl PerceptualScorer {
    pub fn new(channels: usize, lambda: f64) -> Self {
        let mut r = rng::stream(FEATURE_SEED, "perceptual");
        let mut cin = channels;
        let convs = STAGES
            .iter()
            .map(|&cout| {
                let normal = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("valid std");
                let w = (0..cout * cin * 9).map(|_| normal.sample(&mut r)).collect();
                let c = Conv { cin, cout, w };
                cin = cout;
                c
            })
            .collect();
        PerceptualScorer { convs, lambda }
    }

    pub fn features(&self, frame: &Frame) -> Result<Features> {
        if frame.channels != self.convs[0].cin {
            return Err(Error::shape("perceptual", format!("{} channels, scorer expects {}", frame.channels, self.convs[0].cin)));
        }
        let pixels: Vec<f64> = frame.data.iter().map(|&v| v as f64).collect();
        let c = frame.channels;
        let mut level: (Vec<f64>, usize, usize) = (pixels.iter().map(|v| v - 0.5).collect(), frame.height, frame.width);
        let mut stages = Vec::with_capacity(self.convs.len() * PYRAMID);
        for l in 0..PYRAMID {
            if l > 0 {
                level = avg_pool(&level.0, level.1, level.2, c);
            }
            let (mut x, mut h, mut w) = level.clone();
            for conv in &self.convs {
                (x, h, w) = conv.apply(&x, h, w);
                let mut normed = x.clone();
                for px in normed.chunks_mut(conv.cout) {
                    let n = px.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
                    px.iter_mut().for_each(|v| *v /= n);
                }
                stages.push((normed, conv.cout));
            }
        }
        Ok(Features { stages, pixels, dims: (frame.height, frame.width, frame.channels) })
    }

    /// Mean over pyramid levels and stages of the spatially averaged squared
    /// distance between unit-normalized channel vectors; in `[0, 4]`.
    pub fn feature_distance(&self, a: &Features, b: &Features) -> Result<f64> {
        if a.dims != b.dims {
            return Err(Error::shape("perceptual", format!("{:?} vs {:?}", a.dims, b.dims)));
        }
        let mut total = 0.0;
        for ((fa, c), (fb, _)) in a.stages.iter().zip(&b.stages) {
            let sq: f64 = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum();
            total += sq / (fa.len() / c) as f64;
        }
        Ok(total / a.stages.len() as f64)
    }

    pub fn score_features(&self, a: &Features, b: &Features) -> Result<f64> {
        let fd = self.feature_distance(a, b)?;
        let mse = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64;
        Ok(-(self.lambda * fd + (1.0 - self.lambda) * mse))
    }

    pub fn score(&self, a: &Frame, b: &Frame) -> Result<f64> {
        self.score_features(&self.features(a)?, &self.features(b)?)
    }

    /// Scores two latent states through their decoded, clamped frames.
    pub fn score_latents(&self, a: &LatentState, b: &LatentState, config: &ModelConfig) -> Result<f64> {
        if a.data.len() != b.data.len() {
            return Err(Error::shape("perceptual", format!("{} vs {} latent values", a.data.len(), b.data.len())));
        }
        self.score(&decode(a, config)?.clamped(), &decode(b, config)?.clamped())
    }

    /// Upper bound on `|S|` for frames with values in `[0, 1]`.
    pub fn max_magnitude(&self) -> f64 {
        self.lambda * 4.0 + (1.0 - self.lambda)
    }
}

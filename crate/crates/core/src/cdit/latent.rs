use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::world::Frame;

/// One frame as `n` tokens of `patch^2 * C` values, row-major `[n, d_latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentState {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != tokens * dim {
            return Err(Error::shape("latent", format!("{tokens}x{dim} vs {} values", data.len())));
        }
        Ok(LatentState { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        LatentState { tokens, dim, data: vec![0.0; tokens * dim] }
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mse(&self, other: &LatentState) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n
    }
}

/// Splits a frame into non-overlapping patches. Token `r * gw + c` holds
/// the patch at grid cell `(r, c)`, flattened as `(dy, dx, channel)`.
pub fn encode(frame: &Frame, config: &ModelConfig) -> Result<LatentState> {
    let (p, c) = (config.patch_size, config.channels);
    if frame.height != config.height || frame.width != config.width || frame.channels != c {
        return Err(Error::shape(
            "encode",
            format!("frame {}x{}x{} vs config {}x{}x{c}", frame.height, frame.width, frame.channels, config.height, config.width),
        ));
    }
    let (gh, gw) = config.grid();
    let dl = config.latent_dim();
    let mut data = Vec::with_capacity(gh * gw * dl);
    for r in 0..gh {
        for col in 0..gw {
            for dy in 0..p {
                let row = r * p + dy;
                let start = (row * frame.width + col * p) * c;
                data.extend_from_slice(&frame.data[start..start + p * c]);
            }
        }
    }
    LatentState::new(gh * gw, dl, data)
}

/// Exact inverse of [`encode`].
pub fn decode(latent: &LatentState, config: &ModelConfig) -> Result<Frame> {
    let (p, c) = (config.patch_size, config.channels);
    let (gh, gw) = config.grid();
    if latent.tokens != gh * gw || latent.dim != config.latent_dim() {
        return Err(Error::shape("decode", format!("latent {}x{} vs config {}x{}", latent.tokens, latent.dim, gh * gw, config.latent_dim())));
    }
    let mut data = vec![0f32; config.height * config.width * c];
    for r in 0..gh {
        for col in 0..gw {
            let tok = latent.token(r * gw + col);
            for dy in 0..p {
                let row = r * p + dy;
                let start = (row * config.width + col * p) * c;
                data[start..start + p * c].copy_from_slice(&tok[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
    Frame::new(config.height, config.width, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { height: 8, width: 12, patch_size: 4, ..Default::default() }
    }

    #[test]
    fn random_frame_round_trips() {
        let c = cfg();
        let mut r = rng::from_seed(4);
        let frame = Frame::new(8, 12, 3, (0..8 * 12 * 3).map(|_| r.random::<f32>()).collect()).unwrap();
        let lat = encode(&frame, &c).unwrap();
        assert_eq!((lat.tokens, lat.dim), (6, 48));
        let back = decode(&lat, &c).unwrap();
        assert!(back.data.iter().zip(&frame.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let again = encode(&back, &c).unwrap();
        assert_eq!(again, lat);
    }

    #[test]
    fn constant_frame_gives_equal_tokens() {
        let lat = encode(&Frame::filled(8, 12, 3, 0.25), &cfg()).unwrap();
        assert!((1..lat.tokens).all(|i| lat.token(i) == lat.token(0)));
    }

    #[test]
    fn patch_layout() {
        let c = ModelConfig { height: 4, width: 4, patch_size: 2, channels: 1, ..Default::default() };
        let frame = Frame::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        let lat = encode(&frame, &c).unwrap();
        assert_eq!(lat.token(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(lat.token(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(encode(&Frame::filled(8, 8, 3, 0.0), &cfg()).is_err());
        assert!(decode(&LatentState::zeros(5, 48), &cfg()).is_err());
    }
}

//! Parameter-difference-guided style mixing.
//!
//! Each client is paired with the client whose parameters are least similar
//! to its own. During local training an input batch is re-normalised with
//! channel statistics interpolated between its own and a batch of the
//! partner's, with the interpolation weight drawn from `Beta(phi, phi)`.
//! Only channel statistics cross client boundaries, never images.

use std::collections::BTreeMap;

use log::debug;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::grid::Image;
use crate::params::{cosine_similarity, FlatParams, ParamError};
use crate::tree::ClientId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StyleError {
    #[error("partner selection needs at least two clients")]
    SingleClient,
    #[error("client {0} not present")]
    UnknownClient(ClientId),
    #[error("empty batch")]
    EmptyBatch,
    #[error("images in a batch must share one shape")]
    ShapeMismatch,
    #[error("channel count mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("partner style buffer is empty")]
    EmptyBuffer,
    #[error("invalid mix config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub phi: f64,
    pub activation_prob: f64,
    pub epsilon: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            phi: 0.1,
            activation_prob: 0.5,
            epsilon: 1e-6,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), StyleError> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(StyleError::InvalidConfig(format!("phi must be > 0, got {}", self.phi)));
        }
        if !(0.0..=1.0).contains(&self.activation_prob) {
            return Err(StyleError::InvalidConfig(format!(
                "activation_prob must be in [0, 1], got {}",
                self.activation_prob
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(StyleError::InvalidConfig("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// The client `j != client` with the lowest parameter cosine similarity.
/// Ties go to the smallest id.
pub fn select_partner(
    client: ClientId,
    all_params: &BTreeMap<ClientId, FlatParams>,
) -> Result<ClientId, StyleError> {
    let own = all_params
        .get(&client)
        .ok_or(StyleError::UnknownClient(client))?;
    if all_params.len() < 2 {
        return Err(StyleError::SingleClient);
    }
    let mut best: Option<(f64, ClientId)> = None;
    for (&other, params) in all_params {
        if other == client {
            continue;
        }
        let sim = cosine_similarity(own, params)?;
        // BTreeMap iterates in id order, so strict < keeps the smallest id on ties
        if best.is_none_or(|(s, _)| sim < s) {
            best = Some((sim, other));
        }
    }
    Ok(best.expect("at least one other client").1)
}

/// Partner assignment for every client.
pub fn select_partners(
    all_params: &BTreeMap<ClientId, FlatParams>,
) -> Result<BTreeMap<ClientId, ClientId>, StyleError> {
    all_params
        .keys()
        .map(|&c| select_partner(c, all_params).map(|p| (c, p)))
        .collect()
}

fn check_batch(batch: &[Image]) -> Result<(usize, usize, usize), StyleError> {
    let first = batch.first().ok_or(StyleError::EmptyBatch)?;
    let shape = first.shape();
    if batch.iter().any(|img| img.shape() != shape) {
        return Err(StyleError::ShapeMismatch);
    }
    Ok(shape)
}

/// Channel statistics pooled over every pixel of every image in the batch.
pub fn extract_stats(batch: &[Image]) -> Result<StyleStats, StyleError> {
    let (channels, _, _) = check_batch(batch)?;
    let n = (batch.len() * batch[0].plane_len()) as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let mu = batch.iter().flat_map(|img| img.plane(c)).sum::<f64>() / n;
        let var = batch
            .iter()
            .flat_map(|img| img.plane(c))
            .map(|x| (x - mu) * (x - mu))
            .sum::<f64>()
            / n;
        mean[c] = mu;
        std[c] = var.sqrt();
    }
    Ok(StyleStats { mean, std })
}

/// Interpolated statistics `(beta_mix, gamma_mix)`.
pub fn mixed_stats(own: &StyleStats, partner: &StyleStats, lambda: f64) -> StyleStats {
    StyleStats {
        mean: own
            .mean
            .iter()
            .zip(&partner.mean)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
        std: own
            .std
            .iter()
            .zip(&partner.std)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    }
}

/// `gamma_mix * (x - mu_i) / (sigma_i + epsilon) + beta_mix`, channel-wise.
///
/// The statistics enter as plain numbers, so nothing downstream can
/// differentiate through them.
pub fn mix(
    batch: &[Image],
    own: &StyleStats,
    partner: &StyleStats,
    lambda: f64,
    epsilon: f64,
) -> Result<Vec<Image>, StyleError> {
    let (channels, _, _) = check_batch(batch)?;
    for stats in [own, partner] {
        if stats.channels() != channels || stats.std.len() != channels {
            return Err(StyleError::ChannelMismatch(channels, stats.channels()));
        }
    }
    let target = mixed_stats(own, partner, lambda);
    Ok(batch
        .iter()
        .map(|img| {
            let mut out = img.clone();
            for c in 0..channels {
                let (mu, sigma) = (own.mean[c], own.std[c]);
                let (beta, gamma) = (target.mean[c], target.std[c]);
                let denom = sigma + epsilon;
                if beta == mu && gamma == denom {
                    // the affine map is the identity; skip it to stay bit-exact
                    continue;
                }
                for x in out.plane_mut(c) {
                    let normalized = if denom > 0.0 { (*x - mu) / denom } else { 0.0 };
                    *x = gamma * normalized + beta;
                }
            }
            out
        })
        .collect())
}

/// Draws the interpolation weight.
pub fn sample_lambda<R: Rng + ?Sized>(phi: f64, rng: &mut R) -> f64 {
    let beta = Beta::new(phi, phi).expect("phi validated > 0");
    beta.sample(rng)
}

/// Applies [`mix`] with probability `activation_prob` against a statistics
/// entry drawn uniformly from the partner's buffer. Returns the batch
/// untouched when not activated, or when activated with an empty buffer.
pub fn maybe_mix<R: Rng + ?Sized>(
    batch: &[Image],
    partner_buffer: &[StyleStats],
    config: &MixConfig,
    rng: &mut R,
) -> Result<MixOutcome, StyleError> {
    if config.activation_prob <= 0.0 || !rng.random_bool(config.activation_prob) {
        return Ok(MixOutcome::Skipped(batch.to_vec()));
    }
    if partner_buffer.is_empty() {
        debug!("style mixing activated with no partner statistics; using identity");
        return Ok(MixOutcome::Skipped(batch.to_vec()));
    }
    let lambda = sample_lambda(config.phi, rng);
    let pick = rng.random_range(0..partner_buffer.len());
    let own = extract_stats(batch)?;
    let mixed = mix(batch, &own, &partner_buffer[pick], lambda, config.epsilon)?;
    Ok(MixOutcome::Mixed {
        batch: mixed,
        lambda,
        partner_index: pick,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixOutcome {
    Skipped(Vec<Image>),
    Mixed {
        batch: Vec<Image>,
        lambda: f64,
        partner_index: usize,
    },
}

impl MixOutcome {
    pub fn batch(&self) -> &[Image] {
        match self {
            MixOutcome::Skipped(b) => b,
            MixOutcome::Mixed { batch, .. } => batch,
        }
    }

    pub fn into_batch(self) -> Vec<Image> {
        match self {
            MixOutcome::Skipped(b) => b,
            MixOutcome::Mixed { batch, .. } => batch,
        }
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, MixOutcome::Mixed { .. })
    }
}

/// Training-time hook bound to one partner's statistics buffer.
#[derive(Debug)]
pub struct StyleMixer<'a> {
    buffer: &'a [StyleStats],
    config: MixConfig,
    calls: usize,
    applied: usize,
    lambdas: Vec<f64>,
}

impl<'a> StyleMixer<'a> {
    pub fn new(buffer: &'a [StyleStats], config: MixConfig) -> Self {
        Self {
            buffer,
            config,
            calls: 0,
            applied: 0,
            lambdas: Vec::new(),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&mut self, batch: &[Image], rng: &mut R) -> Vec<Image> {
        self.calls += 1;
        match maybe_mix(batch, self.buffer, &self.config, rng) {
            Ok(MixOutcome::Mixed { batch, lambda, .. }) => {
                self.applied += 1;
                self.lambdas.push(lambda);
                batch
            }
            Ok(MixOutcome::Skipped(batch)) => batch,
            Err(e) => {
                // partner stats with a different channel count; skip mixing
                log::warn!("style mixing failed: {e}");
                batch.to_vec()
            }
        }
    }

    /// Batches offered to the mixer.
    pub fn calls(&self) -> usize {
        self.calls
    }

    /// Batches actually re-styled.
    pub fn applied(&self) -> usize {
        self.applied
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

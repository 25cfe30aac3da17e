//! Feature-similarity-guided model selection and ensemble voting.
//!
//! A frozen extractor summarises each domain as a descriptor (feature means,
//! standard deviations and a histogram). The target domain is matched to the
//! most similar source domain, whose leaf-to-root chain of models votes on
//! every pixel with weights that decay with the model's height in the chain.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Image, Mask};
use crate::params::{cosine_slices, ParamError};
use crate::sim::data::NUM_CLASSES;
use crate::sim::model::{Architecture, ToyModel};
use crate::tree::{chain_to_root, ClientId, NodeId, NodeTree, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("no images supplied")]
    EmptyInput,
    #[error("no source descriptors")]
    EmptySources,
    #[error("chain has {chain} models but {weights} weights")]
    LengthMismatch { chain: usize, weights: usize },
    #[error("empty model chain")]
    EmptyChain,
    #[error("descriptor length {0} differs from {1}")]
    DescriptorMismatch(usize, usize),
    #[error("no descriptor for client {0}")]
    MissingDescriptor(ClientId),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// A frozen image encoder. Returns one feature map per output channel.
pub trait FeatureExtractor: Sync {
    fn extract(&self, image: &Image) -> Vec<Vec<f64>>;
}

/// Bank of seed-fixed random 3x3 filters with random biases, applied with
/// stride 2 to channel 0 and passed through a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjectionExtractor {
    filters: Vec<[f64; 9]>,
    biases: Vec<f64>,
    stride: usize,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64, n_filters: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut filters = Vec::with_capacity(n_filters);
        let mut biases = Vec::with_capacity(n_filters);
        for _ in 0..n_filters {
            let mut f = [0.0; 9];
            for w in &mut f {
                *w = rng.random_range(-1.0..1.0);
            }
            filters.push(f);
            biases.push(rng.random_range(-1.0..1.0));
        }
        Self {
            filters,
            biases,
            stride: 2,
        }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new(0x5eed_f00d, 8)
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn extract(&self, image: &Image) -> Vec<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        let plane = image.plane(0);
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            plane[r * w + c]
        };
        self.filters
            .iter()
            .zip(&self.biases)
            .map(|(f, &bias)| {
                let mut out = Vec::new();
                for r in (0..h).step_by(self.stride) {
                    for c in (0..w).step_by(self.stride) {
                        let mut acc = bias;
                        let mut t = 0;
                        for dr in -1isize..=1 {
                            for dc in -1isize..=1 {
                                acc += f[t] * at(r as isize + dr, c as isize + dc);
                                t += 1;
                            }
                        }
                        out.push(acc.max(0.0));
                    }
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDescriptor {
    /// `[mean per channel, std per channel, histogram bins]`
    pub vector: Vec<f64>,
    pub n_images: usize,
    pub channels: usize,
    pub bins: usize,
}

impl DomainDescriptor {
    pub fn histogram(&self) -> &[f64] {
        &self.vector[2 * self.channels..]
    }
}

/// Per-image descriptor: channel means and population stds of the feature
/// maps, then a histogram of feature values. Each channel is min-max scaled to
/// `[0, 1]` on its own and the per-channel histograms are averaged, so the
/// result has unit mass.
pub fn image_descriptor(features: &[Vec<f64>], bins: usize) -> Vec<f64> {
    let channels = features.len();
    let mut out = Vec::with_capacity(2 * channels + bins);
    let mut stds = Vec::with_capacity(channels);
    let mut hist = vec![0.0; bins];
    for ch in features {
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        out.push(mean);
        stds.push(var.sqrt());

        let (lo, hi) = ch
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let unit = 1.0 / (n * channels as f64);
        for &x in ch {
            let u = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            let b = ((u * bins as f64) as usize).min(bins - 1);
            hist[b] += unit;
        }
    }
    out.extend(stds);
    out.extend(hist);
    out
}

/// Mean of the per-image descriptors over `images`.
pub fn extract_descriptor(
    extractor: &dyn FeatureExtractor,
    images: &[Image],
    bins: usize,
) -> Result<DomainDescriptor, InferenceError> {
    let first = images.first().ok_or(InferenceError::EmptyInput)?;
    let channels = extractor.extract(first).len();
    let mut acc: Vec<f64> = Vec::new();
    for img in images {
        let d = image_descriptor(&extractor.extract(img), bins);
        if acc.is_empty() {
            acc = d;
        } else {
            if d.len() != acc.len() {
                return Err(InferenceError::DescriptorMismatch(d.len(), acc.len()));
            }
            acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
    }
    let n = images.len() as f64;
    if images.len() > 1 {
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(DomainDescriptor {
        vector: acc,
        n_images: images.len(),
        channels,
        bins,
    })
}

/// Source with the highest descriptor cosine similarity; ties to the
/// smallest id.
pub fn match_domain(
    target: &DomainDescriptor,
    sources: &BTreeMap<ClientId, DomainDescriptor>,
) -> Result<ClientId, InferenceError> {
    let mut best: Option<(f64, ClientId)> = None;
    for (&id, desc) in sources {
        if desc.vector.len() != target.vector.len() {
            return Err(InferenceError::DescriptorMismatch(desc.vector.len(), target.vector.len()));
        }
        let sim = cosine_slices(&target.vector, &desc.vector)?;
        if best.is_none_or(|(s, _)| sim > s) {
            best = Some((sim, id));
        }
    }
    best.map(|(_, id)| id).ok_or(InferenceError::EmptySources)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
    pub depth_coeff: f64,
}

/// Softmax of `-depth_coeff * h` over chain positions `h = 0..len`.
pub fn chain_weights(chain_length: usize, depth_coeff: f64) -> EnsembleWeights {
    let len = chain_length.max(1);
    let raw: Vec<f64> = (0..len).map(|h| (-depth_coeff * h as f64).exp()).collect();
    let z: f64 = raw.iter().sum();
    EnsembleWeights {
        weights: raw.into_iter().map(|w| w / z).collect(),
        depth_coeff,
    }
}

/// Weighted pixel vote over per-model predictions; ties to the smallest class.
pub fn vote(predictions: &[Mask], weights: &EnsembleWeights) -> Result<Mask, InferenceError> {
    let first = predictions.first().ok_or(InferenceError::EmptyChain)?;
    if predictions.len() != weights.weights.len() {
        return Err(InferenceError::LengthMismatch {
            chain: predictions.len(),
            weights: weights.weights.len(),
        });
    }
    let n = first.labels().len();
    let mut labels = Vec::with_capacity(n);
    for p in 0..n {
        let mut mass = [0.0; NUM_CLASSES];
        for (pred, w) in predictions.iter().zip(&weights.weights) {
            mass[pred.labels()[p] as usize] += w;
        }
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if mass[c] > mass[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    Ok(Mask::new(first.height(), first.width(), labels))
}

/// Every model predicts its argmax mask; the masks are combined by [`vote`].
pub fn ensemble_predict(
    chain: &[ToyModel],
    weights: &EnsembleWeights,
    image: &Image,
) -> Result<Mask, InferenceError> {
    if chain.is_empty() {
        return Err(InferenceError::EmptyChain);
    }
    if chain.len() != weights.weights.len() {
        return Err(InferenceError::LengthMismatch {
            chain: chain.len(),
            weights: weights.weights.len(),
        });
    }
    let preds: Vec<Mask> = chain.iter().map(|m| m.predict(image)).collect();
    vote(&preds, weights)
}

/// Which models of the matched chain take part in the vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// The root model only.
    Root,
    /// Every chain model except the leaf, depth-weighted.
    RootMid,
    /// The full chain with uniform weights.
    AllEqual,
    /// The full chain with depth-decayed weights.
    #[default]
    AllWeighted,
    /// The matched leaf only.
    BestLeaf,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::Root,
        SelectionStrategy::RootMid,
        SelectionStrategy::AllEqual,
        SelectionStrategy::AllWeighted,
        SelectionStrategy::BestLeaf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Root => "root",
            SelectionStrategy::RootMid => "root-mid",
            SelectionStrategy::AllEqual => "all-equal",
            SelectionStrategy::AllWeighted => "all-weighted",
            SelectionStrategy::BestLeaf => "best-leaf",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown selection strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub selection: SelectionStrategy,
    pub depth_coeff: f64,
    pub arch: Architecture,
    pub histogram_bins: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            selection: SelectionStrategy::AllWeighted,
            depth_coeff: 0.5,
            arch: Architecture::default(),
            histogram_bins: 16,
        }
    }
}

/// Models and weights chosen for one target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub matched: ClientId,
    pub nodes: Vec<NodeId>,
    pub weights: EnsembleWeights,
}

/// Matches the target and picks the voting models per `config.selection`.
pub fn select_models(
    tree: &NodeTree,
    source_descriptors: &BTreeMap<ClientId, DomainDescriptor>,
    target: &DomainDescriptor,
    config: &InferenceConfig,
) -> Result<Selection, InferenceError> {
    for c in tree.clients() {
        if !source_descriptors.contains_key(c) {
            return Err(InferenceError::MissingDescriptor(*c));
        }
    }
    let matched = match_domain(target, source_descriptors)?;
    let chain = chain_to_root(tree, matched)?;
    let ids: Vec<NodeId> = chain.iter().map(|n| n.id).collect();
    let (nodes, coeff) = match config.selection {
        SelectionStrategy::Root => (vec![*ids.last().unwrap()], config.depth_coeff),
        SelectionStrategy::RootMid => (ids[1..].to_vec(), config.depth_coeff),
        SelectionStrategy::AllEqual => (ids, 0.0),
        SelectionStrategy::AllWeighted => (ids, config.depth_coeff),
        SelectionStrategy::BestLeaf => (vec![ids[0]], config.depth_coeff),
    };
    let weights = chain_weights(nodes.len(), coeff);
    Ok(Selection { matched, nodes, weights })
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub selection: Selection,
    pub masks: Vec<Mask>,
}

impl InferenceResult {
    /// One decision line per image.
    pub fn explain(&self, names: &BTreeMap<ClientId, String>) -> String {
        let matched = names
            .get(&self.selection.matched)
            .cloned()
            .unwrap_or_else(|| self.selection.matched.to_string());
        let chain: Vec<String> = self.selection.nodes.iter().map(|n| n.to_string()).collect();
        let weights: Vec<String> = self
            .selection
            .weights
            .weights
            .iter()
            .map(|w| format!("{w:.6}"))
            .collect();
        let mut out = String::new();
        for i in 0..self.masks.len() {
            let _ = writeln!(
                out,
                "image={i} matched={matched} chain={} weights={}",
                chain.join(","),
                weights.join(",")
            );
        }
        out
    }
}

/// Descriptor, match, chain, weights and vote over every target image.
pub fn infer_target(
    tree: &NodeTree,
    source_descriptors: &BTreeMap<ClientId, DomainDescriptor>,
    target_images: &[Image],
    extractor: &dyn FeatureExtractor,
    config: &InferenceConfig,
) -> Result<InferenceResult, InferenceError> {
    let target = extract_descriptor(extractor, target_images, config.histogram_bins)?;
    let selection = select_models(tree, source_descriptors, &target, config)?;
    let models: Vec<ToyModel> = selection
        .nodes
        .iter()
        .map(|&id| ToyModel::from_params(config.arch, tree.node(id).params.clone()))
        .collect::<Result<_, _>>()?;
    let masks = target_images
        .iter()
        .map(|img| ensemble_predict(&models, &selection.weights, img))
        .collect::<Result<_, _>>()?;
    Ok(InferenceResult { selection, masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(v: Vec<f64>) -> DomainDescriptor {
        DomainDescriptor {
            channels: 0,
            bins: v.len(),
            vector: v,
            n_images: 1,
        }
    }

    #[test]
    fn chain_weight_examples() {
        assert_eq!(chain_weights(1, 0.5).weights, vec![1.0]);
        let w = chain_weights(3, 0.0).weights;
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        // softmax(0, -0.5, -1): 1/z, e^-0.5/z, e^-1/z with z = 1 + 0.60653 + 0.36788
        let w = chain_weights(3, 0.5).weights;
        for (got, want) in w.iter().zip([0.5065, 0.3072, 0.1863]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vote_examples() {
        let m = |l: u8| Mask::new(1, 1, vec![l]);
        let preds = [m(1), m(2), m(2)];
        let uniform = chain_weights(3, 0.0);
        assert_eq!(vote(&preds, &uniform).unwrap().labels(), &[2]);
        let skewed = EnsembleWeights {
            weights: vec![0.51, 0.30, 0.19],
            depth_coeff: 0.0,
        };
        assert_eq!(vote(&preds, &skewed).unwrap().labels(), &[1]);
        // exact tie between classes 0 and 2 goes to 0
        let tie = [m(2), m(0)];
        assert_eq!(vote(&tie, &chain_weights(2, 0.0)).unwrap().labels(), &[0]);
        assert!(matches!(
            vote(&preds, &chain_weights(2, 0.0)),
            Err(InferenceError::LengthMismatch { chain: 3, weights: 2 })
        ));
    }

    #[test]
    fn single_model_chain_matches_model_argmax() {
        let model = ToyModel::init(Architecture::default(), 3);
        let img = Image::gray(6, 6, (0..36).map(|i| (i as f64 / 36.0).sin().abs()).collect());
        let out = ensemble_predict(std::slice::from_ref(&model), &chain_weights(1, 0.5), &img).unwrap();
        assert_eq!(out, model.predict(&img));
    }

    #[test]
    fn match_examples() {
        let a = desc(vec![1.0, 0.0, 0.0]);
        let b = desc(vec![0.0, 1.0, 0.0]);
        let sources = BTreeMap::from([(4, a.clone()), (7, b.clone())]);
        assert_eq!(match_domain(&a, &sources).unwrap(), 4);
        let single = BTreeMap::from([(7, b.clone())]);
        assert_eq!(match_domain(&a, &single).unwrap(), 7);
        let mix = desc(vec![0.9, 0.1, 0.0]);
        assert_eq!(match_domain(&mix, &sources).unwrap(), 4);
        assert_eq!(match_domain(&mix, &BTreeMap::new()), Err(InferenceError::EmptySources));
        let tie = BTreeMap::from([(9, a.clone()), (2, a.clone())]);
        assert_eq!(match_domain(&a, &tie).unwrap(), 2);
    }

    #[test]
    fn descriptor_examples() {
        let ext = RandomProjectionExtractor::default();
        let img = Image::gray(8, 8, (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0).collect());
        let one = extract_descriptor(&ext, std::slice::from_ref(&img), 16).unwrap();
        let two = extract_descriptor(&ext, &[img.clone(), img.clone()], 16).unwrap();
        for (a, b) in one.vector.iter().zip(&two.vector) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((one.histogram().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(one, extract_descriptor(&RandomProjectionExtractor::default(), &[img], 16).unwrap());

        let flat = Image::filled(1, 8, 8, 0.4);
        let d = extract_descriptor(&ext, &[flat], 16).unwrap();
        assert!(d.vector[d.channels..2 * d.channels].iter().all(|s| s.abs() < 1e-12));
        let hist = d.histogram();
        assert_eq!(hist.iter().filter(|&&h| h > 0.0).count(), 1);
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert_eq!(extract_descriptor(&ext, &[], 16), Err(InferenceError::EmptyInput));
    }

    #[test]
    fn match_is_scale_invariant() {
        let sources = BTreeMap::from([
            (0, desc(vec![0.2, 0.9, 0.1])),
            (1, desc(vec![0.7, 0.1, 0.3])),
            (2, desc(vec![0.4, 0.4, 0.4])),
        ]);
        let target = desc(vec![0.6, 0.3, 0.2]);
        let want = match_domain(&target, &sources).unwrap();
        for k in [1e-3, 2.5, 1e4] {
            let scaled: BTreeMap<_, _> = sources
                .iter()
                .map(|(&id, d)| (id, desc(d.vector.iter().map(|x| x * k).collect())))
                .collect();
            let t = desc(target.vector.iter().map(|x| x * k * 3.0).collect());
            assert_eq!(match_domain(&t, &scaled).unwrap(), want);
        }
    }

    #[test]
    fn weighted_and_equal_votes_differ_where_leaf_wins() {
        // leaf, mid, root predictions on 4 pixels
        let leaf = Mask::new(1, 4, vec![1, 1, 2, 0]);
        let mid = Mask::new(1, 4, vec![2, 1, 0, 0]);
        let root = Mask::new(1, 4, vec![0, 1, 0, 0]);
        let preds = [leaf, mid, root];
        let weighted = vote(&preds, &chain_weights(3, 0.5)).unwrap();
        let equal = vote(&preds, &chain_weights(3, 0.0)).unwrap();
        // pixel 0: three-way split, leaf weight is largest under decay,
        // while an exact tie resolves to class 0 under equal weights;
        // pixel 2: leaf alone (0.5065) beats mid + root (0.4935)
        assert_eq!(weighted.labels(), &[1, 1, 2, 0]);
        assert_eq!(equal.labels(), &[0, 1, 0, 0]);
        let w = chain_weights(3, 0.5).weights;
        let brute = |pix: usize, ws: &[f64]| {
            let mut mass = [0.0; NUM_CLASSES];
            for (p, w) in preds.iter().zip(ws) {
                mass[p.labels()[pix] as usize] += w;
            }
            (0..NUM_CLASSES).fold(0, |b, c| if mass[c] > mass[b] { c } else { b }) as u8
        };
        for pix in 0..4 {
            assert_eq!(weighted.labels()[pix], brute(pix, &w));
            assert_eq!(equal.labels()[pix], brute(pix, &[1.0 / 3.0; 3]));
        }
    }

    #[test]
    fn identical_models_ignore_weights() {
        let m = Mask::new(2, 2, vec![0, 2, 1, 1]);
        let preds = [m.clone(), m.clone(), m.clone()];
        for d in [0.0, 0.5, 3.0] {
            assert_eq!(vote(&preds, &chain_weights(3, d)).unwrap(), m);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in SelectionStrategy::ALL {
            assert_eq!(s.name().parse::<SelectionStrategy>().unwrap(), s);
        }
        assert!("best".parse::<SelectionStrategy>().is_err());
    }
}

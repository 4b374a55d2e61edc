//! The calibration network: conv/pool blocks, global average pooling, a
//! fully connected feature layer and a 3-output regression head.

use super::layers::{
    gap_backward, gap_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    Conv3x3, CosineHead, Linear,
};
use super::tensor::{Elem, Tensor};
use super::NnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const NUM_OUTPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Affine,
    Cosine,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Affine => write!(f, "affine"),
            HeadKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub in_channels: usize,
    /// Output channels of each conv block; every block halves H and W.
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub head: HeadKind,
}

pub const ARCH_NAMES: &[&str] = &["calibnet-tiny", "calibnet-micro"];

impl ArchConfig {
    /// Look up a named architecture. Unknown names report the valid set.
    pub fn by_name(name: &str, head: HeadKind) -> Result<Self, NnError> {
        let (conv_channels, feature_dim) = match name {
            "calibnet-tiny" => (vec![16, 32, 64], 64),
            "calibnet-micro" => (vec![8, 16], 32),
            _ => {
                return Err(NnError::UnknownArch {
                    name: name.to_string(),
                    valid: ARCH_NAMES.join(", "),
                })
            }
        };
        Ok(Self {
            name: name.to_string(),
            in_channels: 3,
            conv_channels,
            feature_dim,
            head,
        })
    }

    /// Input height/width must be divisible by this.
    pub fn stride_total(&self) -> usize {
        1 << self.conv_channels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<E> {
    Affine(Linear<E>),
    Cosine(CosineHead<E>),
}

/// Regression network. A batch forward returns the 3 outputs per sample plus
/// a tap on the penultimate feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<E> {
    pub cfg: ArchConfig,
    pub blocks: Vec<Conv3x3<E>>,
    pub fc: Linear<E>,
    pub head: Head<E>,
}

/// Per-image activation cache, sufficient for exact reverse mode.
#[derive(Debug, Clone)]
struct ImageCache<E> {
    input: Vec<E>,
    /// Post-ReLU conv activations per block.
    acts: Vec<Vec<E>>,
    /// Post-pool activations per block.
    pools: Vec<Vec<E>>,
    pool_idx: Vec<Vec<u8>>,
    gap: Vec<E>,
    /// Post-ReLU feature vector.
    features: Vec<E>,
    outputs: [E; NUM_OUTPUTS],
}

/// Result of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<E> {
    /// `batch x 3`.
    pub outputs: Tensor<E>,
    /// `batch x feature_dim`, post-ReLU.
    pub features: Tensor<E>,
    images: Vec<ImageCache<E>>,
    h: usize,
    w: usize,
}

/// Gradients for every parameter, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<E> {
    pub tensors: Vec<Tensor<E>>,
}

impl<E: Elem> Grads<E> {
    pub fn zeros_like(net: &Network<E>) -> Self {
        Self {
            tensors: net.params().iter().map(|(_, t)| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<E>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}

impl<E: Elem> Network<E> {
    /// Build with zeroed conv/fc weights; call [`Network::init`] to randomize.
    pub fn new(cfg: ArchConfig) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for &out_ch in &cfg.conv_channels {
            blocks.push(Conv3x3::new(in_ch, out_ch));
            in_ch = out_ch;
        }
        let fc = Linear::new(in_ch, cfg.feature_dim);
        let head = match cfg.head {
            HeadKind::Affine => Head::Affine(Linear::new(cfg.feature_dim, NUM_OUTPUTS)),
            HeadKind::Cosine => Head::Cosine(CosineHead::new(cfg.feature_dim, NUM_OUTPUTS)),
        };
        Self {
            cfg,
            blocks,
            fc,
            head,
        }
    }

    /// He-style initialization, deterministic in the seed. Parameters are
    /// drawn in registry order.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut self.blocks {
            b.init(&mut rng);
        }
        self.fc.init(&mut rng);
        match &mut self.head {
            Head::Affine(l) => l.init(&mut rng),
            Head::Cosine(c) => c.init(&mut rng),
        }
    }

    pub fn seeded(cfg: ArchConfig, seed: u64) -> Self {
        let mut net = Self::new(cfg);
        net.init(seed);
        net
    }

    /// Named, ordered parameter registry.
    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.w"), &b.w));
            out.push((format!("block{i}.conv.b"), &b.b));
        }
        out.push(("fc.w".to_string(), &self.fc.w));
        out.push(("fc.b".to_string(), &self.fc.b));
        match &self.head {
            Head::Affine(l) => {
                out.push(("head.w".to_string(), &l.w));
                out.push(("head.b".to_string(), &l.b));
            }
            Head::Cosine(c) => {
                out.push(("head.w".to_string(), &c.w));
                out.push(("head.s".to_string(), &c.s));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv.w"), &mut b.w));
            out.push((format!("block{i}.conv.b"), &mut b.b));
        }
        out.push(("fc.w".to_string(), &mut self.fc.w));
        out.push(("fc.b".to_string(), &mut self.fc.b));
        match &mut self.head {
            Head::Affine(l) => {
                out.push(("head.w".to_string(), &mut l.w));
                out.push(("head.b".to_string(), &mut l.b));
            }
            Head::Cosine(c) => {
                out.push(("head.w".to_string(), &mut c.w));
                out.push(("head.s".to_string(), &mut c.s));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, batch: &Tensor<E>) -> Result<(usize, usize, usize), NnError> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1] != self.cfg.in_channels {
            return Err(NnError::ShapeMismatch {
                what: "input batch",
                expected: format!("N x {} x H x W", self.cfg.in_channels),
                got: format!("{dims:?}"),
            });
        }
        let (n, h, w) = (dims[0], dims[2], dims[3]);
        let s = self.cfg.stride_total();
        if h % s != 0 || w % s != 0 || h < s || w < s {
            return Err(NnError::ShapeMismatch {
                what: "input size",
                expected: format!("H and W divisible by {s}"),
                got: format!("{h} x {w}"),
            });
        }
        Ok((n, h, w))
    }

    fn image_forward(&self, input: &[E], h: usize, w: usize) -> Result<ImageCache<E>, NnError> {
        let mut acts = Vec::with_capacity(self.blocks.len());
        let mut pools = Vec::with_capacity(self.blocks.len());
        let mut pool_idx = Vec::with_capacity(self.blocks.len());
        let (mut ch, mut hh, mut ww) = (self.cfg.in_channels, h, w);
        let mut cur: Vec<E> = input.to_vec();
        for b in &self.blocks {
            let mut act = vec![E::zero(); b.out_ch * hh * ww];
            b.forward(&cur, &mut act, hh, ww);
            relu_forward(&mut act);
            let (oh, ow) = (hh / 2, ww / 2);
            let mut pooled = vec![E::zero(); b.out_ch * oh * ow];
            let mut idx = vec![0u8; b.out_ch * oh * ow];
            maxpool2_forward(&act, &mut pooled, &mut idx, b.out_ch, hh, ww);
            acts.push(act);
            pool_idx.push(idx);
            cur = pooled.clone();
            pools.push(pooled);
            ch = b.out_ch;
            hh = oh;
            ww = ow;
        }
        let mut gap = vec![E::zero(); ch];
        gap_forward(&cur, &mut gap, ch, hh * ww);
        let mut features = vec![E::zero(); self.cfg.feature_dim];
        self.fc.forward(&gap, &mut features);
        relu_forward(&mut features);
        let mut outputs = [E::zero(); NUM_OUTPUTS];
        match &self.head {
            Head::Affine(l) => l.forward(&features, &mut outputs),
            Head::Cosine(c) => c
                .forward(&features, &mut outputs)
                .map_err(|_| NnError::DegenerateFeature)?,
        }
        Ok(ImageCache {
            input: input.to_vec(),
            acts,
            pools,
            pool_idx,
            gap,
            features,
            outputs,
        })
    }

    /// Batch forward. Deterministic; images are independent, so the result
    /// is identical for any rayon worker count.
    pub fn forward(&self, batch: &Tensor<E>) -> Result<ForwardPass<E>, NnError> {
        let (n, h, w) = self.check_input(batch)?;
        let chw = self.cfg.in_channels * h * w;
        let images: Vec<ImageCache<E>> = batch
            .data()
            .par_chunks(chw)
            .map(|img| self.image_forward(img, h, w))
            .collect::<Result<_, _>>()?;
        let mut outputs = Tensor::zeros(&[n, NUM_OUTPUTS]);
        let mut features = Tensor::zeros(&[n, self.cfg.feature_dim]);
        for (i, img) in images.iter().enumerate() {
            outputs.data_mut()[i * NUM_OUTPUTS..(i + 1) * NUM_OUTPUTS]
                .copy_from_slice(&img.outputs);
            features.data_mut()[i * self.cfg.feature_dim..(i + 1) * self.cfg.feature_dim]
                .copy_from_slice(&img.features);
        }
        Ok(ForwardPass {
            outputs,
            features,
            images,
            h,
            w,
        })
    }

    /// Forward that keeps only the outputs (inference).
    pub fn predict(&self, batch: &Tensor<E>) -> Result<Tensor<E>, NnError> {
        Ok(self.forward(batch)?.outputs)
    }

    fn image_backward(
        &self,
        cache: &ImageCache<E>,
        d_out: &[E],
        d_feat_extra: Option<&[E]>,
        h: usize,
        w: usize,
    ) -> Grads<E> {
        let mut grads = Grads::zeros_like(self);
        let nb = self.blocks.len();
        // Registry order: blocks (w, b) pairs, then fc, then head.
        let (head_w_idx, head_b_idx) = (2 * nb + 2, 2 * nb + 3);
        let (fc_w_idx, fc_b_idx) = (2 * nb, 2 * nb + 1);

        let mut d_features = vec![E::zero(); self.cfg.feature_dim];
        match &self.head {
            Head::Affine(l) => {
                let (left, right) = grads.tensors.split_at_mut(head_b_idx);
                l.backward(
                    &cache.features,
                    d_out,
                    Some(&mut d_features),
                    &mut left[head_w_idx],
                    &mut right[0],
                );
            }
            Head::Cosine(c) => {
                let (left, right) = grads.tensors.split_at_mut(head_b_idx);
                c.backward(
                    &cache.features,
                    d_out,
                    &mut d_features,
                    &mut left[head_w_idx],
                    &mut right[0],
                );
            }
        }
        if let Some(extra) = d_feat_extra {
            for (d, e) in d_features.iter_mut().zip(extra) {
                *d = *d + *e;
            }
        }
        relu_backward(&cache.features, &mut d_features);

        let gap_ch = *self.cfg.conv_channels.last().unwrap();
        let mut d_gap = vec![E::zero(); gap_ch];
        {
            let (left, right) = grads.tensors.split_at_mut(fc_b_idx);
            self.fc.backward(
                &cache.gap,
                &d_features,
                Some(&mut d_gap),
                &mut left[fc_w_idx],
                &mut right[0],
            );
        }

        // Spatial dims after each block.
        let mut dims = Vec::with_capacity(nb);
        let (mut hh, mut ww) = (h, w);
        for _ in 0..nb {
            dims.push((hh, ww));
            hh /= 2;
            ww /= 2;
        }
        let (ph, pw) = (h >> nb, w >> nb);
        let mut d_pool = vec![E::zero(); gap_ch * ph * pw];
        gap_backward(&d_gap, &mut d_pool, gap_ch, ph * pw);

        for bi in (0..nb).rev() {
            let (bh, bw) = dims[bi];
            let block = &self.blocks[bi];
            let mut d_act = vec![E::zero(); block.out_ch * bh * bw];
            maxpool2_backward(&d_pool, &cache.pool_idx[bi], &mut d_act, block.out_ch, bh, bw);
            relu_backward(&cache.acts[bi], &mut d_act);
            let input = if bi == 0 {
                &cache.input
            } else {
                &cache.pools[bi - 1]
            };
            let mut d_prev = if bi > 0 {
                vec![E::zero(); block.in_ch * bh * bw]
            } else {
                Vec::new()
            };
            {
                let (left, right) = grads.tensors.split_at_mut(2 * bi + 1);
                block.backward(
                    input,
                    &d_act,
                    if bi > 0 { Some(&mut d_prev) } else { None },
                    &mut left[2 * bi],
                    &mut right[0],
                    bh,
                    bw,
                );
            }
            d_pool = d_prev;
        }
        grads
    }

    /// Exact reverse-mode gradients for every parameter. `d_outputs` is the
    /// loss gradient w.r.t. the head outputs (`batch x 3`); `d_features`
    /// optionally injects a loss gradient at the feature tap (`batch x F`).
    /// Per-image contributions are summed in batch order, so the result is
    /// deterministic for any worker count.
    pub fn backward(
        &self,
        pass: &ForwardPass<E>,
        d_outputs: &Tensor<E>,
        d_features: Option<&Tensor<E>>,
    ) -> Result<Grads<E>, NnError> {
        let n = pass.images.len();
        if d_outputs.dims() != [n, NUM_OUTPUTS] {
            return Err(NnError::ShapeMismatch {
                what: "d_outputs",
                expected: format!("{n} x {NUM_OUTPUTS}"),
                got: format!("{:?}", d_outputs.dims()),
            });
        }
        if let Some(df) = d_features {
            if df.dims() != [n, self.cfg.feature_dim] {
                return Err(NnError::ShapeMismatch {
                    what: "d_features",
                    expected: format!("{n} x {}", self.cfg.feature_dim),
                    got: format!("{:?}", df.dims()),
                });
            }
        }
        let fdim = self.cfg.feature_dim;
        let per_image: Vec<Grads<E>> = pass
            .images
            .par_iter()
            .enumerate()
            .map(|(i, cache)| {
                let d_out = &d_outputs.data()[i * NUM_OUTPUTS..(i + 1) * NUM_OUTPUTS];
                let d_feat = d_features.map(|df| &df.data()[i * fdim..(i + 1) * fdim]);
                self.image_backward(cache, d_out, d_feat, pass.h, pass.w)
            })
            .collect();
        let mut total = Grads::zeros_like(self);
        for g in &per_image {
            total.add_assign(g);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_net(seed: u64) -> Network<f64> {
        Network::seeded(
            ArchConfig::by_name("calibnet-micro", HeadKind::Affine).unwrap(),
            seed,
        )
    }

    #[test]
    fn unknown_arch_lists_valid_names() {
        let err = ArchConfig::by_name("resnet50", HeadKind::Affine).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("calibnet-tiny"), "{msg}");
        assert!(msg.contains("calibnet-micro"), "{msg}");
    }

    #[test]
    fn zero_weight_affine_head_outputs_zero() {
        let cfg = ArchConfig::by_name("calibnet-micro", HeadKind::Affine).unwrap();
        let net = Network::<f64>::new(cfg); // all weights zero
        let batch = Tensor::scalar_fill(&[2, 3, 8, 8], 0.3);
        let pass = net.forward(&batch).unwrap();
        assert!(pass.outputs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_independence() {
        let net = micro_net(11);
        let mut rng_data: Vec<f64> = Vec::new();
        for i in 0..16 * 3 * 8 * 8 {
            rng_data.push(((i * 2654435761_usize) % 1000) as f64 / 1000.0 - 0.5);
        }
        let big = Tensor::from_vec(&[16, 3, 8, 8], rng_data.clone());
        let single = Tensor::from_vec(&[1, 3, 8, 8], rng_data[5 * 192..6 * 192].to_vec());
        let big_pass = net.forward(&big).unwrap();
        let single_pass = net.forward(&single).unwrap();
        for k in 0..NUM_OUTPUTS {
            let a = big_pass.outputs.data()[5 * NUM_OUTPUTS + k];
            let b = single_pass.outputs.data()[k];
            assert!((a - b).abs() < 1e-6, "row 5 differs: {a} vs {b}");
        }
    }

    #[test]
    fn features_nonzero_on_random_nets() {
        for seed in 0..5 {
            let net = micro_net(seed);
            let batch = Tensor::scalar_fill(&[1, 3, 8, 8], 0.25);
            let pass = net.forward(&batch).unwrap();
            let norm: f64 = pass.features.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm.is_finite() && norm > 0.0, "seed {seed}: norm {norm}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = micro_net(1);
        let bad = Tensor::<f64>::zeros(&[1, 3, 9, 9]);
        assert!(net.forward(&bad).is_err());
        let bad_ch = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        assert!(net.forward(&bad_ch).is_err());
    }

    #[test]
    fn constant_loss_means_zero_gradients() {
        let net = micro_net(3);
        let batch = Tensor::scalar_fill(&[2, 3, 8, 8], 0.1);
        let pass = net.forward(&batch).unwrap();
        let d_out = Tensor::zeros(&[2, NUM_OUTPUTS]);
        let grads = net.backward(&pass, &d_out, None).unwrap();
        for g in &grads.tensors {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }
}
